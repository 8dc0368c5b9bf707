//! Synthetic world with an engineered gender skew.
//!
//! Twenty professions come in ten pairs, one member stereotyped male and
//! one female. Each pair owns four activities; an activity is performed by
//! its primary profession with probability `activity_skew` and by the other
//! member otherwise. Pronouns follow the profession's stereotype with
//! probability `pronoun_skew`. A gender-neutral reader should therefore
//! infer the profession from the activity alone, while a model trained on
//! skewed text also leans on the pronoun.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{CorefInstance, Template};
use crate::rng::{self, StreamRng};
use crate::vocab::ProfessionLexicon;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfessionPair {
    pub male: &'static str,
    pub female: &'static str,
    pub male_activities: [&'static str; 2],
    pub female_activities: [&'static str; 2],
}

pub const PAIRS: [ProfessionPair; 10] = [
    pair("surgeon", "nurse", ["operated", "sutured"], ["bandaged", "comforted"]),
    pair("engineer", "designer", ["calculated", "welded"], ["sketched", "decorated"]),
    pair("carpenter", "housekeeper", ["hammered", "sawed"], ["dusted", "swept"]),
    pair("mechanic", "hairdresser", ["repaired", "tuned"], ["styled", "trimmed"]),
    pair("pilot", "dancer", ["flew", "navigated"], ["twirled", "rehearsed"]),
    pair("lawyer", "secretary", ["argued", "litigated"], ["typed", "filed"]),
    pair("farmer", "baker", ["plowed", "harvested"], ["kneaded", "frosted"]),
    pair("plumber", "cashier", ["unclogged", "soldered"], ["counted", "scanned"]),
    pair("architect", "librarian", ["drafted", "surveyed"], ["shelved", "catalogued"]),
    pair("programmer", "receptionist", ["coded", "debugged"], ["greeted", "answered"]),
];

const fn pair(
    male: &'static str,
    female: &'static str,
    male_activities: [&'static str; 2],
    female_activities: [&'static str; 2],
) -> ProfessionPair {
    ProfessionPair {
        male,
        female,
        male_activities,
        female_activities,
    }
}

pub const TAILS: [&str; 8] = ["left", "smiled", "rested", "waited", "laughed", "sighed", "nodded", "slept"];
pub const CONNECTORS: [&str; 2] = ["and", "then"];

const ANIMALS: [(&str, &str); 6] = [
    ("cat", "mouse"),
    ("dog", "ball"),
    ("bird", "seed"),
    ("horse", "apple"),
    ("fox", "rabbit"),
    ("cow", "grass"),
];
const ANIMAL_VERBS: [&str; 3] = ["chased", "found", "watched"];
const FIELDS: [&str; 4] = ["garden", "field", "yard", "barn"];
const QUALITIES: [(&str, &str); 6] = [
    ("sky", "blue"),
    ("leaf", "green"),
    ("snow", "white"),
    ("sun", "bright"),
    ("night", "dark"),
    ("sea", "deep"),
];
const PLACES: [(&str, &str); 4] = [("park", "bench"), ("river", "bridge"), ("station", "clock"), ("market", "stall")];
const WHEN: [&str; 3] = ["today", "yesterday", "again"];

/// One activity with its pair and which member performs it primarily.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Activity {
    pub pair: usize,
    pub verb: &'static str,
    pub primary_is_male: bool,
}

impl Activity {
    pub fn primary(&self) -> &'static str {
        let p = &PAIRS[self.pair];
        if self.primary_is_male {
            p.male
        } else {
            p.female
        }
    }

    pub fn secondary(&self) -> &'static str {
        let p = &PAIRS[self.pair];
        if self.primary_is_male {
            p.female
        } else {
            p.male
        }
    }
}

pub fn activities() -> Vec<Activity> {
    let mut out = Vec::new();
    for (i, p) in PAIRS.iter().enumerate() {
        for verb in p.male_activities {
            out.push(Activity {
                pair: i,
                verb,
                primary_is_male: true,
            });
        }
        for verb in p.female_activities {
            out.push(Activity {
                pair: i,
                verb,
                primary_is_male: false,
            });
        }
    }
    out
}

/// Professions in slot order: the male member of each pair, then the female.
pub fn professions() -> Vec<&'static str> {
    PAIRS.iter().flat_map(|p| [p.male, p.female]).collect()
}

pub fn male_stereotyped(profession: &str) -> Option<bool> {
    PAIRS.iter().find_map(|p| {
        if p.male == profession {
            Some(true)
        } else if p.female == profession {
            Some(false)
        } else {
            None
        }
    })
}

pub fn lexicon() -> ProfessionLexicon {
    ProfessionLexicon::from_words(professions()).expect("built-in professions are valid").0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    /// Probability that a pronoun matches the profession's stereotype.
    pub pronoun_skew: f64,
    /// Probability that an activity is done by its primary profession.
    pub activity_skew: f64,
    /// Shares of profession-free, template and activity sentences.
    pub general_share: f64,
    pub template_share: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            pronoun_skew: 0.9,
            activity_skew: 0.7,
            general_share: 0.4,
            template_share: 0.2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.pronoun_skew)
            || !unit(self.activity_skew)
            || !unit(self.general_share)
            || !unit(self.template_share)
            || self.general_share + self.template_share > 1.0
        {
            return Err(Error::Config("world probabilities must lie in [0, 1] and shares sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub templates: Vec<Template>,
}

impl World {
    pub fn new(config: WorldConfig, templates: Vec<Template>) -> Result<Self> {
        config.validate()?;
        if templates.is_empty() {
            return Err(Error::Input("the world needs at least one template".into()));
        }
        Ok(Self { config, templates })
    }

    pub fn with_builtin_templates(config: WorldConfig) -> Result<Self> {
        Self::new(config, crate::eval::builtin_templates())
    }

    fn pronoun(&self, profession: &str, rng: &mut StreamRng) -> &'static str {
        let male = male_stereotyped(profession).unwrap_or(true);
        let follows = rng.random::<f64>() < self.config.pronoun_skew;
        if male == follows {
            "he"
        } else {
            "she"
        }
    }

    fn activity_sentence(&self, rng: &mut StreamRng) -> String {
        let acts = activities();
        let act = acts.choose(rng).expect("activities");
        let profession = if rng.random::<f64>() < self.config.activity_skew {
            act.primary()
        } else {
            act.secondary()
        };
        let pronoun = self.pronoun(profession, rng);
        let connector = CONNECTORS.choose(rng).expect("connectors");
        let tail = TAILS.choose(rng).expect("tails");
        format!("the {profession} {} {connector} {pronoun} {tail} .", act.verb)
    }

    fn template_sentence(&self, rng: &mut StreamRng) -> String {
        let all = professions();
        let profession = all.choose(rng).expect("professions");
        let pronoun = self.pronoun(profession, rng);
        let template = self.templates.choose(rng).expect("templates");
        template.fill(pronoun, profession)
    }

    /// Profession-free sentence with learnable regularities.
    pub fn general_sentence(rng: &mut StreamRng) -> String {
        match rng.random_range(0..3) {
            0 => {
                let (animal, object) = ANIMALS.choose(rng).expect("animals");
                let verb = ANIMAL_VERBS.choose(rng).expect("verbs");
                let field = FIELDS.choose(rng).expect("fields");
                format!("the {animal} {verb} the {object} in the {field} .")
            }
            1 => {
                let (thing, quality) = QUALITIES.choose(rng).expect("qualities");
                let when = WHEN.choose(rng).expect("when");
                format!("the {thing} was very {quality} {when} .")
            }
            _ => {
                let pronoun = if rng.random::<bool>() { "he" } else { "she" };
                let (place, object) = PLACES.choose(rng).expect("places");
                format!("{pronoun} walked to the {place} and sat near the {object} .")
            }
        }
    }

    /// `count` sentences mixing general, template and activity text, drawn
    /// from stream `label` of `seed`.
    pub fn corpus(&self, count: usize, seed: u64, label: &str) -> Vec<String> {
        let mut rng = rng::stream(seed, label);
        (0..count)
            .map(|_| {
                let r: f64 = rng.random();
                if r < self.config.general_share {
                    Self::general_sentence(&mut rng)
                } else if r < self.config.general_share + self.config.template_share {
                    self.template_sentence(&mut rng)
                } else {
                    self.activity_sentence(&mut rng)
                }
            })
            .collect()
    }

    pub fn general_corpus(count: usize, seed: u64, label: &str) -> Vec<String> {
        let mut rng = rng::stream(seed, label);
        (0..count).map(|_| Self::general_sentence(&mut rng)).collect()
    }
}

/// Every (activity, connector, pronoun, tail) combination as a coreference
/// instance. Gold is the activity's primary profession; candidate order is
/// shuffled by `seed`. Both pronoun genders appear for every schema.
pub fn coref_instances(seed: u64) -> Vec<CorefInstance> {
    let mut rng = rng::stream(seed, "coref-order");
    let mut out = Vec::new();
    for act in activities() {
        for connector in CONNECTORS {
            for tail in TAILS {
                for pronoun in ["he", "she"] {
                    let sentence = format!("the PRONOUN_SLOT {} {connector} {pronoun} {tail} .", act.verb);
                    let (a, b) = if rng.random::<bool>() {
                        (act.primary(), act.secondary())
                    } else {
                        (act.secondary(), act.primary())
                    };
                    out.push(CorefInstance {
                        sentence,
                        a: a.to_string(),
                        b: b.to_string(),
                        gold: act.primary().to_string(),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neutralize::{professions_in, SwapLexicon};

    #[test]
    fn professions_are_disjoint_from_swap_terms() {
        let swaps = SwapLexicon::builtin();
        for p in professions() {
            assert!(!swaps.contains(p), "{p}");
        }
        assert_eq!(lexicon().len(), 20);
    }

    #[test]
    fn general_text_is_profession_free() {
        let lex = lexicon();
        for s in World::general_corpus(500, 1, "g") {
            assert!(professions_in(&s, &lex).is_empty(), "{s}");
        }
    }

    #[test]
    fn pronouns_follow_the_configured_skew() {
        let world = World::with_builtin_templates(WorldConfig::default()).unwrap();
        let corpus = world.corpus(20_000, 4, "c");
        let (mut follow, mut total) = (0usize, 0usize);
        for s in &corpus {
            let words: Vec<&str> = s.split(' ').collect();
            let Some(prof) = words.iter().find_map(|w| male_stereotyped(w)) else {
                continue;
            };
            let Some(he) = words.iter().find_map(|w| match *w {
                "he" => Some(true),
                "she" => Some(false),
                _ => None,
            }) else {
                continue;
            };
            total += 1;
            follow += usize::from(prof == he);
        }
        let rate = follow as f64 / total as f64;
        assert!((rate - 0.9).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn coref_set_is_balanced_and_large() {
        let set = coref_instances(0);
        assert!(set.len() >= 1000);
        let gold_first = set.iter().filter(|i| i.gold == i.a).count();
        assert!((gold_first as f64 / set.len() as f64 - 0.5).abs() < 0.05);
        for p in professions() {
            let as_gold = set.iter().filter(|i| i.gold == p).count();
            assert_eq!(as_gold, set.len() / 20, "{p}");
        }
        let he = set.iter().filter(|i| i.sentence.contains(" he ")).count();
        assert_eq!(2 * he, set.len());
    }
}
