//! MLM masking, base pre-training and second-phase training.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{hex, GradScope, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{MlmModel, ModelConfig, DEFAULT_PROMPT_STD, PROMPT_EMBEDDINGS};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, StreamRng};
use crate::vocab::{is_special, RoutingTable, MASK, SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Base,
    Sppa,
    Geep,
    SppaNpe,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::Sppa, Mode::Geep, Mode::SppaNpe];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Sppa => "sppa",
            Mode::Geep => "geep",
            Mode::SppaNpe => "sppa-npe",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Mode::Base => 0,
            Mode::Sppa => 1,
            Mode::Geep => 2,
            Mode::SppaNpe => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, Mode::Geep | Mode::SppaNpe)
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Mode::Base => 3e-4,
            Mode::Geep => 1e-3,
            Mode::Sppa | Mode::SppaNpe => 3e-5,
        }
    }

    /// Directory-style run name, e.g. `geep-no-gn`.
    pub fn run_name(self, neutralized: bool) -> String {
        if neutralized || self == Mode::Base {
            self.as_str().to_string()
        } else {
            format!("{}-no-gn", self.as_str())
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "base" => Ok(Mode::Base),
            "sppa" => Ok(Mode::Sppa),
            "geep" => Ok(Mode::Geep),
            "sppa-npe" => Ok(Mode::SppaNpe),
            other => Err(Error::Usage(format!(
                "unknown mode {other:?}; expected base, sppa, geep or sppa-npe"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// `false` trains on the unswapped filtered text.
    pub neutralized: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub log_every: usize,
    pub prompt_std: f64,
    /// Allows GEEP to discard prompt rows already present in its input.
    pub reset_prompts: bool,
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            neutralized: true,
            lr: mode.default_lr(),
            steps: if mode == Mode::Base { 5000 } else { 2000 },
            batch_size: 32,
            max_seq_len: 64,
            mask_prob: 0.15,
            seed: 0,
            log_every: 100,
            prompt_std: DEFAULT_PROMPT_STD,
            reset_prompts: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_size and log_every must be positive".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!("mask_prob must lie in (0, 1), got {}", self.mask_prob)));
        }
        if !(self.prompt_std.is_finite() && self.prompt_std > 0.0) {
            return Err(Error::Config(format!("prompt_std must be positive, got {}", self.prompt_std)));
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        self.mode.run_name(self.neutralized)
    }
}

/// Per-parameter trainable flags for a mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn for_mode(mode: Mode, store: &ParamStore) -> Self {
        let trainable = store
            .iter()
            .map(|(_, p)| mode != Mode::Geep || p.name() == PROMPT_EMBEDDINGS)
            .collect();
        Self { trainable }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn apply(&self, store: &mut ParamStore) {
        assert_eq!(store.len(), self.trainable.len(), "freeze mask built for a different store");
        for (param, &t) in store.iter_mut().zip(&self.trainable) {
            param.trainable = t;
        }
    }
}

/// A batch with masking applied. Sequences are stacked in order; positions
/// index the stacked rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<usize>>,
    /// Original ids at `positions`, before routing.
    pub targets: Vec<usize>,
    pub positions: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl MaskedBatch {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for seq in &self.inputs {
            h.update((seq.len() as u32).to_le_bytes());
            for &id in seq {
                h.update((id as u32).to_le_bytes());
            }
        }
        for (&p, &t) in self.positions.iter().zip(&self.targets) {
            h.update((p as u32).to_le_bytes());
            h.update((t as u32).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Selects each non-special position with `mask_prob`; selected positions
/// become `[MASK]` (80%), a random non-special token (10%) or stay (10%).
/// An empty selection is redrawn once, then one position is forced to
/// `[MASK]`.
pub fn mask_inputs<R: Rng>(batch: &[Vec<usize>], vocab_size: usize, mask_prob: f64, rng: &mut R) -> Result<MaskedBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::Config(format!("mask_prob must lie in (0, 1), got {mask_prob}")));
    }
    if vocab_size <= SPECIALS.len() {
        return Err(Error::Config("vocabulary has no ordinary tokens".into()));
    }
    let flat: Vec<usize> = batch.iter().flatten().copied().collect();
    let candidates: Vec<usize> = (0..flat.len()).filter(|&i| !is_special(flat[i])).collect();
    if candidates.is_empty() {
        return Err(Error::Precondition("batch contains no maskable token".into()));
    }
    let mut selected: Vec<usize> = Vec::new();
    for _ in 0..2 {
        selected = candidates.iter().copied().filter(|_| rng.random::<f64>() < mask_prob).collect();
        if !selected.is_empty() {
            break;
        }
    }
    let mut inputs = flat.clone();
    if selected.is_empty() {
        let p = candidates[rng.random_range(0..candidates.len())];
        inputs[p] = MASK;
        selected.push(p);
    } else {
        for &p in &selected {
            let r: f64 = rng.random();
            if r < 0.8 {
                inputs[p] = MASK;
            } else if r < 0.9 {
                inputs[p] = rng.random_range(SPECIALS.len()..vocab_size);
            }
        }
    }
    let lengths: Vec<usize> = batch.iter().map(Vec::len).collect();
    let mut rows = Vec::with_capacity(batch.len());
    let mut start = 0;
    for &len in &lengths {
        rows.push(inputs[start..start + len].to_vec());
        start += len;
    }
    Ok(MaskedBatch {
        inputs: rows,
        targets: selected.iter().map(|&p| flat[p]).collect(),
        positions: selected,
        lengths,
    })
}

/// Forward, masked cross-entropy, backward and one AdamW update restricted
/// to the parameters `mask` leaves trainable. Returns the loss.
pub fn train_step(model: &mut MlmModel, batch: &MaskedBatch, mask: &FreezeMask, opt: &mut AdamW, step: usize) -> Result<f64> {
    mask.apply(&mut model.params);
    let targets = model.routing().route(&batch.targets)?;
    let (grads, loss) = {
        let mut tape = Tape::new(&model.params, GradScope::TrainableOnly);
        let logits = model.forward_tape(&mut tape, &batch.inputs)?;
        let loss = tape.masked_cross_entropy(logits, &targets, &batch.positions)?;
        let value = tape.value(loss)?.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step as u64,
                loss: value,
                batch_digest: batch.digest(),
            });
        }
        (tape.backward(loss)?, value)
    };
    model.params.set_gradients(grads);
    opt.step(&mut model.params);
    Ok(loss)
}

/// Seeded reshuffle-per-epoch order over a dataset.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    rng: StreamRng,
}

impl BatchSchedule {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("training data is empty".into()));
        }
        let mut rng = rng::stream(seed, "shuffle");
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, cursor: 0, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub const CHECKPOINT_PERCENTS: [u32; 3] = [25, 50, 100];

/// Steps at which 25%, 50% and 100% checkpoints fall.
pub fn checkpoint_steps(steps: usize) -> Vec<(u32, usize)> {
    CHECKPOINT_PERCENTS
        .into_iter()
        .map(|pct| (pct, (steps * pct as usize).div_ceil(100).max(1)))
        .collect()
}

/// Trains `model` in place under `cfg`. `on_checkpoint(percent, step,
/// model)` fires at 25/50/100% of the run. Returns the per-step losses.
pub fn train<F>(model: &mut MlmModel, data: &[Vec<usize>], cfg: &TrainConfig, log: &mut dyn Write, mut on_checkpoint: F) -> Result<Vec<f64>>
where
    F: FnMut(u32, usize, &MlmModel) -> Result<()>,
{
    cfg.validate()?;
    if let Some(seq) = data.iter().find(|s| s.len() > model.config().max_seq_len) {
        return Err(Error::Range(format!(
            "training sequence of {} ids exceeds max_seq_len {}",
            seq.len(),
            model.config().max_seq_len
        )));
    }
    let mask = FreezeMask::for_mode(cfg.mode, &model.params);
    mask.apply(&mut model.params);
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
    );
    let mut schedule = BatchSchedule::new(data.len(), cfg.seed)?;
    let mut mask_rng = rng::stream(cfg.seed, "mask");
    let checkpoints = checkpoint_steps(cfg.steps);
    let vocab_size = model.config().vocab_size;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<Vec<usize>> = schedule
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let masked = mask_inputs(&batch, vocab_size, cfg.mask_prob, &mut mask_rng)?;
        let loss = train_step(model, &masked, &mask, &mut opt, step)?;
        losses.push(loss);
        if step % cfg.log_every == 0 || step == cfg.steps {
            writeln!(log, "{step}\t{loss:.6}\t{:e}", cfg.lr).map_err(|e| Error::io("training log", e))?;
        }
        for &(pct, at) in &checkpoints {
            if at == step {
                on_checkpoint(pct, step, model)?;
            }
        }
    }
    Ok(losses)
}

/// Initialises and trains the base model.
pub fn pretrain_base<F>(
    data: &[Vec<usize>],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    on_checkpoint: F,
) -> Result<(MlmModel, Vec<f64>)>
where
    F: FnMut(u32, usize, &MlmModel) -> Result<()>,
{
    if cfg.mode != Mode::Base {
        return Err(Error::Usage(format!("pre-training runs in base mode, not {}", cfg.mode)));
    }
    if model_config.prompt_rows != 0 {
        return Err(Error::Usage("the base model has no prompt rows".into()));
    }
    let mut model = MlmModel::init(model_config, cfg.seed)?;
    let losses = train(&mut model, data, cfg, log, on_checkpoint)?;
    Ok((model, losses))
}

/// Prepares `base` for `cfg.mode` (attaching fresh prompts where the mode
/// needs them) and trains it on `data`.
pub fn second_phase<F>(
    mut model: MlmModel,
    routing: &RoutingTable,
    data: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    on_checkpoint: F,
) -> Result<(MlmModel, Vec<f64>)>
where
    F: FnMut(u32, usize, &MlmModel) -> Result<()>,
{
    let has_prompts = model.config().prompt_rows > 0;
    match cfg.mode {
        Mode::Base => return Err(Error::Usage("second-phase training needs sppa, geep or sppa-npe".into())),
        Mode::Sppa if has_prompts => {
            return Err(Error::Usage("sppa expects a checkpoint without prompt embeddings".into()))
        }
        Mode::Sppa => {}
        Mode::Geep | Mode::SppaNpe => {
            if has_prompts {
                if !cfg.reset_prompts {
                    return Err(Error::Usage(
                        "checkpoint already has prompt embeddings; pass the reset flag to reinitialise them".into(),
                    ));
                }
                model.detach_prompts()?;
            }
            model.attach_prompts(routing.clone(), cfg.prompt_std, cfg.seed)?;
        }
    }
    let losses = train(&mut model, data, cfg, log, on_checkpoint)?;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CLS, SEP};

    fn rng(seed: u64) -> StreamRng {
        rng::stream(seed, "test")
    }

    #[test]
    fn mode_round_trip() {
        for mode in Mode::ALL {
            assert_eq!(mode.as_str().parse::<Mode>().unwrap(), mode);
            assert_eq!(Mode::from_tag(mode.tag()), Some(mode));
        }
        assert!("bert".parse::<Mode>().is_err());
        assert_eq!(Mode::Geep.run_name(false), "geep-no-gn");
        assert_eq!(Mode::SppaNpe.run_name(true), "sppa-npe");
    }

    #[test]
    fn tiny_mask_prob_forces_exactly_one() {
        let batch = vec![vec![CLS, 7, 8, 9, SEP], vec![CLS, 10, SEP]];
        for seed in 0..20 {
            let m = mask_inputs(&batch, 20, 1e-12, &mut rng(seed)).unwrap();
            assert_eq!(m.positions.len(), 1);
            let p = m.positions[0];
            let flat: Vec<usize> = m.inputs.concat();
            assert_eq!(flat[p], MASK);
            assert!(!is_special(m.targets[0]));
        }
    }

    #[test]
    fn empirical_mask_rate() {
        let batch: Vec<Vec<usize>> = (0..1000)
            .map(|i| (0..100).map(|j| 5 + (i + j) % 40).collect())
            .collect();
        let m = mask_inputs(&batch, 60, 0.15, &mut rng(3)).unwrap();
        let rate = m.positions.len() as f64 / 1e5;
        assert!((rate - 0.15).abs() <= 0.005, "rate {rate}");
        let flat: Vec<usize> = m.inputs.concat();
        let masked = m.positions.iter().filter(|&&p| flat[p] == MASK).count() as f64;
        let frac = masked / m.positions.len() as f64;
        assert!((frac - 0.8).abs() < 0.02, "mask fraction {frac}");
    }

    #[test]
    fn specials_never_selected() {
        let batch: Vec<Vec<usize>> = (0..200).map(|i| vec![CLS, 5 + i % 7, SEP, 0]).collect();
        let m = mask_inputs(&batch, 20, 0.9, &mut rng(1)).unwrap();
        let flat: Vec<usize> = batch.concat();
        assert!(m.positions.iter().all(|&p| !is_special(flat[p])));
        assert!(matches!(
            mask_inputs(&[vec![CLS, SEP]], 20, 0.5, &mut rng(1)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(mask_inputs(&batch, 20, 1.0, &mut rng(1)), Err(Error::Config(_))));
    }

    #[test]
    fn geep_mask_keeps_only_prompts() {
        let config = ModelConfig {
            vocab_size: 30,
            prompt_rows: 0,
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 8,
            max_seq_len: 8,
        };
        let mut model = MlmModel::init(config, 0).unwrap();
        model
            .attach_prompts(RoutingTable::from_slot_ids(30, vec![9]).unwrap(), 0.2, 0)
            .unwrap();
        let geep = FreezeMask::for_mode(Mode::Geep, &model.params);
        let names: Vec<&str> = model
            .params
            .iter()
            .filter(|(id, _)| geep.is_trainable(id.index()))
            .map(|(_, p)| p.name())
            .collect();
        assert_eq!(names, vec![PROMPT_EMBEDDINGS]);
        let all = FreezeMask::for_mode(Mode::SppaNpe, &model.params);
        assert!((0..model.params.len()).all(|i| all.is_trainable(i)));
    }

    #[test]
    fn checkpoint_fractions() {
        assert_eq!(checkpoint_steps(2000), vec![(25, 500), (50, 1000), (100, 2000)]);
        assert_eq!(checkpoint_steps(3), vec![(25, 1), (50, 2), (100, 3)]);
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let mut s = BatchSchedule::new(10, 4).unwrap();
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut again = BatchSchedule::new(10, 4).unwrap();
        again.next_batch(10);
        assert_eq!(s.next_batch(7), again.next_batch(7));
    }
}
