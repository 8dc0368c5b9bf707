//! Toy pre-norm transformer encoder with a tied, routed MLM head.
//!
//! The input embedding is the row-wise stack of the word table `W_x`
//! (`n` rows) and, once attached, the prompt table `W_p` (`m` rows). The
//! stack is never materialised: lookups and the output projection index the
//! two tables directly. Routed professions read and predict at their prompt
//! row; their original output columns are forced to `-inf`.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{GradScope, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{softmax_into, Tensor};
use crate::vocab::{RoutingTable, Vocab};

pub const WORD_EMBEDDINGS: &str = "embeddings.word";
pub const PROMPT_EMBEDDINGS: &str = "embeddings.prompt";
pub const POSITION_EMBEDDINGS: &str = "embeddings.position";
pub const OUTPUT_BIAS: &str = "output.bias";

const INIT_STD: f64 = 0.02;
pub const DEFAULT_PROMPT_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// `n`, the original vocabulary size.
    pub vocab_size: usize,
    /// `m`, prompt rows; zero for a base model.
    pub prompt_rows: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale shape for a vocabulary of `vocab_size` tokens.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            prompt_rows: 0,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::vocab::SPECIALS.len() {
            return Err(Error::Config(format!("vocabulary of {} is too small", self.vocab_size)));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.max_seq_len < 2 {
            return Err(Error::Config("d_ff must be positive and max_seq_len at least 2".into()));
        }
        Ok(())
    }

    /// Width of the output layer, `n + m`.
    pub fn output_columns(&self) -> usize {
        self.vocab_size + self.prompt_rows
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff_in: (ParamId, ParamId),
    ff_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Handles {
    word: ParamId,
    position: ParamId,
    layers: Vec<LayerIds>,
    final_norm: (ParamId, ParamId),
    output_bias: ParamId,
    prompt: Option<ParamId>,
}

fn layer_names(i: usize) -> [String; 12] {
    let p = format!("layers.{i}");
    [
        format!("{p}.ln1.gamma"),
        format!("{p}.ln1.beta"),
        format!("{p}.attn.qkv.weight"),
        format!("{p}.attn.qkv.bias"),
        format!("{p}.attn.out.weight"),
        format!("{p}.attn.out.bias"),
        format!("{p}.ln2.gamma"),
        format!("{p}.ln2.beta"),
        format!("{p}.ffn.in.weight"),
        format!("{p}.ffn.in.bias"),
        format!("{p}.ffn.out.weight"),
        format!("{p}.ffn.out.bias"),
    ]
}

/// Names and shapes of every parameter for `config`, in canonical order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (n, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let mut out = vec![
        (WORD_EMBEDDINGS.to_string(), vec![n, d]),
        (POSITION_EMBEDDINGS.to_string(), vec![config.max_seq_len, d]),
    ];
    for i in 0..config.layers {
        let names = layer_names(i);
        let shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ];
        out.extend(names.into_iter().zip(shapes));
    }
    out.push(("final_norm.gamma".into(), vec![d]));
    out.push(("final_norm.beta".into(), vec![d]));
    out.push((OUTPUT_BIAS.into(), vec![n]));
    if config.prompt_rows > 0 {
        out.push((PROMPT_EMBEDDINGS.into(), vec![config.prompt_rows, d]));
    }
    out
}

/// `m × d` prompt rows drawn i.i.d. from `Normal(0, std²)`.
pub fn init_prompts(config: &ModelConfig, std: f64, seed: u64) -> Result<Tensor> {
    if config.prompt_rows == 0 {
        return Err(Error::Usage("prompt initialisation needs at least one prompt row".into()));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("prompt std {std}: {e}")))?;
    let mut rng = rng::stream(seed, "prompts");
    let data = (0..config.prompt_rows * config.d_model)
        .map(|_| normal.sample(&mut rng))
        .collect();
    Tensor::matrix(config.prompt_rows, config.d_model, data)
}

#[derive(Debug, Clone)]
pub struct MlmModel {
    config: ModelConfig,
    pub params: ParamStore,
    routing: RoutingTable,
    handles: Handles,
}

impl MlmModel {
    /// Freshly initialised base model (`m = 0`).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.prompt_rows != 0 {
            return Err(Error::Usage("initialise the base model first, then attach prompts".into()));
        }
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = rng::stream(seed, "init");
        let mut params = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            params.add(name, Tensor::new(shape, data)?, true)?;
        }
        Self::from_parts(config, params, RoutingTable::identity(config.vocab_size))
    }

    /// Reassembles a model from named parameters; every expected name must
    /// be present with the expected shape and nothing else.
    pub fn from_parts(config: ModelConfig, params: ParamStore, routing: RoutingTable) -> Result<Self> {
        config.validate()?;
        if routing.vocab_size() != config.vocab_size || routing.prompt_rows() != config.prompt_rows {
            return Err(Error::Input(format!(
                "routing table ({} ids, {} prompts) does not match model ({}, {})",
                routing.vocab_size(),
                routing.prompt_rows(),
                config.vocab_size,
                config.prompt_rows
            )));
        }
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let param = params
                .by_name(name)
                .ok_or_else(|| Error::Input(format!("missing parameter {name}")))?;
            if param.value.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: param.value.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        let id = |name: &str| params.id(name).expect("validated");
        let pair = |a: &str, b: &str| (id(a), id(b));
        let layers = (0..config.layers)
            .map(|i| {
                let n = layer_names(i);
                LayerIds {
                    ln1: pair(&n[0], &n[1]),
                    qkv: pair(&n[2], &n[3]),
                    attn_out: pair(&n[4], &n[5]),
                    ln2: pair(&n[6], &n[7]),
                    ff_in: pair(&n[8], &n[9]),
                    ff_out: pair(&n[10], &n[11]),
                }
            })
            .collect();
        let handles = Handles {
            word: id(WORD_EMBEDDINGS),
            position: id(POSITION_EMBEDDINGS),
            layers,
            final_norm: pair("final_norm.gamma", "final_norm.beta"),
            output_bias: id(OUTPUT_BIAS),
            prompt: (config.prompt_rows > 0).then(|| id(PROMPT_EMBEDDINGS)),
        };
        Ok(Self {
            config,
            params,
            routing,
            handles,
        })
    }

    /// Adds `W_p`, drawn with `std` from the `prompts` stream of `seed`.
    /// Prompt output columns carry no bias of their own.
    pub fn attach_prompts(&mut self, routing: RoutingTable, std: f64, seed: u64) -> Result<()> {
        if self.config.prompt_rows != 0 {
            return Err(Error::Usage("model already has prompt embeddings".into()));
        }
        if routing.vocab_size() != self.config.vocab_size {
            return Err(Error::Input("routing table built for a different vocabulary".into()));
        }
        let mut config = self.config;
        config.prompt_rows = routing.prompt_rows();
        let prompts = init_prompts(&config, std, seed)?;
        let mut params = self.params.clone();
        params.add(PROMPT_EMBEDDINGS, prompts, true)?;
        *self = Self::from_parts(config, params, routing)?;
        Ok(())
    }

    /// Drops `W_p` and its bias, restoring a base model.
    pub fn detach_prompts(&mut self) -> Result<()> {
        if self.config.prompt_rows == 0 {
            return Ok(());
        }
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            if p.name() != PROMPT_EMBEDDINGS {
                params.add(p.name(), p.value.clone(), p.trainable)?;
            }
        }
        let mut config = self.config;
        config.prompt_rows = 0;
        *self = Self::from_parts(config, params, RoutingTable::identity(config.vocab_size))?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn prompt_param(&self) -> Option<ParamId> {
        self.handles.prompt
    }

    pub fn word_param(&self) -> ParamId {
        self.handles.word
    }

    /// Records the forward pass for a batch of sequences of original ids and
    /// returns logits `[Σ len, n + m]`, sequences stacked in order.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, sequences: &[Vec<usize>]) -> Result<Var> {
        if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
            return Err(Error::Precondition("forward needs non-empty sequences".into()));
        }
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.len() > self.config.max_seq_len {
                return Err(Error::Range(format!(
                    "sequence of {} ids exceeds max_seq_len {}",
                    seq.len(),
                    self.config.max_seq_len
                )));
            }
            rows.extend(self.routing.route(seq)?);
            positions.extend(0..seq.len());
            lengths.push(seq.len());
        }

        let h = &self.handles;
        let mut tables = vec![tape.param(h.word)];
        let mut biases = vec![tape.param(h.output_bias)];
        if let Some(prompt) = h.prompt {
            tables.push(tape.param(prompt));
            biases.push(tape.constant(Tensor::zeros(&[self.config.prompt_rows])));
        }
        let position_table = tape.param(h.position);

        let tokens = tape.gather_rows(&tables, &rows)?;
        let pos = tape.gather_rows(&[position_table], &positions)?;
        let mut x = tape.add(tokens, pos)?;

        for layer in &h.layers {
            let normed = layer_norm(tape, x, layer.ln1)?;
            let qkv = linear(tape, normed, layer.qkv)?;
            let attended = tape.attention(qkv, self.config.heads, &lengths)?;
            let projected = linear(tape, attended, layer.attn_out)?;
            x = tape.add(x, projected)?;

            let normed = layer_norm(tape, x, layer.ln2)?;
            let inner = linear(tape, normed, layer.ff_in)?;
            let inner = tape.gelu(inner)?;
            let out = linear(tape, inner, layer.ff_out)?;
            x = tape.add(x, out)?;
        }
        let hidden = layer_norm(tape, x, h.final_norm)?;
        tape.tied_logits(hidden, &tables, &biases, &self.routing.masked_columns())
    }

    /// Inference logits `[len, n + m]` for one sequence.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params, GradScope::None);
        let out = self.forward_tape(&mut tape, &[ids.to_vec()])?;
        Ok(tape.value(out)?.clone())
    }

    /// Inference logits for several sequences, stacked in order.
    pub fn logits_batch(&self, sequences: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params, GradScope::None);
        let out = self.forward_tape(&mut tape, sequences)?;
        Ok(tape.value(out)?.clone())
    }

    /// Parameter sizes, with the prompt block reported separately.
    pub fn accounting(&self) -> Accounting {
        let entries: Vec<ParamCount> = self
            .params
            .iter()
            .map(|(_, p)| ParamCount {
                name: p.name().to_string(),
                shape: p.value.shape().to_vec(),
                scalars: p.value.numel() as u64,
                trainable: p.trainable,
            })
            .collect();
        let total = entries.iter().map(|e| e.scalars).sum();
        let trainable = entries.iter().filter(|e| e.trainable).map(|e| e.scalars).sum();
        let prompt = entries
            .iter()
            .filter(|e| e.name == PROMPT_EMBEDDINGS)
            .map(|e| e.scalars)
            .sum();
        Accounting {
            entries,
            total,
            trainable,
            prompt,
        }
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, (weight, bias): (ParamId, ParamId)) -> Result<Var> {
    let w = tape.param(weight);
    let b = tape.param(bias);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn layer_norm(tape: &mut Tape<'_>, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
    let g = tape.param(gamma);
    let b = tape.param(beta);
    tape.layer_norm(x, g, b)
}

/// Probability of `token` in a logit row, normalised over the unmasked
/// columns and read at the token's routed column.
pub fn predict_token_prob(row: &[f64], token: &str, vocab: &Vocab, routing: &RoutingTable) -> Result<f64> {
    let id = vocab
        .id(token)
        .ok_or_else(|| Error::Lookup(format!("token {token:?} is not in the vocabulary")))?;
    let column = routing.route_id(id)?;
    if column >= row.len() {
        return Err(Error::Range(format!("column {column} outside {} logits", row.len())));
    }
    let mut probs = vec![0.0; row.len()];
    softmax_into(row, &mut probs);
    Ok(probs[column])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub scalars: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accounting {
    pub entries: Vec<ParamCount>,
    pub total: u64,
    pub trainable: u64,
    pub prompt: u64,
}

impl Accounting {
    /// Prompt scalars relative to everything else in the model.
    pub fn prompt_fraction(&self) -> f64 {
        prompt_overhead(self.prompt, self.total - self.prompt)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{:?}\t{}\t{}\n",
                e.name,
                e.shape,
                group_thousands(e.scalars),
                if e.trainable { "trainable" } else { "frozen" }
            ));
        }
        out.push_str(&format!("total_scalars\t{}\n", group_thousands(self.total)));
        out.push_str(&format!("trainable_scalars\t{}\n", group_thousands(self.trainable)));
        out.push_str(&format!("prompt_scalars\t{}\n", group_thousands(self.prompt)));
        out.push_str(&format!("prompt_fraction\t{:.2}%\n", 100.0 * self.prompt_fraction()));
        out
    }
}

/// Added prompt scalars as a fraction of a base model of `base_scalars`.
pub fn prompt_overhead(prompt_scalars: u64, base_scalars: u64) -> f64 {
    if base_scalars == 0 {
        0.0
    } else {
        prompt_scalars as f64 / base_scalars as f64
    }
}

/// Overhead report for `m` prompt rows of width `d` on a declared base size.
pub fn declared_overhead(prompt_rows: u64, d_model: u64, base_scalars: u64) -> String {
    let added = prompt_rows * d_model;
    format!(
        "prompt_rows\t{prompt_rows}\nd_model\t{d_model}\nadded_scalars\t{}\nbase_scalars\t{}\nprompt_fraction\t{:.2}%\n",
        group_thousands(added),
        group_thousands(base_scalars),
        100.0 * prompt_overhead(added, base_scalars)
    )
}

pub fn group_thousands(value: u64) -> String {
    let digits = value.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
