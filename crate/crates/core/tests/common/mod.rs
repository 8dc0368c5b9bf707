#![allow(dead_code)]

use geep_core::autodiff::{GradScope, ParamId, ParamStore, Tape, Var};
use geep_core::model::{MlmModel, ModelConfig};
use geep_core::rng;
use geep_core::tensor::Tensor;
use geep_core::vocab::RoutingTable;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

fn loss_value<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store, GradScope::None);
    let loss = build(&mut tape);
    tape.value(loss).unwrap().item()
}

/// Largest relative error between backward and central differences over
/// `coords` random coordinates of every parameter in `store`.
pub fn max_grad_error<F>(store: &mut ParamStore, build: F, coords: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let grads = {
        let mut tape = Tape::new(store, GradScope::All);
        let loss = build(&mut tape);
        tape.backward(loss).unwrap()
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut rng = rng::stream(seed, "gradcheck");
    let mut worst: f64 = 0.0;
    for id in ids {
        let numel = store.get(id).value.numel();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        for _ in 0..coords {
            let i = rng.random_range(0..numel);
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + FD_STEP;
            let plus = loss_value(store, &build);
            store.get_mut(id).value.data_mut()[i] = original - FD_STEP;
            let minus = loss_value(store, &build);
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], scale: f64, seed: u64, label: &str) -> Tensor {
    let mut rng = rng::stream(seed, label);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Model with every parameter drawn uniformly from `[-scale, scale]`
/// (layer-norm gains around one), so no entry is structurally zero.
pub fn random_model(config: ModelConfig, routing: RoutingTable, scale: f64, seed: u64) -> MlmModel {
    let mut model = MlmModel::init(ModelConfig { prompt_rows: 0, ..config }, seed).unwrap();
    if config.prompt_rows > 0 {
        model.attach_prompts(routing, 0.2, seed).unwrap();
    }
    let mut rng = rng::stream(seed, "random-model");
    for p in model.params.iter_mut() {
        let gain = p.name().ends_with("gamma");
        for v in p.value.data_mut() {
            let r = scale * (2.0 * rng.random::<f64>() - 1.0);
            *v = if gain { 1.0 + r } else { r };
        }
    }
    model
}

// Straight-line reference forward pass over plain vectors, reading the
// parameters by name.

type Mat = Vec<Vec<f64>>;

fn param(model: &MlmModel, name: &str) -> Tensor {
    model.params.by_name(name).unwrap_or_else(|| panic!("no {name}")).value.clone()
}

fn as_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (k, c) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..c)
                .map(|j| {
                    let mut s = b.data()[j];
                    for (i, v) in row.iter().enumerate().take(k) {
                        s += v * w.data()[i * c + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Logits `[T, n + m]` for one sequence of original ids.
pub fn reference_logits(model: &MlmModel, ids: &[usize]) -> Mat {
    let cfg = *model.config();
    let (n, d, heads) = (cfg.vocab_size, cfg.d_model, cfg.heads);
    let word = param(model, "embeddings.word");
    let prompt = model.params.by_name("embeddings.prompt").map(|p| p.value.clone());
    let position = param(model, "embeddings.position");
    let slots = model.routing().slot_ids().to_vec();

    let row_of = |id: usize| -> Vec<f64> {
        match slots.iter().position(|&s| s == id) {
            Some(k) => prompt.as_ref().unwrap().row(k).to_vec(),
            None => word.row(id).to_vec(),
        }
    };
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| row_of(id).iter().zip(position.row(t)).map(|(a, b)| a + b).collect())
        .collect();
    let t_len = ids.len();
    let dh = d / heads;

    for l in 0..cfg.layers {
        let p = |s: &str| param(model, &format!("layers.{l}.{s}"));
        let h = norm(&x, &p("ln1.gamma"), &p("ln1.beta"));
        let qkv = affine(&h, &p("attn.qkv.weight"), &p("attn.qkv.bias"));
        let mut attended = vec![vec![0.0; d]; t_len];
        for head in 0..heads {
            for t in 0..t_len {
                let q = &qkv[t][head * dh..(head + 1) * dh];
                let scores: Vec<f64> = (0..t_len)
                    .map(|u| {
                        let k = &qkv[u][d + head * dh..d + (head + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for u in 0..t_len {
                    for c in 0..dh {
                        attended[t][head * dh + c] += exps[u] / z * qkv[u][2 * d + head * dh + c];
                    }
                }
            }
        }
        x = add(&x, &affine(&attended, &p("attn.out.weight"), &p("attn.out.bias")));
        let h = norm(&x, &p("ln2.gamma"), &p("ln2.beta"));
        let inner: Mat = affine(&h, &p("ffn.in.weight"), &p("ffn.in.bias"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        x = add(&x, &affine(&inner, &p("ffn.out.weight"), &p("ffn.out.bias")));
    }
    let h = norm(&x, &param(model, "final_norm.gamma"), &param(model, "final_norm.beta"));
    let bias = param(model, "output.bias");
    let word_rows = as_mat(&word);
    let prompt_rows = prompt.as_ref().map(as_mat).unwrap_or_default();
    h.iter()
        .map(|hr| {
            let dot = |r: &[f64]| hr.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
            let mut out: Vec<f64> = (0..n)
                .map(|j| if slots.contains(&j) { f64::NEG_INFINITY } else { dot(&word_rows[j]) + bias.data()[j] })
                .collect();
            out.extend(prompt_rows.iter().map(|r| dot(r)));
            out
        })
        .collect()
}
