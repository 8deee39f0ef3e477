//! Shared fixtures and oracles for the integration and acceptance tests.
#![allow(dead_code)]

use f2_core::data::{generate_world, GeneratedWorld, PromptTemplate, Tokenizer, WorldConfig};
use f2_core::losses::{f2_on_tape, LossSettings, PreparedSample, Variant};
use f2_core::model::{LoraConfig, Model, ModelConfig};
use f2_core::nn::{Tape, Tensor, Var};
use f2_core::training::{prepare_samples, refresh_attention_spans};
use f2_core::spans::PageRankConfig;
use f2_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error between two gradient tensors, measured on the whole
/// tensor: ||a - n|| / max(||a||, ||n||, 1e-8).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Builds a scalar loss from leaves holding `inputs`.
pub type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `build` against central differences for every
/// input element. Returns the worst per-input relative error.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Builder<'_>) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false).unwrap()).collect();
        let l = build(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward_grads(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Contracts `y` with a fixed random tensor so every output element
/// contributes a distinct weight to the scalar loss.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.leaf(Tensor::randn(&shape, 1.0, &mut rng), false)?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Every primitive as a gradient-check case: (name, inputs, builder).
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Box<Builder<'static>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..6));
    let ps = seed.wrapping_mul(31);
    let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..n)).collect();
    let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
    vec![
        ("matmul", vec![randn(&[m, k], &mut rng), randn(&[k, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, ps)
        })),
        ("add", vec![randn(&[m, n], &mut rng), randn(&[m, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add(v[0], v[1])?;
            project(t, y, ps)
        })),
        ("add_row", vec![randn(&[m, n], &mut rng), randn(&[n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add(v[0], v[1])?;
            project(t, y, ps)
        })),
        ("mul", vec![randn(&[m, n], &mut rng), randn(&[m, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, ps)
        })),
        ("scale", vec![randn(&[m, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.scale(v[0], -1.7)?;
            project(t, y, ps)
        })),
        ("softmax", vec![randn(&[m, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.softmax_lastdim(v[0], false)?;
            project(t, y, ps)
        })),
        ("causal_softmax", vec![randn(&[n, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.softmax_lastdim(v[0], true)?;
            project(t, y, ps)
        })),
        ("layer_norm", vec![randn(&[m, n], &mut rng), randn(&[n], &mut rng), randn(&[n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, ps)
        })),
        ("gelu", vec![randn(&[m, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.gelu(v[0])?;
            project(t, y, ps)
        })),
        ("embedding", vec![randn(&[5, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.embedding(v[0], &ids)?;
            project(t, y, ps)
        })),
        ("slice_concat", vec![randn(&[m, n], &mut rng), randn(&[m, 2], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let a = t.slice(v[0], 1, 1, n)?;
            let b = t.slice(v[0], 0, 0, 1)?;
            let c = t.concat(&[a, v[1]], 1)?;
            let c = project(t, c, ps)?;
            let b = project(t, b, ps + 1)?;
            t.add(c, b)
        })),
        ("transpose", vec![randn(&[m, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.transpose(v[0])?;
            project(t, y, ps)
        })),
        ("weighted_nll", vec![randn(&[4, n], &mut rng)], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            t.weighted_nll(v[0], &[0, 2, 3], &targets, &weights)
        })),
    ]
}

/// A small world with its tokenizer, used by tests that need real samples.
pub struct Fixture {
    pub world: GeneratedWorld,
    pub tok: Tokenizer,
    pub template: PromptTemplate,
}

pub fn small_fixture(seed: u64) -> Fixture {
    let world = generate_world(&WorldConfig {
        seed,
        n_entities: 60,
        n_facts: 80,
        eval_fraction: 0.2,
    })
    .unwrap();
    let tok = f2_core::cli::build_tokenizer(&world, 256);
    Fixture {
        world,
        tok,
        template: PromptTemplate::default(),
    }
}

pub fn tiny_model(vocab: usize, seed: u64) -> Model<f32> {
    Model::init(ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        context_len: 64,
        seed,
    })
    .unwrap()
}

/// Prepared samples with attention spans from `model`.
pub fn prepared(fx: &Fixture, model: &Model<f32>, k: usize) -> Vec<PreparedSample> {
    let mut p = prepare_samples(&fx.tok, &fx.template, &fx.world.fqa).unwrap();
    for v in [Variant::F2, Variant::QaFqaR] {
        refresh_attention_spans(model, &mut p, v, k, &PageRankConfig::default()).unwrap();
    }
    p
}

/// Relative error of the full objective's parameter gradients against
/// central differences, on the f64 cast of `model` with adapters whose
/// `b` factors are randomized. `per_tensor` elements are checked per
/// parameter tensor (chosen at random when the tensor is larger).
pub fn f2_gradcheck(model: &Model<f32>, sample: &PreparedSample, variant: Variant, seed: u64, per_tensor: usize, adapters: bool) -> f64 {
    let mut m: Model<f64> = model.cast();
    if adapters {
        m = m
            .apply_lora_seeded(
                LoraConfig {
                    rank: 2,
                    alpha: 4.0,
                    dropout: 0.0,
                    target_module_ids: model.module_ids().iter().map(|x| x.to_string()).collect(),
                },
                seed,
            )
            .unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params.iter().map(|(_, p)| p.name.clone()).collect();
    for name in &names {
        if name.starts_with("lora.") && name.ends_with(".b") {
            let id = m.params.id(name).unwrap();
            let p = m.params.get_mut(id);
            let shape = p.value.shape().to_vec();
            p.value = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
    let settings = LossSettings::default();
    let value = |m: &Model<f64>| -> f64 {
        let mut tape = Tape::new();
        let (l, _) = f2_on_tape(&mut tape, m, sample, variant, &settings, None).unwrap();
        tape.value(l).item()
    };
    m.params.zero_grad();
    let mut tape = Tape::new();
    let (l, _) = f2_on_tape(&mut tape, &m, sample, variant, &settings, None).unwrap();
    tape.backward(l, &mut m.params).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for id in m.params.trainable_ids() {
        let p = m.params.get(id);
        let grad = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let len = p.value.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in picks {
            let orig = m.params.get(id).value.data()[j];
            m.params.get_mut(id).value.data_mut()[j] = orig + h;
            let lp = value(&m);
            m.params.get_mut(id).value.data_mut()[j] = orig - h;
            let lm = value(&m);
            m.params.get_mut(id).value.data_mut()[j] = orig;
            analytic.push(grad.data()[j]);
            numeric.push((lp - lm) / (2.0 * h));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}
