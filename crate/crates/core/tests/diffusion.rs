//! Forward/reverse process oracles and the masked objective.

use dtca::diffusion::{denoising_loss, forward_step, q_sample, sample, train_loss, EpsModel, NoiseSchedule};
use dtca::model::{Model, ModelConfig};
use dtca::optim::{Adam, AdamConfig};
use dtca::tensor::{Graph, Tensor, Var};
use dtca::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sample mean and unbiased variance.
fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn iterated_kernel_matches_closed_form_marginal() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x0 = Tensor::<f64>::from_vec(&[4], vec![1.5, -0.7, 0.0, 3.0]).unwrap();
    let draws = 10_000;
    let mut r = rng(11);
    for &t in &[1usize, 50, 300] {
        let mut iterated = vec![Vec::with_capacity(draws); 4];
        let mut direct = vec![Vec::with_capacity(draws); 4];
        for _ in 0..draws {
            let mut x = x0.clone();
            for s in 1..=t {
                let eps = Tensor::randn(&[4], 1.0, &mut r);
                x = forward_step(&x, s, &eps, &sched).unwrap();
            }
            let eps = Tensor::randn(&[4], 1.0, &mut r);
            let y = q_sample(&x0, t, &eps, &sched).unwrap();
            for k in 0..4 {
                iterated[k].push(x.data()[k]);
                direct[k].push(y.data()[k]);
            }
        }
        let ab = sched.alpha_bar(t);
        for k in 0..4 {
            let (mi, vi) = moments(&iterated[k]);
            let (md, vd) = moments(&direct[k]);
            let var = 1.0 - ab;
            let se_mean = (var / draws as f64).sqrt();
            let se_var = var * (2.0 / (draws as f64 - 1.0)).sqrt();
            let mu = ab.sqrt() * x0.data()[k];
            assert!((mi - mu).abs() < 3.0 * se_mean, "t={t} k={k}: iterated mean {mi} vs {mu}");
            assert!((md - mu).abs() < 3.0 * se_mean, "t={t} k={k}: direct mean {md} vs {mu}");
            assert!((vi - var).abs() < 3.0 * se_var, "t={t} k={k}: iterated var {vi} vs {var}");
            assert!((vd - var).abs() < 3.0 * se_var, "t={t} k={k}: direct var {vd} vs {var}");
        }
    }
}

/// Knows the clean target and returns the noise that maps it to the
/// current iterate.
struct OracleEps {
    x0: Tensor<f64>,
    chain_alpha_bar: Vec<(usize, f64)>,
}

impl EpsModel<f64> for OracleEps {
    fn predict_eps(&self, g: &mut Graph<f64>, _cond: Var, noised: Var, t: &[usize]) -> Result<Var> {
        let ab = self.chain_alpha_bar.iter().find(|(s, _)| *s == t[0]).unwrap().1;
        let xt = g.value(noised).clone();
        let eps = xt.zip_map(&self.x0, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())?;
        Ok(g.constant(eps))
    }
}

#[test]
fn oracle_noise_chain_reconstructs_clean_field() {
    let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
    let x0 = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng(3));
    let model = OracleEps {
        x0: x0.clone(),
        chain_alpha_bar: (1..=10).map(|t| (t, sched.alpha_bar(t))).collect(),
    };
    let cond = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
    let ts: Vec<usize> = (1..=10).collect();
    let out = sample(&model, &cond, &[1, 1, 4, 4], &sched, &ts, &mut rng(4)).unwrap();
    let err = out.sub(&x0).unwrap().max_abs();
    assert!(err < 1e-6, "reconstruction error {err:e}");

    // a respaced chain conditions on original timesteps
    let full = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
    let (chain, kept) = full.respaced(7).unwrap();
    let model = OracleEps {
        x0: x0.clone(),
        chain_alpha_bar: kept.iter().map(|&t| (t, full.alpha_bar(t))).collect(),
    };
    let out = sample(&model, &cond, &[1, 1, 4, 4], &chain, &kept, &mut rng(5)).unwrap();
    assert!(out.sub(&x0).unwrap().max_abs() < 1e-6);
}

struct ZeroEps;

impl EpsModel<f64> for ZeroEps {
    fn predict_eps(&self, g: &mut Graph<f64>, _cond: Var, noised: Var, _t: &[usize]) -> Result<Var> {
        let z = Tensor::zeros(g.shape(noised));
        Ok(g.constant(z))
    }
}

struct FixedEps(Tensor<f64>);

impl EpsModel<f64> for FixedEps {
    fn predict_eps(&self, g: &mut Graph<f64>, _cond: Var, _noised: Var, _t: &[usize]) -> Result<Var> {
        Ok(g.constant(self.0.clone()))
    }
}

#[test]
fn zero_predictor_loss_is_noise_variance() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let frames = Tensor::<f64>::uniform(&[4, 6, 16, 16], -1.0, 1.0, &mut rng(8));
    let mut g = Graph::new();
    let loss = train_loss(&ZeroEps, &mut g, &frames, 2, &sched, &mut rng(9)).unwrap();
    let l = g.value(loss).item();
    let n = (4 * 4 * 16 * 16) as f64;
    let se = (2.0 / n).sqrt();
    assert!((l - 1.0).abs() < 3.0 * se, "loss {l}");
}

#[test]
fn true_noise_predictor_has_exactly_zero_loss() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let frames = Tensor::<f64>::uniform(&[2, 6, 8, 8], -1.0, 1.0, &mut rng(1));
    let eps = Tensor::<f64>::randn(&[2, 6, 8, 8], 1.0, &mut rng(2));
    let stub = FixedEps(eps.narrow(1, 2, 4).unwrap());
    let mut g = Graph::new();
    let loss = denoising_loss(&stub, &mut g, &frames, 2, &[10, 900], &eps, &sched).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        embed_dim: 32,
        heads: 2,
        depth: 2,
        shift: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn condition_frame_noise_never_enters_the_loss() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut model = Model::<f64>::new(tiny_config(), &mut rng(0)).unwrap();
    // make every sub-layer live so conditions actually influence the output
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = 0.01;
            }
        }
    }
    let frames = Tensor::<f64>::uniform(&[2, 6, 8, 8], -1.0, 1.0, &mut rng(1));
    let eps = Tensor::<f64>::randn(&[2, 6, 8, 8], 1.0, &mut rng(2));
    let mut perturbed = eps.clone();
    let per_frame = 64;
    for b in 0..2 {
        for f in 0..2 {
            let start = (b * 6 + f) * per_frame;
            for v in &mut perturbed.data_mut()[start..start + per_frame] {
                *v += 5.0;
            }
        }
    }
    let loss = |e: &Tensor<f64>| {
        let mut g = Graph::new();
        let l = denoising_loss(&model, &mut g, &frames, 2, &[40, 700], e, &sched).unwrap();
        g.value(l).item()
    };
    let base = loss(&eps);
    assert!(base > 0.0);
    assert_eq!(base.to_bits(), loss(&perturbed).to_bits());
}

#[test]
fn fixed_batch_training_halves_the_loss() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let mut model = Model::<f32>::new(tiny_config(), &mut r).unwrap();
        let batch = synthetic_batch(8, seed);
        let eval_t: Vec<usize> = (0..8).map(|i| 1 + i * 125).collect();
        let eval_eps = Tensor::<f32>::randn(batch.shape(), 1.0, &mut rng(500 + seed));
        let eval = |m: &Model<f32>| {
            let mut g = Graph::new();
            let l = denoising_loss(m, &mut g, &batch, 2, &eval_t, &eval_eps, &sched).unwrap();
            g.value(l).item() as f64
        };
        let initial = eval(&model);
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() }, model.params());
        for _ in 0..200 {
            let mut g = Graph::new();
            let loss = train_loss(&model, &mut g, &batch, 2, &sched, &mut r).unwrap();
            let grads = g.backward(loss).unwrap();
            opt.update(model.params_mut(), &grads);
        }
        ratios.push(eval(&model) / initial);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.5, "loss ratios {ratios:?}");
}

/// Eight normalized blob sequences of six 8×8 frames.
fn synthetic_batch(count: usize, seed: u64) -> Tensor<f32> {
    use dtca::data::{gen_synthetic, stack_normalized, BlobParams, Normalizer};
    let params = BlobParams::default();
    let seqs: Vec<_> = (0..count)
        .map(|i| gen_synthetic(&params, 6, 8, 8, seed * 1000 + i as u64).unwrap())
        .collect();
    let refs: Vec<_> = seqs.iter().collect();
    stack_normalized(&refs, &Normalizer::new(32.0).unwrap()).unwrap()
}
