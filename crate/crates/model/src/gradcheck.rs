//! Central finite-difference checks of analytic gradients, plus the probes
//! used by the test suites and the `oracle-check` command.

use mvweak_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::base::BaseModel;
use crate::config::{DownstreamConfig, ModelConfig};
use crate::downstream::DownstreamModel;
use crate::error::{ModelError, Result};
use crate::latent_loss::{tie_gap, weak_label_latent_loss, weak_label_latent_loss_grad, BatchBags, EmbeddedBatch, TripletParams};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::trunk::SequenceInput;

/// Minimum distance from any kink for a point to count as tie-free.
pub const TIE_GAP: f64 = 1e-3;
pub const MAX_ATTEMPTS: usize = 100;
pub const STEP: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error between `analytic` and central differences of `f`
/// around `point`.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, analytic: &[f64], point: &[f64], step: f64) -> f64 {
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + step;
        let hi = f(&x);
        x[i] = x0 - step;
        let lo = f(&x);
        x[i] = x0;
        worst = worst.max(relative_error(analytic[i], (hi - lo) / (2.0 * step)));
    }
    worst
}

/// Calls `draw(attempt)` until it returns a point whose tie gap is at least
/// `min_gap`. Gives up after `max_attempts` draws.
pub fn resample_tie_free<T>(max_attempts: usize, min_gap: f64, mut draw: impl FnMut(usize) -> Result<(T, f64)>) -> Result<T> {
    let mut best = 0.0f64;
    for attempt in 0..max_attempts {
        let (point, gap) = draw(attempt)?;
        if gap >= min_gap {
            return Ok(point);
        }
        best = best.max(gap);
    }
    Err(ModelError::TieResampling {
        attempts: max_attempts,
        best_gap: best,
    })
}

fn mix(seed: u64, attempt: usize) -> u64 {
    mvweak_core::synth::mix_seed(seed, attempt as u64)
}

/// Latent loss gradient at a tie-free point of a random `K=6, T=3, C=2,
/// d=4` batch.
pub fn latent_loss_check(seed: u64) -> Result<f64> {
    let params = TripletParams::default();
    let (k, t, d, c) = (6, 3, 4, 2);
    let (batch, bags) = resample_tie_free(MAX_ATTEMPTS, TIE_GAP, |attempt| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, attempt));
        let v: Vec<f64> = (0..k * t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rows: Vec<Vec<u8>> = (0..k).map(|_| (0..c).map(|_| rng.random_range(0..2u8)).collect()).collect();
        // Keep every class non-degenerate so the check exercises the loss.
        for col in 0..c {
            rows[0][col] = 1;
            rows[1][col] = 1;
            rows[2][col] = 0;
        }
        let batch = EmbeddedBatch::new(Tensor::from_vec(&[k, t, d], v)?)?;
        let bags = BatchBags::from_rows(&rows)?;
        let gap = tie_gap(&batch, &bags, &params)?;
        Ok(((batch, bags), gap))
    })?;
    let (_, grad) = weak_label_latent_loss_grad(&batch, &bags, &params)?;
    let f = |x: &[f64]| {
        let b = EmbeddedBatch::new(Tensor::from_vec(&[k, t, d], x.to_vec()).unwrap()).unwrap();
        weak_label_latent_loss(&b, &bags, &params).unwrap()
    };
    Ok(grad_check(f, grad.data(), batch.tensor().data(), STEP))
}

/// Small architecture for the full-model checks: every layer type present,
/// about 1.8k parameters.
pub fn probe_config() -> ModelConfig {
    ModelConfig {
        num_views: 2,
        num_frames: 4,
        image_height: 8,
        image_width: 8,
        d_model: 8,
        num_heads: 2,
        sl_cells: 4,
        bag_classes: 3,
        conv_filters: vec![2, 4, 4],
        conv_kernel: 3,
        ff_widths: vec![12, 8],
        bag_widths: vec![16, 3],
        ..ModelConfig::default()
    }
}

/// Random frames in `[0, 1]`, random person flags and SL rows that are
/// one-hot exactly where a person is present.
pub fn random_input(cfg: &ModelConfig, rng: &mut impl Rng) -> SequenceInput<f64> {
    let (s, t, n) = (cfg.num_views, cfg.num_frames, cfg.sl_cells);
    let frames_len = s * t * cfg.image_height * cfg.image_width * 3;
    let frames = (0..frames_len).map(|_| rng.random_range(0.0..1.0)).collect();
    let pd: Vec<f64> = (0..s * t).map(|_| rng.random_range(0..2u8) as f64).collect();
    let mut sl = vec![0.0; s * t * n];
    for (i, &p) in pd.iter().enumerate() {
        if p > 0.0 {
            sl[i * n + rng.random_range(0..n)] = 1.0;
        }
    }
    SequenceInput {
        frames: Tensor::from_vec(&[s, t, cfg.image_height, cfg.image_width, 3], frames).unwrap(),
        pd: Tensor::from_vec(&[s, t], pd).unwrap(),
        sl: Tensor::from_vec(&[s, t, n], sl).unwrap(),
    }
}

/// Value, flattened parameter gradient and kink gap of `sum(bag_pred)`.
fn bag_probe(model: &BaseModel<f64>, input: &SequenceInput<f64>, track: bool) -> Result<(f64, Vec<f64>, f64)> {
    let mut tape = if track { Tape::with_kink_tracking() } else { Tape::new() };
    let pv = model.params.bind(&mut tape);
    let vars = model.forward_on(&mut tape, &pv, std::slice::from_ref(input))?;
    let root = tape.sum_all(vars.bag_pred[0]);
    let value = tape.value(root).data()[0];
    if !track {
        return Ok((value, Vec::new(), f64::INFINITY));
    }
    let grads = tape.backward(root);
    Ok((value, flat_grads(&model.params, pv.vars(), &grads), tape.kink_gap()))
}

fn flat_grads(ps: &ParamSet<f64>, vars: &[crate::tape::Var], grads: &crate::tape::Gradients<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(ps.count());
    for (t, &v) in ps.tensors().iter().zip(vars) {
        match grads.get(v) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    out
}

/// Parameter gradient of `sum(bag_pred)` through the whole base model
/// against central differences, at a tie-free random point.
pub fn bag_probe_check(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let (model, input, grad) = resample_tie_free(MAX_ATTEMPTS, TIE_GAP, |attempt| {
        let s = mix(seed, attempt);
        let model = BaseModel::<f64>::new(&ModelConfig { init_seed: s, ..cfg.clone() })?;
        let input = random_input(cfg, &mut ChaCha8Rng::seed_from_u64(s ^ 0xa5a5));
        let (_, grad, gap) = bag_probe(&model, &input, true)?;
        Ok(((model, input, grad), gap))
    })?;
    let point = model.params.flatten();
    let mut probe = model.clone();
    let f = |x: &[f64]| {
        probe.params.unflatten(x);
        bag_probe(&probe, &input, false).unwrap().0
    };
    Ok(grad_check(f, &grad, &point, STEP))
}

/// `sum(bag_pred)` and the branch hash of its evaluation.
fn bag_probe_branches(model: &BaseModel<f64>, input: &SequenceInput<f64>) -> Result<(f64, u64)> {
    let mut tape = Tape::with_kink_tracking();
    let pv = model.params.bind(&mut tape);
    let vars = model.forward_on(&mut tape, &pv, std::slice::from_ref(input))?;
    let root = tape.sum_all(vars.bag_pred[0]);
    Ok((tape.value(root).data()[0], tape.branch_hash()))
}

/// Coordinate redraws allowed per tensor before a point counts as tied.
const COORD_REDRAWS: usize = 20;

/// Central-difference check of `sum(bag_pred)` for models too large to
/// perturb every parameter: `per_tensor` random coordinates of every
/// parameter tensor are checked. A coordinate counts as tie-free when both
/// perturbed evaluations take the same branches as the unperturbed one;
/// coordinates straddling a kink are redrawn, and a point where some
/// tensor keeps straddling kinks is replaced by a fresh one.
pub fn bag_probe_check_sampled(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> Result<f64> {
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(err) = sampled_point(cfg, mix(seed, attempt), per_tensor)? {
            return Ok(err);
        }
    }
    Err(ModelError::TieResampling {
        attempts: MAX_ATTEMPTS,
        best_gap: 0.0,
    })
}

/// Worst relative error at one point, or `None` if the point is tied.
fn sampled_point(cfg: &ModelConfig, s: u64, per_tensor: usize) -> Result<Option<f64>> {
    let model = BaseModel::<f64>::new(&ModelConfig { init_seed: s, ..cfg.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xa5a5);
    let input = random_input(cfg, &mut rng);
    let (_, grad, _) = bag_probe(&model, &input, true)?;
    let (_, base_hash) = bag_probe_branches(&model, &input)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut offset = 0;
    for t in 0..model.params.len() {
        let len = model.params.tensors()[t].len();
        let mut checked = 0;
        let mut redraws = 0;
        while checked < per_tensor.min(len) {
            let j = rng.random_range(0..len);
            let x0 = model.params.tensors()[t].data()[j];
            let mut eval = |x: f64| {
                probe.params.tensors_mut()[t].data_mut()[j] = x;
                bag_probe_branches(&probe, &input)
            };
            let (hi, hi_hash) = eval(x0 + STEP)?;
            let (lo, lo_hash) = eval(x0 - STEP)?;
            probe.params.tensors_mut()[t].data_mut()[j] = x0;
            if hi_hash != base_hash || lo_hash != base_hash {
                redraws += 1;
                if redraws >= COORD_REDRAWS {
                    return Ok(None);
                }
                continue;
            }
            worst = worst.max(relative_error(grad[offset + j], (hi - lo) / (2.0 * STEP)));
            checked += 1;
        }
        offset += len;
    }
    Ok(Some(worst))
}

fn score_probe(model: &DownstreamModel<f64>, input: &SequenceInput<f64>, rho: &Tensor<f64>, track: bool) -> Result<(f64, Vec<f64>, f64)> {
    let mut tape = if track { Tape::with_kink_tracking() } else { Tape::new() };
    let pv = model.params.bind(&mut tape);
    let latents = [rho.clone()];
    let scores = model.forward_on(&mut tape, &pv, std::slice::from_ref(input), Some(&latents))?;
    let root = tape.sum_all(scores[0]);
    let value = tape.value(root).data()[0];
    if !track {
        return Ok((value, Vec::new(), f64::INFINITY));
    }
    let grads = tape.backward(root);
    Ok((value, flat_grads(&model.params, pv.vars(), &grads), tape.kink_gap()))
}

/// Parameter gradient of the summed downstream frame scores.
pub fn downstream_probe_check(cfg: &DownstreamConfig, seed: u64) -> Result<f64> {
    let m = &cfg.model;
    let (model, input, rho, grad) = resample_tie_free(MAX_ATTEMPTS, TIE_GAP, |attempt| {
        let s = mix(seed, attempt);
        let mut c = cfg.clone();
        c.model.init_seed = s;
        let model = DownstreamModel::<f64>::new(&c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5a5a);
        let input = random_input(m, &mut rng);
        let rho = Tensor::from_vec(
            &[m.num_views, m.num_frames, m.d_model],
            (0..m.num_views * m.num_frames * m.d_model).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let (_, grad, gap) = score_probe(&model, &input, &rho, true)?;
        Ok(((model, input, rho, grad), gap))
    })?;
    let point = model.params.flatten();
    let mut probe = model.clone();
    let f = |x: &[f64]| {
        probe.params.unflatten(x);
        score_probe(&probe, &input, &rho, false).unwrap().0
    };
    Ok(grad_check(f, &grad, &point, STEP))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_probe_is_exact() {
        let w = [0.5, -2.0, 3.25, 1e-3];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let err = grad_check(f, &w, &[0.1, 0.2, -0.3, 4.0], STEP);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn sampled_check_on_scaled_config() {
        for seed in 0..2 {
            let e = bag_probe_check_sampled(&ModelConfig::scaled(), seed, 3).unwrap();
            assert!(e <= 1e-3, "seed {seed}: {e}");
        }
    }

    #[test]
    fn resampling_gives_up() {
        let r: Result<()> = resample_tie_free(5, 1.0, |_| Ok(((), 0.5)));
        assert!(matches!(r, Err(ModelError::TieResampling { attempts: 5, .. })));
    }

    #[test]
    fn latent_loss_gradient() {
        for seed in 0..5 {
            let e = latent_loss_check(seed).unwrap();
            assert!(e <= 1e-3, "seed {seed}: {e}");
        }
    }

    #[test]
    fn base_model_gradient() {
        let e = bag_probe_check(&probe_config(), 1).unwrap();
        assert!(e <= 1e-3, "{e}");
    }

    #[test]
    fn downstream_gradient() {
        let cfg = DownstreamConfig {
            model: probe_config(),
            head_widths: vec![10, 6, 2],
            task_classes: 2,
            use_latents: true,
            init_from_base: false,
        };
        let e = downstream_probe_check(&cfg, 2).unwrap();
        assert!(e <= 1e-3, "{e}");
    }
}
