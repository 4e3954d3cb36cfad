//! Base objective: bag-level binary cross-entropy plus the weighted sum of
//! the per-view weak-label latent losses.

use mvweak_core::{Real, Tensor};
use mvweak_model::base::{BaseOutput, BaseVars};
use mvweak_model::latent_loss::{weak_label_latent_loss, weak_label_latent_loss_grad};
use mvweak_model::{BatchBags, EmbeddedBatch, Tape, TripletParams, Var};

use crate::error::{Result, TrainError};

/// Probability clamp inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub latent_per_view: Vec<f64>,
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
/// Clamped entries get a zero gradient.
pub fn bce<F: Real>(pred: &[F], target: &[F]) -> (F, Vec<F>) {
    assert_eq!(pred.len(), target.len(), "bce lengths");
    let eps = F::of(BCE_EPS);
    let n = F::of(pred.len() as f64);
    let mut sum = F::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let q = p.max(eps).min(F::one() - eps);
        sum = sum - (y * q.ln() + (F::one() - y) * (F::one() - q).ln());
        let inside = p > eps && p < F::one() - eps;
        grad.push(if inside { (q - y) / (q * (F::one() - q)) / n } else { F::zero() });
    }
    (sum / n, grad)
}

/// Tensor-level objective for evaluated outputs of a batch.
pub fn base_total_loss<F: Real>(outputs: &[BaseOutput<F>], bags: &BatchBags, lambda: f64, triplet: &TripletParams) -> Result<LossParts> {
    if outputs.len() != bags.num_samples() {
        return Err(TrainError::Data(format!("{} outputs for {} bags", outputs.len(), bags.num_samples())));
    }
    let pred: Vec<F> = outputs.iter().flat_map(|o| o.bag_pred.data().iter().copied()).collect();
    let target: Tensor<F> = bags.to_tensor();
    if pred.len() != target.len() {
        return Err(TrainError::Data("bag width differs from bag_pred width".into()));
    }
    let b = bce(&pred, target.data()).0.as_f64();
    let heads = outputs[0].rho.shape()[0];
    let mut latent = Vec::with_capacity(heads);
    for h in 0..heads {
        let views: Vec<Tensor<F>> = outputs.iter().map(|o| o.rho.index_axis0(h)).collect();
        let batch = EmbeddedBatch::new(Tensor::stack(&views)?)?;
        latent.push(weak_label_latent_loss(&batch, bags, triplet)?.as_f64());
    }
    let total = b + lambda * latent.iter().sum::<f64>();
    Ok(LossParts {
        total,
        bce: b,
        latent_per_view: latent,
    })
}

/// Records the objective on `tape` and returns its root together with the
/// value of every term.
pub fn base_loss_on<F: Real>(
    tape: &mut Tape<F>,
    vars: &BaseVars,
    bags: &BatchBags,
    lambda: f64,
    triplet: &TripletParams,
) -> Result<(Var, LossParts)> {
    let k = vars.bag_pred.len();
    let pred = tape.concat_rows(&vars.bag_pred);
    let target: Tensor<F> = bags.to_tensor();
    let (b, g) = bce(tape.value(pred).data(), target.data());
    let local = Tensor::from_vec(tape.value(pred).shape(), g)?;
    let bce_var = tape.scalar_with_grad(pred, b, local);
    let mut terms = vec![(bce_var, F::one())];
    let mut latent = Vec::new();
    let heads = vars.rho[0].len();
    for h in 0..heads {
        let rows: Vec<Var> = (0..k).map(|i| vars.rho[i][h]).collect();
        let cat = tape.concat_rows(&rows);
        let [kt, d] = *tape.value(cat).shape() else { unreachable!() };
        let stacked = tape.reshape(cat, &[k, kt / k, d]);
        let batch = EmbeddedBatch::new(tape.value(stacked).clone())?;
        let (l, grad) = weak_label_latent_loss_grad(&batch, bags, triplet)?;
        let v = tape.scalar_with_grad(stacked, l, grad);
        terms.push((v, F::of(lambda)));
        latent.push(l.as_f64());
    }
    let root = tape.weighted_sum(&terms);
    let parts = LossParts {
        total: tape.value(root).data()[0].as_f64(),
        bce: b.as_f64(),
        latent_per_view: latent,
    };
    Ok((root, parts))
}

/// Frame-level BCE over a batch of `T x C_task` score matrices.
pub fn frame_loss_on<F: Real>(tape: &mut Tape<F>, scores: &[Var], targets: &[Tensor<F>]) -> Result<(Var, f64)> {
    let pred = tape.concat_rows(scores);
    let target: Vec<F> = targets.iter().flat_map(|t| t.data().iter().copied()).collect();
    if target.len() != tape.value(pred).len() {
        return Err(TrainError::Data(format!(
            "targets hold {} values for {} scores",
            target.len(),
            tape.value(pred).len()
        )));
    }
    let (b, g) = bce(tape.value(pred).data(), &target);
    let local = Tensor::from_vec(tape.value(pred).shape(), g)?;
    Ok((tape.scalar_with_grad(pred, b, local), b.as_f64()))
}
