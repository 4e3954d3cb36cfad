//! Weak-label latent loss: for every bag class `c` and frame index `t`, a
//! batch-hard triplet loss over the `K` embeddings `B[:, t, :]` using the
//! class-`c` bag entries as binary labels. Terms are averaged over `(c, t)`.

use mvweak_core::data::ActionBag;
use mvweak_core::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletParams {
    pub margin: f64,
    pub distance: Distance,
}

impl Default for TripletParams {
    fn default() -> Self {
        Self {
            margin: 1.0,
            distance: Distance::Euclidean,
        }
    }
}

impl TripletParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(ModelError::Config(format!("triplet margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// One view's per-frame embeddings for a batch, `K x T x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedBatch<F> {
    data: Tensor<F>,
}

impl<F: Real> EmbeddedBatch<F> {
    pub fn new(data: Tensor<F>) -> Result<Self> {
        let [k, _, _] = *data.shape() else {
            return Err(ModelError::shape("latent loss", format!("batch must be K x T x d, got {:?}", data.shape())));
        };
        if k < 2 {
            return Err(ModelError::Invalid(format!("latent loss needs K >= 2, got {k}")));
        }
        if !data.all_finite() {
            return Err(ModelError::Invalid("embedded batch contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    /// Rows `B[:, t, :]` as a `K x d` slice-copy.
    fn frame(&self, t: usize) -> Vec<F> {
        let (k, tn, d) = self.dims();
        let src = self.data.data();
        let mut out = Vec::with_capacity(k * d);
        for i in 0..k {
            let o = (i * tn + t) * d;
            out.extend_from_slice(&src[o..o + d]);
        }
        out
    }
}

/// Binary `K x C` bag matrix for a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchBags {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BatchBags {
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ModelError::shape("bags", "rows have different lengths"));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(ModelError::Invalid("bag entries must be 0 or 1".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_bags(bags: &[ActionBag]) -> Result<Self> {
        let rows: Vec<Vec<u8>> = bags.iter().map(|b| b.as_slice().to_vec()).collect();
        Self::from_rows(&rows)
    }

    pub fn num_samples(&self) -> usize {
        self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.cols
    }

    pub fn get(&self, k: usize, c: usize) -> u8 {
        self.data[k * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<u8> {
        (0..self.rows).map(|k| self.get(k, c)).collect()
    }

    /// The bags as a `K x C` 0/1 tensor.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|&v| F::of(v as f64)).collect();
        Tensor::from_vec(&[self.rows, self.cols], data).unwrap()
    }
}

/// `K x K` distances between the rows of `points` (`K x d`). Euclidean
/// distances use the Gram expansion clamped at zero before the square root.
pub fn pairwise_distances<F: Real>(points: &Tensor<F>, distance: Distance) -> Result<Tensor<F>> {
    let [k, d] = *points.shape() else {
        return Err(ModelError::shape("pairwise distances", format!("expected K x d, got {:?}", points.shape())));
    };
    Ok(Tensor::from_vec(&[k, k], distances(points.data(), k, d, distance)).unwrap())
}

fn distances<F: Real>(x: &[F], k: usize, d: usize, distance: Distance) -> Vec<F> {
    let sq: Vec<F> = (0..k).map(|i| x[i * d..(i + 1) * d].iter().map(|&v| v * v).sum()).collect();
    let mut out = vec![F::zero(); k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let dot: F = x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(&a, &b)| a * b).sum();
            let s = (sq[i] + sq[j] - F::of(2.0) * dot).max(F::zero());
            let v = match distance {
                Distance::Euclidean => s.sqrt(),
                Distance::SquaredEuclidean => s,
            };
            out[i * k + j] = v;
            out[j * k + i] = v;
        }
    }
    out
}

/// Hardest positive and negative for anchor `a`, or `None` when the anchor
/// lacks either. Ties go to the lowest index.
fn hardest<F: Real>(dist: &[F], labels: &[u8], a: usize) -> Option<(usize, usize)> {
    let k = labels.len();
    let mut pos: Option<usize> = None;
    let mut neg: Option<usize> = None;
    for j in 0..k {
        let dj = dist[a * k + j];
        if labels[j] == labels[a] {
            if j != a && pos.is_none_or(|p| dj > dist[a * k + p]) {
                pos = Some(j);
            }
        } else if neg.is_none_or(|n| dj < dist[a * k + n]) {
            neg = Some(j);
        }
    }
    Some((pos?, neg?))
}

/// Mean hinge over anchors that have at least one positive (same label,
/// excluding the anchor) and one negative; zero when no anchor qualifies.
pub fn batch_hard_triplet<F: Real>(dists: &Tensor<F>, labels: &[u8], margin: F) -> Result<F> {
    let k = labels.len();
    if dists.shape() != [k, k] {
        return Err(ModelError::shape("batch hard triplet", format!("{:?} for {k} labels", dists.shape())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(ModelError::Invalid("triplet labels must be binary".into()));
    }
    Ok(triplet_term(dists.data(), labels, margin).0)
}

/// Slice loss and, per valid anchor, `(anchor, positive, negative, active)`.
fn triplet_term<F: Real>(dist: &[F], labels: &[u8], margin: F) -> (F, Vec<(usize, usize, usize, bool)>) {
    let mut total = F::zero();
    let mut anchors = Vec::new();
    for a in 0..labels.len() {
        if let Some((p, n)) = hardest(dist, labels, a) {
            let k = labels.len();
            let h = dist[a * k + p] - dist[a * k + n] + margin;
            let active = h > F::zero();
            if active {
                total = total + h;
            }
            anchors.push((a, p, n, active));
        }
    }
    if anchors.is_empty() {
        (F::zero(), anchors)
    } else {
        (total / F::of(anchors.len() as f64), anchors)
    }
}

fn check_pair<F: Real>(batch: &EmbeddedBatch<F>, bags: &BatchBags, params: &TripletParams) -> Result<()> {
    params.validate()?;
    let (k, _, _) = batch.dims();
    if bags.num_classes() == 0 {
        return Err(ModelError::Invalid("latent loss needs at least one bag class".into()));
    }
    if bags.num_samples() != k {
        return Err(ModelError::shape(
            "latent loss",
            format!("{} bags for a batch of {k}", bags.num_samples()),
        ));
    }
    Ok(())
}

struct Slice<F> {
    term: F,
    grad: Option<Vec<F>>,
}

fn slice<F: Real>(batch: &EmbeddedBatch<F>, labels: &[u8], t: usize, params: &TripletParams, want_grad: bool) -> Slice<F> {
    let (k, _, d) = batch.dims();
    let x = batch.frame(t);
    let dist = distances(&x, k, d, params.distance);
    let (term, anchors) = triplet_term(&dist, labels, F::of(params.margin));
    if !want_grad {
        return Slice { term, grad: None };
    }
    let mut g = vec![F::zero(); k * d];
    if !anchors.is_empty() {
        let w = F::one() / F::of(anchors.len() as f64);
        for &(a, p, n, active) in &anchors {
            if !active {
                continue;
            }
            for (other, sign) in [(p, w), (n, -w)] {
                let dv = dist[a * k + other];
                let coef = match params.distance {
                    Distance::Euclidean if dv > F::zero() => sign / dv,
                    Distance::Euclidean => continue,
                    Distance::SquaredEuclidean => sign * F::of(2.0),
                };
                for j in 0..d {
                    let diff = coef * (x[a * d + j] - x[other * d + j]);
                    g[a * d + j] = g[a * d + j] + diff;
                    g[other * d + j] = g[other * d + j] - diff;
                }
            }
        }
    }
    Slice { term, grad: Some(g) }
}

fn run<F: Real>(batch: &EmbeddedBatch<F>, bags: &BatchBags, params: &TripletParams, want_grad: bool) -> Result<(F, Option<Tensor<F>>)> {
    check_pair(batch, bags, params)?;
    let (k, tn, d) = batch.dims();
    let c_n = bags.num_classes();
    let columns: Vec<Vec<u8>> = (0..c_n).map(|c| bags.column(c)).collect();
    let slices: Vec<Slice<F>> = (0..c_n * tn)
        .into_par_iter()
        .map(|i| {
            let (c, t) = (i / tn, i % tn);
            slice(batch, &columns[c], t, params, want_grad)
        })
        .collect();
    let norm = F::of((c_n * tn) as f64);
    let loss = slices.iter().map(|s| s.term).fold(F::zero(), |a, b| a + b) / norm;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grad = vec![F::zero(); k * tn * d];
    for (i, s) in slices.iter().enumerate() {
        let t = i % tn;
        let g = s.grad.as_ref().unwrap();
        for a in 0..k {
            let o = (a * tn + t) * d;
            for j in 0..d {
                grad[o + j] = grad[o + j] + g[a * d + j] / norm;
            }
        }
    }
    Ok((loss, Some(Tensor::from_vec(&[k, tn, d], grad).unwrap())))
}

pub fn weak_label_latent_loss<F: Real>(batch: &EmbeddedBatch<F>, bags: &BatchBags, params: &TripletParams) -> Result<F> {
    Ok(run(batch, bags, params, false)?.0)
}

/// Loss together with its gradient with respect to the batch (`K x T x d`).
pub fn weak_label_latent_loss_grad<F: Real>(
    batch: &EmbeddedBatch<F>,
    bags: &BatchBags,
    params: &TripletParams,
) -> Result<(F, Tensor<F>)> {
    let (l, g) = run(batch, bags, params, true)?;
    Ok((l, g.unwrap()))
}

/// Smallest distance of the loss from a non-differentiable configuration:
/// gaps between the two largest positive and the two smallest negative
/// distances of every valid anchor, the hinge arguments, and the mined
/// distances themselves. Infinite when every slice is degenerate.
pub fn tie_gap<F: Real>(batch: &EmbeddedBatch<F>, bags: &BatchBags, params: &TripletParams) -> Result<f64> {
    check_pair(batch, bags, params)?;
    let (k, tn, d) = batch.dims();
    let margin = params.margin;
    let mut gap = f64::INFINITY;
    for c in 0..bags.num_classes() {
        let labels = bags.column(c);
        for t in 0..tn {
            let dist: Vec<f64> = distances(&batch.frame(t), k, d, params.distance).iter().map(|v| v.as_f64()).collect();
            for a in 0..k {
                let mut pos: Vec<f64> = (0..k).filter(|&j| j != a && labels[j] == labels[a]).map(|j| dist[a * k + j]).collect();
                let mut neg: Vec<f64> = (0..k).filter(|&j| labels[j] != labels[a]).map(|j| dist[a * k + j]).collect();
                if pos.is_empty() || neg.is_empty() {
                    continue;
                }
                pos.sort_by(|x, y| y.total_cmp(x));
                neg.sort_by(|x, y| x.total_cmp(y));
                if pos.len() > 1 {
                    gap = gap.min(pos[0] - pos[1]);
                }
                if neg.len() > 1 {
                    gap = gap.min(neg[1] - neg[0]);
                }
                gap = gap.min((pos[0] - neg[0] + margin).abs()).min(pos[0]).min(neg[0]);
            }
        }
    }
    Ok(gap)
}

/// Reference implementation by exhaustive enumeration of every
/// `(anchor, positive, negative)` triple with direct per-pair norms.
pub mod oracle {
    use super::Distance;

    fn dist(a: &[f64], b: &[f64], distance: Distance) -> f64 {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match distance {
            Distance::Euclidean => s.sqrt(),
            Distance::SquaredEuclidean => s,
        }
    }

    /// `points[k]` is one embedding, `labels[k]` its binary label.
    pub fn triplet_slice(points: &[Vec<f64>], labels: &[u8], margin: f64, distance: Distance) -> f64 {
        let k = points.len();
        let mut terms = Vec::new();
        for a in 0..k {
            let mut worst: Option<f64> = None;
            for p in 0..k {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..k {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    let v = dist(&points[a], &points[p], distance) - dist(&points[a], &points[n], distance) + margin;
                    worst = Some(worst.map_or(v, |w: f64| w.max(v)));
                }
            }
            if let Some(w) = worst {
                terms.push(w.max(0.0));
            }
        }
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        }
    }

    /// `emb[k][t]` is a `d`-vector, `bags[k]` a bag row.
    pub fn latent_loss(emb: &[Vec<Vec<f64>>], bags: &[Vec<u8>], margin: f64, distance: Distance) -> f64 {
        let t_n = emb[0].len();
        let c_n = bags[0].len();
        let mut total = 0.0;
        for c in 0..c_n {
            let labels: Vec<u8> = bags.iter().map(|b| b[c]).collect();
            for t in 0..t_n {
                let pts: Vec<Vec<f64>> = emb.iter().map(|e| e[t].clone()).collect();
                total += triplet_slice(&pts, &labels, margin, distance);
            }
        }
        total / (c_n * t_n) as f64
    }
}
