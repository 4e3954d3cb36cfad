//! The base model: shared encoder, embedding module, per-view transformer
//! branches, view fusion and the S+1 output heads (one latent head per view
//! plus the bag head).

use mvweak_core::{Real, Tensor};

use crate::config::{LatentMode, ModelConfig};
use crate::error::{ModelError, Result};
use crate::params::{Bound, Init, ParamSet};
use crate::tape::{FuseOp, Tape, Var};
use crate::trunk::{check_inputs, Dense, SequenceInput, SigmoidHead, Trunk};

/// Guard inside the L2 norm of the latent heads.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct BaseModel<F> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
    pub trunk: Trunk,
    pub latent: Vec<Dense>,
    pub bag: SigmoidHead,
}

/// Tape handles produced by [`BaseModel::forward_on`], indexed by sequence.
pub struct BaseVars {
    /// `phi[k][s]`, each `T x d`.
    pub phi: Vec<Vec<Var>>,
    /// `T x d`.
    pub phi_max: Vec<Var>,
    /// `rho[k][head]`, each `T x d` with unit-norm rows.
    pub rho: Vec<Vec<Var>>,
    /// `T x C_bag`.
    pub frame_scores: Vec<Var>,
    /// `1 x C_bag`.
    pub bag_pred: Vec<Var>,
}

/// Evaluated outputs for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseOutput<F> {
    /// `heads x T x d`.
    pub rho: Tensor<F>,
    pub frame_scores: Tensor<F>,
    pub bag_pred: Tensor<F>,
    pub phi_max: Tensor<F>,
}

impl<F: Real> BaseModel<F> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::default();
        let mut init = Init::new(cfg.init_seed);
        let trunk = Trunk::new(&mut ps, &mut init, cfg);
        let d = cfg.d_model;
        let latent = (0..cfg.num_latent_heads())
            .map(|h| Dense::new(&mut ps, &mut init, &format!("latent{h}"), d, d, true))
            .collect();
        let bag = SigmoidHead::new(&mut ps, &mut init, "bag", d, &cfg.bag_widths);
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            trunk,
            latent,
            bag,
        })
    }

    /// Rebuilds the layer structure for `cfg` and adopts `params`, which must
    /// match it name for name and shape for shape.
    pub fn from_params(cfg: &ModelConfig, params: ParamSet<F>) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        adopt(&mut m.params, params)?;
        Ok(m)
    }

    pub fn cast<G: Real>(&self) -> BaseModel<G> {
        BaseModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            latent: self.latent.clone(),
            bag: self.bag.clone(),
        }
    }

    /// Builds the full forward graph for a batch on `tape`.
    pub fn forward_on(&self, tape: &mut Tape<F>, pv: &Bound, inputs: &[SequenceInput<F>]) -> Result<BaseVars> {
        let refs = check_inputs(&self.cfg, inputs)?;
        let phi = self.trunk.forward(tape, pv, &refs);
        let mut out = BaseVars {
            phi_max: Vec::with_capacity(phi.len()),
            rho: Vec::with_capacity(phi.len()),
            frame_scores: Vec::with_capacity(phi.len()),
            bag_pred: Vec::with_capacity(phi.len()),
            phi: Vec::new(),
        };
        for views in &phi {
            let fused = tape.fuse(views, self.cfg.ptb_op);
            let rho = self.latent_heads_on(tape, pv, views);
            let (scores, bag) = self.bag_head_on(tape, pv, fused);
            out.phi_max.push(fused);
            out.rho.push(rho);
            out.frame_scores.push(scores);
            out.bag_pred.push(bag);
        }
        out.phi = phi;
        Ok(out)
    }

    /// Linear head then row-wise L2 normalization. Per-view mode maps each
    /// view's branch output through its own head; single mode uses one head
    /// on the view-mean of the branch outputs.
    pub fn latent_heads_on(&self, tape: &mut Tape<F>, pv: &Bound, phi: &[Var]) -> Vec<Var> {
        let eps = F::of(L2_EPS);
        match self.cfg.latent_mode {
            LatentMode::PerView => phi
                .iter()
                .zip(&self.latent)
                .map(|(&p, head)| {
                    let z = head.forward(tape, pv, p);
                    tape.l2_normalize_rows(z, eps)
                })
                .collect(),
            LatentMode::Single => {
                let mean = tape.fuse(phi, FuseOp::Mean);
                let z = self.latent[0].forward(tape, pv, mean);
                vec![tape.l2_normalize_rows(z, eps)]
            }
        }
    }

    /// Per-frame sigmoid scores and their mean over frames.
    pub fn bag_head_on(&self, tape: &mut Tape<F>, pv: &Bound, phi_max: Var) -> (Var, Var) {
        let scores = self.bag.forward(tape, pv, phi_max);
        let bag = tape.mean_rows(scores);
        (scores, bag)
    }

    /// Evaluates every sequence of a batch without recording gradients.
    pub fn forward_batch(&self, inputs: &[SequenceInput<F>]) -> Result<Vec<BaseOutput<F>>> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let vars = self.forward_on(&mut tape, &pv, inputs)?;
        Ok((0..inputs.len())
            .map(|k| {
                let rho: Vec<Tensor<F>> = vars.rho[k].iter().map(|&v| tape.value(v).clone()).collect();
                BaseOutput {
                    rho: Tensor::stack(&rho).unwrap(),
                    frame_scores: tape.value(vars.frame_scores[k]).clone(),
                    bag_pred: tape.value(vars.bag_pred[k]).clone().reshape(&[self.cfg.bag_classes]).unwrap(),
                    phi_max: tape.value(vars.phi_max[k]).clone(),
                }
            })
            .collect())
    }

    pub fn forward(&self, input: &SequenceInput<F>) -> Result<BaseOutput<F>> {
        Ok(self.forward_batch(std::slice::from_ref(input))?.remove(0))
    }

    /// Encoder output `S x T x d` for one sequence.
    pub fn encode_frames(&self, input: &SequenceInput<F>) -> Result<Tensor<F>> {
        input.check(&self.cfg)?;
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let psi = self.trunk.encode(&mut tape, &pv, &[input]);
        let c = &self.cfg;
        Ok(tape.value(psi).clone().reshape(&[c.num_views, c.num_frames, c.d_model])?)
    }

    /// Embedding module applied to an encoder output `psi` (`S x T x d`).
    pub fn apply_embeddings(&self, psi: &Tensor<F>, input: &SequenceInput<F>) -> Result<Tensor<F>> {
        let c = &self.cfg;
        if psi.shape() != [c.num_views, c.num_frames, c.d_model] {
            return Err(ModelError::shape("embedding", format!("psi {:?}", psi.shape())));
        }
        check_embedding_inputs(c, input)?;
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let views: Vec<Tensor<F>> = (0..c.num_views)
            .map(|s| {
                let p = tape.constant(psi.index_axis0(s));
                let v = self.trunk.embed(&mut tape, &pv, p, input, s);
                tape.value(v).clone()
            })
            .collect();
        Ok(Tensor::stack(&views)?)
    }

    /// Transformer branch `s` applied to `x` (`T x d`).
    pub fn transformer_branch(&self, s: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        let c = &self.cfg;
        if s >= c.num_views || x.shape().len() != 2 || x.shape()[1] != c.d_model {
            return Err(ModelError::shape(format!("branch{s}"), format!("input {:?}", x.shape())));
        }
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.trunk.branches[s].forward(&mut tape, &pv, xv);
        Ok(tape.value(y).clone())
    }

    /// Latent embeddings from per-view branch outputs (each `T x d`).
    pub fn latent_heads(&self, phi: &[Tensor<F>]) -> Result<Tensor<F>> {
        if phi.len() != self.cfg.num_views {
            return Err(ModelError::shape("latent", format!("{} views for S = {}", phi.len(), self.cfg.num_views)));
        }
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let vars: Vec<Var> = phi.iter().map(|p| tape.constant(p.clone())).collect();
        let rho = self.latent_heads_on(&mut tape, &pv, &vars);
        let rho: Vec<Tensor<F>> = rho.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(Tensor::stack(&rho)?)
    }

    /// `(frame_scores, bag_pred)` for a fused transformer output.
    pub fn bag_head(&self, phi_max: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        if phi_max.shape().len() != 2 || phi_max.shape()[1] != self.cfg.d_model {
            return Err(ModelError::shape("bag", format!("input {:?}", phi_max.shape())));
        }
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let x = tape.constant(phi_max.clone());
        let (s, b) = self.bag_head_on(&mut tape, &pv, x);
        let n = self.cfg.bag_classes;
        Ok((tape.value(s).clone(), tape.value(b).clone().reshape(&[n])?))
    }
}

fn check_embedding_inputs<F: Real>(c: &ModelConfig, input: &SequenceInput<F>) -> Result<()> {
    if c.use_sl && input.sl.shape() != [c.num_views, c.num_frames, c.sl_cells] {
        return Err(ModelError::shape(
            "embedding.sl",
            format!("SL width must be N = {}, got {:?}", c.sl_cells, input.sl.shape()),
        ));
    }
    if c.use_pd && input.pd.shape() != [c.num_views, c.num_frames] {
        return Err(ModelError::shape("embedding.pd", format!("pd {:?}", input.pd.shape())));
    }
    Ok(())
}

/// Replaces `target`'s tensors with `source`'s after checking that names and
/// shapes agree one to one.
pub(crate) fn adopt<F: Real>(target: &mut ParamSet<F>, source: ParamSet<F>) -> Result<()> {
    if target.names() != source.names() {
        let missing: Vec<&String> = target.names().iter().filter(|n| !source.names().contains(n)).collect();
        return Err(ModelError::Invalid(format!(
            "parameter names do not match the configuration (missing: {missing:?})"
        )));
    }
    for (name, t) in source.names().to_vec().iter().zip(source.tensors().iter().cloned()) {
        target.replace(name, t)?;
    }
    Ok(())
}

/// Element-wise reduction of per-view tensors across the view axis.
pub fn ptb_fuse<F: Real>(views: &[Tensor<F>], op: FuseOp) -> Result<Tensor<F>> {
    let first = views.first().ok_or_else(|| ModelError::Invalid("no views to fuse".into()))?;
    if let Some(v) = views.iter().find(|v| v.shape() != first.shape()) {
        return Err(ModelError::shape("ptb", format!("{:?} vs {:?}", v.shape(), first.shape())));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
    let f = tape.fuse(&vars, op);
    Ok(tape.value(f).clone())
}
