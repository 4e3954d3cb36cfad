//! Frame-level downstream model: its own trunk, the latent embedding module
//! (view-mean of the transferred latents, then a linear projection) and a
//! sigmoid head over `[phi_fused || lem(rho)]`.

use mvweak_core::{Real, Tensor};

use crate::base::adopt;
use crate::config::DownstreamConfig;
use crate::error::{ModelError, Result};
use crate::params::{Bound, Init, ParamSet};
use crate::tape::{FuseOp, Tape, Var};
use crate::trunk::{check_inputs, Dense, SequenceInput, SigmoidHead, Trunk};

#[derive(Clone, Debug)]
pub struct DownstreamModel<F> {
    pub cfg: DownstreamConfig,
    pub params: ParamSet<F>,
    pub trunk: Trunk,
    pub lem: Option<Dense>,
    pub head: SigmoidHead,
}

impl<F: Real> DownstreamModel<F> {
    pub fn new(cfg: &DownstreamConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::default();
        let mut init = Init::new(cfg.model.init_seed ^ 0x5eed_d0e5);
        let trunk = Trunk::new(&mut ps, &mut init, &cfg.model);
        let d = cfg.model.d_model;
        let lem = cfg
            .use_latents
            .then(|| Dense::new(&mut ps, &mut init, "lem", d, d, true));
        let width = if cfg.use_latents { 2 * d } else { d };
        let head = SigmoidHead::new(&mut ps, &mut init, "head", width, &cfg.head_widths);
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            trunk,
            lem,
            head,
        })
    }

    pub fn from_params(cfg: &DownstreamConfig, params: ParamSet<F>) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        adopt(&mut m.params, params)?;
        Ok(m)
    }

    pub fn cast<G: Real>(&self) -> DownstreamModel<G> {
        DownstreamModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            lem: self.lem.clone(),
            head: self.head.clone(),
        }
    }

    /// Copies every trunk parameter present in `base` (matched by name).
    pub fn transfer_trunk(&mut self, base: &ParamSet<F>) -> Result<usize> {
        let mut copied = 0;
        for name in self.params.names().to_vec() {
            let trunk_param = name.starts_with("encoder.") || name.starts_with("embed.") || name.starts_with("branch");
            if let (true, Some(t)) = (trunk_param, base.by_name(&name)) {
                self.params.replace(&name, t.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    fn check_latents(&self, rho: &Tensor<F>) -> Result<()> {
        let m = &self.cfg.model;
        let ok = matches!(rho.shape(), [l, t, d] if *l >= 1 && *t == m.num_frames && *d == m.d_model);
        if !ok {
            return Err(ModelError::shape(
                "lem",
                format!("latents {:?}, expected [views, {}, {}]", rho.shape(), m.num_frames, m.d_model),
            ));
        }
        Ok(())
    }

    pub fn lem_on(&self, tape: &mut Tape<F>, pv: &Bound, rho: &Tensor<F>) -> Result<Var> {
        self.check_latents(rho)?;
        let lem = self
            .lem
            .as_ref()
            .ok_or_else(|| ModelError::Config("latent embedding module disabled (use_latents = false)".into()))?;
        let views: Vec<Var> = (0..rho.shape()[0]).map(|s| tape.constant(rho.index_axis0(s))).collect();
        let mean = tape.fuse(&views, FuseOp::Mean);
        Ok(lem.forward(tape, pv, mean))
    }

    /// Frame scores `T x C_task` for every sequence of a batch. `latents[k]`
    /// is sequence `k`'s `views x T x d` latent tensor and is required when
    /// `use_latents` is set; it is ignored otherwise.
    pub fn forward_on(
        &self,
        tape: &mut Tape<F>,
        pv: &Bound,
        inputs: &[SequenceInput<F>],
        latents: Option<&[Tensor<F>]>,
    ) -> Result<Vec<Var>> {
        let refs = check_inputs(&self.cfg.model, inputs)?;
        let latents = if self.cfg.use_latents {
            let l = latents.ok_or_else(|| ModelError::Invalid("latent embeddings required when use_latents is set".into()))?;
            if l.len() != inputs.len() {
                return Err(ModelError::shape("lem", format!("{} latent tensors for {} sequences", l.len(), inputs.len())));
            }
            Some(l)
        } else {
            None
        };
        let phi = self.trunk.forward(tape, pv, &refs);
        let mut out = Vec::with_capacity(phi.len());
        for (k, views) in phi.iter().enumerate() {
            let fused = tape.fuse(views, self.cfg.model.ptb_op);
            let x = match latents {
                Some(l) => {
                    let e = self.lem_on(tape, pv, &l[k])?;
                    tape.concat_cols(&[fused, e])
                }
                None => fused,
            };
            out.push(self.head.forward(tape, pv, x));
        }
        Ok(out)
    }

    pub fn forward_batch(&self, inputs: &[SequenceInput<F>], latents: Option<&[Tensor<F>]>) -> Result<Vec<Tensor<F>>> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let vars = self.forward_on(&mut tape, &pv, inputs, latents)?;
        Ok(vars.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn forward(&self, input: &SequenceInput<F>, latents: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let l = latents.map(|r| vec![r.clone()]);
        Ok(self.forward_batch(std::slice::from_ref(input), l.as_deref())?.remove(0))
    }

    /// Latent embedding module output `T x d`.
    pub fn lem(&self, rho: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let v = self.lem_on(&mut tape, &pv, rho)?;
        Ok(tape.value(v).clone())
    }

    /// Width of the head input.
    pub fn head_input_width(&self) -> usize {
        let d = self.cfg.model.d_model;
        if self.cfg.use_latents {
            2 * d
        } else {
            d
        }
    }
}
