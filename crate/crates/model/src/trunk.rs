//! Layers shared by the base and downstream models: the frame encoder, the
//! embedding module and the per-view transformer branches.

use mvweak_core::{Real, Tensor};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::tape::{Tape, Var};

/// Encoder, embedding and transformer inputs for one multi-view sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInput<F> {
    /// `S x T x H x W x 3`.
    pub frames: Tensor<F>,
    /// `S x T`, binary.
    pub pd: Tensor<F>,
    /// `S x T x N`, rows one-hot or zero.
    pub sl: Tensor<F>,
}

impl<F: Real> SequenceInput<F> {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let (s, t) = (cfg.num_views, cfg.num_frames);
        let want = [s, t, cfg.image_height, cfg.image_width, 3];
        if self.frames.shape() != want {
            return Err(ModelError::shape(
                "encoder",
                format!("frames {:?}, expected {:?}", self.frames.shape(), want),
            ));
        }
        if cfg.use_pd && self.pd.shape() != [s, t] {
            return Err(ModelError::shape(
                "embedding.pd",
                format!("pd {:?}, expected [{s}, {t}]", self.pd.shape()),
            ));
        }
        if cfg.use_sl && self.sl.shape() != [s, t, cfg.sl_cells] {
            return Err(ModelError::shape(
                "embedding.sl",
                format!(
                    "sl {:?}, expected [{s}, {t}, {}] (N = {})",
                    self.sl.shape(),
                    cfg.sl_cells,
                    cfg.sl_cells
                ),
            ));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> SequenceInput<G> {
        SequenceInput {
            frames: self.frames.cast(),
            pd: self.pd.cast(),
            sl: self.sl.cast(),
        }
    }
}

/// Fully connected layer `x W (+ b)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init.fan_in(&[fan_in, fan_out], fan_in));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, pv.var(self.w));
        match self.b {
            Some(b) => tape.add_row(y, pv.var(b)),
            None => y,
        }
    }
}

/// Stack of dense layers with rectified-linear hidden activations and a
/// sigmoid on the last layer.
#[derive(Clone, Debug)]
pub struct SigmoidHead {
    pub layers: Vec<Dense>,
}

impl SigmoidHead {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, init: &mut Init, name: &str, input: usize, widths: &[usize]) -> Self {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Dense::new(ps, init, &format!("{name}{i}"), fan_in, w, true);
                fan_in = w;
                l
            })
            .collect();
        Self { layers }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, pv, x);
            x = if i == last { tape.sigmoid(x) } else { tape.relu(x) };
        }
        x
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<F: Real>(ps: &mut ParamSet<F>, name: &str, d: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[d], F::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, x: Var) -> Var {
        tape.layer_norm_rows(x, pv.var(self.gamma), pv.var(self.beta), F::of(1e-6))
    }
}

/// One view's transformer branch: multi-head self-attention over frames with
/// a residual add, then a position-wise feed-forward block with a residual add.
#[derive(Clone, Debug)]
pub struct Branch {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub ff: Vec<Dense>,
    norms: Option<(Norm, Norm)>,
    heads: usize,
}

impl Branch {
    fn new<F: Real>(ps: &mut ParamSet<F>, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let query = Dense::new(ps, init, &format!("{name}.attn.query"), d, d, true);
        let key = Dense::new(ps, init, &format!("{name}.attn.key"), d, d, true);
        let value = Dense::new(ps, init, &format!("{name}.attn.value"), d, d, true);
        let output = Dense::new(ps, init, &format!("{name}.attn.output"), d, d, true);
        let mut fan_in = d;
        let ff = cfg
            .ff_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Dense::new(ps, init, &format!("{name}.ff{i}"), fan_in, w, true);
                fan_in = w;
                l
            })
            .collect();
        let norms = cfg.layer_norm.then(|| {
            (
                Norm::new(ps, &format!("{name}.norm0"), d),
                Norm::new(ps, &format!("{name}.norm1"), d),
            )
        });
        Self {
            query,
            key,
            value,
            output,
            ff,
            norms,
            heads: cfg.num_heads,
        }
    }

    /// `x` is `T x d`; returns `T x d`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, x: Var) -> Var {
        let d = tape.value(x).shape()[1];
        let dh = d / self.heads;
        let q = self.query.forward(tape, pv, x);
        let k = self.key.forward(tape, pv, x);
        let v = self.value.forward(tape, pv, x);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                tape.matmul(attn, vh)
            })
            .collect();
        let z = tape.concat_cols(&heads);
        let attended = self.output.forward(tape, pv, z);
        let mut plus = tape.add(x, attended);
        if let Some((n0, _)) = &self.norms {
            plus = n0.forward(tape, pv, plus);
        }
        let mut h = plus;
        let last = self.ff.len() - 1;
        for (i, l) in self.ff.iter().enumerate() {
            h = l.forward(tape, pv, h);
            if i != last {
                h = tape.relu(h);
            }
        }
        let mut out = tape.add(plus, h);
        if let Some((_, n1)) = &self.norms {
            out = n1.forward(tape, pv, out);
        }
        out
    }
}

/// Encoder, embedding tables and transformer branches.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub convs: Vec<(ParamId, ParamId)>,
    pub encoder_dense: Dense,
    pub sl_proj: Vec<ParamId>,
    pub frame_table: ParamId,
    pub camera_table: ParamId,
    pub branches: Vec<Branch>,
    cfg: ModelConfig,
}

impl Trunk {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let k = cfg.conv_kernel;
        let mut cin = 3;
        let convs = cfg
            .conv_filters
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let w = ps.add(format!("encoder.conv{i}.w"), init.fan_in(&[k, k, cin, cout], k * k * cin));
                let b = ps.add(format!("encoder.conv{i}.b"), Tensor::zeros(&[cout]));
                cin = cout;
                (w, b)
            })
            .collect();
        let d = cfg.d_model;
        let encoder_dense = Dense::new(ps, init, "encoder.dense", cfg.flat_width(), d, true);
        let sl_proj = if cfg.use_sl {
            (0..cfg.num_views)
                .map(|s| ps.add(format!("embed.sl{s}.w"), init.fan_in(&[cfg.sl_cells, d], cfg.sl_cells)))
                .collect()
        } else {
            Vec::new()
        };
        let frame_table = ps.add("embed.frame", init.table(&[cfg.num_frames, d]));
        let camera_table = ps.add("embed.camera", init.table(&[cfg.num_views, d]));
        let branches = (0..cfg.num_views)
            .map(|s| Branch::new(ps, init, &format!("branch{s}"), cfg))
            .collect();
        Self {
            convs,
            encoder_dense,
            sl_proj,
            frame_table,
            camera_table,
            branches,
            cfg: cfg.clone(),
        }
    }

    /// Every frame of every view of every sequence through the shared
    /// encoder. Rows are ordered `(k, s, t)`; the result is `K*S*T x d`.
    pub fn encode<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, inputs: &[&SequenceInput<F>]) -> Var {
        let c = &self.cfg;
        let per = c.num_views * c.num_frames;
        let mut data = Vec::with_capacity(inputs.len() * inputs[0].frames.len());
        for inp in inputs {
            data.extend_from_slice(inp.frames.data());
        }
        let frames = Tensor::from_vec(&[inputs.len() * per, c.image_height, c.image_width, 3], data).unwrap();
        let mut x = tape.constant(frames);
        for &(w, b) in &self.convs {
            x = tape.conv2d(x, pv.var(w), pv.var(b));
            x = tape.relu(x);
            x = tape.maxpool2(x);
        }
        let x = tape.reshape(x, &[inputs.len() * per, c.flat_width()]);
        let x = self.encoder_dense.forward(tape, pv, x);
        tape.relu(x)
    }

    /// Adds the SL projection, the broadcast PD flag, the shared frame
    /// embedding and view `s`'s camera embedding to `psi` (`T x d`).
    pub fn embed<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, psi: Var, input: &SequenceInput<F>, s: usize) -> Var {
        let c = &self.cfg;
        let (t, d) = (c.num_frames, c.d_model);
        let mut x = psi;
        if c.use_sl {
            let sl = input.sl.index_axis0(s);
            let sl = tape.constant(sl);
            let proj = tape.matmul(sl, pv.var(self.sl_proj[s]));
            x = tape.add(x, proj);
        }
        if c.use_pd {
            let pd = input.pd.index_axis0(s);
            let data = pd.data().iter().flat_map(|&p| std::iter::repeat_n(p, d)).collect();
            let pd = tape.constant(Tensor::from_vec(&[t, d], data).unwrap());
            x = tape.add(x, pd);
        }
        x = tape.add(x, pv.var(self.frame_table));
        let cam = tape.slice_rows(pv.var(self.camera_table), s, 1);
        let cam = tape.reshape(cam, &[d]);
        tape.add_row(x, cam)
    }

    /// Per-sequence, per-view transformer outputs `phi[k][s]`, each `T x d`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, pv: &Bound, inputs: &[&SequenceInput<F>]) -> Vec<Vec<Var>> {
        let c = &self.cfg;
        let psi = self.encode(tape, pv, inputs);
        inputs
            .iter()
            .enumerate()
            .map(|(k, inp)| {
                (0..c.num_views)
                    .map(|s| {
                        let rows = tape.slice_rows(psi, (k * c.num_views + s) * c.num_frames, c.num_frames);
                        let x = self.embed(tape, pv, rows, inp, s);
                        self.branches[s].forward(tape, pv, x)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Validates inputs against `cfg` and returns borrowed references.
pub fn check_inputs<'a, F: Real>(cfg: &ModelConfig, inputs: &'a [SequenceInput<F>]) -> Result<Vec<&'a SequenceInput<F>>> {
    if inputs.is_empty() {
        return Err(ModelError::Invalid("empty batch".into()));
    }
    for i in inputs {
        i.check(cfg)?;
    }
    Ok(inputs.iter().collect())
}
