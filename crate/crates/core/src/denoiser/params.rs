use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    fn init(rng: &mut Rng, inp: usize, out: usize, std: f32, bias: bool) -> Self {
        Self {
            w: Tensor::randn(rng, &[inp, out]).scale(std),
            b: bias.then(|| Tensor::zeros(&[out])),
        }
    }

    fn zeros(inp: usize, out: usize, bias: bool) -> Self {
        Self {
            w: Tensor::zeros(&[inp, out]),
            b: bias.then(|| Tensor::zeros(&[out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Applies the layer to `rows` row-major inputs.
    pub(crate) fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let (k, n) = (self.in_dim(), self.out_dim());
        let mut out = alloc::vec![0.0; rows * n];
        crate::tensor::matmul_into(x, self.w.data(), rows, k, n, &mut out);
        if let Some(b) = &self.b {
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub cross_norm: Tensor,
    pub cq: Linear,
    pub ck: Linear,
    pub cv: Linear,
    pub co: Linear,
    pub mlp_norm: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub patch_in: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub audio_proj: Linear,
    pub identity_proj: Linear,
    pub reference_proj: Linear,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub head: Linear,
}

/// Output head treatment at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    /// Zero weights and bias: an untrained model predicts x0 = 0.
    Zero,
    /// Same scaled-normal draw as every other projection.
    Random,
}

impl DenoiserParams {
    /// Scaled-normal (`std = width^-0.5`) projections, unit norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng, head: HeadInit) -> Self {
        let w = cfg.width;
        let std = 1.0 / libm::sqrtf(w as f32);
        let hidden = cfg.mlp_hidden();
        let latent = cfg.latent_len();
        let mut lin = |i: usize, o: usize, bias: bool| Linear::init(rng, i, o, std, bias);
        let patch_in = lin(cfg.channels, w, true);
        let time_in = lin(w, w, true);
        let time_out = lin(w, w, true);
        let audio_proj = lin(cfg.audio_dim, w, true);
        let identity_proj = lin(cfg.identity_dim, w, true);
        let reference_proj = lin(latent, w, true);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[w], 1.0),
                wq: lin(w, w, false),
                wk: lin(w, w, false),
                wv: lin(w, w, false),
                wo: lin(w, w, false),
                cross_norm: Tensor::full(&[w], 1.0),
                cq: lin(w, w, false),
                ck: lin(w, w, false),
                cv: lin(w, w, false),
                co: lin(w, w, false),
                mlp_norm: Tensor::full(&[w], 1.0),
                mlp_in: lin(w, hidden, true),
                mlp_out: lin(hidden, w, true),
            })
            .collect();
        let head = match head {
            HeadInit::Zero => Linear::zeros(w, cfg.channels, true),
            HeadInit::Random => lin(w, cfg.channels, true),
        };
        Self {
            patch_in,
            time_in,
            time_out,
            audio_proj,
            identity_proj,
            reference_proj,
            layers,
            final_norm: Tensor::full(&[w], 1.0),
            head,
        }
    }

    /// Every parameter set to zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(cfg, &mut Rng::new(0), HeadInit::Zero);
        for (_, t) in p.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    /// Stable names in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, l: &'a Linear) {
            out.push((format!("{name}.w"), &l.w));
            if let Some(b) = &l.b {
                out.push((format!("{name}.b"), b));
            }
        }
        lin(&mut out, "patch_in".into(), &self.patch_in);
        lin(&mut out, "time_in".into(), &self.time_in);
        lin(&mut out, "time_out".into(), &self.time_out);
        lin(&mut out, "audio_proj".into(), &self.audio_proj);
        lin(&mut out, "identity_proj".into(), &self.identity_proj);
        lin(&mut out, "reference_proj".into(), &self.reference_proj);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            lin(&mut out, format!("layers.{i}.wq"), &l.wq);
            lin(&mut out, format!("layers.{i}.wk"), &l.wk);
            lin(&mut out, format!("layers.{i}.wv"), &l.wv);
            lin(&mut out, format!("layers.{i}.wo"), &l.wo);
            out.push((format!("layers.{i}.cross_norm"), &l.cross_norm));
            lin(&mut out, format!("layers.{i}.cq"), &l.cq);
            lin(&mut out, format!("layers.{i}.ck"), &l.ck);
            lin(&mut out, format!("layers.{i}.cv"), &l.cv);
            lin(&mut out, format!("layers.{i}.co"), &l.co);
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            lin(&mut out, format!("layers.{i}.mlp_in"), &l.mlp_in);
            lin(&mut out, format!("layers.{i}.mlp_out"), &l.mlp_out);
        }
        out.push(("final_norm".into(), &self.final_norm));
        lin(&mut out, "head".into(), &self.head);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: String, l: &'a mut Linear) {
            out.push((format!("{name}.w"), &mut l.w));
            if let Some(b) = &mut l.b {
                out.push((format!("{name}.b"), b));
            }
        }
        lin(&mut out, "patch_in".into(), &mut self.patch_in);
        lin(&mut out, "time_in".into(), &mut self.time_in);
        lin(&mut out, "time_out".into(), &mut self.time_out);
        lin(&mut out, "audio_proj".into(), &mut self.audio_proj);
        lin(&mut out, "identity_proj".into(), &mut self.identity_proj);
        lin(&mut out, "reference_proj".into(), &mut self.reference_proj);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            lin(&mut out, format!("layers.{i}.wq"), &mut l.wq);
            lin(&mut out, format!("layers.{i}.wk"), &mut l.wk);
            lin(&mut out, format!("layers.{i}.wv"), &mut l.wv);
            lin(&mut out, format!("layers.{i}.wo"), &mut l.wo);
            out.push((format!("layers.{i}.cross_norm"), &mut l.cross_norm));
            lin(&mut out, format!("layers.{i}.cq"), &mut l.cq);
            lin(&mut out, format!("layers.{i}.ck"), &mut l.ck);
            lin(&mut out, format!("layers.{i}.cv"), &mut l.cv);
            lin(&mut out, format!("layers.{i}.co"), &mut l.co);
            out.push((format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            lin(&mut out, format!("layers.{i}.mlp_in"), &mut l.mlp_in);
            lin(&mut out, format!("layers.{i}.mlp_out"), &mut l.mlp_out);
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        lin(&mut out, "head".into(), &mut self.head);
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs, checking every name
    /// and shape against the layout `cfg` implies.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let mut slots = p.named_tensors_mut();
        if slots.len() != named.len() {
            return Err(Error::Input(format!(
                "expected {} parameter arrays, found {}",
                slots.len(),
                named.len()
            )));
        }
        for ((name, slot), (got_name, t)) in slots.iter_mut().zip(named) {
            if *name != got_name {
                return Err(Error::Input(format!("expected parameter {name}, found {got_name}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::dim("load parameter", slot.shape(), t.shape()));
            }
            **slot = t;
        }
        drop(slots);
        Ok(p)
    }
}
