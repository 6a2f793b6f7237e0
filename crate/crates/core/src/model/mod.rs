//! The scale-conditioned transformer: residual-index embedding, stacked
//! blocks of plan-masked self-attention, cross-attention over instruction
//! tokens, and an MLP, with a codebook-logit head. Forward, manual
//! backward, and a finite-difference gradient check.

mod backward;
mod engine;
mod forward;
mod gradcheck;
mod seq;

pub use backward::backward;
pub use engine::Engine;
pub use forward::{
    capture_heatmaps, flatten_targets, forward, forward_cached, loss_and_probs, loss_of_logits,
    ForwardCache,
};
pub use gradcheck::{grad_check, random_item};
pub use seq::{source_features, BlockContent, BuiltBlock, BuiltSequence, SarRefBlock};

use crate::codec::ResidualStack;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{ScaleSchedule, Strategy};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub text_width: usize,
    pub text_vocab: usize,
    pub strategy: Strategy,
    pub schedule: ScaleSchedule,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be a multiple of 4 for 2D rotary coordinates",
                self.head_dim()
            )));
        }
        if self.layers < 2 {
            return Err(Error::Config(
                "need at least 2 layers (the reference mechanism distinguishes layer 1)".into(),
            ));
        }
        if self.codebook_size < 2 || self.codebook_dim == 0 {
            return Err(Error::Config("codebook must have >= 2 entries".into()));
        }
        if self.text_width == 0 || self.text_vocab == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub lnc: Array1<f64>,
    pub cq: Array2<f64>,
    pub ck: Array2<f64>,
    pub cv: Array2<f64>,
    pub co: Array2<f64>,
    pub ln2: Array1<f64>,
    pub fc1: Array2<f64>,
    pub b1: Array1<f64>,
    pub fc2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All learnable tensors. Projections are stored `[in, out]`, applied as
/// `y = x . w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub in_proj: Array2<f64>,
    pub in_bias: Array1<f64>,
    pub start_proj: Array2<f64>,
    pub start_bias: Array1<f64>,
    pub text_embed: Array2<f64>,
    pub null_text: Array1<f64>,
    pub scale_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ModelParams {
    /// Tensors in a fixed order: (name, flat data, weight-decay flag).
    /// Matrices decay, vectors and embedding tables do not.
    pub fn tensors(&self) -> Vec<(String, &[f64], bool)> {
        let mut out: Vec<(String, &[f64], bool)> = Vec::new();
        out.push(("in_proj".into(), self.in_proj.as_slice().unwrap(), true));
        out.push(("in_bias".into(), self.in_bias.as_slice().unwrap(), false));
        out.push(("start_proj".into(), self.start_proj.as_slice().unwrap(), true));
        out.push(("start_bias".into(), self.start_bias.as_slice().unwrap(), false));
        out.push(("text_embed".into(), self.text_embed.as_slice().unwrap(), false));
        out.push(("null_text".into(), self.null_text.as_slice().unwrap(), false));
        out.push(("scale_embed".into(), self.scale_embed.as_slice().unwrap(), false));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.ln1"), layer.ln1.as_slice().unwrap(), false));
            out.push((format!("l{i}.wq"), layer.wq.as_slice().unwrap(), true));
            out.push((format!("l{i}.wk"), layer.wk.as_slice().unwrap(), true));
            out.push((format!("l{i}.wv"), layer.wv.as_slice().unwrap(), true));
            out.push((format!("l{i}.wo"), layer.wo.as_slice().unwrap(), true));
            out.push((format!("l{i}.lnc"), layer.lnc.as_slice().unwrap(), false));
            out.push((format!("l{i}.cq"), layer.cq.as_slice().unwrap(), true));
            out.push((format!("l{i}.ck"), layer.ck.as_slice().unwrap(), true));
            out.push((format!("l{i}.cv"), layer.cv.as_slice().unwrap(), true));
            out.push((format!("l{i}.co"), layer.co.as_slice().unwrap(), true));
            out.push((format!("l{i}.ln2"), layer.ln2.as_slice().unwrap(), false));
            out.push((format!("l{i}.fc1"), layer.fc1.as_slice().unwrap(), true));
            out.push((format!("l{i}.b1"), layer.b1.as_slice().unwrap(), false));
            out.push((format!("l{i}.fc2"), layer.fc2.as_slice().unwrap(), true));
            out.push((format!("l{i}.b2"), layer.b2.as_slice().unwrap(), false));
        }
        out.push(("ln_f".into(), self.ln_f.as_slice().unwrap(), false));
        out.push(("head_w".into(), self.head_w.as_slice().unwrap(), true));
        out.push(("head_b".into(), self.head_b.as_slice().unwrap(), false));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64], bool)> {
        let mut out: Vec<(String, &mut [f64], bool)> = Vec::new();
        out.push(("in_proj".into(), self.in_proj.as_slice_mut().unwrap(), true));
        out.push(("in_bias".into(), self.in_bias.as_slice_mut().unwrap(), false));
        out.push(("start_proj".into(), self.start_proj.as_slice_mut().unwrap(), true));
        out.push(("start_bias".into(), self.start_bias.as_slice_mut().unwrap(), false));
        out.push(("text_embed".into(), self.text_embed.as_slice_mut().unwrap(), false));
        out.push(("null_text".into(), self.null_text.as_slice_mut().unwrap(), false));
        out.push(("scale_embed".into(), self.scale_embed.as_slice_mut().unwrap(), false));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("l{i}.ln1"), layer.ln1.as_slice_mut().unwrap(), false));
            out.push((format!("l{i}.wq"), layer.wq.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.wk"), layer.wk.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.wv"), layer.wv.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.wo"), layer.wo.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.lnc"), layer.lnc.as_slice_mut().unwrap(), false));
            out.push((format!("l{i}.cq"), layer.cq.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.ck"), layer.ck.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.cv"), layer.cv.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.co"), layer.co.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.ln2"), layer.ln2.as_slice_mut().unwrap(), false));
            out.push((format!("l{i}.fc1"), layer.fc1.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.b1"), layer.b1.as_slice_mut().unwrap(), false));
            out.push((format!("l{i}.fc2"), layer.fc2.as_slice_mut().unwrap(), true));
            out.push((format!("l{i}.b2"), layer.b2.as_slice_mut().unwrap(), false));
        }
        out.push(("ln_f".into(), self.ln_f.as_slice_mut().unwrap(), false));
        out.push(("head_w".into(), self.head_w.as_slice_mut().unwrap(), true));
        out.push(("head_b".into(), self.head_b.as_slice_mut().unwrap(), false));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, d, _)| d.len()).sum()
    }

    /// Elementwise `self += other * scale`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let theirs = other.tensors();
        for ((_, mine, _), (_, other, _)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(other.iter()) {
                *a += b * scale;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, d, _)| d.iter().all(|x| x.is_finite()))
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut stream = rng::stream(config.seed, "model-init");
        let mut gauss = move || {
            let u1: f64 = stream.gen_range(f64::EPSILON..1.0);
            let u2: f64 = stream.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let std = 0.02;
        // Residual-branch outputs get the usual depth-scaled init.
        let out_std = std / (2.0 * config.layers as f64).sqrt();
        let w = config.width;
        let tw = config.text_width;
        let hidden = config.mlp_hidden();
        let mut mat = |r: usize, c: usize, s: f64| Array2::from_shape_fn((r, c), |_| gauss() * s);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1: Array1::ones(w),
                wq: mat(w, w, std),
                wk: mat(w, w, std),
                wv: mat(w, w, std),
                wo: mat(w, w, out_std),
                lnc: Array1::ones(w),
                cq: mat(w, w, std),
                ck: mat(tw, w, std),
                cv: mat(tw, w, std),
                co: mat(w, w, out_std),
                ln2: Array1::ones(w),
                fc1: mat(w, hidden, std),
                b1: Array1::zeros(hidden),
                fc2: mat(hidden, w, out_std),
                b2: Array1::zeros(w),
            })
            .collect();
        let params = ModelParams {
            in_proj: mat(config.codebook_dim, w, std),
            in_bias: Array1::zeros(w),
            start_proj: mat(tw, w, std),
            start_bias: Array1::zeros(w),
            text_embed: mat(config.text_vocab, tw, std),
            null_text: mat(1, tw, std).row(0).to_owned(),
            scale_embed: mat(config.schedule.num_scales(), w, std),
            layers,
            ln_f: Array1::ones(w),
            head_w: mat(w, config.codebook_size, std),
            head_b: Array1::zeros(config.codebook_size),
        };
        Ok(Model { config, params })
    }

    pub fn zeros_like(&self) -> ModelParams {
        let w = self.config.width;
        let tw = self.config.text_width;
        let hidden = self.config.mlp_hidden();
        ModelParams {
            in_proj: Array2::zeros((self.config.codebook_dim, w)),
            in_bias: Array1::zeros(w),
            start_proj: Array2::zeros((tw, w)),
            start_bias: Array1::zeros(w),
            text_embed: Array2::zeros((self.config.text_vocab, tw)),
            null_text: Array1::zeros(tw),
            scale_embed: Array2::zeros((self.config.schedule.num_scales(), w)),
            layers: (0..self.config.layers)
                .map(|_| LayerParams {
                    ln1: Array1::zeros(w),
                    wq: Array2::zeros((w, w)),
                    wk: Array2::zeros((w, w)),
                    wv: Array2::zeros((w, w)),
                    wo: Array2::zeros((w, w)),
                    lnc: Array1::zeros(w),
                    cq: Array2::zeros((w, w)),
                    ck: Array2::zeros((tw, w)),
                    cv: Array2::zeros((tw, w)),
                    co: Array2::zeros((w, w)),
                    ln2: Array1::zeros(w),
                    fc1: Array2::zeros((w, hidden)),
                    b1: Array1::zeros(hidden),
                    fc2: Array2::zeros((hidden, w)),
                    b2: Array1::zeros(w),
                })
                .collect(),
            ln_f: Array1::zeros(w),
            head_w: Array2::zeros((w, self.config.codebook_size)),
            head_b: Array1::zeros(self.config.codebook_size),
        }
    }
}

/// One teacher-forced training example: quantized source and target plus
/// the raw instruction (empty or dropped text becomes the null token).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub src_stack: ResidualStack,
    pub tgt_stack: ResidualStack,
    pub instruction: String,
    pub drop_text: bool,
}
