//! Model configuration, trainable weights and initialization.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Attention, FeedForward, LayerNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_title: usize,
    pub max_abstract: usize,
    pub max_target: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_title: 32,
            max_abstract: 128,
            max_target: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

/// Every trainable tensor. Gradients use the same structure.
///
/// The output projection is `embedding` transposed; there is no separate
/// tensor for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub embedding: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub adapter: Array2<f64>,
    pub gate: f64,
}

macro_rules! visit_weights {
    ($w:expr, $f:expr, $slice:ident, $one:path, $($r:tt)+) => {{
        let w = $w;
        let f = $f;
        fn ln(prefix: &str, n: $($r)+ LayerNorm, f: &mut dyn FnMut(&str, $($r)+ [f64])) {
            f(&format!("{prefix}.gamma"), n.gamma.$slice().expect("standard layout"));
            f(&format!("{prefix}.beta"), n.beta.$slice().expect("standard layout"));
        }
        fn attn(prefix: &str, a: $($r)+ Attention, f: &mut dyn FnMut(&str, $($r)+ [f64])) {
            f(&format!("{prefix}.wq"), a.wq.$slice().expect("standard layout"));
            f(&format!("{prefix}.wk"), a.wk.$slice().expect("standard layout"));
            f(&format!("{prefix}.wv"), a.wv.$slice().expect("standard layout"));
            f(&format!("{prefix}.wo"), a.wo.$slice().expect("standard layout"));
        }
        fn ffn(prefix: &str, a: $($r)+ FeedForward, f: &mut dyn FnMut(&str, $($r)+ [f64])) {
            f(&format!("{prefix}.w1"), a.w1.$slice().expect("standard layout"));
            f(&format!("{prefix}.b1"), a.b1.$slice().expect("standard layout"));
            f(&format!("{prefix}.w2"), a.w2.$slice().expect("standard layout"));
            f(&format!("{prefix}.b2"), a.b2.$slice().expect("standard layout"));
        }
        f("embedding", w.embedding.$slice().expect("standard layout"));
        for (i, l) in ($($r)+ w.encoder).into_iter().enumerate() {
            ln(&format!("encoder.{i}.norm1"), $($r)+ l.norm1, f);
            attn(&format!("encoder.{i}.self_attn"), $($r)+ l.self_attn, f);
            ln(&format!("encoder.{i}.norm2"), $($r)+ l.norm2, f);
            ffn(&format!("encoder.{i}.ffn"), $($r)+ l.ffn, f);
        }
        ln("encoder_norm", $($r)+ w.encoder_norm, f);
        for (i, l) in ($($r)+ w.decoder).into_iter().enumerate() {
            ln(&format!("decoder.{i}.norm1"), $($r)+ l.norm1, f);
            attn(&format!("decoder.{i}.self_attn"), $($r)+ l.self_attn, f);
            ln(&format!("decoder.{i}.norm2"), $($r)+ l.norm2, f);
            attn(&format!("decoder.{i}.cross_attn"), $($r)+ l.cross_attn, f);
            ln(&format!("decoder.{i}.norm3"), $($r)+ l.norm3, f);
            ffn(&format!("decoder.{i}.ffn"), $($r)+ l.ffn, f);
        }
        ln("decoder_norm", $($r)+ w.decoder_norm, f);
        f("adapter", w.adapter.$slice().expect("standard layout"));
        f("gate", $one($($r)+ w.gate));
    }};
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn attention<R: Rng>(rng: &mut R, d: usize, out_std: f64) -> Attention {
    let std = (d as f64).powf(-0.5);
    Attention {
        wq: gaussian(rng, d, d, std),
        wk: gaussian(rng, d, d, std),
        wv: gaussian(rng, d, d, std),
        wo: gaussian(rng, d, d, out_std),
    }
}

fn feed_forward<R: Rng>(rng: &mut R, d: usize, ff: usize, out_std: f64) -> FeedForward {
    FeedForward {
        w1: gaussian(rng, d, ff, (d as f64).powf(-0.5)),
        b1: Array1::zeros(ff),
        w2: gaussian(rng, ff, d, out_std * (d as f64 / ff as f64).sqrt()),
        b2: Array1::zeros(d),
    }
}

impl Weights {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let depth = (cfg.encoder_layers + cfg.decoder_layers).max(1) as f64;
        // residual branches start small so the stack is close to identity
        let out_std = (d as f64).powf(-0.5) / (2.0 * depth).sqrt();
        let embedding = gaussian(rng, cfg.vocab_size, d, (d as f64).powf(-0.5));
        let encoder = (0..cfg.encoder_layers)
            .map(|_| EncoderLayer {
                norm1: LayerNorm::new(d),
                self_attn: attention(rng, d, out_std),
                norm2: LayerNorm::new(d),
                ffn: feed_forward(rng, d, cfg.d_ff, out_std),
            })
            .collect();
        let decoder = (0..cfg.decoder_layers)
            .map(|_| DecoderLayer {
                norm1: LayerNorm::new(d),
                self_attn: attention(rng, d, out_std),
                norm2: LayerNorm::new(d),
                cross_attn: attention(rng, d, out_std),
                norm3: LayerNorm::new(d),
                ffn: feed_forward(rng, d, cfg.d_ff, out_std),
            })
            .collect();
        Self {
            embedding,
            encoder,
            encoder_norm: LayerNorm::new(d),
            decoder,
            decoder_norm: LayerNorm::new(d),
            adapter: gaussian(rng, d, d, (d as f64).powf(-0.5)),
            gate: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, xs| xs.fill(0.0));
        z
    }

    /// Visits every tensor as a flat row-major slice, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        visit_weights!(self, f, as_slice, std::slice::from_ref, &);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_weights!(self, f, as_slice_mut, std::slice::from_mut, &mut);
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, xs| n += xs.len());
        n
    }

    /// Flattened copy of every scalar in visiting order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit(&mut |_, xs| out.extend_from_slice(xs));
        out
    }

    /// Overwrites every scalar from a flat slice in visiting order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat length mismatch");
        let mut offset = 0;
        self.visit_mut(&mut |_, xs| {
            xs.copy_from_slice(&flat[offset..offset + xs.len()]);
            offset += xs.len();
        });
    }

    /// Name of the tensor holding the `index`-th scalar.
    pub fn scalar_name(&self, index: usize) -> Option<String> {
        let mut remaining = index;
        let mut name = None;
        self.visit(&mut |n, xs| {
            if name.is_none() {
                if remaining < xs.len() {
                    name = Some(n.to_string());
                } else {
                    remaining -= xs.len();
                }
            }
        });
        name
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, xs| ok &= xs.iter().all(|x| x.is_finite()));
        ok
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(&mut |_, xs| {
            for (x, y) in xs.iter_mut().zip(&flat[offset..]) {
                *x += scale * y;
            }
            offset += xs.len();
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, xs| xs.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn l2_norm(&self) -> f64 {
        let mut total = 0.0;
        self.visit(&mut |_, xs| total += xs.iter().map(|x| x * x).sum::<f64>());
        total.sqrt()
    }
}

/// Sinusoidal position table with a phase offset on every channel.
pub fn sinusoid_table(len: usize, d: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64) + phase;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub const TITLE_PHASE: f64 = 0.0;
pub const ABSTRACT_PHASE: f64 = std::f64::consts::FRAC_PI_3;
pub const TARGET_PHASE: f64 = std::f64::consts::FRAC_PI_6;
