//! Encoder-decoder label generator.
//!
//! Title and abstract are embedded with separate sinusoidal position tables
//! and concatenated before the encoder. Each taxonomy level is decoded as its
//! own episode `BOS l1 SEP l2 ... EOS`; labels accepted at the previous level
//! are embedded, projected by a small adapter, scaled by a zero-initialized
//! gate and appended to the encoder memory as extra cross-attention rows.
//! The output projection is tied to the shared token embedding.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
mod transformer;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{TokenId, BOS};
pub use params::{ModelConfig, Weights};
use params::{sinusoid_table, ABSTRACT_PHASE, TARGET_PHASE, TITLE_PHASE};
use transformer::{CrossKv, CrossKvGrad};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{segment} has {len} tokens, limit is {max}")]
    SequenceTooLong { segment: &'static str, len: usize, max: usize },
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("token id {0} outside the model vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("decoder prefix must start with BOS")]
    MissingBos,
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title_tokens: Vec<TokenId>,
    pub abstract_tokens: Vec<TokenId>,
}

impl Document {
    pub fn new(title_tokens: Vec<TokenId>, abstract_tokens: Vec<TokenId>) -> Self {
        Self {
            title_tokens,
            abstract_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.title_tokens.len() + self.abstract_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder output plus any fused label rows appended after it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMemory {
    pub states: Array2<f64>,
    /// Number of leading rows that come from the document.
    pub text_rows: usize,
    pub source_mask: Vec<bool>,
}

impl EncodedMemory {
    pub fn text(&self) -> ArrayView2<'_, f64> {
        self.states.slice(s![..self.text_rows, ..])
    }

    pub fn fused(&self) -> ArrayView2<'_, f64> {
        self.states.slice(s![self.text_rows.., ..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
    pub pe_title: Array2<f64>,
    pub pe_abstract: Array2<f64>,
    pub pe_target: Array2<f64>,
}

impl ModelParams {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        validate_config(&config)?;
        let weights = Weights::init(&config, rng);
        Ok(Self::with_weights(config, weights))
    }

    pub(crate) fn with_weights(config: ModelConfig, weights: Weights) -> Self {
        let d = config.d_model;
        Self {
            config,
            weights,
            pe_title: sinusoid_table(config.max_title, d, TITLE_PHASE),
            pe_abstract: sinusoid_table(config.max_abstract, d, ABSTRACT_PHASE),
            pe_target: sinusoid_table(config.max_target, d, TARGET_PHASE),
        }
    }

    /// Output projection, `vocab_size x d`; a view of the shared embedding.
    pub fn output_projection(&self) -> ArrayView2<'_, f64> {
        self.weights.embedding.view()
    }

    fn embed_scale(&self) -> f64 {
        (self.config.d_model as f64).sqrt()
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ModelError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }
}

fn validate_config(c: &ModelConfig) -> Result<(), ModelError> {
    let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
    if c.d_model == 0 || c.heads == 0 || !c.d_model.is_multiple_of(c.heads) {
        return bad("d_model must be a positive multiple of heads");
    }
    if c.vocab_size == 0 {
        return bad("empty vocabulary");
    }
    if c.d_ff == 0 || c.max_target < 2 {
        return bad("d_ff and max_target must be positive");
    }
    Ok(())
}

/// `emb(title) + PE_title` followed by `emb(abstract) + PE_abstract`.
pub fn embed_and_position(p: &ModelParams, doc: &Document) -> Result<Array2<f64>, ModelError> {
    let c = &p.config;
    if doc.title_tokens.len() > c.max_title {
        return Err(ModelError::SequenceTooLong {
            segment: "title",
            len: doc.title_tokens.len(),
            max: c.max_title,
        });
    }
    if doc.abstract_tokens.len() > c.max_abstract {
        return Err(ModelError::SequenceTooLong {
            segment: "abstract",
            len: doc.abstract_tokens.len(),
            max: c.max_abstract,
        });
    }
    p.check_tokens(&doc.title_tokens)?;
    p.check_tokens(&doc.abstract_tokens)?;
    let scale = p.embed_scale();
    let mut out = Array2::zeros((doc.len(), c.d_model));
    let rows = doc
        .title_tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, p.pe_title.row(i)))
        .chain(doc.abstract_tokens.iter().enumerate().map(|(j, &t)| (t, p.pe_abstract.row(j))));
    for (mut row, (t, pe)) in out.rows_mut().into_iter().zip(rows) {
        row.assign(&(&p.weights.embedding.row(t as usize) * scale + pe));
    }
    Ok(out)
}

pub fn encode(p: &ModelParams, input: &Array2<f64>) -> Result<EncodedMemory, ModelError> {
    if input.nrows() == 0 {
        return Err(ModelError::EmptyDocument);
    }
    let (states, _) = transformer::encoder_forward(&p.weights, p.config.heads, input);
    if !states.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFiniteActivation("encoder"));
    }
    Ok(EncodedMemory {
        text_rows: states.nrows(),
        source_mask: vec![true; states.nrows()],
        states,
    })
}

/// Embeds and encodes a document in one call.
pub fn encode_document(p: &ModelParams, doc: &Document) -> Result<EncodedMemory, ModelError> {
    if doc.is_empty() {
        return Err(ModelError::EmptyDocument);
    }
    encode(p, &embed_and_position(p, doc)?)
}

/// Mean token embedding of each label (rows of the shared embedding).
fn label_means(w: &Weights, labels: &[&[TokenId]]) -> Array2<f64> {
    let d = w.embedding.ncols();
    let mut out = Array2::zeros((labels.len(), d));
    for (mut row, ids) in out.rows_mut().into_iter().zip(labels) {
        for &t in *ids {
            row += &w.embedding.row(t as usize);
        }
        row /= ids.len() as f64;
    }
    out
}

fn nonempty(prev_labels: &[Vec<TokenId>], vocab: usize) -> Vec<&[TokenId]> {
    prev_labels
        .iter()
        .filter(|l| !l.is_empty() && l.iter().all(|&t| (t as usize) < vocab))
        .map(Vec::as_slice)
        .collect()
}

/// Appends one gated adapter row per previous-level label to the memory.
/// Text rows are never modified.
pub fn fuse_context(p: &ModelParams, m: &EncodedMemory, prev_labels: &[Vec<TokenId>]) -> EncodedMemory {
    let labels = nonempty(prev_labels, p.config.vocab_size);
    if labels.is_empty() {
        return m.clone();
    }
    let rows = label_means(&p.weights, &labels).dot(&p.weights.adapter) * p.weights.gate;
    let states = ndarray::concatenate(Axis(0), &[m.states.view(), rows.view()]).expect("same width");
    let mut source_mask = m.source_mask.clone();
    source_mask.extend(std::iter::repeat_n(true, rows.nrows()));
    EncodedMemory {
        states,
        text_rows: m.text_rows,
        source_mask,
    }
}

fn embed_target(p: &ModelParams, prefix: &[TokenId]) -> Result<Array2<f64>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if prefix.len() > p.config.max_target {
        return Err(ModelError::SequenceTooLong {
            segment: "target",
            len: prefix.len(),
            max: p.config.max_target,
        });
    }
    p.check_tokens(prefix)?;
    let scale = p.embed_scale();
    let mut x = Array2::zeros((prefix.len(), p.config.d_model));
    for (i, (mut row, &t)) in x.rows_mut().into_iter().zip(prefix).enumerate() {
        row.assign(&(&p.weights.embedding.row(t as usize) * scale + p.pe_target.row(i)));
    }
    Ok(x)
}

/// Decoder bound to one memory; cross-attention keys and values are computed
/// once and reused for every step.
pub struct StepDecoder<'a> {
    params: &'a ModelParams,
    kv: Vec<CrossKv>,
}

impl<'a> StepDecoder<'a> {
    pub fn new(params: &'a ModelParams, memory: &EncodedMemory) -> Self {
        Self {
            params,
            kv: transformer::cross_kv(&params.weights, memory.text(), memory.fused()),
        }
    }

    /// Final normalized decoder states for every prefix position.
    pub fn hidden(&self, prefix: &[TokenId]) -> Result<Array2<f64>, ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(if prefix.is_empty() { ModelError::EmptyPrefix } else { ModelError::MissingBos });
        }
        let x = embed_target(self.params, prefix)?;
        let cache = transformer::decoder_forward(&self.params.weights, self.params.config.heads, &x, &self.kv);
        Ok(cache.hidden)
    }

    /// Next-token logits after `prefix`.
    pub fn step(&self, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let hidden = self.hidden(prefix)?;
        let last = hidden.slice(s![hidden.nrows() - 1.., ..]).to_owned();
        let logits = transformer::last_row(&transformer::project(&self.params.weights, &last));
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFiniteActivation("decoder"));
        }
        Ok(logits)
    }
}

pub fn decode_step(p: &ModelParams, m: &EncodedMemory, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    StepDecoder::new(p, m).step(prefix)
}

/// One level's teacher-forced decoding episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Token sequences of the labels fused into memory for this episode.
    pub context: Vec<Vec<TokenId>>,
    /// `BOS ... EOS`. A lone `BOS` scores no positions.
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub doc: Document,
    pub episodes: Vec<Episode>,
}

/// Summed loss and scored-position count of one example; accumulates the
/// gradient of the summed loss when `grad` is given.
fn example_pass(p: &ModelParams, ex: &TrainingExample, mut grad: Option<&mut Weights>) -> Result<(f64, usize), ModelError> {
    let w = &p.weights;
    let heads = p.config.heads;
    if ex.doc.is_empty() {
        return Err(ModelError::EmptyDocument);
    }
    let input = embed_and_position(p, &ex.doc)?;
    let (memory, enc_cache) = transformer::encoder_forward(w, heads, &input);
    if !memory.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFiniteActivation("encoder"));
    }
    let text_kv = transformer::cross_kv(w, memory.view(), Array2::zeros((0, p.config.d_model)).view());
    let mut dtext: Vec<(Array2<f64>, Array2<f64>)> = text_kv
        .iter()
        .map(|kv| (Array2::zeros(kv.k_text.raw_dim()), Array2::zeros(kv.v_text.raw_dim())))
        .collect();

    let mut loss = 0.0;
    let mut count = 0;
    for ep in &ex.episodes {
        if ep.target.len() < 2 {
            continue;
        }
        if ep.target[0] != BOS {
            return Err(ModelError::MissingBos);
        }
        let inputs = &ep.target[..ep.target.len() - 1];
        let labels = &ep.target[1..];
        p.check_tokens(labels)?;
        let ctx = nonempty(&ep.context, p.config.vocab_size);
        let means = label_means(w, &ctx);
        let adapted = means.dot(&w.adapter);
        let fused = &adapted * w.gate;
        let kv: Vec<CrossKv> = text_kv
            .iter()
            .zip(&w.decoder)
            .map(|(t, l)| CrossKv {
                k_text: t.k_text.clone(),
                v_text: t.v_text.clone(),
                k_fused: fused.dot(&l.cross_attn.wk),
                v_fused: fused.dot(&l.cross_attn.wv),
            })
            .collect();
        let x = embed_target(p, inputs)?;
        let cache = transformer::decoder_forward(w, heads, &x, &kv);
        count += labels.len();

        let Some(g) = grad.as_deref_mut() else {
            let logits = transformer::project(w, &cache.hidden);
            loss += layers::cross_entropy_sum(&logits, labels).0;
            continue;
        };
        let (l, dhidden) = transformer::output_loss(w, &cache.hidden, labels, g);
        loss += l;
        let mut dkv: Vec<CrossKvGrad> = kv
            .iter()
            .map(|kv| CrossKvGrad {
                k_text: Array2::zeros(kv.k_text.raw_dim()),
                v_text: Array2::zeros(kv.v_text.raw_dim()),
                k_fused: Array2::zeros(kv.k_fused.raw_dim()),
                v_fused: Array2::zeros(kv.v_fused.raw_dim()),
            })
            .collect();
        let dx = transformer::decoder_backward(w, &kv, &cache, &dhidden, g, &mut dkv);
        let scale = p.embed_scale();
        for (row, &t) in dx.rows().into_iter().zip(inputs) {
            let mut e = g.embedding.row_mut(t as usize);
            e.scaled_add(scale, &row);
        }
        for ((dk, dv), d) in dtext.iter_mut().zip(&dkv) {
            *dk += &d.k_text;
            *dv += &d.v_text;
        }
        if !ctx.is_empty() {
            let dks: Vec<&Array2<f64>> = dkv.iter().map(|d| &d.k_fused).collect();
            let dvs: Vec<&Array2<f64>> = dkv.iter().map(|d| &d.v_fused).collect();
            let dfused = transformer::cross_kv_backward(w, fused.view(), &dks, &dvs, g);
            g.gate += (&dfused * &adapted).sum();
            let dadapted = dfused * w.gate;
            g.adapter += &means.t().dot(&dadapted);
            let dmeans = dadapted.dot(&w.adapter.t());
            for (row, ids) in dmeans.rows().into_iter().zip(&ctx) {
                let share = 1.0 / ids.len() as f64;
                for &t in *ids {
                    g.embedding.row_mut(t as usize).scaled_add(share, &row);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteActivation("loss"));
    }

    if let Some(g) = grad {
        if count > 0 {
            let dks: Vec<&Array2<f64>> = dtext.iter().map(|d| &d.0).collect();
            let dvs: Vec<&Array2<f64>> = dtext.iter().map(|d| &d.1).collect();
            let dmemory = transformer::cross_kv_backward(w, memory.view(), &dks, &dvs, g);
            let dinput = transformer::encoder_backward(w, &enc_cache, &dmemory, g);
            let scale = p.embed_scale();
            let tokens = ex.doc.title_tokens.iter().chain(&ex.doc.abstract_tokens);
            for (row, &t) in dinput.rows().into_iter().zip(tokens) {
                g.embedding.row_mut(t as usize).scaled_add(scale, &row);
            }
        }
    }
    Ok((loss, count))
}

/// Mean token cross-entropy over every scored position of the batch.
pub fn training_loss(p: &ModelParams, batch: &[TrainingExample]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    let mut count = 0;
    for ex in batch {
        let (l, c) = example_pass(p, ex, None)?;
        total += l;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Loss and its analytic gradient with respect to every trainable tensor.
pub fn gradient(p: &ModelParams, batch: &[TrainingExample]) -> Result<(f64, Weights), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut g = p.weights.zeros_like();
    let mut total = 0.0;
    let mut count = 0;
    for ex in batch {
        let (l, c) = example_pass(p, ex, Some(&mut g))?;
        total += l;
        count += c;
    }
    if count == 0 {
        return Ok((0.0, g));
    }
    g.scale(1.0 / count as f64);
    Ok((total / count as f64, g))
}

/// Unit-normalized mean of the shared embedding rows of `ids`.
pub fn mean_embedding(p: &ModelParams, ids: &[TokenId]) -> Option<Array1<f64>> {
    if ids.is_empty() {
        return None;
    }
    let mut v = Array1::zeros(p.config.d_model);
    for &t in ids {
        v += &p.weights.embedding.row(t as usize);
    }
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v / norm)
}

#[cfg(test)]
mod tests;
