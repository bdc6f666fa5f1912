//! Pre-norm encoder/decoder stacks with cached forward passes and backward.

use ndarray::{s, Array2, ArrayView2};

use super::layers::{attend, attend_backward, cross_entropy_sum, AttendCache, Attention, FeedForwardCache, LayerNormCache};
use super::params::{DecoderLayer, EncoderLayer, Weights};
use crate::codec::TokenId;

pub(crate) struct SelfAttnCache {
    ln: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: AttendCache,
    o: Array2<f64>,
}

fn self_attn_forward(
    norm: &super::layers::LayerNorm,
    attn: &Attention,
    h: &mut Array2<f64>,
    heads: usize,
    causal: bool,
) -> SelfAttnCache {
    let (a, ln) = norm.forward(h);
    let q = a.dot(&attn.wq);
    let k = a.dot(&attn.wk);
    let v = a.dot(&attn.wv);
    let (o, att) = attend(q.view(), k.view(), v.view(), heads, causal);
    *h += &o.dot(&attn.wo);
    SelfAttnCache { ln, a, q, k, v, att, o }
}

fn self_attn_backward(
    norm: &super::layers::LayerNorm,
    attn: &Attention,
    cache: &SelfAttnCache,
    dh: &mut Array2<f64>,
    g_norm: &mut super::layers::LayerNorm,
    g_attn: &mut Attention,
) {
    g_attn.wo += &cache.o.t().dot(&*dh);
    let d_o = dh.dot(&attn.wo.t());
    let (dq, dk, dv) = attend_backward(cache.q.view(), cache.k.view(), cache.v.view(), &cache.att, d_o.view());
    g_attn.wq += &cache.a.t().dot(&dq);
    g_attn.wk += &cache.a.t().dot(&dk);
    g_attn.wv += &cache.a.t().dot(&dv);
    let da = dq.dot(&attn.wq.t()) + dk.dot(&attn.wk.t()) + dv.dot(&attn.wv.t());
    *dh += &norm.backward(&cache.ln, &da, g_norm);
}

pub(crate) struct FfnBlockCache {
    ln: LayerNormCache,
    ffn: FeedForwardCache,
}

fn ffn_forward(norm: &super::layers::LayerNorm, ffn: &super::layers::FeedForward, h: &mut Array2<f64>) -> FfnBlockCache {
    let (a, ln) = norm.forward(h);
    let (y, ffn_cache) = ffn.forward(&a);
    *h += &y;
    FfnBlockCache { ln, ffn: ffn_cache }
}

fn ffn_backward(
    norm: &super::layers::LayerNorm,
    ffn: &super::layers::FeedForward,
    cache: &FfnBlockCache,
    dh: &mut Array2<f64>,
    g_norm: &mut super::layers::LayerNorm,
    g_ffn: &mut super::layers::FeedForward,
) {
    let da = ffn.backward(&cache.ffn, dh, g_ffn);
    *dh += &norm.backward(&cache.ln, &da, g_norm);
}

pub(crate) struct EncoderCache {
    layers: Vec<(SelfAttnCache, FfnBlockCache)>,
    final_ln: Option<LayerNormCache>,
}

/// Runs the encoder stack. The final norm belongs to the stack, so an empty
/// stack is the identity.
pub(crate) fn encoder_forward(w: &Weights, heads: usize, input: &Array2<f64>) -> (Array2<f64>, EncoderCache) {
    let mut h = input.clone();
    let mut layers = Vec::with_capacity(w.encoder.len());
    for l in &w.encoder {
        let sa = self_attn_forward(&l.norm1, &l.self_attn, &mut h, heads, false);
        let ff = ffn_forward(&l.norm2, &l.ffn, &mut h);
        layers.push((sa, ff));
    }
    if w.encoder.is_empty() {
        return (h, EncoderCache { layers, final_ln: None });
    }
    let (out, ln) = w.encoder_norm.forward(&h);
    (out, EncoderCache { layers, final_ln: Some(ln) })
}

/// Returns the gradient with respect to the encoder input.
pub(crate) fn encoder_backward(w: &Weights, cache: &EncoderCache, dout: &Array2<f64>, g: &mut Weights) -> Array2<f64> {
    let mut dh = match &cache.final_ln {
        Some(ln) => w.encoder_norm.backward(ln, dout, &mut g.encoder_norm),
        None => dout.clone(),
    };
    for ((l, gl), (sa, ff)) in w.encoder.iter().zip(g.encoder.iter_mut()).zip(&cache.layers).rev() {
        let EncoderLayer { norm1, self_attn, norm2, ffn } = l;
        ffn_backward(norm2, ffn, ff, &mut dh, &mut gl.norm2, &mut gl.ffn);
        self_attn_backward(norm1, self_attn, sa, &mut dh, &mut gl.norm1, &mut gl.self_attn);
    }
    dh
}

/// Cross-attention keys and values for one decoder layer. Text memory rows
/// and fused label rows are attended with separate softmaxes whose outputs
/// are summed.
pub(crate) struct CrossKv {
    pub k_text: Array2<f64>,
    pub v_text: Array2<f64>,
    pub k_fused: Array2<f64>,
    pub v_fused: Array2<f64>,
}

pub(crate) fn cross_kv(w: &Weights, text: ArrayView2<f64>, fused: ArrayView2<f64>) -> Vec<CrossKv> {
    w.decoder
        .iter()
        .map(|l| CrossKv {
            k_text: text.dot(&l.cross_attn.wk),
            v_text: text.dot(&l.cross_attn.wv),
            k_fused: fused.dot(&l.cross_attn.wk),
            v_fused: fused.dot(&l.cross_attn.wv),
        })
        .collect()
}

pub(crate) struct CrossCache {
    ln: LayerNormCache,
    b: Array2<f64>,
    q: Array2<f64>,
    att_text: AttendCache,
    att_fused: Option<AttendCache>,
    o: Array2<f64>,
}

pub(crate) struct DecoderCache {
    layers: Vec<(SelfAttnCache, CrossCache, FfnBlockCache)>,
    final_ln: LayerNormCache,
    pub hidden: Array2<f64>,
}

/// Decoder stack over an already embedded target prefix. Returns the final
/// normalized hidden states (one row per position).
pub(crate) fn decoder_forward(w: &Weights, heads: usize, x: &Array2<f64>, kv: &[CrossKv]) -> DecoderCache {
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(w.decoder.len());
    for (l, kv) in w.decoder.iter().zip(kv) {
        let sa = self_attn_forward(&l.norm1, &l.self_attn, &mut h, heads, true);

        let (b, ln) = l.norm2.forward(&h);
        let q = b.dot(&l.cross_attn.wq);
        let (mut o, att_text) = attend(q.view(), kv.k_text.view(), kv.v_text.view(), heads, false);
        let att_fused = if kv.k_fused.nrows() > 0 {
            let (of, c) = attend(q.view(), kv.k_fused.view(), kv.v_fused.view(), heads, false);
            o += &of;
            Some(c)
        } else {
            None
        };
        h += &o.dot(&l.cross_attn.wo);
        let cross = CrossCache {
            ln,
            b,
            q,
            att_text,
            att_fused,
            o,
        };

        let ff = ffn_forward(&l.norm3, &l.ffn, &mut h);
        layers.push((sa, cross, ff));
    }
    let (hidden, final_ln) = w.decoder_norm.forward(&h);
    DecoderCache { layers, final_ln, hidden }
}

/// Gradients flowing out of the decoder into the cross-attention keys and
/// values, per layer.
pub(crate) struct CrossKvGrad {
    pub k_text: Array2<f64>,
    pub v_text: Array2<f64>,
    pub k_fused: Array2<f64>,
    pub v_fused: Array2<f64>,
}

/// Backward through the decoder stack. Returns the gradient with respect to
/// the embedded input and accumulates key/value gradients into `dkv`.
pub(crate) fn decoder_backward(
    w: &Weights,
    kv: &[CrossKv],
    cache: &DecoderCache,
    dhidden: &Array2<f64>,
    g: &mut Weights,
    dkv: &mut [CrossKvGrad],
) -> Array2<f64> {
    let mut dh = w.decoder_norm.backward(&cache.final_ln, dhidden, &mut g.decoder_norm);
    let iter = w
        .decoder
        .iter()
        .zip(g.decoder.iter_mut())
        .zip(&cache.layers)
        .zip(kv.iter().zip(dkv.iter_mut()))
        .rev();
    for (((l, gl), (sa, cross, ff)), (kv, dkv)) in iter {
        let DecoderLayer {
            norm1,
            self_attn,
            norm2,
            cross_attn,
            norm3,
            ffn,
        } = l;
        ffn_backward(norm3, ffn, ff, &mut dh, &mut gl.norm3, &mut gl.ffn);

        gl.cross_attn.wo += &cross.o.t().dot(&dh);
        let d_o = dh.dot(&cross_attn.wo.t());
        let (mut dq, dk, dv) = attend_backward(cross.q.view(), kv.k_text.view(), kv.v_text.view(), &cross.att_text, d_o.view());
        dkv.k_text += &dk;
        dkv.v_text += &dv;
        if let Some(att_fused) = &cross.att_fused {
            let (dqf, dkf, dvf) = attend_backward(cross.q.view(), kv.k_fused.view(), kv.v_fused.view(), att_fused, d_o.view());
            dq += &dqf;
            dkv.k_fused += &dkf;
            dkv.v_fused += &dvf;
        }
        gl.cross_attn.wq += &cross.b.t().dot(&dq);
        let db = dq.dot(&cross_attn.wq.t());
        dh += &norm2.backward(&cross.ln, &db, &mut gl.norm2);

        self_attn_backward(norm1, self_attn, sa, &mut dh, &mut gl.norm1, &mut gl.self_attn);
    }
    dh
}

/// Turns key/value gradients into gradients of the rows they were projected
/// from, accumulating the projection weight gradients.
pub(crate) fn cross_kv_backward(
    w: &Weights,
    rows: ArrayView2<f64>,
    dk: &[&Array2<f64>],
    dv: &[&Array2<f64>],
    g: &mut Weights,
) -> Array2<f64> {
    let mut drows = Array2::zeros(rows.raw_dim());
    for (((l, gl), dk), dv) in w.decoder.iter().zip(g.decoder.iter_mut()).zip(dk).zip(dv) {
        if rows.nrows() == 0 {
            continue;
        }
        gl.cross_attn.wk += &rows.t().dot(*dk);
        gl.cross_attn.wv += &rows.t().dot(*dv);
        drows += &dk.dot(&l.cross_attn.wk.t());
        drows += &dv.dot(&l.cross_attn.wv.t());
    }
    drows
}

/// Logits from final hidden states through the tied output projection.
pub(crate) fn project(w: &Weights, hidden: &Array2<f64>) -> Array2<f64> {
    hidden.dot(&w.embedding.t())
}

/// Summed cross-entropy for a teacher-forced sequence plus the gradient with
/// respect to the hidden states. Also accumulates the output-side embedding
/// gradient.
pub(crate) fn output_loss(w: &Weights, hidden: &Array2<f64>, targets: &[TokenId], g: &mut Weights) -> (f64, Array2<f64>) {
    let logits = project(w, hidden);
    let (loss, dlogits) = cross_entropy_sum(&logits, targets);
    g.embedding += &dlogits.t().dot(hidden);
    (loss, dlogits.dot(&w.embedding))
}

pub(crate) fn last_row(x: &Array2<f64>) -> Vec<f64> {
    x.slice(s![x.nrows() - 1, ..]).to_vec()
}
