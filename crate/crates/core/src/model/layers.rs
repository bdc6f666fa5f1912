//! Dense building blocks with hand-written backward passes.
//!
//! Every forward function returns its output plus whatever the matching
//! backward needs. Backward functions accumulate parameter gradients in place
//! and return the gradient with respect to their input.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh).map(|(g, x)| g * x).sum::<f64>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = r * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(gelu);
        let y = act.dot(&self.w2) + &self.b2;
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        grad.w2 += &cache.act.t().dot(dy);
        grad.b2 += &dy.sum_axis(Axis(0));
        let mut dpre = dy.dot(&self.w2.t());
        Zip::from(&mut dpre).and(&cache.pre).for_each(|g, &p| *g *= gelu_grad(p));
        grad.w1 += &cache.x.t().dot(&dpre);
        grad.b1 += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.w1.t())
    }
}

/// Projection weights of one multi-head attention block. No biases: a zero
/// key/value row contributes exactly nothing to the attended values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl Attention {
    pub fn zeros_like(&self) -> Self {
        Self {
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
        }
    }
}

/// Row-wise softmax probabilities for each head.
pub struct AttendCache {
    probs: Vec<Array2<f64>>,
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`.
pub fn attend(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, heads: usize, causal: bool) -> (Array2<f64>, AttendCache) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, x) in row.iter_mut().enumerate() {
                if causal && j > i {
                    *x = f64::NEG_INFINITY;
                } else {
                    *x *= scale;
                    max = max.max(*x);
                }
            }
            let mut total = 0.0;
            row.mapv_inplace(|x| {
                let e = (x - max).exp();
                total += e;
                e
            });
            row.mapv_inplace(|e| e / total);
        }
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, AttendCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attend_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    cache: &AttendCache,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = cache.probs.len();
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let mut ds = dout_h.dot(&v.slice(cols).t());
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            Zip::from(&mut drow).and(&prow).for_each(|g, &pp| *g = pp * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Softmax cross-entropy summed over rows; `dlogits` receives the gradient of
/// that sum.
pub fn cross_entropy_sum(logits: &Array2<f64>, targets: &[u32]) -> (f64, Array2<f64>) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &t) in grad.rows_mut().into_iter().zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            total += e;
            e
        });
        row.mapv_inplace(|e| e / total);
        loss -= row[t as usize].ln();
        row[t as usize] -= 1.0;
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_grad() {
        let ln = LayerNorm {
            gamma: array![1.0, 2.0, 0.5],
            beta: array![0.1, 0.0, -0.3],
        };
        let x = array![[0.3, -1.2, 2.0], [1.0, 1.5, -0.5]];
        let w = array![[0.7, -0.2, 1.1], [0.4, 0.9, -1.3]];
        let f = |x: &Array2<f64>| (ln.forward(x).0 * &w).sum();
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g);
        close(&dx, &numeric(f, &x));
    }

    #[test]
    fn attention_input_grads() {
        let q = array![[0.2, -0.4, 0.9, 0.1], [1.0, 0.3, -0.2, 0.5], [-0.6, 0.8, 0.4, -0.1]];
        let k = array![[0.5, 0.1, -0.3, 0.7], [-0.2, 0.9, 0.6, 0.0], [0.3, -0.5, 0.2, 0.4]];
        let v = array![[1.0, -1.0, 0.5, 0.2], [0.3, 0.7, -0.4, 0.9], [-0.8, 0.1, 0.6, -0.5]];
        let w = array![[0.3, -0.7, 0.2, 1.0], [0.5, 0.4, -0.9, 0.1], [-0.2, 0.6, 0.8, -0.4]];
        for causal in [false, true] {
            let (_, cache) = attend(q.view(), k.view(), v.view(), 2, causal);
            let (dq, dk, dv) = attend_backward(q.view(), k.view(), v.view(), &cache, w.view());
            close(&dq, &numeric(|x| (attend(x.view(), k.view(), v.view(), 2, causal).0 * &w).sum(), &q));
            close(&dk, &numeric(|x| (attend(q.view(), x.view(), v.view(), 2, causal).0 * &w).sum(), &k));
            close(&dv, &numeric(|x| (attend(q.view(), k.view(), x.view(), 2, causal).0 * &w).sum(), &v));
        }
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let n = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((n - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_value_rows_contribute_nothing() {
        let q = array![[0.2, -0.4], [1.0, 0.3]];
        let k = Array2::zeros((3, 2));
        let v = Array2::zeros((3, 2));
        let (out, _) = attend(q.view(), k.view(), v.view(), 1, false);
        assert!(out.iter().all(|&x| x == 0.0));
    }
}
