use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

const LN_EPS: f64 = 1e-5;

/// Affine map `x W + b` over rows; `w` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `d loss / d x`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub(crate) struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub(crate) fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row *= *inv;
        }
        let mut y = &normalized * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &ArrayView2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xhat), inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|g, x| *g = inv * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Sinusoidal position encodings for positions `0..n`.
pub(crate) fn positions(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
