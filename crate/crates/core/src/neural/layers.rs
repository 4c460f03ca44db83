//! Forward/backward kernels shared by the encoder.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &gain + &bias;
    (y, NormCache { xhat, rstd })
}

/// Returns dL/dx; accumulates gain/bias gradients when given.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: ArrayView1<'_, f64>,
    grads: Option<(ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>)>,
) -> Array2<f64> {
    if let Some((mut dgain, mut dbias)) = grads {
        dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
        dbias += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gv, &xv| *o = r * (gv - mean_g - xv * mean_gx));
    }
    dx
}

pub(crate) fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax, max-shifted.
pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

/// Given probabilities `p` and upstream `dp`, the gradient w.r.t. the
/// pre-softmax scores, row-wise.
pub(crate) fn softmax_rows_backward(p: ArrayView2<'_, f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = dp * &p;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let total = row.sum();
        Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * total);
    }
    ds
}

/// Log-sum-exp of a row, max-shifted.
pub(crate) fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.mapv(|v| (v - max).exp()).sum().ln()
}

/// Fixed sinusoidal position table, scaled down so token embeddings are not
/// swamped at initialization.
pub(crate) fn sinusoidal_positions(len: usize, dim: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}
