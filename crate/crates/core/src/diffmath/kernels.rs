//! Plain slice kernels shared by the forward ops and their VJPs.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `[m,k] @ [k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m,k] @ [n,k]^T`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[k,m]^T @ [k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Takes `len` entries starting at `start` along `axis`.
pub fn slice(data: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * ext * inner + start * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

pub fn slice_backward(g: &[f64], in_shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(in_shape, axis);
    let mut out = vec![0.0; outer * ext * inner];
    for o in 0..outer {
        let base = o * ext * inner + start * inner;
        out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// For every flat index of `to`, the flat index of `from` it reads under
/// trailing-dimension alignment (size-1 axes stretch, missing leading axes repeat).
pub fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let lead = to.len() - from.len();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for i in (0..from.len()).rev() {
        src_strides[lead + i] = if from[i] == 1 { 0 } else { stride };
        stride *= from[i];
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; to.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        // odometer increment
        for ax in (0..to.len()).rev() {
            index[ax] += 1;
            src += src_strides[ax];
            if index[ax] < to[ax] {
                break;
            }
            src -= src_strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    map
}

pub fn rms_norm(x: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

pub fn rms_norm_backward(x: &[f64], g: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut dx = Vec::with_capacity(x.len());
    for (row, grow) in x.chunks(cols).zip(g.chunks(cols)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        // y = x*inv; dx = inv * (g - y * mean(g*y))
        let gy: f64 = row.iter().zip(grow).map(|(v, gv)| v * inv * gv).sum::<f64>() / cols as f64;
        dx.extend(row.iter().zip(grow).map(|(v, gv)| inv * (gv - v * inv * gy)));
    }
    dx
}

pub fn log_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
