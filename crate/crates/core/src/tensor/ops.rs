//! Forward kernels shared by the tape. All kernels are plain loops over
//! row-major storage; shapes are validated by the caller.

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    // Split form avoids overflow of exp for large |x|.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = p * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += av * b[row + j];
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Decompose `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduce_axis(data: &[f64], shape: &[usize], axis: usize, mean: bool) -> Vec<f64> {
    let (outer, k, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..k {
            let base = (o * k + a) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += data[base + i];
            }
        }
    }
    if mean {
        let kf = k as f64;
        for v in &mut out {
            *v /= kf;
        }
    }
    out
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Softmax along `axis` with max subtraction for stability.
pub(crate) fn softmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, k, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for a in 0..k {
                max = max.max(data[(o * k + a) * inner + i]);
            }
            let mut sum = 0.0;
            for a in 0..k {
                let idx = (o * k + a) * inner + i;
                let e = (data[idx] - max).exp();
                out[idx] = e;
                sum += e;
            }
            for a in 0..k {
                out[(o * k + a) * inner + i] /= sum;
            }
        }
    }
    out
}
