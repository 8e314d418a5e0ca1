//! Slice-level kernels shared by the forward and backward passes.

/// `out[m×p] += a[m×k] · b[k×p]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×p] · b[k×p]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for kk in 0..k {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + kk] += s;
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · b[m×p]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax restricted to `allow`; disallowed outputs are exactly 0.
///
/// Returns the index of the first row with no allowed entry, if any.
pub fn masked_softmax_rows(
    scores: &[f64],
    allow: Option<&[bool]>,
    out: &mut [f64],
    rows: usize,
    cols: usize,
) -> Result<(), usize> {
    for i in 0..rows {
        let s = &scores[i * cols..(i + 1) * cols];
        let o = &mut out[i * cols..(i + 1) * cols];
        let a = allow.map(|m| &m[i * cols..(i + 1) * cols]);
        let allowed = |j: usize| a.is_none_or(|m| m[j]);

        if !(0..cols).any(allowed) {
            return Err(i);
        }
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in s.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if allowed(j) {
                let e = (s[j] - max).exp();
                o[j] = e;
                sum += e;
            } else {
                o[j] = 0.0;
            }
        }
        for (j, v) in o.iter_mut().enumerate() {
            if allowed(j) {
                *v /= sum;
            }
        }
    }
    Ok(())
}

/// Same-length zero-padded 1-D convolution, `out[t×c_out] += conv(x[t×c_in], kernel[k×c_in×c_out])`.
pub fn conv1d_acc(x: &[f64], kernel: &[f64], out: &mut [f64], t: usize, c_in: usize, c_out: usize, k: usize) {
    let r = (k / 2) as isize;
    for tap in 0..k {
        let w = &kernel[tap * c_in * c_out..(tap + 1) * c_in * c_out];
        let shift = tap as isize - r;
        for i in 0..t {
            let src = i as isize + shift;
            if src < 0 || src >= t as isize {
                continue;
            }
            let x_row = &x[src as usize * c_in..(src as usize + 1) * c_in];
            let out_row = &mut out[i * c_out..(i + 1) * c_out];
            for (c, &xv) in x_row.iter().enumerate() {
                let w_row = &w[c * c_out..(c + 1) * c_out];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
}

/// Backward of [`conv1d_acc`]; accumulates into `dx` and `dkernel`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    if let Some(dx) = dx {
        for tap in 0..k {
            let w = &kernel[tap * c_in * c_out..(tap + 1) * c_in * c_out];
            let shift = tap as isize - r;
            for i in 0..t {
                let src = i as isize + shift;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let g = &dout[i * c_out..(i + 1) * c_out];
                let dx_row = &mut dx[src as usize * c_in..(src as usize + 1) * c_in];
                for (c, d) in dx_row.iter_mut().enumerate() {
                    let w_row = &w[c * c_out..(c + 1) * c_out];
                    let mut s = 0.0;
                    for (&gv, &wv) in g.iter().zip(w_row) {
                        s += gv * wv;
                    }
                    *d += s;
                }
            }
        }
    }
    if let Some(dk) = dkernel {
        for tap in 0..k {
            let dw = &mut dk[tap * c_in * c_out..(tap + 1) * c_in * c_out];
            let shift = tap as isize - r;
            for i in 0..t {
                let src = i as isize + shift;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let g = &dout[i * c_out..(i + 1) * c_out];
                let x_row = &x[src as usize * c_in..(src as usize + 1) * c_in];
                for (c, &xv) in x_row.iter().enumerate() {
                    let dw_row = &mut dw[c * c_out..(c + 1) * c_out];
                    for (d, &gv) in dw_row.iter_mut().zip(g) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
}

/// Neumaier-compensated sum; the loss reductions use it so that finite
/// differences of a scalar objective are limited by the final rounding only.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
