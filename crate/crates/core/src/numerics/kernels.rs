//! Dense kernels over row-major slices. Reductions accumulate in `f64`.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]) as f32;
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (s, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
    }
    for (o, s) in out.iter_mut().zip(&acc) {
        *o += *s as f32;
    }
}

/// `a[m×k] · b[k×n]` in `f64`.
pub fn matmul_wide(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *s += av * bv;
            }
        }
    }
    out
}

pub fn dot_wide(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// In-place stable softmax of one row.
pub fn softmax_row(row: &mut [f32]) {
    let wide: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; row.len()];
    softmax_wide(&wide, &mut out);
    row.iter_mut().zip(&out).for_each(|(r, &o)| *r = o as f32);
}

/// In-place stable log-softmax of one row.
pub fn log_softmax_row(row: &mut [f32]) {
    let wide: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; row.len()];
    log_softmax_wide(&wide, &mut out);
    row.iter_mut().zip(&out).for_each(|(r, &o)| *r = o as f32);
}

/// Stable softmax; a row of `-inf` maps to zeros.
pub fn softmax_wide(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

pub fn log_softmax_wide(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    out.iter_mut().zip(row).for_each(|(o, &v)| *o = v - lse);
}

/// `ln(exp(a) + exp(b))` tolerant of `-inf` operands.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
