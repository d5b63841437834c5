//! Small dense `f32` kernels shared by op forwards and backwards.
//!
//! All loops are plain and sequential; accumulation order is fixed, which
//! keeps every float result bit-reproducible across runs.

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T` — the natural layout for `y = x W^T` with
/// weights stored `[d_out, d_in]`.
pub fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `c[m,n] = a[k,m]^T * b[k,n]` — used for weight gradients.
pub fn mm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Column sums of `a[m,n]`, i.e. gradient of a broadcast bias.
pub fn col_sums(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * n);
    let mut s = vec![0.0f32; n];
    for i in 0..m {
        for j in 0..n {
            s[j] += a[i * n + j];
        }
    }
    s
}

/// In-place `acc += x`.
pub fn add_assign(acc: &mut [f32], x: &[f32]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Numerically-safe softmax over a row, in place. Max-subtraction keeps the
/// exponentials finite; rows whose max is a large negative mask fill still
/// produce exact zeros for the filled entries.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    if sum > 0.0 {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
