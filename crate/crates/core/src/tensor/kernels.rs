//! Raw slice kernels shared by the forward and backward passes.

use crate::num::Scalar;

/// `c (+)= op(a) · op(b)` where `c` is `m×n` and the inner extent is `k`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
// c += a·b with a 4×8 tile of accumulators held in registers across k.
fn gemm_nn_blocked<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            let mut acc = [[T::zero(); NR]; MR];
            if mr == MR && nr == NR {
                for p in 0..k {
                    let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                    for r in 0..MR {
                        let av = a[(i + r) * k + p];
                        for q in 0..NR {
                            acc[r][q] += av * bp[q];
                        }
                    }
                }
            } else {
                for p in 0..k {
                    let bp = &b[p * n + j..p * n + j + nr];
                    for r in 0..mr {
                        let av = a[(i + r) * k + p];
                        for q in 0..nr {
                            acc[r][q] += av * bp[q];
                        }
                    }
                }
            }
            for r in 0..mr {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + nr];
                for q in 0..nr {
                    crow[q] += acc[r][q];
                }
            }
            j += NR;
        }
        i += MR;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    match (trans_a, trans_b) {
        // one-dimensional heads: outer product and matrix-vector forms
        (false, true) | (false, false) if k == 1 => {
            for (crow, &av) in c.chunks_exact_mut(n).zip(a) {
                for (cv, &bv) in crow.iter_mut().zip(b) {
                    *cv += av * bv;
                }
            }
        }
        (false, false) if n == 1 => {
            for (cv, arow) in c.iter_mut().zip(a.chunks_exact(k)) {
                *cv += dot(arow, b);
            }
        }
        (false, false) if n >= 8 => gemm_nn_blocked(a, b, c, m, k, n),
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] += dot(arow, brow);
                }
            }
        }
        (true, false) => {
            // a is k×m: c[i, :] += a[p, i] * b[p, :]
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == T::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four accumulators so the loop vectorizes
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Gather `data` (of `shape`) into the axis order `perm`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    (gather_strided(data, &out_shape, &src_strides), out_shape)
}

/// Row-major walk of `shape` reading `data` through `strides`. Runs along the
/// last axis are copied as slices when contiguous and repeated when stride 0.
pub fn gather_strided<T: Scalar>(data: &[T], shape: &[usize], strides: &[usize]) -> Vec<T> {
    let total: usize = shape.iter().product();
    // drop unit axes and merge axes that are contiguous with their successor
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(shape.len());
    for (&n, &s) in shape.iter().zip(strides).rev() {
        if n == 1 {
            continue;
        }
        match dims.last_mut() {
            Some((m, t)) if s == *t * *m => *m *= n,
            _ => dims.push((n, s)),
        }
    }
    if dims.is_empty() {
        return data[..1].to_vec();
    }
    dims.reverse();
    let (shape, strides): (Vec<usize>, Vec<usize>) = dims.into_iter().unzip();
    let rank = shape.len();
    let mut out = Vec::with_capacity(total);
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..total / inner.max(1) {
        match inner_stride {
            1 => out.extend_from_slice(&data[base..base + inner]),
            0 => out.extend(std::iter::repeat_n(data[base], inner)),
            s => out.extend((0..inner).map(|j| data[base + j * s])),
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Numpy-style broadcast of `shape` to `target`. Returns the input strides
/// aligned to `target` (zero on broadcast axes), or `None` if incompatible.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if shape.len() > target.len() {
        return None;
    }
    let offset = target.len() - shape.len();
    let in_strides = super::strides(shape);
    let mut out = vec![0; target.len()];
    for (i, &d) in shape.iter().enumerate() {
        let t = target[offset + i];
        if d == t {
            out[offset + i] = in_strides[i];
        } else if d != 1 {
            return None;
        }
    }
    Some(out)
}

/// Visit every multi-index of `shape` in row-major order together with the
/// strided offset given by `strides`.
pub fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for linear in 0..n {
        f(linear, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    // 0.5·x·(1 + tanh(u)) == x·sigmoid(2u)
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = T::from_f64(GELU_C) * (T::one() + T::from_f64(3.0 * GELU_A) * x * x);
    s + (x + x) * s * (T::one() - s) * du
}

/// Frequencies of the sinusoidal level embedding: `10000^(-i/half)`.
pub fn sinusoid_freqs(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        for (m, k, n) in [(3, 5, 7), (4, 1, 6), (5, 3, 1), (1, 1, 1), (4, 3, 8), (9, 5, 17)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            for ta in [false, true] {
                for tb in [false, true] {
                    let mut c = vec![0.0; m * n];
                    gemm(&a, &b, &mut c, m, k, n, ta, tb, false);
                    let want = naive(&a, &b, m, k, n, ta, tb);
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let (p, s) = permute(&data, &shape, &perm);
        assert_eq!(s, vec![4, 2, 3]);
        // out[c, a, b] == in[a, b, c]
        assert_eq!(p[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let (back, bs) = permute(&p, &s, &inverse_perm(&perm));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, data);
    }

    proptest::proptest! {
        #[test]
        fn gather_matches_offset_walk(
            shape in proptest::collection::vec(1usize..4, 1..5),
            perm_seed in 0usize..120,
            bcast in proptest::collection::vec(proptest::bool::ANY, 5),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let mut perm: Vec<usize> = (0..shape.len()).collect();
            let mut k = perm_seed;
            for i in (1..perm.len()).rev() {
                perm.swap(i, k % (i + 1));
                k /= i + 1;
            }
            let in_strides = crate::tensor::strides(&shape);
            let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let strides: Vec<usize> =
                perm.iter().enumerate().map(|(i, &p)| if bcast[i] { 0 } else { in_strides[p] }).collect();
            let mut naive = Vec::new();
            for_each_offset(&out_shape, &strides, |_, off| naive.push(data[off]));
            proptest::prop_assert_eq!(gather_strided(&data, &out_shape, &strides), naive);
        }
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for &x in &[-30.0, -3.0, -0.5, 0.0, 1e-9, 0.7, 2.5, 40.0f64] {
            let u = 0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x);
            let reference = 0.5 * x * (1.0 + u.tanh());
            assert!((gelu(x) - reference).abs() <= 1e-14 * (1.0 + x.abs()), "x={x}");
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
