//! Raw numeric kernels shared by the forward and backward passes.

/// Right-aligned broadcast of two shapes, `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// How an operand of `shape` maps onto a broadcast result of `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Each value is repeated over a contiguous run of this length (1 = same shape).
    Repeat(usize),
    /// The whole operand repeats with this period.
    Tile(usize),
    General,
}

pub(crate) fn layout(shape: &[usize], out: &[usize]) -> Layout {
    let nd = out.len();
    let pad = nd - shape.len();
    let dim = |i: usize| if i < pad { 1 } else { shape[i - pad] };
    let numel: usize = shape.iter().product();
    let total: usize = out.iter().product();
    // Longest prefix that agrees with `out`; the rest must be ones.
    let k = (0..nd).take_while(|&i| dim(i) == out[i]).count();
    if (k..nd).all(|i| dim(i) == 1) {
        return Layout::Repeat(out[k..].iter().product());
    }
    // Leading ones followed by a suffix that agrees with `out`.
    let j = (0..nd).take_while(|&i| dim(i) == 1).count();
    if (j..nd).all(|i| dim(i) == out[i]) && numel > 0 && total % numel == 0 {
        return Layout::Tile(numel);
    }
    Layout::General
}

/// Visits every flat index of `out` together with the matching offsets of two
/// broadcast operands described by their strides.
#[inline]
pub(crate) fn for_each2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    if out.contains(&0) {
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary map with broadcasting.
pub(crate) fn zip_map(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    if a.len() == n {
        match layout(b_shape, out_shape) {
            Layout::Repeat(r) => {
                for (chunk, &y) in a.chunks(r).zip(b) {
                    out.extend(chunk.iter().map(|&x| f(x, y)));
                }
                return out;
            }
            Layout::Tile(p) => {
                for chunk in a.chunks(p) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
                }
                return out;
            }
            Layout::General => {}
        }
    }
    if b.len() == n {
        match layout(a_shape, out_shape) {
            Layout::Repeat(r) => {
                for (chunk, &x) in b.chunks(r).zip(a) {
                    out.extend(chunk.iter().map(|&y| f(x, y)));
                }
                return out;
            }
            Layout::Tile(p) => {
                for chunk in b.chunks(p) {
                    out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                return out;
            }
            Layout::General => {}
        }
    }
    drop(out);
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![0.0; n];
    for_each2(out_shape, &sa, &sb, |o, ia, ib| out[o] = f(a[ia], b[ib]));
    out
}

/// Sums `grad` (laid out in `grad_shape`) down to `target` by adding over broadcast axes.
pub(crate) fn sum_to_shape(grad: &[f64], grad_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if grad_shape == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    if n == 1 {
        return vec![grad.iter().sum()];
    }
    if grad.is_empty() {
        return vec![0.0; n];
    }
    match layout(target, grad_shape) {
        Layout::Repeat(r) => return grad.chunks(r).map(|c| c.iter().sum()).collect(),
        Layout::Tile(p) => {
            let mut out = vec![0.0; p];
            for chunk in grad.chunks(p) {
                for (o, g) in out.iter_mut().zip(chunk) {
                    *o += g;
                }
            }
            return out;
        }
        Layout::General => {}
    }
    let st = broadcast_strides(target, grad_shape);
    let zero = vec![0; grad_shape.len()];
    let mut out = vec![0.0; n];
    for_each2(grad_shape, &st, &zero, |o, it, _| out[it] += grad[o]);
    out
}

/// Broadcasts `src` (of `src_shape`) up to `out_shape`.
pub(crate) fn expand(src: &[f64], src_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if src_shape == out_shape {
        return src.to_vec();
    }
    let n: usize = out_shape.iter().product();
    if src.len() == 1 {
        return vec![src[0]; n];
    }
    if n == 0 {
        return Vec::new();
    }
    match layout(src_shape, out_shape) {
        Layout::Repeat(r) => {
            let mut out = Vec::with_capacity(n);
            for &v in src {
                out.extend(std::iter::repeat_n(v, r));
            }
            return out;
        }
        Layout::Tile(_) => {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                out.extend_from_slice(src);
            }
            return out;
        }
        Layout::General => {}
    }
    let ss = broadcast_strides(src_shape, out_shape);
    let zero = vec![0; out_shape.len()];
    let mut out = vec![0.0; n];
    for_each2(out_shape, &ss, &zero, |o, is, _| out[o] = src[is]);
    out
}

/// Decomposes `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SMALL: usize = 8;

/// Direct loops for products with one tiny extent, where packing into a
/// blocked kernel costs more than the arithmetic. Returns false if no loop
/// applies.
#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64]) -> bool {
    // b as stored k×n or n×k, whichever the loop wants
    let b_kn = || if trans_b { transpose(b, n, k) } else { b.to_vec() };
    let b_nk = || if trans_b { b.to_vec() } else { transpose(b, k, n) };
    if !trans_a && k <= SMALL {
        let bk = b_kn();
        for (row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            row.fill(0.0);
            for (&x, b_row) in a_row.iter().zip(bk.chunks_exact(n)) {
                for (o, &y) in row.iter_mut().zip(b_row) {
                    *o += x * y;
                }
            }
        }
        return true;
    }
    if !trans_a && n <= SMALL {
        let bt = b_nk();
        for (row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            for (o, b_col) in row.iter_mut().zip(bt.chunks_exact(k)) {
                *o = dot(a_row, b_col);
            }
        }
        return true;
    }
    if trans_a && (m <= SMALL || n <= SMALL) && m * n <= 1 << 16 {
        // c = aᵀ b as a sum of rank-one updates over the shared axis, with
        // the longer side innermost
        let bk = b_kn();
        let (wide, narrow, w, nw) = if n >= m { (&bk[..], a, n, m) } else { (a, &bk[..], m, n) };
        let mut acc = vec![0.0; m * n];
        for (x_row, y_row) in narrow.chunks_exact(nw).zip(wide.chunks_exact(w)) {
            for (&x, acc_row) in x_row.iter().zip(acc.chunks_exact_mut(w)) {
                for (o, &y) in acc_row.iter_mut().zip(y_row) {
                    *o += x * y;
                }
            }
        }
        if n >= m {
            c.copy_from_slice(&acc);
        } else {
            c.copy_from_slice(&transpose(&acc, n, m));
        }
        return true;
    }
    false
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the loop vectorize
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with optional transposition of either operand.
///
/// `a` and `b` are row-major in their *stored* layout; `trans_a` means the stored
/// array is `k×m`, `trans_b` means it is `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if !accumulate && small_gemm(m, k, n, a, trans_a, b, trans_b, c) {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
