use super::Real;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` row-major, or `k×m` when `trans_a`; likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the axis order `axes`.
pub(crate) fn permute<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the source for each output axis
    let src_step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        // innermost axis in a tight loop
        let step = src_step[last];
        for j in 0..out_shape[last] {
            out.push(src[offset + j * step]);
        }
        // carry
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Inverse of an axis permutation.
pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let src: Vec<usize> = (0..24).collect();
        let out = permute(&src, &shape, &[2, 0, 1]);
        // out[k][i][j] = src[i][j][k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], src[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_axes(&[2, 0, 1]));
        assert_eq!(back, src);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5],[6]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let at = [1.0f64, 3.0, 2.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        gemm(2, 2, 1, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [17.0, 39.0]);
        gemm(2, 2, 1, &at, true, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 39.0]);
        gemm(2, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c, [34.0, 78.0]);
    }
}
