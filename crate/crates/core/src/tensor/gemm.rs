/// `c = op(a) · b` for row-major `f32` matrices, where `op(a)` is `m×k`
/// (stored `k×m` when `transpose_a`), `b` is `k×n` and `c` is `m×n`.
/// `c` is overwritten.
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    transpose_a: bool,
    b: &[f32],
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "lhs extent");
    assert_eq!(b.len(), k * n, "rhs extent");
    assert_eq!(c.len(), m * n, "output extent");
    let (rsa, csa) = if transpose_a { (1, m as isize) } else { (k as isize, 1) };
    // SAFETY: the asserts above guarantee every index the kernel touches,
    // derived from (m, k, n) and the strides, lies inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
