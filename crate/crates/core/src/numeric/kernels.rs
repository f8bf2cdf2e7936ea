//! Matrix-vector and matrix-matrix products.
//!
//! [`gemv`] and [`gemm_reference`] accumulate in ascending inner-index order
//! and are the numerical baseline. [`gemm`] and [`gemv_tiled`] are cache-tiled
//! outer-product kernels: a register block of `MR × NR` outputs is updated
//! once per inner index, still in ascending order, so every element comes out
//! bit-identical to the reference while each loaded weight is applied to `NR`
//! columns at once. Output rows are distributed over workers in whole tiles.

use crate::error::{mismatch, Result};
use crate::par;

use super::{Matrix, Scalar, Vector};

/// Tile extents of the tiled kernel, in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiles {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl Default for Tiles {
    fn default() -> Self {
        Self { m: 64, n: 64, k: 64 }
    }
}

impl Tiles {
    pub fn square(size: usize) -> Self {
        Self {
            m: size,
            n: size,
            k: size,
        }
    }

    fn sanitized(self) -> Self {
        Self {
            m: self.m.max(1),
            n: self.n.max(1),
            k: self.k.max(1),
        }
    }
}

/// `A·x` with ascending-index accumulation, single-threaded.
pub fn gemv<S: Scalar>(a: &Matrix<S>, x: &Vector<S>) -> Result<Vector<S>> {
    if a.cols() != x.len() {
        return Err(mismatch("gemv", a.cols(), x.len()));
    }
    let xs = x.data();
    let out = (0..a.rows())
        .map(|i| {
            let mut acc = S::zero();
            for (&w, &v) in a.row(i).iter().zip(xs) {
                acc = acc + w * v;
            }
            acc
        })
        .collect();
    Ok(Vector::from_vec(out))
}

/// `A·B` with ascending-index accumulation, single-threaded.
pub fn gemm_reference<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    check_gemm(a, b)?;
    let (m, n) = (a.rows(), b.cols());
    let mut out = Matrix::zeros(m, n)?;
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let mut acc = S::zero();
            for (l, &w) in a_row.iter().enumerate() {
                acc = acc + w * b.get(l, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Tiled `A·B` with the default 64×64×64 tiles.
pub fn gemm<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    gemm_tiled(a, b, Tiles::default())
}

/// Tiled `A·B`; row tiles are spread over the ambient worker pool.
pub fn gemm_tiled<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, tiles: Tiles) -> Result<Matrix<S>> {
    check_gemm(a, b)?;
    let tiles = tiles.sanitized();
    let n = b.cols();
    let mut out = Matrix::zeros(a.rows(), n)?;
    par::for_each_chunk_mut(out.data_mut(), tiles.m * n, |ib, chunk| {
        row_tile(a, b.data(), n, tiles, ib * tiles.m, chunk)
    });
    Ok(out)
}

/// Tiled `A·B` that never leaves the calling thread.
pub fn gemm_tiled_seq<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, tiles: Tiles) -> Result<Matrix<S>> {
    check_gemm(a, b)?;
    let tiles = tiles.sanitized();
    let n = b.cols();
    let mut out = Matrix::zeros(a.rows(), n)?;
    par::for_each_chunk_mut_seq(out.data_mut(), tiles.m * n, |ib, chunk| {
        row_tile(a, b.data(), n, tiles, ib * tiles.m, chunk)
    });
    Ok(out)
}

/// `A·x` through the tiled kernel; bit-identical to [`gemv`].
pub fn gemv_tiled<S: Scalar>(a: &Matrix<S>, x: &Vector<S>) -> Result<Vector<S>> {
    if a.cols() != x.len() {
        return Err(mismatch("gemv_tiled", a.cols(), x.len()));
    }
    let tiles = Tiles::default();
    let mut out = vec![S::zero(); a.rows()];
    par::for_each_chunk_mut(&mut out, tiles.m, |ib, chunk| {
        row_tile(a, x.data(), 1, tiles, ib * tiles.m, chunk)
    });
    Ok(Vector::from_vec(out))
}

fn check_gemm<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(mismatch(
            "gemm",
            format!("B with {} rows", a.cols()),
            format!("B with {} rows", b.rows()),
        ));
    }
    Ok(())
}

/// Accumulates rows `row0..` of `A·B` into `out` (row-major, `n` columns).
/// `b` is `B` in row-major order.
fn row_tile<S: Scalar>(a: &Matrix<S>, b: &[S], n: usize, tiles: Tiles, row0: usize, out: &mut [S]) {
    let k = a.cols();
    let rows = out.len() / n;
    let ad = &a.data()[row0 * k..(row0 + rows) * k];
    // With at most three columns there is little to reuse from cache; stream
    // the weight rows once.
    match n {
        1 => return narrow_rows::<S, 1>(ad, k, [b], rows, out),
        2 | 3 => {
            let bt: Vec<Vec<S>> = (0..n).map(|c| (0..k).map(|l| b[l * n + c]).collect()).collect();
            if n == 2 {
                return narrow_rows::<S, 2>(ad, k, [&bt[0], &bt[1]], rows, out);
            }
            return narrow_rows::<S, 3>(ad, k, [&bt[0], &bt[1], &bt[2]], rows, out);
        }
        _ => {}
    }
    for kb in (0..k).step_by(tiles.k) {
        let ke = (kb + tiles.k).min(k);
        for jb in (0..n).step_by(tiles.n) {
            let je = (jb + tiles.n).min(n);
            let mut j = jb;
            while j < je {
                let w = je - j;
                let t = Tile {
                    a: ad,
                    k,
                    b,
                    n,
                    kb,
                    ke,
                    j,
                };
                if w >= 8 {
                    row_groups::<S, 4, 8>(&t, rows, out);
                    j += 8;
                } else if w >= 4 {
                    row_groups::<S, 4, 4>(&t, rows, out);
                    j += 4;
                } else {
                    row_groups::<S, 8, 1>(&t, rows, out);
                    j += 1;
                }
            }
        }
    }
}

/// Operands of one column panel within one `k` range.
struct Tile<'a, S> {
    a: &'a [S],
    k: usize,
    b: &'a [S],
    n: usize,
    kb: usize,
    ke: usize,
    j: usize,
}

#[inline(always)]
fn row_groups<S: Scalar, const MR: usize, const NR: usize>(t: &Tile<'_, S>, rows: usize, out: &mut [S]) {
    let mut r = 0;
    while r + MR <= rows {
        micro::<S, MR, NR>(t, r, out);
        r += MR;
    }
    while r < rows {
        micro::<S, 1, NR>(t, r, out);
        r += 1;
    }
}

/// Narrow case (`NC ≤ 3` columns). Eight rows advance together and the
/// inner index is consumed in runs of eight, so every weight load is
/// contiguous and shared by all columns. `cols[c]` is column `c` of `B`.
fn narrow_rows<S: Scalar, const NC: usize>(a: &[S], k: usize, cols: [&[S]; NC], rows: usize, out: &mut [S]) {
    const R: usize = 8;
    let mut r0 = 0;
    while r0 + R <= rows {
        let a_rows: [&[S]; R] = std::array::from_fn(|r| &a[(r0 + r) * k..][..k]);
        let mut acc: [[S; NC]; R] = std::array::from_fn(|r| std::array::from_fn(|c| out[(r0 + r) * NC + c]));
        let mut l = 0;
        while l + R <= k {
            let xs: [&[S; R]; NC] = std::array::from_fn(|c| cols[c][l..l + R].try_into().expect("run"));
            let blk: [&[S; R]; R] = std::array::from_fn(|r| a_rows[r][l..l + R].try_into().expect("run"));
            for q in 0..R {
                for r in 0..R {
                    for c in 0..NC {
                        acc[r][c] = acc[r][c] + blk[r][q] * xs[c][q];
                    }
                }
            }
            l += R;
        }
        for l in l..k {
            for r in 0..R {
                for c in 0..NC {
                    acc[r][c] = acc[r][c] + a_rows[r][l] * cols[c][l];
                }
            }
        }
        for r in 0..R {
            out[(r0 + r) * NC..][..NC].copy_from_slice(&acc[r]);
        }
        r0 += R;
    }
    for r in r0..rows {
        for c in 0..NC {
            let mut acc = out[r * NC + c];
            for (&w, &v) in a[r * k..][..k].iter().zip(cols[c]) {
                acc = acc + w * v;
            }
            out[r * NC + c] = acc;
        }
    }
}

/// `out[r0.., j..j+NR] += A[r0.., kb..ke] · B[kb..ke, j..j+NR]`, one inner
/// index at a time.
#[inline(always)]
fn micro<S: Scalar, const MR: usize, const NR: usize>(t: &Tile<'_, S>, r0: usize, out: &mut [S]) {
    let len = t.ke - t.kb;
    let a_rows: [&[S]; MR] = std::array::from_fn(|r| &t.a[(r0 + r) * t.k + t.kb..][..len]);
    let b_panel = &t.b[t.kb * t.n..];
    let mut acc = [[S::zero(); NR]; MR];
    for r in 0..MR {
        acc[r].copy_from_slice(&out[(r0 + r) * t.n + t.j..][..NR]);
    }
    for l in 0..len {
        let bl: &[S; NR] = b_panel[l * t.n + t.j..][..NR].try_into().expect("panel width");
        for r in 0..MR {
            let av = a_rows[r][l];
            for c in 0..NR {
                acc[r][c] = acc[r][c] + av * bl[c];
            }
        }
    }
    for r in 0..MR {
        out[(r0 + r) * t.n + t.j..][..NR].copy_from_slice(&acc[r]);
    }
}
