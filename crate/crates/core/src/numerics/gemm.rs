//! Packed, register-blocked matrix multiply.
//!
//! Every output element is accumulated as `c += a_ik * b_kj` over strictly
//! ascending `k` (no fused multiply-add), so the result is bitwise identical
//! to the textbook triple loop and independent of how rows are chunked.

use super::Real;

const KC: usize = 256;
const MC: usize = 128;
const NC: usize = 1024;

/// Strided read-only view; transposes are expressed by swapping strides.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Copy> View<'a, T> {
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        debug_assert!(rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len());
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.rs + c * self.cs]
    }
}

/// `c[i * ldc + j] += Σ_k a(i, k) · b(k, j)`.
pub(crate) fn gemm<T: Real>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], ldc: usize) {
    debug_assert_eq!(a.cols, b.rows);
    if std::mem::size_of::<T>() == 4 {
        gemm_blocked::<T, 4, 8>(a, b, c, ldc)
    } else {
        gemm_blocked::<T, 4, 4>(a, b, c, ldc)
    }
}

fn gemm_blocked<T: Real, const MR: usize, const NR: usize>(
    a: View<'_, T>,
    b: View<'_, T>,
    c: &mut [T],
    ldc: usize,
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let nc_max = NC.min(n).div_ceil(NR) * NR;
    let mc_max = MC.min(m).div_ceil(MR) * MR;
    let kc_max = KC.min(k);
    let mut bpack = vec![T::zero(); kc_max * nc_max];
    let mut apack = vec![T::zero(); kc_max * mc_max];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b::<T, NR>(&b, pc, jc, kc, nc, &mut bpack);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a::<T, MR>(&a, ic, pc, mc, kc, &mut apack);
                for jr in (0..nc).step_by(NR) {
                    let bp = &bpack[(jr / NR) * NR * kc..][..NR * kc];
                    for ir in (0..mc).step_by(MR) {
                        let ap = &apack[(ir / MR) * MR * kc..][..MR * kc];
                        micro_kernel::<T, MR, NR>(
                            kc,
                            ap,
                            bp,
                            c,
                            ldc,
                            ic + ir,
                            jc + jr,
                            MR.min(mc - ir),
                            NR.min(nc - jr),
                        );
                    }
                }
            }
        }
    }
}

fn pack_a<T: Real, const MR: usize>(
    a: &View<'_, T>,
    i0: usize,
    p0: usize,
    mc: usize,
    kc: usize,
    out: &mut [T],
) {
    for (panel, ir) in (0..mc).step_by(MR).enumerate() {
        let dst = &mut out[panel * MR * kc..][..MR * kc];
        let rows = MR.min(mc - ir);
        for p in 0..kc {
            for i in 0..MR {
                dst[p * MR + i] = if i < rows {
                    a.at(i0 + ir + i, p0 + p)
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn pack_b<T: Real, const NR: usize>(
    b: &View<'_, T>,
    p0: usize,
    j0: usize,
    kc: usize,
    nc: usize,
    out: &mut [T],
) {
    for (panel, jr) in (0..nc).step_by(NR).enumerate() {
        let dst = &mut out[panel * NR * kc..][..NR * kc];
        let cols = NR.min(nc - jr);
        for p in 0..kc {
            for j in 0..NR {
                dst[p * NR + j] = if j < cols {
                    b.at(p0 + p, j0 + jr + j)
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn micro_kernel<T: Real, const MR: usize, const NR: usize>(
    kc: usize,
    ap: &[T],
    bp: &[T],
    c: &mut [T],
    ldc: usize,
    i0: usize,
    j0: usize,
    mr: usize,
    nr: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for i in 0..mr {
        let row = &c[(i0 + i) * ldc + j0..][..nr];
        acc[i][..nr].copy_from_slice(row);
    }
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)).take(kc) {
        for i in 0..MR {
            for j in 0..NR {
                acc[i][j] += a[i] * b[j];
            }
        }
    }
    for i in 0..mr {
        let row = &mut c[(i0 + i) * ldc + j0..][..nr];
        row.copy_from_slice(&acc[i][..nr]);
    }
}
