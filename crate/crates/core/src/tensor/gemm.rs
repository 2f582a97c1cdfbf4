//! Small register-blocked matrix multiply used by the im2col convolution.
//!
//! Every output element is accumulated from zero in ascending order of the inner
//! index with separate multiply and add, so results are bit-identical to a naive
//! triple loop with the same inner ordering.

use super::Real;

const MR: usize = 4;
const NR: usize = 16;

/// Left operand packed into panels of `MR` rows, laid out `[panel][k][MR]`.
pub(crate) struct PackedA<T> {
    rows: usize,
    depth: usize,
    data: Vec<T>,
}

impl<T: Real> PackedA<T> {
    /// Packs `a[r * depth + k]`.
    pub fn from_row_major(a: &[T], rows: usize, depth: usize) -> Self {
        Self::pack(rows, depth, |r, k| a[r * depth + k])
    }

    /// Packs the transpose of a row-major `depth x rows` matrix, i.e. `A[r][k] = a[k * rows + r]`.
    pub fn from_transposed(a: &[T], rows: usize, depth: usize) -> Self {
        Self::pack(rows, depth, |r, k| a[k * rows + r])
    }

    fn pack(rows: usize, depth: usize, at: impl Fn(usize, usize) -> T) -> Self {
        let panels = rows.div_ceil(MR);
        let mut data = vec![T::zero(); panels * depth * MR];
        for p in 0..panels {
            let base = p * depth * MR;
            for k in 0..depth {
                for m in 0..MR {
                    let r = p * MR + m;
                    if r < rows {
                        data[base + k * MR + m] = at(r, k);
                    }
                }
            }
        }
        PackedA { rows, depth, data }
    }
}

#[inline(always)]
fn micro_kernel<T: Real>(panel: &[T], depth: usize, b: &[T], ldb: usize, j0: usize) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for k in 0..depth {
        let row: &[T; NR] = b[k * ldb + j0..k * ldb + j0 + NR].try_into().unwrap();
        let a: &[T; MR] = panel[k * MR..k * MR + MR].try_into().unwrap();
        for m in 0..MR {
            let am = a[m];
            for j in 0..NR {
                acc[m][j] = acc[m][j] + am * row[j];
            }
        }
    }
    acc
}

/// `out[r * ldo + j] = sum_k A[r][k] * b[k * ldb + j]` for `j < n`.
pub(crate) fn gemm<T: Real>(a: &PackedA<T>, b: &[T], ldb: usize, n: usize, out: &mut [T], ldo: usize) {
    let depth = a.depth;
    let panels = a.rows.div_ceil(MR);
    let full = n - n % NR;
    for j0 in (0..full).step_by(NR) {
        for p in 0..panels {
            let panel = &a.data[p * depth * MR..(p + 1) * depth * MR];
            let acc = micro_kernel(panel, depth, b, ldb, j0);
            for (m, acc_row) in acc.iter().enumerate() {
                let r = p * MR + m;
                if r < a.rows {
                    out[r * ldo + j0..r * ldo + j0 + NR].copy_from_slice(acc_row);
                }
            }
        }
    }
    if full < n {
        for p in 0..panels {
            let panel = &a.data[p * depth * MR..(p + 1) * depth * MR];
            for m in 0..MR {
                let r = p * MR + m;
                if r >= a.rows {
                    break;
                }
                for j in full..n {
                    let mut acc = T::zero();
                    for k in 0..depth {
                        acc = acc + panel[k * MR + m] * b[k * ldb + j];
                    }
                    out[r * ldo + j] = acc;
                }
            }
        }
    }
}

/// `out[r][k] += sum_j x[r * ldx + j] * y[k * ldy + j]` for `j < n`: the rank-`n`
/// update used for weight gradients. Rows are taken four at a time so each loaded
/// vector of `y` is reused four times.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nt_accumulate<T: Real>(
    x: &[T],
    ldx: usize,
    rows: usize,
    y: &[T],
    ldy: usize,
    cols: usize,
    n: usize,
    out: &mut [T],
) {
    const LANES: usize = 8;
    const KB: usize = 1;
    let chunks = n / LANES;
    let tail = chunks * LANES;
    let mut r0 = 0;
    while r0 < rows {
        let rb = (rows - r0).min(MR);
        let mut k0 = 0;
        while k0 < cols {
            let kb = (cols - k0).min(KB);
            let mut acc = [[[T::zero(); LANES]; KB]; MR];
            if rb == MR && kb == KB {
                let xr: [&[T]; MR] = std::array::from_fn(|m| &x[(r0 + m) * ldx..(r0 + m) * ldx + n]);
                let yr: [&[T]; KB] = std::array::from_fn(|q| &y[(k0 + q) * ldy..(k0 + q) * ldy + n]);
                for c in 0..chunks {
                    let o = c * LANES;
                    let xs: [&[T; LANES]; MR] = std::array::from_fn(|m| xr[m][o..o + LANES].try_into().unwrap());
                    let ys: [&[T; LANES]; KB] = std::array::from_fn(|q| yr[q][o..o + LANES].try_into().unwrap());
                    for m in 0..MR {
                        for q in 0..KB {
                            for l in 0..LANES {
                                acc[m][q][l] = acc[m][q][l] + xs[m][l] * ys[q][l];
                            }
                        }
                    }
                }
            } else {
                for m in 0..rb {
                    let xr = &x[(r0 + m) * ldx..(r0 + m) * ldx + n];
                    for q in 0..kb {
                        let yr = &y[(k0 + q) * ldy..(k0 + q) * ldy + n];
                        for c in 0..chunks {
                            for l in 0..LANES {
                                acc[m][q][l] = acc[m][q][l] + xr[c * LANES + l] * yr[c * LANES + l];
                            }
                        }
                    }
                }
            }
            for m in 0..rb {
                let xr = &x[(r0 + m) * ldx..(r0 + m) * ldx + n];
                for q in 0..kb {
                    let yr = &y[(k0 + q) * ldy..(k0 + q) * ldy + n];
                    let mut s = acc[m][q].iter().copied().fold(T::zero(), |a, b| a + b);
                    for j in tail..n {
                        s = s + xr[j] * yr[j];
                    }
                    out[(r0 + m) * cols + k0 + q] += s;
                }
            }
            k0 += kb;
        }
        r0 += rb;
    }
}
