//! Dense row-major `f32` tensors and the handful of kernels the network needs.
//!
//! Every reduction accumulates in a fixed order (ascending index along the
//! reduced dimension, starting from `0.0`), so results are bit-reproducible
//! between runs and between the single-threaded and parallel paths.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::IndexMatrix;

/// Whether kernels may split work across the rayon pool.
///
/// Both modes produce bit-identical output; only the wall time differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThreadMode {
    #[default]
    Single,
    Parallel,
}

impl fmt::Display for ThreadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThreadMode::Single => f.write_str("single"),
            ThreadMode::Parallel => f.write_str("parallel"),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOWN])
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Tensor {
            shape: vec![cols, rows],
            data: out,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on differing shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// Plain matrix product `a · b` for `a: [m×p]`, `b: [p×q]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_with(a, b, ThreadMode::Single)
}

pub fn matmul_with(a: &Tensor, b: &Tensor, mode: ThreadMode) -> Result<Tensor> {
    let (m, p) = a.as_matrix("matmul")?;
    let (p2, q) = b.as_matrix("matmul")?;
    if p != p2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * q];
    matmul_slices(&a.data, &b.data, p, q, &mut out, mode);
    Ok(Tensor {
        shape: vec![m, q],
        data: out,
    })
}

/// Rows processed per parallel task.
const PAR_ROWS: usize = 64;

/// Per-column transform applied to each finished output element, in order:
/// `+ bias`, then `(v − shift) / denom · scale + offset`, then ReLU.
pub(crate) struct Epilogue<'a> {
    pub bias: Option<&'a [f32]>,
    pub affine: Option<ColumnAffine<'a>>,
    pub relu: bool,
}

pub(crate) struct ColumnAffine<'a> {
    pub shift: &'a [f32],
    pub denom: &'a [f32],
    pub scale: &'a [f32],
    pub offset: &'a [f32],
}

impl Epilogue<'_> {
    pub const NONE: Epilogue<'static> = Epilogue {
        bias: None,
        affine: None,
        relu: false,
    };

    #[inline(always)]
    fn apply(&self, col0: usize, seg: &mut [f32]) {
        let cols = col0..col0 + seg.len();
        if let Some(bias) = self.bias {
            for (v, &b) in seg.iter_mut().zip(&bias[cols.clone()]) {
                *v += b;
            }
        }
        if let Some(a) = &self.affine {
            let (m, d) = (&a.shift[cols.clone()], &a.denom[cols.clone()]);
            let (g, o) = (&a.scale[cols.clone()], &a.offset[cols]);
            for (c, v) in seg.iter_mut().enumerate() {
                *v = (*v - m[c]) / d[c] * g[c] + o[c];
            }
        }
        if self.relu {
            for v in seg.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
}

/// `out[m×q] = a[m×p] · b[p×q]` over raw slices.
pub(crate) fn matmul_slices(a: &[f32], b: &[f32], p: usize, q: usize, out: &mut [f32], mode: ThreadMode) {
    matmul_fused(a, b, p, q, out, &Epilogue::NONE, mode);
}

/// [`matmul_slices`] with `epi` applied to every output element as its tile is stored.
pub(crate) fn matmul_fused(a: &[f32], b: &[f32], p: usize, q: usize, out: &mut [f32], epi: &Epilogue<'_>, mode: ThreadMode) {
    match mode {
        ThreadMode::Single => matmul_block(a, b, p, q, out, epi),
        ThreadMode::Parallel => out
            .par_chunks_mut(PAR_ROWS * q)
            .zip(a.par_chunks(PAR_ROWS * p))
            .for_each(|(o, a)| matmul_block(a, b, p, q, o, epi)),
    }
}

const MR: usize = 4;

fn matmul_block(a: &[f32], b: &[f32], p: usize, q: usize, out: &mut [f32], epi: &Epilogue<'_>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        unsafe { matmul_block_avx(a, b, p, q, out, epi) };
        return;
    }
    matmul_tiles::<8>(a, b, p, q, out, epi);
}

// Wider tiles for 256-bit registers. Only separate multiplies and adds are
// enabled (no FMA), so results match the portable kernel bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn matmul_block_avx(a: &[f32], b: &[f32], p: usize, q: usize, out: &mut [f32], epi: &Epilogue<'_>) {
    matmul_tiles::<16>(a, b, p, q, out, epi);
}

// Register-tiled kernel. Each output element is still `0.0 + a0*b0 + a1*b1 + ...`
// in ascending inner index, identical to the textbook triple loop.
#[inline(always)]
fn matmul_tiles<const NR: usize>(a: &[f32], b: &[f32], p: usize, q: usize, out: &mut [f32], epi: &Epilogue<'_>) {
    let m = out.len() / q;
    let full_rows = m - m % MR;
    let full_cols = q - q % NR;

    for i0 in (0..full_rows).step_by(MR) {
        let a_rows = &a[i0 * p..(i0 + MR) * p];
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f32; NR]; MR];
            for kk in 0..p {
                let bv: &[f32; NR] = b[kk * q + j0..kk * q + j0 + NR].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a_rows[r * p + kk];
                    for c in 0..NR {
                        acc_row[c] += av * bv[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter_mut().enumerate() {
                epi.apply(j0, acc_row);
                out[(i0 + r) * q + j0..(i0 + r) * q + j0 + NR].copy_from_slice(acc_row);
            }
        }
        if full_cols < q {
            for r in i0..i0 + MR {
                matmul_row(&a[r * p..(r + 1) * p], b, q, full_cols, &mut out[r * q..(r + 1) * q], epi);
            }
        }
    }
    for r in full_rows..m {
        matmul_row(&a[r * p..(r + 1) * p], b, q, 0, &mut out[r * q..(r + 1) * q], epi);
    }
}

#[inline(always)]
fn matmul_row(a_row: &[f32], b: &[f32], q: usize, from_col: usize, out_row: &mut [f32], epi: &Epilogue<'_>) {
    let out_row = &mut out_row[from_col..];
    out_row.fill(0.0);
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * q + from_col..(kk + 1) * q];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
    epi.apply(from_col, out_row);
}

/// `out[i][j] = x[idx[i][j]]`, producing `[n×k×c]` from `x: [n×c]`.
pub fn gather_rows(x: &Tensor, idx: &IndexMatrix) -> Result<Tensor> {
    let (n, c) = x.as_matrix("gather_rows")?;
    let k = idx.k();
    let mut out = Vec::with_capacity(idx.n() * k * c);
    for i in 0..idx.n() {
        for (j, &src) in idx.row(i).iter().enumerate() {
            let src = src as usize;
            if src >= n {
                return Err(Error::Index {
                    row: i,
                    col: j,
                    value: src,
                    len: n,
                });
            }
            out.extend_from_slice(&x.data[src * c..(src + 1) * c]);
        }
    }
    Ok(Tensor {
        shape: vec![idx.n(), k, c],
        data: out,
    })
}

/// Channel-wise maximum along `axis`; the axis is dropped from the shape.
pub fn reduce_max_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::BadAxis { axis, rank: x.rank() });
    }
    let len = x.shape[axis];
    if len == 0 {
        return Err(Error::EmptyAxis { axis });
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let block = &x.data[o * len * inner..(o + 1) * len * inner];
        let start = out.len();
        out.extend_from_slice(&block[..inner]);
        let acc = &mut out[start..];
        for a in 1..len {
            for (m, &v) in acc.iter_mut().zip(&block[a * inner..(a + 1) * inner]) {
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor { shape, data: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, p, q) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0f32; m * q];
        for i in 0..m {
            for j in 0..q {
                let mut acc = 0.0f32;
                for kk in 0..p {
                    acc += a.data()[i * p + kk] * b.data()[kk * q + j];
                }
                out[i * q + j] = acc;
            }
        }
        Tensor::new(vec![m, q], out).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let mut rng = Rng::new(3);
        let m = random(&[3, 3], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Tensor::identity(3)).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[1.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_triple_loop_exactly() {
        let mut rng = Rng::new(8);
        let a = random(&[8, 8], &mut rng);
        let b = random(&[8, 8], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        // Ragged sizes exercise the tile remainders.
        for &(m, p, q) in &[(1, 1, 1), (5, 7, 9), (13, 6, 17), (130, 33, 64), (67, 128, 40)] {
            let a = random(&[m, p], &mut rng);
            let b = random(&[p, q], &mut rng);
            let want = naive_matmul(&a, &b);
            assert_eq!(matmul(&a, &b).unwrap(), want, "{m}x{p}x{q}");
            assert_eq!(matmul_with(&a, &b, ThreadMode::Parallel).unwrap(), want);
        }
    }

    // The dispatcher may pick the wide kernel; check both tile widths directly.
    #[test]
    fn tile_widths_agree() {
        let mut rng = Rng::new(81);
        for &(m, p, q) in &[(9, 5, 23), (64, 70, 48)] {
            let a = random(&[m, p], &mut rng);
            let b = random(&[p, q], &mut rng);
            let want = naive_matmul(&a, &b);
            for tiles in [
                matmul_tiles::<8> as fn(&[f32], &[f32], usize, usize, &mut [f32], &Epilogue<'_>),
                matmul_tiles::<16>,
            ] {
                let mut out = vec![f32::NAN; m * q];
                tiles(a.data(), b.data(), p, q, &mut out, &Epilogue::NONE);
                assert_eq!(out, want.data());
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn gather_self_replicates_row() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let idx = IndexMatrix::from_rows_unchecked(3, 2, (0..3).flat_map(|i| [i, i]).collect());
        let g = gather_rows(&x, &idx).unwrap();
        assert_eq!(g.shape(), &[3, 2, 2]);
        assert_eq!(g.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_small_literal() {
        let x = Tensor::from_rows(&[[5.0], [7.0]]);
        let idx = IndexMatrix::from_rows(2, 1, vec![1, 0]).unwrap();
        let g = gather_rows(&x, &idx).unwrap();
        assert_eq!(g.shape(), &[2, 1, 1]);
        assert_eq!(g.data(), &[7.0, 5.0]);
    }

    #[test]
    fn gather_out_of_range_reports_position() {
        let x = Tensor::zeros(&[2, 1]);
        let idx = IndexMatrix::from_rows_unchecked(2, 1, vec![1, 9]);
        match gather_rows(&x, &idx) {
            Err(Error::Index { row: 1, col: 0, value: 9, len: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gather_matches_loop_oracle() {
        let mut rng = Rng::new(21);
        let (n, k, c) = (11, 4, 5);
        let x = random(&[n, c], &mut rng);
        let idx: Vec<u32> = (0..n * k).map(|_| rng.below(n as u64) as u32).collect();
        let idx = IndexMatrix::from_rows_unchecked(n, k, idx);
        let g = gather_rows(&x, &idx).unwrap();
        for i in 0..n {
            for j in 0..k {
                let src = idx.row(i)[j] as usize;
                for d in 0..c {
                    assert_eq!(g.data()[(i * k + j) * c + d], x.data()[src * c + d]);
                }
            }
        }
    }

    #[test]
    fn gather_inverse_permutation_roundtrip() {
        let mut rng = Rng::new(5);
        let n = 9;
        let x = random(&[n, 3], &mut rng);
        let perm = rng.permutation(n);
        let mut inv = vec![0u32; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i as u32;
        }
        let fwd = IndexMatrix::from_rows_unchecked(n, 1, perm.iter().map(|&p| p as u32).collect());
        let back = IndexMatrix::from_rows_unchecked(n, 1, inv);
        let y = gather_rows(&x, &fwd).unwrap().reshape(&[n, 3]).unwrap();
        let z = gather_rows(&y, &back).unwrap().reshape(&[n, 3]).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn max_axis_literal_and_singleton() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]);
        assert_eq!(reduce_max_axis(&x, 0).unwrap().data(), &[3.0, 5.0]);
        let single = Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_max_axis(&single, 1).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), single.data());
    }

    #[test]
    fn max_axis_matches_loop_oracle() {
        let mut rng = Rng::new(4);
        let x = random(&[4, 7, 3], &mut rng);
        let r = reduce_max_axis(&x, 1).unwrap();
        assert_eq!(r.shape(), &[4, 3]);
        for a in 0..4 {
            for c in 0..3 {
                let mut m = f32::NEG_INFINITY;
                for b in 0..7 {
                    m = m.max(x.data()[(a * 7 + b) * 3 + c]);
                }
                assert_eq!(r.data()[a * 3 + c], m);
            }
        }
    }

    #[test]
    fn max_axis_idempotent_on_replicated_axis() {
        let mut rng = Rng::new(6);
        let base = random(&[5, 4], &mut rng);
        let idx = IndexMatrix::from_rows_unchecked(5, 3, (0..5).flat_map(|i| [i, i, i]).collect());
        let rep = gather_rows(&base, &idx).unwrap();
        assert_eq!(reduce_max_axis(&rep, 1).unwrap(), base);
    }

    #[test]
    fn max_axis_errors() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(reduce_max_axis(&x, 2), Err(Error::BadAxis { .. })));
        let empty = Tensor { shape: vec![2, 0, 3], data: vec![] };
        assert!(matches!(reduce_max_axis(&empty, 1), Err(Error::EmptyAxis { axis: 1 })));
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
