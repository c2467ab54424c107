//! Host-side reference for a linear layer with many grouped LoRA adapters.
//!
//! Tokens from all adapters are concatenated along the batch dimension. The
//! frozen base product `X W` runs once over the whole batch; the adapter path
//! walks a schedule table of `(adapter, block)` pairs, computes `S_i = X_i A_i`
//! in a rank-padded layout and fuses `scale_i * S_i B_i` into the base output.
//! Backward reuses the cached `S` and produces all weight gradients in two
//! batched passes regardless of adapter count.

pub mod oracle;

use std::ops::Range;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("adapter {adapter}: {what}")]
    Dimension { adapter: usize, what: String },
    #[error("input has {got} rows, token ranges cover {want}")]
    RowMismatch { got: usize, want: usize },
    #[error("block size must be >= 1")]
    BlockSize,
    #[error("cache does not match spec: {0}")]
    CacheMismatch(String),
    #[error("at least one adapter is required")]
    NoAdapters,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Self {
        Self {
            rows: r.len(),
            cols: self.cols,
            data: self.data[r.start * self.cols..r.end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Copies into a `rows x cols` matrix, zero-filling anything outside `self`.
    pub fn padded(&self, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| {
            if i < self.rows && j < self.cols {
                self.get(i, j)
            } else {
                T::zero()
            }
        })
    }

    pub fn cast<U: Float>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }
}

/// `out[i, :] (+)= sum_p a[i, p] * b[p, :]`, accumulating in increasing `p`.
///
/// Every output element is summed in the same order whatever the inner
/// dimension, so trailing zero rows in `b` leave results bit-identical.
fn gemm_rows<T: Float>(
    a: &Mat<T>,
    a_rows: Range<usize>,
    b: &Mat<T>,
    out: &mut Mat<T>,
    out_row0: usize,
) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.cols, b.cols);
    for (o, i) in a_rows.enumerate() {
        let arow = a.row(i);
        let orow = out.row_mut(out_row0 + o);
        for (p, &ap) in arow.iter().enumerate() {
            let brow = b.row(p);
            for (acc, &bv) in orow.iter_mut().zip(brow) {
                *acc = *acc + ap * bv;
            }
        }
    }
}

pub fn matmul<T: Float>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm_rows(a, 0..a.rows, b, &mut out, 0);
    out
}

/// One low-rank adapter: `A` is `k x r`, `B` is `r x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub scale: T,
}

impl<T: Float> Adapter<T> {
    pub fn rank(&self) -> usize {
        self.a.cols
    }

    /// Adapter with `alpha = 2r`, i.e. scale 2.
    pub fn with_default_scale(a: Mat<T>, b: Mat<T>) -> Self {
        let two = T::one() + T::one();
        Self { a, b, scale: two }
    }
}

/// Frozen base weight plus grouped adapters and their token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedLayerSpec<T> {
    pub w: Mat<T>,
    pub adapters: Vec<Adapter<T>>,
    /// Tokens per adapter; adapter `i` owns a contiguous slice of the batch.
    pub tokens: Vec<usize>,
}

impl<T: Float> GroupedLayerSpec<T> {
    pub fn d_in(&self) -> usize {
        self.w.rows
    }

    pub fn d_out(&self) -> usize {
        self.w.cols
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.iter().sum()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.adapters.iter().map(Adapter::rank).collect()
    }

    pub fn token_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.tokens
            .iter()
            .map(|&l| {
                let r = start..start + l;
                start += l;
                r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), MathError> {
        if self.adapters.is_empty() {
            return Err(MathError::NoAdapters);
        }
        let (k, n) = (self.d_in(), self.d_out());
        if self.tokens.len() != self.adapters.len() {
            return Err(MathError::Dimension {
                adapter: self.tokens.len().min(self.adapters.len()),
                what: format!(
                    "{} token counts for {} adapters",
                    self.tokens.len(),
                    self.adapters.len()
                ),
            });
        }
        for (i, ad) in self.adapters.iter().enumerate() {
            let r = ad.rank();
            let err = |what: String| Err(MathError::Dimension { adapter: i, what });
            if ad.a.rows != k {
                return err(format!("A has {} rows, expected d_in {k}", ad.a.rows));
            }
            if ad.b.rows != r || ad.b.cols != n {
                return err(format!(
                    "B is {}x{}, expected {r}x{n}",
                    ad.b.rows, ad.b.cols
                ));
            }
            if r == 0 || r > k.min(n) {
                return err(format!("rank {r} outside 1..={}", k.min(n)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub adapter_idx: usize,
    pub block_idx: usize,
}

/// Flat dispatch list of `(adapter, block)` pairs over the concatenated batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTable {
    pub entries: Vec<ScheduleEntry>,
    pub block_size: usize,
    starts: Vec<usize>,
    ends: Vec<usize>,
}

impl ScheduleTable {
    /// Token rows covered by an entry; boundary blocks are truncated (masked).
    pub fn rows(&self, e: &ScheduleEntry) -> Range<usize> {
        let start = self.starts[e.adapter_idx] + e.block_idx * self.block_size;
        start..(start + self.block_size).min(self.ends[e.adapter_idx])
    }

    /// Number of live tokens in an entry's block.
    pub fn effective_tokens(&self, e: &ScheduleEntry) -> usize {
        self.rows(e).len()
    }
}

pub fn build_schedule(tokens: &[usize], block_size: usize) -> Result<ScheduleTable, MathError> {
    if block_size == 0 {
        return Err(MathError::BlockSize);
    }
    let mut entries = Vec::new();
    let mut starts = Vec::with_capacity(tokens.len());
    let mut ends = Vec::with_capacity(tokens.len());
    let mut offset = 0;
    for (adapter_idx, &l) in tokens.iter().enumerate() {
        starts.push(offset);
        offset += l;
        ends.push(offset);
        for block_idx in 0..l.div_ceil(block_size) {
            entries.push(ScheduleEntry {
                adapter_idx,
                block_idx,
            });
        }
    }
    Ok(ScheduleTable {
        entries,
        block_size,
        starts,
        ends,
    })
}

/// Adapters stacked to a common rank `r_max`; padding is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedAdapters<T> {
    /// `Z` matrices of shape `k x r_max`.
    pub a: Vec<Mat<T>>,
    /// `Z` matrices of shape `r_max x n`.
    pub b: Vec<Mat<T>>,
    pub scales: Vec<T>,
    /// Valid rank of each adapter; columns/rows at or beyond it are masked.
    pub ranks: Vec<usize>,
    pub r_max: usize,
}

pub fn pad_ranks<T: Float>(adapters: &[Adapter<T>]) -> PaddedAdapters<T> {
    let r_max = adapters.iter().map(Adapter::rank).max().unwrap_or(0);
    PaddedAdapters {
        a: adapters
            .iter()
            .map(|ad| ad.a.padded(ad.a.rows, r_max))
            .collect(),
        b: adapters
            .iter()
            .map(|ad| ad.b.padded(r_max, ad.b.cols))
            .collect(),
        scales: adapters.iter().map(|ad| ad.scale).collect(),
        ranks: adapters.iter().map(Adapter::rank).collect(),
        r_max,
    }
}

/// Intermediates kept for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    /// Unscaled `S_i = X_i A_i` for every token, `L_total x r_max`.
    pub s: Mat<T>,
    pub x: Mat<T>,
    pub r_max: usize,
}

fn check_input<T: Float>(spec: &GroupedLayerSpec<T>, x: &Mat<T>) -> Result<(), MathError> {
    spec.validate()?;
    if x.rows != spec.total_tokens() {
        return Err(MathError::RowMismatch {
            got: x.rows,
            want: spec.total_tokens(),
        });
    }
    if x.cols != spec.d_in() {
        return Err(MathError::Dimension {
            adapter: 0,
            what: format!("X has {} columns, expected d_in {}", x.cols, spec.d_in()),
        });
    }
    Ok(())
}

/// Grouped forward over the padded layout, block by block.
pub fn grouped_forward<T: Float>(
    spec: &GroupedLayerSpec<T>,
    x: &Mat<T>,
) -> Result<(Mat<T>, ForwardCache<T>), MathError> {
    grouped_forward_blocked(spec, x, DEFAULT_BLOCK_SIZE)
}

pub fn grouped_forward_blocked<T: Float>(
    spec: &GroupedLayerSpec<T>,
    x: &Mat<T>,
    block_size: usize,
) -> Result<(Mat<T>, ForwardCache<T>), MathError> {
    check_input(spec, x)?;
    let table = build_schedule(&spec.tokens, block_size)?;
    let padded = pad_ranks(&spec.adapters);
    let n = spec.d_out();

    // Base path over the whole concatenated batch.
    let y_base = matmul(x, &spec.w);

    // Adapter path: S = X_i A_i per block, then Y = scale * S B_i + Y_base.
    let mut s = Mat::zeros(x.rows, padded.r_max);
    let mut y = y_base;
    let mut delta = Mat::zeros(table.block_size.min(x.rows.max(1)), n);
    for e in &table.entries {
        let rows = table.rows(e);
        let i = e.adapter_idx;
        gemm_rows(x, rows.clone(), &padded.a[i], &mut s, rows.start);
        let m = rows.len();
        delta.data[..m * n].iter_mut().for_each(|v| *v = T::zero());
        gemm_rows(&s, rows.clone(), &padded.b[i], &mut delta, 0);
        let scale = padded.scales[i];
        for (o, t) in rows.enumerate() {
            let drow = &delta.data[o * n..(o + 1) * n];
            for (yv, &dv) in y.row_mut(t).iter_mut().zip(drow) {
                *yv = *yv + scale * dv;
            }
        }
    }
    let cache = ForwardCache {
        s,
        x: x.clone(),
        r_max: padded.r_max,
    };
    Ok((y, cache))
}

/// Same computation with each adapter at its own rank (no padding).
pub fn forward_unpadded<T: Float>(
    spec: &GroupedLayerSpec<T>,
    x: &Mat<T>,
) -> Result<Mat<T>, MathError> {
    check_input(spec, x)?;
    let mut y = matmul(x, &spec.w);
    for (ad, rows) in spec.adapters.iter().zip(spec.token_ranges()) {
        let mut s = Mat::zeros(rows.len(), ad.rank());
        gemm_rows(x, rows.clone(), &ad.a, &mut s, 0);
        let delta = matmul(&s, &ad.b);
        for (o, t) in rows.enumerate() {
            for (yv, &dv) in y.row_mut(t).iter_mut().zip(delta.row(o)) {
                *yv = *yv + ad.scale * dv;
            }
        }
    }
    Ok(y)
}

/// Adapter-path output `scale_i * S_i B_i` alone, before the base add.
pub fn adapter_delta<T: Float>(
    spec: &GroupedLayerSpec<T>,
    x: &Mat<T>,
) -> Result<Mat<T>, MathError> {
    check_input(spec, x)?;
    let mut out = Mat::zeros(x.rows, spec.d_out());
    for (ad, rows) in spec.adapters.iter().zip(spec.token_ranges()) {
        let mut s = Mat::zeros(rows.len(), ad.rank());
        gemm_rows(x, rows.clone(), &ad.a, &mut s, 0);
        let d = matmul(&s, &ad.b);
        for (o, t) in rows.enumerate() {
            for (ov, &dv) in out.row_mut(t).iter_mut().zip(d.row(o)) {
                *ov = ad.scale * dv;
            }
        }
    }
    Ok(out)
}

/// Gradients for one adapter in the padded layout (`k x r_max`, `r_max x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<T> {
    pub da: Mat<T>,
    pub db: Mat<T>,
    pub rank: usize,
}

impl<T: Float> AdapterGrad<T> {
    /// Gradients restricted to the adapter's own rank.
    pub fn trimmed(&self) -> (Mat<T>, Mat<T>) {
        let r = self.rank;
        let da = Mat::from_fn(self.da.rows, r, |i, j| self.da.get(i, j));
        let db = Mat::from_fn(r, self.db.cols, |i, j| self.db.get(i, j));
        (da, db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub dx: Mat<T>,
    pub adapters: Vec<AdapterGrad<T>>,
}

/// Backward for `Y = X W + scale * (X A) B` with frozen `W`.
///
/// Pass one walks the schedule table and produces `dS = scale * dY B^T` and
/// `dX = dY W^T + dS A^T`. Pass two produces every `dA = X^T dS` and
/// `dB = scale * S^T dY` from the cached, unscaled `S`.
pub fn grouped_backward<T: Float>(
    spec: &GroupedLayerSpec<T>,
    cache: &ForwardCache<T>,
    dy: &Mat<T>,
) -> Result<Gradients<T>, MathError> {
    check_input(spec, &cache.x)?;
    let padded = pad_ranks(&spec.adapters);
    if cache.r_max != padded.r_max || cache.s.cols != padded.r_max || cache.s.rows != cache.x.rows {
        return Err(MathError::CacheMismatch(format!(
            "cached S is {}x{}, spec needs {}x{}",
            cache.s.rows, cache.s.cols, cache.x.rows, padded.r_max
        )));
    }
    if dy.rows != cache.x.rows || dy.cols != spec.d_out() {
        return Err(MathError::CacheMismatch(format!(
            "dY is {}x{}, expected {}x{}",
            dy.rows,
            dy.cols,
            cache.x.rows,
            spec.d_out()
        )));
    }
    let table = build_schedule(&spec.tokens, DEFAULT_BLOCK_SIZE)?;
    let r_max = padded.r_max;
    let x = &cache.x;

    // Pass 1: input gradients.
    let mut dx = matmul(dy, &spec.w.transpose());
    let mut ds = Mat::zeros(x.rows, r_max);
    let bt: Vec<Mat<T>> = padded.b.iter().map(Mat::transpose).collect();
    let at: Vec<Mat<T>> = padded.a.iter().map(Mat::transpose).collect();
    for e in &table.entries {
        let rows = table.rows(e);
        let i = e.adapter_idx;
        gemm_rows(dy, rows.clone(), &bt[i], &mut ds, rows.start);
        for t in rows.clone() {
            let scale = padded.scales[i];
            ds.row_mut(t).iter_mut().for_each(|v| *v = scale * *v);
        }
        let start = rows.start;
        gemm_rows(&ds, rows, &at[i], &mut dx, start);
    }

    // Pass 2: weight gradients, one grouped product per operand.
    let ranges = spec.token_ranges();
    let adapters = ranges
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            let xt = x.slice_rows(rows.clone()).transpose();
            let da = matmul(&xt, &ds.slice_rows(rows.clone()));
            let st = cache.s.slice_rows(rows.clone()).transpose();
            let scale = padded.scales[i];
            let db = matmul(&st, &dy.slice_rows(rows.clone())).map(|v| scale * v);
            AdapterGrad {
                da,
                db,
                rank: padded.ranks[i],
            }
        })
        .collect();
    Ok(Gradients { dx, adapters })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub base_flops: u64,
    pub useful_lora_flops: u64,
    pub wide_lora_flops: u64,
    pub waste_ratio: f64,
}

/// FLOPs of the adapter path for a grouped vs. a single wide GEMM formulation.
pub fn flop_accounting(tokens: &[usize], ranks: &[usize], d_in: usize, d_out: usize) -> FlopReport {
    let kn = (d_in + d_out) as u64;
    let l_total: u64 = tokens.iter().map(|&l| l as u64).sum();
    let r_total: u64 = ranks.iter().map(|&r| r as u64).sum();
    let useful: u64 = tokens
        .iter()
        .zip(ranks)
        .map(|(&l, &r)| 2 * l as u64 * r as u64 * kn)
        .sum();
    let wide = 2 * l_total * r_total * kn;
    FlopReport {
        base_flops: 2 * l_total * d_in as u64 * d_out as u64,
        useful_lora_flops: useful,
        wide_lora_flops: wide,
        waste_ratio: if useful == 0 {
            1.0
        } else {
            wide as f64 / useful as f64
        },
    }
}

pub fn flop_report<T: Float>(spec: &GroupedLayerSpec<T>) -> FlopReport {
    flop_accounting(&spec.tokens, &spec.ranks(), spec.d_in(), spec.d_out())
}

/// Random spec with Gaussian entries scaled by `1/sqrt(fan_in)`, plus an input batch.
pub fn random_spec<R: Rng>(
    rng: &mut R,
    d_in: usize,
    d_out: usize,
    ranks: &[usize],
    tokens: &[usize],
) -> (GroupedLayerSpec<f64>, Mat<f64>) {
    let mut gauss = |rows, cols, s: f64| {
        Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * s
        })
    };
    let w = gauss(d_in, d_out, 1.0 / (d_in as f64).sqrt());
    let adapters = ranks
        .iter()
        .map(|&r| {
            Adapter::with_default_scale(
                gauss(d_in, r, 1.0 / (d_in as f64).sqrt()),
                gauss(r, d_out, 1.0 / (r as f64).sqrt()),
            )
        })
        .collect();
    let l: usize = tokens.iter().sum();
    let x = gauss(l, d_in, 1.0);
    (
        GroupedLayerSpec {
            w,
            adapters,
            tokens: tokens.to_vec(),
        },
        x,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entries(t: &ScheduleTable) -> Vec<(usize, usize)> {
        t.entries
            .iter()
            .map(|e| (e.adapter_idx, e.block_idx))
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let t = build_schedule(&[4, 4], 4).unwrap();
        assert_eq!(entries(&t), vec![(0, 0), (1, 0)]);

        let t = build_schedule(&[5, 3], 4).unwrap();
        assert_eq!(entries(&t), vec![(0, 0), (0, 1), (1, 0)]);
        let masks: Vec<_> = t.entries.iter().map(|e| t.effective_tokens(e)).collect();
        assert_eq!(masks, vec![4, 1, 3]);

        let t = build_schedule(&[0, 7], 4).unwrap();
        assert_eq!(entries(&t), vec![(1, 0), (1, 1)]);
        assert_eq!(t.rows(&t.entries[1]), 4..7);

        assert_eq!(build_schedule(&[1], 0), Err(MathError::BlockSize));
    }

    #[test]
    fn zero_adapters_give_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut spec, x) = random_spec(&mut rng, 16, 12, &[4, 8], &[3, 5]);
        for ad in &mut spec.adapters {
            ad.a = Mat::zeros(ad.a.rows(), ad.a.cols());
        }
        let (y, cache) = grouped_forward(&spec, &x).unwrap();
        assert_eq!(y, matmul(&x, &spec.w));
        assert!(cache.s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adapter_triples_input() {
        let k = 6;
        let x = Mat::from_fn(4, k, |i, j| (i * 7 + j) as f64 * 0.25 - 1.0);
        let spec = GroupedLayerSpec {
            w: Mat::identity(k),
            adapters: vec![Adapter::with_default_scale(
                Mat::identity(k),
                Mat::identity(k),
            )],
            tokens: vec![4],
        };
        let (y, _) = grouped_forward(&spec, &x).unwrap();
        assert_eq!(y, x.map(|v| 3.0 * v));
    }

    #[test]
    fn padded_cache_columns_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (spec, x) = random_spec(&mut rng, 16, 16, &[2, 8, 4], &[3, 2, 4]);
        let (_, cache) = grouped_forward(&spec, &x).unwrap();
        for (rows, r) in spec.token_ranges().into_iter().zip(spec.ranks()) {
            for t in rows {
                assert!(cache.s.row(t)[r..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn pad_ranks_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (spec, _) = random_spec(&mut rng, 64, 64, &[16, 32], &[1, 1]);
        let p = pad_ranks(&spec.adapters);
        assert_eq!(p.r_max, 32);
        assert_eq!(p.ranks, vec![16, 32]);
        assert!((0..64).all(|i| (16..32).all(|j| p.a[0].get(i, j) == 0.0)));

        let (spec, _) = random_spec(&mut rng, 8, 8, &[4, 4], &[1, 1]);
        let p = pad_ranks(&spec.adapters);
        assert_eq!(p.a[0], spec.adapters[0].a);
        assert_eq!(p.b[1], spec.adapters[1].b);
    }

    #[test]
    fn dimension_mismatch_names_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut spec, x) = random_spec(&mut rng, 8, 8, &[2, 2], &[1, 1]);
        spec.adapters[1].b = Mat::zeros(3, 8);
        let err = grouped_forward(&spec, &x).unwrap_err();
        assert!(
            matches!(err, MathError::Dimension { adapter: 1, .. }),
            "{err:?}"
        );

        let (spec, _) = random_spec(&mut rng, 8, 8, &[2], &[3]);
        let x = Mat::zeros(2, 8);
        assert_eq!(
            grouped_forward(&spec, &x).unwrap_err(),
            MathError::RowMismatch { got: 2, want: 3 }
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (spec, x) = random_spec(&mut rng, 8, 6, &[2, 3], &[2, 3]);
        let (_, cache) = grouped_forward(&spec, &x).unwrap();
        let g = grouped_backward(&spec, &cache, &Mat::zeros(5, 6)).unwrap();
        assert_eq!(g.dx.max_abs(), 0.0);
        for a in &g.adapters {
            assert_eq!(a.da.max_abs(), 0.0);
            assert_eq!(a.db.max_abs(), 0.0);
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (spec, x) = random_spec(&mut rng, 8, 6, &[2, 3], &[2, 3]);
        let (other, ox) = random_spec(&mut rng, 8, 6, &[4, 3], &[2, 3]);
        let (_, cache) = grouped_forward(&other, &ox).unwrap();
        let dy = Mat::zeros(x.rows(), 6);
        assert!(matches!(
            grouped_backward(&spec, &cache, &dy),
            Err(MathError::CacheMismatch(_))
        ));
    }

    #[test]
    fn flop_examples() {
        let f = flop_accounting(&[4, 4], &[16, 32], 64, 64);
        assert_eq!(f.useful_lora_flops, 49152);
        assert_eq!(f.wide_lora_flops, 98304);
        assert_eq!(f.waste_ratio, 2.0);
        assert_eq!(f.base_flops, 2 * 8 * 64 * 64);
        assert_eq!(flop_accounting(&[7], &[8], 16, 16).waste_ratio, 1.0);
        for n in 1..6 {
            let f = flop_accounting(&vec![5; n], &vec![16; n], 32, 48);
            assert_eq!(f.waste_ratio, n as f64);
        }
    }

    #[test]
    fn single_precision_tracks_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (spec, x) = random_spec(&mut rng, 64, 64, &[16, 32], &[3, 5]);
        let (y64, _) = grouped_forward(&spec, &x).unwrap();
        let spec32 = GroupedLayerSpec {
            w: spec.w.cast::<f32>(),
            adapters: spec
                .adapters
                .iter()
                .map(|a| Adapter {
                    a: a.a.cast(),
                    b: a.b.cast(),
                    scale: 2.0f32,
                })
                .collect(),
            tokens: spec.tokens.clone(),
        };
        let (y32, _) = grouped_forward(&spec32, &x.cast::<f32>()).unwrap();
        let scale = y64.max_abs();
        for (a, b) in y64.as_slice().iter().zip(y32.as_slice()) {
            assert!((a - f64::from(*b)).abs() / scale < 1e-4);
        }
    }
}
