//! Independent checks for the grouped layer: a naive per-adapter loop for the
//! forward pass and central finite differences for every gradient.
//!
//! Nothing here calls into the grouped implementation; loops are written out
//! directly so a shared bug cannot hide on both sides.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    forward_unpadded, grouped_backward, grouped_forward, random_spec, Gradients, GroupedLayerSpec,
    Mat, MathError,
};

/// One output row: `x W + scale * (x A) B`.
fn naive_row(spec: &GroupedLayerSpec<f64>, adapter: usize, x: &[f64]) -> Vec<f64> {
    let (k, n) = (spec.w.rows(), spec.w.cols());
    let ad = &spec.adapters[adapter];
    let r = ad.a.cols();
    let mut s = vec![0.0; r];
    for (j, sj) in s.iter_mut().enumerate() {
        for (p, &xp) in x.iter().enumerate().take(k) {
            *sj += xp * ad.a.get(p, j);
        }
    }
    (0..n)
        .map(|c| {
            let mut base = 0.0;
            for (p, &xp) in x.iter().enumerate().take(k) {
                base += xp * spec.w.get(p, c);
            }
            let mut low = 0.0;
            for (j, &sj) in s.iter().enumerate() {
                low += sj * ad.b.get(j, c);
            }
            base + ad.scale * low
        })
        .collect()
}

/// `Y_i = X_i W + scale_i X_i A_i B_i`, one adapter and one row at a time.
pub fn naive_forward(spec: &GroupedLayerSpec<f64>, x: &Mat<f64>) -> Mat<f64> {
    let mut y = Mat::zeros(x.rows(), spec.w.cols());
    let mut t = 0;
    for (i, &l) in spec.tokens.iter().enumerate() {
        for _ in 0..l {
            let row = naive_row(spec, i, x.row(t));
            y.row_mut(t).copy_from_slice(&row);
            t += 1;
        }
    }
    y
}

/// `max |a - b| / max |b|`, or the absolute deviation when `b` is all zero.
pub fn rel_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        dev
    } else {
        dev / scale
    }
}

/// `0.5 * ||Y||^2` restricted to the given token rows.
fn partial_loss(spec: &GroupedLayerSpec<f64>, x: &Mat<f64>, rows: &[(usize, usize)]) -> f64 {
    rows.iter()
        .map(|&(t, adapter)| {
            naive_row(spec, adapter, x.row(t))
                .iter()
                .map(|v| 0.5 * v * v)
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradDeviation {
    pub dx: f64,
    pub da: f64,
    pub db: f64,
}

impl GradDeviation {
    pub fn max(&self) -> f64 {
        self.dx.max(self.da).max(self.db)
    }
}

/// Which coordinates the finite-difference check visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most this many random coordinates per tensor.
    Sample(usize),
}

fn coords<R: Rng>(rows: usize, cols: usize, cov: Coverage, rng: &mut R) -> Vec<(usize, usize)> {
    match cov {
        Coverage::All => (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .collect(),
        Coverage::Sample(m) if m >= rows * cols => coords(rows, cols, Coverage::All, rng),
        Coverage::Sample(m) => (0..m)
            .map(|_| (rng.random_range(0..rows), rng.random_range(0..cols)))
            .collect(),
    }
}

/// Compares analytic gradients of `0.5 * ||Y||^2` (so `dY = Y`) against
/// central differences with step `h`. Only the rows a parameter influences
/// enter each difference quotient; the other rows are constant in it.
pub fn finite_difference_check<R: Rng>(
    spec: &GroupedLayerSpec<f64>,
    x: &Mat<f64>,
    grads: &Gradients<f64>,
    h: f64,
    coverage: Coverage,
    rng: &mut R,
) -> GradDeviation {
    let ranges = spec.token_ranges();
    let owner: Vec<usize> = ranges
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.clone().map(move |_| i))
        .collect();

    let central = |f: &mut dyn FnMut(f64) -> f64, v0: f64| (f(v0 + h) - f(v0 - h)) / (2.0 * h);

    let mut fd_vals = Vec::new();
    let mut an_vals = Vec::new();
    let mut dev = GradDeviation::default();

    // dX: entry (t, c) only moves row t.
    let mut xp = x.clone();
    for (t, c) in coords(x.rows(), x.cols(), coverage, rng) {
        let v0 = x.get(t, c);
        let mut f = |v: f64| {
            xp.set(t, c, v);
            partial_loss(spec, &xp, &[(t, owner[t])])
        };
        fd_vals.push(central(&mut f, v0));
        xp.set(t, c, v0);
        an_vals.push(grads.dx.get(t, c));
    }
    dev.dx = rel_deviation(&an_vals, &fd_vals);

    let mut da_fd = Vec::new();
    let mut da_an = Vec::new();
    let mut db_fd = Vec::new();
    let mut db_an = Vec::new();
    for (i, rows) in ranges.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let touched: Vec<(usize, usize)> = rows.clone().map(|t| (t, i)).collect();
        let (ga, gb) = grads.adapters[i].trimmed();
        let ad = &spec.adapters[i];
        let mut sp = spec.clone();
        for (p, q) in coords(ad.a.rows(), ad.a.cols(), coverage, rng) {
            let v0 = ad.a.get(p, q);
            let mut f = |v: f64| {
                sp.adapters[i].a.set(p, q, v);
                partial_loss(&sp, x, &touched)
            };
            da_fd.push(central(&mut f, v0));
            sp.adapters[i].a.set(p, q, v0);
            da_an.push(ga.get(p, q));
        }
        for (p, q) in coords(ad.b.rows(), ad.b.cols(), coverage, rng) {
            let v0 = ad.b.get(p, q);
            let mut f = |v: f64| {
                sp.adapters[i].b.set(p, q, v);
                partial_loss(&sp, x, &touched)
            };
            db_fd.push(central(&mut f, v0));
            sp.adapters[i].b.set(p, q, v0);
            db_an.push(gb.get(p, q));
        }
    }
    dev.da = rel_deviation(&da_an, &da_fd);
    dev.db = rel_deviation(&db_an, &db_fd);
    dev
}

/// Shape of a seeded batch of random grouped layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckPlan {
    pub seed: u64,
    pub specs: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Ranks cycled across adapters after a per-spec shuffle.
    pub ranks: Vec<usize>,
    /// Token counts drawn per adapter.
    pub tokens: Vec<usize>,
    pub adapters: std::ops::RangeInclusive<usize>,
    pub fd_step: f64,
    pub coverage_sample: Option<usize>,
}

impl Default for CheckPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            specs: 200,
            d_in: 64,
            d_out: 64,
            ranks: vec![16, 32, 64],
            tokens: vec![0, 1, 2, 3, 5, 8],
            adapters: 2..=5,
            fd_step: 1e-5,
            coverage_sample: Some(16),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub specs: usize,
    pub max_forward_dev: f64,
    pub max_grad_dev: f64,
    /// Specs whose padded and unpadded outputs differ in any bit.
    pub padding_mismatches: usize,
}

/// Runs forward against the naive loop, gradients against central
/// differences of `0.5 * ||Y||^2`, and padded against unpadded outputs.
pub fn check_random_specs(plan: &CheckPlan) -> Result<CheckReport, MathError> {
    if plan.ranks.is_empty()
        || plan.tokens.is_empty()
        || plan.adapters.is_empty()
        || plan.d_in == 0
        || plan.d_out == 0
    {
        return Err(MathError::Dimension {
            adapter: 0,
            what: "check plan needs ranks, token counts, adapters and non-zero dims".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut report = CheckReport {
        specs: plan.specs,
        max_forward_dev: 0.0,
        max_grad_dev: 0.0,
        padding_mismatches: 0,
    };
    let coverage = plan.coverage_sample.map_or(Coverage::All, Coverage::Sample);
    for _ in 0..plan.specs {
        let n = rng.random_range(plan.adapters.clone());
        let offset = rng.random_range(0..plan.ranks.len());
        let ranks: Vec<usize> = (0..n)
            .map(|i| plan.ranks[(i + offset) % plan.ranks.len()])
            .collect();
        let tokens: Vec<usize> = (0..n)
            .map(|_| plan.tokens[rng.random_range(0..plan.tokens.len())])
            .collect();
        let (spec, x) = random_spec(&mut rng, plan.d_in, plan.d_out, &ranks, &tokens);
        let (y, cache) = grouped_forward(&spec, &x)?;
        report.max_forward_dev = report.max_forward_dev.max(rel_deviation(
            y.as_slice(),
            naive_forward(&spec, &x).as_slice(),
        ));
        let unpadded = forward_unpadded(&spec, &x)?;
        if y.as_slice()
            .iter()
            .zip(unpadded.as_slice())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            report.padding_mismatches += 1;
        }
        let grads = grouped_backward(&spec, &cache, &y)?;
        let dev = finite_difference_check(&spec, &x, &grads, plan.fd_step, coverage, &mut rng);
        report.max_grad_dev = report.max_grad_dev.max(dev.max());
    }
    Ok(report)
}
