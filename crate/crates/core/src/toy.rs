//! One-dimensional restricted-detector toy problem: functions on a grid over
//! `[0, 1]`, a detector that only reads a masked support, and operators that
//! move or average information into that support.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SeedTree;

pub const DEFAULT_RESOLUTION: usize = 256;

/// Values at the `n` cell centres `(i + 0.5) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("grid function needs at least one cell".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("grid function values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn constant(n: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn resolution(&self) -> usize {
        self.values.len()
    }

    /// `max |r|`.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Riemann sum over `[0, 1]`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportMask {
    cells: Vec<bool>,
}

impl SupportMask {
    pub fn new(cells: Vec<bool>) -> Result<Self> {
        if !cells.iter().any(|&c| c) {
            return Err(Error::Input("support mask must mark at least one cell".into()));
        }
        Ok(Self { cells })
    }

    /// Cells whose centres fall in any of the half-open intervals `[a, b)`.
    pub fn from_intervals(n: usize, intervals: &[(f64, f64)]) -> Result<Self> {
        let cells = (0..n)
            .map(|i| {
                let c = (i as f64 + 0.5) / n as f64;
                intervals.iter().any(|&(a, b)| a <= c && c < b)
            })
            .collect();
        Self::new(cells)
    }

    /// `[0, 0.25) ∪ [0.5, 0.75)`; `n` must be divisible by 4.
    pub fn default_mask(n: usize) -> Result<Self> {
        if n == 0 || n % 4 != 0 {
            return Err(Error::Config(format!("resolution {n} is not divisible by 4")));
        }
        Self::from_intervals(n, &[(0.0, 0.25), (0.5, 0.75)])
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn resolution(&self) -> usize {
        self.cells.len()
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Zeroes every value outside the support.
pub fn restrict(r: &GridFunction, mask: &SupportMask) -> Result<GridFunction> {
    check_dim(mask.resolution(), r.resolution())?;
    Ok(GridFunction {
        values: r
            .values
            .iter()
            .zip(&mask.cells)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ToyOperator {
    /// `g(x) = r(x + shift)`, zero outside `[0, 1]`.
    Moving { shift: f64 },
    /// Constant function equal to the mean of `r` over `[a, b]`.
    Mixing { a: f64, b: f64 },
}

impl ToyOperator {
    pub fn identity() -> Self {
        ToyOperator::Moving { shift: 0.0 }
    }

    fn shift_cells(shift: f64, n: usize) -> i64 {
        (shift * n as f64).round() as i64
    }

    // cells whose centres lie in [a, b]
    fn window(a: f64, b: f64, n: usize) -> Result<std::ops::Range<usize>> {
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::Input(format!("invalid mixing window [{a}, {b}]")));
        }
        let lo = ((a * n as f64 - 0.5).ceil().max(0.0)) as usize;
        let hi = (((b * n as f64 - 0.5).floor() + 1.0).max(0.0) as usize).min(n);
        if lo >= hi {
            return Err(Error::Input(format!("window [{a}, {b}] contains no cell centre")));
        }
        Ok(lo..hi)
    }

    /// Output cell `j` as a weighted sum of input cells.
    fn row(&self, j: usize, n: usize) -> Result<Vec<(usize, f64)>> {
        match *self {
            ToyOperator::Moving { shift } => {
                let src = j as i64 + Self::shift_cells(shift, n);
                Ok(if (0..n as i64).contains(&src) {
                    vec![(src as usize, 1.0)]
                } else {
                    Vec::new()
                })
            }
            ToyOperator::Mixing { a, b } => {
                let w = Self::window(a, b, n)?;
                let weight = 1.0 / w.len() as f64;
                Ok(w.map(|i| (i, weight)).collect())
            }
        }
    }
}

/// Applies one operator.
pub fn apply_operator(op: &ToyOperator, r: &GridFunction) -> Result<GridFunction> {
    let n = r.resolution();
    let values = match *op {
        ToyOperator::Moving { shift } => {
            let k = ToyOperator::shift_cells(shift, n);
            (0..n as i64)
                .map(|j| {
                    let src = j + k;
                    if (0..n as i64).contains(&src) {
                        r.values[src as usize]
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        ToyOperator::Mixing { a, b } => {
            let w = ToyOperator::window(a, b, n)?;
            let len = w.len() as f64;
            let mean = r.values[w].iter().sum::<f64>() / len;
            vec![mean; n]
        }
    };
    GridFunction::new(values)
}

/// Shifts `0, ±0.25`.
pub fn moving_operators() -> Vec<ToyOperator> {
    [0.0, 0.25, -0.25]
        .into_iter()
        .map(|shift| ToyOperator::Moving { shift })
        .collect()
}

/// Every window `[k / 2^j, (k + 1) / 2^j]` down to single cells; `n` must be
/// a power of two.
pub fn dyadic_mixing_operators(n: usize) -> Result<Vec<ToyOperator>> {
    if !n.is_power_of_two() {
        return Err(Error::Config(format!("resolution {n} is not a power of two")));
    }
    let mut ops = Vec::with_capacity(2 * n - 1);
    let mut parts = 1usize;
    while parts <= n {
        for k in 0..parts {
            ops.push(ToyOperator::Mixing {
                a: k as f64 / parts as f64,
                b: (k + 1) as f64 / parts as f64,
            });
        }
        parts *= 2;
    }
    Ok(ops)
}

/// The restricted detector's largest response over the operator set.
pub fn detector_response(r: &GridFunction, mask: &SupportMask, ops: &[ToyOperator]) -> Result<f64> {
    let mut worst = 0.0f64;
    for op in ops {
        worst = worst.max(restrict(&apply_operator(op, r)?, mask)?.sup_norm());
    }
    Ok(worst)
}

/// Whether `r` lies in the annihilator set: larger than `sigma` yet accepted
/// by every operator-restricted check.
pub fn is_annihilator(r: &GridFunction, sigma: f64, mask: &SupportMask, ops: &[ToyOperator]) -> Result<bool> {
    Ok(r.sup_norm() > sigma && detector_response(r, mask, ops)? <= sigma)
}

/// Cells that some operator copies, at full weight and alone, into an
/// observed cell. If every cell is covered, any function exceeding `sigma`
/// somewhere is caught.
pub fn coverage(mask: &SupportMask, ops: &[ToyOperator]) -> Result<Vec<bool>> {
    let n = mask.resolution();
    let mut covered = vec![false; n];
    for op in ops {
        for j in (0..n).filter(|&j| mask.cells[j]) {
            if let [(i, w)] = op.row(j, n)?[..] {
                if w == 1.0 {
                    covered[i] = true;
                }
            }
        }
    }
    Ok(covered)
}

/// Cells no operator ever brings into the support, with any weight.
pub fn blind_cells(mask: &SupportMask, ops: &[ToyOperator]) -> Result<Vec<bool>> {
    let n = mask.resolution();
    let mut seen = vec![false; n];
    for op in ops {
        for j in (0..n).filter(|&j| mask.cells[j]) {
            for (i, w) in op.row(j, n)? {
                if w != 0.0 {
                    seen[i] = true;
                }
            }
        }
    }
    Ok(seen.into_iter().map(|s| !s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub random_candidates: usize,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            random_candidates: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnihilatorReport {
    pub empty: bool,
    pub witness: Option<GridFunction>,
    pub candidates_tried: usize,
    /// Every cell copied into the support by some operator.
    pub fully_covered: bool,
}

/// Searches for a function with `|r| > sigma` that every operator-restricted
/// check accepts. Candidates: a function on the blind cells, single spikes,
/// alternating-sign patterns, and random functions concentrated off the
/// support.
pub fn annihilator_empty(
    sigma: f64,
    mask: &SupportMask,
    ops: &[ToyOperator],
    budget: &SearchBudget,
) -> Result<AnnihilatorReport> {
    if !(sigma > 0.0) {
        return Err(Error::Input("detector threshold must be positive".into()));
    }
    let n = mask.resolution();
    let height = 2.0 * sigma;
    let mut tried = 0usize;
    let mut check = |values: Vec<f64>| -> Result<Option<GridFunction>> {
        tried += 1;
        let r = GridFunction::new(values)?;
        Ok(is_annihilator(&r, sigma, mask, ops)?.then_some(r))
    };

    let mut witness = None;
    let blind = blind_cells(mask, ops)?;
    if blind.iter().any(|&b| b) {
        witness = check(blind.iter().map(|&b| if b { height } else { 0.0 }).collect())?;
    }
    if witness.is_none() {
        for i in 0..n {
            let mut v = vec![0.0; n];
            v[i] = height;
            if let Some(w) = check(v)? {
                witness = Some(w);
                break;
            }
        }
    }
    if witness.is_none() {
        let alternating = |only_off: bool| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    if only_off && mask.cells[i] {
                        0.0
                    } else if i % 2 == 0 {
                        height
                    } else {
                        -height
                    }
                })
                .collect()
        };
        for only_off in [false, true] {
            if let Some(w) = check(alternating(only_off))? {
                witness = Some(w);
                break;
            }
        }
    }
    if witness.is_none() {
        let mut rng = SeedTree::new(budget.seed).stream("toy/annihilator");
        for _ in 0..budget.random_candidates {
            let off_only = rng.random_bool(0.75);
            let mut v: Vec<f64> = (0..n)
                .map(|i| {
                    if off_only && mask.cells[i] {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if peak == 0.0 {
                continue;
            }
            for x in &mut v {
                *x *= height / peak;
            }
            if let Some(w) = check(v)? {
                witness = Some(w);
                break;
            }
        }
    }
    let fully_covered = coverage(mask, ops)?.iter().all(|&c| c);
    Ok(AnnihilatorReport {
        empty: witness.is_none(),
        witness,
        candidates_tried: tried,
        fully_covered,
    })
}

/// CSV with columns `x,value` at the cell centres.
pub fn write_function_csv<W: std::io::Write>(r: &GridFunction, mut w: W) -> Result<()> {
    writeln!(w, "x,value")?;
    let n = r.resolution() as f64;
    for (i, v) in r.values.iter().enumerate() {
        writeln!(w, "{:.16e},{:.16e}", (i as f64 + 0.5) / n, v)?;
    }
    Ok(())
}
