//! Rank and injectivity of stacked linear maps, and materialized Jacobians of
//! decoder upsampling blocks.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archs::{ModelGraph, UpSampler};
use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::tensor::{Mode, ParameterStore, Tape, Tensor};

/// Relative singular-value threshold.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Component maps sharing a column count and their vertical stack.
#[derive(Clone, Debug)]
pub struct LinearMapSet {
    pub maps: Vec<DMatrix<f64>>,
    pub stacked: DMatrix<f64>,
}

impl LinearMapSet {
    pub fn cols(&self) -> usize {
        self.stacked.ncols()
    }

    pub fn rows(&self) -> usize {
        self.stacked.nrows()
    }
}

pub fn stack_linear_maps(maps: &[DMatrix<f64>]) -> Result<LinearMapSet> {
    let first = maps.first().ok_or_else(|| Error::shape("no maps to stack"))?;
    let n = first.ncols();
    if let Some(bad) = maps.iter().find(|m| m.ncols() != n) {
        return Err(Error::shape(format!("ragged columns: {} vs {n}", bad.ncols())));
    }
    let m: usize = maps.iter().map(|a| a.nrows()).sum();
    let mut stacked = DMatrix::zeros(m, n);
    let mut r = 0;
    for a in maps {
        stacked.rows_mut(r, a.nrows()).copy_from(a);
        r += a.nrows();
    }
    Ok(LinearMapSet {
        maps: maps.to_vec(),
        stacked,
    })
}

fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("matrix entries".into()))
    }
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * max).count()
}

/// Dimension of the span of the rows, by modified Gram–Schmidt with one
/// re-orthogonalization pass. A row is counted when its residual exceeds
/// `tol` times the largest row norm.
pub fn rowspace_dim(a: &DMatrix<f64>, tol: f64) -> usize {
    let scale = a.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0;
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in a.row_iter() {
        let mut v: Vec<f64> = row.iter().copied().collect();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol * scale {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.len()
}

/// Outcome of the left-inverse construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LeftInverse {
    /// `‖K⁺K − I‖_F` for the least-squares left inverse.
    Injective { residual: f64 },
    NotInjective { rank: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    /// Column count (input dimension).
    pub n: usize,
    /// Stacked row count.
    pub m: usize,
    pub rank: usize,
    pub rowspace_dim: usize,
    pub component_ranks: Vec<usize>,
    /// Ranks of the stacks of the first `1..=r` components.
    pub prefix_ranks: Vec<usize>,
    pub injective: bool,
    pub left_inverse: LeftInverse,
}

impl RankReport {
    /// The rank equals the dimension of the union of component row spaces.
    pub fn equality_holds(&self) -> bool {
        self.rank == self.rowspace_dim
    }

    /// `rank(K) ≥ max_i rank(K_i)` and rank never drops when a component is
    /// appended.
    pub fn monotone(&self) -> bool {
        let max = self.component_ranks.iter().copied().max().unwrap_or(0);
        self.rank >= max && self.prefix_ranks.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn residual(&self) -> Option<f64> {
        match self.left_inverse {
            LeftInverse::Injective { residual } => Some(residual),
            LeftInverse::NotInjective { .. } => None,
        }
    }
}

/// Least-squares left inverse `(AᵀA)⁻¹Aᵀ` via thin QR, or the rank when the
/// stack is not injective.
pub fn left_inverse_check(s: &LinearMapSet, tol: f64) -> Result<LeftInverse> {
    check_finite(&s.stacked)?;
    let a = &s.stacked;
    let n = a.ncols();
    let rank = numerical_rank(a, tol);
    if rank < n || a.nrows() < n {
        return Ok(LeftInverse::NotInjective { rank });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let qt = qr.q().transpose();
    let pinv = r
        .solve_upper_triangular(&qt)
        .ok_or_else(|| Error::Degenerate("singular triangular factor".into()))?;
    let residual = (pinv * a - DMatrix::identity(n, n)).norm();
    Ok(LeftInverse::Injective { residual })
}

pub fn rank_and_rowspace_dim(s: &LinearMapSet, tol: f64) -> Result<RankReport> {
    check_finite(&s.stacked)?;
    let rank = numerical_rank(&s.stacked, tol);
    let rowspace = rowspace_dim(&s.stacked, tol.max(1e-9));
    let component_ranks = s.maps.iter().map(|a| numerical_rank(a, tol)).collect();
    let mut prefix_ranks = Vec::with_capacity(s.maps.len());
    let mut rows = 0;
    for a in &s.maps {
        rows += a.nrows();
        prefix_ranks.push(numerical_rank(&s.stacked.rows(0, rows).into_owned(), tol));
    }
    let left_inverse = left_inverse_check(s, tol)?;
    Ok(RankReport {
        n: s.cols(),
        m: s.rows(),
        rank,
        rowspace_dim: rowspace,
        component_ranks,
        prefix_ranks,
        injective: rank == s.cols(),
        left_inverse,
    })
}

/// Jacobian of an affine map on tensors of `input_shape`, probed with unit
/// basis inputs. Fails when a random superposition test shows the map is not
/// affine.
pub fn linearize<F>(input_shape: &[usize], f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n: usize = input_shape.iter().product();
    let zero = Tensor::zeros(input_shape.to_vec());
    let offset = f(&zero)?;
    let m = offset.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut probe = zero.clone();
    for j in 0..n {
        probe.data_mut()[j] = 1.0;
        let y = f(&probe)?;
        probe.data_mut()[j] = 0.0;
        if y.len() != m {
            return Err(Error::shape("probe output size changed"));
        }
        for (i, (a, b)) in y.data().iter().zip(offset.data()).enumerate() {
            jac[(i, j)] = a - b;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = f(&Tensor::new(input_shape.to_vec(), x.clone())?)?;
    let pred = &jac * nalgebra::DVector::from_vec(x);
    let scale = 1.0 + jac.norm();
    for (i, (yi, oi)) in y.data().iter().zip(offset.data()).enumerate() {
        if (yi - oi - pred[i]).abs() > 1e-8 * scale {
            return Err(Error::Degenerate("block is not affine in the linearization regime".into()));
        }
    }
    Ok(jac)
}

/// Jacobian of an upsampler with identity activations and eval-mode
/// normalization, for an input of `(1, in_channels, len)`.
pub fn linearize_upsampler(store: &ParameterStore, up: &UpSampler, len: usize) -> Result<DMatrix<f64>> {
    linearize(&[1, up.in_channels(), len], |x| {
        let mut tape = Tape::new();
        let params = (0..store.len()).map(|i| tape.constant(store.value(i).clone())).collect();
        let mut f = Forward::new(&mut tape, params, Mode::Eval, 0);
        f.linearized = true;
        let xv = f.tape.constant(x.clone());
        let y = up.apply(&mut f, xv)?;
        Ok(tape.value(y).clone())
    })
}

#[derive(Clone, Debug)]
pub struct LevelReport {
    pub level: usize,
    pub report: RankReport,
}

#[derive(Clone, Debug)]
pub struct InjectivityReport {
    pub levels: Vec<LevelReport>,
}

impl InjectivityReport {
    pub fn passed(&self) -> bool {
        self.levels.iter().all(|l| l.report.injective)
    }
}

impl fmt::Display for InjectivityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.levels {
            let r = &l.report;
            let residual = r.residual().map_or("none".to_string(), |v| format!("{v:.3e}"));
            let verdict = if r.injective { "injective" } else { "rank-deficient" };
            writeln!(
                f,
                "level={} n={} m={} rank={} residual={} verdict={}",
                l.level, r.n, r.m, r.rank, residual, verdict
            )?;
        }
        writeln!(f, "summary={}", if self.passed() { "pass" } else { "fail" })
    }
}

/// One report per decoder level; the single-matrix stack is the block's
/// Jacobian at its native input length.
pub fn injectivity_report(m: &ModelGraph) -> Result<InjectivityReport> {
    let inner = m.config.internal_length();
    let mut levels = Vec::new();
    for (k, up) in m.up_samplers().into_iter().enumerate() {
        let jac = linearize_upsampler(&m.store, up, inner >> (k + 1))?;
        let set = stack_linear_maps(&[jac])?;
        levels.push(LevelReport {
            level: k,
            report: rank_and_rowspace_dim(&set, DEFAULT_TOL)?,
        });
    }
    Ok(InjectivityReport { levels })
}

/// Jacobians of the three branches of a multi-branch upsampler, in order
/// (transpose conv, interpolation, pixel shuffle), before fusion.
pub fn upsampler_branch_maps(store: &ParameterStore, up: &UpSampler, len: usize) -> Result<Vec<DMatrix<f64>>> {
    let UpSampler::Multi(block) = up else {
        return Err(Error::config("branch maps need a multi-branch upsampler"));
    };
    (0..3)
        .map(|b| {
            linearize(&[1, block.cin, len], |x| {
                let mut tape = Tape::new();
                let params = (0..store.len()).map(|i| tape.constant(store.value(i).clone())).collect();
                let mut f = Forward::new(&mut tape, params, Mode::Eval, 0);
                f.linearized = true;
                let xv = f.tape.constant(x.clone());
                let br = block.branches(&mut f, xv)?;
                Ok(tape.value(br[b]).clone())
            })
        })
        .collect()
}
