//! Projected stochastic-gradient iteration on the unit sphere, in source
//! coordinates:
//!
//!   v <- normalize(v + sign * beta * (v^T Y)^3 Y),   sign = sign(psi4 - 3).
//!
//! Because the mixing matrix is orthonormal, the iterate expressed in the
//! component frame obeys exactly this recursion with the raw source vector;
//! simulation therefore runs in v-coordinates and the mixing model only
//! enters observation-side computations.
//!
//! Every replicate draws from its own counter-derived generator stream, so
//! ensembles are reproducible bit-for-bit for any worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::source::SourceSpec;
use crate::{Error, Result};

/// Generator for one replicate: master seed selects the key, the replicate
/// index selects the stream. Streams never overlap.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Initial iterate.
#[derive(Debug, Clone, PartialEq)]
pub enum InitKind {
    /// v* = d^{-1/2}(1, ..., 1): all coordinates tie, the hardest start.
    UnstableEquilibrium,
    /// d^{-1/2}(+-1, ..., +-1) with signs drawn from the replicate stream;
    /// the symmetric version of v* used for signed-component statistics.
    UnstableEquilibriumRandomSigns,
    /// Top coordinate at the squared ratio 2: v_1^2 = 2/(d+1), rest 1/(d+1).
    Gapped,
    /// Caller-supplied unit vector.
    Explicit(Vec<f64>),
}

impl InitKind {
    pub fn name(&self) -> &'static str {
        match self {
            InitKind::UnstableEquilibrium => "vstar",
            InitKind::UnstableEquilibriumRandomSigns => "vstar-random-signs",
            InitKind::Gapped => "gapped",
            InitKind::Explicit(_) => "explicit",
        }
    }
}

pub(crate) fn init_vector(init: &InitKind, d: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    match init {
        InitKind::UnstableEquilibrium => Ok(vec![1.0 / (d as f64).sqrt(); d]),
        InitKind::UnstableEquilibriumRandomSigns => {
            let c = 1.0 / (d as f64).sqrt();
            Ok((0..d)
                .map(|_| if rng.random::<bool>() { c } else { -c })
                .collect())
        }
        InitKind::Gapped => {
            let base = 1.0 / (d as f64 + 1.0);
            let mut v = vec![base.sqrt(); d];
            v[0] = (2.0 * base).sqrt();
            Ok(v)
        }
        InitKind::Explicit(v) => {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
            let n = norm(v);
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "explicit init has norm {n}, expected 1 within 1e-12"
                )));
            }
            let mut v = v.clone();
            v.iter_mut().for_each(|x| *x /= n);
            Ok(v)
        }
    }
}

/// Step size, horizon, recording stride, initialization and master seed for
/// one simulation; the update sign is always derived from the moment table.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub beta: f64,
    pub max_iters: u64,
    /// None selects max(1, floor(beta^-1 / 100)): ~100 recorded states per
    /// unit rescaled time.
    pub record_stride: Option<u64>,
    pub init: InitKind,
    pub master_seed: u64,
}

impl SgdConfig {
    pub fn stride(&self) -> u64 {
        self.record_stride
            .unwrap_or_else(|| ((1.0 / self.beta / 100.0) as u64).max(1))
    }

    pub fn validate(&self, spec: &SourceSpec) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size beta = {} must be positive and finite",
                self.beta
            )));
        }
        let product = spec.bound() * spec.bound() * self.beta;
        if product > 2.0 / 3.0 {
            return Err(Error::StepSizeGuard { product });
        }
        if let Some(0) = self.record_stride {
            return Err(Error::InvalidArgument("record_stride must be positive".into()));
        }
        if let InitKind::Explicit(v) = &self.init {
            init_vector(&InitKind::Explicit(v.clone()), spec.dim(), &mut replicate_rng(0, 0))?;
        }
        Ok(())
    }
}

/// One recorded SGD path in source coordinates.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub d: usize,
    pub beta: f64,
    pub master_seed: u64,
    pub replicate: u64,
    pub stride: u64,
    /// (iteration index, iterate) at index 0, every stride, and the final
    /// iteration.
    pub states: Vec<(u64, Vec<f64>)>,
}

impl Trajectory {
    pub fn final_state(&self) -> &(u64, Vec<f64>) {
        self.states.last().expect("trajectory records at least n = 0")
    }
}

/// One projected step: normalize(v + sign * beta * (v^T Y)^3 Y).
pub fn sgd_step(v: &[f64], y: &[f64], beta: f64, sign: f64) -> Result<Vec<f64>> {
    if v.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: v.len(),
            got: y.len(),
        });
    }
    if (norm(v) - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "iterate norm {} departs from 1 beyond 1e-10",
            norm(v)
        )));
    }
    let s = dot(v, y);
    let c = sign * beta * s * s * s;
    let mut w: Vec<f64> = v.iter().zip(y).map(|(vk, yk)| vk + c * yk).collect();
    let n = norm(&w);
    if n == 0.0 {
        // Unreachable under the step-size guard: the displacement norm is at
        // most beta B^2 <= 2/3 < 1.
        return Err(Error::InvalidArgument("projection of the zero vector".into()));
    }
    w.iter_mut().for_each(|x| *x /= n);
    Ok(w)
}

// Bit-identical to sgd_step so recorded states replay exactly.
fn step_in_place(v: &mut [f64], y: &[f64], beta: f64, sign: f64) {
    let s = dot(v, y);
    let c = sign * beta * s * s * s;
    for (vk, yk) in v.iter_mut().zip(y) {
        *vk += c * yk;
    }
    let n = norm(v);
    for vk in v.iter_mut() {
        *vk /= n;
    }
}

/// Increment split v' - v = main + residual with
/// main_k = sign * beta * ((v^T Y)^3 Y_k - v_k (v^T Y)^4); the residual is
/// the projection correction, bounded by 9 B^4 beta^2 per coordinate.
#[derive(Debug, Clone)]
pub struct StepDecomposition {
    pub main: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn one_step_decomposition(
    v: &[f64],
    y: &[f64],
    beta: f64,
    sign: f64,
) -> Result<StepDecomposition> {
    let next = sgd_step(v, y, beta, sign)?;
    let s = dot(v, y);
    let s3 = s * s * s;
    let main: Vec<f64> = v
        .iter()
        .zip(y)
        .map(|(vk, yk)| sign * beta * (s3 * yk - vk * s3 * s))
        .collect();
    let residual: Vec<f64> = next
        .iter()
        .zip(v)
        .zip(&main)
        .map(|((nk, vk), mk)| nk - vk - mk)
        .collect();
    Ok(StepDecomposition { main, residual })
}

/// Exact conditional mean of the one-step increment at v, by exhaustive
/// enumeration, next to the leading drift it should track.
#[derive(Debug, Clone)]
pub struct DriftCheck {
    /// E[v' - v | v], enumerated.
    pub measured: Vec<f64>,
    /// beta |psi4 - 3| v_k (v_k^2 - sum_i v_i^4): the step sign times the
    /// signed fourth-moment excess is the positive tensor gap.
    pub predicted: Vec<f64>,
    /// 9 B^4 beta^2, the per-coordinate remainder bound.
    pub tolerance: f64,
    pub max_deviation: f64,
}

pub fn conditional_drift_check(v: &[f64], spec: &SourceSpec, beta: f64) -> Result<DriftCheck> {
    let d = spec.dim();
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: v.len(),
        });
    }
    let sign = spec.moments().gap_sign();
    let measured = crate::moments::enumeration_expectation_vec_f64(spec, d, |y, out| {
        let next = sgd_step(v, y, beta, sign).expect("guard checked by caller");
        for ((o, nk), vk) in out.iter_mut().zip(&next).zip(v) {
            *o = nk - vk;
        }
    })?;
    let quartic: f64 = v.iter().map(|x| x.powi(4)).sum();
    let gap = spec.moments().tensor_gap();
    let predicted: Vec<f64> = v
        .iter()
        .map(|vk| beta * gap * vk * (vk * vk - quartic))
        .collect();
    let tolerance = 9.0 * spec.bound().powi(4) * beta * beta;
    let max_deviation = measured
        .iter()
        .zip(&predicted)
        .map(|(m, p)| (m - p).abs())
        .fold(0.0, f64::max);
    Ok(DriftCheck {
        measured,
        predicted,
        tolerance,
        max_deviation,
    })
}

/// Runs the recursion for one replicate, invoking `on_record` at iteration 0,
/// every stride, and the final iteration. Returning false stops the run.
fn drive<F>(config: &SgdConfig, spec: &SourceSpec, replicate: u64, mut on_record: F) -> Result<()>
where
    F: FnMut(u64, &[f64]) -> bool,
{
    config.validate(spec)?;
    let d = spec.dim();
    let mut rng = replicate_rng(config.master_seed, replicate);
    let mut v = init_vector(&config.init, d, &mut rng)?;
    let sign = spec.moments().gap_sign();
    let stride = config.stride();
    if !on_record(0, &v) {
        return Ok(());
    }
    let mut y = vec![0.0; d];
    #[cfg(debug_assertions)]
    let bound = spec.bound();
    for n in 1..=config.max_iters {
        spec.sample_into(&mut rng, &mut y);
        #[cfg(debug_assertions)]
        let before = v.clone();
        step_in_place(&mut v, &y, config.beta, sign);
        #[cfg(debug_assertions)]
        {
            let decomp = one_step_decomposition(&before, &y, config.beta, sign)
                .expect("preconditions hold inside the driver");
            let residual_bound = 9.0 * bound.powi(4) * config.beta * config.beta + 1e-12;
            let increment_bound = 8.0 * bound * bound * config.beta + 1e-12;
            for k in 0..d {
                debug_assert!(
                    decomp.residual[k].abs() <= residual_bound,
                    "step {n}: residual {} beyond {residual_bound}",
                    decomp.residual[k]
                );
                debug_assert!(
                    (v[k] - before[k]).abs() <= increment_bound,
                    "step {n}: increment {} beyond {increment_bound}",
                    v[k] - before[k]
                );
            }
            debug_assert!((norm(&v) - 1.0).abs() < 1e-10, "step {n}: norm drift");
        }
        if (n % stride == 0 || n == config.max_iters) && !on_record(n, &v) {
            return Ok(());
        }
    }
    Ok(())
}

/// Runs one replicate and records its trajectory.
pub fn run_trajectory_replicate(
    config: &SgdConfig,
    spec: &SourceSpec,
    replicate: u64,
) -> Result<Trajectory> {
    let mut states = Vec::new();
    drive(config, spec, replicate, |n, v| {
        states.push((n, v.to_vec()));
        true
    })?;
    Ok(Trajectory {
        d: spec.dim(),
        beta: config.beta,
        master_seed: config.master_seed,
        replicate,
        stride: config.stride(),
        states,
    })
}

/// Replicate 0 of the configured run.
pub fn run_trajectory(config: &SgdConfig, spec: &SourceSpec) -> Result<Trajectory> {
    run_trajectory_replicate(config, spec, 0)
}

/// Independent replicates 0..replicates, one generator stream each; the
/// returned order is by replicate index, independent of scheduling.
pub fn monte_carlo(
    config: &SgdConfig,
    spec: &SourceSpec,
    replicates: u64,
) -> Result<Vec<Trajectory>> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    (0..replicates)
        .into_par_iter()
        .map(|r| run_trajectory_replicate(config, spec, r))
        .collect()
}

/// Dominant signed component of a converged iterate: requires the top
/// squared coordinate to exceed 1/2.
pub fn align_to_component(v: &[f64]) -> Result<(usize, i8)> {
    let (k, vk) = v
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 * a.1).total_cmp(&(b.1 * b.1)))
        .ok_or_else(|| Error::InvalidArgument("empty iterate".into()))?;
    if vk * vk <= 0.5 {
        return Err(Error::NotConverged(format!(
            "max squared coordinate {} <= 1/2",
            vk * vk
        )));
    }
    Ok((k, if *vk >= 0.0 { 1 } else { -1 }))
}

/// sin^2 of the angle between v and the k-th coordinate axis: 1 - v_k^2.
pub fn sin2_angle(v: &[f64], k: usize) -> f64 {
    (1.0 - v[k] * v[k]).clamp(0.0, 1.0)
}

/// Outcome of repeated independent runs until every component index was hit.
#[derive(Debug, Clone)]
pub struct CollectionOutcome {
    pub runs_used: u64,
    /// found[k] is true once some run converged to +-e_k.
    pub found: Vec<bool>,
    /// Winning (index, sign) per run, in run order.
    pub winners: Vec<(usize, i8)>,
}

impl CollectionOutcome {
    pub fn complete(&self) -> bool {
        self.found.iter().all(|&f| f)
    }
}

/// Repeats independent runs (replicate indices 0, 1, 2, ...) until all d
/// component indices have been collected or max_runs is exhausted. A run
/// converges when it enters the Phase-III band sin^2 <= beta (d-1) psi6 / gap
/// (band multiplier c0 = 1); a run that never converges is an error.
pub fn collect_all_components(
    config: &SgdConfig,
    spec: &SourceSpec,
    max_runs: u64,
) -> Result<CollectionOutcome> {
    let d = spec.dim();
    let gap = spec.moments().tensor_gap();
    if gap == 0.0 {
        return Err(Error::InvalidSource("zero tensor gap: no convergence".into()));
    }
    let band = config.beta * (d as f64 - 1.0) * spec.moments().psi_f64(6) / gap;
    let mut found = vec![false; d];
    let mut winners = Vec::new();
    let mut runs_used = 0;
    for run in 0..max_runs {
        let mut converged: Option<(usize, i8)> = None;
        drive(config, spec, run, |_, v| {
            if let Ok((k, s)) = align_to_component(v) {
                if sin2_angle(v, k) <= band {
                    converged = Some((k, s));
                    return false;
                }
            }
            true
        })?;
        let (k, s) = converged.ok_or_else(|| {
            Error::NotConverged(format!(
                "run {run} did not reach the Phase-III band within {} iterations",
                config.max_iters
            ))
        })?;
        runs_used += 1;
        winners.push((k, s));
        found[k] = true;
        if found.iter().all(|&f| f) {
            break;
        }
    }
    Ok(CollectionOutcome {
        runs_used,
        found,
        winners,
    })
}
