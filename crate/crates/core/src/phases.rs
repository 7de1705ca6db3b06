//! Phase-boundary detection on recorded trajectories and the closed-form
//! iteration-count predictions they are tested against: escape from the
//! all-ties point (Phase I), deterministic traverse (Phase II), and
//! convergence into the stationary band around a component (Phase III).
//!
//! Boundaries are located on the recorded strided states, so every count
//! carries one-stride uncertainty.

use crate::moments::cross_moments;
use crate::sgd::{align_to_component, sin2_angle, Trajectory};
use crate::source::SourceSpec;
use crate::{Error, Result};

/// Detection thresholds: Phase-II exit level delta, Phase-III band
/// multiplier c0, and the Phase-I squared-ratio exit factor (fixed at 2 by
/// the construction behind the predictions; exposed for sensitivity runs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub delta: f64,
    pub c0: f64,
    pub gap_factor: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            delta: 0.1,
            c0: 1.0,
            gap_factor: 2.0,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "delta {} outside (0, 1/2)",
                self.delta
            )));
        }
        if !(self.c0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "band multiplier c0 {} must be positive",
                self.c0
            )));
        }
        if !(self.gap_factor > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gap factor {} must exceed 1",
                self.gap_factor
            )));
        }
        Ok(())
    }
}

/// Local escape coordinate beta^{-1/2} (log v_k^2 - log v_k'^2).
pub fn w_statistic(v: &[f64], beta: f64, k: usize, kp: usize) -> Result<f64> {
    if v[k] == 0.0 || v[kp] == 0.0 {
        return Err(Error::Detection(format!(
            "log-ratio statistic undefined: coordinate {} is zero",
            if v[k] == 0.0 { k } else { kp }
        )));
    }
    Ok(((v[k] * v[k]).ln() - (v[kp] * v[kp]).ln()) / beta.sqrt())
}

fn top_two_squared(v: &[f64]) -> (f64, f64) {
    let mut top = 0.0f64;
    let mut runner = 0.0f64;
    for &x in v {
        let sq = x * x;
        if sq > top {
            runner = top;
            top = sq;
        } else if sq > runner {
            runner = sq;
        }
    }
    (top, runner)
}

/// First recorded iteration where the dominant squared coordinate is at
/// least gap_factor times the runner-up.
pub fn detect_phase1_end(traj: &Trajectory, gap_factor: f64) -> Result<u64> {
    for (n, v) in &traj.states {
        let (top, runner) = top_two_squared(v);
        if top >= gap_factor * runner {
            return Ok(*n);
        }
    }
    Err(Error::Detection(format!(
        "squared-coordinate ratio never reached {gap_factor} within {} iterations",
        traj.states.last().map(|(n, _)| *n).unwrap_or(0)
    )))
}

/// First recorded iteration at or after n1 with max_k v_k^2 >= 1 - delta,
/// counted from n1.
pub fn detect_phase2_end(traj: &Trajectory, delta: f64, n1: u64) -> Result<u64> {
    for (n, v) in &traj.states {
        if *n < n1 {
            continue;
        }
        let (top, _) = top_two_squared(v);
        if top >= 1.0 - delta {
            return Ok(n - n1);
        }
    }
    Err(Error::Detection(format!(
        "max squared coordinate never reached 1 - {delta} after iteration {n1}"
    )))
}

/// Stationary ensemble level of sin^2 of the angle to the winning
/// component: beta (d-1) psi6 / (2 gap).
pub fn phase3_band(beta: f64, d: usize, gap: f64, psi6: f64) -> f64 {
    beta * (d as f64 - 1.0) * psi6 / (2.0 * gap)
}

/// First recorded iteration at or after from_n where the ensemble mean of
/// sin^2 (each replicate against its own winning component) drops to
/// (c0 + 1) times the stationary band, counted from from_n. Every
/// trajectory must share the recording grid and have a converged final
/// state.
pub fn detect_phase3_end(
    trajs: &[Trajectory],
    spec: &SourceSpec,
    c0: f64,
    from_n: u64,
) -> Result<u64> {
    let grid = common_grid(trajs)?;
    let first = &trajs[0];
    let winners: Vec<usize> = trajs
        .iter()
        .map(|t| align_to_component(&t.final_state().1).map(|(k, _)| k))
        .collect::<Result<_>>()?;
    let threshold = (c0 + 1.0)
        * phase3_band(
            first.beta,
            first.d,
            spec.moments().tensor_gap(),
            spec.moments().psi_f64(6),
        );
    for (i, n) in grid.iter().enumerate() {
        if *n < from_n {
            continue;
        }
        let mean = trajs
            .iter()
            .zip(&winners)
            .map(|(t, &k)| sin2_angle(&t.states[i].1, k))
            .sum::<f64>()
            / trajs.len() as f64;
        if mean <= threshold {
            return Ok(n - from_n);
        }
    }
    Err(Error::Detection(format!(
        "ensemble mean sin^2 never reached the band threshold {threshold:.3e}"
    )))
}

fn common_grid(trajs: &[Trajectory]) -> Result<Vec<u64>> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let grid: Vec<u64> = first.states.iter().map(|(n, _)| *n).collect();
    for t in trajs {
        if t.d != first.d
            || t.beta != first.beta
            || t.states.len() != grid.len()
            || t.states.iter().zip(&grid).any(|((n, _), g)| n != g)
        {
            return Err(Error::InvalidArgument(
                "ensemble trajectories do not share dimension, step size and recording grid"
                    .into(),
            ));
        }
    }
    Ok(grid)
}

/// Ensemble mean of sin^2 against each replicate's own winning component,
/// per recorded iteration.
pub fn aligned_mean_sin2(trajs: &[Trajectory]) -> Result<Vec<(u64, f64)>> {
    let grid = common_grid(trajs)?;
    let winners: Vec<usize> = trajs
        .iter()
        .map(|t| align_to_component(&t.final_state().1).map(|(k, _)| k))
        .collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mean = trajs
                .iter()
                .zip(&winners)
                .map(|(t, &k)| sin2_angle(&t.states[i].1, k))
                .sum::<f64>()
                / trajs.len() as f64;
            (*n, mean)
        })
        .collect())
}

/// Closed-form iteration counts: escape N1 = (1/4)(d/gap) beta^-1 log
/// beta^-1, traverse bound N2 = (d - 3 + 4 log((2 delta)^-1))/(gap beta),
/// convergence N3 = (1/2)(1/gap) beta^-1 log beta^-1, together with the
/// Phase-III band and its detection threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedIterations {
    pub n1: f64,
    pub n2_bound: f64,
    pub n3: f64,
    /// Stationary mean sin^2 level.
    pub band: f64,
    /// Detection level (c0 + 1) * band.
    pub threshold: f64,
}

pub fn predicted_iterations(
    d: usize,
    beta: f64,
    gap: f64,
    psi6: f64,
    delta: f64,
    c0: f64,
) -> PredictedIterations {
    assert!(d >= 2, "dimension {d} below 2");
    assert!(beta > 0.0 && gap > 0.0 && psi6 >= 0.0 && c0 > 0.0);
    assert!(delta > 0.0 && delta < 0.5, "delta {delta} outside (0, 1/2)");
    let log_inv_beta = (1.0 / beta).ln();
    let band = phase3_band(beta, d, gap, psi6);
    PredictedIterations {
        n1: 0.25 * d as f64 / gap / beta * log_inv_beta,
        n2_bound: (d as f64 - 3.0 + 4.0 * (1.0 / (2.0 * delta)).ln()) / (gap * beta),
        n3: 0.5 / gap / beta * log_inv_beta,
        band,
        threshold: (c0 + 1.0) * band,
    }
}

/// Phase-III duration refined through the band geometry: exponential decay
/// of mean sin^2 from delta down to the detection threshold at rate
/// 2 gap beta per iteration. None when the start is already inside the
/// threshold.
pub fn predicted_phase3_refined(
    d: usize,
    beta: f64,
    gap: f64,
    psi6: f64,
    delta: f64,
    c0: f64,
) -> Option<f64> {
    let band = phase3_band(beta, d, gap, psi6);
    let excess = delta - band;
    if excess <= c0 * band {
        return None;
    }
    Some((excess / (c0 * band)).ln() / (2.0 * gap * beta))
}

/// Per-replicate boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicatePhases {
    pub replicate: u64,
    pub n1: u64,
    /// Counted from n1.
    pub n2: u64,
}

/// (lower quartile, median, upper quartile).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

fn quartiles(xs: &mut Vec<f64>) -> Quartiles {
    xs.sort_by(f64::total_cmp);
    Quartiles {
        q25: quantile_sorted(xs, 0.25),
        median: quantile_sorted(xs, 0.5),
        q75: quantile_sorted(xs, 0.75),
    }
}

/// Ensemble-level phase analysis.
#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub beta: f64,
    pub d: usize,
    pub gap: f64,
    pub psi6: f64,
    pub lambda_sq: f64,
    pub delta: f64,
    pub c0: f64,
    pub gap_factor: f64,
    pub per_replicate: Vec<ReplicatePhases>,
    /// Replicates where Phase-I or Phase-II detection failed.
    pub skipped: usize,
    pub n1_stats: Quartiles,
    pub n2_stats: Quartiles,
    /// Ensemble Phase-III duration counted from the median n1 + n2
    /// boundary; None when the band is never reached.
    pub n3: Option<u64>,
    pub predicted: PredictedIterations,
}

/// Detects per-replicate Phase-I/II boundaries and the ensemble Phase-III
/// boundary, next to the closed-form predictions. Replicates where
/// detection fails are skipped and counted; an ensemble with no detectable
/// replicate is an error.
pub fn analyze_ensemble(
    trajs: &[Trajectory],
    spec: &SourceSpec,
    cfg: &PhaseConfig,
) -> Result<PhaseReport> {
    cfg.validate()?;
    common_grid(trajs)?;
    let first = &trajs[0];
    let moments = spec.moments();
    let gap = moments.tensor_gap();
    if gap == 0.0 {
        return Err(Error::InvalidSource(
            "zero tensor gap: phases are undefined".into(),
        ));
    }
    let mut per_replicate = Vec::new();
    let mut skipped = 0;
    for t in trajs {
        match detect_phase1_end(t, cfg.gap_factor)
            .and_then(|n1| detect_phase2_end(t, cfg.delta, n1).map(|n2| (n1, n2)))
        {
            Ok((n1, n2)) => per_replicate.push(ReplicatePhases {
                replicate: t.replicate,
                n1,
                n2,
            }),
            Err(_) => skipped += 1,
        }
    }
    if per_replicate.is_empty() {
        return Err(Error::Detection(format!(
            "no replicate out of {} completed Phases I and II",
            trajs.len()
        )));
    }
    let n1_stats = quartiles(&mut per_replicate.iter().map(|r| r.n1 as f64).collect());
    let n2_stats = quartiles(&mut per_replicate.iter().map(|r| r.n2 as f64).collect());
    let converged: Vec<Trajectory> = trajs
        .iter()
        .filter(|t| align_to_component(&t.final_state().1).is_ok())
        .cloned()
        .collect();
    let from_n = (n1_stats.median + n2_stats.median).round() as u64;
    let n3 = if converged.is_empty() {
        None
    } else {
        detect_phase3_end(&converged, spec, cfg.c0, from_n).ok()
    };
    Ok(PhaseReport {
        beta: first.beta,
        d: first.d,
        gap,
        psi6: moments.psi_f64(6),
        lambda_sq: cross_moments(first.d, moments)?.lambda_sq_f64(),
        delta: cfg.delta,
        c0: cfg.c0,
        gap_factor: cfg.gap_factor,
        per_replicate,
        skipped,
        n1_stats,
        n2_stats,
        n3,
        predicted: predicted_iterations(
            first.d,
            first.beta,
            gap,
            moments.psi_f64(6),
            cfg.delta,
            cfg.c0,
        ),
    })
}

/// Rescaled escape statistic across an ensemble started at the all-ties
/// point: exp(-2 gap t / d) * w_statistic at the recorded iteration nearest
/// t_check / beta.
#[derive(Debug, Clone, Copy)]
pub struct EscapeCheck {
    /// Replicates with a computable statistic.
    pub survivors: usize,
    pub sample_mean: f64,
    pub sample_variance: f64,
    /// d lambda^2 / (4 gap): the large-t limit the samples are tested
    /// against.
    pub predicted_variance: f64,
    /// Exact variance at the checked time, for reference.
    pub finite_t_variance: f64,
    /// Mean z-score against zero.
    pub mean_z: f64,
}

pub fn escape_distribution_check(
    trajs: &[Trajectory],
    spec: &SourceSpec,
    t_check: f64,
    k: usize,
    kp: usize,
) -> Result<EscapeCheck> {
    let grid = common_grid(trajs)?;
    let first = &trajs[0];
    let beta = first.beta;
    let d = first.d;
    let moments = spec.moments();
    let gap = moments.tensor_gap();
    let target = t_check / beta;
    let idx = grid
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (*a.1 as f64 - target)
                .abs()
                .total_cmp(&(*b.1 as f64 - target).abs())
        })
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let t_actual = grid[idx] as f64 * beta;
    let scale = (-2.0 * gap * t_actual / d as f64).exp();
    let samples: Vec<f64> = trajs
        .iter()
        .filter_map(|t| w_statistic(&t.states[idx].1, beta, k, kp).ok())
        .map(|w| scale * w)
        .collect();
    if samples.len() < 100 {
        return Err(Error::Detection(format!(
            "only {} of {} replicates yield the escape statistic; need at least 100",
            samples.len(),
            trajs.len()
        )));
    }
    let n = samples.len() as f64;
    let sample_mean = samples.iter().sum::<f64>() / n;
    let sample_variance = samples
        .iter()
        .map(|x| (x - sample_mean) * (x - sample_mean))
        .sum::<f64>()
        / (n - 1.0);
    let lambda_sq = cross_moments(d, moments)?.lambda_sq_f64();
    let predicted_variance = d as f64 * lambda_sq / (4.0 * gap);
    let finite_t_variance =
        predicted_variance * (1.0 - (-4.0 * gap * t_actual / d as f64).exp());
    Ok(EscapeCheck {
        survivors: samples.len(),
        sample_mean,
        sample_variance,
        predicted_variance,
        finite_t_variance,
        mean_z: sample_mean / (sample_variance / n).sqrt(),
    })
}

/// Measured phase-duration ratios across a decreasing step-size grid.
#[derive(Debug, Clone)]
pub struct CutoffSummary {
    pub betas: Vec<f64>,
    /// Median over replicates of per-replicate n2 / n1 (zero-n1 replicates
    /// skipped).
    pub n2_over_n1: Vec<f64>,
    /// Median n1 over the ensemble n3; None where n3 was not detected.
    pub n1_over_n3: Vec<Option<f64>>,
    /// Closed-form n2_bound / n1 for reference.
    pub predicted_n2_over_n1: Vec<f64>,
}

pub fn cutoff_ratio(reports: &[PhaseReport]) -> Result<CutoffSummary> {
    if reports.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "cutoff needs at least 3 step sizes, got {}",
            reports.len()
        )));
    }
    let d = reports[0].d;
    for pair in reports.windows(2) {
        if pair[1].d != d {
            return Err(Error::InvalidArgument(
                "cutoff reports mix dimensions".into(),
            ));
        }
        if pair[1].beta >= pair[0].beta {
            return Err(Error::InvalidArgument(
                "cutoff reports must come in strictly decreasing beta order".into(),
            ));
        }
    }
    let mut n2_over_n1 = Vec::new();
    let mut n1_over_n3 = Vec::new();
    let mut predicted = Vec::new();
    for r in reports {
        let mut ratios: Vec<f64> = r
            .per_replicate
            .iter()
            .filter(|p| p.n1 > 0)
            .map(|p| p.n2 as f64 / p.n1 as f64)
            .collect();
        if ratios.is_empty() {
            return Err(Error::Detection(format!(
                "beta {}: every detected replicate has n1 = 0",
                r.beta
            )));
        }
        ratios.sort_by(f64::total_cmp);
        n2_over_n1.push(quantile_sorted(&ratios, 0.5));
        n1_over_n3.push(r.n3.filter(|&n| n > 0).map(|n| r.n1_stats.median / n as f64));
        predicted.push(r.predicted.n2_bound / r.predicted.n1);
    }
    Ok(CutoffSummary {
        betas: reports.iter().map(|r| r.beta).collect(),
        n2_over_n1,
        n1_over_n3,
        predicted_n2_over_n1: predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgd::{monte_carlo, InitKind, SgdConfig};
    use crate::source::SourceKind;

    fn rademacher(d: usize) -> SourceSpec {
        SourceSpec::new(SourceKind::Rademacher, d).unwrap()
    }

    fn three_point(d: usize, a: f64) -> SourceSpec {
        SourceSpec::new(SourceKind::ThreePoint { a }, d).unwrap()
    }

    fn synthetic(states: Vec<(u64, Vec<f64>)>) -> Trajectory {
        Trajectory {
            d: states[0].1.len(),
            beta: 1e-3,
            master_seed: 0,
            replicate: 0,
            stride: 1,
            states,
        }
    }

    #[test]
    fn w_statistic_values() {
        let c = 0.5f64;
        assert_eq!(w_statistic(&[c, c, c, c], 1e-4, 0, 3).unwrap(), 0.0);
        let v = [0.8, 0.6];
        let w01 = w_statistic(&v, 1e-4, 0, 1).unwrap();
        let w10 = w_statistic(&v, 1e-4, 1, 0).unwrap();
        assert_eq!(w01, -w10, "antisymmetry");
        // v_0^2 = 2 v_1^2 at beta = 1e-4: 100 log 2.
        let g = (2.0f64 / 3.0).sqrt();
        let h = (1.0f64 / 3.0).sqrt();
        let w = w_statistic(&[g, h], 1e-4, 0, 1).unwrap();
        assert!((w - 100.0 * 2.0f64.ln()).abs() < 1e-10, "got {w}");
        assert!(w_statistic(&[1.0, 0.0], 1e-4, 0, 1).is_err());
    }

    #[test]
    fn predicted_iteration_pins() {
        let p = predicted_iterations(4, 1e-4, 2.0, 16.0, 0.1, 1.0);
        assert!(
            (p.n1 - 46051.70).abs() < 0.01,
            "N1 = (1/4)(4/2) 1e4 log 1e4 = {}",
            p.n1
        );
        assert!((p.n1 / p.n3 - 2.0).abs() < 1e-12, "N1/N3 = d/2");
        for d in [2usize, 3, 7, 20] {
            let p = predicted_iterations(d, 3e-4, 1.3, 2.0, 0.2, 0.7);
            assert!(
                (p.n1 / p.n3 - d as f64 / 2.0).abs() < 1e-9,
                "identity at d = {d}"
            );
        }
        // N2_bound/N1 shrinks as beta does.
        let r = |beta: f64| {
            let p = predicted_iterations(5, beta, 1.0, 16.0, 0.1, 1.0);
            p.n2_bound / p.n1
        };
        assert!(r(1e-3) > r(1e-4) && r(1e-4) > r(1e-5));
        // Band pin: beta (d-1) psi6 / (2 gap) at d = 4, psi6 = 16, gap = 1.
        let p = predicted_iterations(4, 1e-4, 1.0, 16.0, 0.1, 1.0);
        assert!((p.band - 2.4e-3).abs() < 1e-15);
        assert!((p.threshold - 4.8e-3).abs() < 1e-15);
    }

    #[test]
    fn refined_phase3_consistent_with_printed_scale() {
        let refined = predicted_phase3_refined(4, 1e-4, 1.0, 16.0, 0.1, 1.0).unwrap();
        // log(excess/band)/(2 gap beta): same 1/(gap beta) scale as N3.
        let printed = predicted_iterations(4, 1e-4, 1.0, 16.0, 0.1, 1.0).n3;
        assert!(refined > 0.0 && refined < printed);
        // Start already inside the detection band.
        assert!(predicted_phase3_refined(4, 1e-1, 1.0, 16.0, 0.012, 1.0).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(PhaseConfig::default().validate().is_ok());
        for bad in [
            PhaseConfig {
                delta: 0.5,
                ..Default::default()
            },
            PhaseConfig {
                c0: 0.0,
                ..Default::default()
            },
            PhaseConfig {
                gap_factor: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn phase1_detector_on_synthetic_states() {
        let tie = vec![0.5, 0.5, 0.5, 0.5];
        let gapped = vec![(2.0f64 / 5.0).sqrt(), (1.0f64 / 5.0).sqrt(), (1.0f64 / 5.0).sqrt(), (1.0f64 / 5.0).sqrt()];
        let traj = synthetic(vec![(0, tie.clone()), (10, tie.clone()), (20, gapped.clone())]);
        assert_eq!(detect_phase1_end(&traj, 2.0).unwrap(), 20);

        let already = synthetic(vec![(0, gapped.clone())]);
        assert_eq!(detect_phase1_end(&already, 2.0).unwrap(), 0, "gapped at n = 0");

        let flipped = synthetic(vec![
            (0, tie.iter().map(|x| -x).collect()),
            (10, tie.iter().map(|x| -x).collect()),
            (20, gapped.iter().map(|x| -x).collect()),
        ]);
        assert_eq!(
            detect_phase1_end(&flipped, 2.0).unwrap(),
            20,
            "sign-flip invariance"
        );

        let never = synthetic(vec![(0, tie.clone()), (10, tie)]);
        assert!(detect_phase1_end(&never, 2.0).is_err());
    }

    #[test]
    fn phase2_detector_on_synthetic_states() {
        let near = vec![0.96f64.sqrt(), 0.04f64.sqrt()];
        let traj = synthetic(vec![(0, vec![0.8, 0.6]), (10, vec![0.9, 0.19f64.sqrt()]), (20, near.clone())]);
        assert_eq!(detect_phase2_end(&traj, 0.1, 0).unwrap(), 20);
        assert_eq!(detect_phase2_end(&traj, 0.2, 10).unwrap(), 10 - 10, "crossed at n1");
        let already = synthetic(vec![(0, near)]);
        assert_eq!(detect_phase2_end(&already, 0.1, 0).unwrap(), 0);
        assert!(detect_phase2_end(&synthetic(vec![(0, vec![0.8, 0.6])]), 0.1, 0).is_err());
    }

    #[test]
    fn phase3_detector_threshold_cases() {
        let spec = rademacher(2);
        // Converged immediately: huge c0 puts the threshold above any level.
        let t = synthetic(vec![(0, vec![0.9, 0.19f64.sqrt()]), (10, vec![0.99, 0.0199f64.sqrt()])]);
        let n3 = detect_phase3_end(std::slice::from_ref(&t), &spec, 1e6, 0).unwrap();
        assert_eq!(n3, 0, "threshold above the starting level");

        // Band for rademacher d = 2, beta = 1e-3, gap 2: 1e-3 * 1 * 1 / 4.
        let band = phase3_band(1e-3, 2, 2.0, 1.0);
        assert!((band - 2.5e-4).abs() < 1e-19);
        let deep = vec![(1.0f64 - 1e-5).sqrt(), 1e-5f64.sqrt()];
        let t = synthetic(vec![(0, vec![0.9, 0.19f64.sqrt()]), (10, deep)]);
        assert_eq!(
            detect_phase3_end(std::slice::from_ref(&t), &spec, 1.0, 0).unwrap(),
            10
        );
    }

    #[test]
    fn ensemble_report_on_real_runs() {
        let spec = rademacher(3);
        let config = SgdConfig {
            beta: 1e-3,
            max_iters: 20_000,
            record_stride: None,
            init: InitKind::UnstableEquilibrium,
            master_seed: 21,
        };
        let trajs = monte_carlo(&config, &spec, 30).unwrap();
        let report = analyze_ensemble(&trajs, &spec, &PhaseConfig::default()).unwrap();
        assert_eq!(report.d, 3);
        assert_eq!(report.gap, 2.0);
        assert!((report.lambda_sq - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(report.skipped + report.per_replicate.len(), 30);
        assert!(report.per_replicate.len() >= 25, "most replicates detected");
        for p in &report.per_replicate {
            let cumulative = p.n1 + p.n2;
            assert!(p.n1 <= cumulative && cumulative <= config.max_iters);
            assert_eq!(p.n1 % trajs[0].stride, 0, "boundaries live on the grid");
        }
        assert!(report.n1_stats.q25 <= report.n1_stats.median);
        assert!(report.n1_stats.median <= report.n1_stats.q75);
        let n3 = report.n3.expect("ensemble converges well inside 20k iterations");
        assert!(n3 + from_n_of(&report) <= config.max_iters);

        // Same seeds, same report.
        let again = analyze_ensemble(&trajs, &spec, &PhaseConfig::default()).unwrap();
        assert_eq!(again.n1_stats, report.n1_stats);
        assert_eq!(again.n2_stats, report.n2_stats);
        assert_eq!(again.n3, report.n3);
    }

    fn from_n_of(report: &PhaseReport) -> u64 {
        (report.n1_stats.median + report.n2_stats.median).round() as u64
    }

    #[test]
    fn phase2_duration_scales_inversely_with_gap() {
        // Same d and delta; tensor gap 1 (three-point a = 2) vs 2
        // (rademacher): median traverse iterations should scale by ~2.
        let cfg = PhaseConfig::default();
        let base = SgdConfig {
            beta: 1e-3,
            max_iters: 20_000,
            record_stride: None,
            init: InitKind::UnstableEquilibrium,
            master_seed: 31,
        };
        let slow_spec = three_point(3, 2.0);
        let slow = analyze_ensemble(&monte_carlo(&base, &slow_spec, 40).unwrap(), &slow_spec, &cfg)
            .unwrap();
        let fast_spec = rademacher(3);
        let fast = analyze_ensemble(&monte_carlo(&base, &fast_spec, 40).unwrap(), &fast_spec, &cfg)
            .unwrap();
        let ratio = slow.n2_stats.median / fast.n2_stats.median;
        assert!(
            (ratio - 2.0).abs() < 0.6,
            "traverse ratio {ratio} should track the gap ratio 2 within 30%"
        );
    }

    #[test]
    fn escape_check_small_ensemble() {
        let spec = rademacher(3);
        let config = SgdConfig {
            beta: 1e-3,
            max_iters: 1000,
            record_stride: None,
            init: InitKind::UnstableEquilibrium,
            master_seed: 41,
        };
        let trajs = monte_carlo(&config, &spec, 300).unwrap();
        let check = escape_distribution_check(&trajs, &spec, 1.0, 0, 1).unwrap();
        assert_eq!(check.survivors, 300);
        assert!((check.predicted_variance - 1.0 / 3.0).abs() < 1e-12);
        // Early time: the exact variance is still well below saturation.
        let saturation = 1.0 - (-4.0 * 2.0 * 1.0 / 3.0f64).exp();
        assert!(
            (check.finite_t_variance - check.predicted_variance * saturation).abs() < 1e-12
        );
        assert!(
            (check.sample_variance - check.finite_t_variance).abs()
                < 0.3 * check.finite_t_variance,
            "sample {} vs exact {}",
            check.sample_variance,
            check.finite_t_variance
        );
        assert!(check.mean_z.abs() < 4.0, "mean z {}", check.mean_z);

        // Path-by-path antisymmetry of the underlying statistic.
        for t in trajs.iter().take(20) {
            let v = &t.final_state().1;
            let w = w_statistic(v, config.beta, 0, 1).unwrap();
            let back = w_statistic(v, config.beta, 1, 0).unwrap();
            assert_eq!(w, -back);
        }

        assert!(
            escape_distribution_check(&trajs[..50], &spec, 1.0, 0, 1).is_err(),
            "fewer than 100 replicates is refused"
        );
    }

    #[test]
    fn cutoff_requires_three_decreasing_betas() {
        let spec = rademacher(3);
        let cfg = PhaseConfig::default();
        let mut reports = Vec::new();
        for beta in [2e-3, 1e-3] {
            let config = SgdConfig {
                beta,
                max_iters: 20_000,
                record_stride: None,
                init: InitKind::UnstableEquilibrium,
                master_seed: 51,
            };
            let trajs = monte_carlo(&config, &spec, 10).unwrap();
            reports.push(analyze_ensemble(&trajs, &spec, &cfg).unwrap());
        }
        assert!(cutoff_ratio(&reports).is_err(), "two betas are not enough");
        let swapped: Vec<PhaseReport> =
            vec![reports[1].clone(), reports[0].clone(), reports[1].clone()];
        assert!(cutoff_ratio(&swapped).is_err(), "order must strictly decrease");
    }
}
