//! Continuum limits of the projected iteration: the deterministic coordinate
//! ODE with its two-dimensional closed form and traverse-time bounds, and the
//! two Ornstein-Uhlenbeck limits (mean-reverting near stable equilibria,
//! exponentially amplifying near the all-ties point) with analytic moments
//! and a first-order stochastic integrator for cross-checks.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::sgd::replicate_rng;
use crate::{Error, Result};

/// Right-hand side of the coordinate ODE: entry k is
/// gap * V_k (V_k^2 - sum_i V_i^4), gap = |psi4 - 3|.
///
/// Expects V on the unit sphere (within 1e-8); the field is tangent there,
/// so the flow conserves the norm.
pub fn ode_rhs(v: &[f64], gap: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    ode_rhs_into(v, gap, &mut out);
    out
}

fn ode_rhs_into(v: &[f64], gap: f64, out: &mut [f64]) {
    let quartic: f64 = v.iter().map(|x| x * x * x * x).sum();
    for (o, vk) in out.iter_mut().zip(v) {
        *o = gap * vk * (vk * vk - quartic);
    }
}

/// Default integrator step: resolves the fastest timescale gap^-1 to 1e-3.
pub fn default_ode_step(gap: f64) -> f64 {
    1e-3 / gap
}

/// Fixed-step classical 4th-order solution on a uniform grid.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub gap: f64,
    /// Actual step used; the requested step is shrunk at most marginally so
    /// an integral number of steps lands exactly on the horizon.
    pub step: f64,
}

impl OdeSolution {
    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Linear interpolation between grid points; t is clamped to the grid.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let last = *self.times.last().expect("nonempty grid");
        if t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= last {
            return self.values.last().unwrap().clone();
        }
        let i = ((t / self.step) as usize).min(self.values.len() - 2);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let frac = (t - t0) / (t1 - t0);
        self.values[i]
            .iter()
            .zip(&self.values[i + 1])
            .map(|(a, b)| a + frac * (b - a))
            .collect()
    }

    /// Largest deviation of ||V||^2 from 1 over the grid.
    pub fn norm_defect(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn rk4_advance(v: &mut Vec<f64>, gap: f64, h: f64, buf: &mut [Vec<f64>; 5]) {
    let d = v.len();
    let [k1, k2, k3, k4, tmp] = buf;
    ode_rhs_into(v, gap, k1);
    for i in 0..d {
        tmp[i] = v[i] + 0.5 * h * k1[i];
    }
    ode_rhs_into(tmp, gap, k2);
    for i in 0..d {
        tmp[i] = v[i] + 0.5 * h * k2[i];
    }
    ode_rhs_into(tmp, gap, k3);
    for i in 0..d {
        tmp[i] = v[i] + h * k3[i];
    }
    ode_rhs_into(tmp, gap, k4);
    for i in 0..d {
        v[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates the coordinate ODE from a unit vector over [0, horizon].
pub fn ode_solve(v0: &[f64], gap: f64, horizon: f64, step: f64) -> Result<OdeSolution> {
    let nsq: f64 = v0.iter().map(|x| x * x).sum();
    if (nsq.sqrt() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "initial norm {} departs from 1 beyond 1e-10",
            nsq.sqrt()
        )));
    }
    if !(gap > 0.0) || !(step > 0.0) || !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need gap > 0, step > 0, finite horizon >= 0; got gap = {gap}, step = {step}, horizon = {horizon}"
        )));
    }
    let n = if horizon == 0.0 {
        0
    } else {
        ((horizon / step - 1e-12).ceil() as usize).max(1)
    };
    let h = if n == 0 { step } else { horizon / n as f64 };
    let d = v0.len();
    let mut buf = [(); 5].map(|_| vec![0.0; d]);
    let mut v = v0.to_vec();
    let mut times = Vec::with_capacity(n + 1);
    let mut values = Vec::with_capacity(n + 1);
    times.push(0.0);
    values.push(v.clone());
    for i in 1..=n {
        rk4_advance(&mut v, gap, h, &mut buf);
        times.push(if i == n { horizon } else { i as f64 * h });
        values.push(v.clone());
    }
    Ok(OdeSolution {
        times,
        values,
        gap,
        step: h,
    })
}

/// ode_solve, then re-solve at half the step and require every shared grid
/// state to agree within 1e-8 (convergence check for the fixed step).
pub fn ode_solve_checked(v0: &[f64], gap: f64, horizon: f64, step: f64) -> Result<OdeSolution> {
    let coarse = ode_solve(v0, gap, horizon, step)?;
    let fine = ode_solve(v0, gap, horizon, coarse.step / 2.0)?;
    let mut worst = 0.0f64;
    for (i, v) in coarse.values.iter().enumerate() {
        for (a, b) in v.iter().zip(&fine.values[2 * i]) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst >= 1e-8 {
        return Err(Error::NotConverged(format!(
            "step halving moved the solution by {worst:.3e} >= 1e-8; shrink the step"
        )));
    }
    Ok(coarse)
}

/// Two-dimensional closed form for the top squared coordinate:
/// V_1^2(t) = 1/2 +- (1/2)(1 + C e^{-2 gap t})^{-1/2} with C fixed by the
/// initial value. The decay rate in the exponent is 2 gap: substituting the
/// expression into the ODE (or fitting the integrator, see tests) confirms
/// the factor 2.
pub fn closed_form_d2(v1sq0: f64, gap: f64, t: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&v1sq0),
        "squared coordinate {v1sq0} outside [0, 1]"
    );
    assert!(gap > 0.0, "gap {gap} must be positive");
    let h0 = v1sq0 - 0.5;
    if h0 == 0.0 {
        // The symmetric point is a fixed point of the flow.
        return 0.5;
    }
    let c = 1.0 / (4.0 * h0 * h0) - 1.0;
    0.5 + h0.signum() * 0.5 / (1.0 + c * (-2.0 * gap * t).exp()).sqrt()
}

/// Auxiliary scalar ODE dy/dt = y^2 (1 - y) from y(0) = 2/(d+1): first time
/// T0 with y(T0) = 1 - delta. Satisfies T0 <= d - 3 + 4 log((2 delta)^-1).
pub fn aux_ode_time(d: usize, delta: f64) -> f64 {
    assert!(d >= 2, "dimension {d} below 2");
    assert!(
        delta > 0.0 && delta < 0.5,
        "delta {delta} outside (0, 1/2)"
    );
    let mut y = 2.0 / (d as f64 + 1.0);
    let target = 1.0 - delta;
    if y >= target {
        return 0.0;
    }
    let rhs = |y: f64| y * y * (1.0 - y);
    let h = 1e-3;
    let mut t = 0.0;
    let horizon = 1.5 * ((d as f64 - 3.0).max(0.0) + 4.0 * (1.0 / (2.0 * delta)).ln()) + 2.0;
    while t < horizon {
        let k1 = rhs(y);
        let k2 = rhs(y + 0.5 * h * k1);
        let k3 = rhs(y + 0.5 * h * k2);
        let k4 = rhs(y + h * k3);
        let next = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if next >= target {
            return t + h * (target - y) / (next - y);
        }
        y = next;
        t += h;
    }
    unreachable!("auxiliary ODE failed to reach 1 - delta within its proven bound");
}

/// Time for the ODE flow to carry the dominant squared coordinate from a
/// gap-condition start (top squared coordinate at least twice every other)
/// to 1 - delta. Crossing located by linear interpolation on the default
/// grid, so the result carries one-grid-step uncertainty. Satisfies
/// T0/(2 gap) <= T <= T0/gap against aux_ode_time for the canonical start
/// with the top coordinate exactly at ratio 2.
pub fn traverse_time(v0: &[f64], gap: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "delta {delta} outside (0, 1/2)"
        )));
    }
    let d = v0.len();
    let k0 = (0..d)
        .max_by(|&a, &b| (v0[a] * v0[a]).total_cmp(&(v0[b] * v0[b])))
        .ok_or_else(|| Error::InvalidArgument("empty state".into()))?;
    let top = v0[k0] * v0[k0];
    for (k, x) in v0.iter().enumerate() {
        if k != k0 && top < 2.0 * x * x - 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "gap condition violated: coordinate {k} has squared value {} > half of the top {}",
                x * x,
                top
            )));
        }
    }
    let target = 1.0 - delta;
    if top >= target {
        return Ok(0.0);
    }
    let bound = (d as f64 - 3.0).max(0.0) + 4.0 * (1.0 / (2.0 * delta)).ln();
    let horizon = (1.5 * bound + 2.0) / gap;
    let sol = ode_solve(v0, gap, horizon, default_ode_step(gap))?;
    for i in 1..sol.times.len() {
        let g = sol.values[i][k0] * sol.values[i][k0];
        if g >= target {
            let prev = sol.values[i - 1][k0] * sol.values[i - 1][k0];
            let frac = (target - prev) / (g - prev);
            return Ok(sol.times[i - 1] + frac * (sol.times[i] - sol.times[i - 1]));
        }
    }
    Err(Error::NotConverged(format!(
        "threshold 1 - {delta} not crossed within horizon {horizon}, beyond the proven bound"
    )))
}

/// Analytic moments of the mean-reverting limit near a stable equilibrium:
/// dU = -gap U dt + sqrt(psi6) dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuStableMoments {
    pub mean: f64,
    pub second_moment: f64,
}

pub fn ou_stable_moments(u0: f64, gap: f64, psi6: f64, t: f64) -> OuStableMoments {
    assert!(gap > 0.0, "gap {gap} must be positive");
    assert!(psi6 >= 0.0, "diffusion coefficient psi6 = {psi6} negative");
    assert!(t >= 0.0, "time {t} negative");
    let stationary = psi6 / (2.0 * gap);
    OuStableMoments {
        mean: u0 * (-gap * t).exp(),
        second_moment: stationary + (u0 * u0 - stationary) * (-2.0 * gap * t).exp(),
    }
}

/// Analytic statistics of the amplifying limit at the all-ties point:
/// dW = (2 gap / d) W dt + lambda dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuUnstableStats {
    pub mean: f64,
    /// Exact variance of W(t) from the Ito isometry.
    pub variance: f64,
    /// d lambda^2 / (4 gap): variance of the limiting rescaled multiplier,
    /// the large-t truncation of exp(-4 gap t / d) * variance.
    pub c_variance: f64,
}

pub fn ou_unstable_stats(w0: f64, gap: f64, d: usize, lambda: f64, t: f64) -> OuUnstableStats {
    assert!(gap > 0.0, "gap {gap} must be positive");
    assert!(d >= 2, "dimension {d} below 2");
    assert!(lambda >= 0.0, "diffusion lambda = {lambda} negative");
    assert!(t >= 0.0, "time {t} negative");
    let rate = 2.0 * gap / d as f64;
    let c_variance = d as f64 * lambda * lambda / (4.0 * gap);
    OuUnstableStats {
        mean: w0 * (rate * t).exp(),
        variance: c_variance * ((2.0 * rate * t).exp() - 1.0),
        c_variance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuKind {
    Stable,
    Unstable,
}

/// Drift/diffusion bundle for the first-order stochastic integrator.
#[derive(Debug, Clone, Copy)]
pub struct OuParams {
    pub kind: OuKind,
    pub gap: f64,
    pub dimension: usize,
    pub diffusion: f64,
    pub initial: f64,
}

impl OuParams {
    pub fn stable(gap: f64, psi6: f64, initial: f64) -> Self {
        assert!(gap > 0.0 && psi6 >= 0.0);
        OuParams {
            kind: OuKind::Stable,
            gap,
            dimension: 0,
            diffusion: psi6.sqrt(),
            initial,
        }
    }

    pub fn unstable(gap: f64, dimension: usize, lambda_sq: f64, initial: f64) -> Self {
        assert!(gap > 0.0 && dimension >= 2 && lambda_sq >= 0.0);
        OuParams {
            kind: OuKind::Unstable,
            gap,
            dimension,
            diffusion: lambda_sq.sqrt(),
            initial,
        }
    }

    fn drift(&self, x: f64) -> f64 {
        match self.kind {
            OuKind::Stable => -self.gap * x,
            OuKind::Unstable => 2.0 * self.gap / self.dimension as f64 * x,
        }
    }
}

/// Euler-Maruyama path x <- x + drift(x) h + diffusion sqrt(h) xi, recorded
/// at every grid point. Deterministic per generator state.
pub fn simulate_sde(
    params: &OuParams,
    horizon: f64,
    step: f64,
    rng: &mut impl Rng,
) -> Vec<(f64, f64)> {
    assert!(
        params.gap * step < 0.1,
        "step {step} too coarse: gap * step = {} >= 0.1",
        params.gap * step
    );
    assert!(horizon >= 0.0 && step > 0.0);
    let n = if horizon == 0.0 {
        0
    } else {
        ((horizon / step - 1e-12).ceil() as usize).max(1)
    };
    let h = if n == 0 { step } else { horizon / n as f64 };
    let sqrt_h = h.sqrt();
    let mut x = params.initial;
    let mut path = Vec::with_capacity(n + 1);
    path.push((0.0, x));
    for i in 1..=n {
        let xi: f64 = rng.sample(StandardNormal);
        x += params.drift(x) * h + params.diffusion * sqrt_h * xi;
        path.push((if i == n { horizon } else { i as f64 * h }, x));
    }
    path
}

/// Terminal values of `paths` independent integrations, one generator
/// stream per path index; order is by path index for any worker count.
pub fn sde_ensemble_finals(
    params: &OuParams,
    horizon: f64,
    step: f64,
    master_seed: u64,
    paths: u64,
) -> Vec<f64> {
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = replicate_rng(master_seed, p);
            simulate_sde(params, horizon, step, &mut rng)
                .last()
                .expect("path records at least t = 0")
                .1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gapped_start(d: usize) -> Vec<f64> {
        let base = 1.0 / (d as f64 + 1.0);
        let mut v = vec![base.sqrt(); d];
        v[0] = (2.0 * base).sqrt();
        v
    }

    /// Exact antiderivative of 1/(y^2 (1 - y)): partial fractions give
    /// 1/y^2 + 1/y + 1/(1-y), so F(y) = -1/y + log(y/(1-y)).
    fn aux_antiderivative(y: f64) -> f64 {
        -1.0 / y + (y / (1.0 - y)).ln()
    }

    /// Invert the d = 2 closed form: time for V_1^2 to reach g from g0.
    fn closed_form_inverse(v1sq0: f64, gap: f64, g: f64) -> f64 {
        let c = 1.0 / (2.0 * v1sq0 - 1.0).powi(2) - 1.0;
        (c / ((2.0 * g - 1.0).powi(-2) - 1.0)).ln() / (2.0 * gap)
    }

    #[test]
    fn rhs_vanishes_at_equilibria() {
        assert!(ode_rhs(&[1.0, 0.0, 0.0], 2.0).iter().all(|&x| x == 0.0));
        let c = 1.0 / 3.0f64.sqrt();
        // All-ties point: v_k^2 - sum v^4 cancels only to rounding.
        assert!(ode_rhs(&[c, c, c], 2.0).iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn rhs_hand_value_d2() {
        // V = (sqrt(2/3), sqrt(1/3)), gap 2: sum V^4 = 4/9 + 1/9, so
        // dV_1/dt = 2 sqrt(2/3) (2/3 - 5/9) = 2 sqrt(2/3) / 9.
        let v = [(2.0f64 / 3.0).sqrt(), (1.0f64 / 3.0).sqrt()];
        let rhs = ode_rhs(&v, 2.0);
        let expected = 2.0 * (2.0f64 / 3.0).sqrt() / 9.0;
        assert!(
            (rhs[0] - expected).abs() < 1e-15,
            "got {} expected {expected}",
            rhs[0]
        );
        assert!(rhs[1] < 0.0, "dominated coordinate shrinks");
    }

    #[test]
    fn solve_constant_at_stable_equilibrium() {
        let sol = ode_solve(&[0.0, 1.0], 2.0, 5.0, 1e-3).unwrap();
        for v in &sol.values {
            assert_eq!(v, &vec![0.0, 1.0], "e_2 is a fixed point");
        }
    }

    #[test]
    fn solve_rejects_non_unit_start() {
        assert!(ode_solve(&[1.0, 1.0], 2.0, 1.0, 1e-3).is_err());
    }

    #[test]
    fn halving_check_passes_on_default_step() {
        let sol = ode_solve_checked(&gapped_start(4), 1.0, 5.0, default_ode_step(1.0)).unwrap();
        assert!(sol.norm_defect() < 1e-10);
    }

    #[test]
    fn closed_form_fixed_points_and_limits() {
        assert_eq!(closed_form_d2(0.5, 2.0, 7.0), 0.5, "symmetric point stays");
        assert!((closed_form_d2(2.0 / 3.0, 2.0, 1e6) - 1.0).abs() < 1e-12);
        assert!(closed_form_d2(1.0 / 3.0, 2.0, 1e6).abs() < 1e-12, "lower branch dies");
        assert!((closed_form_d2(0.7, 3.0, 0.0) - 0.7).abs() < 1e-15, "t = 0 recovers start");
        // v1sq0 = 2/3, gap 2, t = 1: C = 8, value 0.5 + 0.5 (1 + 8 e^-4)^-1/2.
        assert!((closed_form_d2(2.0 / 3.0, 2.0, 1.0) - 0.96695842858188).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_integrator_and_rate_is_twice_gap() {
        let gap = 2.0;
        let g0 = 2.0f64 / 3.0;
        let v0 = [g0.sqrt(), (1.0 - g0).sqrt()];
        let sol = ode_solve(&v0, gap, 10.0, default_ode_step(gap)).unwrap();
        let mut worst = 0.0f64;
        for (t, v) in sol.times.iter().zip(&sol.values) {
            worst = worst.max((v[0] * v[0] - closed_form_d2(g0, gap, *t)).abs());
        }
        assert!(worst < 1e-6, "sup deviation {worst}");

        // Fit the late-time decay of 1 - V_1^2 from the integrator alone:
        // the slope of its logarithm is -2 gap, not -gap.
        let g = |t: f64| {
            let v = sol.value_at(t);
            v[0] * v[0]
        };
        let rate = ((1.0 - g(3.0)).ln() - (1.0 - g(4.0)).ln()) / 1.0;
        assert!(
            (rate - 2.0 * gap).abs() < 0.02 * 2.0 * gap,
            "fitted decay rate {rate} vs 2 gap = {}",
            2.0 * gap
        );
    }

    #[test]
    fn closed_form_matches_integrator_random_starts() {
        let mut rng = replicate_rng(7, 0);
        for _ in 0..5 {
            let mut g0: f64 = rng.random_range(0.02..0.98);
            if (g0 - 0.5).abs() < 0.02 {
                g0 += 0.1;
            }
            let gap = rng.random_range(0.5..4.0);
            let v0 = [g0.sqrt(), (1.0 - g0).sqrt()];
            let sol = ode_solve(&v0, gap, 10.0, default_ode_step(gap)).unwrap();
            for (t, v) in sol.times.iter().zip(&sol.values) {
                let cf = closed_form_d2(g0, gap, *t);
                assert!(
                    (v[0] * v[0] - cf).abs() < 1e-6,
                    "g0 = {g0}, gap = {gap}, t = {t}"
                );
            }
        }
    }

    #[test]
    fn aux_time_matches_quadrature_and_bound() {
        for &(d, delta) in &[(3usize, 0.1), (5, 0.1), (10, 0.25), (20, 0.05)] {
            let t0 = aux_ode_time(d, delta);
            let exact =
                aux_antiderivative(1.0 - delta) - aux_antiderivative(2.0 / (d as f64 + 1.0));
            assert!(
                (t0 - exact).abs() < 1e-6,
                "d = {d}, delta = {delta}: integrated {t0} vs exact {exact}"
            );
            let bound = (d as f64 - 3.0).max(0.0) + 4.0 * (1.0 / (2.0 * delta)).ln();
            assert!(t0 <= bound, "d = {d}, delta = {delta}: {t0} > bound {bound}");
        }
        // d = 3, delta = 0.1: y0 = 1/2, F(0.9) - F(0.5) = 3.086114.
        assert!((aux_ode_time(3, 0.1) - 3.086114).abs() < 1e-4);
    }

    #[test]
    fn traverse_time_examples() {
        // Already past the threshold.
        let v0 = [0.8f64.sqrt(), 0.2f64.sqrt()];
        assert_eq!(traverse_time(&v0, 2.0, 0.25).unwrap(), 0.0);

        // Gap condition violated: squared ratio below 2.
        let bad = [0.6f64.sqrt(), 0.4f64.sqrt()];
        assert!(traverse_time(&bad, 2.0, 0.1).is_err());

        // d = 2 canonical start 2/3: invert the closed form for the oracle.
        let v0 = [(2.0f64 / 3.0).sqrt(), (1.0f64 / 3.0).sqrt()];
        let t = traverse_time(&v0, 2.0, 0.1).unwrap();
        let exact = closed_form_inverse(2.0 / 3.0, 2.0, 0.9);
        assert!(
            (t - exact).abs() < 1e-3,
            "measured {t} vs inverted closed form {exact}"
        );
        assert!((exact - 0.66370).abs() < 1e-4, "hand value check");
    }

    #[test]
    fn traverse_sandwich_canonical_starts() {
        for &(d, gap, delta) in &[(3usize, 2.0, 0.1), (5, 1.0, 0.1), (10, 2.0, 0.1)] {
            let t = traverse_time(&gapped_start(d), gap, delta).unwrap();
            let t0 = aux_ode_time(d, delta);
            assert!(
                t0 / (2.0 * gap) <= t && t <= t0 / gap,
                "d = {d}: T = {t} outside [{}, {}]",
                t0 / (2.0 * gap),
                t0 / gap
            );
        }
        // d = 10, delta = 0.1, gap = 2: printed bound (7 + 4 log 5)/2.
        let t = traverse_time(&gapped_start(10), 2.0, 0.1).unwrap();
        let bound = (7.0 + 4.0 * 5.0f64.ln()) / 2.0;
        assert!((bound - 6.71888).abs() < 1e-4);
        assert!(t <= bound, "T = {t} above the printed bound {bound}");
    }

    #[test]
    fn flow_invariants_long_horizon() {
        // Three-point a = 2 profile: gap 1; canonical gapped start, d = 5.
        let sol = ode_solve(&gapped_start(5), 1.0, 50.0, 1e-3).unwrap();
        assert!(
            sol.norm_defect() < 1e-8,
            "norm defect {} over [0, 50]",
            sol.norm_defect()
        );
        for (t, v) in sol.times.iter().zip(&sol.values) {
            let top = v[0] * v[0];
            for x in &v[1..] {
                assert!(top >= 2.0 * x * x - 1e-9, "gap persistence fails at t = {t}");
            }
            // Drift sandwich for the dominant squared coordinate.
            let rhs = ode_rhs(v, sol.gap);
            let dtop = 2.0 * v[0] * rhs[0];
            let lo = sol.gap * top * top * (1.0 - top);
            let hi = 2.0 * sol.gap * top * top * (1.0 - top);
            assert!(
                lo - 1e-12 <= dtop && dtop <= hi + 1e-12,
                "sandwich fails at t = {t}: {lo} <= {dtop} <= {hi}"
            );
        }
        // Dominated-to-dominant squared log-ratios never increase.
        for k in 1..5 {
            let mut prev = f64::INFINITY;
            for v in &sol.values {
                let ratio = (v[k] * v[k]).ln() - (v[0] * v[0]).ln();
                assert!(ratio <= prev + 1e-9, "log-ratio of coordinate {k} increased");
                prev = ratio;
            }
        }
    }

    #[test]
    fn ou_stable_pins() {
        let m = ou_stable_moments(0.7, 2.0, 1.5, 0.0);
        assert_eq!(m.mean, 0.7);
        assert!((m.second_moment - 0.49).abs() < 1e-15);

        let late = ou_stable_moments(0.7, 2.0, 1.5, f64::INFINITY);
        assert_eq!(late.mean, 0.0);
        assert!((late.second_moment - 1.5 / 4.0).abs() < 1e-15, "psi6 / (2 gap)");

        // Stationary start keeps the second moment flat.
        let u0 = (1.5f64 / 4.0).sqrt();
        for &t in &[0.0, 0.3, 2.0, 11.0] {
            let m = ou_stable_moments(u0, 2.0, 1.5, t);
            assert!((m.second_moment - u0 * u0).abs() < 1e-15, "t = {t}");
        }
    }

    #[test]
    fn ou_unstable_pins() {
        let s = ou_unstable_stats(0.4, 2.0, 3, (8.0f64 / 9.0).sqrt(), 0.0);
        assert_eq!(s.mean, 0.4);
        assert_eq!(s.variance, 0.0);
        assert!(
            (s.c_variance - 1.0 / 3.0).abs() < 1e-15,
            "d lambda^2 / (4 gap) = 3 (8/9) / 8"
        );

        let s = ou_unstable_stats(0.0, 2.0, 3, 1.0, 4.5);
        assert_eq!(s.mean, 0.0, "zero start stays centered");
        // Rescaled variance approaches c_variance from below.
        let rescaled = (-4.0f64 * 2.0 * 4.5 / 3.0).exp() * s.variance;
        assert!(rescaled < s.c_variance);
        assert!((rescaled - s.c_variance).abs() < 1e-5 * s.c_variance);
    }

    #[test]
    fn em_deterministic_decay_is_first_order() {
        let params = OuParams::stable(1.0, 0.0, 1.0);
        let exact = (-2.0f64).exp();
        let final_at = |h: f64| {
            let mut rng = replicate_rng(0, 0);
            simulate_sde(&params, 2.0, h, &mut rng).last().unwrap().1
        };
        let err_h = (final_at(0.01) - exact).abs();
        let err_h2 = (final_at(0.005) - exact).abs();
        assert!(err_h < 1.0 * 1.0 * 2.0 * 0.01, "O(h) error bound");
        let ratio = err_h / err_h2;
        assert!(
            (ratio - 2.0).abs() < 0.3,
            "halving the step should halve the error, ratio {ratio}"
        );
    }

    #[test]
    fn em_matches_stable_moments_monte_carlo() {
        let gap = 2.0;
        let psi6 = 1.5;
        let params = OuParams::stable(gap, psi6, 1.0);
        let horizon = 2.5; // gap t = 5
        let finals = sde_ensemble_finals(&params, horizon, 0.002, 11, 10_000);
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let second = finals.iter().map(|x| x * x).sum::<f64>() / n;
        let analytic = ou_stable_moments(1.0, gap, psi6, horizon);
        assert!(
            (second - analytic.second_moment).abs() < 0.05 * analytic.second_moment,
            "second moment {second} vs analytic {}",
            analytic.second_moment
        );
        let mean_se = (analytic.second_moment / n).sqrt();
        assert!(
            (mean - analytic.mean).abs() < 5.0 * mean_se,
            "mean {mean} vs analytic {} (se {mean_se})",
            analytic.mean
        );
    }

    #[test]
    fn em_matches_unstable_variance_monte_carlo() {
        let gap = 2.0;
        let d = 3;
        let lambda_sq = 8.0 / 9.0;
        let params = OuParams::unstable(gap, d, lambda_sq, 0.0);
        let horizon = 3.0; // gap t / d = 2
        let finals = sde_ensemble_finals(&params, horizon, 0.005, 13, 10_000);
        let n = finals.len() as f64;
        let scale = (-2.0 * gap * horizon / d as f64).exp();
        let rescaled: Vec<f64> = finals.iter().map(|x| scale * x).collect();
        let mean = rescaled.iter().sum::<f64>() / n;
        let var = rescaled.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let stats = ou_unstable_stats(0.0, gap, d, lambda_sq.sqrt(), horizon);
        let target = scale * scale * stats.variance;
        assert!(
            (var - target).abs() < 0.05 * target,
            "rescaled variance {var} vs analytic {target}"
        );
        assert!(mean.abs() < 5.0 * (target / n).sqrt(), "centered escape statistic");
    }
}
