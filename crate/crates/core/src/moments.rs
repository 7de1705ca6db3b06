//! Exact moment engine.
//!
//! Everything here is computed in exact rational arithmetic: weighted power
//! moments E(sum_i v_i Y_i)^p via hard-coded even-partition tables, the cross
//! moments Q1 = E(sum Y)^6 Y_k^2 and Q2 = E(sum Y)^6 Y_k Y_k' via explicit
//! partition counting, and an exhaustive-enumeration oracle over finite
//! supports. Floating point appears only at the call boundary, so oracle
//! tests are exact-equality tests.
//!
//! The literature's printed closed forms for Q1, E(sum Y)^8 and Lambda^2 are
//! reproduced verbatim in [`printed_formulas`] for the discrepancy report;
//! they are never used by any simulator or predictor in this crate.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::source::SourceSpec;
use crate::{Error, Result};

/// Largest outcome count the exhaustive enumerator will visit.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;

pub(crate) fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub(crate) fn int(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Exact dyadic rational equal to the given finite float.
pub(crate) fn from_f64(x: f64) -> Result<BigRational> {
    BigRational::from_float(x)
        .ok_or_else(|| Error::InvalidArgument(format!("non-finite value {x}")))
}

/// Moments psi_m = E Y^m of one source coordinate, m = 1..=8.
///
/// Stored exactly. Odd moments are zero (symmetric law) and psi_2 = 1
/// (unit variance) by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    psi: [BigRational; 9],
}

impl MomentTable {
    /// Builds a table from the even moments; odd moments are fixed at zero.
    ///
    /// Rejects tables violating psi2 = 1, psi4 >= 1 (Jensen on unit
    /// variance) or psi6 >= psi4^2 (Cauchy-Schwarz on Y * Y^2).
    pub fn new(
        psi2: BigRational,
        psi4: BigRational,
        psi6: BigRational,
        psi8: BigRational,
    ) -> Result<Self> {
        if !psi2.is_one() {
            return Err(Error::InvalidSource(format!("psi2 = {psi2}, expected 1")));
        }
        if psi4 < int(1) {
            return Err(Error::InvalidSource(format!("psi4 = {psi4} < 1")));
        }
        if psi6 < &psi4 * &psi4 {
            return Err(Error::InvalidSource(format!(
                "psi6 = {psi6} < psi4^2 = {}",
                &psi4 * &psi4
            )));
        }
        let z = BigRational::zero;
        Ok(Self {
            psi: [z(), z(), psi2, z(), psi4, z(), psi6, z(), psi8],
        })
    }

    /// psi_m for m in 1..=8.
    pub fn psi(&self, m: usize) -> &BigRational {
        assert!((1..=8).contains(&m), "moment order {m} out of range");
        &self.psi[m]
    }

    pub fn psi_f64(&self, m: usize) -> f64 {
        self.psi(m).to_f64().expect("moment fits in f64")
    }

    /// Tensor gap |psi4 - 3| as an exact rational.
    pub fn tensor_gap_exact(&self) -> BigRational {
        (self.psi(4) - int(3)).abs()
    }

    /// Tensor gap |psi4 - 3|.
    pub fn tensor_gap(&self) -> f64 {
        self.tensor_gap_exact().to_f64().expect("gap fits in f64")
    }

    /// Sign of psi4 - 3: +1.0 above the Gaussian value, -1.0 below, 0.0 at it.
    pub fn gap_sign(&self) -> f64 {
        let diff = self.psi(4) - int(3);
        if diff.is_positive() {
            1.0
        } else if diff.is_negative() {
            -1.0
        } else {
            0.0
        }
    }
}

/// Sixth-order cross moments of S = sum_i Y_i and the escape-noise
/// coefficient Lambda^2 = 8 d^{-2} (Q1 - Q2), all exact.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMoments {
    /// E S^6 Y_k^2 (any k).
    pub q1: BigRational,
    /// E S^6 Y_k Y_k' (any k != k').
    pub q2: BigRational,
    /// E S^8.
    pub eighth: BigRational,
    /// 8 d^{-2} (Q1 - Q2).
    pub lambda_sq: BigRational,
}

impl CrossMoments {
    pub fn q1_f64(&self) -> f64 {
        self.q1.to_f64().expect("q1 fits in f64")
    }

    pub fn q2_f64(&self) -> f64 {
        self.q2.to_f64().expect("q2 fits in f64")
    }

    pub fn eighth_f64(&self) -> f64 {
        self.eighth.to_f64().expect("eighth fits in f64")
    }

    pub fn lambda_sq_f64(&self) -> f64 {
        self.lambda_sq.to_f64().expect("lambda_sq fits in f64")
    }
}

/// Falling factorial d (d-1) ... (d-r+1) ways to assign r distinct labeled
/// slots to d coordinates; zero when r > d.
fn falling(d: usize, r: usize) -> BigRational {
    let mut acc = BigRational::one();
    for j in 0..r {
        if j >= d {
            return BigRational::zero();
        }
        acc *= int((d - j) as i64);
    }
    acc
}

/// Binomial coefficient C(n, k) as a rational; zero when k > n.
fn choose(n: usize, k: usize) -> BigRational {
    if k > n {
        return BigRational::zero();
    }
    let mut acc = BigRational::one();
    for j in 0..k {
        acc *= rat((n - j) as i64, (j + 1) as i64);
    }
    acc
}

/// E (sum_i v_i Y_i)^p for even p <= 8, exact in the weights.
///
/// The expansion iterates the even-exponent partitions of p; odd-exponent
/// monomials vanish by symmetry. With w_i = v_i^2 and power sums
/// S_r = sum_i w_i^r, the per-partition sums over distinct coordinates are
/// (multinomial coefficient in front, psi2 = 1 factors omitted):
///
/// p = 2:  (2): S_1
/// p = 4:  (4): psi4 S_2;  (2,2) coeff 6 over pairs: 3 (S_1^2 - S_2)
/// p = 6:  (6): psi6 S_3;  (4,2) coeff 15 ordered: 15 psi4 (S_1 S_2 - S_3);
///         (2,2,2) coeff 90 over triples: 15 (S_1^3 - 3 S_1 S_2 + 2 S_3)
/// p = 8:  (8): psi8 S_4;  (6,2) coeff 28 ordered: 28 psi6 (S_1 S_3 - S_4);
///         (4,4) coeff 70 over pairs: 35 psi4^2 (S_2^2 - S_4);
///         (4,2,2) coeff 420: 210 psi4 (S_1^2 S_2 - 2 S_1 S_3 + 2 S_4 - S_2^2);
///         (2,2,2,2) coeff 2520 over quadruples:
///             105 (S_1^4 - 6 S_1^2 S_2 + 3 S_2^2 + 8 S_1 S_3 - 6 S_4)
pub fn expect_weighted_power_exact(
    weights: &[BigRational],
    p: usize,
    moments: &MomentTable,
) -> Result<BigRational> {
    if !matches!(p, 2 | 4 | 6 | 8) {
        return Err(Error::InvalidArgument(format!(
            "power {p} not in {{2, 4, 6, 8}}"
        )));
    }
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    let w: Vec<BigRational> = weights.iter().map(|v| v * v).collect();
    let mut s = [BigRational::zero(), BigRational::zero(), BigRational::zero(), BigRational::zero()];
    for wi in &w {
        let mut pow = wi.clone();
        for sr in s.iter_mut() {
            *sr += &pow;
            pow *= wi;
        }
    }
    let [s1, s2, s3, s4] = s;
    let psi4 = moments.psi(4);
    let psi6 = moments.psi(6);
    let psi8 = moments.psi(8);
    let value = match p {
        2 => s1,
        4 => psi4 * &s2 + int(3) * (&s1 * &s1 - &s2),
        6 => {
            psi6 * &s3
                + int(15) * psi4 * (&s1 * &s2 - &s3)
                + int(15) * (&s1 * &s1 * &s1 - int(3) * &s1 * &s2 + int(2) * &s3)
        }
        8 => {
            let s1s1 = &s1 * &s1;
            psi8 * &s4
                + int(28) * psi6 * (&s1 * &s3 - &s4)
                + int(35) * psi4 * psi4 * (&s2 * &s2 - &s4)
                + int(210)
                    * psi4
                    * (&s1s1 * &s2 - int(2) * &s1 * &s3 + int(2) * &s4 - &s2 * &s2)
                + int(105)
                    * (&s1s1 * &s1s1 - int(6) * &s1s1 * &s2
                        + int(3) * &s2 * &s2
                        + int(8) * &s1 * &s3
                        - int(6) * &s4)
        }
        _ => unreachable!(),
    };
    Ok(value)
}

/// E (sum_i v_i Y_i)^p for even p <= 8.
///
/// The float weights are lifted to exact dyadic rationals, so the only
/// rounding is the final conversion back to f64.
pub fn expect_weighted_power(weights: &[f64], p: usize, moments: &MomentTable) -> Result<f64> {
    let exact: Vec<BigRational> = weights.iter().map(|&v| from_f64(v)).collect::<Result<_>>()?;
    let value = expect_weighted_power_exact(&exact, p, moments)?;
    Ok(value.to_f64().expect("moment fits in f64"))
}

/// Population objective E (u^T X)^4 = 3 + (psi4 - 3) sum_i (a_i^T u)^4
/// for unit u under the mixing model with columns a_i.
pub fn fourth_moment_objective(
    u: &[f64],
    model: &crate::source::MixingModel,
    moments: &MomentTable,
) -> Result<f64> {
    if u.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: u.len(),
        });
    }
    let norm_sq: f64 = u.iter().map(|x| x * x).sum();
    if (norm_sq.sqrt() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "u is not a unit vector: |u| = {}",
            norm_sq.sqrt()
        )));
    }
    let mut quartic = 0.0;
    for i in 0..model.dim() {
        let proj: f64 = model.column(i).iter().zip(u).map(|(a, b)| a * b).sum();
        quartic += proj.powi(4);
    }
    Ok(3.0 + (moments.psi_f64(4) - 3.0) * quartic)
}

/// Q1, Q2, E S^8 and Lambda^2 by multinomial expansion.
///
/// Q1 and Q2 are assembled by explicit partition counting and E S^8 through
/// the weighted-power engine, so the identity d Q1 + d(d-1) Q2 = E S^8 is a
/// genuine cross-check of independent derivations, not true by construction.
pub fn cross_moments(d: usize, moments: &MomentTable) -> Result<CrossMoments> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross moments need d >= 2, got {d}"
        )));
    }
    let psi4 = moments.psi(4);
    let psi6 = moments.psi(6);
    let psi8 = moments.psi(8);

    // Q1 = E S^6 Y_k^2: even partitions of 6 with the extra Y_k^2 factor
    // placed on k. Counts are over the d - 1 coordinates other than k.
    //
    //   (6)      coeff 1:  on k -> psi8; elsewhere -> psi6
    //   (4,2)    coeff 15: 4 on k -> psi6; 2 on k -> psi4^2;
    //            k untouched (ordered pair elsewhere) -> psi4
    //   (2,2,2)  coeff 90: k in the triple -> psi4; k outside -> 1
    let q1 = psi8
        + falling(d - 1, 1) * psi6
        + int(15)
            * (falling(d - 1, 1) * psi6
                + falling(d - 1, 1) * psi4 * psi4
                + falling(d - 1, 2) * psi4)
        + int(90) * (choose(d - 1, 2) * psi4 + choose(d - 1, 3));

    // Q2 = E S^6 Y_k Y_k' (k != k'): partitions of 6 with exactly two odd
    // parts, which must land on k and k' to keep all total exponents even.
    //
    //   (5,1)     coeff 6:   {5,1} on {k,k'} two ways -> psi6
    //   (3,3)     coeff 20:  {3,3} on {k,k'} -> psi4^2
    //   (4,1,1)   coeff 30:  1s on k,k'; 4 on a third coordinate -> psi4
    //   (3,2,1)   coeff 60:  {3,1} on {k,k'} two ways; 2 on a third -> psi4
    //   (2,2,1,1) coeff 180: 1s on k,k'; 2s on a pair of the rest -> 1
    let q2 = int(12) * psi6
        + int(20) * psi4 * psi4
        + int(30) * falling(d - 2, 1) * psi4
        + int(120) * falling(d - 2, 1) * psi4
        + int(180) * choose(d - 2, 2);

    let ones = vec![BigRational::one(); d];
    let eighth = expect_weighted_power_exact(&ones, 8, moments)?;

    let lambda_sq = rat(8, 1) / int((d * d) as i64) * (&q1 - &q2);
    Ok(CrossMoments {
        q1,
        q2,
        eighth,
        lambda_sq,
    })
}

/// Literal evaluations of the printed closed forms for Q1, E S^8 and
/// Lambda^2, kept solely for the discrepancy report.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintedFormulas {
    pub q1_printed: BigRational,
    pub eighth_printed: BigRational,
    pub lambda_sq_printed: BigRational,
}

pub fn printed_formulas(d: usize, moments: &MomentTable) -> Result<PrintedFormulas> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "printed formulas need d >= 2, got {d}"
        )));
    }
    let di = d as i64;
    let psi4 = moments.psi(4);
    let psi6 = moments.psi(6);
    let psi8 = moments.psi(8);

    let q1_printed = psi8
        + int(16 * (di - 1)) * psi6
        + int(15 * (di - 1)) * psi4 * psi4
        + int(60 * (di - 1) * (di - 2)) * psi4
        + int(30 * (di - 1) * (di - 2) * (di - 3));

    let eighth_printed = int(di) * psi8
        + int(28 * di * (di - 1)) * psi6
        + int(35 * di * (di - 1)) * (int(1) + int(12 * (di - 1) * (di - 2))) * psi4
        + int(105 * di * (di - 1) * (di - 2) * (di - 3));

    let lambda_sq_printed = rat(8, di * di)
        * (psi8
            + int(16 * di - 28) * psi6
            + int(15 * di) * psi4 * psi4
            - int(5 * (72 * di * di - 228 * di + 175)) * psi4
            + int(15 * (2 * di - 7) * (di - 2) * (di - 3)));

    Ok(PrintedFormulas {
        q1_printed,
        eighth_printed,
        lambda_sq_printed,
    })
}

fn support_size_check(spec: &SourceSpec, support_len: usize) -> Result<()> {
    let mut states: u128 = 1;
    for _ in 0..spec.dim() {
        states = states
            .checked_mul(support_len as u128)
            .unwrap_or(u128::MAX);
        if states > ENUMERATION_BUDGET {
            return Err(Error::EnumerationBudget {
                states,
                budget: ENUMERATION_BUDGET,
            });
        }
    }
    Ok(())
}

/// Exact probability-weighted sum of f over all support^d outcomes.
///
/// The independent brute-force oracle: no moment algebra, just the law of Y.
pub fn enumeration_expectation<F>(spec: &SourceSpec, f: F) -> Result<BigRational>
where
    F: Fn(&[BigRational]) -> BigRational,
{
    let support = spec.finite_support().ok_or_else(|| {
        Error::NoFiniteSupport(format!("{} has continuous support", spec.kind_name()))
    })?;
    support_size_check(spec, support.len())?;
    let d = spec.dim();
    let mut idx = vec![0usize; d];
    let mut outcome: Vec<BigRational> = vec![BigRational::zero(); d];
    let mut acc = BigRational::zero();
    loop {
        let mut prob = BigRational::one();
        for (k, &i) in idx.iter().enumerate() {
            outcome[k] = support[i].0.clone();
            prob *= &support[i].1;
        }
        acc += prob * f(&outcome);
        // Odometer increment over the outcome space.
        let mut k = 0;
        loop {
            if k == d {
                return Ok(acc);
            }
            idx[k] += 1;
            if idx[k] < support.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Probability-weighted sum of a vector-valued f in floating point, for
/// integrands that involve irrational operations (norms, projections).
pub fn enumeration_expectation_vec_f64<F>(spec: &SourceSpec, out_len: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let support = spec.finite_support().ok_or_else(|| {
        Error::NoFiniteSupport(format!("{} has continuous support", spec.kind_name()))
    })?;
    support_size_check(spec, support.len())?;
    let values: Vec<f64> = support
        .iter()
        .map(|(v, _)| v.to_f64().expect("support value fits in f64"))
        .collect();
    let probs: Vec<f64> = support
        .iter()
        .map(|(_, p)| p.to_f64().expect("probability fits in f64"))
        .collect();
    let d = spec.dim();
    let mut idx = vec![0usize; d];
    let mut outcome = vec![0.0; d];
    let mut buf = vec![0.0; out_len];
    let mut acc = vec![0.0; out_len];
    loop {
        let mut prob = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            outcome[k] = values[i];
            prob *= probs[i];
        }
        f(&outcome, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += prob * b;
        }
        let mut k = 0;
        loop {
            if k == d {
                return Ok(acc);
            }
            idx[k] += 1;
            if idx[k] < support.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Scalar form of [`enumeration_expectation_vec_f64`].
pub fn enumeration_expectation_f64<F>(spec: &SourceSpec, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let v = enumeration_expectation_vec_f64(spec, 1, |y, out| out[0] = f(y))?;
    Ok(v[0])
}
