//! Source models: bounded symmetric product laws Y and orthonormal mixing
//! models A producing observations X = A Y.
//!
//! Three built-in laws cover both tensor-gap signs and a non-lattice case:
//! rademacher (psi4 = 1), three-point {-a, 0, a} with P(+-a) = 1/(2a^2)
//! (psi4 = a^2), and the scaled uniform on [-sqrt(3), sqrt(3)]
//! (psi4 = 9/5). All moment tables are exact rationals.

use num_rational::BigRational;
use num_traits::{One, Pow, Zero};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::moments::{from_f64, int, rat, MomentTable};
use crate::{Error, Result};

/// Distribution of one source coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    /// Uniform on {-1, +1}.
    Rademacher,
    /// Uniform on [-sqrt(3), sqrt(3)] (unit variance).
    ScaledUniform,
    /// {-a, 0, a} with P(+-a) = 1/(2a^2); requires a >= 1.
    ThreePoint { a: f64 },
}

impl SourceKind {
    pub fn name(&self) -> &'static str {
        match self {
            SourceKind::Rademacher => "rademacher",
            SourceKind::ScaledUniform => "uniform",
            SourceKind::ThreePoint { .. } => "threepoint",
        }
    }
}

/// Exact moment table psi_1..psi_8 for a source kind.
///
/// three-point: psi_2m = a^(2(m-1)); scaled uniform: psi_2m = 3^m / (2m+1).
pub fn source_moments(kind: &SourceKind) -> Result<MomentTable> {
    match kind {
        SourceKind::Rademacher => MomentTable::new(int(1), int(1), int(1), int(1)),
        SourceKind::ScaledUniform => {
            MomentTable::new(int(1), rat(9, 5), rat(27, 7), int(9))
        }
        SourceKind::ThreePoint { a } => {
            if !a.is_finite() || *a < 1.0 {
                return Err(Error::InvalidSource(format!(
                    "three-point support parameter a = {a} must be >= 1 \
                     (P(+-a) = 1/(2a^2) must not exceed 1/2)"
                )));
            }
            let a_sq = from_f64(*a)?.pow(2u32);
            MomentTable::new(
                int(1),
                a_sq.clone(),
                a_sq.clone().pow(2u32),
                a_sq.pow(3u32),
            )
        }
    }
}

/// A source law in dimension d with its exact moments and the almost-sure
/// bound |Y|^2 <= B (B = d * max support value squared).
#[derive(Debug, Clone)]
pub struct SourceSpec {
    kind: SourceKind,
    dim: usize,
    moments: MomentTable,
    bound: f64,
}

impl SourceSpec {
    pub fn new(kind: SourceKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSource("dimension must be positive".into()));
        }
        let moments = source_moments(&kind)?;
        let max_sq = match &kind {
            SourceKind::Rademacher => 1.0,
            SourceKind::ScaledUniform => 3.0,
            SourceKind::ThreePoint { a } => a * a,
        };
        let bound = dim as f64 * max_sq;
        Ok(Self {
            kind,
            dim,
            moments,
            bound,
        })
    }

    pub fn kind(&self) -> &SourceKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn moments(&self) -> &MomentTable {
        &self.moments
    }

    /// Almost-sure bound B with |Y|^2 <= B.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Draws one source vector into `out`; deterministic given the generator.
    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        assert_eq!(out.len(), self.dim, "output buffer length");
        match &self.kind {
            SourceKind::Rademacher => {
                for y in out.iter_mut() {
                    *y = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            SourceKind::ScaledUniform => {
                let s = 3.0f64.sqrt();
                for y in out.iter_mut() {
                    *y = rng.random_range(-s..s);
                }
            }
            SourceKind::ThreePoint { a } => {
                let p = 1.0 / (2.0 * a * a);
                for y in out.iter_mut() {
                    let u: f64 = rng.random();
                    *y = if u < p {
                        *a
                    } else if u < 2.0 * p {
                        -*a
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }

    /// Support atoms with exact probabilities, or None for continuous laws.
    pub fn finite_support(&self) -> Option<Vec<(BigRational, BigRational)>> {
        match &self.kind {
            SourceKind::Rademacher => Some(vec![
                (int(-1), rat(1, 2)),
                (int(1), rat(1, 2)),
            ]),
            SourceKind::ScaledUniform => None,
            SourceKind::ThreePoint { a } => {
                let av = from_f64(*a).expect("validated at construction");
                let p = BigRational::one() / (int(2) * &av * &av);
                let p0 = BigRational::one() - int(2) * &p;
                Some(vec![
                    (-av.clone(), p.clone()),
                    (BigRational::zero(), p0),
                    (av, p),
                ])
            }
        }
    }
}

/// How a mixing matrix was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Identity,
    Haar,
}

/// Orthonormal mixing matrix A with columns a_1..a_d.
#[derive(Debug, Clone)]
pub struct MixingModel {
    cols: Vec<Vec<f64>>,
    provenance: Provenance,
}

impl MixingModel {
    pub fn identity(d: usize) -> Self {
        let cols = (0..d)
            .map(|i| {
                let mut c = vec![0.0; d];
                c[i] = 1.0;
                c
            })
            .collect();
        Self {
            cols,
            provenance: Provenance::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        self.cols.len()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Column a_i.
    pub fn column(&self, i: usize) -> &[f64] {
        &self.cols[i]
    }

    /// X = A Y = sum_i Y_i a_i.
    pub fn observe(&self, y: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: y.len(),
            });
        }
        let mut x = vec![0.0; d];
        for (yi, col) in y.iter().zip(&self.cols) {
            for (xk, ck) in x.iter_mut().zip(col) {
                *xk += yi * ck;
            }
        }
        Ok(x)
    }

    /// A^T u, the coordinates of u in the component frame.
    pub fn transpose_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if u.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: u.len(),
            });
        }
        Ok(self
            .cols
            .iter()
            .map(|col| col.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// max_ij |(A^T A - I)_ij|.
    pub fn orthonormality_defect(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = self.cols[i].iter().zip(&self.cols[j]).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Haar-like random orthogonal matrix: Gram-Schmidt orthogonalization of a
/// matrix of independent standard normals. The normalization step fixes each
/// diagonal of the triangular factor positive, which selects the unique QR
/// factorization and hence the rotation-invariant law.
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Result<MixingModel> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "random orthogonal model needs d >= 2, got {d}"
        )));
    }
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..d {
        // Two projection passes keep the defect near machine precision.
        for _ in 0..2 {
            for i in 0..j {
                let proj: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let prev = cols[i].clone();
                for (x, p) in cols[j].iter_mut().zip(&prev) {
                    *x -= proj * p;
                }
            }
        }
        let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InvalidArgument(
                "orthogonalization collapsed; degenerate normal draw".into(),
            ));
        }
        for x in cols[j].iter_mut() {
            *x /= norm;
        }
    }
    let model = MixingModel {
        cols,
        provenance: Provenance::Haar,
    };
    debug_assert!(model.orthonormality_defect() < 1e-12);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgd::replicate_rng;
    use num_traits::ToPrimitive;

    #[test]
    fn moment_tables_match_closed_forms() {
        let rad = source_moments(&SourceKind::Rademacher).unwrap();
        for m in [2, 4, 6, 8] {
            assert_eq!(rad.psi(m), &int(1), "rademacher psi_{m}");
        }
        let uni = source_moments(&SourceKind::ScaledUniform).unwrap();
        assert_eq!(uni.psi(4), &rat(9, 5));
        assert_eq!(uni.psi(6), &rat(27, 7));
        assert_eq!(uni.psi(8), &int(9));
        let tp = source_moments(&SourceKind::ThreePoint { a: 2.0 }).unwrap();
        assert_eq!(tp.psi(4), &int(4));
        assert_eq!(tp.psi(6), &int(16));
        assert_eq!(tp.psi(8), &int(64));
        for m in [1, 3, 5, 7] {
            assert_eq!(tp.psi(m), &int(0), "odd moment psi_{m}");
        }
    }

    #[test]
    fn uniform_moments_match_quadrature() {
        // Simpson quadrature of y^2m / (2 sqrt 3) over [-sqrt3, sqrt3].
        let uni = source_moments(&SourceKind::ScaledUniform).unwrap();
        let s = 3.0f64.sqrt();
        let n = 20_000;
        let h = 2.0 * s / n as f64;
        for m in [2usize, 4, 6, 8] {
            let f = |y: f64| y.powi(m as i32) / (2.0 * s);
            let mut acc = f(-s) + f(s);
            for i in 1..n {
                let y = -s + i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(y);
            }
            let quad = acc * h / 3.0;
            let exact = uni.psi(m).to_f64().unwrap();
            assert!(
                (quad - exact).abs() < 1e-9,
                "psi_{m}: quadrature {quad} vs exact {exact}"
            );
        }
    }

    #[test]
    fn three_point_requires_a_at_least_one() {
        assert!(source_moments(&SourceKind::ThreePoint { a: 0.9 }).is_err());
        assert!(source_moments(&SourceKind::ThreePoint { a: f64::NAN }).is_err());
        assert!(source_moments(&SourceKind::ThreePoint { a: 1.0 }).is_ok());
    }

    #[test]
    fn samples_respect_support_and_bound() {
        let mut rng = replicate_rng(11, 0);
        for spec in [
            SourceSpec::new(SourceKind::Rademacher, 4).unwrap(),
            SourceSpec::new(SourceKind::ScaledUniform, 4).unwrap(),
            SourceSpec::new(SourceKind::ThreePoint { a: 2.0 }, 4).unwrap(),
        ] {
            let mut max_norm_sq: f64 = 0.0;
            for _ in 0..100_000 {
                let y = spec.sample(&mut rng);
                if let SourceKind::Rademacher = spec.kind() {
                    assert!(y.iter().all(|v| *v == 1.0 || *v == -1.0));
                }
                if let SourceKind::ThreePoint { a } = spec.kind() {
                    assert!(y.iter().all(|v| *v == 0.0 || v.abs() == *a));
                }
                max_norm_sq = max_norm_sq.max(y.iter().map(|v| v * v).sum());
            }
            assert!(
                max_norm_sq <= spec.bound(),
                "{}: max |Y|^2 = {max_norm_sq} exceeds B = {}",
                spec.kind_name(),
                spec.bound()
            );
        }
    }

    #[test]
    fn empirical_moments_within_five_standard_errors() {
        let n = 1_000_000usize;
        for kind in [
            SourceKind::Rademacher,
            SourceKind::ScaledUniform,
            SourceKind::ThreePoint { a: 2.0 },
        ] {
            let spec = SourceSpec::new(kind, 1).unwrap();
            let mut rng = replicate_rng(23, 0);
            let mut buf = [0.0];
            for m in [4usize, 6, 8] {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                let mut rng_m = replicate_rng(23, m as u64);
                let _ = &mut rng; // each moment uses its own stream
                for _ in 0..n {
                    spec.sample_into(&mut rng_m, &mut buf);
                    let v = buf[0].powi(m as i32);
                    sum += v;
                    sum_sq += v * v;
                }
                let mean = sum / n as f64;
                let var = (sum_sq / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt();
                let exact = spec.moments().psi_f64(m);
                assert!(
                    (mean - exact).abs() <= 5.0 * se + 1e-12,
                    "{} psi_{m}: {mean} vs {exact} (se {se})",
                    spec.kind_name()
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let spec = SourceSpec::new(SourceKind::ThreePoint { a: 2.0 }, 6).unwrap();
        let a = spec.sample(&mut replicate_rng(5, 3));
        let b = spec.sample(&mut replicate_rng(5, 3));
        assert_eq!(a, b, "same seed and stream");
        // Distinct streams: check on a continuous source, where a draw
        // collision has probability zero.
        let uni = SourceSpec::new(SourceKind::ScaledUniform, 6).unwrap();
        let c = uni.sample(&mut replicate_rng(5, 3));
        let d = uni.sample(&mut replicate_rng(5, 4));
        assert_ne!(c, d, "different stream");
    }

    #[test]
    fn three_point_support_probabilities_exact() {
        let spec = SourceSpec::new(SourceKind::ThreePoint { a: 2.0 }, 2).unwrap();
        let support = spec.finite_support().unwrap();
        assert_eq!(support.len(), 3);
        assert_eq!(support[0], (int(-2), rat(1, 8)));
        assert_eq!(support[1], (int(0), rat(3, 4)));
        assert_eq!(support[2], (int(2), rat(1, 8)));
        let total: BigRational = support.iter().map(|(_, p)| p.clone()).sum();
        assert_eq!(total, int(1));
    }

    #[test]
    fn identity_and_householder_observation() {
        let id = MixingModel::identity(2);
        assert_eq!(id.observe(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(id.observe(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        // Householder A = I - 2 e1 e1^T.
        let householder = MixingModel {
            cols: vec![vec![-1.0, 0.0], vec![0.0, 1.0]],
            provenance: Provenance::Identity,
        };
        assert_eq!(householder.observe(&[1.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(id.observe(&[1.0]).is_err(), "dimension mismatch");
    }

    #[test]
    fn random_orthogonal_is_orthonormal_and_deterministic() {
        for d in [2usize, 3, 8, 20] {
            let model = random_orthogonal(d, &mut replicate_rng(31, 0)).unwrap();
            assert!(
                model.orthonormality_defect() < 1e-12,
                "d = {d}: defect {}",
                model.orthonormality_defect()
            );
        }
        let a = random_orthogonal(5, &mut replicate_rng(9, 2)).unwrap();
        let b = random_orthogonal(5, &mut replicate_rng(9, 2)).unwrap();
        for i in 0..5 {
            assert_eq!(a.column(i), b.column(i), "repeatable draw");
        }
        assert!(random_orthogonal(1, &mut replicate_rng(9, 0)).is_err());
    }

    #[test]
    fn observe_preserves_norm_on_random_pairs() {
        let mut rng = replicate_rng(41, 0);
        let spec = SourceSpec::new(SourceKind::ScaledUniform, 6).unwrap();
        for _ in 0..100 {
            let model = random_orthogonal(6, &mut rng).unwrap();
            let y = spec.sample(&mut rng);
            let x = model.observe(&y).unwrap();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() < 1e-10, "|X| = {nx} vs |Y| = {ny}");
        }
    }
}
