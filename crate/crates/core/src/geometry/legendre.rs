use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PolyCurve;
use crate::error::{Error, Result};

/// Coefficients of a degree-4 polynomial in the Legendre basis `P0..P4` on `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LegendreCoeffs {
    pub psi: [f64; 5],
}

/// `BASIS[k][i]` is the coefficient of `x^i` in `P_k`.
const BASIS: [[f64; 5]; 5] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [-0.5, 0.0, 1.5, 0.0, 0.0],
    [0.0, -1.5, 0.0, 2.5, 0.0],
    [0.375, 0.0, -3.75, 0.0, 4.375],
];

/// Change of basis by back substitution; `P_k` has leading power `k`, so
/// the system is triangular.
pub fn monomial_to_legendre(c: &PolyCurve) -> LegendreCoeffs {
    let mut psi = [0.0; 5];
    for k in (0..5).rev() {
        let mut rest = c.coeffs[k];
        for (j, p) in psi.iter().enumerate().skip(k + 1) {
            rest -= BASIS[j][k] * p;
        }
        psi[k] = rest / BASIS[k][k];
    }
    LegendreCoeffs { psi }
}

pub fn legendre_to_monomial(l: &LegendreCoeffs) -> PolyCurve {
    let mut coeffs = [0.0; 5];
    for (k, &p) in l.psi.iter().enumerate() {
        for (i, c) in coeffs.iter_mut().enumerate() {
            *c += BASIS[k][i] * p;
        }
    }
    PolyCurve { coeffs }
}

/// `∫₋₁¹ (f − g)²` from Legendre coefficients via orthogonality weights `2 / (2k + 1)`.
pub fn legendre_l2_distance_sq(a: &LegendreCoeffs, b: &LegendreCoeffs) -> f64 {
    a.psi
        .iter()
        .zip(&b.psi)
        .enumerate()
        .map(|(k, (x, y))| 2.0 / (2 * k + 1) as f64 * (x - y).powi(2))
        .sum()
}

/// One ordered polynomial pair from the coefficient-distance study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub i: usize,
    pub j: usize,
    pub sampled_distance: f64,
    pub monomial_distance: f64,
    pub legendre_distance: f64,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub pearson_monomial: f64,
    pub pearson_legendre: f64,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,sampled_distance,monomial_distance,legendre_distance\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.12e},{:.12e},{:.12e}\n",
                r.i, r.j, r.sampled_distance, r.monomial_distance, r.legendre_distance
            ));
        }
        out
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Draws `n_polys` random degree-4 polynomials (monomial coefficients
/// uniform in `[-1, 1]`) and, for every ordered pair, compares the distance
/// between `n_samples` evenly spaced samples on `[-1, 1]` with the L2
/// distance of the monomial and of the Legendre coefficient vectors.
pub fn legendre_distance_study(n_polys: usize, n_samples: usize, seed: u64) -> Result<StudyReport> {
    if n_polys < 2 || n_samples < 2 {
        return Err(Error::Config("study needs at least 2 polynomials and 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let polys: Vec<PolyCurve> = (0..n_polys)
        .map(|_| PolyCurve::new([(); 5].map(|_| rng.gen_range(-1.0..=1.0))))
        .collect();
    let xs: Vec<f64> = (0..n_samples)
        .map(|k| -1.0 + 2.0 * k as f64 / (n_samples - 1) as f64)
        .collect();
    let samples: Vec<Vec<f64>> = polys.iter().map(|p| xs.iter().map(|&x| p.eval(x)).collect()).collect();
    let leg: Vec<LegendreCoeffs> = polys.iter().map(monomial_to_legendre).collect();
    let mut rows = Vec::with_capacity(n_polys * n_polys);
    for i in 0..n_polys {
        for j in 0..n_polys {
            rows.push(StudyRow {
                i,
                j,
                sampled_distance: l2(&samples[i], &samples[j]),
                monomial_distance: l2(&polys[i].coeffs, &polys[j].coeffs),
                legendre_distance: l2(&leg[i].psi, &leg[j].psi),
            });
        }
    }
    let sampled: Vec<f64> = rows.iter().map(|r| r.sampled_distance).collect();
    let mono: Vec<f64> = rows.iter().map(|r| r.monomial_distance).collect();
    let legd: Vec<f64> = rows.iter().map(|r| r.legendre_distance).collect();
    Ok(StudyReport {
        pearson_monomial: pearson(&mono, &sampled),
        pearson_legendre: pearson(&legd, &sampled),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: ψ_k = (2k+1)/2 ∫ f P_k by 5-point Gauss–Legendre quadrature
    /// (exact up to degree 9).
    fn project(c: &PolyCurve) -> [f64; 5] {
        let nodes = [
            (0.0, 128.0 / 225.0),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        let pk = |k: usize, x: f64| BASIS[k].iter().rev().fold(0.0, |a, &b| a * x + b);
        let mut out = [0.0; 5];
        for (k, o) in out.iter_mut().enumerate() {
            let integral: f64 = nodes.iter().map(|&(x, w)| w * c.eval(x) * pk(k, x)).sum();
            *o = (2 * k + 1) as f64 / 2.0 * integral;
        }
        out
    }

    fn close(a: &[f64; 5], b: &[f64; 5], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn x_squared() {
        let c = PolyCurve::new([0.0, 0.0, 1.0, 0.0, 0.0]);
        let psi = monomial_to_legendre(&c).psi;
        let oracle = project(&c);
        assert!(close(&oracle, &[1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0, 0.0], 1e-14));
        assert!(close(&psi, &oracle, 1e-14), "{psi:?}");
    }

    #[test]
    fn p3_is_a_basis_element() {
        let psi = monomial_to_legendre(&PolyCurve::new([0.0, -1.5, 0.0, 2.5, 0.0])).psi;
        assert!(close(&psi, &[0.0, 0.0, 0.0, 1.0, 0.0], 1e-15));
    }

    #[test]
    fn x_fourth() {
        let c = PolyCurve::new([0.0, 0.0, 0.0, 0.0, 1.0]);
        let oracle = project(&c);
        assert!(close(&oracle, &[7.0 / 35.0, 0.0, 20.0 / 35.0, 0.0, 8.0 / 35.0], 1e-14));
        assert!(close(&monomial_to_legendre(&c).psi, &oracle, 1e-14));
    }

    #[test]
    fn study_shape_and_identity_pairs() {
        let r = legendre_distance_study(20, 201, 7).unwrap();
        assert_eq!(r.rows.len(), 400);
        for row in r.rows.iter().filter(|r| r.i == r.j) {
            assert_eq!(row.sampled_distance, 0.0);
            assert_eq!(row.monomial_distance, 0.0);
            assert_eq!(row.legendre_distance, 0.0);
        }
        assert_eq!(r.to_csv().lines().count(), 401);
        assert!(legendre_distance_study(1, 201, 0).is_err());
    }

    #[test]
    fn pearson_of_linear_data_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-15);
    }
}
