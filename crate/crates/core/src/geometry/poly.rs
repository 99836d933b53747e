use nalgebra::{DMatrix, DVector};

use super::{Point, SegmentSet};
use crate::error::{Error, Result};

/// Degree-4 polynomial `y = c0 + c1 x + … + c4 x⁴` in monomial form.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PolyCurve {
    pub coeffs: [f64; 5],
}

impl PolyCurve {
    pub fn new(coeffs: [f64; 5]) -> Self {
        Self { coeffs }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let c = &self.coeffs;
        c[1] + x * (2.0 * c[2] + x * (3.0 * c[3] + x * 4.0 * c[4]))
    }
}

/// Least-squares degree-4 fit of `y(x)`. With fewer than five distinct
/// abscissae the degree drops to `distinct - 1` and the remaining
/// coefficients are zero.
pub fn fit_center_polynomial(points: &[Point]) -> Result<PolyCurve> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if xs.len() < 2 {
        return Err(Error::Geometry(format!(
            "centre-curve fit needs at least 2 distinct x values, got {}",
            xs.len()
        )));
    }
    let degree = (xs.len() - 1).min(4);
    let n = points.len();
    let vander = DMatrix::from_fn(n, degree + 1, |i, j| points[i].x.powi(j as i32));
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.y));
    let sol = vander
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Geometry(format!("centre-curve least squares failed: {e}")))?;
    let mut coeffs = [0.0; 5];
    for (c, v) in coeffs.iter_mut().zip(sol.iter()) {
        *c = *v;
    }
    Ok(PolyCurve { coeffs })
}

/// Near-vertical line `x = a·y + b`, with the point it was anchored on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub a: f64,
    pub b: f64,
    pub anchor: Point,
}

impl Line {
    pub fn x_at(&self, y: f64) -> f64 {
        self.a * y + self.b
    }
}

/// Least-squares fit of `x` as a function of `y` through each triple.
pub fn fit_char_lines(triples: &[[Point; 3]]) -> Result<Vec<Line>> {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let my = t.iter().map(|p| p.y).sum::<f64>() / 3.0;
            let mx = t.iter().map(|p| p.x).sum::<f64>() / 3.0;
            let syy: f64 = t.iter().map(|p| (p.y - my).powi(2)).sum();
            let sxy: f64 = t.iter().map(|p| (p.y - my) * (p.x - mx)).sum();
            if syy < 1e-24 {
                return Err(Error::Geometry(format!(
                    "line {i}: key points share one y value, x(y) is undefined"
                )));
            }
            let a = sxy / syy;
            Ok(Line {
                a,
                b: mx - a * my,
                anchor: t[1],
            })
        })
        .collect()
}

const ROOT_TOL: f64 = 1e-12;

/// Root of `x − a·f(x) − b` on `[-1, 1]`: Newton from `start`, falling back
/// to bisection over the first bracketing sub-interval.
fn intersect_one(poly: &PolyCurve, line: &Line, index: usize) -> Result<f64> {
    let h = |x: f64| x - line.a * poly.eval(x) - line.b;
    if line.a == 0.0 {
        if line.b.abs() > 1.0 {
            return Err(Error::Geometry(format!("line {index} lies outside the image")));
        }
        return Ok(line.b);
    }
    let mut x = line.anchor.x.clamp(-1.0, 1.0);
    for _ in 0..50 {
        let hv = h(x);
        let dh = 1.0 - line.a * poly.derivative(x);
        if dh.abs() < 1e-14 {
            break;
        }
        let step = hv / dh;
        x -= step;
        if !x.is_finite() || x.abs() > 1.0 {
            break;
        }
        if step.abs() <= ROOT_TOL {
            return Ok(x);
        }
    }
    const PIECES: usize = 64;
    for k in 0..PIECES {
        let mut lo = -1.0 + 2.0 * k as f64 / PIECES as f64;
        let mut hi = -1.0 + 2.0 * (k + 1) as f64 / PIECES as f64;
        let (mut hlo, hhi) = (h(lo), h(hi));
        if hlo == 0.0 {
            return Ok(lo);
        }
        if hlo.signum() == hhi.signum() {
            continue;
        }
        while hi - lo > ROOT_TOL * 1e-3 {
            let mid = 0.5 * (lo + hi);
            let hm = h(mid);
            if hm == 0.0 {
                return Ok(mid);
            }
            if hm.signum() == hlo.signum() {
                lo = mid;
                hlo = hm;
            } else {
                hi = mid;
            }
        }
        return Ok(0.5 * (lo + hi));
    }
    Err(Error::Geometry(format!(
        "line {index} does not intersect the centre curve inside [-1, 1]"
    )))
}

/// Signed angle from the curve tangent `(1, f'(x))` to the line direction `(a, 1)`.
fn tangent_angle(poly: &PolyCurve, line: &Line, x: f64) -> f64 {
    let (tx, ty) = (1.0, poly.derivative(x));
    let (dx, dy) = (line.a, 1.0);
    (tx * dy - ty * dx).atan2(tx * dx + ty * dy)
}

/// Intersects every line with the centre curve. `xi` (the tallest box
/// height) is shared by all raw segments.
pub fn intersect_lines_polynomial(poly: &PolyCurve, lines: &[Line], xi: f64) -> Result<SegmentSet> {
    let mut raw: Vec<(f64, f64)> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let x = intersect_one(poly, line, i)?;
        raw.push((x, tangent_angle(poly, line, x)));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (phi, theta): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
    let n = phi.len();
    SegmentSet::new(phi, theta, vec![xi; n])
}
