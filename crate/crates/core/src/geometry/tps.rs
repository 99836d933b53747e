use nalgebra::{DMatrix, DVector};

use super::{ControlPointSet, Point};
use crate::error::{Error, Result};
use crate::image::{pixel_center, GrayImage};

const LAMBDA: f64 = 1e-6;

fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Thin-plate spline from rectified (target) coordinates to source image
/// coordinates: `f(p) = a0 + a1 x + a2 y + Σ w_i U(|p − t_i|)`.
#[derive(Clone, Debug)]
pub struct TpsWarp {
    source: Vec<Point>,
    target: Vec<Point>,
    weights: Vec<[f64; 2]>,
    affine: [[f64; 2]; 3],
}

impl TpsWarp {
    /// Fits the spline so that `target[i]` maps onto `source[i]`.
    pub fn fit(source: &[Point], target: &[Point]) -> Result<Self> {
        let n = target.len();
        if source.len() != n {
            return Err(Error::shape("TpsWarp", &[source.len()], &[n]));
        }
        if n < 3 || !spans_plane(target) {
            return Err(Error::Geometry("TPS needs at least 3 non-collinear control points".into()));
        }
        let mut l = DMatrix::<f64>::zeros(n + 3, n + 3);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (target[i].x - target[j].x, target[i].y - target[j].y);
                l[(i, j)] = kernel(dx * dx + dy * dy);
            }
            l[(i, i)] += LAMBDA;
            for (k, v) in [1.0, target[i].x, target[i].y].into_iter().enumerate() {
                l[(i, n + k)] = v;
                l[(n + k, i)] = v;
            }
        }
        let lu = l.lu();
        let solve = |f: fn(&Point) -> f64| {
            let mut rhs = DVector::<f64>::zeros(n + 3);
            for (i, p) in source.iter().enumerate() {
                rhs[i] = f(p);
            }
            lu.solve(&rhs)
                .filter(|s| s.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::Geometry("singular TPS system".into()))
        };
        let sx = solve(|p| p.x)?;
        let sy = solve(|p| p.y)?;
        Ok(Self {
            source: source.to_vec(),
            target: target.to_vec(),
            weights: (0..n).map(|i| [sx[i], sy[i]]).collect(),
            affine: [0, 1, 2].map(|k| [sx[n + k], sy[n + k]]),
        })
    }

    pub fn source(&self) -> &[Point] {
        &self.source
    }

    pub fn target(&self) -> &[Point] {
        &self.target
    }

    pub fn map(&self, p: Point) -> Point {
        let a = &self.affine;
        let mut x = a[0][0] + a[1][0] * p.x + a[2][0] * p.y;
        let mut y = a[0][1] + a[1][1] * p.x + a[2][1] * p.y;
        for (t, w) in self.target.iter().zip(&self.weights) {
            let (dx, dy) = (p.x - t.x, p.y - t.y);
            let u = kernel(dx * dx + dy * dy);
            x += w[0] * u;
            y += w[1] * u;
        }
        Point::new(x, y)
    }

    /// `[[∂x/∂px, ∂x/∂py], [∂y/∂px, ∂y/∂py]]` at `p`.
    pub fn jacobian(&self, p: Point) -> [[f64; 2]; 2] {
        let a = &self.affine;
        let mut j = [[a[1][0], a[2][0]], [a[1][1], a[2][1]]];
        for (t, w) in self.target.iter().zip(&self.weights) {
            let (dx, dy) = (p.x - t.x, p.y - t.y);
            let r2 = dx * dx + dy * dy;
            if r2 <= 0.0 {
                continue;
            }
            let g = r2.ln() + 1.0;
            for c in 0..2 {
                j[c][0] += w[c] * g * dx;
                j[c][1] += w[c] * g * dy;
            }
        }
        j
    }

    /// Finds `p` with `map(p) == q` by damped Newton iteration from `start`.
    pub fn invert(&self, q: Point, start: Point) -> Result<Point> {
        let mut p = start;
        let residual = |p: Point| {
            let m = self.map(p);
            (m.x - q.x, m.y - q.y)
        };
        let mut r = residual(p);
        for _ in 0..100 {
            let norm = r.0.hypot(r.1);
            if norm < 1e-12 {
                return Ok(p);
            }
            let j = self.jacobian(p);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-14 {
                break;
            }
            let sx = (j[1][1] * r.0 - j[0][1] * r.1) / det;
            let sy = (-j[1][0] * r.0 + j[0][0] * r.1) / det;
            let mut step = 1.0;
            loop {
                let cand = Point::new(p.x - step * sx, p.y - step * sy);
                let rc = residual(cand);
                if rc.0.hypot(rc.1) < norm || step < 1e-6 {
                    p = cand;
                    r = rc;
                    break;
                }
                step *= 0.5;
            }
        }
        if r.0.hypot(r.1) < 1e-9 {
            Ok(p)
        } else {
            Err(Error::Geometry(format!("TPS inversion did not converge for ({}, {})", q.x, q.y)))
        }
    }
}

fn spans_plane(pts: &[Point]) -> bool {
    let o = pts[0];
    let scale = pts.iter().map(|p| p.dist(o)).fold(0.0, f64::max);
    if scale == 0.0 {
        return false;
    }
    pts.iter().any(|a| {
        pts.iter()
            .any(|b| ((a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)).abs() > 1e-12 * scale * scale)
    })
}

pub fn build_tps(cp: &ControlPointSet) -> Result<TpsWarp> {
    TpsWarp::fit(&cp.source, &cp.target)
}

/// Renders an `out_h × out_w` image by mapping every output pixel centre
/// through the warp and sampling the source bilinearly.
pub fn apply_warp(w: &TpsWarp, img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    GrayImage::from_fn(out_h, out_w, |y, x| {
        let s = w.map(Point::new(pixel_center(x, out_w), pixel_center(y, out_h)));
        img.sample(s.x, s.y)
    })
}
