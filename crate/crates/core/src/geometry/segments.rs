use super::{Point, PolyCurve};
use crate::error::{Error, Result};

/// Margin between the target control-point grid and the image border.
pub const TARGET_MARGIN: f64 = 0.05;

/// Line segments crossing the centre curve: intersection x (`phi`), angle
/// from the curve tangent to the segment (`theta`) and length (`xi`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSet {
    phi: Vec<f64>,
    theta: Vec<f64>,
    xi: Vec<f64>,
}

impl SegmentSet {
    /// Ground-truth segments: `phi` strictly increasing.
    pub fn new(phi: Vec<f64>, theta: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        let s = Self::check(phi, theta, xi)?;
        if let Some(i) = s.phi.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Geometry(format!(
                "segment intersections must be strictly increasing (segments {i} and {})",
                i + 1
            )));
        }
        Ok(s)
    }

    /// Predicted segments, where decoded intersections may tie.
    pub fn from_prediction(phi: Vec<f64>, theta: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        let s = Self::check(phi, theta, xi)?;
        if s.phi.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Geometry("predicted intersections must be sorted".into()));
        }
        Ok(s)
    }

    fn check(phi: Vec<f64>, theta: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        if phi.len() != theta.len() || phi.len() != xi.len() {
            return Err(Error::shape("SegmentSet", &[phi.len(), theta.len()], &[xi.len()]));
        }
        if phi.len() < 2 {
            return Err(Error::Geometry(format!("need at least 2 segments, got {}", phi.len())));
        }
        if phi.iter().chain(&theta).chain(&xi).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segment parameters".into()));
        }
        if let Some(i) = xi.iter().position(|&v| v <= 0.0) {
            return Err(Error::Geometry(format!("segment {i} has non-positive length")));
        }
        Ok(Self { phi, theta, xi })
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }
}

fn lerp_at(knots: &[f64], values: &[f64], x: f64) -> f64 {
    let j = knots.partition_point(|&k| k <= x).clamp(1, knots.len() - 1);
    let (k0, k1) = (knots[j - 1], knots[j]);
    let t = (x - k0) / (k1 - k0);
    (1.0 - t) * values[j - 1] + t * values[j]
}

/// Resamples to `m` segments evenly spaced in `phi`; `theta` and `xi` are
/// piecewise linear in `phi` through the raw knots.
pub fn interpolate_segments(raw: &SegmentSet, m: usize) -> Result<SegmentSet> {
    if m < 2 {
        return Err(Error::Config(format!("segment count must be at least 2, got {m}")));
    }
    let (first, last) = (raw.phi[0], raw.phi[raw.len() - 1]);
    let step = (last - first) / (m - 1) as f64;
    let phi: Vec<f64> = (0..m)
        .map(|i| if i == m - 1 { last } else { first + i as f64 * step })
        .collect();
    let theta = phi.iter().map(|&p| lerp_at(&raw.phi, &raw.theta, p)).collect();
    let xi = phi.iter().map(|&p| lerp_at(&raw.phi, &raw.xi, p)).collect();
    SegmentSet::new(phi, theta, xi)
}

/// Source control points on the text and their rectified-frame targets.
/// Both are ordered per segment as top, middle, bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointSet {
    pub source: Vec<Point>,
    pub target: Vec<Point>,
}

impl ControlPointSet {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,source_x,source_y,target_x,target_y\n");
        for (i, (s, t)) in self.source.iter().zip(&self.target).enumerate() {
            out.push_str(&format!("{i},{},{},{},{}\n", s.x, s.y, t.x, t.y));
        }
        out
    }
}

/// `m` evenly spaced columns with `TARGET_MARGIN` at each side, rows at the
/// top, centre and bottom.
pub fn target_grid(m: usize) -> Vec<Point> {
    let lo = -1.0 + TARGET_MARGIN;
    let hi = 1.0 - TARGET_MARGIN;
    let mut out = Vec::with_capacity(3 * m);
    for i in 0..m {
        let x = if m == 1 { 0.0 } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 };
        out.extend([Point::new(x, lo), Point::new(x, 0.0), Point::new(x, hi)]);
    }
    out
}

/// Unclamped (top, middle, bottom) points of every segment.
pub fn segment_endpoints(curve: &PolyCurve, segs: &SegmentSet) -> Vec<[Point; 3]> {
    (0..segs.len())
        .map(|i| {
            let x = segs.phi[i];
            let mid = Point::new(x, curve.eval(x));
            let d = curve.derivative(x);
            let norm = d.hypot(1.0);
            let (tx, ty) = (1.0 / norm, d / norm);
            let (s, c) = segs.theta[i].sin_cos();
            let (dx, dy) = (c * tx - s * ty, s * tx + c * ty);
            let h = segs.xi[i] / 2.0;
            [
                Point::new(mid.x - h * dx, mid.y - h * dy),
                mid,
                Point::new(mid.x + h * dx, mid.y + h * dy),
            ]
        })
        .collect()
}

pub fn segments_to_control_points(curve: &PolyCurve, segs: &SegmentSet) -> ControlPointSet {
    ControlPointSet {
        source: segment_endpoints(curve, segs)
            .into_iter()
            .flatten()
            .map(Point::clamp_unit)
            .collect(),
        target: target_grid(segs.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Point, b: Point) -> bool {
        a.dist(b) < 1e-12
    }

    #[test]
    fn constructor_invariants() {
        assert!(SegmentSet::new(vec![0.0], vec![1.0], vec![1.0]).is_err());
        assert!(SegmentSet::new(vec![0.0, 0.0], vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(SegmentSet::new(vec![0.0, 0.1], vec![1.0; 2], vec![1.0, 0.0]).is_err());
        assert!(SegmentSet::from_prediction(vec![0.0, 0.0], vec![1.0; 2], vec![1.0; 2]).is_ok());
    }

    #[test]
    fn evenly_spaced_input_is_a_fixed_point() {
        let m = 10;
        let phi: Vec<f64> = (0..m)
            .map(|i| if i == m - 1 { 0.9 } else { -0.9 + i as f64 * (1.8 / 9.0) })
            .collect();
        let theta = (0..m).map(|i| 1.0 + 0.05 * i as f64).collect();
        let raw = SegmentSet::new(phi, theta, vec![0.4; m]).unwrap();
        assert_eq!(interpolate_segments(&raw, m).unwrap(), raw);
    }

    #[test]
    fn two_to_ten_segments() {
        let raw = SegmentSet::new(vec![-0.8, 0.8], vec![FRAC_PI_2; 2], vec![0.5; 2]).unwrap();
        let out = interpolate_segments(&raw, 10).unwrap();
        for (i, &p) in out.phi().iter().enumerate() {
            assert!((p - (-0.8 + i as f64 * (1.6 / 9.0))).abs() < 1e-15);
        }
        assert!(out.theta().iter().all(|&t| (t - FRAC_PI_2).abs() < 1e-15));
        assert!(interpolate_segments(&raw, 1).is_err());
    }

    #[test]
    fn raw_knots_are_reproduced() {
        let phi = vec![-0.9, -0.5, -0.3, 0.1, 0.5, 0.9];
        let theta = vec![1.2, 1.5, 1.4, 1.9, 1.6, 1.3];
        let raw = SegmentSet::new(phi.clone(), theta.clone(), vec![0.3; 6]).unwrap();
        let out = interpolate_segments(&raw, 10).unwrap();
        assert_eq!(out.len(), 10);
        for (k, &p) in phi.iter().enumerate() {
            assert_eq!(lerp_at(raw.phi(), raw.theta(), p), theta[k]);
        }
        for i in 0..10 {
            let p = out.phi()[i];
            let j = phi.iter().rposition(|&k| k <= p).unwrap().min(4);
            let t = (p - phi[j]) / (phi[j + 1] - phi[j]);
            let expect = theta[j] + t * (theta[j + 1] - theta[j]);
            assert!((out.theta()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_segment_on_flat_curve() {
        let flat = PolyCurve::new([0.0; 5]);
        let segs = SegmentSet::new(vec![0.0, 0.5], vec![FRAC_PI_2; 2], vec![0.6; 2]).unwrap();
        let cp = segments_to_control_points(&flat, &segs);
        assert!(close(cp.source[0], Point::new(0.0, -0.3)));
        assert!(close(cp.source[1], Point::new(0.0, 0.0)));
        assert!(close(cp.source[2], Point::new(0.0, 0.3)));
    }

    #[test]
    fn long_segments_are_clamped() {
        let flat = PolyCurve::new([0.0; 5]);
        let segs = SegmentSet::new(vec![0.0, 0.5], vec![FRAC_PI_2; 2], vec![4.0; 2]).unwrap();
        let cp = segments_to_control_points(&flat, &segs);
        assert!(close(cp.source[0], Point::new(0.0, -1.0)));
        assert!(close(cp.source[2], Point::new(0.0, 1.0)));
        assert_eq!((cp.source[0].y, cp.source[2].y), (-1.0, 1.0));
    }

    #[test]
    fn ten_segments_give_thirty_points() {
        let curve = PolyCurve::new([0.1, 0.2, -0.3, 0.0, 0.1]);
        let phi: Vec<f64> = (0..10).map(|i| -0.9 + 0.2 * i as f64).collect();
        let segs = SegmentSet::new(phi, vec![1.4; 10], vec![0.5; 10]).unwrap();
        let cp = segments_to_control_points(&curve, &segs);
        assert_eq!(cp.source.len(), 30);
        assert_eq!(cp.target.len(), 30);
        assert!(close(cp.target[0], Point::new(-0.95, -0.95)));
        assert!(close(cp.target[29], Point::new(0.95, 0.95)));
        for (i, [t, m, b]) in segment_endpoints(&curve, &segs).into_iter().enumerate() {
            assert!(close(m, Point::new(segs.phi()[i], curve.eval(segs.phi()[i]))));
            assert!(close(Point::midpoint(t, b), m));
        }
        assert_eq!(cp.to_csv().lines().count(), 31);
    }
}
