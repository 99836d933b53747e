//! Text-shape geometry for rectification: key points from character boxes,
//! a degree-4 centre curve with per-character lines, the Legendre form of
//! the curve, line segments, control points and the thin-plate-spline warp.
//!
//! All coordinates are normalised to `[-1, 1]²` with `y` pointing down.

mod boxes;
mod legendre;
mod loss;
mod poly;
mod segments;
mod tps;

pub use boxes::{extract_key_points, KeyPoints, QuadBox, QuadBoxSet};
pub use legendre::{
    legendre_distance_study, legendre_l2_distance_sq, legendre_to_monomial, monomial_to_legendre, pearson,
    LegendreCoeffs, StudyReport, StudyRow,
};
pub use loss::{stn_loss, LossWeights, SegmentModel};
pub use poly::{fit_center_polynomial, fit_char_lines, intersect_lines_polynomial, Line, PolyCurve};
pub use segments::{
    interpolate_segments, segment_endpoints, segments_to_control_points, target_grid, ControlPointSet, SegmentSet,
    TARGET_MARGIN,
};
pub use tps::{apply_warp, build_tps, TpsWarp};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::GrayImage;

/// Default number of line segments describing a text line.
pub const DEFAULT_SEGMENTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn midpoint(a: Point, b: Point) -> Self {
        Self::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn clamp_unit(self) -> Self {
        Self::new(self.x.clamp(-1.0, 1.0), self.y.clamp(-1.0, 1.0))
    }
}

/// Ground-truth geometry for one text image: the fitted centre curve and
/// the interpolated segment set.
#[derive(Clone, Debug)]
pub struct GroundTruthGeometry {
    pub curve: PolyCurve,
    pub model: SegmentModel,
    pub control_points: ControlPointSet,
}

/// Runs the whole box → curve → segments → control-point scheme.
pub fn geometry_from_boxes(boxes: &QuadBoxSet, segments: usize) -> Result<GroundTruthGeometry> {
    let keys = extract_key_points(boxes)?;
    let curve = fit_center_polynomial(&keys.centers)?;
    let lines = fit_char_lines(&keys.triples)?;
    let raw = intersect_lines_polynomial(&curve, &lines, keys.max_box_height())?;
    let segs = interpolate_segments(&raw, segments)?;
    let control_points = segments_to_control_points(&curve, &segs);
    Ok(GroundTruthGeometry {
        curve,
        model: SegmentModel {
            legendre: monomial_to_legendre(&curve),
            segments: segs,
        },
        control_points,
    })
}

/// Rectifies `img` with control points derived from its character boxes.
pub fn rectify_with_boxes(img: &GrayImage, boxes: &QuadBoxSet, out_h: usize, out_w: usize) -> Result<GrayImage> {
    let geo = geometry_from_boxes(boxes, DEFAULT_SEGMENTS)?;
    let warp = build_tps(&geo.control_points)?;
    Ok(apply_warp(&warp, img, out_h, out_w))
}
