use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Point;
use crate::error::{Error, Result};

/// Character box with corners top-left, top-right, bottom-right, bottom-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[[f64; 2]; 4]", into = "[[f64; 2]; 4]")]
pub struct QuadBox {
    pub corners: [Point; 4],
}

impl From<[[f64; 2]; 4]> for QuadBox {
    fn from(c: [[f64; 2]; 4]) -> Self {
        Self {
            corners: c.map(|[x, y]| Point::new(x, y)),
        }
    }
}

impl From<QuadBox> for [[f64; 2]; 4] {
    fn from(b: QuadBox) -> Self {
        b.corners.map(|p| [p.x, p.y])
    }
}

impl QuadBox {
    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            corners: [
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
        }
    }

    pub fn center(&self) -> Point {
        let c = &self.corners;
        Point::new(
            (c[0].x + c[1].x + c[2].x + c[3].x) / 4.0,
            (c[0].y + c[1].y + c[2].y + c[3].y) / 4.0,
        )
    }

    pub fn top_center(&self) -> Point {
        Point::midpoint(self.corners[0], self.corners[1])
    }

    pub fn bottom_center(&self) -> Point {
        Point::midpoint(self.corners[3], self.corners[2])
    }

    /// Distance between the top-edge and bottom-edge midpoints.
    pub fn height(&self) -> f64 {
        self.top_center().dist(self.bottom_center())
    }

    /// Shoelace area (signed; positive for clockwise corners in y-down coordinates).
    pub fn area(&self) -> f64 {
        let c = &self.corners;
        let mut s = 0.0;
        for i in 0..4 {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            s += a.x * b.y - b.x * a.y;
        }
        s / 2.0
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            corners: self.corners.map(f),
        }
    }
}

/// Non-empty set of character boxes ordered left to right by centre x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<QuadBox>", into = "Vec<QuadBox>")]
pub struct QuadBoxSet {
    boxes: Vec<QuadBox>,
}

impl TryFrom<Vec<QuadBox>> for QuadBoxSet {
    type Error = Error;

    fn try_from(v: Vec<QuadBox>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuadBoxSet> for Vec<QuadBox> {
    fn from(s: QuadBoxSet) -> Self {
        s.boxes
    }
}

impl QuadBoxSet {
    pub fn new(mut boxes: Vec<QuadBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Geometry("box set must contain at least one box".into()));
        }
        if boxes.iter().flat_map(|b| b.corners).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Geometry("non-finite box corner".into()));
        }
        boxes.sort_by(|a, b| a.center().x.total_cmp(&b.center().x));
        Ok(Self { boxes })
    }

    pub fn boxes(&self) -> &[QuadBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }
}

/// Key points used for curve and line fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoints {
    /// Left-edge midpoint, every box centre, right-edge midpoint (n + 2 points).
    pub centers: Vec<Point>,
    /// Per fitted line: (top, centre, bottom). Left edge, each box, right edge.
    pub triples: Vec<[Point; 3]>,
    pub box_heights: Vec<f64>,
}

impl KeyPoints {
    pub fn max_box_height(&self) -> f64 {
        self.box_heights.iter().copied().fold(0.0, f64::max)
    }
}

const MIN_AREA: f64 = 1e-12;

pub fn extract_key_points(boxes: &QuadBoxSet) -> Result<KeyPoints> {
    for (i, b) in boxes.boxes().iter().enumerate() {
        if b.area().abs() < MIN_AREA {
            return Err(Error::Geometry(format!("box {i} is degenerate (zero area)")));
        }
    }
    let first = boxes.boxes().first().expect("non-empty");
    let last = boxes.boxes().last().expect("non-empty");
    let left = [
        first.corners[0],
        Point::midpoint(first.corners[0], first.corners[3]),
        first.corners[3],
    ];
    let right = [
        last.corners[1],
        Point::midpoint(last.corners[1], last.corners[2]),
        last.corners[2],
    ];
    let mut triples = Vec::with_capacity(boxes.len() + 2);
    triples.push(left);
    for b in boxes.boxes() {
        triples.push([b.top_center(), b.center(), b.bottom_center()]);
    }
    triples.push(right);
    Ok(KeyPoints {
        centers: triples.iter().map(|t| t[1]).collect(),
        triples,
        box_heights: boxes.boxes().iter().map(QuadBox::height).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_key_points() {
        let set = QuadBoxSet::new(vec![QuadBox::axis_aligned(-0.5, -0.5, 0.5, 0.5)]).unwrap();
        let k = extract_key_points(&set).unwrap();
        assert_eq!(k.triples[1][1], Point::new(0.0, 0.0));
        assert_eq!(k.triples[1][0], Point::new(0.0, -0.5));
        assert_eq!(k.triples[1][2], Point::new(0.0, 0.5));
        assert_eq!(k.triples.len(), 3);
        assert_eq!(k.max_box_height(), 1.0);
    }

    #[test]
    fn n_boxes_give_n_plus_two_triples() {
        let boxes = (0..4)
            .map(|i| {
                let x = -0.8 + 0.4 * i as f64;
                QuadBox::axis_aligned(x, -0.2, x + 0.3, 0.2)
            })
            .collect();
        let k = extract_key_points(&QuadBoxSet::new(boxes).unwrap()).unwrap();
        assert_eq!(k.triples.len(), 6);
        assert_eq!(k.centers.len(), 6);
    }

    #[test]
    fn rotated_square_center_is_invariant() {
        let sq = QuadBox::axis_aligned(0.1, 0.2, 0.3, 0.4);
        let c = sq.center();
        let (s, co) = 0.7f64.sin_cos();
        let rot = sq.map(|p| {
            let (dx, dy) = (p.x - c.x, p.y - c.y);
            Point::new(c.x + co * dx - s * dy, c.y + s * dx + co * dy)
        });
        assert!(rot.center().dist(c) < 1e-15);
    }

    #[test]
    fn boxes_are_sorted_left_to_right() {
        let set = QuadBoxSet::new(vec![
            QuadBox::axis_aligned(0.2, 0.0, 0.4, 0.1),
            QuadBox::axis_aligned(-0.4, 0.0, -0.2, 0.1),
        ])
        .unwrap();
        assert!(set.boxes()[0].center().x < set.boxes()[1].center().x);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let set = QuadBoxSet::new(vec![QuadBox::axis_aligned(0.1, 0.1, 0.1, 0.5)]).unwrap();
        assert!(matches!(extract_key_points(&set), Err(Error::Geometry(_))));
    }

    #[test]
    fn json_round_trip() {
        let set = QuadBoxSet::new(vec![QuadBox::axis_aligned(-0.5, -0.25, 0.5, 0.25)]).unwrap();
        let s = serde_json::to_string(&set).unwrap();
        assert_eq!(s, "[[[-0.5,-0.25],[0.5,-0.25],[0.5,0.25],[-0.5,0.25]]]");
        let back: QuadBoxSet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, set);
        assert!(serde_json::from_str::<QuadBoxSet>("[]").is_err());
    }
}
