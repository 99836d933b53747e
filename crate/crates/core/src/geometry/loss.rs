use super::{LegendreCoeffs, SegmentSet};
use crate::error::{Error, Result};

/// Text geometry as the localizer predicts it: Legendre centre curve plus segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentModel {
    pub legendre: LegendreCoeffs,
    pub segments: SegmentSet,
}

/// Weights of the intersection, cosine, sine and length terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

fn l1(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Weighted sum of L1 distances between predicted and true geometry.
pub fn stn_loss(pred: &SegmentModel, truth: &SegmentModel, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let (p, t) = (&pred.segments, &truth.segments);
    if p.len() != t.len() {
        return Err(Error::shape("stn_loss", &[p.len()], &[t.len()]));
    }
    let psi = l1(pred.legendre.psi.into_iter(), truth.legendre.psi.into_iter());
    let phi = l1(p.phi().iter().copied(), t.phi().iter().copied());
    let cos = l1(p.theta().iter().map(|v| v.cos()), t.theta().iter().map(|v| v.cos()));
    let sin = l1(p.theta().iter().map(|v| v.sin()), t.theta().iter().map(|v| v.sin()));
    let xi = l1(p.xi().iter().copied(), t.xi().iter().copied());
    Ok(psi + w.alpha * phi + w.beta * cos + w.gamma * sin + w.delta * xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(rng: &mut ChaCha8Rng) -> SegmentModel {
        let mut phi: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        phi.sort_by(f64::total_cmp);
        SegmentModel {
            legendre: LegendreCoeffs {
                psi: [(); 5].map(|_| rng.gen_range(-1.0..1.0)),
            },
            segments: SegmentSet::from_prediction(
                phi,
                (0..10).map(|_| rng.gen_range(0.0..3.0)).collect(),
                (0..10).map(|_| rng.gen_range(0.1..1.0)).collect(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn identical_models_have_zero_loss() {
        let m = model(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(stn_loss(&m, &m, &LossWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn single_psi_difference() {
        let truth = model(&mut ChaCha8Rng::seed_from_u64(2));
        let mut pred = truth.clone();
        pred.legendre.psi[0] += 0.1;
        let w = LossWeights {
            alpha: 3.0,
            beta: 0.2,
            gamma: 7.0,
            delta: 0.0,
        };
        assert!((stn_loss(&pred, &truth, &w).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (model(&mut rng), model(&mut rng));
        let mut expect = 0.0;
        for k in 0..5 {
            expect += (a.legendre.psi[k] - b.legendre.psi[k]).abs();
        }
        for i in 0..10 {
            let (sa, sb) = (&a.segments, &b.segments);
            expect += (sa.phi()[i] - sb.phi()[i]).abs();
            expect += (sa.theta()[i].cos() - sb.theta()[i].cos()).abs();
            expect += (sa.theta()[i].sin() - sb.theta()[i].sin()).abs();
            expect += (sa.xi()[i] - sb.xi()[i]).abs();
        }
        let got = stn_loss(&a, &b, &LossWeights::default()).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let m = model(&mut ChaCha8Rng::seed_from_u64(4));
        let w = LossWeights {
            beta: -1.0,
            ..Default::default()
        };
        assert!(matches!(stn_loss(&m, &m, &w), Err(Error::Config(_))));
    }
}
