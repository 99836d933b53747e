//! Attention cost sweeps: tape-counted score MACs against the closed forms,
//! median wall time of the score path, and log-log exponent fits.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::scaled_dot_product;
use crate::davit::{attention_calls, attention_inputs, closed_form_macs, AttentionMode, AttentionShape};
use crate::error::{Error, Result};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub mode: AttentionMode,
    pub n_x: usize,
    pub n_y: usize,
    pub d_x: usize,
    pub l_y: usize,
    /// Per-product score MACs (`Q·Kᵀ`, equal to `attention·V`).
    pub score_macs: u64,
    pub score_x_macs: u64,
    pub score_y_macs: u64,
    pub proj_macs: u64,
    pub closed_form: u64,
    pub time_ns_median: u64,
}

impl BenchPoint {
    pub fn shape(&self) -> AttentionShape {
        AttentionShape {
            n_x: self.n_x,
            n_y: self.n_y,
            d_x: self.d_x,
            l_y: self.l_y,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sweep {
    pub points: Vec<BenchPoint>,
    pub skipped: Vec<String>,
}

/// Cartesian grid of shapes with a fixed `l_y`.
pub fn grid(n_x: &[usize], n_y: &[usize], d_x: &[usize], l_y: usize) -> Vec<AttentionShape> {
    let mut out = Vec::new();
    for &a in n_x {
        for &b in n_y {
            for &c in d_x {
                out.push(AttentionShape {
                    n_x: a,
                    n_y: b,
                    d_x: c,
                    l_y,
                });
            }
        }
    }
    out
}

/// Measures one mode at one shape: counted MACs of a single run and the
/// median time of `repeats` runs of the score path on fixed random inputs.
pub fn measure(shape: &AttentionShape, mode: AttentionMode, repeats: usize, seed: u64) -> Result<BenchPoint> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calls = attention_calls(shape, mode);
    let inputs: Vec<_> = calls.iter().map(|c| attention_inputs::<f32>(c, &mut rng)).collect();
    let run = || -> Result<crate::tensor::MacCounter> {
        let mut g = Graph::<f32>::new();
        for (call, [q, k, v]) in calls.iter().zip(&inputs) {
            let (q, k, v) = (g.input(q.clone())?, g.input(k.clone())?, g.input(v.clone())?);
            scaled_dot_product(&mut g, q, k, v, 1, None, call.tag)?;
        }
        Ok(g.macs())
    };
    let macs = run()?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        run()?;
        times.push(t0.elapsed().as_nanos().max(1) as u64);
    }
    times.sort_unstable();
    let proj_macs = calls
        .iter()
        .map(|c| 4 * (c.batch * c.len * c.width * c.width) as u64)
        .sum();
    Ok(BenchPoint {
        mode,
        n_x: shape.n_x,
        n_y: shape.n_y,
        d_x: shape.d_x,
        l_y: shape.l_y,
        score_macs: macs.score() / 2,
        score_x_macs: macs.score_x / 2,
        score_y_macs: macs.score_y / 2,
        proj_macs,
        closed_form: closed_form_macs(shape, mode),
        time_ns_median: times[times.len() / 2],
    })
}

/// Measures every mode on every grid point; infeasible points are skipped
/// and reported.
pub fn sweep(modes: &[AttentionMode], shapes: &[AttentionShape], repeats: usize, seed: u64) -> Result<Sweep> {
    let mut out = Sweep::default();
    for shape in shapes {
        if let Err(e) = shape.validate() {
            out.skipped.push(e.to_string());
            continue;
        }
        for &mode in modes {
            out.points.push(measure(shape, mode, repeats, seed)?);
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[BenchPoint]) -> String {
    let mut out = String::from("mode,N_x,N_y,D_x,L_y,score_macs,proj_macs,closed_form,time_ns_median\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.mode.name(),
            p.n_x,
            p.n_y,
            p.d_x,
            p.l_y,
            p.score_macs,
            p.proj_macs,
            p.closed_form,
            p.time_ns_median
        ));
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`. Needs at least four points
/// spanning at least a factor of eight in `x`.
pub fn fit_scaling_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return Err(Error::Contract(format!("need at least 4 paired points, got {} and {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Contract("scaling fit needs positive finite values".into()));
    }
    let (lo, hi) = xs.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    if hi / lo < 8.0 {
        return Err(Error::Contract(format!("x spans only {:.2}x, need 8x", hi / lo)));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Which counted term a scaling fit reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Total,
    X,
    Y,
}

/// Counted MACs of `term` while one parameter of `base` takes each of `values`.
pub fn scaling_series(
    mode: AttentionMode,
    base: AttentionShape,
    vary: impl Fn(AttentionShape, usize) -> AttentionShape,
    values: &[usize],
    term: Term,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &v in values {
        let shape = vary(base, v);
        let m = crate::davit::count_attention_macs(&shape, mode, 0)?;
        let y = match term {
            Term::Total => m.per_product,
            Term::X => m.score_x / 2,
            Term::Y => m.score_y / 2,
        };
        xs.push(v as f64);
        ys.push(y as f64);
    }
    Ok((xs, ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic_has_slope_two() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((fit_scaling_exponent(&xs, &ys).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn fit_preconditions() {
        assert!(fit_scaling_exponent(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_scaling_exponent(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(fit_scaling_exponent(&[1.0, 2.0, 4.0, 8.0], &[1.0, 0.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn doubling_n_x_quadruples_vit() {
        let a = AttentionShape {
            n_x: 8,
            n_y: 4,
            d_x: 32,
            l_y: 1,
        };
        let b = AttentionShape { n_x: 16, ..a };
        let ma = measure(&a, AttentionMode::Vit, 1, 0).unwrap();
        let mb = measure(&b, AttentionMode::Vit, 1, 0).unwrap();
        assert_eq!(mb.score_macs, 4 * ma.score_macs);
        assert!(ma.time_ns_median > 0);
    }

    #[test]
    fn infeasible_points_are_skipped() {
        let s = sweep(&AttentionMode::ALL, &grid(&[4], &[3], &[16], 1), 1, 0).unwrap();
        assert!(s.points.is_empty());
        assert_eq!(s.skipped.len(), 1);
    }

    #[test]
    fn csv_header() {
        let s = sweep(&[AttentionMode::Davit], &grid(&[4], &[2], &[8], 2), 1, 0).unwrap();
        let csv = sweep_csv(&s.points);
        assert!(csv.starts_with("mode,N_x,N_y,D_x,L_y,score_macs,proj_macs,closed_form,time_ns_median\n"));
        assert_eq!(s.points[0].score_macs, s.points[0].closed_form);
    }
}
