use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// max over checked coordinates of |autodiff − fd| / (|fd| + 1e-8)
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

fn eval_scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("gradcheck function must return a scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + DENOM_FLOOR)
}

/// Checks every coordinate of `x` for `f: Tensor -> scalar`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let out = f(&mut g, xv)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let ad = grads.get(xv).unwrap_or(&zeros);

    let eval_at = |delta: f64, i: usize| -> Result<f64> {
        let mut xp = x.clone();
        xp.data_mut()[i] += delta;
        let mut g = Graph::new();
        let v = g.variable(xp)?;
        let o = f(&mut g, v).map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{op} while perturbing coordinate {i}")),
            other => other,
        })?;
        eval_scalar(&g, o)
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for i in 0..x.numel() {
        let fd = (eval_at(h, i)? - eval_at(-h, i)?) / (2.0 * h);
        let err = rel_error(ad[i], fd);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = format!("x[{i}]: autodiff {} vs fd {fd}", ad[i]);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks the listed `(parameter, flat index)` coordinates of a scalar
/// function of a whole parameter store.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    coords: &[(String, usize)],
    h: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &base)?;
    eval_scalar(&g, out)?;
    g.backward_into(out, &mut base)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, i) in coords {
        let ad = base
            .grad(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?
            .data()[*i];
        let eval_at = |delta: f64| -> Result<f64> {
            let mut p = store.clone();
            p.get_mut(name).expect("coordinate names a parameter").data_mut()[*i] += delta;
            let mut g = Graph::new();
            let o = f(&mut g, &p)?;
            eval_scalar(&g, o)
        };
        let fd = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        let err = rel_error(ad, fd);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{name}[{i}]: autodiff {ad} vs fd {fd}");
        }
        report.checked += 1;
    }
    Ok(report)
}
