use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1e-12, |analytic| + |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

fn eval_loss<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let consts: Vec<Tensor> = params.iter().map(|p| p.detach()).collect();
    loss_fn(&mut tape, &consts)?.item()
}

/// Compares tape gradients against central differences for every entry of
/// every parameter.
///
/// `loss_fn` receives the tape and the (tape-linked) parameters and must
/// return a scalar built from them.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite difference eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| tape.leaf(&p.detach().with_requires_grad(true)))
        .collect();
    let loss = loss_fn(&mut tape, &leaves)?;
    let analytic: Vec<Vec<f64>> = if loss.node().is_some() {
        let grads = tape.backward(&loss)?;
        leaves
            .iter()
            .map(|l| grads.of(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; l.len()]))
            .collect()
    } else {
        // loss does not depend on any parameter
        leaves.iter().map(|l| vec![0.0; l.len()]).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = params.iter().map(|p| p.detach()).collect();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval_loss(&loss_fn, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval_loss(&loss_fn, &work)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[j];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::Numeric(format!(
                    "NaN gradient estimate at parameter {pi}, entry {j} (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = (a - numeric).abs() / (numeric.abs() + a.abs()).max(1e-12);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, j);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact() {
        let p = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = finite_difference_check(
            |tape, ps| {
                let sq = tape.mul(&ps[0], &ps[0])?;
                let s = tape.scale(&sq, 0.5)?;
                tape.sum(&s)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report =
            finite_difference_check(|_, _| Ok(Tensor::scalar(3.0)), &[p], 1e-5).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.worst_analytic, 0.0);
        assert_eq!(report.worst_numeric, 0.0);
    }

    #[test]
    fn nan_is_reported_with_parameter_index() {
        let p = Tensor::new(&[1], vec![1.0]).unwrap();
        let q = Tensor::new(&[1], vec![-1.0]).unwrap();
        let err = finite_difference_check(
            |tape, ps| {
                // sqrt via exp(0.5 * ln) is not available; 0/0 through mul by NaN
                let nan = Tensor::new(&[1], vec![f64::NAN]).unwrap();
                let bad = tape.mul(&ps[1], &nan)?;
                let s = tape.add(&ps[0], &bad)?;
                tape.sum(&s)
            },
            &[p, q],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("parameter"), "{err}");
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let p = Tensor::scalar(1.0);
        assert!(finite_difference_check(|t, ps| t.sum(&ps[0]), &[p], 0.0).is_err());
    }
}
