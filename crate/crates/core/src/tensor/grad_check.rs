//! Central-difference gradient verification.

use alloc::format;
use alloc::vec::Vec;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare tape gradients of a scalar-valued function against central
/// differences, coordinate by coordinate, and return the worst relative
/// error with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic; it receives a fresh tape and the (tracked or
/// perturbed) parameter list on every call. Probing a point where `f` is
/// non-finite is an error.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig {
            detail: format!("grad_check eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &tracked)?;
    let base = loss.item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check: f at the unperturbed point".into(),
        });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| {
            tape.grad(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect();

    let probe = |k: usize, c: usize, delta: f64| -> Result<f64> {
        let mut data = params[k].data().to_vec();
        data[c] += delta;
        let perturbed = Tensor::new(params[k].shape().to_vec(), data)?;
        let mut probe_params: Vec<Tensor> = params.to_vec();
        probe_params[k] = perturbed;
        let mut t = Tape::disabled();
        let out = f(&mut t, &probe_params)?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check: f at probe ({k}, {c}, {delta:+e})"),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (k, p) in params.iter().enumerate() {
        for c in 0..p.numel() {
            let numeric = (probe(k, c, eps)? - probe(k, c, -eps)?) / (2.0 * eps);
            let ana = analytic[k][c];
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            let rel = (ana - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn square_at_three() {
        // f(x) = x^2, analytic 6 vs numeric 6 at x = 3.
        let x = Tensor::scalar(3.0);
        let err = grad_check(
            |tape, ps| ops::mul(tape, &ps[0], &ps[0]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|tape, ps| ops::mul(tape, &ps[0], &ps[0]), &[x.clone()], 0.0).is_err());
        // ln(x - 1.5) is NaN near x = 1.
        let err = grad_check(
            |tape, ps| {
                let y = ops::affine(tape, &ps[0], 1.0, -1.5)?;
                let l = ops::ln_offset(tape, &y, 0.0)?;
                ops::mean_all(tape, &l)
            },
            &[x],
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
