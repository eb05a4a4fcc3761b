use super::{NumError, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn eval<F>(f: &F, inputs: &[Tensor], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>), NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(with_grad);
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.item(out).ok_or_else(|| NumError::NotScalar {
        shape: tape.shape(out).to_vec(),
    })?;
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(out)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
        .collect();
    Ok((value, g))
}

/// Checks `f` at several input tensors at once.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients_multi<F>(
    f: F,
    at: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumError::BadCheckParam("eps must be positive"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(NumError::BadCheckParam("tol must be positive"));
    }
    let (v0, analytic) = eval(&f, at, true)?;
    let (v1, _) = eval(&f, at, false)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(NumError::NonDeterministic {
            first: v0,
            second: v1,
        });
    }

    let mut numeric = Vec::with_capacity(at.len());
    let mut probe = at.to_vec();
    for ti in 0..at.len() {
        let mut col = Vec::with_capacity(at[ti].len());
        for k in 0..at[ti].len() {
            let orig = at[ti].data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let (fp, _) = eval(&f, &probe, false)?;
            probe[ti].data_mut()[k] = orig - eps;
            let (fm, _) = eval(&f, &probe, false)?;
            probe[ti].data_mut()[k] = orig;
            col.push((fp - fm) / (2.0 * eps));
        }
        numeric.push(col);
    }

    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (ti, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (k, (&a, &n)) in a.iter().zip(n).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            let rel = (a - n).abs() / denom;
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = rel;
                worst = Some((ti, k));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tol,
    })
}

/// Single-input form of [`check_gradients_multi`].
pub fn check_gradients<F>(f: F, at: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    check_gradients_multi(|t, v| f(t, v[0]), std::slice::from_ref(at), eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Sign;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_vec(vec![3.0]).unwrap();
        let r = check_gradients(|t, v| t.mul(v, v), &x, 1e-5, 1e-4).unwrap();
        assert!((r.analytic[0][0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0][0] - 6.0).abs() < 1e-6);
        assert!(r.passed());
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        let err = check_gradients(
            |t, v| {
                calls.set(calls.get() + 1);
                t.scalar_mul(v, calls.get() as f64)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, NumError::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_bad_params() {
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(check_gradients(|t, v| t.sum(v), &x, 0.0, 1e-4).is_err());
        assert!(check_gradients(|t, v| t.sum(v), &x, 1e-5, -1.0).is_err());
    }

    #[test]
    fn sign_selection_away_from_boundary() {
        let f = Tensor::new(vec![2, 3], vec![0.7, -1.2, 0.4, -0.3, 0.9, 1.1]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.5, 0.8, -0.6, 1.3, -0.2, 0.25]).unwrap();
        let r = check_gradients_multi(
            |t, v| {
                let p = t.pairwise_mul(v[0], v[1])?;
                let pos = t.select_sign(p, Sign::Positive)?;
                let neg = t.select_sign(p, Sign::Negative)?;
                let zp = t.sum_last(pos)?;
                let zn = t.sum_last(neg)?;
                let a = t.sigmoid(zp)?;
                let b = t.sigmoid(zn)?;
                let ab = t.mul(a, b)?;
                t.sum(ab)
            },
            &[f, w],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
