use crate::error::{LtnError, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a 1x1 loss variable. The result is the maximum over all parameter
/// entries of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_many<F>(f: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(LtnError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|m| tape.leaf(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar(loss).is_finite() {
        return Err(LtnError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(loss)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<F>(f: F, params: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(params), step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let err = grad_check(|t, x| t.dot(x, x), &Matrix::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = grad_check(
            |t, _x| t.leaf(Matrix::scalar(4.0)),
            &Matrix::row_vector(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_errors() {
        let r = grad_check(
            |t, x| {
                let big = t.scale(x, 1e308)?;
                t.sum(big)
            },
            &Matrix::row_vector(&[10.0]),
            1e-5,
        );
        assert!(r.is_err());
    }
}
