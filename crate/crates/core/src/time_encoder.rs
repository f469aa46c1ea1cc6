//! Encoder for a view's temporal shift, conditioned on the view's representation.
//!
//! `e_t(dt, f) = outer([relu(inner(t_start / T)), f])`, where `T` is the
//! stream duration. The output width is `M` for the subspace variants and
//! `dim` for plain additive navigation.

use rand::Rng;

use crate::error::{LtnError, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::params::{Linear, Mlp, ParamStore};

/// Absolute start time, in seconds, of a segment within its stream.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimeShift {
    t_start: f64,
}

impl TimeShift {
    pub fn new(t_start: f64) -> Result<Self> {
        if !t_start.is_finite() || t_start < 0.0 {
            return Err(LtnError::invalid(format!(
                "time shift must be finite and non-negative, got {t_start}"
            )));
        }
        Ok(TimeShift { t_start })
    }

    pub fn t_start(self) -> f64 {
        self.t_start
    }
}

/// Architecture of the time encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeEncoderShape {
    pub dim: usize,
    pub inner_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub out_width: usize,
}

impl TimeEncoderShape {
    /// Inner width `dim/4`, two hidden layers of width `dim`.
    pub fn standard(dim: usize, out_width: usize) -> Self {
        TimeEncoderShape {
            dim,
            inner_width: (dim / 4).max(1),
            hidden_width: dim,
            hidden_layers: 2,
            out_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoderParams {
    pub inner: Linear,
    pub outer: Mlp,
    pub shape: TimeEncoderShape,
    /// Divisor applied to `t_start` before the inner layer.
    pub time_scale: f64,
}

impl TimeEncoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        shape: TimeEncoderShape,
        time_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(time_scale > 0.0) || !time_scale.is_finite() {
            return Err(LtnError::invalid("time scale must be positive"));
        }
        if shape.dim == 0 || shape.out_width == 0 || shape.inner_width == 0 {
            return Err(LtnError::invalid("time encoder widths must be positive"));
        }
        let inner = Linear::new(store, "time.inner", 1, shape.inner_width, rng);
        let mut widths = vec![shape.inner_width + shape.dim];
        widths.extend(std::iter::repeat_n(shape.hidden_width, shape.hidden_layers));
        widths.push(shape.out_width);
        let outer = Mlp::new(store, "time.outer", &widths, rng);
        Ok(TimeEncoderParams {
            inner,
            outer,
            shape,
            time_scale,
        })
    }

    pub fn out_width(&self) -> usize {
        self.shape.out_width
    }

    /// Normalized time inputs as an `n x 1` column.
    pub fn time_column(&self, shifts: &[TimeShift]) -> Matrix {
        let t: Vec<f64> = shifts.iter().map(|s| s.t_start / self.time_scale).collect();
        Matrix::column_vector(&t)
    }

    /// Batched forward: `times` is `n x 1` (already normalized), `reps` is `n x dim`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], times: Var, reps: Var) -> Result<Var> {
        let rep_width = tape.value(reps).cols();
        if rep_width != self.shape.dim {
            return Err(LtnError::Shape {
                op: "encode_time",
                left: tape.value(reps).shape(),
                right: (1, self.shape.dim),
            });
        }
        let h = self.inner.forward(tape, vars, times)?;
        let h = tape.relu(h)?;
        let joined = tape.concat_cols(&[h, reps])?;
        self.outer.forward(tape, vars, joined)
    }
}

/// `e_t(dt, rep)` for a single view.
pub fn encode_time(dt: TimeShift, rep: &Matrix, params: &TimeEncoderParams, store: &ParamStore) -> Result<Matrix> {
    if rep.rows() != 1 {
        return Err(LtnError::Shape {
            op: "encode_time",
            left: rep.shape(),
            right: (1, params.shape.dim),
        });
    }
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape)?;
    let t = tape.leaf(params.time_column(&[dt]))?;
    let r = tape.leaf(rep.clone())?;
    let out = params.forward(&mut tape, &vars, t, r)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(shape: TimeEncoderShape, seed: u64) -> (ParamStore, TimeEncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = TimeEncoderParams::new(&mut store, shape, 10.0, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let (mut store, p) = build(TimeEncoderShape::standard(8, 3), 1);
        for v in store.values_mut() {
            *v = Matrix::zeros(v.rows(), v.cols());
        }
        let out = encode_time(TimeShift::new(4.0).unwrap(), &Matrix::filled(1, 8, 0.7), &p, &store).unwrap();
        assert_eq!(out, Matrix::zeros(1, 3));
    }

    #[test]
    fn deterministic() {
        let (store, p) = build(TimeEncoderShape::standard(8, 3), 2);
        let rep = Matrix::filled(1, 8, 0.3);
        let dt = TimeShift::new(1.5).unwrap();
        assert_eq!(
            encode_time(dt, &rep, &p, &store).unwrap(),
            encode_time(dt, &rep, &p, &store).unwrap()
        );
    }

    #[test]
    fn hand_set_affine_map() {
        // No hidden layers: out = [relu(a t + c), r1, r2] W + b, with t = 4 / 10.
        let shape = TimeEncoderShape {
            dim: 2,
            inner_width: 1,
            hidden_width: 0,
            hidden_layers: 0,
            out_width: 1,
        };
        let (mut store, p) = build(shape, 3);
        *store.get_mut(p.inner.weight) = Matrix::scalar(2.0);
        *store.get_mut(p.inner.bias) = Matrix::scalar(0.5);
        let outer = p.outer.layers[0];
        *store.get_mut(outer.weight) = Matrix::column_vector(&[1.0, -1.0, 3.0]);
        *store.get_mut(outer.bias) = Matrix::scalar(0.25);
        let out = encode_time(
            TimeShift::new(4.0).unwrap(),
            &Matrix::row_vector(&[0.2, 0.1]),
            &p,
            &store,
        )
        .unwrap();
        // relu(2 * 0.4 + 0.5) = 1.3; 1.3 - 0.2 + 0.3 + 0.25 = 1.65
        assert!((out.get(0, 0) - 1.65).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_time() {
        assert!(TimeShift::new(f64::NAN).is_err());
        assert!(TimeShift::new(f64::INFINITY).is_err());
        assert!(TimeShift::new(-1.0).is_err());
        assert!(TimeShift::new(0.0).is_ok());
    }

    #[test]
    fn not_constant_in_time() {
        let (store, p) = build(TimeEncoderShape::standard(8, 4), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let rep = Matrix::randn(1, 8, 1.0, &mut rng);
        let a = encode_time(TimeShift::new(0.0).unwrap(), &rep, &p, &store).unwrap();
        let b = encode_time(TimeShift::new(10.0).unwrap(), &rep, &p, &store).unwrap();
        assert!((a.frobenius_norm() - b.frobenius_norm()).abs() > 1e-6);
    }

    #[test]
    fn gradients_wrt_params_and_rep() {
        let (store, p) = build(TimeEncoderShape::standard(8, 3), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let rep = Matrix::randn(2, 8, 1.0, &mut rng);
        let weights = Matrix::randn(2, 3, 1.0, &mut rng);
        let times = p.time_column(&[TimeShift::new(2.0).unwrap(), TimeShift::new(7.0).unwrap()]);
        let mut inputs = store.values().to_vec();
        inputs.push(rep);
        let n = store.len();
        let err = grad_check_many(
            |t, vs| {
                let tv = t.leaf(times.clone())?;
                let out = p.forward(t, &vs[..n], tv, vs[n])?;
                let w = t.leaf(weights.clone())?;
                t.dot(out, w)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn width_mismatch() {
        let (store, p) = build(TimeEncoderShape::standard(8, 3), 6);
        assert!(encode_time(TimeShift::new(1.0).unwrap(), &Matrix::zeros(1, 7), &p, &store).is_err());
    }
}
