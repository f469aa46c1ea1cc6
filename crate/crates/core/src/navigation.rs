//! Time navigation: turning `f` into the time-blended `f'`.
//!
//! * `LinearAdd`: `f' = f + e_t(dt, f)` with a `dim`-wide encoder head.
//! * `Attention`: `W = softmax(e_t(dt, f))`, `u = W Q^T`, `f' = f ⊙ u`.
//! * `LinearTransform`: `A = e_t(dt, f)`, `f' = f + A Q^T`. The shift lies in
//!   span(Q) and the complement of `f` is left untouched.
//! * `None`: `f' = f`.

use std::fmt;
use std::str::FromStr;

use crate::error::{LtnError, Result};
use crate::latent_basis::{BasisMode, OrthogonalBasis};
use crate::numerics::{Matrix, Tape, Var};
use crate::params::ParamStore;
use crate::time_encoder::{TimeEncoderParams, TimeShift};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    None,
    LinearAdd,
    Attention,
    LinearTransform,
}

impl Variant {
    pub fn uses_basis(self) -> bool {
        matches!(self, Variant::Attention | Variant::LinearTransform)
    }

    pub fn uses_time_encoder(self) -> bool {
        self != Variant::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::LinearAdd => "v1",
            Variant::Attention => "v2",
            Variant::LinearTransform => "v3",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Variant::None),
            "v1" => Ok(Variant::LinearAdd),
            "v2" => Ok(Variant::Attention),
            "v3" => Ok(Variant::LinearTransform),
            _ => Err(format!("expected one of none|v1|v2|v3, got `{s}`")),
        }
    }
}

/// How the attention weights are combined with the representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionReading {
    /// `f ⊙ u`
    Hadamard,
    /// `(f·u) u + complement of f outside span(Q)`
    ScalarProjection,
}

impl fmt::Display for AttentionReading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionReading::Hadamard => "hadamard",
            AttentionReading::ScalarProjection => "scalar",
        })
    }
}

impl FromStr for AttentionReading {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hadamard" => Ok(AttentionReading::Hadamard),
            "scalar" => Ok(AttentionReading::ScalarProjection),
            _ => Err(format!("expected hadamard|scalar, got `{s}`")),
        }
    }
}

/// Output of a navigation step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeBlendedRep {
    pub blended: Matrix,
    pub original: Matrix,
    /// Attention weights `W` or magnitudes `A`, when the variant has them.
    pub coords: Option<Matrix>,
}

/// Navigation variant with the parameters it reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Navigator {
    pub variant: Variant,
    pub encoder: Option<TimeEncoderParams>,
    pub basis: Option<OrthogonalBasis>,
    pub basis_mode: BasisMode,
    pub attention: AttentionReading,
}

/// Tape handles produced by [`Navigator::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Navigated {
    pub blended: Var,
    pub coords: Option<Var>,
}

impl Navigator {
    pub fn new(
        variant: Variant,
        encoder: Option<TimeEncoderParams>,
        basis: Option<OrthogonalBasis>,
        basis_mode: BasisMode,
        attention: AttentionReading,
    ) -> Result<Self> {
        if variant.uses_time_encoder() && encoder.is_none() {
            return Err(LtnError::invalid(format!("variant {variant} needs a time encoder")));
        }
        if variant.uses_basis() {
            let (Some(b), Some(e)) = (&basis, &encoder) else {
                return Err(LtnError::invalid(format!("variant {variant} needs a basis")));
            };
            if b.dim != e.shape.dim || e.out_width() != b.m {
                return Err(LtnError::invalid(format!(
                    "variant {variant}: encoder emits {} values for a basis of size {}",
                    e.out_width(),
                    b.m
                )));
            }
        }
        if variant == Variant::LinearAdd {
            let e = encoder.as_ref().expect("checked above");
            if e.out_width() != e.shape.dim {
                return Err(LtnError::invalid(format!(
                    "linear addition needs a {}-wide encoder head, got {}",
                    e.shape.dim,
                    e.out_width()
                )));
            }
        }
        Ok(Navigator {
            variant,
            encoder,
            basis,
            basis_mode,
            attention,
        })
    }

    /// Frame for this forward pass; `None` for variants without a basis.
    pub fn frame(&self, tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
        match (&self.basis, self.variant.uses_basis()) {
            (Some(b), true) => Ok(Some(b.frame(tape, vars, self.basis_mode)?)),
            _ => Ok(None),
        }
    }

    /// Batched navigation. `reps` is `n x dim`, `times` the normalized `n x 1` column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        reps: Var,
        times: Var,
        frame: Option<Var>,
    ) -> Result<Navigated> {
        let encoder = match (&self.encoder, self.variant) {
            (_, Variant::None) => {
                return Ok(Navigated {
                    blended: reps,
                    coords: None,
                })
            }
            (Some(e), _) => e,
            (None, v) => return Err(LtnError::invalid(format!("variant {v} needs a time encoder"))),
        };
        let code = encoder.forward(tape, vars, times, reps)?;
        match self.variant {
            Variant::None => unreachable!(),
            Variant::LinearAdd => {
                let blended = tape.add(reps, code).map_err(|_| LtnError::Shape {
                    op: "navigate_v1",
                    left: tape.value(reps).shape(),
                    right: tape.value(code).shape(),
                })?;
                Ok(Navigated { blended, coords: None })
            }
            Variant::Attention => {
                let q = frame.ok_or_else(|| LtnError::invalid("attention needs a frame"))?;
                let weights = tape.softmax_rows(code)?;
                let combined = tape.matmul_t(weights, q)?;
                let blended = match self.attention {
                    AttentionReading::Hadamard => tape.mul(reps, combined)?,
                    AttentionReading::ScalarProjection => {
                        let gated = tape.mul(reps, combined)?;
                        let along = tape.row_sum(gated)?;
                        let aligned = tape.scale_rows(combined, along)?;
                        let coords = tape.matmul(reps, q)?;
                        let inside = tape.matmul_t(coords, q)?;
                        let outside = tape.sub(reps, inside)?;
                        tape.add(aligned, outside)?
                    }
                };
                Ok(Navigated {
                    blended,
                    coords: Some(weights),
                })
            }
            Variant::LinearTransform => {
                let q = frame.ok_or_else(|| LtnError::invalid("linear transform needs a frame"))?;
                let shift = tape.matmul_t(code, q)?;
                let blended = tape.add(reps, shift)?;
                Ok(Navigated {
                    blended,
                    coords: Some(code),
                })
            }
        }
    }

    /// Value-level navigation of a batch of representations.
    pub fn navigate(&self, store: &ParamStore, reps: &Matrix, shifts: &[TimeShift]) -> Result<TimeBlendedRep> {
        if shifts.len() != reps.rows() {
            return Err(LtnError::Shape {
                op: "navigate",
                left: reps.shape(),
                right: (shifts.len(), 1),
            });
        }
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape)?;
        let frame = self.frame(&mut tape, &vars)?;
        let r = tape.leaf(reps.clone())?;
        let times = match &self.encoder {
            Some(e) => e.time_column(shifts),
            None => Matrix::zeros(reps.rows(), 1),
        };
        let t = tape.leaf(times)?;
        let out = self.forward(&mut tape, &vars, r, t, frame)?;
        Ok(TimeBlendedRep {
            blended: tape.value(out.blended).clone(),
            original: reps.clone(),
            coords: out.coords.map(|c| tape.value(c).clone()),
        })
    }
}

fn single(
    variant: Variant,
    rep: &Matrix,
    dt: TimeShift,
    enc: &TimeEncoderParams,
    basis: Option<&OrthogonalBasis>,
    store: &ParamStore,
) -> Result<TimeBlendedRep> {
    if rep.rows() != 1 || rep.cols() != enc.shape.dim {
        return Err(LtnError::Shape {
            op: "navigate",
            left: rep.shape(),
            right: (1, enc.shape.dim),
        });
    }
    let nav = Navigator::new(
        variant,
        Some(enc.clone()),
        basis.copied(),
        BasisMode::Orthogonalized,
        AttentionReading::Hadamard,
    )?;
    nav.navigate(store, rep, &[dt])
}

/// Linear addition: `f' = f + e_t(dt, f)`.
pub fn navigate_v1(rep: &Matrix, dt: TimeShift, enc: &TimeEncoderParams, store: &ParamStore) -> Result<TimeBlendedRep> {
    single(Variant::LinearAdd, rep, dt, enc, None, store)
}

/// Attention over the basis directions, Hadamard reading.
pub fn navigate_v2(
    rep: &Matrix,
    dt: TimeShift,
    enc: &TimeEncoderParams,
    basis: &OrthogonalBasis,
    store: &ParamStore,
) -> Result<TimeBlendedRep> {
    single(Variant::Attention, rep, dt, enc, Some(basis), store)
}

/// Linear transformation along the orthonormalized basis.
pub fn navigate_v3(
    rep: &Matrix,
    dt: TimeShift,
    enc: &TimeEncoderParams,
    basis: &OrthogonalBasis,
    store: &ParamStore,
) -> Result<TimeBlendedRep> {
    single(Variant::LinearTransform, rep, dt, enc, Some(basis), store)
}
