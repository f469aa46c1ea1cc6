//! Time-order alignment of navigated trajectories.
//!
//! A stream is cut into `K` uniformly spaced segments. Their navigated
//! representations are projected onto the span of the frame, reduced to the
//! first principal coordinate, and compared with the true start order by
//! Spearman rank correlation.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{LtnError, Result};
use crate::latent_basis::BasisMode;
use crate::numerics::Matrix;
use crate::params::ParamStore;
use crate::synthetic_data::{ClipView, Stream};
use crate::time_encoder::TimeShift;

use super::model::LtnModel;

/// Spread below which a trajectory counts as constant.
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignedSegment {
    pub index: usize,
    pub t_start: f64,
    pub coord_1: f64,
    pub coord_2: f64,
}

/// |rho| of one trajectory and its two leading principal coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub rho: f64,
    /// Set when the trajectory carries no ordering signal; `rho` is then 0.
    pub degenerate: bool,
    pub segments: Vec<AlignedSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Navigated `f'`.
    pub blended: Alignment,
    /// Pre-navigation `f`, same projection.
    pub original: Alignment,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(LtnError::Shape {
            op: "spearman",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    if a.len() < 2 {
        return Err(LtnError::invalid("spearman needs at least two points"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va * vb).sqrt()))
}

/// Principal coordinates of the rows of `points`, leading two columns.
fn principal_coordinates(points: &Matrix) -> (Vec<f64>, Vec<f64>, f64) {
    let (n, d) = points.shape();
    let mut centered = DMatrix::from_row_slice(n, d, points.data());
    for c in 0..d {
        let mean = centered.column(c).mean();
        centered.column_mut(c).add_scalar_mut(-mean);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let coord = |k: usize| -> Vec<f64> {
        match order.get(k) {
            Some(&i) => (centered.clone() * eig.eigenvectors.column(i))
                .iter()
                .copied()
                .collect(),
            None => vec![0.0; n],
        }
    };
    let spread = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0).sqrt());
    (coord(0), coord(1), spread)
}

/// Alignment of a trajectory whose rows are already in span coordinates.
pub fn align_trajectory(coords: &Matrix, t_starts: &[f64]) -> Result<Alignment> {
    if coords.rows() != t_starts.len() {
        return Err(LtnError::Shape {
            op: "time_alignment",
            left: coords.shape(),
            right: (t_starts.len(), 1),
        });
    }
    if coords.rows() < 3 {
        return Err(LtnError::invalid("time alignment needs at least three segments"));
    }
    let (pc1, pc2, spread) = principal_coordinates(coords);
    let rho = if spread <= DEGENERACY_TOLERANCE * (1.0 + coords.max_abs()) {
        None
    } else {
        spearman(&pc1, t_starts)?
    };
    let segments = t_starts
        .iter()
        .enumerate()
        .map(|(index, &t_start)| AlignedSegment {
            index,
            t_start,
            coord_1: pc1[index],
            coord_2: pc2[index],
        })
        .collect();
    Ok(Alignment {
        rho: rho.map_or(0.0, f64::abs),
        degenerate: rho.is_none(),
        segments,
    })
}

/// Projects `reps` onto the span of `frame` (coordinates `reps Q`), or keeps
/// them whole without a frame, then aligns.
pub fn align_representations(reps: &Matrix, frame: Option<&Matrix>, t_starts: &[f64]) -> Result<Alignment> {
    match frame {
        Some(q) => align_trajectory(&reps.matmul(q)?, t_starts),
        None => align_trajectory(reps, t_starts),
    }
}

/// Start frames of `k` uniformly spaced segments of `len` frames.
pub fn segment_starts(frames: usize, len: usize, k: usize) -> Result<Vec<usize>> {
    if k < 3 {
        return Err(LtnError::invalid("time alignment needs at least three segments"));
    }
    let last = frames
        .checked_sub(len)
        .ok_or_else(|| LtnError::invalid("stream shorter than one segment"))?;
    if last + 1 < k {
        return Err(LtnError::invalid(format!(
            "{k} distinct segments of {len} frames do not fit in {frames} frames"
        )));
    }
    Ok((0..k)
        .map(|i| ((i * last) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

/// Alignment of `k` uniform segments of `stream` under the model.
pub fn time_alignment(model: &LtnModel, store: &ParamStore, stream: &Stream, k: usize) -> Result<AlignmentReport> {
    let len = model.encoder.clip_length;
    let starts = segment_starts(stream.num_frames(), len, k)?;
    let views = starts
        .iter()
        .map(|&s| {
            Ok(ClipView {
                clip: stream.slice(s, len)?,
                dt: TimeShift::new(stream.frame_time(s))?,
                stream_id: stream.id,
                augmentation_seed: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ClipView> = views.iter().collect();
    let nav = model.blended(store, &refs)?;
    let t_starts: Vec<f64> = views.iter().map(|v| v.dt.t_start()).collect();
    // Span coordinates need an orthonormal frame even when training used the raw one.
    let frame = match model.basis() {
        Some(b) => Some(b.frame_values(store, BasisMode::Orthogonalized)?),
        None => None,
    };
    Ok(AlignmentReport {
        blended: align_representations(&nav.blended, frame.as_ref(), &t_starts)?,
        original: align_representations(&nav.original, frame.as_ref(), &t_starts)?,
    })
}

/// Writes `segment_index,t_start,coord_1,coord_2` rows with a header.
pub fn write_alignment_csv<W: Write>(mut w: W, alignment: &Alignment) -> Result<()> {
    writeln!(w, "segment_index,t_start,coord_1,coord_2")?;
    for s in &alignment.segments {
        writeln!(w, "{},{},{},{}", s.index, s.t_start, s.coord_1, s.coord_2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_matches_hand_value() {
        // d = (0, -1, 1, 0, 0) on ranks; rho = 1 - 6*2 / (5*24) = 0.9
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.0, 3.0, 2.0, 4.0, 5.0];
        assert!((spearman(&a, &b).unwrap().unwrap() - 0.9).abs() < 1e-15);
        let rev: Vec<f64> = a.iter().rev().copied().collect();
        assert!((spearman(&a, &rev).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_constant_side_is_none() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap(), None);
    }

    #[test]
    fn monotone_axis_trajectory_has_unit_rho() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let mut reps = Matrix::zeros(20, 4);
        for (r, &ti) in t.iter().enumerate() {
            reps.set(r, 0, ti);
        }
        let mut q = Matrix::zeros(4, 2);
        q.set(0, 0, 1.0);
        q.set(2, 1, 1.0);
        let a = align_representations(&reps, Some(&q), &t).unwrap();
        assert!(!a.degenerate);
        assert!((a.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_trajectory_is_degenerate() {
        let reps = Matrix::filled(10, 3, 0.7);
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let a = align_representations(&reps, None, &t).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.rho, 0.0);
    }

    #[test]
    fn uniform_segments_cover_the_stream() {
        assert_eq!(segment_starts(64, 8, 3).unwrap(), vec![0, 28, 56]);
        assert_eq!(segment_starts(64, 8, 20).unwrap().last(), Some(&56));
        assert!(segment_starts(64, 8, 2).is_err());
        assert!(segment_starts(10, 8, 4).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = [0.0, 1.0, 2.0];
        let reps = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 1.0]]);
        let a = align_representations(&reps, None, &t).unwrap();
        let mut out = Vec::new();
        write_alignment_csv(&mut out, &a).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("segment_index,t_start,coord_1,coord_2\n0,0,"));
    }
}
