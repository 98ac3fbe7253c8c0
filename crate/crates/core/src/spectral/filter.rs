use std::sync::Arc;

use super::fft::transform_in_place;
use super::mask::SpectralFilterSpec;
use crate::autodiff::{DenseArray, RowFilter, Tape, Var};
use crate::error::{dim_err, Result};

/// Real part of `IDFT(mask ⊙ DFT(row))`. Returns the largest discarded
/// imaginary magnitude.
fn filter_row(mask: &[bool], row: &[f64], out: &mut [f64]) -> f64 {
    let mut re = row.to_vec();
    let mut im = vec![0.0; row.len()];
    transform_in_place(&mut re, &mut im, false);
    for (q, &keep) in mask.iter().enumerate() {
        if !keep {
            re[q] = 0.0;
            im[q] = 0.0;
        }
    }
    transform_in_place(&mut re, &mut im, true);
    out.copy_from_slice(&re);
    im.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Tape-registered Fourier filter block.
///
/// The map `x ↦ Re(IDFT(m ⊙ DFT(x)))` is real-linear; its adjoint applies the
/// frequency-reversed mask.
#[derive(Clone, Debug)]
pub struct FourierFilter {
    spec: SpectralFilterSpec,
    reversed: SpectralFilterSpec,
}

impl FourierFilter {
    pub fn new(spec: SpectralFilterSpec) -> Self {
        let reversed = spec.reversed();
        Self { spec, reversed }
    }

    pub fn spec(&self) -> &SpectralFilterSpec {
        &self.spec
    }
}

impl RowFilter for FourierFilter {
    fn row_len(&self) -> usize {
        self.spec.d()
    }

    fn apply(&self, row: &[f64], out: &mut [f64]) {
        if self.spec.is_identity() {
            out.copy_from_slice(row);
        } else {
            filter_row(self.spec.mask(), row, out);
        }
    }

    fn apply_adjoint(&self, row: &[f64], out: &mut [f64]) {
        if self.reversed.is_identity() {
            out.copy_from_slice(row);
        } else {
            filter_row(self.reversed.mask(), row, out);
        }
    }
}

/// Filters every row of a `B×d` matrix.
pub fn ffb_apply(x: &DenseArray, spec: &SpectralFilterSpec) -> Result<DenseArray> {
    let (b, d) = x.as_matrix_dims();
    if d != spec.d() {
        return Err(dim_err!("rows of length {d} for a filter of length {}", spec.d()));
    }
    let mut out = DenseArray::zeros(&[b, d]);
    for i in 0..b {
        let row = x.row(i);
        let residue = filter_row(spec.mask(), row, out.row_mut(i));
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if spec.is_conjugate_symmetric() && residue > 1e-6 * norm {
            log::warn!("imaginary residue {residue:.3e} after inverse transform of row {i}");
        }
    }
    Ok(out)
}

/// [`ffb_apply`] recorded on a tape.
pub fn ffb_on_tape(tape: &mut Tape, x: Var, filter: &Arc<FourierFilter>) -> Result<Var> {
    tape.row_filter(x, filter.clone())
}
