use crate::error::{param_err, Result};

/// Signed frequency of DFT bin `q` for length `d`: `q` up to `d/2`, else `q - d`.
pub fn centered_frequency(q: usize, d: usize) -> i64 {
    if q <= d / 2 {
        q as i64
    } else {
        q as i64 - d as i64
    }
}

/// DFT bins of length `d` ordered from lowest to highest `|f|`, with the
/// positive frequency first on ties.
pub fn bins_by_frequency(d: usize) -> Vec<usize> {
    let mut bins: Vec<usize> = (0..d).collect();
    bins.sort_by_key(|&q| {
        let f = centered_frequency(q, d);
        (f.unsigned_abs(), f < 0)
    });
    bins
}

/// Binary mask that keeps the `k` lowest-frequency bins of a length-`d` DFT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpectralFilterSpec {
    d: usize,
    k: usize,
    mask: Vec<bool>,
}

impl SpectralFilterSpec {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn keeps(&self, q: usize) -> bool {
        self.mask[q]
    }

    pub fn is_identity(&self) -> bool {
        self.k == self.d
    }

    /// True when bin `q` is kept exactly when `-q` is, i.e. the filter maps
    /// real signals to real signals without discarding an imaginary part.
    pub fn is_conjugate_symmetric(&self) -> bool {
        (0..self.d).all(|q| self.mask[q] == self.mask[(self.d - q) % self.d])
    }

    /// Signed frequencies of the kept bins, ascending.
    pub fn retained_frequencies(&self) -> Vec<i64> {
        let mut f: Vec<i64> = (0..self.d)
            .filter(|&q| self.mask[q])
            .map(|q| centered_frequency(q, self.d))
            .collect();
        f.sort_unstable();
        f
    }

    /// The same pattern with every bin `q` moved to `-q mod d`.
    pub fn reversed(&self) -> Self {
        let mask = (0..self.d).map(|q| self.mask[(self.d - q) % self.d]).collect();
        Self {
            d: self.d,
            k: self.k,
            mask,
        }
    }
}

pub fn build_lowpass_mask(d: usize, k: usize) -> Result<SpectralFilterSpec> {
    if d == 0 {
        return Err(param_err!("signal length must be positive"));
    }
    if k == 0 || k > d {
        return Err(param_err!("retained bin count {k} outside [1, {d}]"));
    }
    let mut mask = vec![false; d];
    for &q in bins_by_frequency(d).iter().take(k) {
        mask[q] = true;
    }
    Ok(SpectralFilterSpec { d, k, mask })
}
