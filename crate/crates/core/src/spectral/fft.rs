use std::f64::consts::PI;

use crate::error::{dim_err, Result};

/// Spectrum of a length-`d` sequence, split into real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(dim_err!("re has {} bins, im has {}", re.len(), im.len()));
        }
        Ok(Self { re, im })
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn magnitude(&self, q: usize) -> f64 {
        self.re[q].hypot(self.im[q])
    }

    /// Largest violation of `S_q = conj(S_{-q})`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let d = self.len();
        (0..d)
            .map(|q| {
                let r = (d - q) % d;
                (self.re[q] - self.re[r]).abs().max((self.im[q] + self.im[r]).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Output of an inverse transform of a spectrum that should be real.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSignal {
    pub values: Vec<f64>,
    /// Largest absolute imaginary part discarded by taking the real component.
    pub max_imag_residue: f64,
}

/// In-place complex DFT. Power-of-two lengths use an iterative radix-2 FFT,
/// other lengths a direct O(d²) sum. The inverse includes the `1/d` factor.
pub fn transform_in_place(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im, inverse);
    } else {
        direct(re, im, inverse);
    }
    if inverse {
        let scale = 1.0 / n as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
    }
}

fn radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Twiddles computed directly rather than by recurrence to keep
                // roundoff at the 1e-15 level for d = 512.
                let (s, c) = (step * k as f64).sin_cos();
                let a = start + k;
                let b = a + half;
                let tr = c * re[b] - s * im[b];
                let ti = c * im[b] + s * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn direct(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for q in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for p in 0..n {
            let angle = sign * 2.0 * PI * ((p * q) % n) as f64 / n as f64;
            let (s, c) = angle.sin_cos();
            sr += re[p] * c - im[p] * s;
            si += re[p] * s + im[p] * c;
        }
        out_re[q] = sr;
        out_im[q] = si;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// `S_q = Σ_p s_p e^{-i2πpq/d}`.
pub fn dft_1d(signal: &[f64]) -> Result<ComplexSpectrum> {
    if signal.is_empty() {
        return Err(dim_err!("cannot transform an empty signal"));
    }
    let mut re = signal.to_vec();
    let mut im = vec![0.0; signal.len()];
    transform_in_place(&mut re, &mut im, false);
    Ok(ComplexSpectrum { re, im })
}

/// `s_p = (1/d) Σ_q S_q e^{+i2πpq/d}`, keeping the real part.
pub fn idft_1d(spectrum: &ComplexSpectrum) -> RealSignal {
    let mut re = spectrum.re.clone();
    let mut im = spectrum.im.clone();
    transform_in_place(&mut re, &mut im, true);
    let max_imag_residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    RealSignal {
        values: re,
        max_imag_residue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let s = dft_1d(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.re, vec![4.0, 0.0, 0.0, 0.0]);
        let s = dft_1d(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.re, vec![1.0; 4]);
        assert!(s.im.iter().all(|v| *v == 0.0));

        let s = dft_1d(&[0.0, 1.0, 0.0, -1.0]).unwrap();
        let expected_im = [0.0, -2.0, 0.0, 2.0];
        for q in 0..4 {
            assert!(s.re[q].abs() < 1e-12);
            assert!((s.im[q] - expected_im[q]).abs() < 1e-12);
        }
        let back = idft_1d(&s);
        for (v, e) in back.values.iter().zip([0.0, 1.0, 0.0, -1.0]) {
            assert!((v - e).abs() < 1e-12);
        }

        let back = idft_1d(&ComplexSpectrum::new(vec![4.0, 0.0, 0.0, 0.0], vec![0.0; 4]).unwrap());
        assert_eq!(back.values, vec![1.0; 4]);
        assert_eq!(back.max_imag_residue, 0.0);
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert!(dft_1d(&[]).is_err());
    }

    #[test]
    fn odd_lengths_use_direct_sum() {
        let x = [0.5, -1.0, 2.0];
        let s = dft_1d(&x).unwrap();
        assert!((s.re[0] - 1.5).abs() < 1e-12);
        let back = idft_1d(&s);
        for (a, b) in back.values.iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
