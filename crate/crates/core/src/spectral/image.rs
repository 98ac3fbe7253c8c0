use std::fs;
use std::path::Path;

use super::fft::transform_in_place;
use super::mask::build_lowpass_mask;
use crate::autodiff::DenseArray;
use crate::error::{param_err, Error, FormatError, Result};

/// A low-pass filtered image and the log-magnitude of its retained spectrum.
#[derive(Clone, Debug)]
pub struct LowpassImage {
    pub filtered: DenseArray,
    /// `log(1 + |S|)` of the masked spectrum, shifted so that the zero
    /// frequency sits at row `P/2`, column `T/2`.
    pub log_magnitude: DenseArray,
}

/// Row-then-column 2D DFT of a real `P×T` image.
pub fn dft_2d(image: &DenseArray) -> (Vec<f64>, Vec<f64>) {
    let (p, t) = image.as_matrix_dims();
    let mut re = image.data().to_vec();
    let mut im = vec![0.0; p * t];
    transform_rows(&mut re, &mut im, p, t, false);
    transform_cols(&mut re, &mut im, p, t, false);
    (re, im)
}

fn transform_rows(re: &mut [f64], im: &mut [f64], p: usize, t: usize, inverse: bool) {
    for i in 0..p {
        transform_in_place(&mut re[i * t..(i + 1) * t], &mut im[i * t..(i + 1) * t], inverse);
    }
}

fn transform_cols(re: &mut [f64], im: &mut [f64], p: usize, t: usize, inverse: bool) {
    let mut cr = vec![0.0; p];
    let mut ci = vec![0.0; p];
    for j in 0..t {
        for i in 0..p {
            cr[i] = re[i * t + j];
            ci[i] = im[i * t + j];
        }
        transform_in_place(&mut cr, &mut ci, inverse);
        for i in 0..p {
            re[i * t + j] = cr[i];
            im[i * t + j] = ci[i];
        }
    }
}

fn retained_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Keeps the centred `round(f·P) × round(f·T)` block of low frequencies.
pub fn dft_lowpass_2d(image: &DenseArray, keep_fraction: f64) -> Result<LowpassImage> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(param_err!("keep fraction {keep_fraction} outside (0, 1]"));
    }
    if image.shape().len() != 2 {
        return Err(param_err!("expected a 2D image, got shape {:?}", image.shape()));
    }
    let (p, t) = image.as_matrix_dims();
    let row_mask = build_lowpass_mask(p, retained_count(keep_fraction, p))?;
    let col_mask = build_lowpass_mask(t, retained_count(keep_fraction, t))?;

    let (mut re, mut im) = dft_2d(image);
    for i in 0..p {
        for j in 0..t {
            if !(row_mask.keeps(i) && col_mask.keeps(j)) {
                re[i * t + j] = 0.0;
                im[i * t + j] = 0.0;
            }
        }
    }
    let mut log_magnitude = DenseArray::zeros(&[p, t]);
    for i in 0..p {
        for j in 0..t {
            let si = (i + p / 2) % p;
            let sj = (j + t / 2) % t;
            let m = re[i * t + j].hypot(im[i * t + j]);
            log_magnitude.data_mut()[si * t + sj] = m.ln_1p();
        }
    }
    transform_cols(&mut re, &mut im, p, t, true);
    transform_rows(&mut re, &mut im, p, t, true);
    Ok(LowpassImage {
        filtered: DenseArray::new(vec![p, t], re)?,
        log_magnitude,
    })
}

/// Writes a binary (P5) 8-bit PGM, linearly mapping `[min, max]` onto `[0, 255]`.
pub fn write_pgm(path: &Path, image: &DenseArray) -> Result<()> {
    let (p, t) = image.as_matrix_dims();
    let min = image.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut bytes = format!("P5\n{t} {p}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|v| (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary (P5) 8-bit PGM into values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<DenseArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<DenseArray, FormatError> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Truncated { offset: pos, needed: 1 });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        let mut found = [0u8; 4];
        for (f, b) in found.iter_mut().zip(fields[0].bytes()) {
            *f = b;
        }
        return Err(FormatError::BadMagic {
            expected: *b"P5\0\0",
            found,
        });
    }
    let parse = |s: &str, offset| {
        s.parse::<usize>().map_err(|_| FormatError::Invalid {
            offset,
            reason: format!("expected an integer, found {s:?}"),
        })
    };
    let (t, p, maxval) = (parse(&fields[1], 0)?, parse(&fields[2], 0)?, parse(&fields[3], 0)?);
    if maxval == 0 || maxval > 255 || t == 0 || p == 0 {
        return Err(FormatError::Invalid {
            offset: 0,
            reason: "only 8-bit images with positive size are supported".into(),
        });
    }
    let needed = p * t;
    if bytes.len() < pos + needed {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: pos + needed - bytes.len(),
        });
    }
    let data = bytes[pos..pos + needed]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    DenseArray::new(vec![p, t], data).map_err(|e| FormatError::Invalid {
        offset: pos,
        reason: e.to_string(),
    })
}
