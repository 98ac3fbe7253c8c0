use std::fs;
use std::path::Path;

use crate::autodiff::DenseArray;
use crate::conditioning::FeatureBatch;
use crate::error::{dim_err, Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"FDNE";
pub const VERSION: u32 = 1;
const FLAG_TEXT_BANK: u32 = 1;
const FLAG_VARIANTS: u32 = 2;
/// Rows further than this from unit norm are reported when a file is read.
pub const NORM_WARN_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub class: usize,
    pub domain: usize,
    pub features: Vec<f32>,
}

/// Reference text embeddings, `variants × classes × d`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    pub variants: usize,
    pub data: Vec<f32>,
}

/// Frozen image embeddings with class and domain labels, stored at 32-bit
/// precision exactly as they appear on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub class_names: Vec<String>,
    pub domains: Vec<String>,
    pub records: Vec<Record>,
    pub text_bank: Option<TextBank>,
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl EmbeddingDataset {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(dim_err!("embedding dimension must be positive"));
        }
        if self.class_names.is_empty() || self.domains.is_empty() {
            return Err(dim_err!("a dataset needs at least one class and one domain"));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.features.len() != self.dim {
                return Err(dim_err!("record {i} has {} features, expected {}", r.features.len(), self.dim));
            }
            if r.class >= self.class_names.len() || r.domain >= self.domains.len() {
                return Err(Error::Index(format!("record {i} labels out of range")));
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("record {i}")));
            }
            if norm_f32(&r.features) == 0.0 {
                return Err(Error::Contract(format!("record {i} is a zero vector")));
            }
        }
        if let Some(tb) = &self.text_bank {
            if tb.variants == 0 || tb.data.len() != tb.variants * self.class_names.len() * self.dim {
                return Err(dim_err!("text bank of {} values for {} variants", tb.data.len(), tb.variants));
            }
            if tb.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("text bank".into()));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// Features of record `i` at 64-bit precision, renormalised to unit length.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        let f = &self.records[i].features;
        let n = norm_f32(f);
        f.iter().map(|&v| v as f64 / n).collect()
    }

    /// Gathers records into a batch; labels are dataset class indices.
    pub fn batch(&self, ids: &[usize], domain_id: &str) -> Result<FeatureBatch> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.records.len() {
                return Err(Error::Index(format!("record {i} out of {}", self.records.len())));
            }
            data.extend(self.feature_row(i));
            labels.push(self.records[i].class);
        }
        FeatureBatch::new(DenseArray::new(vec![ids.len(), self.dim], data)?, labels, domain_id)
    }

    /// The text bank as a `Z×N×d` array with unit rows.
    pub fn text_bank_array(&self) -> Option<DenseArray> {
        let tb = self.text_bank.as_ref()?;
        let d = self.dim;
        let mut data: Vec<f64> = tb.data.iter().map(|&v| v as f64).collect();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        DenseArray::new(vec![tb.variants, self.n_classes(), d], data).ok()
    }

    /// Number of records whose stored norm is further than [`NORM_WARN_TOL`] from one.
    pub fn off_norm_records(&self) -> usize {
        self.records
            .iter()
            .filter(|r| (norm_f32(&r.features) - 1.0).abs() > NORM_WARN_TOL)
            .count()
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (norm_f32(&r.features) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(64 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_domains() as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let flags = if self.text_bank.is_some() { FLAG_TEXT_BANK | FLAG_VARIANTS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        if let Some(tb) = &self.text_bank {
            out.extend_from_slice(&(tb.variants as u32).to_le_bytes());
        }
        for name in self.class_names.iter().chain(&self.domains) {
            let len = u16::try_from(name.len()).map_err(|_| dim_err!("name {name:?} longer than 65535 bytes"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&(r.class as u32).to_le_bytes());
            out.extend_from_slice(&(r.domain as u32).to_le_bytes());
            for v in &r.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(tb) = &self.text_bank {
            for v in &tb.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take::<4>()?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                expected: VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let n_domains = r.u32()? as usize;
        let n_records = r.u64()?;
        let flags_at = r.pos;
        let flags = r.u32()?;
        if flags & !(FLAG_TEXT_BANK | FLAG_VARIANTS) != 0 || flags == FLAG_VARIANTS {
            return Err(FormatError::Invalid {
                offset: flags_at,
                reason: format!("unsupported flags {flags:#x}"),
            });
        }
        let variants = if flags & FLAG_VARIANTS != 0 { r.u32()? as usize } else { 1 };
        if dim == 0 || n_classes == 0 || n_domains == 0 || (flags & FLAG_TEXT_BANK != 0 && variants == 0) {
            return Err(FormatError::Invalid {
                offset: 8,
                reason: "dimension, class, domain and variant counts must be positive".into(),
            });
        }
        let class_names = r.names(n_classes)?;
        let domains = r.names(n_domains)?;

        let record_len = 8 + 4 * dim;
        let needed = n_records
            .checked_mul(record_len as u64)
            .filter(|&n| n <= (bytes.len() - r.pos) as u64);
        if needed.is_none() {
            let have = bytes.len() - r.pos;
            return Err(FormatError::Truncated {
                offset: r.pos + have - have % record_len,
                needed: (n_records as usize).saturating_mul(record_len).saturating_sub(have),
            });
        }
        let mut records = Vec::with_capacity(n_records as usize);
        for _ in 0..n_records {
            let at = r.pos;
            let class = r.u32()? as usize;
            let domain = r.u32()? as usize;
            if class >= n_classes || domain >= n_domains {
                return Err(FormatError::Invalid {
                    offset: at,
                    reason: format!("labels ({class}, {domain}) out of range"),
                });
            }
            let features = r.floats(dim)?;
            if norm_f32(&features) == 0.0 {
                return Err(FormatError::Invalid {
                    offset: at,
                    reason: "zero feature vector".into(),
                });
            }
            records.push(Record { class, domain, features });
        }
        let text_bank = if flags & FLAG_TEXT_BANK != 0 {
            Some(TextBank {
                variants,
                data: r.floats(variants * n_classes * dim)?,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes {
                offset: r.pos,
                count: bytes.len() - r.pos,
            });
        }
        Ok(Self {
            dim,
            class_names,
            domains,
            records,
            text_bank,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: end - self.bytes.len(),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        self.take::<2>().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn names(&mut self, n: usize) -> Result<Vec<String>, FormatError> {
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = self.u16()? as usize;
            let at = self.pos;
            if at + len > self.bytes.len() {
                return Err(FormatError::Truncated {
                    offset: at,
                    needed: at + len - self.bytes.len(),
                });
            }
            let name = std::str::from_utf8(&self.bytes[at..at + len]).map_err(|e| FormatError::Invalid {
                offset: at,
                reason: e.to_string(),
            })?;
            out.push(name.to_string());
            self.pos += len;
        }
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.pos;
            let v = f32::from_le_bytes(self.take::<4>()?);
            if !v.is_finite() {
                return Err(FormatError::NonFinite { offset: at });
            }
            out.push(v);
        }
        Ok(out)
    }
}

pub fn write_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let bytes = ds.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a dataset file, warning about rows that are not unit length.
pub fn read_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = EmbeddingDataset::from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let off = ds.off_norm_records();
    if off > 0 {
        log::warn!(
            "{}: {off} records deviate from unit norm by more than {NORM_WARN_TOL}; renormalizing",
            path.display()
        );
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(text_bank: bool) -> EmbeddingDataset {
        let dim = 3;
        let records = (0..5)
            .map(|i| Record {
                class: i % 2,
                domain: i % 3,
                features: vec![0.6, -0.8 + i as f32 * 1e-7, 0.0],
            })
            .collect();
        EmbeddingDataset {
            dim,
            class_names: vec!["class_00".into(), "bäume".into()],
            domains: vec!["a".into(), "b".into(), "c".into()],
            records,
            text_bank: text_bank.then(|| TextBank {
                variants: 2,
                data: (0..12).map(|i| i as f32 * 0.25 + 0.125).collect(),
            }),
        }
    }

    #[test]
    fn round_trip() {
        for tb in [false, true] {
            let ds = sample(tb);
            let back = EmbeddingDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ds);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fdne");
        write_dataset(&sample(true), &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), sample(true));
    }

    #[test]
    fn header_layout() {
        let bytes = sample(true).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FDNE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 2);
        let plain = sample(false).to_bytes().unwrap();
        assert_eq!(u32::from_le_bytes(plain[28..32].try_into().unwrap()), 0);
        // Header, names, records; no text bank.
        let names = (2 + 8) + (2 + 6) + 3 * (2 + 1);
        assert_eq!(plain.len(), 32 + names + 5 * (8 + 12));
    }

    #[test]
    fn parse_errors() {
        let good = sample(true).to_bytes().unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(FormatError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(FormatError::Version { found: 2, .. })));

        let plain = sample(false).to_bytes().unwrap();
        let cut = plain.len() - 10;
        match EmbeddingDataset::from_bytes(&plain[..cut]) {
            Err(FormatError::Truncated { offset, needed }) => {
                assert!(offset <= cut && offset > 32);
                assert!(needed > 0);
            }
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        let at = bad.len() - 4;
        bad[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(EmbeddingDataset::from_bytes(&bad), Err(FormatError::NonFinite { offset: at }));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(FormatError::TrailingBytes { count: 1, .. })));

        let mut bad = plain.clone();
        bad[28] = 8;
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(FormatError::Invalid { .. })));
    }

    #[test]
    fn read_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fdne");
        fs::write(&path, b"XXXX").unwrap();
        match read_dataset(&path) {
            Err(Error::Format { path: p, source: FormatError::BadMagic { .. } }) => assert_eq!(p, path),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn rows_are_renormalized_in_batches() {
        let mut ds = sample(false);
        ds.records[0].features = vec![3.0, 4.0, 0.0];
        assert_eq!(ds.off_norm_records(), 1);
        let b = ds.batch(&[0, 1], "a").unwrap();
        assert_eq!(b.features.row(0), &[0.6, 0.8, 0.0]);
        assert_eq!(b.labels, vec![0, 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_datasets_round_trip(seed in any::<u64>(), dim in 1usize..6, n in 0usize..12, tb in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let records = (0..n)
                .map(|_| Record {
                    class: rng.gen_range(0..3),
                    domain: rng.gen_range(0..2),
                    features: (0..dim).map(|_| rng.gen_range(0.1f32..1.0)).collect(),
                })
                .collect();
            let ds = EmbeddingDataset {
                dim,
                class_names: vec!["x".into(), "y".into(), "z".into()],
                domains: vec!["p".into(), "q".into()],
                records,
                text_bank: tb.then(|| TextBank { variants: 2, data: (0..2 * 3 * dim).map(|_| rng.gen()).collect() }),
            };
            prop_assert_eq!(EmbeddingDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap(), ds);
        }
    }
}
