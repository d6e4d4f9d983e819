//! Binary corpus format and its JSON split manifest.
//!
//! All integers and floats are little-endian, with no padding:
//!
//! ```text
//! magic     8 bytes  "MNEMB001"
//! version   u32      1
//! dim       u32      D
//! count     u64      number of records
//! records   count x { identity_id u32, template_id u32, media_id u32,
//!                     quality_truth f32 (NaN when absent), D x f32 }
//! ```
//!
//! The manifest sits next to the corpus with the extension replaced by
//! `.json`: `{"train_identities": [...], "test_identities": [...]}`.

use std::fs;
use std::path::{Path, PathBuf};

use multicolumn_core::data::{Corpus, CorpusRecord, Split};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"MNEMB001";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let dim = corpus.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + corpus.len() * (16 + 4 * dim));
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for r in corpus.records() {
        out.extend_from_slice(&r.identity_id.to_le_bytes());
        out.extend_from_slice(&r.template_id.to_le_bytes());
        out.extend_from_slice(&r.media_id.to_le_bytes());
        out.extend_from_slice(&r.quality_truth.unwrap_or(f32::NAN).to_le_bytes());
        for x in &r.embedding {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Little-endian reader that knows its offset.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed: (n - self.remaining()) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Result<f32, FormatError> {
        self.array().map(f32::from_le_bytes)
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        self.array().map(f64::from_le_bytes)
    }

    pub(crate) fn expect_magic(&mut self, magic: &'static [u8; 8]) -> Result<(), FormatError> {
        let offset = self.offset();
        let got = self.take(8).map_err(|_| FormatError::BadMagic {
            offset,
            expected: std::str::from_utf8(magic).unwrap_or("?"),
        })?;
        if got != magic {
            return Err(FormatError::BadMagic {
                offset,
                expected: std::str::from_utf8(magic).unwrap_or("?"),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() > 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.offset(),
                extra: self.remaining() as u64,
            });
        }
        Ok(())
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus, FormatError> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(CORPUS_MAGIC)?;
    let version_at = cur.offset();
    let version = cur.u32()?;
    if version != CORPUS_VERSION {
        return Err(FormatError::BadVersion {
            offset: version_at,
            version,
        });
    }
    let dim_at = cur.offset();
    let dim = cur.u32()?;
    if dim == 0 {
        return Err(FormatError::BadDimension {
            offset: dim_at,
            dim,
        });
    }
    let count = cur.u64()?;
    let dim = dim as usize;
    let record_len = 16 + 4 * dim as u64;
    let expected = count.saturating_mul(record_len);
    if (cur.remaining() as u64) < expected {
        return Err(FormatError::Truncated {
            offset: bytes.len() as u64,
            needed: expected - cur.remaining() as u64,
        });
    }

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let identity_id = cur.u32()?;
        let template_id = cur.u32()?;
        let media_id = cur.u32()?;
        let q_at = cur.offset();
        let q = cur.f32()?;
        if q.is_infinite() {
            return Err(FormatError::NonFinite { offset: q_at });
        }
        let mut embedding = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = cur.offset();
            let x = cur.f32()?;
            if !x.is_finite() {
                return Err(FormatError::NonFinite { offset: at });
            }
            embedding.push(x);
        }
        records.push(CorpusRecord {
            identity_id,
            template_id,
            media_id,
            quality_truth: (!q.is_nan()).then_some(q),
            embedding,
        });
    }
    cur.finish()?;
    Corpus::new(dim, records).map_err(|e| FormatError::BadField {
        offset: HEADER_LEN as u64,
        what: e.to_string(),
    })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, encode_corpus(corpus)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
}

impl From<&Split> for Manifest {
    fn from(s: &Split) -> Self {
        Self {
            train_identities: s.train_identities.clone(),
            test_identities: s.test_identities.clone(),
        }
    }
}

impl From<Manifest> for Split {
    fn from(m: Manifest) -> Self {
        Split {
            train_identities: m.train_identities,
            test_identities: m.test_identities,
        }
    }
}

/// `corpus.bin` -> `corpus.json`
pub fn manifest_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("json")
}

pub fn write_manifest(split: &Split, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string(&Manifest::from(split)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(m.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use multicolumn_core::data::{generate_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    fn small() -> Corpus {
        generate_synthetic(&SyntheticConfig {
            num_identities: 3,
            sets_per_identity: 2,
            dim: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = small();
        let bytes = encode_corpus(&c);
        let back = decode_corpus(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_corpus(&back), bytes);
    }

    #[test]
    fn absent_quality_is_nan_on_disk() {
        let c = Corpus::new(
            1,
            vec![CorpusRecord {
                identity_id: 1,
                template_id: 2,
                media_id: 3,
                quality_truth: None,
                embedding: vec![0.5],
            }],
        )
        .unwrap();
        let bytes = encode_corpus(&c);
        assert!(f32::from_le_bytes(bytes[36..40].try_into().unwrap()).is_nan());
        assert_eq!(
            decode_corpus(&bytes).unwrap().records()[0].quality_truth,
            None
        );
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_corpus(&small());
        bytes[0] = b'X';
        let err = decode_corpus(&bytes).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { offset: 0, .. }));
        assert_eq!(err.offset(), 0);
    }

    #[test]
    fn count_larger_than_records_is_truncation() {
        let mut bytes = encode_corpus(&small());
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        bytes[16..24].copy_from_slice(&(count + 1).to_le_bytes());
        assert!(matches!(
            decode_corpus(&bytes),
            Err(FormatError::Truncated { .. })
        ));

        let bytes = encode_corpus(&small());
        assert!(matches!(
            decode_corpus(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(
            decode_corpus(&bytes[..10]),
            Err(FormatError::Truncated { offset: 8, .. })
        ));
    }

    #[test]
    fn count_smaller_than_records_leaves_trailing_bytes() {
        let mut bytes = encode_corpus(&small());
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        bytes[16..24].copy_from_slice(&(count - 1).to_le_bytes());
        assert!(matches!(
            decode_corpus(&bytes),
            Err(FormatError::TrailingBytes { .. })
        ));
    }

    #[test]
    fn bad_version_dimension_and_values() {
        let good = encode_corpus(&small());
        let mut b = good.clone();
        b[8] = 2;
        assert_eq!(
            decode_corpus(&b).unwrap_err(),
            FormatError::BadVersion {
                offset: 8,
                version: 2
            }
        );
        let mut b = good.clone();
        b[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(
            decode_corpus(&b).unwrap_err(),
            FormatError::BadDimension { offset: 12, dim: 0 }
        );
        let mut b = good.clone();
        // first embedding value of the first record
        b[40..44].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(
            decode_corpus(&b).unwrap_err(),
            FormatError::NonFinite { offset: 40 }
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.bin");
        let path = manifest_path(&corpus);
        assert_eq!(path.file_name().unwrap(), "c.json");
        let split = Split {
            train_identities: vec![0, 2],
            test_identities: vec![1],
        };
        write_manifest(&split, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "{\"train_identities\":[0,2],\"test_identities\":[1]}\n"
        );
        assert_eq!(read_manifest(&path).unwrap(), split);
    }

    proptest! {
        #[test]
        fn arbitrary_corpora_round_trip(
            dim in 1usize..6,
            rows in prop::collection::vec((0u32..4, any::<u32>(), prop::option::of(-1.0f32..1.0), prop::collection::vec(-1e6f32..1e6, 6)), 0..12),
        ) {
            let records: Vec<CorpusRecord> = rows
                .into_iter()
                .map(|(id, media, q, e)| CorpusRecord {
                    identity_id: id,
                    template_id: id * 10,
                    media_id: media,
                    quality_truth: q,
                    embedding: e[..dim].to_vec(),
                })
                .collect();
            let c = Corpus::new(dim, records).unwrap();
            let bytes = encode_corpus(&c);
            let back = decode_corpus(&bytes).unwrap();
            prop_assert_eq!(encode_corpus(&back), bytes);
            prop_assert!(back == c);
        }
    }
}
