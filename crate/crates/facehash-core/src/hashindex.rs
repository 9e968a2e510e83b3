//! Binary codes, packed Hamming distance, and the on-disk retrieval index.
//!
//! Codes live in {-1,+1}^K and are packed into 64-bit words: bit `j` of the
//! code is bit `j % 64` of word `j / 64`, with +1 -> 1 and -1 -> 0. Pad bits
//! beyond `K` are always zero, so packed XOR/popcount equals the per-bit
//! distance with no masking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{
    read_string, read_u32, read_u64, write_string, write_u32, write_u64, ChecksumReader,
    ChecksumWriter,
};
use crate::error::{Error, Result};

const INDEX_MAGIC: [u8; 4] = *b"SGHI";
const INDEX_VERSION: u32 = 1;

/// A packed binary code of `bits` entries in {-1,+1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCode {
    bits: usize,
    words: Vec<u64>,
}

impl BinaryCode {
    /// Number of 64-bit words used for a code of `bits` bits.
    pub fn words_for(bits: usize) -> usize {
        bits.div_ceil(64)
    }

    /// Pack a slice of signs (+1/-1). Zero entries map to +1, matching
    /// [`binarize`]'s tie rule.
    pub fn from_signs(signs: &[i8]) -> Self {
        let bits = signs.len();
        let mut words = vec![0u64; Self::words_for(bits)];
        for (j, &s) in signs.iter().enumerate() {
            if s >= 0 {
                words[j / 64] |= 1u64 << (j % 64);
            }
        }
        BinaryCode { bits, words }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Sign of bit `j` as +1 or -1.
    pub fn sign(&self, j: usize) -> i8 {
        debug_assert!(j < self.bits);
        if self.words[j / 64] >> (j % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Unpack to a +1/-1 vector.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.bits).map(|j| self.sign(j)).collect()
    }

    /// Code with every bit flipped.
    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        let tail = self.bits % 64;
        if tail != 0 {
            // keep pad bits zero
            *words.last_mut().unwrap() &= (1u64 << tail) - 1;
        }
        BinaryCode {
            bits: self.bits,
            words,
        }
    }
}

/// Binarize a real-valued hash vector with `sign`, mapping 0 to +1.
pub fn binarize(h: &[f64]) -> Result<BinaryCode> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hash vector".into()));
    }
    let signs: Vec<i8> = h.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect();
    Ok(BinaryCode::from_signs(&signs))
}

fn packed_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Exact Hamming distance between two codes of equal length.
pub fn hamming_distance(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::CodeLengthMismatch {
            a: a.bits,
            b: b.bits,
        });
    }
    Ok(packed_distance(&a.words, &b.words))
}

/// An immutable database of packed codes with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    code_bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
    labels: Vec<u32>,
    identity_count: usize,
    source_ids: Option<Vec<String>>,
}

impl RetrievalIndex {
    pub fn new(
        codes: &[BinaryCode],
        labels: Vec<u32>,
        code_bits: usize,
        identity_count: usize,
        source_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} codes but {} labels",
                codes.len(),
                labels.len()
            )));
        }
        if let Some(ids) = &source_ids {
            if ids.len() != codes.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} codes but {} source ids",
                    codes.len(),
                    ids.len()
                )));
            }
        }
        let wpc = BinaryCode::words_for(code_bits);
        let mut words = Vec::with_capacity(codes.len() * wpc);
        for code in codes {
            if code.bits != code_bits {
                return Err(Error::CodeLengthMismatch {
                    a: code.bits,
                    b: code_bits,
                });
            }
            words.extend_from_slice(&code.words);
        }
        for &label in &labels {
            if label as usize >= identity_count {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {identity_count} identities"
                )));
            }
        }
        Ok(RetrievalIndex {
            code_bits,
            words_per_code: wpc,
            words,
            labels,
            identity_count,
            source_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn code_bits(&self) -> usize {
        self.code_bits
    }

    pub fn identity_count(&self) -> usize {
        self.identity_count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn source_ids(&self) -> Option<&[String]> {
        self.source_ids.as_deref()
    }

    pub fn code(&self, i: usize) -> BinaryCode {
        let w = self.words_per_code;
        BinaryCode {
            bits: self.code_bits,
            words: self.words[i * w..(i + 1) * w].to_vec(),
        }
    }

    fn code_words(&self, i: usize) -> &[u64] {
        let w = self.words_per_code;
        &self.words[i * w..(i + 1) * w]
    }

    /// Distance from `query` to every database entry, in database order.
    pub fn distances(&self, query: &BinaryCode) -> Result<Vec<u32>> {
        if query.bits != self.code_bits {
            return Err(Error::CodeLengthMismatch {
                a: query.bits,
                b: self.code_bits,
            });
        }
        Ok((0..self.len())
            .map(|i| packed_distance(self.code_words(i), &query.words))
            .collect())
    }

    /// The `m` nearest entries as `(db_position, distance)`, distance
    /// ascending, ties broken by ascending position. Returns all entries when
    /// `m` exceeds the database size.
    pub fn query_topm(&self, query: &BinaryCode, m: usize) -> Result<Vec<(usize, u32)>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if m == 0 {
            return Err(Error::InvalidArgument("top-M with M = 0".into()));
        }
        let dists = self.distances(query)?;
        let mut order: Vec<usize> = (0..dists.len()).collect();
        // stable sort on distance keeps the ascending-position tie rule
        order.sort_by_key(|&i| dists[i]);
        order.truncate(m);
        Ok(order.into_iter().map(|i| (i, dists[i])).collect())
    }

    /// All db positions within Hamming distance `r` of `query`, ascending.
    pub fn query_radius(&self, query: &BinaryCode, r: u32) -> Result<Vec<usize>> {
        let dists = self.distances(query)?;
        Ok(dists
            .iter()
            .enumerate()
            .filter(|(_, &d)| d <= r)
            .map(|(i, _)| i)
            .collect())
    }

    /// Write the index. Layout (all little-endian):
    /// magic "SGHI", version u32, K u32, N u64, c u32,
    /// N x ceil(K/64) code words u64, N labels u32,
    /// u8 flag + optional N length-prefixed source id strings,
    /// FNV-1a-64 checksum of all preceding bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = ChecksumWriter::new(BufWriter::new(file));
        let io_err = |e| Error::io(path, e);

        w.write_all(&INDEX_MAGIC).map_err(io_err)?;
        write_u32(&mut w, INDEX_VERSION).map_err(io_err)?;
        write_u32(&mut w, self.code_bits as u32).map_err(io_err)?;
        write_u64(&mut w, self.len() as u64).map_err(io_err)?;
        write_u32(&mut w, self.identity_count as u32).map_err(io_err)?;
        for &word in &self.words {
            write_u64(&mut w, word).map_err(io_err)?;
        }
        for &label in &self.labels {
            write_u32(&mut w, label).map_err(io_err)?;
        }
        match &self.source_ids {
            Some(ids) => {
                w.write_all(&[1u8]).map_err(io_err)?;
                for id in ids {
                    write_string(&mut w, id).map_err(io_err)?;
                }
            }
            None => w.write_all(&[0u8]).map_err(io_err)?,
        }
        let mut inner = w.finalize().map_err(io_err)?;
        inner.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = ChecksumReader::new(BufReader::new(file));
        let corrupt = |e: std::io::Error| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if magic != INDEX_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: INDEX_MAGIC,
            });
        }
        let version = read_u32(&mut r).map_err(corrupt)?;
        if version != INDEX_VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                found: version,
                supported: INDEX_VERSION,
            });
        }
        let code_bits = read_u32(&mut r).map_err(corrupt)? as usize;
        let n = read_u64(&mut r).map_err(corrupt)? as usize;
        let identity_count = read_u32(&mut r).map_err(corrupt)? as usize;
        let wpc = BinaryCode::words_for(code_bits);

        let mut words = Vec::with_capacity(n * wpc);
        for _ in 0..n * wpc {
            words.push(read_u64(&mut r).map_err(corrupt)?);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r).map_err(corrupt)?);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(corrupt)?;
        let source_ids = if flag[0] == 1 {
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                ids.push(read_string(&mut r).map_err(corrupt)?);
            }
            Some(ids)
        } else {
            None
        };

        if !r.verify().map_err(corrupt)? {
            return Err(Error::ChecksumMismatch(path.to_path_buf()));
        }
        RetrievalIndex::new(
            &(0..n)
                .map(|i| BinaryCode {
                    bits: code_bits,
                    words: words[i * wpc..(i + 1) * wpc].to_vec(),
                })
                .collect::<Vec<_>>(),
            labels,
            code_bits,
            identity_count,
            source_ids,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_signs_and_tie_rule() {
        let code = binarize(&[0.3, -0.2]).unwrap();
        assert_eq!(code.to_signs(), vec![1, -1]);
        // documented tie rule: 0 -> +1
        assert_eq!(binarize(&[0.0]).unwrap().to_signs(), vec![1]);
        assert!(binarize(&[f64::NAN]).is_err());
    }

    #[test]
    fn binarize_commutes_with_tanh() {
        let q: [f64; 5] = [-3.0, -0.4, 0.0, 0.7, 11.0];
        let h: Vec<f64> = q.iter().map(|v| v.tanh()).collect();
        assert_eq!(binarize(&q).unwrap(), binarize(&h).unwrap());
    }

    #[test]
    fn hamming_basics() {
        let a = BinaryCode::from_signs(&[1, -1, 1, 1]);
        let b = BinaryCode::from_signs(&[1, -1, -1, -1]);
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        assert_eq!(hamming_distance(&a, &b).unwrap(), 2);
        assert_eq!(hamming_distance(&a, &a.complement()).unwrap(), 4);
        let c = BinaryCode::from_signs(&[1, 1]);
        assert!(hamming_distance(&a, &c).is_err());
    }

    #[test]
    fn pad_bits_stay_zero_across_word_boundary() {
        let signs: Vec<i8> = (0..100).map(|j| if j % 3 == 0 { 1 } else { -1 }).collect();
        let code = BinaryCode::from_signs(&signs);
        assert_eq!(code.words().len(), 2);
        assert_eq!(code.words()[1] >> (100 - 64), 0);
        assert_eq!(
            hamming_distance(&code, &code.complement()).unwrap(),
            100,
            "complement must flip exactly the 100 real bits"
        );
    }

    #[test]
    fn topm_ties_break_by_position_and_m_clamps() {
        let codes: Vec<BinaryCode> = (0..4)
            .map(|_| BinaryCode::from_signs(&[1, 1, 1, 1]))
            .collect();
        let index = RetrievalIndex::new(&codes, vec![0, 0, 0, 0], 4, 1, None).unwrap();
        let q = BinaryCode::from_signs(&[1, 1, 1, -1]);
        let hits = index.query_topm(&q, 10).unwrap();
        assert_eq!(hits, vec![(0, 1), (1, 1), (2, 1), (3, 1)]);
    }

    #[test]
    fn topm_finds_exact_match_first() {
        let codes = vec![
            BinaryCode::from_signs(&[1, 1, -1, 1]),
            BinaryCode::from_signs(&[-1, -1, -1, 1]),
        ];
        let index = RetrievalIndex::new(&codes, vec![0, 1], 4, 2, None).unwrap();
        let hits = index.query_topm(&codes[1].clone(), 1).unwrap();
        assert_eq!(hits, vec![(1, 0)]);
    }

    #[test]
    fn radius_bounds() {
        let codes = vec![
            BinaryCode::from_signs(&[1, 1, 1, 1]),
            BinaryCode::from_signs(&[-1, -1, -1, -1]),
        ];
        let index = RetrievalIndex::new(&codes, vec![0, 1], 4, 2, None).unwrap();
        let q = BinaryCode::from_signs(&[1, 1, 1, 1]);
        assert_eq!(index.query_radius(&q, 4).unwrap(), vec![0, 1]);
        assert_eq!(index.query_radius(&q, 0).unwrap(), vec![0]);
    }

    #[test]
    fn empty_index_query_is_error_but_roundtrips() {
        let index = RetrievalIndex::new(&[], vec![], 16, 5, None).unwrap();
        let q = BinaryCode::from_signs(&vec![1i8; 16]);
        assert!(index.query_topm(&q, 1).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fhi");
        index.save(&path).unwrap();
        assert_eq!(RetrievalIndex::load(&path).unwrap(), index);
    }

    #[test]
    fn save_load_roundtrip_with_ids() {
        let codes = vec![
            BinaryCode::from_signs(&[1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1]),
            BinaryCode::from_signs(&[-1, -1, -1, 1, 1, 1, -1, -1, -1, 1, 1, 1]),
        ];
        let index = RetrievalIndex::new(
            &codes,
            vec![0, 1],
            12,
            2,
            Some(vec!["a/1.png".into(), "b/2.png".into()]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.fhi");
        index.save(&path).unwrap();
        assert_eq!(RetrievalIndex::load(&path).unwrap(), index);
    }

    #[test]
    fn corrupt_byte_is_detected() {
        let codes = vec![BinaryCode::from_signs(&[1, -1, 1, -1])];
        let index = RetrievalIndex::new(&codes, vec![0], 4, 1, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.fhi");
        index.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let codes_offset = 4 + 4 + 4 + 8 + 4; // header up to first code word
        bytes[codes_offset] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            RetrievalIndex::load(&path),
            Err(Error::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn truncated_file_is_error() {
        let codes = vec![BinaryCode::from_signs(&[1, -1, 1, -1])];
        let index = RetrievalIndex::new(&codes, vec![0], 4, 1, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.fhi");
        index.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(RetrievalIndex::load(&path).is_err());
    }
}
