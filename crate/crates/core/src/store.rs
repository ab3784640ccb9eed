//! Append-only disk cache of frozen encoder features.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! header:  "YTFS" | version u32 = 1 | record count u64
//! record:  fingerprint u64 | input digest u64 | layer mask u64 | M u32 | H u32
//!          | popcount(mask) * M * H f64 values | CRC32 u32 of the preceding record bytes
//! ```
//!
//! The index is rebuilt on open by walking record headers; checksums are
//! verified on every read.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::hash::Hasher;
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

pub const MAGIC: &[u8; 4] = b"YTFS";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;
const RECORD_HEAD_LEN: usize = 32;

/// Encoder layers (1-based) selected for caching; bit `i - 1` marks layer `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerMask(pub u64);

impl LayerMask {
    pub fn from_layers(layers: impl IntoIterator<Item = usize>) -> Self {
        Self(layers.into_iter().fold(0, |m, l| {
            assert!((1..=64).contains(&l), "layer index {l} out of range");
            m | 1 << (l - 1)
        }))
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Selected layers in ascending order.
    pub fn layers(self) -> Vec<usize> {
        (1..=64).filter(|l| self.0 & (1 << (l - 1)) != 0).collect()
    }

    pub fn contains(self, layer: usize) -> bool {
        (1..=64).contains(&layer) && self.0 & (1 << (layer - 1)) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureKey {
    pub encoder_fingerprint: u64,
    pub input_digest: u64,
    pub layer_mask: LayerMask,
}

impl FeatureKey {
    pub fn new(encoder_fingerprint: u64, tokens: &TokenSequence, layer_mask: LayerMask) -> Self {
        Self {
            encoder_fingerprint,
            input_digest: input_digest(tokens),
            layer_mask,
        }
    }
}

/// FNV-1a over the token ids as little-endian `u32`s.
pub fn input_digest(tokens: &TokenSequence) -> u64 {
    let mut h = FnvHasher::default();
    for id in tokens.ids() {
        h.write(&id.to_le_bytes());
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub key: FeatureKey,
    pub seq_len: usize,
    pub hidden: usize,
    /// One `M×H` matrix per selected layer, ascending layer order.
    pub layers: Vec<Tensor>,
}

impl FeatureRecord {
    /// Keeps the layers of `all` (one per encoder layer) selected by `mask`.
    pub fn from_encoder_output(key: FeatureKey, all: &[Tensor]) -> Result<Self> {
        let layers: Vec<Tensor> = key
            .layer_mask
            .layers()
            .into_iter()
            .map(|l| {
                all.get(l - 1)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("encoder has no layer {l}")))
            })
            .collect::<Result<_>>()?;
        let (seq_len, hidden) = (layers[0].rows(), layers[0].cols());
        Ok(Self {
            key,
            seq_len,
            hidden,
            layers,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.layers.len() != self.key.layer_mask.count() {
            return Err(Error::Usage(format!(
                "record has {} layers but mask selects {}",
                self.layers.len(),
                self.key.layer_mask.count()
            )));
        }
        let per = self.seq_len * self.hidden;
        let mut buf = Vec::with_capacity(RECORD_HEAD_LEN + 8 * per * self.layers.len() + 4);
        buf.extend_from_slice(&self.key.encoder_fingerprint.to_le_bytes());
        buf.extend_from_slice(&self.key.input_digest.to_le_bytes());
        buf.extend_from_slice(&self.key.layer_mask.0.to_le_bytes());
        buf.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for layer in &self.layers {
            if layer.shape() != [self.seq_len, self.hidden] {
                return Err(Error::Dimension {
                    op: "feature record",
                    left: layer.shape().to_vec(),
                    right: vec![self.seq_len, self.hidden],
                });
            }
            for v in layer.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (head, body) = parse_head(bytes)?;
        let expected = head.record_len()?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "record is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let (payload, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(Error::Integrity(format!(
                "checksum mismatch for record with input digest {:#018x}",
                head.key.input_digest
            )));
        }
        let per = head.seq_len * head.hidden;
        let values: Vec<f64> = body[..8 * per * head.key.layer_mask.count()]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let layers = values
            .chunks_exact(per)
            .map(|c| Tensor::from_vec(vec![head.seq_len, head.hidden], c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            key: head.key,
            seq_len: head.seq_len,
            hidden: head.hidden,
            layers,
        })
    }
}

struct RecordHead {
    key: FeatureKey,
    seq_len: usize,
    hidden: usize,
}

impl RecordHead {
    fn record_len(&self) -> Result<usize> {
        8usize
            .checked_mul(self.seq_len)
            .and_then(|n| n.checked_mul(self.hidden))
            .and_then(|n| n.checked_mul(self.key.layer_mask.count()))
            .and_then(|n| n.checked_add(RECORD_HEAD_LEN + 4))
            .ok_or_else(|| Error::Format("record header dimensions overflow".into()))
    }
}

fn parse_head(bytes: &[u8]) -> Result<(RecordHead, &[u8])> {
    if bytes.len() < RECORD_HEAD_LEN {
        return Err(Error::Format("record shorter than its header".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let head = RecordHead {
        key: FeatureKey {
            encoder_fingerprint: u64_at(0),
            input_digest: u64_at(8),
            layer_mask: LayerMask(u64_at(16)),
        },
        seq_len: u32_at(24) as usize,
        hidden: u32_at(28) as usize,
    };
    if head.seq_len == 0 || head.hidden == 0 || head.key.layer_mask.count() == 0 {
        return Err(Error::Format("record header has a zero dimension".into()));
    }
    Ok((head, &bytes[RECORD_HEAD_LEN..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    /// Existing file, gets only.
    Read,
    /// New empty file, replacing any existing one.
    Create,
    /// Existing file opened for further puts, created if missing.
    Append,
}

#[derive(Debug)]
pub struct FeatureStore {
    path: PathBuf,
    file: File,
    mode: StoreMode,
    index: HashMap<FeatureKey, (u64, usize)>,
    end: u64,
}

impl FeatureStore {
    pub fn open(path: impl AsRef<Path>, mode: StoreMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        match mode {
            StoreMode::Create => Self::create(path),
            StoreMode::Append if !path.exists() => {
                let mut s = Self::create(path)?;
                s.mode = StoreMode::Append;
                Ok(s)
            }
            StoreMode::Read => {
                let file = File::open(&path)?;
                Self::scan(path, file, mode)
            }
            StoreMode::Append => {
                let file = OpenOptions::new().read(true).write(true).open(&path)?;
                Self::scan(path, file, mode)
            }
        }
    }

    fn create(path: PathBuf) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&0u64.to_le_bytes())?;
        file.flush()?;
        Ok(Self {
            path,
            file,
            mode: StoreMode::Create,
            index: HashMap::new(),
            end: HEADER_LEN,
        })
    }

    fn scan(path: PathBuf, mut file: File, mode: StoreMode) -> Result<Self> {
        let len = file.metadata()?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        file.seek(SeekFrom::Start(0))?;
        if len < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} is too short for a YTFS header",
                path.display()
            )));
        }
        file.read_exact(&mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format(format!("{} has bad magic", path.display())));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported YTFS version {version}")));
        }
        let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
        let mut index = HashMap::new();
        let mut offset = HEADER_LEN;
        let mut head_buf = [0u8; RECORD_HEAD_LEN];
        let mut record_buf = Vec::new();
        while offset < len {
            if len - offset < RECORD_HEAD_LEN as u64 {
                return Err(Error::Truncated { offset });
            }
            file.read_exact_at(&mut head_buf, offset)?;
            let (head, _) = parse_head(&head_buf).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{m} at byte offset {offset}")),
                other => other,
            })?;
            let rec_len = head.record_len()?;
            if len - offset < rec_len as u64 {
                return Err(Error::Truncated { offset });
            }
            // Checksums are verified up front so a damaged key cannot hide a record.
            record_buf.resize(rec_len, 0);
            file.read_exact_at(&mut record_buf, offset)?;
            let (payload, crc) = record_buf.split_at(rec_len - 4);
            if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
                return Err(Error::Integrity(format!(
                    "checksum mismatch at byte offset {offset}"
                )));
            }
            if index.insert(head.key, (offset, rec_len)).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate key at byte offset {offset}"
                )));
            }
            offset += rec_len as u64;
        }
        if index.len() as u64 != count {
            return Err(Error::Format(format!(
                "header records {count} entries but file holds {}",
                index.len()
            )));
        }
        Ok(Self {
            path,
            file,
            mode,
            index,
            end: offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &FeatureKey) -> bool {
        self.index.contains_key(key)
    }

    /// Appends `record`. Re-putting an identical record is a no-op; different
    /// bytes under an existing key are an integrity error.
    pub fn put(&mut self, record: &FeatureRecord) -> Result<()> {
        if self.mode == StoreMode::Read {
            return Err(Error::Usage("feature store opened read-only".into()));
        }
        let bytes = record.encode()?;
        if let Some(&(offset, len)) = self.index.get(&record.key) {
            let mut existing = vec![0u8; len];
            self.file.read_exact_at(&mut existing, offset)?;
            if existing == bytes {
                return Ok(());
            }
            return Err(Error::Integrity(format!(
                "conflicting record for input digest {:#018x}",
                record.key.input_digest
            )));
        }
        self.file.write_all_at(&bytes, self.end)?;
        self.index.insert(record.key, (self.end, bytes.len()));
        self.end += bytes.len() as u64;
        self.file
            .write_all_at(&(self.index.len() as u64).to_le_bytes(), 8)?;
        Ok(())
    }

    /// Forces written records to stable storage.
    pub fn flush(&mut self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }

    /// Absent keys are `Ok(None)`; a checksum failure is an integrity error.
    pub fn get(&self, key: &FeatureKey) -> Result<Option<FeatureRecord>> {
        let Some(&(offset, len)) = self.index.get(key) else {
            return Ok(None);
        };
        let mut buf = vec![0u8; len];
        self.file.read_exact_at(&mut buf, offset)?;
        let rec = FeatureRecord::decode(&buf)?;
        if rec.key != *key {
            return Err(Error::Integrity(format!(
                "record at byte offset {offset} has a different key"
            )));
        }
        Ok(Some(rec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn record(seed: u64, fp: u64) -> FeatureRecord {
        let mut rng = Rng::new(seed);
        let toks = TokenSequence::new(vec![3 + seed as u32, 4, 5]).unwrap();
        FeatureRecord {
            key: FeatureKey::new(fp, &toks, LayerMask::from_layers([2, 4])),
            seq_len: 3,
            hidden: 4,
            layers: vec![
                rng.normal_tensor(&[3, 4], 1.0),
                rng.normal_tensor(&[3, 4], 1.0),
            ],
        }
    }

    #[test]
    fn create_then_open_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ytfs");
        FeatureStore::open(&p, StoreMode::Create).unwrap();
        assert_eq!(FeatureStore::open(&p, StoreMode::Read).unwrap().len(), 0);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ytfs");
        std::fs::write(&p, b"NOPE\x01\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            FeatureStore::open(&p, StoreMode::Read),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn put_get_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ytfs");
        let recs: Vec<_> = (0..3).map(|i| record(i, 9)).collect();
        {
            let mut s = FeatureStore::open(&p, StoreMode::Create).unwrap();
            for r in &recs {
                s.put(r).unwrap();
            }
            s.put(&recs[0]).unwrap();
            assert_eq!(s.len(), 3);
            assert_eq!(s.get(&recs[1].key).unwrap().unwrap(), recs[1]);
        }
        let s = FeatureStore::open(&p, StoreMode::Read).unwrap();
        assert_eq!(s.len(), 3);
        for r in &recs {
            assert_eq!(s.get(&r.key).unwrap().as_ref(), Some(r));
        }
        assert!(s.get(&record(7, 9).key).unwrap().is_none());
        // same input under another fingerprint is a different key
        assert!(s.get(&record(0, 10).key).unwrap().is_none());
    }

    #[test]
    fn conflicting_put_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = FeatureStore::open(dir.path().join("f.ytfs"), StoreMode::Create).unwrap();
        let r = record(1, 9);
        s.put(&r).unwrap();
        let mut other = r.clone();
        other.layers[0].data_mut()[0] += 1.0;
        assert!(matches!(s.put(&other), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_tail_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ytfs");
        let mut s = FeatureStore::open(&p, StoreMode::Create).unwrap();
        s.put(&record(1, 9)).unwrap();
        s.put(&record(2, 9)).unwrap();
        drop(s);
        let bytes = std::fs::read(&p).unwrap();
        let rec_len = record(1, 9).encode().unwrap().len() as u64;
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match FeatureStore::open(&p, StoreMode::Read) {
            Err(Error::Truncated { offset }) => assert_eq!(offset, HEADER_LEN + rec_len),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn read_only_rejects_put() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ytfs");
        FeatureStore::open(&p, StoreMode::Create).unwrap();
        let mut s = FeatureStore::open(&p, StoreMode::Read).unwrap();
        assert!(matches!(s.put(&record(1, 9)), Err(Error::Usage(_))));
    }

    #[test]
    fn append_mode_extends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ytfs");
        FeatureStore::open(&p, StoreMode::Append)
            .unwrap()
            .put(&record(1, 9))
            .unwrap();
        FeatureStore::open(&p, StoreMode::Append)
            .unwrap()
            .put(&record(2, 9))
            .unwrap();
        assert_eq!(FeatureStore::open(&p, StoreMode::Read).unwrap().len(), 2);
    }
}
