//! Checkpoint snapshots and their binary encoding.
//!
//! Layout (all little-endian):
//!
//! ```text
//! u32  body length in bytes (everything after this field)
//! u16  format version
//! u8   number of cursor indices
//! u8   element width tag (1 = i16 codes, 2 = i32 codes, 3 = f64 bit patterns)
//! u32  cursor indices, repeated
//! u32  plan position
//! u32  element count
//! ...  elements
//! u32  CRC-32 of the body preceding it
//! ```

use thiserror::Error;

pub const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("snapshot version {found} not recognized (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

/// Volatile partial result of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum PartialOutput {
    Codes(Vec<i32>),
    Real(Vec<f64>),
}

impl PartialOutput {
    pub fn len(&self) -> usize {
        match self {
            PartialOutput::Codes(c) => c.len(),
            PartialOutput::Real(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PartialOutput::Codes(a), PartialOutput::Codes(b)) => a == b,
            (PartialOutput::Real(a), PartialOutput::Real(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub version: u16,
    pub indices: Vec<u32>,
    pub partial_output: PartialOutput,
    pub plan_position: u32,
}

pub fn save_state(cursor: &[u32], partial_output: &PartialOutput, plan_position: u32) -> CheckpointState {
    CheckpointState {
        version: SNAPSHOT_VERSION,
        indices: cursor.to_vec(),
        partial_output: partial_output.clone(),
        plan_position,
    }
}

pub fn load_state(state: &CheckpointState) -> Result<(Vec<u32>, PartialOutput, u32), SnapshotError> {
    if state.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::VersionMismatch { found: state.version, expected: SNAPSHOT_VERSION });
    }
    Ok((state.indices.clone(), state.partial_output.clone(), state.plan_position))
}

const TAG_I16: u8 = 1;
const TAG_I32: u8 = 2;
const TAG_F64: u8 = 3;

impl CheckpointState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.version.to_le_bytes());
        body.push(u8::try_from(self.indices.len()).expect("at most 255 cursor indices"));
        let tag = match &self.partial_output {
            PartialOutput::Codes(c) if c.iter().all(|&v| i16::try_from(v).is_ok()) => TAG_I16,
            PartialOutput::Codes(_) => TAG_I32,
            PartialOutput::Real(_) => TAG_F64,
        };
        body.push(tag);
        for idx in &self.indices {
            body.extend_from_slice(&idx.to_le_bytes());
        }
        body.extend_from_slice(&self.plan_position.to_le_bytes());
        body.extend_from_slice(&(self.partial_output.len() as u32).to_le_bytes());
        match &self.partial_output {
            PartialOutput::Codes(c) if tag == TAG_I16 => {
                c.iter().for_each(|&v| body.extend_from_slice(&(v as i16).to_le_bytes()))
            }
            PartialOutput::Codes(c) => c.iter().for_each(|&v| body.extend_from_slice(&v.to_le_bytes())),
            PartialOutput::Real(r) => r.iter().for_each(|&v| body.extend_from_slice(&v.to_bits().to_le_bytes())),
        }
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let corrupt = |m: &str| SnapshotError::CorruptSnapshot(m.to_string());
        let mut r = Reader { buf: bytes, pos: 0 };
        let body_len = r.u32().ok_or_else(|| corrupt("missing length prefix"))? as usize;
        if bytes.len() != body_len + 4 || body_len < 4 {
            return Err(corrupt("length prefix does not match snapshot size"));
        }
        let (body, crc_bytes) = bytes[4..].split_at(body_len - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored_crc {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let version = r.u16().ok_or_else(|| corrupt("truncated header"))?;
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::VersionMismatch { found: version, expected: SNAPSHOT_VERSION });
        }
        let n_idx = r.u8().ok_or_else(|| corrupt("truncated header"))? as usize;
        let tag = r.u8().ok_or_else(|| corrupt("truncated header"))?;
        let indices = (0..n_idx).map(|_| r.u32()).collect::<Option<Vec<_>>>().ok_or_else(|| corrupt("truncated cursor"))?;
        let plan_position = r.u32().ok_or_else(|| corrupt("truncated plan position"))?;
        let count = r.u32().ok_or_else(|| corrupt("truncated element count"))? as usize;
        let partial_output = match tag {
            TAG_I16 => PartialOutput::Codes(
                (0..count).map(|_| r.i16().map(i32::from)).collect::<Option<_>>().ok_or_else(|| corrupt("truncated codes"))?,
            ),
            TAG_I32 => PartialOutput::Codes(
                (0..count).map(|_| r.i32()).collect::<Option<_>>().ok_or_else(|| corrupt("truncated codes"))?,
            ),
            TAG_F64 => PartialOutput::Real(
                (0..count)
                    .map(|_| r.u64().map(f64::from_bits))
                    .collect::<Option<_>>()
                    .ok_or_else(|| corrupt("truncated values"))?,
            ),
            other => return Err(corrupt(&format!("unknown element tag {other}"))),
        };
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { version, indices, partial_output, plan_position })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let bytes = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        bytes.try_into().ok()
    }

    fn u8(&mut self) -> Option<u8> {
        self.take::<1>().map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take().map(u16::from_le_bytes)
    }

    fn i16(&mut self) -> Option<i16> {
        self.take().map(i16::from_le_bytes)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn i32(&mut self) -> Option<i32> {
        self.take().map(i32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }
}

/// Simulated non-volatile slot. A snapshot becomes visible only once it has
/// been fully encoded with its checksum.
#[derive(Debug, Clone, Default)]
pub struct Nvm {
    committed: Option<Vec<u8>>,
    writes: usize,
}

impl Nvm {
    /// Commits a snapshot; returns `false` when it is identical to the one
    /// already stored (no write happens).
    pub fn commit(&mut self, state: &CheckpointState) -> bool {
        let bytes = state.to_bytes();
        if self.committed.as_deref() == Some(bytes.as_slice()) {
            return false;
        }
        self.committed = Some(bytes);
        self.writes += 1;
        true
    }

    pub fn load(&self) -> Result<CheckpointState, SnapshotError> {
        let bytes = self.committed.as_deref().ok_or_else(|| SnapshotError::CorruptSnapshot("no snapshot committed".into()))?;
        CheckpointState::from_bytes(bytes)
    }

    pub fn writes(&self) -> usize {
        self.writes
    }

    pub fn raw(&self) -> Option<&[u8]> {
        self.committed.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_snapshot_is_corrupt() {
        let s = save_state(&[1, 2], &PartialOutput::Codes(vec![5, -7, 300]), 3);
        let bytes = s.to_bytes();
        for cut in [0, 3, 4, 10, bytes.len() - 1] {
            assert!(matches!(CheckpointState::from_bytes(&bytes[..cut]), Err(SnapshotError::CorruptSnapshot(_))));
        }
    }

    #[test]
    fn flipped_bit_is_corrupt() {
        let s = save_state(&[9], &PartialOutput::Real(vec![1.5, -0.0]), 0);
        let mut bytes = s.to_bytes();
        bytes[8] ^= 0x10;
        assert!(matches!(CheckpointState::from_bytes(&bytes), Err(SnapshotError::CorruptSnapshot(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut s = save_state(&[0], &PartialOutput::Codes(vec![]), 0);
        s.version = 7;
        assert!(matches!(load_state(&s), Err(SnapshotError::VersionMismatch { found: 7, .. })));
        assert!(matches!(CheckpointState::from_bytes(&s.to_bytes()), Err(SnapshotError::VersionMismatch { .. })));
    }

    #[test]
    fn wide_codes_use_i32() {
        let s = save_state(&[], &PartialOutput::Codes(vec![1 << 20, -3]), 1);
        let bytes = s.to_bytes();
        assert_eq!(bytes[7], TAG_I32);
        assert_eq!(CheckpointState::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn nvm_commit_is_idempotent() {
        let mut nvm = Nvm::default();
        let s = save_state(&[1], &PartialOutput::Codes(vec![1]), 1);
        assert!(nvm.commit(&s));
        assert!(!nvm.commit(&s));
        assert_eq!(nvm.writes(), 1);
        assert_eq!(nvm.load().unwrap(), s);
        assert!(Nvm::default().load().is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            idx in proptest::collection::vec(any::<u32>(), 0..4),
            codes in proptest::collection::vec(any::<i32>(), 0..64),
            reals in proptest::collection::vec(any::<f64>(), 0..64),
            pos in any::<u32>(),
            real in any::<bool>(),
        ) {
            let out = if real { PartialOutput::Real(reals) } else { PartialOutput::Codes(codes) };
            let s = save_state(&idx, &out, pos);
            let back = CheckpointState::from_bytes(&s.to_bytes()).unwrap();
            let (i2, o2, p2) = load_state(&back).unwrap();
            prop_assert_eq!(i2, idx);
            prop_assert!(o2.bit_eq(&out));
            prop_assert_eq!(p2, pos);
        }
    }
}
