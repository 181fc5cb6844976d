// SPDX-License-Identifier: Apache-2.0
//! Migration bundle envelope: session keys, the MBMD header, AES-256-GCM
//! sealing and the per-stream IV counter.

use std::fmt;
use std::str::FromStr;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::Rng;
use thiserror::Error;

use crate::catalog::FieldPos;
use crate::codec::ImportProgress;
use crate::md_list::MD_LIST_SIZE;
use crate::state_machine::Leaf;
use crate::status::StatusWord;

/// 256-bit key held as four quadwords, in the order of the key field's
/// four elements.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MigrationSessionKey(pub [u64; 4]);

impl MigrationSessionKey {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        MigrationSessionKey([rng.random(), rng.random(), rng.random(), rng.random()])
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut b = [0u8; 32];
        for (i, q) in self.0.iter().enumerate() {
            b[i * 8..i * 8 + 8].copy_from_slice(&q.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8; 32]) -> Self {
        let mut q = [0u64; 4];
        for (i, w) in q.iter_mut().enumerate() {
            *w = u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        }
        MigrationSessionKey(q)
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(&self.to_bytes()).expect("32-byte key")
    }
}

impl fmt::Debug for MigrationSessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MigrationSessionKey({self})")
    }
}

/// `q0-q1-q2-q3`, each in hex with a `0x` prefix.
impl fmt::Display for MigrationSessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.0;
        write!(f, "0x{:x}-0x{:x}-0x{:x}-0x{:x}", q[0], q[1], q[2], q[3])
    }
}

impl FromStr for MigrationSessionKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 4 {
            return Err(format!("key needs four '-'-separated quadwords, got {}", parts.len()));
        }
        let mut q = [0u64; 4];
        for (w, p) in q.iter_mut().zip(parts) {
            let h = p.strip_prefix("0x").or_else(|| p.strip_prefix("0X")).unwrap_or(p);
            *w = u64::from_str_radix(h, 16).map_err(|e| format!("bad quadword {p:?}: {e}"))?;
        }
        Ok(MigrationSessionKey(q))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BundleType {
    Immutable,
    Td,
    Vp,
    Mem,
}

impl BundleType {
    pub fn code(self) -> u16 {
        match self {
            BundleType::Immutable => 0,
            BundleType::Td => 1,
            BundleType::Vp => 2,
            BundleType::Mem => 3,
        }
    }

    pub fn from_code(c: u16) -> Option<BundleType> {
        [BundleType::Immutable, BundleType::Td, BundleType::Vp, BundleType::Mem].into_iter().find(|t| t.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            BundleType::Immutable => "immutable",
            BundleType::Td => "td",
            BundleType::Vp => "vp",
            BundleType::Mem => "mem",
        }
    }

    pub fn parse(s: &str) -> Option<BundleType> {
        [BundleType::Immutable, BundleType::Td, BundleType::Vp, BundleType::Mem].into_iter().find(|t| t.name() == s)
    }
}

pub const MBMD_MAGIC: [u8; 4] = *b"MBMD";
pub const MBMD_VERSION: u16 = 1;
pub const MBMD_SIZE: usize = 40;
/// Bytes of the serialized MBMD covered as associated data (all but the MAC).
pub const MBMD_AAD_LEN: usize = 24;

/// Bundle metadata header. Fields are kept raw so that a tampered header
/// still parses and is rejected by the MAC check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mbmd {
    pub magic: [u8; 4],
    pub version: u16,
    pub bundle_type: u16,
    pub payload_size: u32,
    pub stream_index: u32,
    pub iv_counter: u64,
    pub mac: [u8; 16],
}

impl Mbmd {
    pub fn new(ty: BundleType, payload_size: u32, stream_index: u32, iv_counter: u64) -> Mbmd {
        Mbmd {
            magic: MBMD_MAGIC,
            version: MBMD_VERSION,
            bundle_type: ty.code(),
            payload_size,
            stream_index,
            iv_counter,
            mac: [0; 16],
        }
    }

    pub fn kind(&self) -> Option<BundleType> {
        BundleType::from_code(self.bundle_type)
    }

    pub fn to_bytes(&self) -> [u8; MBMD_SIZE] {
        let mut b = [0u8; MBMD_SIZE];
        b[0..4].copy_from_slice(&self.magic);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.bundle_type.to_le_bytes());
        b[8..12].copy_from_slice(&self.payload_size.to_le_bytes());
        b[12..16].copy_from_slice(&self.stream_index.to_le_bytes());
        b[16..24].copy_from_slice(&self.iv_counter.to_le_bytes());
        b[24..40].copy_from_slice(&self.mac);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Mbmd, EnvelopeError> {
        if b.len() != MBMD_SIZE {
            return Err(EnvelopeError::MbmdLength(b.len()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        Ok(Mbmd {
            magic: b[0..4].try_into().unwrap(),
            version: u16_at(4),
            bundle_type: u16_at(6),
            payload_size: u32_at(8),
            stream_index: u32_at(12),
            iv_counter: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            mac: b[24..40].try_into().unwrap(),
        })
    }

    pub fn aad(&self) -> [u8; MBMD_AAD_LEN] {
        self.to_bytes()[..MBMD_AAD_LEN].try_into().unwrap()
    }

    pub fn iv(&self) -> [u8; 12] {
        make_iv(self.stream_index, self.iv_counter)
    }
}

/// 96-bit IV: stream index (u32 LE) followed by the counter (u64 LE).
pub fn make_iv(stream_index: u32, counter: u64) -> [u8; 12] {
    let mut iv = [0u8; 12];
    iv[..4].copy_from_slice(&stream_index.to_le_bytes());
    iv[4..].copy_from_slice(&counter.to_le_bytes());
    iv
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("plaintext of {0} bytes is not a whole number of lists")]
    NotListAligned(usize),
    #[error("MBMD must be {MBMD_SIZE} bytes, got {0}")]
    MbmdLength(usize),
    #[error("payload size {declared} does not match ciphertext of {actual} bytes")]
    PayloadSize { declared: u32, actual: usize },
    #[error("MAC check failed")]
    Integrity,
    #[error("MBMD is malformed")]
    Malformed,
    #[error("no migration key set")]
    NoKey,
    #[error("stream is busy")]
    Busy,
}

impl EnvelopeError {
    pub fn status(&self) -> StatusWord {
        match self {
            EnvelopeError::Integrity => StatusWord::MIGRATION_INTEGRITY_ERROR,
            EnvelopeError::NoKey => StatusWord::MIGRATION_KEY_NOT_SET,
            EnvelopeError::Busy => StatusWord::OPERAND_BUSY,
            _ => StatusWord::MIGRATION_BUNDLE_INVALID,
        }
    }
}

/// How far the counter advances per sealed bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CounterPolicy {
    #[default]
    PerBundle,
    /// One step per 4 KiB list; the bundle uses the first counter of its
    /// range.
    PerList,
}

/// Where an interrupted import picks up again.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResumeCursor {
    pub leaf: Leaf,
    pub mbmd: Mbmd,
    pub vp_index: Option<usize>,
    pub lists_done: usize,
    pub expected: Option<FieldPos>,
    pub progress: ImportProgress,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InterruptedState {
    pub status: StatusWord,
    pub ext: [u64; 2],
    pub cursor: Option<ResumeCursor>,
}

impl InterruptedState {
    /// Records a failure unless an earlier one is already latched.
    /// Returns the status that is now latched.
    pub fn latch(&mut self, status: StatusWord, ext: [u64; 2]) -> StatusWord {
        if self.status == StatusWord::SUCCESS {
            self.status = status;
            self.ext = ext;
        }
        self.status
    }
}

/// Per-stream crypto and resume state.
#[derive(Clone, Debug)]
pub struct MigStreamContext {
    pub stream_index: u32,
    key: Option<MigrationSessionKey>,
    iv_counter: u64,
    /// Highest counter accepted by the import side.
    last_accepted: Option<u64>,
    busy: bool,
    pub policy: CounterPolicy,
    pub interrupted_state: InterruptedState,
}

impl MigStreamContext {
    pub fn new(stream_index: u32) -> Self {
        MigStreamContext {
            stream_index,
            key: None,
            iv_counter: 0,
            last_accepted: None,
            busy: false,
            policy: CounterPolicy::default(),
            interrupted_state: InterruptedState::default(),
        }
    }

    pub fn with_key(stream_index: u32, key: MigrationSessionKey) -> Self {
        let mut c = MigStreamContext::new(stream_index);
        c.key = Some(key);
        c
    }

    pub fn set_key(&mut self, key: MigrationSessionKey) {
        self.key = Some(key);
    }

    pub fn key(&self) -> Option<MigrationSessionKey> {
        self.key
    }

    pub fn iv_counter(&self) -> u64 {
        self.iv_counter
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    /// Takes the stream lock; a second holder gets BUSY.
    pub fn lock(&mut self) -> Result<(), EnvelopeError> {
        if self.busy {
            return Err(EnvelopeError::Busy);
        }
        self.busy = true;
        Ok(())
    }

    pub fn unlock(&mut self) {
        self.busy = false;
    }

    /// IV for the current counter value, then advances the counter by
    /// `steps`. Callers advance even if they later throw the output away.
    fn take_iv(&mut self, steps: u64) -> (u64, [u8; 12]) {
        let c = self.iv_counter;
        self.iv_counter = self.iv_counter.checked_add(steps).expect("IV counter exhausted");
        (c, make_iv(self.stream_index, c))
    }

    pub fn next_iv(&mut self) -> [u8; 12] {
        self.take_iv(1).1
    }

    /// Seals a whole number of 4 KiB lists.
    pub fn encrypt_bundle(&mut self, ty: BundleType, plaintext: &[u8]) -> Result<(Mbmd, Vec<u8>), EnvelopeError> {
        if plaintext.is_empty() || !plaintext.len().is_multiple_of(MD_LIST_SIZE) {
            return Err(EnvelopeError::NotListAligned(plaintext.len()));
        }
        let key = self.key.ok_or(EnvelopeError::NoKey)?;
        let steps = match self.policy {
            CounterPolicy::PerBundle => 1,
            CounterPolicy::PerList => (plaintext.len() / MD_LIST_SIZE) as u64,
        };
        let (counter, _) = self.take_iv(steps);
        Ok(seal(&key, ty, self.stream_index, counter, plaintext))
    }

    /// Verifies and opens a bundle. Nothing is returned unless the MAC
    /// over the MBMD and ciphertext checks out.
    pub fn decrypt_bundle(&self, mbmd: &Mbmd, ciphertext: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
        let key = self.key.ok_or(EnvelopeError::NoKey)?;
        open(&key, mbmd, ciphertext)
    }

    /// Import-side freshness: counters must strictly increase per stream.
    pub fn accept_counter(&mut self, counter: u64) -> Result<(), EnvelopeError> {
        if self.last_accepted.is_some_and(|l| counter <= l) {
            return Err(EnvelopeError::Integrity);
        }
        self.last_accepted = Some(counter);
        Ok(())
    }
}

/// Stateless seal with an explicit key and counter. Reusing a counter
/// under one key is the caller's mistake to avoid.
pub fn seal(
    key: &MigrationSessionKey,
    ty: BundleType,
    stream_index: u32,
    counter: u64,
    plaintext: &[u8],
) -> (Mbmd, Vec<u8>) {
    let mut mbmd = Mbmd::new(ty, plaintext.len() as u32, stream_index, counter);
    let sealed = key
        .cipher()
        .encrypt(&Nonce::from(make_iv(stream_index, counter)), Payload { msg: plaintext, aad: &mbmd.aad() })
        .expect("AES-GCM encryption does not fail for in-range sizes");
    let (ct, tag) = sealed.split_at(sealed.len() - 16);
    mbmd.mac.copy_from_slice(tag);
    (mbmd, ct.to_vec())
}

/// Stateless open with an explicit key.
pub fn open(key: &MigrationSessionKey, mbmd: &Mbmd, ciphertext: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
    let mut sealed = Vec::with_capacity(ciphertext.len() + 16);
    sealed.extend_from_slice(ciphertext);
    sealed.extend_from_slice(&mbmd.mac);
    let pt = key
        .cipher()
        .decrypt(&Nonce::from(mbmd.iv()), Payload { msg: &sealed, aad: &mbmd.aad() })
        .map_err(|_| EnvelopeError::Integrity)?;
    if mbmd.magic != MBMD_MAGIC || mbmd.version != MBMD_VERSION || mbmd.kind().is_none() {
        return Err(EnvelopeError::Malformed);
    }
    if mbmd.payload_size as usize != ciphertext.len() {
        return Err(EnvelopeError::PayloadSize { declared: mbmd.payload_size, actual: ciphertext.len() });
    }
    Ok(pt)
}
