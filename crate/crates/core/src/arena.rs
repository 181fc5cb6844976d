// SPDX-License-Identifier: Apache-2.0
//! Instrumented byte arena standing in for the logical processor's data
//! stack around the decrypted metadata list.
//!
//! Offsets `0..4096` hold the list. Everything after that is labeled
//! sentinel data, so a word that leaks out of the parser can be traced
//! back to the region it came from.

use crate::md_list::MD_LIST_SIZE;

pub const DEFAULT_ARENA_SIZE: usize = 16384;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: &'static str,
    pub start: usize,
    pub end: usize,
}

impl Region {
    pub fn contains(&self, offset: usize) -> bool {
        offset >= self.start && offset < self.end
    }
}

const LAYOUT: &[(&str, usize)] = &[
    ("md-list", MD_LIST_SIZE),
    ("canary", 8),
    ("return-address", 8),
    ("caller-frame", 4080),
    ("shadow-stack", 4096),
    ("adjacent-frame", usize::MAX),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArenaRead {
    pub offset: usize,
    pub len: usize,
    /// Any byte of the read lies at or beyond the end of the list region.
    pub oob: bool,
}

#[derive(Clone, Debug)]
pub struct ParseArena {
    buf: Vec<u8>,
    regions: Vec<Region>,
    log: Vec<ArenaRead>,
}

impl Default for ParseArena {
    fn default() -> Self {
        ParseArena::new()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_seed(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Sentinel word for a given region and aligned offset. Bits 54:52 are
/// forced to 7 so a sentinel never carries a valid context code.
pub fn sentinel_word(region: &str, offset: usize) -> u64 {
    splitmix(name_seed(region) ^ offset as u64) | (0x7 << 52)
}

impl ParseArena {
    pub fn new() -> Self {
        ParseArena::with_size(DEFAULT_ARENA_SIZE)
    }

    /// Arena of `size` bytes (at least one list). Regions that do not fit
    /// are truncated.
    pub fn with_size(size: usize) -> Self {
        let size = size.max(MD_LIST_SIZE);
        let mut regions = Vec::new();
        let mut at = 0;
        for &(name, len) in LAYOUT {
            if at >= size {
                break;
            }
            let end = at.saturating_add(len).min(size);
            regions.push(Region { name, start: at, end });
            at = end;
        }
        let mut buf = vec![0u8; size];
        for r in regions.iter().skip(1) {
            let mut off = r.start;
            while off + 8 <= r.end {
                buf[off..off + 8].copy_from_slice(&sentinel_word(r.name, off).to_le_bytes());
                off += 8;
            }
        }
        ParseArena { buf, regions, log: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.buf.len()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Option<Region> {
        self.regions.iter().copied().find(|r| r.name == name)
    }

    pub fn region_of(&self, offset: usize) -> Option<Region> {
        self.regions.iter().copied().find(|r| r.contains(offset))
    }

    /// Copies a serialized list into the list region (zero-filling the
    /// rest of it) and clears the access log.
    pub fn load_list(&mut self, bytes: &[u8]) {
        let n = bytes.len().min(MD_LIST_SIZE);
        self.buf[..n].copy_from_slice(&bytes[..n]);
        self.buf[n..MD_LIST_SIZE].fill(0);
        self.log.clear();
    }

    /// Logged 8-byte little-endian read. Bytes past the end of the arena
    /// read as zero.
    pub fn read_u64(&mut self, offset: usize) -> u64 {
        self.log.push(ArenaRead { offset, len: 8, oob: offset + 8 > MD_LIST_SIZE });
        self.peek_u64(offset)
    }

    /// Unlogged read, for oracles.
    pub fn peek_u64(&self, offset: usize) -> u64 {
        let mut b = [0u8; 8];
        for (i, byte) in b.iter_mut().enumerate() {
            if let Some(v) = self.buf.get(offset + i) {
                *byte = *v;
            }
        }
        u64::from_le_bytes(b)
    }

    /// Overwrites a word, e.g. to plant a test-chosen value on the stack.
    pub fn plant(&mut self, offset: usize, value: u64) {
        for (i, v) in value.to_le_bytes().into_iter().enumerate() {
            if let Some(slot) = self.buf.get_mut(offset + i) {
                *slot = v;
            }
        }
    }

    /// Finds an aligned word beyond the list region holding `value`.
    pub fn locate(&self, value: u64) -> Option<(Region, usize)> {
        (MD_LIST_SIZE..self.buf.len().saturating_sub(7))
            .step_by(8)
            .find(|&off| self.peek_u64(off) == value)
            .and_then(|off| self.region_of(off).map(|r| (r, off)))
    }

    pub fn log(&self) -> &[ArenaRead] {
        &self.log
    }

    pub fn clear_log(&mut self) {
        self.log.clear();
    }

    pub fn oob_reads(&self) -> impl Iterator<Item = &ArenaRead> {
        self.log.iter().filter(|r| r.oob)
    }

    pub fn oob_count(&self) -> usize {
        self.oob_reads().count()
    }

    /// One past the highest byte offset read.
    pub fn max_read_end(&self) -> Option<usize> {
        self.log.iter().map(|r| r.offset + r.len).max()
    }
}
