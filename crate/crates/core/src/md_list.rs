// SPDX-License-Identifier: Apache-2.0
//! The 4 KiB metadata list container and its sequence records.

use thiserror::Error;

use crate::field_id::MdFieldId;

pub const MD_LIST_SIZE: usize = 4096;
pub const MD_LIST_HEADER_SIZE: usize = 8;
pub const MD_LIST_BODY_SIZE: usize = MD_LIST_SIZE - MD_LIST_HEADER_SIZE;
/// 512 fields of one element plus the header.
pub const MD_SEQUENCE_MAX_SIZE: usize = 512 * 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct MdListHeader {
    pub list_buff_size: u16,
    pub num_sequences: u16,
    pub reserved: u32,
}

impl MdListHeader {
    pub fn to_bytes(self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0..2].copy_from_slice(&self.list_buff_size.to_le_bytes());
        b[2..4].copy_from_slice(&self.num_sequences.to_le_bytes());
        b[4..8].copy_from_slice(&self.reserved.to_le_bytes());
        b
    }

    pub fn from_u64(raw: u64) -> MdListHeader {
        MdListHeader { list_buff_size: raw as u16, num_sequences: (raw >> 16) as u16, reserved: (raw >> 32) as u32 }
    }

    pub fn to_u64(self) -> u64 {
        u64::from_le_bytes(self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MdSequence {
    pub header: MdFieldId,
    /// Element words; the write mask first when `write_mask_valid` is set.
    pub elements: Vec<u64>,
}

impl MdSequence {
    pub fn byte_len(&self) -> usize {
        8 + 8 * self.elements.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ListError {
    #[error("sequences need {0} bytes, more than one list holds")]
    TooLarge(usize),
    #[error("serialized list must be {MD_LIST_SIZE} bytes, got {0}")]
    BadLength(usize),
    #[error("too many sequences: {0}")]
    TooManySequences(usize),
}

#[derive(Clone, PartialEq, Eq)]
pub struct MdList {
    pub header: MdListHeader,
    pub body: Vec<u8>,
}

impl std::fmt::Debug for MdList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MdList").field("header", &self.header).finish_non_exhaustive()
    }
}

impl MdList {
    pub fn empty() -> MdList {
        MdList {
            header: MdListHeader { list_buff_size: MD_LIST_HEADER_SIZE as u16, num_sequences: 0, reserved: 0 },
            body: vec![0; MD_LIST_BODY_SIZE],
        }
    }

    /// Packs sequences back to back and sets the header accordingly.
    pub fn from_sequences(seqs: &[MdSequence]) -> Result<MdList, ListError> {
        let total = MD_LIST_HEADER_SIZE + seqs.iter().map(MdSequence::byte_len).sum::<usize>();
        if total > MD_LIST_SIZE {
            return Err(ListError::TooLarge(total));
        }
        if seqs.len() > u16::MAX as usize {
            return Err(ListError::TooManySequences(seqs.len()));
        }
        let mut list = MdList::empty();
        let mut at = 0;
        for s in seqs {
            list.body[at..at + 8].copy_from_slice(&s.header.raw().to_le_bytes());
            at += 8;
            for e in &s.elements {
                list.body[at..at + 8].copy_from_slice(&e.to_le_bytes());
                at += 8;
            }
        }
        list.header.list_buff_size = total as u16;
        list.header.num_sequences = seqs.len() as u16;
        Ok(list)
    }

    /// Arbitrary header over raw body words; for crafted inputs.
    pub fn from_words(header: MdListHeader, words: &[u64]) -> MdList {
        let mut list = MdList::empty();
        list.header = header;
        for (i, w) in words.iter().take(MD_LIST_BODY_SIZE / 8).enumerate() {
            list.body[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        list
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MD_LIST_SIZE);
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.body);
        out.resize(MD_LIST_SIZE, 0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MdList, ListError> {
        if bytes.len() != MD_LIST_SIZE {
            return Err(ListError::BadLength(bytes.len()));
        }
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[..8]);
        Ok(MdList { header: MdListHeader::from_u64(u64::from_le_bytes(raw)), body: bytes[8..].to_vec() })
    }

    /// Body word at a byte offset from the start of the list.
    pub fn word_at(&self, list_offset: usize) -> Option<u64> {
        let start = list_offset.checked_sub(MD_LIST_HEADER_SIZE)?;
        let b = self.body.get(start..start + 8)?;
        Some(u64::from_le_bytes(b.try_into().ok()?))
    }

    pub fn set_word(&mut self, list_offset: usize, value: u64) {
        let start = list_offset - MD_LIST_HEADER_SIZE;
        self.body[start..start + 8].copy_from_slice(&value.to_le_bytes());
    }
}

/// Splits a payload into lists; `None` if it is not a whole number of lists.
pub fn split_lists(bytes: &[u8]) -> Option<Vec<MdList>> {
    if !bytes.len().is_multiple_of(MD_LIST_SIZE) {
        return None;
    }
    bytes.chunks(MD_LIST_SIZE).map(|c| MdList::from_bytes(c).ok()).collect()
}

pub fn join_lists(lists: &[MdList]) -> Vec<u8> {
    lists.iter().flat_map(MdList::to_bytes).collect()
}
