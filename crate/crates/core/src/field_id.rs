// SPDX-License-Identifier: Apache-2.0
//! Packed 64-bit metadata field identifier.

use std::fmt;

use thiserror::Error;

/// Metadata context code (bits 54:52).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MdContext {
    Sys,
    Td,
    Vp,
}

impl MdContext {
    pub const fn code(self) -> u8 {
        match self {
            MdContext::Sys => 0,
            MdContext::Td => 1,
            MdContext::Vp => 2,
        }
    }

    pub const fn from_code(code: u8) -> Option<MdContext> {
        match code {
            0 => Some(MdContext::Sys),
            1 => Some(MdContext::Td),
            2 => Some(MdContext::Vp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MdContext::Sys => "SYS",
            MdContext::Td => "TD",
            MdContext::Vp => "VP",
        }
    }

    pub fn parse(s: &str) -> Option<MdContext> {
        match s.to_ascii_uppercase().as_str() {
            "SYS" => Some(MdContext::Sys),
            "TD" => Some(MdContext::Td),
            "VP" => Some(MdContext::Vp),
            _ => None,
        }
    }
}

/// Identifier returned when there is no next field.
pub const MD_FIELD_ID_NA: u64 = u64::MAX;

/// 8-byte elements; the only size the model supports.
pub const ELEMENT_SIZE_CODE_64: u8 = 3;

/// Sequences cover at most this many fields.
pub const MAX_FIELDS_IN_SEQUENCE: u32 = 512;

const RESERVED_MASK: u64 = (0xFF << 24) | (0b111 << 47) | (1 << 55) | (1 << 62);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct MdFieldId {
    pub field_code: u32,
    pub element_size_code: u8,
    pub last_element_in_field: u8,
    pub last_field_in_sequence: u16,
    pub inc_size: bool,
    pub write_mask_valid: bool,
    pub context_code: u8,
    pub class_code: u8,
    /// Bit 63; carried through untouched.
    pub ignored: bool,
    /// Raw reserved bits seen on decode. Always zero on encode.
    pub reserved_bits: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("field id subfield {field} = {value:#x} exceeds {bits} bits")]
pub struct EncodeError {
    pub field: &'static str,
    pub value: u64,
    pub bits: u32,
}

fn check(field: &'static str, value: u64, bits: u32) -> Result<u64, EncodeError> {
    if value >> bits != 0 {
        Err(EncodeError { field, value, bits })
    } else {
        Ok(value)
    }
}

impl MdFieldId {
    pub fn new(ctx: MdContext, class_code: u8, field_code: u32) -> MdFieldId {
        MdFieldId {
            field_code,
            element_size_code: ELEMENT_SIZE_CODE_64,
            context_code: ctx.code(),
            class_code,
            ..Default::default()
        }
    }

    pub fn encode(&self) -> Result<u64, EncodeError> {
        let mut raw = check("field_code", self.field_code as u64, 24)?;
        raw |= check("element_size_code", self.element_size_code as u64, 2)? << 32;
        raw |= check("last_element_in_field", self.last_element_in_field as u64, 4)? << 34;
        raw |= check("last_field_in_sequence", self.last_field_in_sequence as u64, 9)? << 38;
        raw |= (self.inc_size as u64) << 50;
        raw |= (self.write_mask_valid as u64) << 51;
        raw |= check("context_code", self.context_code as u64, 3)? << 52;
        raw |= check("class_code", self.class_code as u64, 6)? << 56;
        raw |= (self.ignored as u64) << 63;
        Ok(raw)
    }

    /// Encode, panicking on out-of-range subfields. For ids built from
    /// validated parts.
    pub fn raw(&self) -> u64 {
        self.encode().expect("field id subfields in range")
    }

    pub fn decode(raw: u64) -> MdFieldId {
        MdFieldId {
            field_code: (raw & 0xFF_FFFF) as u32,
            element_size_code: ((raw >> 32) & 0x3) as u8,
            last_element_in_field: ((raw >> 34) & 0xF) as u8,
            last_field_in_sequence: ((raw >> 38) & 0x1FF) as u16,
            inc_size: (raw >> 50) & 1 == 1,
            write_mask_valid: (raw >> 51) & 1 == 1,
            context_code: ((raw >> 52) & 0x7) as u8,
            class_code: ((raw >> 56) & 0x3F) as u8,
            ignored: raw >> 63 == 1,
            reserved_bits: raw & RESERVED_MASK,
        }
    }

    pub fn has_reserved_bits(&self) -> bool {
        self.reserved_bits != 0
    }

    pub fn context(&self) -> Option<MdContext> {
        MdContext::from_code(self.context_code)
    }

    pub fn num_fields(&self) -> u32 {
        self.last_field_in_sequence as u32 + 1
    }

    /// The (class, field code) pair that names a field element.
    pub fn key(&self) -> (u8, u32) {
        (self.class_code, self.field_code)
    }

    /// Same identity with all sequence controls cleared.
    pub fn base(&self) -> MdFieldId {
        MdFieldId {
            last_element_in_field: 0,
            last_field_in_sequence: 0,
            write_mask_valid: false,
            inc_size: false,
            reserved_bits: 0,
            ..*self
        }
    }
}

impl fmt::LowerHex for MdFieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&(self.encode().unwrap_or(0) | self.reserved_bits), f)
    }
}

impl fmt::Display for MdFieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:016x}", self.encode().unwrap_or(0) | self.reserved_bits)
    }
}

/// Free-function forms of the codec entry points.
pub fn encode_field_id(parts: &MdFieldId) -> Result<u64, EncodeError> {
    parts.encode()
}

pub fn decode_field_id(raw: u64) -> MdFieldId {
    MdFieldId::decode(raw)
}
