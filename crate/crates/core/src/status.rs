// SPDX-License-Identifier: Apache-2.0
//! 64-bit completion status words.
//!
//! Layout: bit 63 error, bit 62 non-recoverable, bit 61 fatal, bits 47:32
//! class and detail code, bits 31:0 operand / detail.

use std::fmt;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct StatusWord(pub u64);

const FATAL_BIT: u64 = 1 << 61;
const ERROR_BIT: u64 = 1 << 63;
const DETAIL_MASK: u64 = 0xFFFF_FFFF;

macro_rules! statuses {
    ($($name:ident = $val:expr;)*) => {
        impl StatusWord {
            $(pub const $name: StatusWord = StatusWord($val);)*
            const NAMED: &'static [(&'static str, StatusWord)] = &[$((stringify!($name), StatusWord($val)),)*];
        }
    };
}

statuses! {
    SUCCESS = 0x0000_0000_0000_0000;
    INTERRUPTED_RESUMABLE = 0x8000_0003_0000_0000;
    OPERAND_BUSY = 0x8000_0200_0000_0000;
    OPERAND_INVALID = 0xC000_0100_0000_0000;
    OPERAND_PAGE_METADATA_INCORRECT = 0xC000_0300_0000_0000;
    SYS_STATE_INCORRECT = 0xC000_0602_0000_0000;
    LIFECYCLE_STATE_INCORRECT = 0xC000_0606_0000_0000;
    OP_STATE_INCORRECT = 0xC000_0608_0000_0000;
    MAX_VCPUS_EXCEEDED = 0xC000_0609_0000_0000;
    TDCX_NUM_INCORRECT = 0xC000_0610_0000_0000;
    HKID_NOT_FREE = 0xC000_0810_0000_0000;
    MIGRATION_INTEGRITY_ERROR = 0xC000_0A02_0000_0000;
    MIGRATION_TOKEN_INVALID = 0xC000_0A03_0000_0000;
    MIGRATION_BUNDLE_INVALID = 0xC000_0A04_0000_0000;
    EXPORT_COUNT_EXCEEDED = 0xC000_0A05_0000_0000;
    TD_NOT_MIGRATABLE = 0xC000_0A06_0000_0000;
    IMPORT_ACTIVITY_MISMATCH = 0xC000_0A07_0000_0000;
    VCPU_COUNT_MISMATCH = 0xC000_0A08_0000_0000;
    MIGRATION_KEY_NOT_SET = 0xC000_0A09_0000_0000;
    EVENT_FILTER_INVALID = 0xC000_0B01_0000_0000;
    EVENT_FILTER_ORDER_INVALID = 0xC000_0B02_0000_0000;
    METADATA_FIELD_ID_INCORRECT = 0xC000_0C00_0000_0000;
    METADATA_FIELD_NOT_WRITABLE = 0xC000_0C01_0000_0000;
    METADATA_FIELD_NOT_READABLE = 0xC000_0C02_0000_0000;
    METADATA_FIELD_VALUE_NOT_VALID = 0xC000_0C03_0000_0000;
    METADATA_LIST_OVERFLOW = 0xC000_0C04_0000_0000;
    METADATA_REQUIRED_FIELD_MISSING = 0xC000_0C05_0000_0000;
    SERVTD_UUID_MISMATCH = 0xC000_0D01_0000_0000;
    SERVTD_ACCESS_DENIED = 0xC000_0D02_0000_0000;
    SEAM_SHUTDOWN = 0xE000_0F00_0000_0000;
}

/// Operand identifiers carried in the low 32 bits.
pub mod operand {
    pub const RAX: u32 = 0x00;
    pub const RCX: u32 = 0x01;
    pub const RDX: u32 = 0x02;
    pub const R8: u32 = 0x08;
    pub const R9: u32 = 0x09;
    pub const ATTRIBUTES: u32 = 0x40;
    pub const XFAM: u32 = 0x41;
    pub const EXEC_CONTROLS: u32 = 0x42;
    pub const EPTP: u32 = 0x43;
    pub const NUM_VCPUS: u32 = 0x44;
    pub const TDMR: u32 = 0x50;
    pub const HKID: u32 = 0x51;
}

/// Reasons carried by `SEAM_SHUTDOWN`.
pub mod shutdown {
    pub const SEPT_WALK: u32 = 0x01;
    pub const GUEST_XCR0: u32 = 0x02;
    pub const GUEST_EPTP: u32 = 0x03;
}

impl StatusWord {
    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn is_success(self) -> bool {
        self.0 & ERROR_BIT == 0
    }

    pub const fn is_error(self) -> bool {
        !self.is_success()
    }

    pub const fn is_fatal(self) -> bool {
        self.0 & FATAL_BIT != 0
    }

    /// Status code with the operand and the fatal flag stripped.
    pub const fn base(self) -> StatusWord {
        let code = self.0 & !DETAIL_MASK;
        if code == Self::SEAM_SHUTDOWN.0 {
            return Self::SEAM_SHUTDOWN;
        }
        StatusWord(code & !FATAL_BIT)
    }

    pub const fn detail(self) -> u32 {
        (self.0 & DETAIL_MASK) as u32
    }

    pub const fn with_operand(self, op: u32) -> StatusWord {
        StatusWord((self.0 & !DETAIL_MASK) | op as u64)
    }

    /// Level-2 details used by list errors: bits 31:16 operand, bits 15:0 index.
    pub const fn with_l2(self, operand: u16, index: u16) -> StatusWord {
        self.with_operand(((operand as u32) << 16) | index as u32)
    }

    pub const fn fatal(self) -> StatusWord {
        StatusWord(self.0 | FATAL_BIT)
    }

    pub fn base_name(self) -> &'static str {
        let b = self.base();
        Self::NAMED.iter().find(|(_, s)| *s == b).map(|(n, _)| *n).unwrap_or("UNKNOWN")
    }

    /// Looks a base status up by its constant name, as used in scenario files.
    pub fn from_name(name: &str) -> Option<StatusWord> {
        Self::NAMED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    pub fn operand_name(self) -> String {
        let d = self.detail();
        let n = match d {
            operand::RAX => "RAX",
            operand::RCX => "RCX",
            operand::RDX => "RDX",
            operand::R8 => "R8",
            operand::R9 => "R9",
            operand::ATTRIBUTES => "ATTRIBUTES",
            operand::XFAM => "XFAM",
            operand::EXEC_CONTROLS => "EXEC_CONTROLS",
            operand::EPTP => "EPTP",
            operand::NUM_VCPUS => "NUM_VCPUS",
            operand::TDMR => "TDMR",
            operand::HKID => "HKID",
            _ => return format!("0x{d:x}"),
        };
        n.to_string()
    }

    /// One console line in the toolkit's format.
    pub fn transcript_line(self) -> String {
        let fatal = if self.is_fatal() && self.base() != Self::SEAM_SHUTDOWN { " (FATAL)" } else { "" };
        format!("TDX STATUS: 0x{:x} - TDX_{}{} : OPERAND_ID_{}", self.0, self.base_name(), fatal, self.operand_name())
    }

    /// Console line for calls that also return the extended error registers.
    pub fn return_code_line(self, ext: [u64; 2]) -> String {
        format!(
            "return code: 0x{:x} - TDX_{} : OPERAND_ID_{}, extended error information 1: 0x{:x}, 2: 0x{:x}",
            self.0,
            self.base_name(),
            self.operand_name(),
            ext[0],
            ext[1]
        )
    }
}

impl fmt::Debug for StatusWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(0x{:016x})", self.base_name(), self.0)
    }
}

impl fmt::Display for StatusWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:016x} {}", self.0, self.base_name())
    }
}

impl fmt::LowerHex for StatusWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// Failure of a host or guest call: the status plus the two extended
/// error registers (RCX, RDX).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TdxError {
    pub status: StatusWord,
    pub ext: [u64; 2],
}

impl TdxError {
    pub fn with_ext(status: StatusWord, ext: [u64; 2]) -> Self {
        TdxError { status, ext }
    }
}

impl From<StatusWord> for TdxError {
    fn from(status: StatusWord) -> Self {
        TdxError { status, ext: [0; 2] }
    }
}

impl fmt::Display for TdxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (ext 0x{:x}, 0x{:x})", self.status, self.ext[0], self.ext[1])
    }
}

impl std::error::Error for TdxError {}

pub type ApiResult<T> = Result<T, TdxError>;
