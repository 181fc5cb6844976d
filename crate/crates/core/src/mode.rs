// SPDX-License-Identifier: Apache-2.0
//! Per-finding behavior toggles.

use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    Vulnerable,
    #[default]
    Fixed,
}

impl Variant {
    pub fn is_vulnerable(self) -> bool {
        self == Variant::Vulnerable
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vulnerable => "vulnerable",
            Variant::Fixed => "fixed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vulnerable" | "vuln" => Ok(Variant::Vulnerable),
            "fixed" => Ok(Variant::Fixed),
            _ => Err(format!("unknown mode {s:?} (expected vulnerable|fixed)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Finding {
    V1,
    V2,
    Bug1,
    Bug2,
    Bug3,
    Bug4,
    Bug6,
    Bug8,
    Bug9,
}

impl Finding {
    pub const ALL: [Finding; 9] = [
        Finding::V1,
        Finding::V2,
        Finding::Bug1,
        Finding::Bug2,
        Finding::Bug3,
        Finding::Bug4,
        Finding::Bug6,
        Finding::Bug8,
        Finding::Bug9,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Finding::V1 => "v1",
            Finding::V2 => "v2",
            Finding::Bug1 => "bug1",
            Finding::Bug2 => "bug2",
            Finding::Bug3 => "bug3",
            Finding::Bug4 => "bug4",
            Finding::Bug6 => "bug6",
            Finding::Bug8 => "bug8",
            Finding::Bug9 => "bug9",
        }
    }

    pub fn parse(s: &str) -> Option<Finding> {
        Finding::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Toggle set. Defaults to everything fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct EngineMode {
    pub v1: Variant,
    pub v2: Variant,
    pub bug1: Variant,
    pub bug2: Variant,
    pub bug3: Variant,
    pub bug4: Variant,
    pub bug6: Variant,
    pub bug8: Variant,
    pub bug9: Variant,
}

impl EngineMode {
    pub fn fixed() -> Self {
        EngineMode::default()
    }

    pub fn all(v: Variant) -> Self {
        let mut m = EngineMode::default();
        for f in Finding::ALL {
            m.set(f, v);
        }
        m
    }

    pub fn vulnerable() -> Self {
        EngineMode::all(Variant::Vulnerable)
    }

    pub fn get(&self, f: Finding) -> Variant {
        match f {
            Finding::V1 => self.v1,
            Finding::V2 => self.v2,
            Finding::Bug1 => self.bug1,
            Finding::Bug2 => self.bug2,
            Finding::Bug3 => self.bug3,
            Finding::Bug4 => self.bug4,
            Finding::Bug6 => self.bug6,
            Finding::Bug8 => self.bug8,
            Finding::Bug9 => self.bug9,
        }
    }

    pub fn set(&mut self, f: Finding, v: Variant) {
        let slot = match f {
            Finding::V1 => &mut self.v1,
            Finding::V2 => &mut self.v2,
            Finding::Bug1 => &mut self.bug1,
            Finding::Bug2 => &mut self.bug2,
            Finding::Bug3 => &mut self.bug3,
            Finding::Bug4 => &mut self.bug4,
            Finding::Bug6 => &mut self.bug6,
            Finding::Bug8 => &mut self.bug8,
            Finding::Bug9 => &mut self.bug9,
        };
        *slot = v;
    }

    pub fn with(mut self, f: Finding, v: Variant) -> Self {
        self.set(f, v);
        self
    }

    pub fn parse_mode(&self) -> ParseMode {
        ParseMode { list_header: self.bug1, write_mask: self.v2, required_skip: self.bug2 }
    }
}

/// The three toggles that change list parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ParseMode {
    /// Lower bound on `list_buff_size`.
    pub list_header: Variant,
    /// Write-mask handling inside the sequence loop.
    pub write_mask: Variant,
    /// Accounting of required fields skipped via a zero write mask.
    pub required_skip: Variant,
}

impl ParseMode {
    pub fn uniform(v: Variant) -> Self {
        ParseMode { list_header: v, write_mask: v, required_skip: v }
    }

    pub fn vulnerable() -> Self {
        ParseMode::uniform(Variant::Vulnerable)
    }

    pub fn fixed() -> Self {
        ParseMode::uniform(Variant::Fixed)
    }

    pub fn is_all_fixed(&self) -> bool {
        *self == ParseMode::fixed()
    }
}
