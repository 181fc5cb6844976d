// SPDX-License-Identifier: Apache-2.0
//! Metadata field catalog: per-context lookup tables loaded from a text
//! fixture, plus the CPUID lookup array.

use std::sync::OnceLock;

use thiserror::Error;

use crate::field_id::{MdContext, MdFieldId, MD_FIELD_ID_NA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MigClass {
    Mb,
    Me,
    Mbo,
    Cb,
    None,
}

/// Import/export phase a migration class belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Immutable,
    Mutable,
}

impl MigClass {
    fn parse(s: &str) -> Option<MigClass> {
        Some(match s {
            "MB" => MigClass::Mb,
            "ME" => MigClass::Me,
            "MBO" => MigClass::Mbo,
            "CB" => MigClass::Cb,
            "NONE" => MigClass::None,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MigClass::Mb => "MIG_MB",
            MigClass::Me => "MIG_ME",
            MigClass::Mbo => "MIG_MBO",
            MigClass::Cb => "MIG_CB",
            MigClass::None => "NONE",
        }
    }

    pub fn phase(self) -> Option<Phase> {
        match self {
            MigClass::Mb | MigClass::Mbo => Some(Phase::Immutable),
            MigClass::Me | MigClass::Cb => Some(Phase::Mutable),
            MigClass::None => None,
        }
    }
}

/// Field-specific write behavior, keyed off the entry name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Generic,
    SysCompat,
    Attributes,
    Xfam,
    Gpaw,
    Eptp,
    NumVcpus,
    TscFrequency,
    HpLockTimeout,
    ExportCount,
    VirtualTsc,
    MigKey,
    Xcr0,
    TscDeadline,
    GpaPointer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FieldAttrs {
    pub gpa: bool,
    pub hpa: bool,
    pub private: bool,
    pub shared: bool,
}

/// One element as the host-side read tools print it.
pub fn identifier_line(e: &FieldEntry, id: MdFieldId, value: u64) -> String {
    format!(
        "identifier: 0x{:x}, name: {}, num_of_fields: {}, num_of_elem: {}, contents: 0x{:x}",
        id.raw(),
        e.name,
        e.num_of_fields,
        e.num_of_elem,
        value
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldEntry {
    pub ctx: MdContext,
    pub name: String,
    pub field_id: MdFieldId,
    pub num_of_fields: u32,
    pub num_of_elem: u32,
    pub offset: u32,
    pub prod_rd_mask: u64,
    pub prod_wr_mask: u64,
    pub dbg_rd_mask: u64,
    pub dbg_wr_mask: u64,
    pub guest_rd_mask: u64,
    pub guest_wr_mask: u64,
    pub migtd_rd_mask: u64,
    pub migtd_wr_mask: u64,
    pub export_mask: u64,
    pub import_mask: u64,
    pub special_rd_handling: bool,
    pub special_wr_handling: bool,
    pub attrs: FieldAttrs,
    pub mig_export: MigClass,
    pub mig_import: MigClass,
    pub kind: FieldKind,
}

impl FieldEntry {
    pub fn class_code(&self) -> u8 {
        self.field_id.class_code
    }

    pub fn first_code(&self) -> u32 {
        self.field_id.field_code
    }

    pub fn total_elements(&self) -> u32 {
        self.num_of_fields * self.num_of_elem
    }

    /// Field code one past the last element of the entry.
    pub fn end_code(&self) -> u32 {
        self.first_code() + self.total_elements()
    }

    /// Identifier of one element.
    pub fn element_id(&self, field: u32, elem: u32) -> MdFieldId {
        let mut id = self.field_id.base();
        id.field_code = self.first_code() + field * self.num_of_elem + elem;
        id
    }

    /// (field index, element index) if the code names an element of this entry.
    pub fn locate_code(&self, class_code: u8, field_code: u32) -> Option<(u32, u32)> {
        if class_code != self.class_code() || field_code < self.first_code() || field_code >= self.end_code() {
            return None;
        }
        let rel = field_code - self.first_code();
        Some((rel / self.num_of_elem, rel % self.num_of_elem))
    }

    /// Whether an import of the given phase must write this entry.
    /// `class_present` reports whether any field of the entry's class has
    /// been written already in this import.
    pub fn required_on_import(&self, phase: Phase, class_present: bool) -> bool {
        match self.mig_import {
            MigClass::Mb => phase == Phase::Immutable,
            MigClass::Me => phase == Phase::Mutable,
            MigClass::Mbo => phase == Phase::Immutable && class_present,
            MigClass::Cb | MigClass::None => false,
        }
    }

    /// Written at all (required or optional) by an import of this phase.
    pub fn imported_in(&self, phase: Phase) -> bool {
        self.mig_import.phase() == Some(phase) && self.import_mask != 0
    }

    pub fn exported_in(&self, phase: Phase) -> bool {
        self.mig_export.phase() == Some(phase) && self.export_mask != 0
    }
}

/// Position of a field inside a context table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldPos {
    pub entry: usize,
    pub field: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{ctx:?} table: {msg}")]
    Order { ctx: MdContext, msg: String },
}

#[derive(Clone, Debug)]
pub struct Catalog {
    tables: [Vec<FieldEntry>; 3],
}

const BUILTIN: &str = include_str!("../data/catalog.txt");

fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.parse().ok(),
    }
}

fn kind_for(ctx: MdContext, name: &str, attrs: FieldAttrs) -> FieldKind {
    if ctx == MdContext::Sys {
        return FieldKind::SysCompat;
    }
    match name {
        "ATTRIBUTES" => FieldKind::Attributes,
        "XFAM" => FieldKind::Xfam,
        "GPAW" => FieldKind::Gpaw,
        "EPTP" => FieldKind::Eptp,
        "NUM_VCPUS" => FieldKind::NumVcpus,
        "TSC_FREQUENCY" => FieldKind::TscFrequency,
        "HP_LOCK_TIMEOUT" => FieldKind::HpLockTimeout,
        "EXPORT_COUNT" => FieldKind::ExportCount,
        "VIRTUAL_TSC" => FieldKind::VirtualTsc,
        "MIG_DEC_KEY" | "MIG_ENC_KEY" => FieldKind::MigKey,
        "XCR0" => FieldKind::Xcr0,
        "TSC_DEADLINE" => FieldKind::TscDeadline,
        _ if attrs.gpa => FieldKind::GpaPointer,
        _ => FieldKind::Generic,
    }
}

fn parse_line(n: usize, line: &str) -> Result<FieldEntry, CatalogError> {
    let err = |msg: String| CatalogError::Parse { line: n, msg };
    let cols: Vec<&str> = line.split_whitespace().collect();
    if cols.len() != 20 {
        return Err(err(format!("expected 20 columns, got {}", cols.len())));
    }
    let ctx = MdContext::parse(cols[0]).ok_or_else(|| err(format!("bad context {}", cols[0])))?;
    let num = |i: usize| parse_u64(cols[i]).ok_or_else(|| err(format!("bad number in column {}: {}", i + 1, cols[i])));
    let raw = num(2)?;
    let field_id = MdFieldId::decode(raw);
    if field_id.context() != Some(ctx) {
        return Err(err(format!("field id {raw:#x} context does not match {}", ctx.name())));
    }
    let flags = |s: &str| -> Vec<String> {
        if s == "-" {
            Vec::new()
        } else {
            s.split(',').map(str::to_string).collect()
        }
    };
    let special = flags(cols[16]);
    let attr_flags = flags(cols[17]);
    let mut attrs = FieldAttrs::default();
    for a in &attr_flags {
        match a.as_str() {
            "gpa" => attrs.gpa = true,
            "hpa" => attrs.hpa = true,
            "private" => attrs.private = true,
            "shared" => attrs.shared = true,
            other => return Err(err(format!("unknown attribute {other}"))),
        }
    }
    for s in &special {
        if s != "rd" && s != "wr" {
            return Err(err(format!("unknown special flag {s}")));
        }
    }
    let mig = |i: usize| MigClass::parse(cols[i]).ok_or_else(|| err(format!("bad migration class {}", cols[i])));
    let num_of_fields = num(3)? as u32;
    let num_of_elem = num(4)? as u32;
    if num_of_fields == 0 || num_of_elem == 0 {
        return Err(err("entry needs at least one field and element".into()));
    }
    let name = cols[1].to_string();
    Ok(FieldEntry {
        ctx,
        kind: kind_for(ctx, &name, attrs),
        name,
        field_id: field_id.base(),
        num_of_fields,
        num_of_elem,
        offset: num(5)? as u32,
        prod_rd_mask: num(6)?,
        prod_wr_mask: num(7)?,
        dbg_rd_mask: num(8)?,
        dbg_wr_mask: num(9)?,
        guest_rd_mask: num(10)?,
        guest_wr_mask: num(11)?,
        migtd_rd_mask: num(12)?,
        migtd_wr_mask: num(13)?,
        export_mask: num(14)?,
        import_mask: num(15)?,
        special_rd_handling: special.iter().any(|s| s == "rd"),
        special_wr_handling: special.iter().any(|s| s == "wr"),
        attrs,
        mig_export: mig(18)?,
        mig_import: mig(19)?,
    })
}

fn ctx_index(ctx: MdContext) -> usize {
    ctx.code() as usize
}

impl Catalog {
    pub fn parse(text: &str) -> Result<Catalog, CatalogError> {
        let mut tables: [Vec<FieldEntry>; 3] = Default::default();
        let mut section: Option<MdContext> = None;
        let mut seen_version = false;
        for (i, raw_line) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("version") {
                if v.trim() != "1" {
                    return Err(CatalogError::Parse { line: n, msg: format!("unsupported version {}", v.trim()) });
                }
                seen_version = true;
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section =
                    Some(MdContext::parse(s).ok_or(CatalogError::Parse { line: n, msg: format!("bad section {s}") })?);
                continue;
            }
            let e = parse_line(n, line)?;
            if section.is_some_and(|s| s != e.ctx) {
                return Err(CatalogError::Parse { line: n, msg: format!("{} entry outside its section", e.name) });
            }
            tables[ctx_index(e.ctx)].push(e);
        }
        if !seen_version {
            return Err(CatalogError::Parse { line: 0, msg: "missing version line".into() });
        }
        let cat = Catalog { tables };
        cat.check_order()?;
        Ok(cat)
    }

    /// The shipped catalog.
    pub fn builtin() -> &'static Catalog {
        static CAT: OnceLock<Catalog> = OnceLock::new();
        CAT.get_or_init(|| Catalog::parse(BUILTIN).expect("builtin catalog parses"))
    }

    /// Field codes ascend within each class and no two entries overlap.
    fn check_order(&self) -> Result<(), CatalogError> {
        for ctx in [MdContext::Sys, MdContext::Td, MdContext::Vp] {
            let t = self.table(ctx);
            for (i, a) in t.iter().enumerate() {
                for b in &t[i + 1..] {
                    if a.class_code() == b.class_code() && b.first_code() < a.end_code() {
                        return Err(CatalogError::Order {
                            ctx,
                            msg: format!("{} does not follow {} in field-code order", b.name, a.name),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, ctx: MdContext) -> &[FieldEntry] {
        &self.tables[ctx_index(ctx)]
    }

    pub fn entry(&self, ctx: MdContext, idx: usize) -> Option<&FieldEntry> {
        self.table(ctx).get(idx)
    }

    pub fn by_name(&self, ctx: MdContext, name: &str) -> Option<&FieldEntry> {
        self.table(ctx).iter().find(|e| e.name == name)
    }

    pub fn index_of(&self, ctx: MdContext, name: &str) -> Option<usize> {
        self.table(ctx).iter().position(|e| e.name == name)
    }

    /// Exact match on (class code, field code) within the context.
    pub fn find_entry(&self, ctx: MdContext, id: MdFieldId) -> Option<&FieldEntry> {
        self.locate(ctx, id).map(|(p, _)| &self.table(ctx)[p.entry])
    }

    /// Table position and element index of a field id.
    pub fn locate(&self, ctx: MdContext, id: MdFieldId) -> Option<(FieldPos, u32)> {
        self.table(ctx).iter().enumerate().find_map(|(i, e)| {
            e.locate_code(id.class_code, id.field_code).map(|(f, el)| (FieldPos { entry: i, field: f }, el))
        })
    }

    /// Ordered successor entry within the context's table.
    pub fn next_entry(&self, ctx: MdContext, id: MdFieldId) -> Option<&FieldEntry> {
        let (p, _) = self.locate(ctx, id)?;
        self.table(ctx).get(p.entry + 1)
    }

    /// Advances a field position by one field, crossing entries.
    pub fn next_pos(&self, ctx: MdContext, p: FieldPos) -> Option<FieldPos> {
        let t = self.table(ctx);
        let e = t.get(p.entry)?;
        if p.field + 1 < e.num_of_fields {
            Some(FieldPos { entry: p.entry, field: p.field + 1 })
        } else if p.entry + 1 < t.len() {
            Some(FieldPos { entry: p.entry + 1, field: 0 })
        } else {
            None
        }
    }

    pub fn field_id_at(&self, ctx: MdContext, p: FieldPos) -> Option<MdFieldId> {
        self.table(ctx).get(p.entry).map(|e| e.element_id(p.field, 0))
    }

    /// Entries that an import of this phase must write regardless of what
    /// else was written (the MBO entries are added only when present).
    pub fn required_set(&self, ctx: MdContext, phase: Phase) -> Vec<&FieldEntry> {
        self.table(ctx).iter().filter(|e| e.required_on_import(phase, false)).collect()
    }
}

// ---------------------------------------------------------------------
// CPUID lookup

pub const MAX_NUM_CPUID_LOOKUP: usize = 79;
pub const CPUID_CONFIG_NULL_IDX: u32 = u32::MAX;
pub const CPUID_SUBLEAF_NA: u32 = 0xffff_ffff;
/// TD-scope class holding CPUID values.
pub const CPUID_CLASS_CODE: u8 = 0x34;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpuidRegs {
    pub eax: u32,
    pub ebx: u32,
    pub ecx: u32,
    pub edx: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpuidLookupEntry {
    pub leaf: u32,
    pub subleaf: u32,
    pub valid_entry: bool,
    pub fixed1: CpuidRegs,
    pub fixed0_or_dynamic: CpuidRegs,
    pub config_index: u32,
}

pub fn cpuid_lookup() -> &'static [CpuidLookupEntry; MAX_NUM_CPUID_LOOKUP] {
    static TABLE: OnceLock<[CpuidLookupEntry; MAX_NUM_CPUID_LOOKUP]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let zero = CpuidRegs { eax: 0, ebx: 0, ecx: 0, edx: 0 };
        std::array::from_fn(|i| {
            if i == MAX_NUM_CPUID_LOOKUP - 1 {
                CpuidLookupEntry {
                    leaf: 0x8000_0002,
                    subleaf: CPUID_SUBLEAF_NA,
                    valid_entry: true,
                    fixed1: CpuidRegs { eax: 0x6574_6e49, ebx: 0x5820_4454, ecx: 0x6c20_2020, edx: 0 },
                    fixed0_or_dynamic: CpuidRegs {
                        eax: 0x9a8b_91b6,
                        ebx: 0xa7df_bbab,
                        ecx: 0x93df_dfdf,
                        edx: 0xffff_ffff,
                    },
                    config_index: CPUID_CONFIG_NULL_IDX,
                }
            } else {
                // Synthetic placeholders; odd slots are valid.
                CpuidLookupEntry {
                    leaf: i as u32,
                    subleaf: CPUID_SUBLEAF_NA,
                    valid_entry: i % 2 == 1,
                    fixed1: zero,
                    fixed0_or_dynamic: zero,
                    config_index: i as u32,
                }
            }
        })
    })
}

/// CPUID field code: bits 6:0 leaf[6:0], bit 7 leaf[31], bits 14:8
/// subleaf[6:0], bit 15 set when there is no subleaf.
pub fn cpuid_field_id(leaf: u32, subleaf: u32) -> MdFieldId {
    let mut code = (leaf & 0x7F) | ((leaf >> 31) << 7);
    if subleaf == CPUID_SUBLEAF_NA {
        code |= 1 << 15;
    } else {
        code |= (subleaf & 0x7F) << 8;
    }
    MdFieldId::new(MdContext::Td, CPUID_CLASS_CODE, code)
}

pub fn cpuid_leaf_subleaf(id: MdFieldId) -> (u32, u32) {
    let c = id.field_code;
    let leaf = (c & 0x7F) | (((c >> 7) & 1) << 31);
    let subleaf = if c & (1 << 15) != 0 { CPUID_SUBLEAF_NA } else { (c >> 8) & 0x7F };
    (leaf, subleaf)
}

pub fn get_cpuid_lookup_entry(leaf: u32, subleaf: u32) -> Option<usize> {
    cpuid_lookup().iter().position(|e| e.leaf == leaf && e.subleaf == subleaf)
}

/// Log of indices the CPUID search dereferenced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexLog {
    pub reads: Vec<usize>,
}

impl IndexLog {
    pub fn oob(&self) -> Vec<usize> {
        self.reads.iter().copied().filter(|&i| i >= MAX_NUM_CPUID_LOOKUP).collect()
    }
}

/// Reads `valid_entry` at an index. Past the array the adjacent memory is
/// modeled as nonzero, so the flag reads as set.
fn probe_valid(index: usize, log: &mut IndexLog) -> bool {
    log.reads.push(index);
    cpuid_lookup().get(index).map(|e| e.valid_entry).unwrap_or(true)
}

/// Next valid CPUID entry after the one named by `field_id`, or
/// `MD_FIELD_ID_NA`.
pub fn next_cpuid_entry(field_id: MdFieldId, vulnerable: bool, log: &mut IndexLog) -> u64 {
    let (leaf, subleaf) = cpuid_leaf_subleaf(field_id);
    let Some(mut index) = get_cpuid_lookup_entry(leaf, subleaf) else {
        return MD_FIELD_ID_NA;
    };
    if vulnerable {
        loop {
            index += 1;
            if probe_valid(index, log) {
                break;
            }
        }
        if index >= MAX_NUM_CPUID_LOOKUP {
            return MD_FIELD_ID_NA;
        }
    } else {
        loop {
            index += 1;
            if index >= MAX_NUM_CPUID_LOOKUP {
                return MD_FIELD_ID_NA;
            }
            if probe_valid(index, log) {
                break;
            }
        }
    }
    let e = &cpuid_lookup()[index];
    cpuid_field_id(e.leaf, e.subleaf).raw()
}
