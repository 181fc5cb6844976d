// SPDX-License-Identifier: Apache-2.0
//! Metadata list import (write) and export (dump) algorithms.
//!
//! The write side runs over a [`ParseArena`] so every read is logged. The
//! vulnerable and fixed variants differ only where a [`ParseMode`] toggle
//! says so.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::arena::ParseArena;
use crate::catalog::{Catalog, FieldEntry, FieldPos, Phase};
use crate::field_id::{MdContext, MdFieldId, MAX_FIELDS_IN_SEQUENCE};
use crate::md_list::{ListError, MdList, MdListHeader, MdSequence, MD_LIST_HEADER_SIZE, MD_LIST_SIZE};
use crate::mode::{ParseMode, Variant};
use crate::status::StatusWord;

/// One field handed to a sink during import.
#[derive(Debug)]
pub struct FieldWrite<'a> {
    pub ctx: MdContext,
    pub entry: &'a FieldEntry,
    pub pos: FieldPos,
    pub values: &'a [u64],
    pub wr_mask: u64,
    pub write_mask_valid: bool,
    pub phase: Phase,
}

pub trait MetadataSink {
    fn write_field(&mut self, w: &FieldWrite<'_>) -> Result<(), StatusWord>;
}

pub trait MetadataSource {
    /// Current element values of one field, unmasked.
    fn read_field(&self, ctx: MdContext, entry: &FieldEntry, pos: FieldPos) -> Vec<u64>;
}

/// What an import has written so far. Lives in the stream context so it
/// survives interruption.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportProgress {
    pub written: BTreeSet<(MdContext, FieldPos)>,
    pub classes_present: BTreeSet<(MdContext, u8)>,
    /// Required fields skipped through a zero write mask (recorded in
    /// fixed mode only).
    pub skipped: Vec<(MdContext, FieldPos)>,
}

impl ImportProgress {
    fn mark_written(&mut self, ctx: MdContext, pos: FieldPos, class: u8) {
        self.written.insert((ctx, pos));
        self.classes_present.insert((ctx, class));
    }

    pub fn class_present(&self, ctx: MdContext, class: u8) -> bool {
        self.classes_present.contains(&(ctx, class))
    }

    fn required(&self, ctx: MdContext, e: &FieldEntry, phase: Phase) -> bool {
        e.required_on_import(phase, self.class_present(ctx, e.class_code()))
    }

    /// First required field not written, if any.
    pub fn missing_required(&self, catalog: &Catalog, ctx: MdContext, phase: Phase) -> Option<MdFieldId> {
        for (i, e) in catalog.table(ctx).iter().enumerate() {
            if !self.required(ctx, e, phase) {
                continue;
            }
            for f in 0..e.num_of_fields {
                if !self.written.contains(&(ctx, FieldPos { entry: i, field: f })) {
                    return Some(e.element_id(f, 0));
                }
            }
        }
        None
    }
}

/// Size arithmetic as the parser saw it, for the wrapping oracle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SizeTrace {
    /// Remaining list bytes: initial value, then after each sequence.
    pub list_remaining: Vec<u16>,
    /// Per sequence: the 32-bit buffer size after each deduction.
    pub seq_buff: Vec<Vec<u32>>,
    pub elements_read: Vec<u32>,
}

#[derive(Clone, Copy, Debug)]
pub struct ListContext<'a> {
    pub catalog: &'a Catalog,
    pub ctx: MdContext,
    pub phase: Phase,
    pub mode: ParseMode,
    pub skip_non_writable: bool,
    pub is_last_list: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListOutcome {
    pub status: StatusWord,
    /// Expected position for the next sequence; `None` once the table is
    /// exhausted.
    pub next: Option<FieldPos>,
    pub ext: [u64; 2],
    pub trace: SizeTrace,
}

struct SeqResult {
    status: StatusWord,
    elements_read: u32,
    next: Option<FieldPos>,
    ext: [u64; 2],
}

const L2_OPERAND: u16 = 0xFFFF;

/// Whether a sequence may start at `header` when `expected` is next: the
/// same position, or later with only skippable entries in between.
fn order_ok(lc: &ListContext, progress: &ImportProgress, expected: Option<FieldPos>, header: FieldPos) -> bool {
    let Some(exp) = expected else { return false };
    if header < exp {
        return false;
    }
    if header == exp {
        return true;
    }
    let t = lc.catalog.table(lc.ctx);
    let req = |i: usize| progress.required(lc.ctx, &t[i], lc.phase);
    if header.entry == exp.entry {
        return !req(exp.entry);
    }
    if req(exp.entry) {
        return false;
    }
    if (exp.entry + 1..header.entry).any(req) {
        return false;
    }
    header.field == 0 || !req(header.entry)
}

/// First required position at or after `from`, if any.
fn first_required_from(lc: &ListContext, progress: &ImportProgress, from: Option<FieldPos>) -> Option<MdFieldId> {
    let from = from?;
    let t = lc.catalog.table(lc.ctx);
    (from.entry..t.len()).find_map(|i| {
        let e = &t[i];
        if progress.required(lc.ctx, e, lc.phase) {
            let f = if i == from.entry { from.field } else { 0 };
            Some(e.element_id(f, 0))
        } else {
            None
        }
    })
}

/// Imports one decrypted list held at offset 0 of the arena.
pub fn write_list(
    lc: &ListContext,
    expected: Option<FieldPos>,
    arena: &mut ParseArena,
    sink: &mut dyn MetadataSink,
    progress: &mut ImportProgress,
) -> ListOutcome {
    let mut out = ListOutcome { status: StatusWord::SUCCESS, next: expected, ext: [0; 2], trace: SizeTrace::default() };
    let hdr = MdListHeader::from_u64(arena.read_u64(0));
    if lc.mode.list_header == Variant::Fixed
        && (hdr.list_buff_size < MD_LIST_HEADER_SIZE as u16 || hdr.list_buff_size as usize > MD_LIST_SIZE)
    {
        out.status = StatusWord::METADATA_LIST_OVERFLOW.with_l2(L2_OPERAND, 0);
        return out;
    }
    let mut remaining: u16 = hdr.list_buff_size.wrapping_sub(MD_LIST_HEADER_SIZE as u16);
    out.trace.list_remaining.push(remaining);
    let mut cursor = MD_LIST_HEADER_SIZE;
    let mut exp = expected;
    for i in 0..hdr.num_sequences {
        if remaining < 8 {
            out.status = StatusWord::METADATA_LIST_OVERFLOW.with_l2(L2_OPERAND, i);
            return out;
        }
        let raw = arena.read_u64(cursor);
        let h = MdFieldId::decode(raw);
        let fail = |out: &mut ListOutcome| {
            out.ext[0] = raw;
            out.status = StatusWord::METADATA_FIELD_ID_INCORRECT.with_l2(L2_OPERAND, i);
        };
        if h.context_code != lc.ctx.code() {
            fail(&mut out);
            return out;
        }
        let located = lc.catalog.locate(lc.ctx, h);
        let Some((pos, 0)) = located else {
            fail(&mut out);
            return out;
        };
        if h.has_reserved_bits() || !order_ok(lc, progress, exp, pos) {
            fail(&mut out);
            return out;
        }
        let mut buff_trace = Vec::new();
        let r = write_sequence(lc, cursor, remaining as u32, h, raw, pos, arena, sink, progress, &mut buff_trace);
        out.trace.seq_buff.push(buff_trace);
        if r.status != StatusWord::SUCCESS {
            out.status = r.status;
            out.ext = r.ext;
            return out;
        }
        out.trace.elements_read.push(r.elements_read);
        let consumed = 8u32.wrapping_add(r.elements_read.wrapping_mul(8));
        remaining = remaining.wrapping_sub(consumed as u16);
        out.trace.list_remaining.push(remaining);
        cursor += consumed as usize;
        exp = r.next;
        out.next = r.next;
    }
    if lc.is_last_list {
        if let Some(missing) = first_required_from(lc, progress, exp) {
            out.ext[0] = missing.raw();
            out.status = StatusWord::METADATA_FIELD_ID_INCORRECT.with_l2(L2_OPERAND, hdr.num_sequences);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn write_sequence(
    lc: &ListContext,
    cursor: usize,
    remaining: u32,
    h: MdFieldId,
    header_raw: u64,
    start: FieldPos,
    arena: &mut ParseArena,
    sink: &mut dyn MetadataSink,
    progress: &mut ImportProgress,
    trace: &mut Vec<u32>,
) -> SeqResult {
    let table = lc.catalog.table(lc.ctx);
    let mut res = SeqResult { status: StatusWord::SUCCESS, elements_read: 0, next: Some(start), ext: [0; 2] };
    let overflow = |res: &mut SeqResult, id: MdFieldId| {
        res.ext[0] = id.raw();
        res.status = StatusWord::METADATA_LIST_OVERFLOW.with_l2(L2_OPERAND, 0);
    };
    if remaining < 16 {
        overflow(&mut res, table[start.entry].element_id(start.field, 0));
        return res;
    }
    let num_fields = h.num_fields();
    let mut buff = remaining - 8;
    trace.push(buff);
    let elems = cursor + 8;
    let mut idx: u32 = 0;
    let hoisted = lc.mode.write_mask == Variant::Fixed;
    let mut wr_mask = u64::MAX;
    if hoisted && h.write_mask_valid {
        wr_mask = arena.read_u64(elems);
        idx = 1;
        buff -= 8;
        trace.push(buff);
    }
    let mut pos = Some(start);
    for i in 0..num_fields {
        let p = pos.expect("class check keeps the iterator inside the table");
        let entry = &table[p.entry];
        if !hoisted && h.write_mask_valid {
            wr_mask = arena.read_u64(elems);
            idx = idx.wrapping_add(1);
            buff = buff.wrapping_sub(8);
            trace.push(buff);
        }
        let need = entry.num_of_elem as u64 * 8;
        let fid = entry.element_id(p.field, 0);
        if (buff as u64) < need {
            overflow(&mut res, fid);
            return res;
        }
        let values: Vec<u64> =
            (0..entry.num_of_elem).map(|k| arena.read_u64(elems + 8 * (idx as usize + k as usize))).collect();
        let in_phase = entry.imported_in(lc.phase);
        if !lc.skip_non_writable || in_phase {
            let w = FieldWrite {
                ctx: lc.ctx,
                entry,
                pos: p,
                values: &values,
                wr_mask,
                write_mask_valid: h.write_mask_valid,
                phase: lc.phase,
            };
            match sink.write_field(&w) {
                Ok(()) => progress.mark_written(lc.ctx, p, entry.class_code()),
                Err(s) if s.base() == StatusWord::METADATA_FIELD_NOT_WRITABLE && lc.skip_non_writable => {
                    if lc.mode.required_skip == Variant::Fixed && progress.required(lc.ctx, entry, lc.phase) {
                        progress.skipped.push((lc.ctx, p));
                    }
                }
                Err(s) => {
                    res.ext[0] = fid.raw();
                    res.status = s;
                    return res;
                }
            }
        }
        buff -= need as u32;
        trace.push(buff);
        idx = idx.wrapping_add(entry.num_of_elem);
        let nxt = lc.catalog.next_pos(lc.ctx, p);
        if i + 1 < num_fields && nxt.is_none_or(|n| table[n.entry].class_code() != entry.class_code()) {
            res.ext[0] = header_raw;
            res.status = StatusWord::METADATA_FIELD_ID_INCORRECT;
            return res;
        }
        pos = nxt;
    }
    res.elements_read = idx;
    res.next = pos;
    res
}

// ---------------------------------------------------------------------
// Export side

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DumpError {
    #[error("field {0} is not exportable")]
    NotExportable(String),
    #[error("no field at table position {0:?}")]
    NoSuchField(FieldPos),
    #[error("selection does not fit in one list")]
    TooLarge,
    #[error(transparent)]
    List(#[from] ListError),
}

/// One field's values as they go onto the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldRecord {
    pub pos: FieldPos,
    pub values: Vec<u64>,
    /// Emit as a single-field sequence carrying this write mask.
    pub wr_mask: Option<u64>,
}

fn record(
    catalog: &Catalog,
    ctx: MdContext,
    pos: FieldPos,
    src: &dyn MetadataSource,
) -> Result<FieldRecord, DumpError> {
    let e = catalog.entry(ctx, pos.entry).filter(|e| pos.field < e.num_of_fields).ok_or(DumpError::NoSuchField(pos))?;
    if e.export_mask == 0 || e.mig_export.phase().is_none() {
        return Err(DumpError::NotExportable(e.name.clone()));
    }
    let values = src.read_field(ctx, e, pos).into_iter().map(|v| v & e.export_mask).collect();
    Ok(FieldRecord { pos, values, wr_mask: None })
}

/// Every field exported in a phase, in table order.
pub fn export_records(
    catalog: &Catalog,
    ctx: MdContext,
    phase: Phase,
    src: &dyn MetadataSource,
) -> Result<Vec<FieldRecord>, DumpError> {
    let mut out = Vec::new();
    for (i, e) in catalog.table(ctx).iter().enumerate() {
        if !e.exported_in(phase) {
            continue;
        }
        for f in 0..e.num_of_fields {
            out.push(record(catalog, ctx, FieldPos { entry: i, field: f }, src)?);
        }
    }
    Ok(out)
}

pub fn select_records(
    catalog: &Catalog,
    ctx: MdContext,
    selection: &[FieldPos],
    src: &dyn MetadataSource,
) -> Result<Vec<FieldRecord>, DumpError> {
    let mut sel = selection.to_vec();
    sel.sort();
    sel.dedup();
    sel.into_iter().map(|p| record(catalog, ctx, p, src)).collect()
}

struct OpenSeq {
    header: MdFieldId,
    elements: Vec<u64>,
    count: u32,
    last: FieldPos,
    class: u8,
    masked: bool,
}

impl OpenSeq {
    fn close(self) -> MdSequence {
        let mut header = self.header;
        header.last_field_in_sequence = (self.count - 1) as u16;
        MdSequence { header, elements: self.elements }
    }
}

/// Packs records into as few lists as possible. Consecutive fields of one
/// class share a sequence; a sequence breaks at list boundaries, at gaps,
/// and around masked records.
pub fn pack_lists(catalog: &Catalog, ctx: MdContext, records: &[FieldRecord]) -> Vec<MdList> {
    let table = catalog.table(ctx);
    let mut lists = Vec::new();
    let mut seqs: Vec<MdSequence> = Vec::new();
    let mut used = MD_LIST_HEADER_SIZE;
    let mut cur: Option<OpenSeq> = None;
    for rec in records {
        let e = &table[rec.pos.entry];
        let size = 8 * e.num_of_elem as usize;
        let extend = match &cur {
            Some(c) => {
                rec.wr_mask.is_none()
                    && !c.masked
                    && c.class == e.class_code()
                    && c.count < MAX_FIELDS_IN_SEQUENCE
                    && catalog.next_pos(ctx, c.last) == Some(rec.pos)
                    && used + size <= MD_LIST_SIZE
            }
            None => false,
        };
        if extend {
            let c = cur.as_mut().expect("checked above");
            c.elements.extend_from_slice(&rec.values);
            c.count += 1;
            c.last = rec.pos;
            used += size;
            continue;
        }
        if let Some(c) = cur.take() {
            seqs.push(c.close());
        }
        let seq_size = 8 + size + if rec.wr_mask.is_some() { 8 } else { 0 };
        if used + seq_size > MD_LIST_SIZE {
            lists.push(MdList::from_sequences(&seqs).expect("packer respects list capacity"));
            seqs.clear();
            used = MD_LIST_HEADER_SIZE;
        }
        let mut header = e.element_id(rec.pos.field, 0);
        let mut elements = Vec::new();
        if let Some(m) = rec.wr_mask {
            header.write_mask_valid = true;
            elements.push(m);
        }
        elements.extend_from_slice(&rec.values);
        used += seq_size;
        cur = Some(OpenSeq {
            header,
            elements,
            count: 1,
            last: rec.pos,
            class: e.class_code(),
            masked: rec.wr_mask.is_some(),
        });
    }
    if let Some(c) = cur.take() {
        seqs.push(c.close());
    }
    if !seqs.is_empty() || lists.is_empty() {
        lists.push(MdList::from_sequences(&seqs).expect("packer respects list capacity"));
    }
    lists
}

/// Serializes a selection of fields into one canonical list.
pub fn dump_list(
    catalog: &Catalog,
    ctx: MdContext,
    selection: &[FieldPos],
    src: &dyn MetadataSource,
) -> Result<MdList, DumpError> {
    let recs = select_records(catalog, ctx, selection, src)?;
    let mut lists = pack_lists(catalog, ctx, &recs);
    if lists.len() != 1 {
        return Err(DumpError::TooLarge);
    }
    Ok(lists.remove(0))
}

// ---------------------------------------------------------------------
// Bounded parser for inspection tools

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedField {
    pub pos: FieldPos,
    pub name: String,
    pub id: MdFieldId,
    pub num_of_fields: u32,
    pub num_of_elem: u32,
    pub values: Vec<u64>,
    /// Byte offset of each value inside the list.
    pub value_offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedSequence {
    pub offset: usize,
    pub header: MdFieldId,
    pub wr_mask: Option<u64>,
    pub fields: Vec<ParsedField>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("list_buff_size {0} outside 8..=4096")]
    BadSize(u16),
    #[error("sequence {index} at offset {offset} runs past list_buff_size")]
    Overflow { index: usize, offset: usize },
    #[error("sequence {index}: unknown field id {raw:#018x}")]
    UnknownField { index: usize, raw: u64 },
    #[error("sequence {index}: field id {raw:#018x} crosses a class boundary")]
    ClassBoundary { index: usize, raw: u64 },
}

/// Walks a list with the fixed-layout rules, never reading past
/// `list_buff_size`.
pub fn parse_list(catalog: &Catalog, ctx: MdContext, list: &MdList) -> Result<Vec<ParsedSequence>, ParseError> {
    let size = list.header.list_buff_size as usize;
    if !(MD_LIST_HEADER_SIZE..=MD_LIST_SIZE).contains(&size) {
        return Err(ParseError::BadSize(list.header.list_buff_size));
    }
    let table = catalog.table(ctx);
    let word = |off: usize| list.word_at(off).unwrap_or(0);
    let mut out = Vec::new();
    let mut at = MD_LIST_HEADER_SIZE;
    for index in 0..list.header.num_sequences as usize {
        if at + 8 > size {
            return Err(ParseError::Overflow { index, offset: at });
        }
        let raw = word(at);
        let h = MdFieldId::decode(raw);
        let Some((mut pos, 0)) = catalog.locate(ctx, h).filter(|_| h.context_code == ctx.code()) else {
            return Err(ParseError::UnknownField { index, raw });
        };
        let mut off = at + 8;
        let wr_mask = if h.write_mask_valid {
            if off + 8 > size {
                return Err(ParseError::Overflow { index, offset: at });
            }
            off += 8;
            Some(word(off - 8))
        } else {
            None
        };
        let mut fields = Vec::new();
        for i in 0..h.num_fields() {
            let e = &table[pos.entry];
            let n = e.num_of_elem as usize;
            if off + 8 * n > size {
                return Err(ParseError::Overflow { index, offset: at });
            }
            let value_offsets: Vec<usize> = (0..n).map(|k| off + 8 * k).collect();
            fields.push(ParsedField {
                pos,
                name: e.name.clone(),
                id: e.element_id(pos.field, 0),
                num_of_fields: e.num_of_fields,
                num_of_elem: e.num_of_elem,
                values: value_offsets.iter().map(|&o| word(o)).collect(),
                value_offsets,
            });
            off += 8 * n;
            if i + 1 < h.num_fields() {
                match catalog.next_pos(ctx, pos) {
                    Some(n) if table[n.entry].class_code() == e.class_code() => pos = n,
                    _ => return Err(ParseError::ClassBoundary { index, raw }),
                }
            }
        }
        out.push(ParsedSequence { offset: at, header: h, wr_mask, fields });
        at = off;
    }
    Ok(out)
}
