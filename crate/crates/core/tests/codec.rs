// SPDX-License-Identifier: Apache-2.0
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdmig_core::arena::ParseArena;
use tdmig_core::catalog::{
    cpuid_field_id, cpuid_lookup, next_cpuid_entry, Catalog, FieldPos, IndexLog, MigClass, Phase, MAX_NUM_CPUID_LOOKUP,
};
use tdmig_core::codec::{
    dump_list, write_list, FieldWrite, ImportProgress, ListContext, ListOutcome, MetadataSink, MetadataSource,
};
use tdmig_core::craft::{self, V2Option, LEAD_FIELDS, SECOND_SEQ_OFFSET};
use tdmig_core::field_id::{decode_field_id, encode_field_id, MdContext, MdFieldId, MD_FIELD_ID_NA};
use tdmig_core::md_list::{MdList, MdListHeader, MdSequence, MD_LIST_SIZE, MD_SEQUENCE_MAX_SIZE};
use tdmig_core::mode::ParseMode;
use tdmig_core::status::StatusWord;

/// Accepts everything and remembers what it was given.
#[derive(Default)]
struct Recorder {
    writes: Vec<(FieldPos, Vec<u64>)>,
}

impl MetadataSink for Recorder {
    fn write_field(&mut self, w: &FieldWrite<'_>) -> Result<(), StatusWord> {
        self.writes.push((w.pos, w.values.to_vec()));
        Ok(())
    }
}

fn catalog() -> &'static Catalog {
    Catalog::builtin()
}

fn run(ctx: MdContext, mode: ParseMode, list: &MdList) -> (ListOutcome, ParseArena, Recorder) {
    let lc = ListContext {
        catalog: catalog(),
        ctx,
        phase: if ctx == MdContext::Vp { Phase::Mutable } else { Phase::Immutable },
        mode,
        skip_non_writable: true,
        is_last_list: false,
    };
    let mut arena = ParseArena::new();
    arena.load_list(&list.to_bytes());
    let mut sink = Recorder::default();
    let mut progress = ImportProgress::default();
    let out = write_list(&lc, Some(FieldPos { entry: 0, field: 0 }), &mut arena, &mut sink, &mut progress);
    (out, arena, sink)
}

fn id(ctx: MdContext, name: &str) -> MdFieldId {
    catalog().by_name(ctx, name).unwrap_or_else(|| panic!("{name} in catalog")).field_id
}

// --- field ids ---------------------------------------------------------

#[test]
fn field_id_encodings() {
    assert_eq!(id(MdContext::Td, "ATTRIBUTES").raw(), 0x1110_0003_0000_0000);
    assert_eq!(id(MdContext::Vp, "XBUFF").raw(), 0x1220_0003_0000_0000);
    assert_eq!(encode_field_id(&MdFieldId::default()), Ok(0));
    let x2 = decode_field_id(0x9C10_0002_0000_0000);
    let e = catalog().by_name(MdContext::Td, "X2APIC_IDS").unwrap();
    assert_eq!((x2.class_code, x2.field_code), (e.field_id.class_code, e.field_id.field_code));
    assert_eq!((x2.class_code, x2.context_code, x2.element_size_code), (0x1c, 1, 2));
    assert!(decode_field_id(1 << 51).write_mask_valid);
    assert!(!decode_field_id(1 << 50).write_mask_valid);
}

#[test]
fn encode_rejects_oversized_subfields() {
    let mut f = MdFieldId::new(MdContext::Td, 0x40, 0);
    assert_eq!(f.encode().unwrap_err().field, "class_code");
    f.class_code = 1;
    f.field_code = 1 << 24;
    assert_eq!(f.encode().unwrap_err().field, "field_code");
    f.field_code = 0;
    f.last_field_in_sequence = 512;
    assert_eq!(f.encode().unwrap_err().field, "last_field_in_sequence");
}

fn valid_field_id() -> impl Strategy<Value = MdFieldId> {
    (0u32..1 << 24, 0u8..4, 0u8..16, 0u16..512, any::<bool>(), any::<bool>(), 0u8..8, 0u8..64, any::<bool>()).prop_map(
        |(field_code, es, le, lf, inc, wm, ctx, class, ign)| MdFieldId {
            field_code,
            element_size_code: es,
            last_element_in_field: le,
            last_field_in_sequence: lf,
            inc_size: inc,
            write_mask_valid: wm,
            context_code: ctx,
            class_code: class,
            ignored: ign,
            reserved_bits: 0,
        },
    )
}

/// Bits 31:24, 49:47, 55 and 62.
const RESERVED: u64 = (0xFF << 24) | (0b111 << 47) | (1 << 55) | (1 << 62);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(f in valid_field_id()) {
        let raw = f.encode().unwrap();
        prop_assert_eq!(raw & RESERVED, 0);
        prop_assert_eq!(decode_field_id(raw), f);
        prop_assert!((1..=512).contains(&f.num_fields()));
    }

    #[test]
    fn encode_inverts_decode(r in any::<u64>()) {
        let r = r & !RESERVED;
        let d = decode_field_id(r);
        prop_assert!(!d.has_reserved_bits());
        prop_assert_eq!(encode_field_id(&d), Ok(r));
    }

    #[test]
    fn reserved_bits_are_surfaced(r in any::<u64>()) {
        prop_assert_eq!(decode_field_id(r).has_reserved_bits(), r & RESERVED != 0);
    }
}

// --- lists ---------------------------------------------------------------

#[test]
fn list_layout_sizes() {
    let h = MdListHeader { list_buff_size: 0x1234, num_sequences: 7, reserved: 0 };
    assert_eq!(h.to_bytes().len(), 8);
    assert_eq!(MdListHeader::from_u64(h.to_u64()), h);
    assert_eq!(MdList::empty().to_bytes().len(), MD_LIST_SIZE);
    assert_eq!(MD_SEQUENCE_MAX_SIZE, 4104);
    let l = craft::v2_first_list(catalog(), V2Option::Exfil);
    assert_eq!(MdList::from_bytes(&l.to_bytes()).unwrap().to_bytes(), l.to_bytes());
}

#[test]
fn empty_list_writes_nothing() {
    let l = MdList::empty();
    assert_eq!(l.header.list_buff_size, 8);
    for mode in [ParseMode::vulnerable(), ParseMode::fixed()] {
        let (out, arena, sink) = run(MdContext::Td, mode, &l);
        assert_eq!(out.status, StatusWord::SUCCESS);
        assert!(sink.writes.is_empty());
        assert_eq!(arena.log().len(), 1);
    }
}

#[test]
fn single_field_exact_fit() {
    let e = catalog().by_name(MdContext::Td, "TD_UUID").unwrap();
    let seq = MdSequence { header: e.element_id(0, 0), elements: vec![1, 2, 3, 4] };
    let l = MdList::from_sequences(&[seq]).unwrap();
    assert_eq!(l.header.list_buff_size, 8 + 8 + 32);
    for mode in [ParseMode::vulnerable(), ParseMode::fixed()] {
        let (out, arena, sink) = run(MdContext::Td, mode, &l);
        assert_eq!(out.status, StatusWord::SUCCESS);
        assert_eq!(out.trace.elements_read, vec![e.num_of_elem]);
        assert_eq!(sink.writes, vec![(FieldPos { entry: 0, field: 0 }, vec![1, 2, 3, 4])]);
        assert_eq!(arena.oob_count(), 0);
    }
}

#[test]
fn short_header_wraps_remaining_size() {
    for size in 0u16..8 {
        let l = craft::short_header_list(catalog(), size);
        let (out, arena, _) = run(MdContext::Vp, ParseMode::vulnerable(), &l);
        let want = (size as u32 + 0x1_0000 - 8) as u16;
        assert_eq!(out.trace.list_remaining[0], want, "size {size}");
        assert!(arena.oob_count() > 0, "size {size}");
        let (out, arena, sink) = run(MdContext::Vp, ParseMode::fixed(), &l);
        assert_eq!(out.status.base(), StatusWord::METADATA_LIST_OVERFLOW);
        assert_eq!(arena.log().len(), 1, "only the list header is read");
        assert!(sink.writes.is_empty());
    }
    assert_eq!(
        run(MdContext::Vp, ParseMode::vulnerable(), &craft::short_header_list(catalog(), 0)).0.trace.list_remaining[0],
        65528
    );
}

/// Crafted list whose second sequence (at the end of the list) declares
/// `n` masked XBUFF fields.
fn underflow_list(n: u32) -> MdList {
    let mut l = craft::v2_first_list(catalog(), V2Option::CopyIntoState);
    let mut h = MdFieldId::decode(l.word_at(SECOND_SEQ_OFFSET).unwrap());
    h.last_field_in_sequence = (n - 1) as u16;
    l.set_word(SECOND_SEQ_OFFSET, h.raw());
    l
}

/// The 32-bit buffer-size sequence the vulnerable loop must produce for
/// `n` masked one-element fields starting from `remaining`.
fn buff_oracle(remaining: u32, n: u32) -> Vec<u32> {
    let mut b = remaining - 8;
    let mut v = vec![b];
    for _ in 0..n {
        b = b.wrapping_sub(8);
        v.push(b);
        b = b.wrapping_sub(8);
        v.push(b);
    }
    v
}

#[test]
fn mask_underflow_span_is_8192_at_most() {
    let mut max_span = 0;
    for n in 1..=512u32 {
        let (out, arena, sink) = run(MdContext::Vp, ParseMode::vulnerable(), &underflow_list(n));
        assert_eq!(out.status, StatusWord::SUCCESS, "n {n}");
        let walk_start = SECOND_SEQ_OFFSET + 8;
        let span = arena.max_read_end().unwrap() - walk_start;
        assert_eq!(span, 16 * n as usize, "n {n}");
        assert_eq!(out.trace.elements_read[1] as usize * 8, span);
        let remaining = out.trace.list_remaining[1] as u32;
        assert_eq!(out.trace.seq_buff[1], buff_oracle(remaining, n), "n {n}");
        assert_eq!(sink.writes.len() as u32, LEAD_FIELDS + n);
        max_span = max_span.max(span);

        let (out, arena, _) = run(MdContext::Vp, ParseMode::fixed(), &underflow_list(n));
        if n > 1 {
            assert_eq!(out.status.base(), StatusWord::METADATA_LIST_OVERFLOW, "n {n}");
        }
        assert_eq!(arena.oob_count(), 0, "n {n}");
    }
    assert_eq!(max_span, 8192);
}

#[test]
fn out_of_list_header_is_echoed_in_ext() {
    let l = craft::v2_first_list(catalog(), V2Option::Exfil);
    let lc = ListContext {
        catalog: catalog(),
        ctx: MdContext::Vp,
        phase: Phase::Mutable,
        mode: ParseMode::vulnerable(),
        skip_non_writable: true,
        is_last_list: false,
    };
    let mut arena = ParseArena::new();
    arena.plant(craft::V2_TRAILING_HEADER, craft::V2_SENTINEL);
    arena.load_list(&l.to_bytes());
    let mut progress = ImportProgress::default();
    let out =
        write_list(&lc, Some(FieldPos { entry: 0, field: 0 }), &mut arena, &mut Recorder::default(), &mut progress);
    assert_eq!(out.status.base(), StatusWord::METADATA_FIELD_ID_INCORRECT);
    assert_eq!(out.status.0 & 0xFFFF_FFFF, 0xFFFF_0002);
    assert_eq!(out.ext[0], craft::V2_SENTINEL);
}

/// Random list body biased towards XBUFF sequence headers, expanded from
/// a seed so each case is cheap to generate.
fn random_list() -> impl Strategy<Value = MdList> {
    let xb = catalog().by_name(MdContext::Vp, "XBUFF").unwrap().field_id.raw();
    (any::<u16>(), 0u16..8, any::<u64>()).prop_map(move |(size, seqs, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<u64> = (0..511)
            .map(|_| match rng.random_range(0..9) {
                0..4 => rng.random(),
                4..6 => rng.random_range(0..4),
                _ => {
                    let (f, n, m) = (rng.random_range(0..1536u64), rng.random_range(0..512u64), rng.random_bool(0.5));
                    xb | f | (n << 38) | ((m as u64) << 51)
                }
            })
            .collect();
        MdList::from_words(MdListHeader { list_buff_size: size, num_sequences: seqs, reserved: 0 }, &words)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn fixed_mode_never_reads_past_the_list(l in random_list()) {
        let (_, arena, _) = run(MdContext::Vp, ParseMode::fixed(), &l);
        prop_assert_eq!(arena.oob_count(), 0);
    }

    #[test]
    fn vulnerable_list_size_matches_wrapping_oracle(l in random_list()) {
        let (out, _, _) = run(MdContext::Vp, ParseMode::vulnerable(), &l);
        let mut want = l.header.list_buff_size.wrapping_sub(8);
        prop_assert_eq!(out.trace.list_remaining[0], want);
        for (k, n) in out.trace.elements_read.iter().enumerate() {
            want = want.wrapping_sub((8 + 8 * n) as u16);
            prop_assert_eq!(out.trace.list_remaining[k + 1], want);
        }
    }
}

#[test]
fn crafted_fuzz_fixed_mode_stays_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..2000 {
        let l = craft::fuzz_list(catalog(), &mut rng);
        let (_, arena, _) = run(MdContext::Vp, ParseMode::fixed(), &l);
        assert_eq!(arena.oob_count(), 0, "{:?}", l.header);
    }
}

// --- dump ----------------------------------------------------------------

struct Const;

impl MetadataSource for Const {
    fn read_field(&self, _: MdContext, e: &tdmig_core::catalog::FieldEntry, pos: FieldPos) -> Vec<u64> {
        (0..e.num_of_elem as u64).map(|k| 0x100 * pos.entry as u64 + k + 1).collect()
    }
}

#[test]
fn dump_round_trips_through_write_list() {
    let empty = dump_list(catalog(), MdContext::Td, &[], &Const).unwrap();
    assert_eq!(empty.header.list_buff_size, 8);
    assert_eq!(empty.header.num_sequences, 0);

    let attrs = catalog().index_of(MdContext::Td, "ATTRIBUTES").unwrap();
    let sel = [FieldPos { entry: attrs, field: 0 }];
    let l = dump_list(catalog(), MdContext::Td, &sel, &Const).unwrap();
    let lc = ListContext {
        catalog: catalog(),
        ctx: MdContext::Td,
        phase: Phase::Immutable,
        mode: ParseMode::fixed(),
        skip_non_writable: true,
        is_last_list: false,
    };
    let mut arena = ParseArena::new();
    arena.load_list(&l.to_bytes());
    let mut sink = Recorder::default();
    let out = write_list(&lc, Some(sel[0]), &mut arena, &mut sink, &mut ImportProgress::default());
    assert_eq!(out.status, StatusWord::SUCCESS);
    assert_eq!(
        sink.writes,
        vec![(sel[0], Const.read_field(MdContext::Td, &catalog().table(MdContext::Td)[attrs], sel[0]))]
    );
}

#[test]
fn non_exportable_fields_are_refused() {
    let key = catalog().index_of(MdContext::Td, "MIG_DEC_KEY").unwrap();
    assert!(dump_list(catalog(), MdContext::Td, &[FieldPos { entry: key, field: 0 }], &Const).is_err());
}

// --- catalog -------------------------------------------------------------

#[test]
fn catalog_lookups() {
    let c = catalog();
    let a = c.find_entry(MdContext::Td, MdFieldId::decode(0x1110_0003_0000_0000)).unwrap();
    assert_eq!(a.name, "ATTRIBUTES");
    assert!(a.special_wr_handling);
    assert_eq!(c.find_entry(MdContext::Vp, id(MdContext::Vp, "XBUFF")).unwrap().num_of_fields, 1536);
    assert!(c.find_entry(MdContext::Td, MdFieldId::new(MdContext::Td, 0x11, 0xABCDE)).is_none());
    let k = c.by_name(MdContext::Td, "MIG_DEC_KEY").unwrap();
    assert_eq!((k.field_id.raw(), k.num_of_elem), (0x9810_0003_0000_0010, 4));
    // The file keeps the 15-digit transcription; loading clears the bit
    // it sets in the reserved range.
    assert!(include_str!("../data/catalog.txt").contains("EPTP              0x111000300000004 "));
    assert_eq!(c.by_name(MdContext::Td, "EPTP").unwrap().field_id.raw(), 0x0110_0003_0000_0004);
    for n in ["NUM_VCPUS", "TSC_FREQUENCY", "HP_LOCK_TIMEOUT", "EXPORT_COUNT", "X2APIC_IDS", "EPTP", "ATTRIBUTES"] {
        let e = c.by_name(MdContext::Td, n).unwrap_or_else(|| panic!("{n}"));
        assert!(matches!(e.mig_import, MigClass::Mb | MigClass::Me | MigClass::Mbo), "{n}");
    }
}

#[test]
fn ordering_within_each_class() {
    let c = catalog();
    for ctx in [MdContext::Sys, MdContext::Td, MdContext::Vp] {
        let t = c.table(ctx);
        for (i, a) in t.iter().enumerate() {
            for b in &t[i + 1..] {
                if a.class_code() == b.class_code() {
                    assert!(a.end_code() <= b.first_code(), "{} before {}", a.name, b.name);
                }
            }
        }
        let last = t.last().unwrap();
        assert!(c.next_entry(ctx, last.field_id).is_none());
    }
    let t = c.table(MdContext::Td);
    let succ = c.next_entry(MdContext::Td, t[0].field_id).unwrap();
    assert!(succ.field_id.field_code > t[0].field_id.field_code);
}

#[test]
fn attributes_successor_matches_catalog_file() {
    let text = include_str!("../data/catalog.txt");
    let names: Vec<&str> =
        text.lines().filter(|l| l.starts_with("TD ")).map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    let i = names.iter().position(|n| *n == "ATTRIBUTES").unwrap();
    let succ = catalog().next_entry(MdContext::Td, id(MdContext::Td, "ATTRIBUTES")).unwrap();
    assert_eq!(succ.name, names[i + 1]);
}

#[test]
fn cpuid_table_and_search() {
    let t = cpuid_lookup();
    assert_eq!(t.len(), MAX_NUM_CPUID_LOOKUP);
    let last = &t[78];
    assert_eq!((last.leaf, last.subleaf, last.valid_entry), (0x8000_0002, 0xffff_ffff, true));

    let start = cpuid_field_id(0x8000_0002, 0xffff_ffff);
    let mut log = IndexLog::default();
    assert_eq!(next_cpuid_entry(start, true, &mut log), MD_FIELD_ID_NA);
    assert_eq!(log.oob(), vec![79]);
    let mut log = IndexLog::default();
    assert_eq!(next_cpuid_entry(start, false, &mut log), MD_FIELD_ID_NA);
    assert!(log.oob().is_empty());

    assert!(t[1].valid_entry);
    let mut log = IndexLog::default();
    let next = next_cpuid_entry(cpuid_field_id(t[0].leaf, t[0].subleaf), true, &mut log);
    assert_eq!(next, cpuid_field_id(t[1].leaf, t[1].subleaf).raw());
}

// --- arena ---------------------------------------------------------------

#[test]
fn arena_labels_out_of_list_reads() {
    let mut a = ParseArena::new();
    a.load_list(&MdList::empty().to_bytes());
    a.read_u64(4088);
    let leaked = a.read_u64(4096);
    a.read_u64(8000);
    assert_eq!(a.oob_count(), 2);
    let (region, off) = a.locate(leaked).unwrap();
    assert_eq!((region.name, off), ("canary", 4096));
    assert_eq!(a.region_of(4104).unwrap().name, "return-address");
    assert_eq!(a.region_of(100).unwrap().name, "md-list");
}
