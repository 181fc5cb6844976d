// SPDX-License-Identifier: Apache-2.0
//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any of them fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdmig_core::arena::ParseArena;
use tdmig_core::bundle::{field_id_by_name, lists_to_records, patch_element, set_write_mask, Bundle};
use tdmig_core::catalog::{cpuid_field_id, cpuid_lookup, next_cpuid_entry, Catalog, FieldPos, IndexLog, Phase};
use tdmig_core::codec::{write_list, FieldWrite, ImportProgress, ListContext, MetadataSink};
use tdmig_core::craft::{self, v2_lists, V2Option, SECOND_SEQ_OFFSET, V2_SENTINEL, V2_TRAILING_HEADER};
use tdmig_core::crypto::{
    open, seal, BundleType, EnvelopeError, Mbmd, MigStreamContext, MigrationSessionKey, MBMD_SIZE,
};
use tdmig_core::engine::{BuildParams, MigrationPair, Platform};
use tdmig_core::field_id::{MdContext, MD_FIELD_ID_NA};
use tdmig_core::md_list::{join_lists, MdList, MD_LIST_SIZE};
use tdmig_core::mode::{EngineMode, Finding, ParseMode, Variant};
use tdmig_core::scenario::{builtin, run, RunReport, BUILTIN};
use tdmig_core::state_machine::{validate_trace, Interface, Leaf, OpState, Outcome, PermissionMatrix};
use tdmig_core::status::{StatusWord, TdxError};
use tdmig_core::td::{
    break_binding_handle, event_filters_sorted, exportable_values, init_event_filters, is_event_allowed, keys,
    make_binding_handle, md_read, nth, EventFilter, EventFiltersInfo, MdAccess, MetadataStore, TdAttributes, TdComplex,
    TdParams,
};

const V1_BUDGET: Duration = Duration::from_secs(1);
const SUITE_BUDGET: Duration = Duration::from_secs(60);
const V2_FUZZ_CASES: usize = 10_000;
const V2_MAX_SPAN: usize = 8192;
const AEAD_ROUND_TRIPS: usize = 1_000;
const IV_OPS: usize = 10_000;
const FILTER_TABLES: usize = 1_000;
const HANDLE_TRIPLES: usize = 10_000;
const E2E_SEEDS: u64 = 8;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($c:expr, $($fmt:tt)+) => {
        if !$c {
            return Err(format!($($fmt)+));
        }
    };
}

fn catalog() -> &'static Catalog {
    Catalog::builtin()
}

fn scenario(name: &str, v: Variant) -> Result<RunReport, String> {
    let spec = builtin(name).ok_or(format!("no builtin scenario {name}"))?;
    let r = run(&spec, v, None);
    ensure!(r.passed(), "{name} {}: {}", v.name(), r.divergence.clone().unwrap_or_default());
    Ok(r)
}

fn td_of<'a>(r: &'a RunReport, name: &str) -> Result<&'a TdComplex, String> {
    r.tds.get(name).and_then(|&t| r.platform.td(t)).ok_or(format!("{}: no TD {name}", r.name))
}

fn host_readable(td: &TdComplex, base: tdmig_core::field_id::MdFieldId, n: u32) -> bool {
    (0..n).all(|i| md_read(td, MdContext::Td, None, nth(base, i), MdAccess::Host).is_ok())
}

// ---------------------------------------------------------------------
// 1

fn v1_replay() -> Verdict {
    let t = Instant::now();
    let r = scenario("cve-2025-30513", Variant::Vulnerable)?;
    let elapsed = t.elapsed();
    let raw: Vec<u64> = r.statuses.iter().map(|s| s.0).collect();
    let want = [0x8000_0003_0000_0000, 0xc000_0100_0000_0041, 0];
    ensure!(raw.windows(3).any(|w| w == want), "status sequence {want:x?} absent from {raw:x?}");
    let dst = td_of(&r, "dst")?;
    ensure!(dst.attributes().0 == 0x1, "final ATTRIBUTES 0x{:x}", dst.attributes().0);
    ensure!(host_readable(dst, keys().mig_dec_key, 4), "MIG_DEC_KEY not host-readable");
    ensure!(dst.num_vcpus() == 0, "num_vcpus {}", dst.num_vcpus());
    let tracked =
        r.platform.trace(r.tds["dst"]).iter().any(|s| s.leaf == Leaf::ImportTrack && s.outcome == Outcome::Completed);
    ensure!(tracked, "import_track did not complete");
    ensure!(elapsed < V1_BUDGET, "vulnerable replay took {elapsed:?}");

    let f = scenario("cve-2025-30513", Variant::Fixed)?;
    let raw: Vec<u64> = f.statuses.iter().map(|s| s.0).collect();
    let rejected = raw.windows(2).any(|w| w == [StatusWord::INTERRUPTED_RESUMABLE.0, StatusWord::OP_STATE_INCORRECT.0]);
    ensure!(rejected, "fixed mode: interleaved mng_init not rejected ({raw:x?})");
    let fdst = td_of(&f, "dst")?;
    ensure!(
        !host_readable(fdst, keys().mig_dec_key, 4)
            && (0..4)
                .all(|i| { md_read(fdst, MdContext::Td, None, nth(keys().mig_dec_key, i), MdAccess::Host).is_err() }),
        "fixed mode: MIG_DEC_KEY readable"
    );
    ensure!(!fdst.attributes().debug(), "fixed mode: destination is debuggable");
    Ok(format!(
        "0x8000000300000000 -> 0xc000010000000041 -> 0x0, ATTRIBUTES 0x1, key readable, num_vcpus 0; {} ms",
        elapsed.as_millis()
    ))
}

// ---------------------------------------------------------------------
// 2

/// Accepts every write; only the arena matters here.
struct Discard;

impl MetadataSink for Discard {
    fn write_field(&mut self, _: &FieldWrite<'_>) -> Result<(), StatusWord> {
        Ok(())
    }
}

fn parse_vp_list(mode: ParseMode, list: &MdList) -> (StatusWord, ParseArena) {
    let lc = ListContext {
        catalog: catalog(),
        ctx: MdContext::Vp,
        phase: Phase::Mutable,
        mode,
        skip_non_writable: true,
        is_last_list: false,
    };
    let mut arena = ParseArena::new();
    arena.load_list(&list.to_bytes());
    let out = write_list(
        &lc,
        Some(FieldPos { entry: 0, field: 0 }),
        &mut arena,
        &mut Discard,
        &mut ImportProgress::default(),
    );
    (out.status, arena)
}

fn v2_import(v: Variant, option: V2Option) -> (Platform, MigrationPair, usize, Result<StatusWord, TdxError>) {
    let mut p = Platform::new(EngineMode::fixed().with(Finding::V2, v), 11);
    p.arena_plants.push((V2_TRAILING_HEADER, V2_SENTINEL));
    let m = p.migration_pair(&BuildParams::default()).unwrap();
    let imm = p.export_state_immutable(m.src, m.src_stream).unwrap();
    p.import_state_immutable(m.dst, m.dst_stream, &imm).unwrap();
    p.export_pause(m.src).unwrap();
    let tdb = p.export_state_td(m.src, m.src_stream).unwrap();
    p.import_state_td(m.dst, m.dst_stream, &tdb).unwrap();
    let vb = p.export_state_vp(m.src, m.src_stream, 0).unwrap();
    let honest = lists_to_records(catalog(), BundleType::Vp, &vb.open_lists(&m.key).unwrap()).unwrap();
    let crafted = vb.reseal(&m.key, &join_lists(&v2_lists(catalog(), option, &honest[0].1))).unwrap();
    let vp = p.import_vp_slot(m.dst).unwrap();
    let r = p.import_state_vp(m.dst, m.dst_stream, vp, &crafted);
    (p, m, vp, r)
}

fn v2_replay() -> Verdict {
    let (_, _, _, r) = v2_import(Variant::Vulnerable, V2Option::Exfil);
    let e = r.err().ok_or("exfil import succeeded")?;
    ensure!(e.ext[0] == V2_SENTINEL, "extended info 0x{:x}, want sentinel", e.ext[0]);
    ensure!(e.status.0 & 0xffff_ffff == 0xffff_0002, "exfil status {}", e.status);

    let (p, m, vp, r) = v2_import(Variant::Vulnerable, V2Option::CopyIntoState);
    ensure!(r == Ok(StatusWord::SUCCESS), "copy import: {r:?}");
    let oob_words: HashSet<u64> = p
        .last_import
        .iter()
        .flat_map(|l| l.arena.oob_reads().map(|rd| l.arena.peek_u64(rd.offset)).collect::<Vec<_>>())
        .filter(|&w| w != 0)
        .collect();
    let vcpu = &p.td(m.dst).unwrap().vcpus[vp];
    let n = catalog().by_name(MdContext::Vp, "XBUFF").unwrap().num_of_fields;
    let copied = (0..n).filter(|&i| oob_words.contains(&vcpu.xbuff(i))).count();
    ensure!(copied > 0, "no out-of-list word reached XBUFF");
    let span = p
        .last_import
        .iter()
        .filter_map(|l| (l.arena.oob_count() > 0).then(|| l.arena.max_read_end()).flatten())
        .map(|end| end - (SECOND_SEQ_OFFSET + 8))
        .max()
        .ok_or("no out-of-bounds read recorded")?;
    ensure!(span == V2_MAX_SPAN, "OOB span {span} bytes");

    for opt in [V2Option::Exfil, V2Option::CopyIntoState] {
        let (p, _, _, r) = v2_import(Variant::Fixed, opt);
        let st = r.err().map(|e| e.status.base());
        ensure!(st == Some(StatusWord::METADATA_LIST_OVERFLOW), "fixed {opt:?}: {st:?}");
        let oob: usize = p.last_import.iter().map(|l| l.arena.oob_count()).sum();
        ensure!(oob == 0, "fixed {opt:?}: {oob} OOB reads");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x32007);
    for i in 0..V2_FUZZ_CASES {
        let l = craft::fuzz_list(catalog(), &mut rng);
        let (_, arena) = parse_vp_list(ParseMode::fixed(), &l);
        ensure!(arena.oob_count() == 0, "fuzz case {i}: {} OOB reads", arena.oob_count());
    }
    Ok(format!("sentinel 0x{V2_SENTINEL:x} leaked, {copied} XBUFF words copied, span {span} B; fixed: 0 OOB over {V2_FUZZ_CASES} cases"))
}

// ---------------------------------------------------------------------
// 3

fn bug1() -> Verdict {
    let mut seen = Vec::new();
    for size in 0u16..8 {
        let l = craft::short_header_list(catalog(), size);
        let lc = |mode| ListContext {
            catalog: catalog(),
            ctx: MdContext::Vp,
            phase: Phase::Mutable,
            mode,
            skip_non_writable: true,
            is_last_list: false,
        };
        let mut arena = ParseArena::new();
        arena.load_list(&l.to_bytes());
        let out = write_list(
            &lc(ParseMode::vulnerable()),
            Some(FieldPos { entry: 0, field: 0 }),
            &mut arena,
            &mut Discard,
            &mut ImportProgress::default(),
        );
        let want = (size as u32 + 0x1_0000 - 8) as u16;
        let got = out.trace.list_remaining.first().copied();
        ensure!(got == Some(want), "size {size}: remaining {got:?}, want {want}");
        ensure!(arena.oob_count() > 0, "size {size}: no OOB read");
        seen.push(want);

        let (st, arena) = parse_vp_list(ParseMode::fixed(), &l);
        ensure!(st.base() == StatusWord::METADATA_LIST_OVERFLOW, "fixed size {size}: {st}");
        ensure!(arena.log().len() == 1, "fixed size {size}: {} arena reads", arena.log().len());
    }
    ensure!(seen[0] == 65528, "0 wraps to {}", seen[0]);
    scenario("bug1", Variant::Vulnerable)?;
    scenario("bug1", Variant::Fixed)?;
    Ok(format!("remaining {}..{} for sizes 0..7; fixed rejects after the header read", seen[0], seen[7]))
}

// ---------------------------------------------------------------------
// 4

#[derive(Clone, Copy, Debug)]
enum Edit {
    Skip,
    Set(u64),
}

struct Staged {
    p: Platform,
    m: MigrationPair,
    vp: usize,
    result: Result<StatusWord, TdxError>,
}

fn edit_bundle(
    m: &MigrationPair,
    b: &Bundle,
    ty: BundleType,
    ctx: MdContext,
    name: &str,
    edit: Edit,
) -> Option<Bundle> {
    let c = catalog();
    let lists = b.open_lists(&m.key).ok()?;
    let id = field_id_by_name(c, ctx, name, 0)?;
    let edited = match edit {
        Edit::Skip => set_write_mask(c, ty, &lists, id, 0),
        Edit::Set(v) => patch_element(c, ty, &lists, id, v),
    }
    .ok()?;
    b.reseal(&m.key, &join_lists(&edited)).ok()
}

/// Migrates honestly up to the bundle carrying `name`, then imports an
/// edited copy of that bundle.
fn import_edited(mode: EngineMode, ctx: MdContext, name: &str, edit: Edit) -> Staged {
    let mut p = Platform::new(mode, 17);
    let m = p.migration_pair(&BuildParams::default()).unwrap();
    let imm = p.export_state_immutable(m.src, m.src_stream).unwrap();
    if ctx != MdContext::Vp {
        if let Some(b) = edit_bundle(&m, &imm, BundleType::Immutable, ctx, name, edit) {
            let r = p.import_state_immutable(m.dst, m.dst_stream, &b);
            return Staged { p, m, vp: 0, result: r };
        }
    }
    p.import_state_immutable(m.dst, m.dst_stream, &imm).unwrap();
    p.export_pause(m.src).unwrap();
    let tdb = p.export_state_td(m.src, m.src_stream).unwrap();
    if ctx == MdContext::Td {
        let b =
            edit_bundle(&m, &tdb, BundleType::Td, ctx, name, edit).unwrap_or_else(|| panic!("{name} is not exported"));
        let r = p.import_state_td(m.dst, m.dst_stream, &b);
        return Staged { p, m, vp: 0, result: r };
    }
    p.import_state_td(m.dst, m.dst_stream, &tdb).unwrap();
    let vb = p.export_state_vp(m.src, m.src_stream, 0).unwrap();
    let b = edit_bundle(&m, &vb, BundleType::Vp, ctx, name, edit).unwrap_or_else(|| panic!("{name} is not exported"));
    let vp = p.import_vp_slot(m.dst).unwrap();
    let r = p.import_state_vp(m.dst, m.dst_stream, vp, &b);
    Staged { p, m, vp, result: r }
}

fn bug2_mode(v: Variant) -> EngineMode {
    EngineMode::fixed().with(Finding::Bug2, v)
}

fn bug2() -> Verdict {
    let fields = [
        (MdContext::Td, "EPTP"),
        (MdContext::Td, "NUM_VCPUS"),
        (MdContext::Td, "TSC_FREQUENCY"),
        (MdContext::Td, "HP_LOCK_TIMEOUT"),
        (MdContext::Td, "EXPORT_COUNT"),
        (MdContext::Vp, "XCR0"),
    ];
    for (ctx, name) in fields {
        let s = import_edited(bug2_mode(Variant::Vulnerable), ctx, name, Edit::Skip);
        ensure!(s.result == Ok(StatusWord::SUCCESS), "vulnerable skip of {name}: {:?}", s.result);
        let s = import_edited(bug2_mode(Variant::Fixed), ctx, name, Edit::Skip);
        let id = field_id_by_name(catalog(), ctx, name, 0).unwrap();
        match s.result {
            Err(e) if e.status.base() == StatusWord::METADATA_REQUIRED_FIELD_MISSING && e.ext[0] == id.raw() => {}
            other => return Err(format!("fixed skip of {name}: {other:?}")),
        }
    }

    // Consequences of the two skips the table marks fatal.
    let mut s = import_edited(bug2_mode(Variant::Vulnerable), MdContext::Td, "EPTP", Edit::Skip);
    let e = s.p.mem_sept_add(s.m.dst, 0x1000).err().ok_or("SEPT walk without EPTP succeeded")?;
    ensure!(e.status.is_fatal(), "SEPT walk without EPTP: {}", e.status);
    let mut s = import_edited(bug2_mode(Variant::Vulnerable), MdContext::Vp, "XCR0", Edit::Skip);
    let token = s.p.export_track(s.m.src, s.m.src_stream).unwrap();
    s.p.import_track(s.m.dst, &token).map_err(|e| format!("import_track: {e:?}"))?;
    s.p.import_commit(s.m.dst).map_err(|e| format!("import_commit: {e:?}"))?;
    let e = s.p.vp_enter(s.m.dst, s.vp).err().ok_or("vp_enter without XCR0 succeeded")?;
    ensure!(e.status.is_fatal(), "vp_enter without XCR0: {}", e.status);

    // Range constants.
    let bad = StatusWord::METADATA_FIELD_VALUE_NOT_VALID;
    let ranges: [(&str, &[u64], &[u64]); 3] = [
        ("NUM_VCPUS", &[1, 576], &[0, 577]),
        ("TSC_FREQUENCY", &[4, 400], &[3, 401]),
        ("HP_LOCK_TIMEOUT", &[10_000, 100_000_000], &[9_999, 100_000_001]),
    ];
    for v in [Variant::Vulnerable, Variant::Fixed] {
        for (name, good, out) in ranges {
            for &x in good {
                let s = import_edited(bug2_mode(v), MdContext::Td, name, Edit::Set(x));
                ensure!(s.result.is_ok(), "{} {name}={x}: {:?}", v.name(), s.result);
            }
            for &x in out {
                let s = import_edited(bug2_mode(v), MdContext::Td, name, Edit::Set(x));
                ensure!(
                    s.result.as_ref().err().map(|e| e.status.base()) == Some(bad),
                    "{} {name}={x}: {:?}",
                    v.name(),
                    s.result
                );
            }
        }
    }
    let cap = 0x7FFF_FFFF;
    for v in [Variant::Vulnerable, Variant::Fixed] {
        let s = import_edited(bug2_mode(v), MdContext::Td, "EXPORT_COUNT", Edit::Set(cap));
        ensure!(s.result.is_ok(), "{} EXPORT_COUNT=cap: {:?}", v.name(), s.result);
    }
    let s = import_edited(bug2_mode(Variant::Vulnerable), MdContext::Td, "EXPORT_COUNT", Edit::Set(cap + 1));
    ensure!(s.result.is_ok(), "vulnerable EXPORT_COUNT=cap+1: {:?}", s.result);
    let s = import_edited(bug2_mode(Variant::Fixed), MdContext::Td, "EXPORT_COUNT", Edit::Set(cap + 1));
    ensure!(s.result.as_ref().err().map(|e| e.status.base()) == Some(bad), "fixed EXPORT_COUNT=cap+1: {:?}", s.result);

    scenario("bug2", Variant::Vulnerable)?;
    scenario("bug2", Variant::Fixed)?;
    Ok(format!(
        "{} skips complete when vulnerable and name the field when fixed; EPTP and XCR0 end fatal",
        fields.len()
    ))
}

// ---------------------------------------------------------------------
// 5

fn matrix() -> Verdict {
    let text = include_str!("../data/op_state_matrix.txt");
    let mut fixture = BTreeMap::new();
    for line in
        text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with("version"))
    {
        let c: Vec<&str> = line.split_whitespace().collect();
        ensure!(c.len() == 7, "malformed fixture line {line:?}");
        if c[3] == "yes" {
            let next = if c[4] == "-" { c[1] } else { c[4] };
            fixture.insert((c[0].to_string(), c[1].to_string(), c[2].to_string()), next.to_string());
        }
    }
    let m = PermissionMatrix::builtin();
    let mut enumerated = BTreeMap::new();
    let mut pairs = 0;
    for iface in [Interface::Host, Interface::Guest] {
        for &state in OpState::ALL {
            for leaf in Leaf::op_state_gated(iface) {
                pairs += 1;
                match m.is_allowed(state, leaf, iface) {
                    Ok(true) => {
                        let next = m
                            .transition(state, leaf, Outcome::Completed, Variant::Fixed)
                            .map_err(|s| format!("{state} {leaf:?}: allowed but no transition ({s})"))?;
                        enumerated.insert(
                            (iface.name().to_string(), state.name().to_string(), leaf.name().to_string()),
                            next.name().to_string(),
                        );
                    }
                    Ok(false) => {}
                    Err(e) => return Err(format!("{state} {leaf:?}: {e}")),
                }
            }
        }
    }
    let missing: Vec<_> = fixture.iter().filter(|(k, v)| enumerated.get(*k) != Some(v)).collect();
    let extra: Vec<_> = enumerated.iter().filter(|(k, v)| fixture.get(*k) != Some(v)).collect();
    ensure!(missing.is_empty() && extra.is_empty(), "diff: missing {missing:?}, extra {extra:?}");

    for &state in OpState::ALL {
        ensure!(m.is_allowed(state, Leaf::ServtdRd, Interface::Guest) == Ok(true), "SERVTD_RD blocked in {state}");
        let wr = m.is_allowed(state, Leaf::ServtdWr, Interface::Guest) == Ok(true);
        let blocked = matches!(state, OpState::PausedExport | OpState::PostExport);
        ensure!(wr != blocked, "SERVTD_WR in {state}: allowed={wr}");
    }
    // Same rule through the engine's guest path.
    let mut p = Platform::new(EngineMode::fixed(), 5);
    let mp = p.migration_pair(&BuildParams::default()).unwrap();
    p.export_state_immutable(mp.src, mp.src_stream).unwrap();
    p.export_pause(mp.src).unwrap();
    let uuid = p.migtd_uuid;
    let h = make_binding_handle(0, mp.src, &uuid);
    let field = nth(keys().mig_enc_key, 0);
    let wr = p.servtd_wr(&uuid, h, field, 1, u64::MAX).map(drop).map_err(|e| e.status);
    ensure!(wr == Err(StatusWord::OP_STATE_INCORRECT), "engine SERVTD_WR while paused: {wr:?}");
    ensure!(p.servtd_rd(&uuid, h, field).is_ok(), "engine SERVTD_RD while paused failed");
    Ok(format!(
        "{pairs} (state, leaf) pairs, {} allowed, 0 diffs; guest write blocked only in PAUSED/POST_EXPORT",
        enumerated.len()
    ))
}

// ---------------------------------------------------------------------
// 6

fn crypto() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let types = [BundleType::Immutable, BundleType::Td, BundleType::Vp, BundleType::Mem];
    for i in 0..AEAD_ROUND_TRIPS {
        let key = MigrationSessionKey::generate(&mut rng);
        let mut sc = MigStreamContext::with_key(rng.random_range(0..4), key);
        let mut pt = vec![0u8; rng.random_range(1..=3) * MD_LIST_SIZE];
        rng.fill(&mut pt[..]);
        let (m, ct) = sc.encrypt_bundle(types[i % 4], &pt).map_err(|e| e.to_string())?;
        ensure!(sc.decrypt_bundle(&m, &ct).as_deref() == Ok(&pt[..]), "round trip {i} failed");
    }

    // Every bit of a short sealed payload and its MBMD.
    let key = MigrationSessionKey::generate(&mut rng);
    let (m, ct) = seal(&key, BundleType::Td, 2, 9, &[0xa5; 64]);
    let mut flips = 0;
    let mut missed = 0;
    for bit in 0..MBMD_SIZE * 8 {
        let mut b = m.to_bytes();
        b[bit / 8] ^= 1 << (bit % 8);
        let t = Mbmd::from_bytes(&b).map_err(|e| e.to_string())?;
        flips += 1;
        missed += usize::from(open(&key, &t, &ct) != Err(EnvelopeError::Integrity));
    }
    for bit in 0..ct.len() * 8 {
        let mut c = ct.clone();
        c[bit / 8] ^= 1 << (bit % 8);
        flips += 1;
        missed += usize::from(open(&key, &m, &c) != Err(EnvelopeError::Integrity));
    }
    // One random bit in every byte of a full list bundle.
    let mut sc = MigStreamContext::with_key(0, key);
    let (m, ct) = sc.encrypt_bundle(BundleType::Vp, &vec![0x3c; MD_LIST_SIZE]).map_err(|e| e.to_string())?;
    for byte in 0..ct.len() {
        let mut c = ct.clone();
        c[byte] ^= 1 << rng.random_range(0..8);
        flips += 1;
        missed += usize::from(open(&key, &m, &c) != Err(EnvelopeError::Integrity));
    }
    ensure!(missed == 0, "{missed} of {flips} bit flips undetected");

    // Mixed kept, cancelled and aborted exports on one stream.
    let mut p = Platform::new(EngineMode::fixed(), 6);
    let mp = p.migration_pair(&BuildParams::default()).unwrap();
    let counter = |p: &Platform| p.td(mp.src).unwrap().streams[mp.src_stream as usize].iv_counter();
    let first = p.export_state_immutable(mp.src, mp.src_stream).unwrap();
    let mut ivs = vec![(first.mbmd.stream_index, first.mbmd.iv_counter)];
    let gpa = *p.td(mp.src).unwrap().pages.keys().next().unwrap();
    let (mut cancelled, mut aborted) = (0, 0);
    while ivs.len() < IV_OPS {
        let before = counter(&p);
        let roll = rng.random_range(0..100);
        if roll < 5 {
            p.export_abort(mp.src).map_err(|e| format!("abort: {e:?}"))?;
            let b = p.export_state_immutable(mp.src, mp.src_stream).map_err(|e| format!("restart: {e:?}"))?;
            ivs.push((b.mbmd.stream_index, b.mbmd.iv_counter));
            aborted += 1;
        } else {
            let cancel = roll < 50;
            let r = p.export_mem(mp.src, mp.src_stream, &[gpa], cancel).map_err(|e| format!("export_mem: {e:?}"))?;
            match r {
                Some(b) => ivs.push((b.mbmd.stream_index, b.mbmd.iv_counter)),
                None => {
                    ivs.push((mp.src_stream, before));
                    cancelled += 1;
                }
            }
        }
        ensure!(counter(&p) > before, "counter did not advance ({before})");
    }
    let unique: HashSet<_> = ivs.iter().collect();
    ensure!(unique.len() == ivs.len(), "{} duplicate IVs over {} operations", ivs.len() - unique.len(), ivs.len());
    Ok(format!("{AEAD_ROUND_TRIPS} round trips, {flips}/{flips} flips caught, {} IVs unique ({cancelled} cancelled, {aborted} aborts)", ivs.len()))
}

// ---------------------------------------------------------------------
// 7

fn filter_td() -> TdComplex {
    let mut td = TdComplex::new(0x100, 1, MetadataStore::default());
    td.set(MdContext::Td, keys().attributes, TdAttributes::PERFMON);
    td
}

fn bug3() -> Verdict {
    let r = scenario("bug3", Variant::Vulnerable)?;
    let td = td_of(&r, "t")?;
    let n = td.event_filters_num as usize;
    ensure!(n == 5, "filters_num {n}");
    ensure!(!event_filters_sorted(td), "filters sorted: {:x?}", &td.event_filters[..n]);
    let stale = td.event_filters[..n].iter().any(|&f| f == 0x40 || f == 0x50);
    ensure!(stale, "no stale entry from the first call in {:x?}", &td.event_filters[..n]);
    let f = scenario("bug3", Variant::Fixed)?;
    ensure!(td_of(&f, "t")?.event_filters_num == 0, "fixed filters_num non-zero");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..FILTER_TABLES {
        let mut td = filter_td();
        let count = rng.random_range(1..32usize);
        let mut entries: Vec<EventFilter> = (0..count).map(|_| EventFilter::new(rng.random(), rng.random())).collect();
        entries.sort_by_key(|f| f.internal());
        entries.dedup_by_key(|f| f.internal());
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..entries.len());
            entries[i].0 |= 1 << 32;
        } else if entries.len() > 1 {
            entries.swap(0, 1);
        }
        let info = EventFiltersInfo { count: count as u16, entries };
        if init_event_filters(&mut td, true, &info, Variant::Fixed).is_err() {
            failures += 1;
            ensure!(td.event_filters_num == 0, "fixed failure left filters_num {}", td.event_filters_num);
        }
    }

    for t in 0..FILTER_TABLES {
        let mut td = filter_td();
        let keys: BTreeSet<(u8, u8)> = (0..rng.random_range(0..32)).map(|_| (rng.random(), rng.random())).collect();
        let mut entries: Vec<EventFilter> = keys.iter().map(|&(e, u)| EventFilter::new(e, u)).collect();
        entries.sort_by_key(|f| f.internal());
        init_event_filters(&mut td, true, &EventFiltersInfo::of(entries), Variant::Fixed)
            .map_err(|s| format!("table {t}: {s}"))?;
        for q in 0..64 {
            let (e, u) = if q % 2 == 0 && !keys.is_empty() {
                *keys.iter().nth(rng.random_range(0..keys.len())).unwrap()
            } else {
                (rng.random(), rng.random())
            };
            let linear = keys.is_empty() || keys.iter().any(|&k| k == (e, u));
            ensure!(is_event_allowed(&td, e, u) == linear, "table {t}: ({e:#x}, {u:#x}) disagrees with linear scan");
        }
    }
    Ok(format!(
        "vulnerable leaves 5 unsorted stale filters; {failures} fixed failures all reset; {FILTER_TABLES} tables agree"
    ))
}

// ---------------------------------------------------------------------
// 8

fn bug8() -> Verdict {
    let mut out = Vec::new();
    for v in [Variant::Vulnerable, Variant::Fixed] {
        let mut p = Platform::new(EngineMode::fixed().with(Finding::Bug8, v), 8);
        let k = p.kot.len();
        let free = p.kot.free_count();
        for h in 0..k {
            ensure!(p.sys_config(h, &[0x1001]).is_err(), "{} sys_config {h} succeeded", v.name());
        }
        let after = p.kot.free_count();
        match v {
            Variant::Vulnerable => ensure!(after == 0, "vulnerable: {after} of {k} HKIDs still free"),
            Variant::Fixed => ensure!(after == free, "fixed: free count {free} -> {after}"),
        }
        out.push(format!("{} {free}->{after}", v.name()));
        scenario("bug8", v)?;
    }
    Ok(format!("K = {}, free HKIDs {}", Platform::new(EngineMode::fixed(), 0).kot.len(), out.join(", ")))
}

// ---------------------------------------------------------------------
// 9

fn bug4() -> Verdict {
    let e = &cpuid_lookup()[78];
    let start = cpuid_field_id(e.leaf, e.subleaf);
    for (vulnerable, want) in [(true, vec![79]), (false, vec![])] {
        let mut log = IndexLog::default();
        let next = next_cpuid_entry(start, vulnerable, &mut log);
        ensure!(next == MD_FIELD_ID_NA, "vulnerable={vulnerable}: next 0x{next:x}");
        ensure!(log.oob() == want, "vulnerable={vulnerable}: OOB indices {:?}", log.oob());
    }
    scenario("bug4", Variant::Vulnerable)?;
    scenario("bug4", Variant::Fixed)?;
    Ok("index 79 read once when vulnerable, never when fixed; both return NA".into())
}

// ---------------------------------------------------------------------
// 10

fn bug6() -> Verdict {
    let probes = |v| -> Result<(StatusWord, StatusWord), String> {
        let r = scenario("bug6", v)?;
        let s = &r.statuses[r.statuses.len() - 2..];
        Ok((s[0], s[1]))
    };
    let (a, b) = probes(Variant::Vulnerable)?;
    ensure!(a != b, "vulnerable probes both {a}");
    let (c, d) = probes(Variant::Fixed)?;
    ensure!(c == d, "fixed probes differ: {c} vs {d}");

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..HANDLE_TRIPLES {
        let slot = rng.random_range(0..0x1000u16);
        let page = rng.random_range(0..1u64 << 40);
        let uuid: [u64; 4] = rng.random();
        let h = make_binding_handle(slot, page, &uuid);
        ensure!(break_binding_handle(h, &uuid) == (page, slot), "({slot}, 0x{page:x}, {uuid:x?}) does not round trip");
    }
    Ok(format!("vulnerable {a} vs {b}, fixed {c} twice; {HANDLE_TRIPLES} handles invert"))
}

// ---------------------------------------------------------------------
// 11

fn bug9() -> Verdict {
    let wide = 0x4_0000_0000_0000;
    let mode = |v| EngineMode::fixed().with(Finding::Bug9, v);
    let s = import_edited(mode(Variant::Vulnerable), MdContext::Vp, "VIRTUAL_APIC_ADDR", Edit::Set(wide));
    ensure!(s.result == Ok(StatusWord::SUCCESS), "vulnerable import: {:?}", s.result);
    let id = field_id_by_name(catalog(), MdContext::Vp, "VIRTUAL_APIC_ADDR", 0).unwrap();
    let got = s.p.td(s.m.dst).unwrap().element(MdContext::Vp, Some(s.vp), id);
    ensure!(got == wide, "VIRTUAL_APIC_ADDR holds 0x{got:x}");
    let s = import_edited(mode(Variant::Fixed), MdContext::Vp, "VIRTUAL_APIC_ADDR", Edit::Set(wide));
    let st = s.result.as_ref().err().map(|e| e.status.base());
    ensure!(st == Some(StatusWord::METADATA_FIELD_VALUE_NOT_VALID), "fixed import: {:?}", s.result);
    scenario("bug9", Variant::Vulnerable)?;
    scenario("bug9", Variant::Fixed)?;
    Ok(format!("GPA 0x{wide:x} stored when vulnerable, rejected when fixed"))
}

// ---------------------------------------------------------------------
// 12

/// Exportable fields whose destination value legitimately differs: the
/// EPT root points at the destination's own page.
const PER_TD: &[&str] = &["EPTP"];

fn end_to_end(suite_start: Instant) -> Verdict {
    let mut compared = 0;
    for seed in 0..E2E_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pages = (1..=rng.random_range(1..6u64)).map(|i| (i * 0x1000, rng.random())).collect();
        let params = BuildParams {
            td: TdParams {
                max_vcpus: rng.random_range(1..4),
                tsc_frequency: rng.random_range(4..=400),
                ..TdParams::default()
            },
            pages,
            ..BuildParams::default()
        };
        for mode in [EngineMode::fixed(), EngineMode::vulnerable()] {
            let mut p = Platform::new(mode, seed);
            let m = p.migration_pair(&params).map_err(|e| format!("seed {seed}: build {e:?}"))?;
            p.migrate(&m).map_err(|e| format!("seed {seed}: migrate {e:?}"))?;
            let (s, d) = (p.td(m.src).unwrap(), p.td(m.dst).unwrap());
            ensure!(d.op_state == OpState::Runnable, "seed {seed}: destination {}", d.op_state);
            ensure!(s.pages == d.pages, "seed {seed}: pages differ");
            let mut views = vec![(MdContext::Td, None)];
            views.extend((0..s.vcpus.len()).map(|vp| (MdContext::Vp, Some(vp))));
            for (ctx, vp) in views {
                let (a, b) = (exportable_values(s, ctx, vp), exportable_values(d, ctx, vp));
                for (name, v) in &a {
                    if PER_TD.contains(&name.as_str()) {
                        continue;
                    }
                    ensure!(b.get(name) == Some(v), "seed {seed}: {name} {vp:?} {v:x?} -> {:x?}", b.get(name));
                    compared += 1;
                }
            }
            for (tdr, steps) in p.traces() {
                validate_trace(PermissionMatrix::builtin(), steps, mode.v1)
                    .map_err(|e| format!("seed {seed} TD 0x{tdr:x}: {e}"))?;
            }
        }
    }
    let mut traces = 0;
    for (name, _) in BUILTIN {
        for v in [Variant::Vulnerable, Variant::Fixed] {
            let r = scenario(name, v)?;
            let v1 = builtin(name).unwrap().mode(v).v1;
            for (tdr, steps) in r.platform.traces() {
                validate_trace(PermissionMatrix::builtin(), steps, v1)
                    .map_err(|e| format!("{name} {} TD 0x{tdr:x}: {e}", v.name()))?;
                traces += 1;
            }
        }
    }
    let total = suite_start.elapsed();
    ensure!(total < SUITE_BUDGET, "suite took {total:?}");
    Ok(format!("{compared} field values reproduced over {E2E_SEEDS} seeds x 2 modes; {traces} scenario traces valid; suite {:.1} s", total.as_secs_f64()))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let criteria: [(&str, &dyn Fn() -> Verdict); 12] = [
        ("V1 replay", &v1_replay),
        ("V2 replay", &v2_replay),
        ("list-header underflow", &bug1),
        ("skippable required fields", &bug2),
        ("op_state matrix", &matrix),
        ("bundle crypto", &crypto),
        ("event filters", &bug3),
        ("HKID exhaustion", &bug8),
        ("CPUID lookup bound", &bug4),
        ("binding-handle oracle", &bug6),
        ("import GPA checks", &bug9),
        ("end-to-end", &|| end_to_end(start)),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.2} s]", i + 1, t.elapsed().as_secs_f64());
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
