// SPDX-License-Identifier: Apache-2.0
//! Line-oriented scenario files and their runner.
//!
//! ```text
//! scenario NAME            header: name, title, driven findings, seed
//! title TEXT
//! finding v1 [bug2 ...]
//! seed 7
//! note TEXT                printed as a section marker
//! VERB ARGS [as VAR] [=> EXPECT]
//! assert[.vulnerable|.fixed] CHECK
//! exploit CHECK
//! ```
//!
//! `EXPECT` is `STATUS[/OPERAND][!]` (the `!` demands the fatal bit),
//! `any`, or per-mode `vulnerable=... fixed=...`; a step without one must
//! succeed. A run with `--mode vulnerable` flips every listed finding to
//! its vulnerable variant and expects the `exploit` checks to all hold;
//! fixed mode expects at least one of them to fail.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bundle::{lists_to_records, patch_element, set_write_mask, Bundle};
use crate::catalog::{
    cpuid_field_id, cpuid_lookup, identifier_line, next_cpuid_entry, Catalog, IndexLog, MAX_NUM_CPUID_LOOKUP,
};
use crate::craft::{short_header_list, v2_lists, v2_resume_pos, V2Option};
use crate::crypto::{BundleType, MigrationSessionKey};
use crate::engine::{BuildParams, EpochToken, InterruptPolicy, Platform, PAGE_SIZE};
use crate::field_id::{MdContext, MdFieldId};
use crate::md_list::join_lists;
use crate::mode::{EngineMode, Finding, Variant};
use crate::state_machine::{validate_trace, Leaf, OpState, PermissionMatrix};
use crate::status::{operand, shutdown, StatusWord, TdxError};
use crate::td::{
    event_filters_sorted, keys, make_binding_handle, md_read, nth, EventFilter, EventFiltersInfo, MdAccess,
    TdAttributes, TdParams, TDVPS_PAGES,
};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

fn perr(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError { line, msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatusPattern {
    Any,
    Is { base: StatusWord, detail: Option<u32>, fatal: bool },
}

impl StatusPattern {
    pub const SUCCESS: StatusPattern = StatusPattern::Is { base: StatusWord::SUCCESS, detail: None, fatal: false };

    fn parse(s: &str) -> Option<StatusPattern> {
        if s == "any" {
            return Some(StatusPattern::Any);
        }
        let (s, fatal) = match s.strip_suffix('!') {
            Some(r) => (r, true),
            None => (s, false),
        };
        let (name, op) = match s.split_once('/') {
            Some((n, o)) => (n, Some(o)),
            None => (s, None),
        };
        let base = StatusWord::from_name(name)?;
        let detail = match op {
            None => None,
            Some(o) => Some(operand_code(o)?),
        };
        Some(StatusPattern::Is { base, detail, fatal })
    }

    pub fn matches(self, s: StatusWord) -> bool {
        match self {
            StatusPattern::Any => true,
            StatusPattern::Is { base, detail, fatal } => {
                s.base() == base && detail.is_none_or(|d| s.detail() == d) && (!fatal || s.is_fatal())
            }
        }
    }
}

impl std::fmt::Display for StatusPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StatusPattern::Any => write!(f, "any"),
            StatusPattern::Is { base, detail, fatal } => {
                write!(f, "{}", base.base_name())?;
                if let Some(d) = detail {
                    write!(f, "/{}", base.with_operand(*d).operand_name())?;
                }
                if *fatal {
                    write!(f, "!")?;
                }
                Ok(())
            }
        }
    }
}

fn operand_code(s: &str) -> Option<u32> {
    Some(match s {
        "RAX" => operand::RAX,
        "RCX" => operand::RCX,
        "RDX" => operand::RDX,
        "R8" => operand::R8,
        "R9" => operand::R9,
        "ATTRIBUTES" => operand::ATTRIBUTES,
        "XFAM" => operand::XFAM,
        "EXEC_CONTROLS" => operand::EXEC_CONTROLS,
        "EPTP" => operand::EPTP,
        "NUM_VCPUS" => operand::NUM_VCPUS,
        "TDMR" => operand::TDMR,
        "HKID" => operand::HKID,
        "SEPT_WALK" => shutdown::SEPT_WALK,
        "GUEST_XCR0" => shutdown::GUEST_XCR0,
        "GUEST_EPTP" => shutdown::GUEST_EPTP,
        _ => return parse_u64(s).and_then(|v| u32::try_from(v).ok()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expect {
    pub vulnerable: StatusPattern,
    pub fixed: StatusPattern,
}

impl Expect {
    pub fn for_variant(&self, v: Variant) -> StatusPattern {
        match v {
            Variant::Vulnerable => self.vulnerable,
            Variant::Fixed => self.fixed,
        }
    }

    fn parse(s: &str) -> Option<Expect> {
        let s = s.trim();
        if !s.contains('=') {
            let p = StatusPattern::parse(s)?;
            return Some(Expect { vulnerable: p, fixed: p });
        }
        let mut e = Expect { vulnerable: StatusPattern::SUCCESS, fixed: StatusPattern::SUCCESS };
        for part in s.split_whitespace() {
            match part.split_once('=')? {
                ("vulnerable", p) => e.vulnerable = StatusPattern::parse(p)?,
                ("fixed", p) => e.fixed = StatusPattern::parse(p)?,
                _ => return None,
            }
        }
        Some(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum When {
    Always,
    Vulnerable,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    fn parse(s: &str) -> Option<Cmp> {
        Some(match s {
            "==" => Cmp::Eq,
            "!=" => Cmp::Ne,
            "<" => Cmp::Lt,
            "<=" => Cmp::Le,
            ">" => Cmp::Gt,
            ">=" => Cmp::Ge,
            _ => return None,
        })
    }

    fn eval(self, a: u64, b: u64) -> bool {
        match self {
            Cmp::Eq => a == b,
            Cmp::Ne => a != b,
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
        }
    }
}

/// Right-hand side of a numeric check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rhs {
    Cmp(Cmp, String),
    /// Inclusive range.
    In(String, String),
}

/// Checks that yield a number and take a comparison.
const NUMERIC_CHECKS: &[(&str, usize)] = &[
    ("field", 2),
    ("vpfield", 3),
    ("ext", 1),
    ("oob_reads", 0),
    ("oob_span", 0),
    ("arena_reads", 0),
    ("remaining", 0),
    ("filters_num", 1),
    ("free_hkids", 0),
    ("cpuid_oob", 0),
    ("cpuid_result", 0),
];

/// Checks that are plain predicates.
const PREDICATE_CHECKS: &[(&str, usize)] = &[
    ("readable", 2),
    ("leaked", 2),
    ("filters_sorted", 1),
    ("debuggable", 1),
    ("fatal", 1),
    ("distinct", 2),
    ("op_state", 2),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub negate: bool,
    pub kind: String,
    pub args: Vec<String>,
    pub rhs: Option<Rhs>,
}

impl Check {
    fn parse(line: usize, toks: &[&str]) -> Result<Check, ScenarioError> {
        let (negate, toks) = match toks.first() {
            Some(&"not") => (true, &toks[1..]),
            _ => (false, toks),
        };
        let (kind, rest) = toks.split_first().ok_or_else(|| perr(line, "empty check"))?;
        let kind = kind.to_string();
        if let Some(&(_, n)) = NUMERIC_CHECKS.iter().find(|(k, _)| *k == kind) {
            if rest.len() < n + 2 {
                return Err(perr(line, format!("{kind} needs {n} argument(s) and a comparison")));
            }
            let args = rest[..n].iter().map(|s| s.to_string()).collect();
            let rhs = match rest[n] {
                "in" => {
                    let (lo, hi) = rest[n + 1].split_once("..=").ok_or_else(|| perr(line, "range must be lo..=hi"))?;
                    Rhs::In(lo.to_string(), hi.to_string())
                }
                c => Rhs::Cmp(
                    Cmp::parse(c).ok_or_else(|| perr(line, format!("bad comparison {c}")))?,
                    rest[n + 1].to_string(),
                ),
            };
            if rest.len() != n + 2 {
                return Err(perr(line, "trailing tokens after check"));
            }
            return Ok(Check { negate, kind, args, rhs: Some(rhs) });
        }
        if let Some(&(_, n)) = PREDICATE_CHECKS.iter().find(|(k, _)| *k == kind) {
            let rest: Vec<&str> = rest.iter().copied().filter(|t| *t != "==").collect();
            if rest.len() != n {
                return Err(perr(line, format!("{kind} takes {n} argument(s)")));
            }
            return Ok(Check { negate, kind, args: rest.iter().map(|s| s.to_string()).collect(), rhs: None });
        }
        Err(perr(line, format!("unknown check {kind}")))
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.negate {
            write!(f, "not ")?;
        }
        write!(f, "{}", self.kind)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        match &self.rhs {
            None => Ok(()),
            Some(Rhs::In(lo, hi)) => write!(f, " in {lo}..={hi}"),
            Some(Rhs::Cmp(c, v)) => {
                let op = match c {
                    Cmp::Eq => "==",
                    Cmp::Ne => "!=",
                    Cmp::Lt => "<",
                    Cmp::Le => "<=",
                    Cmp::Gt => ">",
                    Cmp::Ge => ">=",
                };
                write!(f, " {op} {v}")
            }
        }
    }
}

const VERBS: &[&str] = &[
    "build",
    "target",
    "session",
    "mng_init",
    "vp_create",
    "vp_addcx",
    "vp_init",
    "vp_slot",
    "vp_enter",
    "mem_sept_add",
    "mr_finalize",
    "rd",
    "vprd",
    "wr",
    "export_immutable",
    "export_pause",
    "export_td",
    "export_vp",
    "export_mem",
    "export_track",
    "export_abort",
    "import_immutable",
    "import_td",
    "import_vp",
    "import_mem",
    "import_track",
    "import_commit",
    "import_end",
    "import_abort",
    "interrupt",
    "plant",
    "skip",
    "patch",
    "craft_v2",
    "craft_short",
    "sys_config",
    "cpuid_next",
    "probe",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LineKind {
    Note(String),
    Step { verb: String, args: Vec<String>, bind: Option<String>, expect: Expect },
    Check { when: When, exploit: bool, check: Check },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    pub kind: LineKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub name: String,
    pub title: String,
    pub findings: Vec<Finding>,
    pub seed: u64,
    pub lines: Vec<Line>,
}

impl ScenarioSpec {
    pub fn parse(text: &str) -> Result<ScenarioSpec, ScenarioError> {
        let mut spec = ScenarioSpec {
            name: String::new(),
            title: String::new(),
            findings: Vec::new(),
            seed: 0,
            lines: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once(char::is_whitespace).map_or((line, ""), |(h, r)| (h, r.trim()));
            match head {
                "scenario" => spec.name = rest.to_string(),
                "title" => spec.title = rest.to_string(),
                "seed" => spec.seed = parse_u64(rest).ok_or_else(|| perr(n, "bad seed"))?,
                "finding" => {
                    for f in rest.split_whitespace() {
                        spec.findings.push(Finding::parse(f).ok_or_else(|| perr(n, format!("unknown finding {f}")))?);
                    }
                }
                "note" => spec.lines.push(Line { number: n, kind: LineKind::Note(rest.to_string()) }),
                "assert" | "assert.vulnerable" | "assert.fixed" | "exploit" => {
                    let when = match head {
                        "assert.vulnerable" => When::Vulnerable,
                        "assert.fixed" => When::Fixed,
                        _ => When::Always,
                    };
                    let toks: Vec<&str> = rest.split_whitespace().collect();
                    let check = Check::parse(n, &toks)?;
                    spec.lines
                        .push(Line { number: n, kind: LineKind::Check { when, exploit: head == "exploit", check } });
                }
                verb if VERBS.contains(&verb) => {
                    let (call, expect) = match rest.split_once("=>") {
                        Some((c, e)) => {
                            (c.trim(), Expect::parse(e).ok_or_else(|| perr(n, format!("bad expectation {e}")))?)
                        }
                        None => (rest, Expect { vulnerable: StatusPattern::SUCCESS, fixed: StatusPattern::SUCCESS }),
                    };
                    let mut toks: Vec<String> = call.split_whitespace().map(str::to_string).collect();
                    let bind = match toks.iter().position(|t| t == "as") {
                        Some(p) if p + 2 == toks.len() => {
                            let b = toks.pop();
                            toks.pop();
                            b
                        }
                        Some(_) => return Err(perr(n, "`as` must be followed by exactly one name")),
                        None => None,
                    };
                    spec.lines.push(Line {
                        number: n,
                        kind: LineKind::Step { verb: verb.to_string(), args: toks, bind, expect },
                    });
                }
                other => return Err(perr(n, format!("unknown directive {other}"))),
            }
        }
        if spec.name.is_empty() {
            return Err(perr(0, "missing `scenario` header"));
        }
        Ok(spec)
    }

    /// Engine toggles for a run: the driven findings take `v`, the rest
    /// stay fixed.
    pub fn mode(&self, v: Variant) -> EngineMode {
        self.findings.iter().fold(EngineMode::fixed(), |m, f| m.with(*f, v))
    }
}

pub fn parse_u64(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

/// Attribute value: hex, or flag names joined by `|`.
fn parse_attributes(s: &str) -> Option<u64> {
    s.split('|').try_fold(0u64, |acc, t| {
        let v = match t {
            "DEBUG" => TdAttributes::DEBUG,
            "SEPT_VE_DISABLE" => TdAttributes::SEPT_VE_DISABLE,
            "MIGRATABLE" => TdAttributes::MIGRATABLE,
            "PERFMON" => TdAttributes::PERFMON,
            _ => parse_u64(t)?,
        };
        Some(acc | v)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Exploited,
    NotExploitable,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Exploited => "EXPLOITED",
            Verdict::NotExploitable => "NOT EXPLOITABLE",
        }
    }

    pub fn expected_for(v: Variant) -> Verdict {
        match v {
            Variant::Vulnerable => Verdict::Exploited,
            Variant::Fixed => Verdict::NotExploitable,
        }
    }
}

pub struct RunReport {
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub transcript: String,
    /// First difference from the expected run, `None` when it passed.
    pub divergence: Option<String>,
    /// Observed status of every step, in order.
    pub statuses: Vec<StatusWord>,
    pub mismatches: Vec<String>,
    pub verdict: Verdict,
    /// Trace validation failures, one line per TD.
    pub trace_errors: Vec<String>,
    /// TDR page of every TD the scenario named.
    pub tds: BTreeMap<String, u64>,
    pub platform: Platform,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
            && self.trace_errors.is_empty()
            && self.verdict == Verdict::expected_for(self.variant)
    }
}

struct Env<'a> {
    p: Platform,
    catalog: &'a Catalog,
    tds: BTreeMap<String, u64>,
    bundles: BTreeMap<String, Bundle>,
    tokens: BTreeMap<String, EpochToken>,
    labels: BTreeMap<String, StatusWord>,
    streams: BTreeMap<u64, u32>,
    key: Option<MigrationSessionKey>,
    last_err: TdxError,
    cpuid: Option<(u64, IndexLog)>,
    out: String,
}

type StepResult = Result<Result<(), TdxError>, String>;

fn ok() -> StepResult {
    Ok(Ok(()))
}

/// Resolves `NAME[#field][:elem]` or a raw identifier. Also returns the
/// element count of the entry (1 for raw identifiers).
pub fn field_ref(catalog: &Catalog, ctx: MdContext, s: &str) -> Option<(MdFieldId, u32)> {
    if let Some(v) = parse_u64(s) {
        return Some((MdFieldId::decode(v), 1));
    }
    let (name, elem) = match s.split_once(':') {
        Some((n, e)) => (n, e.parse().ok()?),
        None => (s, 0),
    };
    let (name, field) = match name.split_once('#') {
        Some((n, f)) => (n, f.parse().ok()?),
        None => (name, 0),
    };
    let e = catalog.by_name(ctx, name)?;
    (elem < e.num_of_elem && field < e.num_of_fields).then(|| (e.element_id(field, elem), e.num_of_elem))
}

impl Env<'_> {
    fn td(&self, name: &str) -> Result<u64, String> {
        self.tds.get(name).copied().ok_or_else(|| format!("no TD named {name}"))
    }

    fn bundle(&self, name: &str) -> Result<&Bundle, String> {
        self.bundles.get(name).ok_or_else(|| format!("no bundle named {name}"))
    }

    fn stream(&self, tdr: u64) -> Result<u32, String> {
        self.streams.get(&tdr).copied().ok_or_else(|| "TD has no migration session".to_string())
    }

    fn key(&self) -> Result<MigrationSessionKey, String> {
        self.key.ok_or_else(|| "no migration session key yet".to_string())
    }

    fn addr(&self, name: &str) -> String {
        self.tds.get(name).map_or(name.to_string(), |p| format!("0x{:x}", p * PAGE_SIZE))
    }

    fn say(&mut self, s: impl AsRef<str>) {
        self.out.push_str(s.as_ref());
        self.out.push('\n');
    }

    fn field(&self, ctx: MdContext, s: &str) -> Result<(MdFieldId, u32), String> {
        field_ref(self.catalog, ctx, s).ok_or_else(|| format!("unknown {} field {s}", ctx.name()))
    }

    fn kv<'b>(args: &'b [String], key: &str) -> Option<&'b str> {
        args.iter().find_map(|a| a.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
    }

    fn num(args: &[String], i: usize) -> Result<u64, String> {
        args.get(i).and_then(|s| parse_u64(s)).ok_or_else(|| format!("argument {} must be a number", i + 1))
    }

    fn arg(args: &[String], i: usize) -> Result<&str, String> {
        args.get(i).map(String::as_str).ok_or_else(|| format!("missing argument {}", i + 1))
    }

    fn td_params(args: &[String], base: TdParams) -> Result<TdParams, String> {
        let mut p = base;
        if let Some(a) = Self::kv(args, "attributes") {
            p.attributes = parse_attributes(a).ok_or("bad attributes")?;
        }
        if let Some(x) = Self::kv(args, "xfam") {
            p.xfam = parse_u64(x).ok_or("bad xfam")?;
        }
        if let Some(v) = Self::kv(args, "vcpus") {
            p.max_vcpus = parse_u64(v).ok_or("bad vcpus")? as u32;
        }
        if let Some(t) = Self::kv(args, "tsc") {
            p.tsc_frequency = parse_u64(t).ok_or("bad tsc")?;
        }
        Ok(p)
    }

    fn filters(args: &[String]) -> Result<EventFiltersInfo, String> {
        let Some(list) = Self::kv(args, "filters") else { return Ok(EventFiltersInfo::default()) };
        let entries = list
            .split(',')
            .map(|t| match t {
                "ILLEGAL" => Ok(EventFilter(0)),
                _ => parse_u64(t)
                    .and_then(|v| u8::try_from(v).ok())
                    .map(|v| EventFilter::new(v, 0))
                    .ok_or(format!("bad filter {t}")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut info = EventFiltersInfo::of(entries);
        if let Some(c) = Self::kv(args, "count") {
            info.count = parse_u64(c).ok_or("bad count")? as u16;
        }
        Ok(info)
    }

    fn put_bundle(&mut self, bind: &Option<String>, b: Bundle) -> Result<(), String> {
        let name = bind.clone().ok_or("this step needs `as NAME`")?;
        self.bundles.insert(name, b);
        Ok(())
    }

    fn host(&mut self, leaf: &str, args: &[String]) {
        let shown: Vec<String> = args.iter().map(|a| self.addr(a)).collect();
        let line = format!("host-vmm: {leaf} {}", shown.join(" "));
        self.say(line.trim_end());
    }

    fn read_fig11(
        &mut self,
        tdr: u64,
        ctx: MdContext,
        vp: Option<usize>,
        what: &str,
        count: u32,
    ) -> Result<(), TdxError> {
        let (id, _) =
            field_ref(self.catalog, ctx, what).ok_or(TdxError::from(StatusWord::METADATA_FIELD_ID_INCORRECT))?;
        let mut lines = vec![format!("{}-scope metadata:", ctx.name().to_ascii_lowercase())];
        for i in 0..count {
            let eid = nth(id, i);
            let v = match vp {
                None => self.p.mng_rd(tdr, eid)?,
                Some(vp) => self.p.vp_rd(tdr, vp, eid)?,
            };
            let e = self.catalog.find_entry(ctx, eid).expect("read succeeded");
            lines.push(identifier_line(e, eid, v));
        }
        for l in lines {
            self.say(l);
        }
        Ok(())
    }

    fn session(&mut self, names: &[String]) -> StepResult {
        let key = match self.key {
            Some(k) => k,
            None => {
                let k = MigrationSessionKey::generate(self.p.rng());
                self.key = Some(k);
                k
            }
        };
        let uuid = self.p.migtd_uuid;
        let uuid_s = uuid.iter().map(|q| format!("{q:016x}")).collect::<Vec<_>>().join("-");
        for n in names {
            let tdr = self.td(n)?;
            self.host("tdh_servtd_bind", &[n.clone(), "0".into()]);
            let h = match self.p.servtd_bind(tdr, 0, uuid) {
                Ok(h) => h,
                Err(e) => return Ok(Err(e)),
            };
            let k = keys();
            for base in [k.mig_dec_key, k.mig_enc_key] {
                for (i, q) in key.0.iter().enumerate() {
                    let id = nth(base, i as u32);
                    self.say(format!("mig-td: tdg_servtd_wr 0x{:x} {uuid_s} 0x{:x} -1 0x{q:x}", h.raw, id.raw()));
                    match self.p.servtd_wr(&uuid, h, id, *q, u64::MAX) {
                        Ok(prev) => self.say(format!("previous contents: 0x{prev:x}")),
                        Err(e) => return Ok(Err(e)),
                    }
                }
            }
            self.host("tdh_mig_stream_create", std::slice::from_ref(n));
            match self.p.mig_stream_create(tdr) {
                Ok(s) => {
                    self.streams.insert(tdr, s);
                }
                Err(e) => return Ok(Err(e)),
            }
        }
        ok()
    }

    /// Re-seals `lists` in place of the bundle `src`, one counter later.
    fn reseal_lists(&self, src: &str, lists: &[crate::md_list::MdList]) -> Result<Bundle, String> {
        let b = self.bundle(src)?;
        b.reseal(&self.key()?, &join_lists(lists)).map_err(|e| e.to_string())
    }

    fn step(&mut self, verb: &str, args: &[String], bind: &Option<String>) -> StepResult {
        let a = args;
        macro_rules! call {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(e) => return Ok(Err(e)),
                }
            };
        }
        match verb {
            "build" => {
                let name = Self::arg(a, 0)?.to_string();
                let mut bp =
                    BuildParams { td: Self::td_params(&a[1..], TdParams::default())?, ..BuildParams::default() };
                bp.filters = Self::filters(&a[1..])?;
                self.say(format!("[%] Building TD {name}..."));
                let tdr = call!(self.p.build_td(&bp));
                self.tds.insert(name.clone(), tdr);
                self.say(format!("tdr_pa: {}", self.addr(&name)));
            }
            "target" => {
                let name = Self::arg(a, 0)?.to_string();
                self.say(format!("[%] Creating TD template {name}..."));
                let tdr = call!(self.p.create_import_target());
                self.tds.insert(name.clone(), tdr);
                self.say(format!("tdr_pa: {}", self.addr(&name)));
            }
            "session" => return self.session(a),
            "mng_init" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let p = Self::td_params(&a[1..], TdParams::default())?;
                let f = Self::filters(&a[1..])?;
                self.host("tdh_mng_init", a);
                call!(self.p.mng_init(tdr, &p, &f));
            }
            "vp_create" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                self.host("tdh_vp_create", a);
                let vp = call!(self.p.vp_create(tdr));
                self.say(format!("vp index: {vp}"));
            }
            "vp_addcx" | "vp_init" | "vp_enter" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let vp = Self::num(a, 1)? as usize;
                self.host(&format!("tdh_{verb}"), a);
                match verb {
                    "vp_addcx" => call!(self.p.vp_addcx(tdr, vp).map(drop)),
                    "vp_init" => call!(self.p.vp_init(tdr, vp)),
                    _ => call!(self.p.vp_enter(tdr, vp)),
                }
            }
            "vp_slot" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                self.host("tdh_vp_create", a);
                let vp = call!(self.p.vp_create(tdr));
                for _ in 1..TDVPS_PAGES {
                    self.host("tdh_vp_addcx", &[a[0].clone(), vp.to_string()]);
                    call!(self.p.vp_addcx(tdr, vp).map(drop));
                }
            }
            "mem_sept_add" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let gpa = Self::num(a, 1)?;
                self.host("tdh_mem_sept_add", a);
                call!(self.p.mem_sept_add(tdr, gpa));
            }
            "mr_finalize" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                self.host("tdh_mr_finalize", a);
                call!(self.p.mr_finalize(tdr));
            }
            "rd" | "vprd" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let (vp, what) = if verb == "vprd" {
                    (Some(Self::num(a, 1)? as usize), Self::arg(a, 2)?)
                } else {
                    (None, Self::arg(a, 1)?)
                };
                let ctx = if vp.is_some() { MdContext::Vp } else { MdContext::Td };
                let count = match Self::kv(a, "count") {
                    Some(c) => parse_u64(c).ok_or("bad count")? as u32,
                    None => 1,
                };
                self.host("tdh_md_rd", a);
                call!(self.read_fig11(tdr, ctx, vp, what, count));
            }
            "wr" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let (id, _) = self.field(MdContext::Td, Self::arg(a, 1)?)?;
                let v = Self::num(a, 2)?;
                self.host("tdh_md_wr", a);
                let prev = call!(self.p.mng_wr(tdr, id, v, u64::MAX));
                self.say(format!("previous contents: 0x{prev:x}"));
            }
            "export_immutable" | "export_td" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let s = self.stream(tdr)?;
                let leaf = if verb == "export_td" { "tdh_export_state_td" } else { "tdh_export_state_immutable" };
                self.host(leaf, a);
                let b = call!(if verb == "export_td" {
                    self.p.export_state_td(tdr, s)
                } else {
                    self.p.export_state_immutable(tdr, s)
                });
                self.put_bundle(bind, b)?;
            }
            "export_vp" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let vp = Self::num(a, 1)? as usize;
                let s = self.stream(tdr)?;
                self.host("tdh_export_state_vp", a);
                let b = call!(self.p.export_state_vp(tdr, s, vp));
                self.put_bundle(bind, b)?;
            }
            "export_mem" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let s = self.stream(tdr)?;
                let cancel = a.iter().any(|t| t == "cancel");
                let gpas: Vec<u64> = a[1..].iter().filter_map(|t| parse_u64(t)).collect();
                self.host("tdh_export_mem", a);
                if let Some(b) = call!(self.p.export_mem(tdr, s, &gpas, cancel)) {
                    if bind.is_some() {
                        self.put_bundle(bind, b)?;
                    }
                }
            }
            "export_pause" | "export_abort" | "import_commit" | "import_end" | "import_abort" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                self.host(&format!("tdh_{verb}"), a);
                call!(match verb {
                    "export_pause" => self.p.export_pause(tdr),
                    "export_abort" => self.p.export_abort(tdr),
                    "import_commit" => self.p.import_commit(tdr),
                    "import_end" => self.p.import_end(tdr),
                    _ => self.p.import_abort(tdr),
                });
            }
            "export_track" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let s = self.stream(tdr)?;
                self.host("tdh_export_track", a);
                let t = call!(self.p.export_track(tdr, s));
                self.tokens.insert(bind.clone().ok_or("export_track needs `as NAME`")?, t);
            }
            "import_track" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let t = *self.tokens.get(Self::arg(a, 1)?).ok_or("no such token")?;
                self.host("tdh_import_track", a);
                call!(self.p.import_track(tdr, &t));
            }
            "import_immutable" | "import_td" | "import_vp" | "import_mem" => {
                let tdr = self.td(Self::arg(a, 0)?)?;
                let s = self.stream(tdr)?;
                let (vp, bname) = if verb == "import_vp" {
                    (Some(Self::num(a, 1)? as usize), Self::arg(a, 2)?)
                } else {
                    (None, Self::arg(a, 1)?)
                };
                let b = self.bundle(bname)?.clone();
                let leaf = match verb {
                    "import_immutable" => "tdh_import_state_immutable",
                    "import_td" => "tdh_import_state_td",
                    "import_vp" => "tdh_import_state_vp",
                    _ => "tdh_import_mem",
                };
                self.host(leaf, a);
                let r = match verb {
                    "import_immutable" => self.p.import_state_immutable(tdr, s, &b),
                    "import_td" => self.p.import_state_td(tdr, s, &b),
                    "import_vp" => self.p.import_state_vp(tdr, s, vp.expect("set above"), &b),
                    _ => self.p.import_mem(tdr, s, &b).map(|()| StatusWord::SUCCESS),
                };
                return Ok(match r {
                    Ok(st) if st == StatusWord::SUCCESS => Ok(()),
                    Ok(st) => Err(TdxError::from(st)),
                    Err(e) => Err(e),
                });
            }
            "interrupt" => {
                let what = Self::arg(a, 0)?;
                self.p.interrupt = if what == "off" {
                    InterruptPolicy::Never
                } else {
                    let leaf = Leaf::parse(&what.to_ascii_uppercase()).ok_or(format!("unknown leaf {what}"))?;
                    let after = Self::kv(a, "after").and_then(parse_u64).ok_or("interrupt needs after=N")? as usize;
                    InterruptPolicy::after_list(leaf, after)
                };
                self.say(format!("[!] Host interrupt armed: {}", a.join(" ")));
            }
            "plant" => {
                let off = Self::num(a, 0)? as usize;
                let v = Self::num(a, 1)?;
                self.p.arena_plants.push((off, v));
                self.say(format!("[!] Planted 0x{v:x} at stack offset 0x{off:x}"));
            }
            "skip" | "patch" => {
                let src = Self::arg(a, 0)?;
                let b = self.bundle(src)?;
                let ty = b.kind().ok_or("bundle type unknown")?;
                let lists = b.open_lists(&self.key()?).map_err(|e| e.to_string())?;
                let ctx = if ty == BundleType::Vp { MdContext::Vp } else { MdContext::Td };
                let (id, _) = self.field(ctx, Self::arg(a, 1)?)?;
                let lists = if verb == "skip" {
                    self.say(format!("[%] Editing {src}: write mask 0 on {}", a[1]));
                    set_write_mask(self.catalog, ty, &lists, id, 0)
                } else {
                    let v = Self::num(a, 2)?;
                    self.say(format!("[%] Editing {src}: {} = 0x{v:x}", a[1]));
                    patch_element(self.catalog, ty, &lists, id, v)
                }
                .map_err(|e| e.to_string())?;
                let nb = self.reseal_lists(src, &lists)?;
                self.put_bundle(bind, nb)?;
            }
            "craft_v2" | "craft_short" => {
                let src = Self::arg(a, 0)?;
                let b = self.bundle(src)?;
                if b.kind() != Some(BundleType::Vp) {
                    return Err(format!("{src} is not a VP bundle"));
                }
                let honest = lists_to_records(
                    self.catalog,
                    BundleType::Vp,
                    &b.open_lists(&self.key()?).map_err(|e| e.to_string())?,
                )
                .map_err(|e| e.to_string())?;
                let recs = &honest.first().ok_or("empty VP bundle")?.1;
                let lists = if verb == "craft_v2" {
                    let opt = match Self::arg(a, 1)? {
                        "exfil" => V2Option::Exfil,
                        "state" => V2Option::CopyIntoState,
                        o => return Err(format!("unknown option {o}")),
                    };
                    self.say(format!("[%] Crafting write-mask underflow bundle ({}) from {src}", a[1]));
                    v2_lists(self.catalog, opt, recs)
                } else {
                    let size = Self::kv(a, "size").and_then(parse_u64).ok_or("craft_short needs size=N")? as u16;
                    self.say(format!("[%] Crafting list with list_buff_size {size} from {src}"));
                    let from = v2_resume_pos(self.catalog);
                    let rest: Vec<_> = recs.iter().filter(|r| r.pos >= from).cloned().collect();
                    let mut l = vec![short_header_list(self.catalog, size)];
                    l.extend(crate::codec::pack_lists(self.catalog, MdContext::Vp, &rest));
                    l
                };
                let nb = self.reseal_lists(src, &lists)?;
                self.put_bundle(bind, nb)?;
            }
            "sys_config" => {
                let hkids = Self::kv(a, "hkids").ok_or("sys_config needs hkids=")?;
                let (lo, hi) = match hkids {
                    "all" => (0, self.p.kot.len()),
                    r => match r.split_once("..") {
                        Some((l, h)) => {
                            (parse_u64(l).ok_or("bad range")? as usize, parse_u64(h).ok_or("bad range")? as usize)
                        }
                        None => {
                            let v = parse_u64(r).ok_or("bad hkid")? as usize;
                            (v, v + 1)
                        }
                    },
                };
                let tdmr: Vec<u64> =
                    Self::kv(a, "tdmr").map(|t| t.split(',').filter_map(parse_u64).collect()).unwrap_or_default();
                self.host("tdh_sys_config", a);
                let mut first = Ok(());
                for h in lo..hi {
                    let r = self.p.sys_config(h, &tdmr);
                    if first.is_ok() {
                        first = r;
                    }
                }
                self.say(format!("free hkids: {}", self.p.kot.free_count()));
                return Ok(first);
            }
            "cpuid_next" => {
                let idx = Self::num(a, 0)? as usize;
                let e = cpuid_lookup().get(idx).ok_or(format!("lookup index must be below {MAX_NUM_CPUID_LOOKUP}"))?;
                let id = cpuid_field_id(e.leaf, e.subleaf);
                let mut log = IndexLog::default();
                let r = next_cpuid_entry(id, self.p.mode.bug4.is_vulnerable(), &mut log);
                self.say(format!("host-vmm: tdh_sys_rd next after 0x{:x}", id.raw()));
                self.say(format!("next: 0x{r:x}, indices read: {:?}", log.reads));
                self.cpuid = Some((r, log));
            }
            "probe" => {
                let what = Self::arg(a, 0)?;
                let uuid = self.p.migtd_uuid;
                let page = match what {
                    "nopage" => self.p.alloc_page(),
                    td => self.td(td)?,
                };
                let h = make_binding_handle(1, page, &uuid);
                self.say(format!("mig-td: tdg_servtd_rd 0x{:x} 0x{:x}", h.raw, keys().attributes.raw()));
                let r = self.p.servtd_rd(&uuid, h, keys().attributes);
                if let (Ok(v), Some(_)) = (&r, bind) {
                    self.say(format!("contents: 0x{v:x}"));
                }
                let st = r.as_ref().map_or_else(|e| e.status, |_| StatusWord::SUCCESS);
                if let Some(b) = bind {
                    self.labels.insert(b.clone(), st);
                }
                return Ok(r.map(drop));
            }
            other => return Err(format!("verb {other} not handled")),
        }
        ok()
    }

    fn value(&self, s: &str) -> Result<u64, String> {
        match s {
            "kot" => Ok(self.p.kot.len() as u64),
            "NA" => Ok(crate::field_id::MD_FIELD_ID_NA),
            _ => parse_attributes(s).ok_or(format!("bad value {s}")),
        }
    }

    fn tdc(&self, name: &str) -> Result<&crate::td::TdComplex, String> {
        self.p.td(self.td(name)?).ok_or_else(|| format!("TD {name} is gone"))
    }

    fn numeric(&self, c: &Check) -> Result<u64, String> {
        let a = &c.args;
        let lists = || {
            let l = &self.p.last_import;
            if l.is_empty() {
                Err("no list import ran yet")
            } else {
                Ok(l)
            }
        };
        Ok(match c.kind.as_str() {
            "field" => {
                let td = self.tdc(&a[0])?;
                let (id, _) = self.field(MdContext::Td, &a[1])?;
                td.element(MdContext::Td, None, id)
            }
            "vpfield" => {
                let td = self.tdc(&a[0])?;
                let vp = parse_u64(&a[1]).ok_or("bad vp")? as usize;
                if vp >= td.vcpus.len() {
                    return Err(format!("no VP {vp}"));
                }
                let (id, _) = self.field(MdContext::Vp, &a[2])?;
                td.element(MdContext::Vp, Some(vp), id)
            }
            "ext" => match a[0].as_str() {
                "1" => self.last_err.ext[0],
                "2" => self.last_err.ext[1],
                _ => return Err("ext takes 1 or 2".into()),
            },
            "oob_reads" => lists()?.iter().map(|l| l.arena.oob_count() as u64).sum(),
            "arena_reads" => lists()?.iter().map(|l| l.arena.log().len() as u64).sum(),
            // Bytes claimed by the runaway sequence of any list that read
            // past its buffer.
            "oob_span" => lists()?
                .iter()
                .filter(|l| l.arena.oob_count() > 0)
                .map(|l| l.trace.elements_read.last().copied().unwrap_or(0) as u64 * 8)
                .max()
                .unwrap_or(0),
            "remaining" => {
                let t = &lists()?[0].trace;
                *t.list_remaining.first().ok_or("parser stopped before the size computation")? as u64
            }
            "filters_num" => self.tdc(&a[0])?.event_filters_num as u64,
            "free_hkids" => self.p.kot.free_count() as u64,
            "cpuid_oob" => self.cpuid.as_ref().ok_or("no cpuid_next ran")?.1.oob().len() as u64,
            "cpuid_result" => self.cpuid.as_ref().ok_or("no cpuid_next ran")?.0,
            k => return Err(format!("{k} is not numeric")),
        })
    }

    fn eval(&self, c: &Check) -> Result<bool, String> {
        let a = &c.args;
        let r = match &c.rhs {
            Some(rhs) => {
                let v = self.numeric(c)?;
                match rhs {
                    Rhs::Cmp(op, b) => op.eval(v, self.value(b)?),
                    Rhs::In(lo, hi) => (self.value(lo)?..=self.value(hi)?).contains(&v),
                }
            }
            None => match c.kind.as_str() {
                "readable" => {
                    let td = self.tdc(&a[0])?;
                    let (id, n) = self.field(MdContext::Td, &a[1])?;
                    (0..n).all(|i| md_read(td, MdContext::Td, None, nth(id, i), MdAccess::Host).is_ok())
                }
                "leaked" => {
                    let td = self.tdc(&a[0])?;
                    let vp = parse_u64(&a[1]).ok_or("bad vp")? as usize;
                    let v = td.vcpus.get(vp).ok_or(format!("no VP {vp}"))?;
                    let lists = &self.p.last_import;
                    let n = self.catalog.by_name(MdContext::Vp, "XBUFF").map_or(0, |e| e.num_of_fields);
                    (0..n).any(|i| {
                        let w = v.xbuff(i);
                        w != 0 && lists.iter().any(|l| l.arena.locate(w).is_some())
                    })
                }
                "filters_sorted" => event_filters_sorted(self.tdc(&a[0])?),
                "debuggable" => self.tdc(&a[0])?.attributes().debug(),
                "fatal" => self.tdc(&a[0])?.fatal.is_some(),
                "distinct" => {
                    let get = |l: &String| self.labels.get(l).copied().ok_or(format!("no probe labeled {l}"));
                    get(&a[0])? != get(&a[1])?
                }
                "op_state" => {
                    let want = OpState::parse(&a[1]).ok_or(format!("unknown op_state {}", a[1]))?;
                    self.tdc(&a[0])?.op_state == want
                }
                k => return Err(format!("{k} needs a comparison")),
            },
        };
        Ok(r != c.negate)
    }
}

/// Runs a scenario in one variant. `seed` overrides the file's seed.
pub fn run(spec: &ScenarioSpec, variant: Variant, seed: Option<u64>) -> RunReport {
    let seed = seed.unwrap_or(spec.seed);
    let mut env = Env {
        p: Platform::new(spec.mode(variant), seed),
        catalog: Catalog::builtin(),
        tds: BTreeMap::new(),
        bundles: BTreeMap::new(),
        tokens: BTreeMap::new(),
        labels: BTreeMap::new(),
        streams: BTreeMap::new(),
        key: None,
        last_err: TdxError::from(StatusWord::SUCCESS),
        cpuid: None,
        out: String::new(),
    };
    let mut statuses = Vec::new();
    let mut mismatches = Vec::new();
    let mut exploit_all = true;
    let mut exploit_any = false;
    let mut first_unmet = None;
    let _ = writeln!(env.out, "scenario: {} (mode {}, seed {seed})", spec.name, variant.name());
    if !spec.title.is_empty() {
        let _ = writeln!(env.out, "- {}", spec.title);
    }
    for line in &spec.lines {
        match &line.kind {
            LineKind::Note(t) => {
                env.say("");
                env.say(format!("[+] {t}"));
            }
            LineKind::Step { verb, args, bind, expect } => {
                let r = env.step(verb, args, bind);
                let r = match r {
                    Ok(r) => r,
                    Err(msg) => {
                        mismatches.push(format!("line {}: {verb}: {msg}", line.number));
                        env.say(format!("!! {msg}"));
                        continue;
                    }
                };
                let (st, ext) = match r {
                    Ok(()) => (StatusWord::SUCCESS, [0; 2]),
                    Err(e) => (e.status, e.ext),
                };
                statuses.push(st);
                if st != StatusWord::SUCCESS {
                    env.last_err = TdxError::with_ext(st, ext);
                }
                let show = match verb.as_str() {
                    "import_immutable" | "import_td" | "import_vp" => Some(st.return_code_line(ext)),
                    "rd" | "vprd" | "interrupt" | "plant" | "skip" | "patch" | "craft_v2" | "craft_short"
                    | "cpuid_next" => (st != StatusWord::SUCCESS).then(|| st.transcript_line()),
                    _ => Some(st.transcript_line()),
                };
                if let Some(s) = show {
                    env.say(s);
                }
                let want = expect.for_variant(variant);
                if !want.matches(st) {
                    let m = format!("line {}: {verb}: expected {want}, got {}", line.number, st.transcript_line());
                    env.say(format!("!! {m}"));
                    mismatches.push(m);
                }
            }
            LineKind::Check { when, exploit, check } => {
                let applies = match when {
                    When::Always => true,
                    When::Vulnerable => variant == Variant::Vulnerable,
                    When::Fixed => variant == Variant::Fixed,
                };
                if !applies {
                    continue;
                }
                let r = env.eval(check);
                match (exploit, r) {
                    (true, Ok(b)) => {
                        if !b && first_unmet.is_none() {
                            first_unmet = Some(format!("line {}: {check}", line.number));
                        }
                        exploit_all &= b;
                        exploit_any = true;
                        env.say(format!("[{}] exploit condition: {check}", if b { "x" } else { " " }));
                    }
                    (false, Ok(true)) => env.say(format!("[ok] {check}")),
                    (false, Ok(false)) => {
                        let m = format!("line {}: assertion failed: {check}", line.number);
                        env.say(format!("!! {m}"));
                        mismatches.push(m);
                    }
                    (_, Err(msg)) => {
                        let m = format!("line {}: {check}: {msg}", line.number);
                        env.say(format!("!! {m}"));
                        mismatches.push(m);
                        exploit_all = false;
                    }
                }
            }
        }
    }
    let verdict = if exploit_any && exploit_all { Verdict::Exploited } else { Verdict::NotExploitable };
    let mut trace_errors = Vec::new();
    for (tdr, steps) in env.p.traces() {
        if let Err(e) = validate_trace(PermissionMatrix::builtin(), steps, env.p.mode.v1) {
            trace_errors.push(format!("TD 0x{:x}: {e}", tdr * PAGE_SIZE));
        }
    }
    env.say("");
    env.say(format!("verdict: {}", verdict.name()));
    for t in &trace_errors {
        env.say(format!("!! op_state trace: {t}"));
    }
    let report = RunReport {
        name: spec.name.clone(),
        variant,
        seed,
        transcript: String::new(),
        divergence: None,
        statuses,
        mismatches,
        verdict,
        trace_errors,
        tds: env.tds,
        platform: env.p,
    };
    let divergence = (!report.passed()).then(|| {
        let first = report.mismatches.first().or(report.trace_errors.first()).cloned();
        first.unwrap_or_else(|| {
            let mut m =
                format!("expected verdict {}, got {}", Verdict::expected_for(variant).name(), report.verdict.name());
            if let Some(u) = &first_unmet {
                m.push_str(&format!("; unmet exploit condition at {u}"));
            }
            m
        })
    });
    let mut transcript = env.out;
    match &divergence {
        None => {
            let _ = writeln!(transcript, "result: PASS");
        }
        Some(d) => {
            let _ = writeln!(transcript, "result: FAIL ({d})");
        }
    }
    RunReport { transcript, divergence, ..report }
}

/// The findings suite, embedded.
pub const BUILTIN: &[(&str, &str)] = &[
    ("cve-2025-30513", include_str!("../scenarios/cve-2025-30513.scn")),
    ("cve-2025-32007", include_str!("../scenarios/cve-2025-32007.scn")),
    ("bug1", include_str!("../scenarios/bug1.scn")),
    ("bug2", include_str!("../scenarios/bug2.scn")),
    ("bug3", include_str!("../scenarios/bug3.scn")),
    ("bug4", include_str!("../scenarios/bug4.scn")),
    ("bug6", include_str!("../scenarios/bug6.scn")),
    ("bug8", include_str!("../scenarios/bug8.scn")),
    ("bug9", include_str!("../scenarios/bug9.scn")),
];

pub fn builtin(name: &str) -> Option<ScenarioSpec> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScenarioSpec::parse(text).expect("built-in scenarios parse"))
}
