// SPDX-License-Identifier: Apache-2.0
//! TD lifecycle and operation-state machines.
//!
//! The op_state permission matrix is loaded from `data/op_state_matrix.txt`
//! rather than written out here, so the conformance test can diff it
//! directly against an independent transcription.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::mode::Variant;
use crate::status::StatusWord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LifecycleState {
    HkidAssigned,
    KeysConfigured,
    Blocked,
    Teardown,
}

impl LifecycleState {
    pub fn name(self) -> &'static str {
        match self {
            LifecycleState::HkidAssigned => "TD_HKID_ASSIGNED",
            LifecycleState::KeysConfigured => "TD_KEYS_CONFIGURED",
            LifecycleState::Blocked => "TD_BLOCKED",
            LifecycleState::Teardown => "TD_TEARDOWN",
        }
    }

    /// Next lifecycle state for a lifecycle-gated leaf, or `None` when the
    /// leaf is not callable from `self`.
    pub fn advance(self, leaf: Leaf) -> Option<LifecycleState> {
        use LifecycleState::*;
        match (self, leaf) {
            (HkidAssigned, Leaf::MngKeyConfig) => Some(KeysConfigured),
            (KeysConfigured, Leaf::MngVpflushdone) => Some(Blocked),
            (Blocked, Leaf::MngKeyFreeid) => Some(Teardown),
            _ => None,
        }
    }
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

macro_rules! op_states {
    ($($var:ident = $name:literal,)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum OpState { $($var,)* }

        impl OpState {
            pub const ALL: &'static [OpState] = &[$(OpState::$var,)*];

            pub fn name(self) -> &'static str {
                match self { $(OpState::$var => $name,)* }
            }
        }
    };
}

op_states! {
    Uninitialized = "OP_STATE_UNINITIALIZED",
    Initialized = "OP_STATE_INITIALIZED",
    Runnable = "OP_STATE_RUNNABLE",
    LiveExport = "OP_STATE_LIVE_EXPORT",
    PausedExport = "OP_STATE_PAUSED_EXPORT",
    PostExport = "OP_STATE_POST_EXPORT",
    MemoryImport = "OP_STATE_MEMORY_IMPORT",
    StateImport = "OP_STATE_STATE_IMPORT",
    PostImport = "OP_STATE_POST_IMPORT",
    LiveImport = "OP_STATE_LIVE_IMPORT",
    FailedImport = "OP_STATE_FAILED_IMPORT",
    StartImport = "OP_STATE_START_IMPORT",
}

impl OpState {
    /// The eleven states present in both variants.
    pub fn base_states() -> impl Iterator<Item = OpState> {
        OpState::ALL.iter().copied().filter(|s| *s != OpState::StartImport)
    }

    pub fn parse(s: &str) -> Option<OpState> {
        let s = s.strip_prefix("OP_STATE_").unwrap_or(s);
        // The misspelling appears in the notes column of the source table.
        let s = if s == "RUNNBALE" { "RUNNABLE" } else { s };
        OpState::ALL.iter().copied().find(|st| &st.name()["OP_STATE_".len()..] == s)
    }
}

impl fmt::Display for OpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Interface {
    Host,
    Guest,
}

impl Interface {
    pub fn name(self) -> &'static str {
        match self {
            Interface::Host => "host",
            Interface::Guest => "guest",
        }
    }
}

macro_rules! leaves {
    ($($var:ident = $name:literal, $iface:ident, $gated:literal;)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Leaf { $($var,)* }

        impl Leaf {
            pub const ALL: &'static [Leaf] = &[$(Leaf::$var,)*];

            pub fn name(self) -> &'static str {
                match self { $(Leaf::$var => $name,)* }
            }

            pub fn interface(self) -> Interface {
                match self { $(Leaf::$var => Interface::$iface,)* }
            }

            /// Checked against the op_state matrix (as opposed to the
            /// lifecycle state only).
            pub fn is_op_state_gated(self) -> bool {
                match self { $(Leaf::$var => $gated,)* }
            }
        }
    };
}

leaves! {
    MngCreate = "TDH_MNG_CREATE", Host, false;
    MngKeyConfig = "TDH_MNG_KEY_CONFIG", Host, false;
    MngVpflushdone = "TDH_MNG_VPFLUSHDONE", Host, false;
    MngKeyFreeid = "TDH_MNG_KEY_FREEID", Host, false;
    MngAddcx = "TDH_MNG_ADDCX", Host, true;
    MngInit = "TDH_MNG_INIT", Host, true;
    MngRd = "TDH_MNG_RD", Host, true;
    MngWr = "TDH_MNG_WR", Host, true;
    VpFlush = "TDH_VP_FLUSH", Host, true;
    VpAddcx = "TDH_VP_ADDCX", Host, true;
    VpCreate = "TDH_VP_CREATE", Host, true;
    VpInit = "TDH_VP_INIT", Host, true;
    VpRd = "TDH_VP_RD", Host, true;
    VpWr = "TDH_VP_WR", Host, true;
    VpEnter = "TDH_VP_ENTER", Host, true;
    MemPageAdd = "TDH_MEM_PAGE_ADD", Host, true;
    MemSeptAdd = "TDH_MEM_SEPT_ADD", Host, true;
    MemPageRelocate = "TDH_MEM_PAGE_RELOCATE", Host, true;
    MemPageAug = "TDH_MEM_PAGE_AUG", Host, true;
    MemRangeBlock = "TDH_MEM_RANGE_BLOCK", Host, true;
    MemRangeUnblock = "TDH_MEM_RANGE_UNBLOCK", Host, true;
    MemRd = "TDH_MEM_RD", Host, true;
    MemWr = "TDH_MEM_WR", Host, true;
    MemPageDemote = "TDH_MEM_PAGE_DEMOTE", Host, true;
    MemPagePromote = "TDH_MEM_PAGE_PROMOTE", Host, true;
    MemSeptRd = "TDH_MEM_SEPT_RD", Host, true;
    MemPageRemove = "TDH_MEM_PAGE_REMOVE", Host, true;
    MemSeptRemove = "TDH_MEM_SEPT_REMOVE", Host, true;
    MemTrack = "TDH_MEM_TRACK", Host, true;
    MrExtend = "TDH_MR_EXTEND", Host, true;
    MrFinalize = "TDH_MR_FINALIZE", Host, true;
    ServtdBind = "TDH_SERVTD_BIND", Host, true;
    ServtdPrebind = "TDH_SERVTD_PREBIND", Host, true;
    MigStreamCreate = "TDH_MIG_STREAM_CREATE", Host, true;
    ExportStateImmutable = "TDH_EXPORT_STATE_IMMUTABLE", Host, true;
    ExportStateTd = "TDH_EXPORT_STATE_TD", Host, true;
    ExportStateVp = "TDH_EXPORT_STATE_VP", Host, true;
    ExportMem = "TDH_EXPORT_MEM", Host, true;
    ExportPause = "TDH_EXPORT_PAUSE", Host, true;
    ExportTrack = "TDH_EXPORT_TRACK", Host, true;
    ExportAbort = "TDH_EXPORT_ABORT", Host, true;
    ExportBlockw = "TDH_EXPORT_BLOCKW", Host, true;
    ExportUnblockw = "TDH_EXPORT_UNBLOCKW", Host, true;
    ExportRestore = "TDH_EXPORT_RESTORE", Host, true;
    ImportStateImmutable = "TDH_IMPORT_STATE_IMMUTABLE", Host, true;
    ImportStateTd = "TDH_IMPORT_STATE_TD", Host, true;
    ImportStateVp = "TDH_IMPORT_STATE_VP", Host, true;
    ImportMem = "TDH_IMPORT_MEM", Host, true;
    ImportTrack = "TDH_IMPORT_TRACK", Host, true;
    ImportCommit = "TDH_IMPORT_COMMIT", Host, true;
    ImportEnd = "TDH_IMPORT_END", Host, true;
    ImportAbort = "TDH_IMPORT_ABORT", Host, true;
    ServtdRd = "TDG_SERVTD_RD", Guest, true;
    ServtdWr = "TDG_SERVTD_WR", Guest, true;
}

impl Leaf {
    /// Accepts names with or without the `_LEAF` suffix.
    pub fn parse(s: &str) -> Option<Leaf> {
        let s = s.strip_suffix("_LEAF").unwrap_or(s);
        Leaf::ALL.iter().copied().find(|l| l.name() == s)
    }

    pub fn is_import(self) -> bool {
        matches!(
            self,
            Leaf::ImportStateImmutable
                | Leaf::ImportStateTd
                | Leaf::ImportStateVp
                | Leaf::ImportMem
                | Leaf::ImportTrack
                | Leaf::ImportCommit
                | Leaf::ImportEnd
                | Leaf::ImportAbort
        )
    }

    pub fn op_state_gated(iface: Interface) -> impl Iterator<Item = Leaf> {
        Leaf::ALL.iter().copied().filter(move |l| l.is_op_state_gated() && l.interface() == iface)
    }
}

impl fmt::Display for Leaf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a call ended, as far as the state machine cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// Succeeded and completed its operation.
    Completed,
    /// Succeeded without completing a phase (e.g. an epoch token).
    Continued,
    /// Non-fatal error; the call had no lasting effect on op_state.
    Rejected,
    /// Fatal error latched by an import.
    Failed,
    /// Returned INTERRUPTED_RESUMABLE.
    Interrupted,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Continued => "continued",
            Outcome::Rejected => "rejected",
            Outcome::Failed => "failed",
            Outcome::Interrupted => "interrupted",
        }
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        [Outcome::Completed, Outcome::Continued, Outcome::Rejected, Outcome::Failed, Outcome::Interrupted]
            .into_iter()
            .find(|o| o.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Table,
    TableProse,
    Prose,
    Remediation,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Table => "table",
            Provenance::TableProse => "table+prose",
            Provenance::Prose => "prose",
            Provenance::Remediation => "remediation",
        }
    }

    fn parse(s: &str) -> Option<Provenance> {
        match s {
            "table" => Some(Provenance::Table),
            "table+prose" => Some(Provenance::TableProse),
            "prose" => Some(Provenance::Prose),
            "remediation" => Some(Provenance::Remediation),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatrixEntry {
    pub allowed: bool,
    pub on_success: Option<OpState>,
    pub on_failure: Option<OpState>,
    pub provenance: Provenance,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatrixError {
    #[error("line {0}: {1}")]
    Parse(usize, String),
    #[error("{0} is not checked against the {1} op_state matrix")]
    UnknownLeaf(String, &'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermissionMatrix {
    entries: BTreeMap<(Interface, OpState, Leaf), MatrixEntry>,
}

fn parse_next(n: usize, s: &str) -> Result<Option<OpState>, MatrixError> {
    if s == "-" {
        return Ok(None);
    }
    OpState::parse(s).map(Some).ok_or_else(|| MatrixError::Parse(n, format!("unknown state {s}")))
}

impl PermissionMatrix {
    pub fn parse(text: &str) -> Result<PermissionMatrix, MatrixError> {
        let mut entries = BTreeMap::new();
        let mut version = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !version {
                if line != "version 1" {
                    return Err(MatrixError::Parse(n, "expected 'version 1'".into()));
                }
                version = true;
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [iface, state, leaf, allowed, succ, fail, prov] = cols[..] else {
                return Err(MatrixError::Parse(n, format!("expected 7 columns, got {}", cols.len())));
            };
            let iface = match iface {
                "host" => Interface::Host,
                "guest" => Interface::Guest,
                _ => return Err(MatrixError::Parse(n, format!("unknown interface {iface}"))),
            };
            let state = OpState::parse(state).ok_or_else(|| MatrixError::Parse(n, format!("unknown state {state}")))?;
            let leaf = Leaf::parse(leaf).ok_or_else(|| MatrixError::Parse(n, format!("unknown leaf {leaf}")))?;
            if leaf.interface() != iface || !leaf.is_op_state_gated() {
                return Err(MatrixError::Parse(n, format!("{leaf} does not belong in the {} table", iface.name())));
            }
            let allowed = match allowed {
                "yes" => true,
                "no" => false,
                _ => return Err(MatrixError::Parse(n, format!("bad allowed column {allowed}"))),
            };
            let entry = MatrixEntry {
                allowed,
                on_success: parse_next(n, succ)?,
                on_failure: parse_next(n, fail)?,
                provenance: Provenance::parse(prov)
                    .ok_or_else(|| MatrixError::Parse(n, format!("unknown provenance {prov}")))?,
            };
            if entries.insert((iface, state, leaf), entry).is_some() {
                return Err(MatrixError::Parse(n, format!("duplicate entry {state} {leaf}")));
            }
        }
        if !version {
            return Err(MatrixError::Parse(0, "missing version line".into()));
        }
        Ok(PermissionMatrix { entries })
    }

    pub fn builtin() -> &'static PermissionMatrix {
        static M: OnceLock<PermissionMatrix> = OnceLock::new();
        M.get_or_init(|| {
            PermissionMatrix::parse(include_str!("../data/op_state_matrix.txt")).expect("shipped matrix parses")
        })
    }

    pub fn entry(&self, iface: Interface, state: OpState, leaf: Leaf) -> Option<&MatrixEntry> {
        self.entries.get(&(iface, state, leaf))
    }

    pub fn is_allowed(&self, state: OpState, leaf: Leaf, iface: Interface) -> Result<bool, MatrixError> {
        if leaf.interface() != iface || !leaf.is_op_state_gated() {
            return Err(MatrixError::UnknownLeaf(leaf.name().into(), iface.name()));
        }
        Ok(self.entry(iface, state, leaf).is_some_and(|e| e.allowed))
    }

    /// Allowed leaves of one row, in fixture order of the leaf enum.
    pub fn allowed_leaves(&self, iface: Interface, state: OpState) -> Vec<Leaf> {
        Leaf::op_state_gated(iface).filter(|&l| self.is_allowed(state, l, iface) == Ok(true)).collect()
    }

    /// State after a call. `v1` selects the import-start behavior.
    pub fn transition(&self, state: OpState, leaf: Leaf, outcome: Outcome, v1: Variant) -> Result<OpState, StatusWord> {
        if self.is_allowed(state, leaf, leaf.interface()) != Ok(true) {
            return Err(StatusWord::OP_STATE_INCORRECT);
        }
        // Fixed mode: the first import touch leaves UNINITIALIZED for good.
        let from = if v1 == Variant::Fixed && state == OpState::Uninitialized && leaf == Leaf::ImportStateImmutable {
            OpState::StartImport
        } else {
            state
        };
        let e = self.entry(leaf.interface(), from, leaf).ok_or(StatusWord::OP_STATE_INCORRECT)?;
        Ok(match outcome {
            Outcome::Completed => e.on_success.unwrap_or(from),
            Outcome::Failed => e.on_failure.unwrap_or(from),
            Outcome::Continued | Outcome::Rejected | Outcome::Interrupted => from,
        })
    }

    /// The host table as text, one row per state.
    pub fn render(&self, include_start_import: bool) -> String {
        let mut out = String::new();
        for &s in OpState::ALL {
            if s == OpState::StartImport && !include_start_import {
                continue;
            }
            let leaves: Vec<&str> = self.allowed_leaves(Interface::Host, s).iter().map(|l| l.name()).collect();
            out.push_str(&format!("{}: {}\n", s.name(), leaves.join(" ")));
        }
        out
    }

    pub fn render_guest(&self) -> String {
        let mut out = String::new();
        for s in OpState::base_states() {
            let leaves: Vec<&str> = self.allowed_leaves(Interface::Guest, s).iter().map(|l| l.name()).collect();
            out.push_str(&format!("{}: {}\n", s.name(), leaves.join(" ")));
        }
        out
    }
}

/// One recorded op_state step of an engine run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub from: OpState,
    pub leaf: Leaf,
    pub outcome: Outcome,
    pub to: OpState,
}

impl fmt::Display for TraceStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} --{}[{}]--> {}", self.from, self.leaf, self.outcome.name(), self.to)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("step {index} ({step}): {reason}")]
pub struct TraceError {
    pub index: usize,
    pub step: TraceStep,
    pub reason: String,
}

/// Checks that a trace is a path in the matrix graph: each step starts
/// where the previous ended, is allowed, and lands where the matrix says.
pub fn validate_trace(m: &PermissionMatrix, steps: &[TraceStep], v1: Variant) -> Result<(), TraceError> {
    let mut prev: Option<OpState> = None;
    for (index, step) in steps.iter().enumerate() {
        let err = |reason: String| TraceError { index, step: *step, reason };
        if let Some(p) = prev {
            if p != step.from {
                return Err(err(format!("starts in {} but previous step ended in {p}", step.from)));
            }
        }
        if step.from == OpState::StartImport && v1 == Variant::Vulnerable {
            return Err(err("START_IMPORT is not reachable in vulnerable mode".into()));
        }
        match m.transition(step.from, step.leaf, step.outcome, v1) {
            Ok(to) if to == step.to => {}
            Ok(to) => return Err(err(format!("matrix gives {to}"))),
            Err(_) => return Err(err("leaf not allowed in this state".into())),
        }
        prev = Some(step.to);
    }
    Ok(())
}
