// SPDX-License-Identifier: Apache-2.0
//! The TD aggregate: control-structure state, per-VP state, the metadata
//! store, configuration checks, event filters, the key ownership table and
//! service-TD binding handles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use sha2::{Digest, Sha384};

use crate::catalog::{Catalog, FieldEntry, FieldKind, FieldPos, Phase};
use crate::codec::{FieldWrite, MetadataSink, MetadataSource};
use crate::crypto::{MigStreamContext, MigrationSessionKey};
use crate::field_id::{MdContext, MdFieldId};
use crate::mode::Variant;
use crate::state_machine::{Interface, Leaf, LifecycleState, OpState, PermissionMatrix};
use crate::status::{operand, StatusWord};

pub const TDCS_PAGES: usize = 4;
pub const SEPT_ROOT_PAGE_INDEX: usize = 3;
pub const TDVPS_PAGES: usize = 3;
pub const MAX_VCPUS_PER_TD: u32 = 576;
pub const MAX_SERVTDS: usize = 4;
pub const MAX_EVENT_FILTERS: usize = 32;
pub const MAX_EXPORT_COUNT: u64 = 0x7FFF_FFFF;
pub const VIRT_TSC_FREQUENCY_MIN: u64 = 4;
pub const VIRT_TSC_FREQUENCY_MAX: u64 = 400;
pub const MIN_HP_LOCK_TIMEOUT_USEC: u64 = 10_000;
pub const MAX_HP_LOCK_TIMEOUT_USEC: u64 = 100_000_000;
pub const DEFAULT_HP_LOCK_TIMEOUT_USEC: u64 = MIN_HP_LOCK_TIMEOUT_USEC;
pub const NULL_PA: u64 = 0;

// ---------------------------------------------------------------------
// Attributes and XFAM

/// TD attribute bitmap. Bits 7:0 are the TUD group, 31:8 SEC, 63:32 OTHER.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TdAttributes(pub u64);

impl TdAttributes {
    pub const DEBUG: u64 = 1 << 0;
    pub const SEPT_VE_DISABLE: u64 = 1 << 28;
    pub const MIGRATABLE: u64 = 1 << 29;
    pub const PERFMON: u64 = 1 << 63;
    pub const KNOWN: u64 = Self::DEBUG | Self::SEPT_VE_DISABLE | Self::MIGRATABLE | Self::PERFMON;

    pub fn debug(self) -> bool {
        self.0 & Self::DEBUG != 0
    }
    pub fn migratable(self) -> bool {
        self.0 & Self::MIGRATABLE != 0
    }
    pub fn perfmon(self) -> bool {
        self.0 & Self::PERFMON != 0
    }
    pub fn sept_ve_disable(self) -> bool {
        self.0 & Self::SEPT_VE_DISABLE != 0
    }
    pub fn tud(self) -> u64 {
        self.0 & 0xFF
    }
    pub fn sec(self) -> u64 {
        (self.0 >> 8) & 0xFF_FFFF
    }
    pub fn other(self) -> u64 {
        self.0 >> 32
    }

    pub fn flags(self) -> String {
        let names: Vec<&str> = [
            (self.debug(), "debug"),
            (self.sept_ve_disable(), "sept_ve_disable"),
            (self.migratable(), "migratable"),
            (self.perfmon(), "perfmon"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "-".into()
        } else {
            names.join(",")
        }
    }
}

pub fn verify_td_attributes(attrs: TdAttributes, is_import: bool) -> bool {
    if attrs.0 & !TdAttributes::KNOWN != 0 {
        return false;
    }
    if attrs.migratable() {
        if attrs.debug() || attrs.perfmon() {
            return false;
        }
    } else if is_import {
        return false;
    }
    true
}

pub const XFAM_X87: u64 = 1 << 0;
pub const XFAM_SSE: u64 = 1 << 1;
pub const XFAM_SUPPORTED: u64 = 0x0000_0000_0006_02FF;

pub fn check_xfam(xfam: u64) -> bool {
    xfam & (XFAM_X87 | XFAM_SSE) == (XFAM_X87 | XFAM_SSE) && xfam & !XFAM_SUPPORTED == 0
}

pub fn check_guest_xcr0_value(xcr0: u64, xfam: u64) -> bool {
    xcr0 & XFAM_X87 != 0 && xcr0 & !xfam == 0
}

/// GPA range check for a TD with the given GPAW. `private_only` rejects
/// addresses with the shared bit set.
pub fn check_gpa_validity(gpa: u64, gpaw: bool, private_only: bool) -> bool {
    let width = if gpaw { 52 } else { 48 };
    if gpa >> width != 0 {
        return false;
    }
    !(private_only && gpa & (1 << (width - 1)) != 0)
}

// ---------------------------------------------------------------------
// EPTP

pub const LVL_PT: u8 = 0;
pub const LVL_PML4: u8 = 3;
pub const LVL_PML5: u8 = 4;
pub const MT_UC: u8 = 0;
pub const MT_WB: u8 = 6;

/// EPT pointer view: bits 2:0 memory type, 5:3 page-walk length minus
/// one, bit 6 A/D enable, bit 7 supervisor shadow stack control, 51:12
/// root page.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Eptp(pub u64);

impl Eptp {
    const BASE_MASK: u64 = 0x000F_FFFF_FFFF_F000;

    pub fn new(ps_mt: u8, pwl: u8, ad: bool, sss: bool, base_page: u64) -> Eptp {
        Eptp(
            (ps_mt as u64 & 7)
                | (pwl as u64 & 7) << 3
                | (ad as u64) << 6
                | (sss as u64) << 7
                | (base_page << 12) & Self::BASE_MASK,
        )
    }
    pub fn ept_ps_mt(self) -> u8 {
        (self.0 & 7) as u8
    }
    pub fn ept_pwl(self) -> u8 {
        ((self.0 >> 3) & 7) as u8
    }
    pub fn enable_ad_bits(self) -> bool {
        self.0 & (1 << 6) != 0
    }
    pub fn enable_sss_control(self) -> bool {
        self.0 & (1 << 7) != 0
    }
    pub fn base_pa(self) -> u64 {
        (self.0 & Self::BASE_MASK) >> 12
    }
    pub fn with_base_pa(self, page: u64) -> Eptp {
        Eptp((self.0 & !Self::BASE_MASK) | ((page << 12) & Self::BASE_MASK))
    }
}

/// Validates EPT controls against GPAW, then stores both with the root
/// replaced by the TD's SEPT root page.
pub fn verify_and_set_td_eptp_controls(td: &mut TdComplex, gpaw: bool, eptp: Eptp) -> bool {
    if eptp.ept_pwl() != LVL_PML4 && eptp.ept_pwl() != LVL_PML5 {
        return false;
    }
    if gpaw && eptp.ept_pwl() < LVL_PML5 {
        return false;
    }
    let Some(root) = td.sept_root() else { return false };
    td.set_gpaw(gpaw);
    td.set(MdContext::Td, keys().eptp, eptp.with_base_pa(root).0);
    true
}

// ---------------------------------------------------------------------
// TD creation parameters

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TdParams {
    pub attributes: u64,
    pub xfam: u64,
    pub max_vcpus: u32,
    pub gpaw: bool,
    /// EPT controls; the root page is filled in by the module.
    pub eptp: Eptp,
    pub tsc_frequency: u64,
    pub mrconfigid: [u64; 6],
    pub mrowner: [u64; 6],
    pub mrownerconfig: [u64; 6],
}

impl Default for TdParams {
    fn default() -> Self {
        TdParams {
            attributes: TdAttributes::MIGRATABLE,
            xfam: XFAM_X87 | XFAM_SSE,
            max_vcpus: 1,
            gpaw: false,
            eptp: Eptp::new(MT_WB, LVL_PML4, true, false, 0),
            tsc_frequency: 100,
            mrconfigid: [0; 6],
            mrowner: [0; 6],
            mrownerconfig: [0; 6],
        }
    }
}

/// Validates and applies the TD parameters of an init call.
///
/// The vulnerable variant writes each value as soon as it is checked and
/// leaves earlier writes in place when a later check fails. The fixed
/// variant checks everything first and writes nothing on failure.
pub fn read_and_set_td_configurations(td: &mut TdComplex, p: &TdParams, v: Variant) -> Result<(), StatusWord> {
    let k = keys();
    let attrs = TdAttributes(p.attributes);
    if v == Variant::Vulnerable {
        td.set(MdContext::Td, k.num_vcpus, 0);
        if !verify_td_attributes(attrs, false) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::ATTRIBUTES));
        }
        td.set(MdContext::Td, k.attributes, attrs.0);
        td.set(MdContext::Td, k.td_ctls, attrs.sept_ve_disable() as u64);
        if !check_xfam(p.xfam) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::XFAM));
        }
        td.set(MdContext::Td, k.xfam, p.xfam);
        if p.max_vcpus == 0 || p.max_vcpus > MAX_VCPUS_PER_TD {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::NUM_VCPUS));
        }
        td.set(MdContext::Td, k.num_vcpus, p.max_vcpus as u64);
        if !(VIRT_TSC_FREQUENCY_MIN..=VIRT_TSC_FREQUENCY_MAX).contains(&p.tsc_frequency) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::EXEC_CONTROLS));
        }
        td.set(MdContext::Td, k.tsc_frequency, p.tsc_frequency);
        if !verify_and_set_td_eptp_controls(td, p.gpaw, p.eptp) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::EPTP));
        }
    } else {
        if !verify_td_attributes(attrs, false) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::ATTRIBUTES));
        }
        if !check_xfam(p.xfam) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::XFAM));
        }
        if p.max_vcpus == 0 || p.max_vcpus > MAX_VCPUS_PER_TD {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::NUM_VCPUS));
        }
        if !(VIRT_TSC_FREQUENCY_MIN..=VIRT_TSC_FREQUENCY_MAX).contains(&p.tsc_frequency) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::EXEC_CONTROLS));
        }
        let mut scratch = td.clone();
        if !verify_and_set_td_eptp_controls(&mut scratch, p.gpaw, p.eptp) {
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::EPTP));
        }
        td.set(MdContext::Td, k.attributes, attrs.0);
        td.set(MdContext::Td, k.td_ctls, attrs.sept_ve_disable() as u64);
        td.set(MdContext::Td, k.xfam, p.xfam);
        td.set(MdContext::Td, k.num_vcpus, p.max_vcpus as u64);
        td.set(MdContext::Td, k.tsc_frequency, p.tsc_frequency);
        verify_and_set_td_eptp_controls(td, p.gpaw, p.eptp);
    }
    td.set(MdContext::Td, k.hp_lock_timeout, DEFAULT_HP_LOCK_TIMEOUT_USEC);
    td.set_multi(MdContext::Td, k.virtual_tsc, &[p.tsc_frequency, 0]);
    td.tsc_virt_params_valid = true;
    td.set_multi(MdContext::Td, k.mrconfigid, &p.mrconfigid);
    td.set_multi(MdContext::Td, k.mrowner, &p.mrowner);
    td.set_multi(MdContext::Td, k.mrownerconfig, &p.mrownerconfig);
    Ok(())
}

// ---------------------------------------------------------------------
// Event filters

/// One host-supplied filter: event_select 7:0, reserved 15:8, umask 31:16,
/// negative bit 32, umask_mask 63:48.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventFilter(pub u64);

impl EventFilter {
    pub fn new(event_select: u8, umask: u8) -> EventFilter {
        EventFilter(event_select as u64 | (umask as u64) << 16 | 0xFFFF << 48)
    }
    pub fn event_select(self) -> u8 {
        self.0 as u8
    }
    pub fn reserved_0(self) -> u64 {
        (self.0 >> 8) & 0xFF
    }
    pub fn umask(self) -> u64 {
        (self.0 >> 16) & 0xFFFF
    }
    pub fn negative(self) -> bool {
        self.0 & (1 << 32) != 0
    }
    pub fn umask_mask(self) -> u64 {
        self.0 >> 48
    }
    pub fn is_legal(self) -> bool {
        self.reserved_0() == 0 && self.umask() <= 0xFF && !self.negative() && self.umask_mask() == 0xFFFF
    }
    /// Sort key as stored by the module.
    pub fn internal(self) -> u16 {
        self.event_select() as u16 | (self.umask() as u16 & 0xFF) << 8
    }
}

/// Count and entries as passed by the host. Entries past the end of
/// `entries` read as zero, like untouched memory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventFiltersInfo {
    pub count: u16,
    pub entries: Vec<EventFilter>,
}

impl EventFiltersInfo {
    pub fn of(entries: Vec<EventFilter>) -> Self {
        EventFiltersInfo { count: entries.len() as u16, entries }
    }
    fn get(&self, i: usize) -> EventFilter {
        self.entries.get(i).copied().unwrap_or_default()
    }
}

pub fn init_event_filters(
    td: &mut TdComplex,
    event_filtering: bool,
    info: &EventFiltersInfo,
    v: Variant,
) -> Result<(), StatusWord> {
    if !event_filtering || !td.attributes().perfmon() {
        return Ok(());
    }
    let n = info.count as usize;
    if n >= MAX_EVENT_FILTERS {
        return Err(StatusWord::OPERAND_INVALID.with_operand(operand::R8));
    }
    if v == Variant::Vulnerable {
        td.event_filters_num = info.count;
        for i in 0..n {
            let f = info.get(i);
            if !f.is_legal() {
                return Err(StatusWord::EVENT_FILTER_INVALID.with_operand(i as u32));
            }
            let internal = f.internal();
            if i != 0 && td.event_filters[i - 1] >= internal {
                return Err(StatusWord::EVENT_FILTER_ORDER_INVALID.with_operand(i as u32));
            }
            td.event_filters[i] = internal;
        }
        return Ok(());
    }
    let mut staged = Vec::with_capacity(n);
    let mut fail = None;
    for i in 0..n {
        let f = info.get(i);
        if !f.is_legal() {
            fail = Some(StatusWord::EVENT_FILTER_INVALID.with_operand(i as u32));
            break;
        }
        let internal = f.internal();
        if staged.last().is_some_and(|&prev| prev >= internal) {
            fail = Some(StatusWord::EVENT_FILTER_ORDER_INVALID.with_operand(i as u32));
            break;
        }
        staged.push(internal);
    }
    td.event_filters = [0; MAX_EVENT_FILTERS];
    if let Some(s) = fail {
        td.event_filters_num = 0;
        return Err(s);
    }
    td.event_filters[..n].copy_from_slice(&staged);
    td.event_filters_num = info.count;
    Ok(())
}

/// Binary search over the active filters. No filters means no filtering.
pub fn is_event_allowed(td: &TdComplex, event_select: u8, umask: u8) -> bool {
    let n = (td.event_filters_num as usize).min(MAX_EVENT_FILTERS);
    if n == 0 {
        return true;
    }
    let key = event_select as u16 | (umask as u16) << 8;
    td.event_filters[..n].binary_search(&key).is_ok()
}

/// Whether the active filters are strictly ascending.
pub fn event_filters_sorted(td: &TdComplex) -> bool {
    let n = (td.event_filters_num as usize).min(MAX_EVENT_FILTERS);
    td.event_filters[..n].windows(2).all(|w| w[0] < w[1])
}

// ---------------------------------------------------------------------
// Key ownership table

pub const DEFAULT_KOT_SIZE: usize = 64;
pub const TDMR_INFO_ENTRY_PTR_ARRAY_ALIGNMENT: u64 = 512;
/// Host physical address width; bits above it carry the HKID.
pub const MAX_PA_BITS: u32 = 46;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KotState {
    HkidFree,
    HkidReserved,
    HkidAssigned,
    HkidFlushed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KotEntry {
    pub state: KotState,
    pub wbinvd_bitmap: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Kot {
    pub entries: Vec<KotEntry>,
    /// HKID reserved for the module by a successful configuration.
    pub module_hkid: Option<usize>,
}

impl Kot {
    pub fn new(size: usize) -> Kot {
        Kot { entries: vec![KotEntry { state: KotState::HkidFree, wbinvd_bitmap: 0 }; size], module_hkid: None }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn state(&self, hkid: usize) -> Option<KotState> {
        self.entries.get(hkid).map(|e| e.state)
    }

    pub fn free_count(&self) -> usize {
        self.entries.iter().filter(|e| e.state == KotState::HkidFree).count()
    }

    pub fn first_free(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.state == KotState::HkidFree)
    }

    pub fn assign(&mut self, hkid: usize) -> Result<(), StatusWord> {
        match self.entries.get_mut(hkid) {
            None => Err(StatusWord::OPERAND_INVALID.with_operand(operand::HKID)),
            Some(e) if e.state != KotState::HkidFree => Err(StatusWord::HKID_NOT_FREE),
            Some(e) => {
                e.state = KotState::HkidAssigned;
                Ok(())
            }
        }
    }

    pub fn flush(&mut self, hkid: usize) {
        if let Some(e) = self.entries.get_mut(hkid) {
            e.state = KotState::HkidFlushed;
            e.wbinvd_bitmap = 0;
        }
    }

    pub fn free(&mut self, hkid: usize) {
        if let Some(e) = self.entries.get_mut(hkid) {
            e.state = KotState::HkidFree;
        }
    }
}

/// Platform configuration step: reserves the module HKID, then checks the
/// TDMR info pointers. The vulnerable variant keeps the reservation when a
/// pointer is bad.
pub fn sys_config_reserve_hkid(kot: &mut Kot, hkid: usize, tdmr_entries: &[u64], v: Variant) -> Result<(), StatusWord> {
    if kot.module_hkid.is_some() {
        return Err(StatusWord::SYS_STATE_INCORRECT);
    }
    match kot.state(hkid) {
        None => return Err(StatusWord::OPERAND_INVALID.with_operand(operand::HKID)),
        Some(KotState::HkidFree) => {}
        Some(_) => return Err(StatusWord::HKID_NOT_FREE),
    }
    kot.entries[hkid].state = KotState::HkidReserved;
    for &e in tdmr_entries {
        if e % TDMR_INFO_ENTRY_PTR_ARRAY_ALIGNMENT != 0 || e >> MAX_PA_BITS != 0 {
            if v == Variant::Fixed {
                kot.entries[hkid].state = KotState::HkidFree;
            }
            return Err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX));
        }
    }
    kot.module_hkid = Some(hkid);
    Ok(())
}

// ---------------------------------------------------------------------
// Service-TD binding handles

pub type Uuid = [u64; 4];

const SLOT_MASK: u64 = 0xFFF;
const PAGE_MASK: u64 = (1 << 40) - 1;

/// Handle as seen by the service TD: slot 11:0, TDR page 51:12, reserved
/// 63:52. The raw value is offset by the service TD's first UUID quadword.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServtdBindingHandle {
    pub binding_slot: u16,
    pub tdr_page: u64,
    pub reserved: u16,
    pub raw: u64,
}

impl ServtdBindingHandle {
    /// Field view of a raw handle, without the UUID adjustment.
    pub fn from_raw(raw: u64) -> Self {
        ServtdBindingHandle {
            binding_slot: (raw & SLOT_MASK) as u16,
            tdr_page: (raw >> 12) & PAGE_MASK,
            reserved: (raw >> 52) as u16,
            raw,
        }
    }
}

pub fn make_binding_handle(slot: u16, tdr_page: u64, servtd_uuid: &Uuid) -> ServtdBindingHandle {
    let packed = (slot as u64 & SLOT_MASK) | (tdr_page & PAGE_MASK) << 12;
    ServtdBindingHandle::from_raw(packed.wrapping_add(servtd_uuid[0]))
}

/// Returns (tdr_page, slot).
pub fn break_binding_handle(handle: ServtdBindingHandle, servtd_uuid: &Uuid) -> (u64, u16) {
    let h = ServtdBindingHandle::from_raw(handle.raw.wrapping_sub(servtd_uuid[0]));
    (h.tdr_page, h.binding_slot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServtdBinding {
    pub uuid: Uuid,
    pub info_hash: u64,
}

// ---------------------------------------------------------------------
// Metadata store

/// Flat element store for one context, keyed by (class code, field code).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetadataStore {
    values: BTreeMap<(u8, u32), u64>,
}

impl MetadataStore {
    pub fn get(&self, id: MdFieldId) -> u64 {
        self.values.get(&id.key()).copied().unwrap_or(0)
    }

    pub fn set(&mut self, id: MdFieldId, v: u64) {
        self.values.insert(id.key(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u8, u32), &u64)> {
        self.values.iter()
    }
}

/// Element ids of the fields with typed accessors.
#[derive(Debug)]
pub struct Keys {
    pub td_uuid: MdFieldId,
    pub num_vcpus: MdFieldId,
    pub attributes: MdFieldId,
    pub xfam: MdFieldId,
    pub gpaw: MdFieldId,
    pub tsc_frequency: MdFieldId,
    pub hp_lock_timeout: MdFieldId,
    pub td_ctls: MdFieldId,
    pub eptp: MdFieldId,
    pub mrtd: MdFieldId,
    pub mrconfigid: MdFieldId,
    pub mrowner: MdFieldId,
    pub mrownerconfig: MdFieldId,
    pub virtual_tsc: MdFieldId,
    pub mig_dec_key: MdFieldId,
    pub mig_enc_key: MdFieldId,
    pub export_count: MdFieldId,
    pub x2apic_ids: MdFieldId,
    pub rcx: MdFieldId,
    pub rip: MdFieldId,
    pub rflags: MdFieldId,
    pub xcr0: MdFieldId,
    pub tsc_deadline: MdFieldId,
    pub xbuff: MdFieldId,
}

pub fn keys() -> &'static Keys {
    static K: OnceLock<Keys> = OnceLock::new();
    K.get_or_init(|| {
        let c = Catalog::builtin();
        let td = |n: &str| c.by_name(MdContext::Td, n).unwrap_or_else(|| panic!("catalog lacks {n}")).element_id(0, 0);
        let vp = |n: &str| c.by_name(MdContext::Vp, n).unwrap_or_else(|| panic!("catalog lacks {n}")).element_id(0, 0);
        Keys {
            td_uuid: td("TD_UUID"),
            num_vcpus: td("NUM_VCPUS"),
            attributes: td("ATTRIBUTES"),
            xfam: td("XFAM"),
            gpaw: td("GPAW"),
            tsc_frequency: td("TSC_FREQUENCY"),
            hp_lock_timeout: td("HP_LOCK_TIMEOUT"),
            td_ctls: td("TD_CTLS"),
            eptp: td("EPTP"),
            mrtd: td("MRTD"),
            mrconfigid: td("MRCONFIGID"),
            mrowner: td("MROWNER"),
            mrownerconfig: td("MROWNERCONFIG"),
            virtual_tsc: td("VIRTUAL_TSC"),
            mig_dec_key: td("MIG_DEC_KEY"),
            mig_enc_key: td("MIG_ENC_KEY"),
            export_count: td("EXPORT_COUNT"),
            x2apic_ids: td("X2APIC_IDS"),
            rcx: vp("RCX"),
            rip: vp("RIP"),
            rflags: vp("RFLAGS"),
            xcr0: vp("XCR0"),
            tsc_deadline: vp("TSC_DEADLINE"),
            xbuff: vp("XBUFF"),
        }
    })
}

/// Id of element `n` counted from `base`.
pub fn nth(base: MdFieldId, n: u32) -> MdFieldId {
    let mut id = base;
    id.field_code += n;
    id
}

// ---------------------------------------------------------------------
// VP and TD state

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VcpuState {
    pub tdvpr_page: u64,
    pub tdcx_pages: Vec<u64>,
    pub initialized: bool,
    pub migrated: bool,
    pub md: MetadataStore,
}

impl VcpuState {
    pub fn xcr0(&self) -> u64 {
        self.md.get(keys().xcr0)
    }
    pub fn tsc_deadline(&self) -> u64 {
        self.md.get(keys().tsc_deadline)
    }
    pub fn xbuff(&self, i: u32) -> u64 {
        self.md.get(nth(keys().xbuff, i))
    }
}

#[derive(Clone, Debug)]
pub struct TdComplex {
    pub tdr_page: u64,
    pub hkid: usize,
    pub lifecycle: LifecycleState,
    pub op_state: OpState,
    pub tdcx_pages: Vec<u64>,
    /// TD-context metadata.
    pub md: MetadataStore,
    /// Platform-context values this TD is checked against.
    pub sys: MetadataStore,
    pub vcpus: Vec<VcpuState>,
    pub num_migrated_vcpus: u32,
    pub event_filters: [u16; MAX_EVENT_FILTERS],
    pub event_filters_num: u16,
    pub bindings: Vec<Option<ServtdBinding>>,
    pub mig_dec_key_set: bool,
    pub mig_enc_key_set: bool,
    pub tsc_virt_params_valid: bool,
    pub streams: Vec<MigStreamContext>,
    /// Private pages by GPA, holding opaque page tokens.
    pub pages: BTreeMap<u64, u64>,
    /// GPAs (page-aligned) with a mapped SEPT entry.
    pub sept: BTreeSet<u64>,
    measurement: Sha384,
    pub finalized: bool,
    /// Set once a fatal condition has frozen the TD.
    pub fatal: Option<StatusWord>,
    /// Exclusive TDR lock held by an in-flight call.
    pub locked: bool,
    pub export_epoch: u64,
    pub import_epoch: u64,
    /// Any import leaf has executed on this TD.
    pub import_touched: bool,
}

impl TdComplex {
    pub fn new(tdr_page: u64, hkid: usize, sys: MetadataStore) -> TdComplex {
        TdComplex {
            tdr_page,
            hkid,
            lifecycle: LifecycleState::HkidAssigned,
            op_state: OpState::Uninitialized,
            tdcx_pages: Vec::new(),
            md: MetadataStore::default(),
            sys,
            vcpus: Vec::new(),
            num_migrated_vcpus: 0,
            event_filters: [0; MAX_EVENT_FILTERS],
            event_filters_num: 0,
            bindings: vec![None; MAX_SERVTDS],
            mig_dec_key_set: false,
            mig_enc_key_set: false,
            tsc_virt_params_valid: false,
            streams: Vec::new(),
            pages: BTreeMap::new(),
            sept: BTreeSet::new(),
            measurement: Sha384::new(),
            finalized: false,
            fatal: None,
            locked: false,
            export_epoch: 0,
            import_epoch: 0,
            import_touched: false,
        }
    }

    fn store(&self, ctx: MdContext, vp: Option<usize>) -> Option<&MetadataStore> {
        match (ctx, vp) {
            (MdContext::Td, _) => Some(&self.md),
            (MdContext::Sys, _) => Some(&self.sys),
            (MdContext::Vp, Some(i)) => self.vcpus.get(i).map(|v| &v.md),
            (MdContext::Vp, None) => None,
        }
    }

    fn store_mut(&mut self, ctx: MdContext, vp: Option<usize>) -> Option<&mut MetadataStore> {
        match (ctx, vp) {
            (MdContext::Td, _) => Some(&mut self.md),
            (MdContext::Sys, _) => Some(&mut self.sys),
            (MdContext::Vp, Some(i)) => self.vcpus.get_mut(i).map(|v| &mut v.md),
            (MdContext::Vp, None) => None,
        }
    }

    pub fn get(&self, ctx: MdContext, id: MdFieldId) -> u64 {
        self.store(ctx, None).map_or(0, |s| s.get(id))
    }

    pub fn set(&mut self, ctx: MdContext, id: MdFieldId, v: u64) {
        if let Some(s) = self.store_mut(ctx, None) {
            s.set(id, v);
        }
    }

    pub fn set_multi(&mut self, ctx: MdContext, base: MdFieldId, vals: &[u64]) {
        for (i, &v) in vals.iter().enumerate() {
            self.set(ctx, nth(base, i as u32), v);
        }
    }

    pub fn get_multi(&self, ctx: MdContext, base: MdFieldId, n: u32) -> Vec<u64> {
        (0..n).map(|i| self.get(ctx, nth(base, i))).collect()
    }

    pub fn element(&self, ctx: MdContext, vp: Option<usize>, id: MdFieldId) -> u64 {
        self.store(ctx, vp).map_or(0, |s| s.get(id))
    }

    pub fn set_element(&mut self, ctx: MdContext, vp: Option<usize>, id: MdFieldId, v: u64) {
        if let Some(s) = self.store_mut(ctx, vp) {
            s.set(id, v);
        }
    }

    pub fn attributes(&self) -> TdAttributes {
        TdAttributes(self.get(MdContext::Td, keys().attributes))
    }
    pub fn xfam(&self) -> u64 {
        self.get(MdContext::Td, keys().xfam)
    }
    pub fn gpaw(&self) -> bool {
        self.get(MdContext::Td, keys().gpaw) & 1 != 0
    }
    pub fn set_gpaw(&mut self, on: bool) {
        self.set(MdContext::Td, keys().gpaw, on as u64);
    }
    pub fn eptp(&self) -> Eptp {
        Eptp(self.get(MdContext::Td, keys().eptp))
    }
    pub fn num_vcpus(&self) -> u32 {
        self.get(MdContext::Td, keys().num_vcpus) as u32
    }
    pub fn tsc_frequency(&self) -> u64 {
        self.get(MdContext::Td, keys().tsc_frequency)
    }
    pub fn hp_lock_timeout(&self) -> u64 {
        self.get(MdContext::Td, keys().hp_lock_timeout)
    }
    pub fn export_count(&self) -> u64 {
        self.get(MdContext::Td, keys().export_count)
    }
    pub fn td_uuid(&self) -> Uuid {
        let v = self.get_multi(MdContext::Td, keys().td_uuid, 4);
        [v[0], v[1], v[2], v[3]]
    }
    pub fn set_td_uuid(&mut self, u: Uuid) {
        self.set_multi(MdContext::Td, keys().td_uuid, &u);
    }
    pub fn mig_dec_key(&self) -> MigrationSessionKey {
        let v = self.get_multi(MdContext::Td, keys().mig_dec_key, 4);
        MigrationSessionKey([v[0], v[1], v[2], v[3]])
    }
    pub fn mig_enc_key(&self) -> MigrationSessionKey {
        let v = self.get_multi(MdContext::Td, keys().mig_enc_key, 4);
        MigrationSessionKey([v[0], v[1], v[2], v[3]])
    }
    pub fn mrtd(&self) -> Vec<u64> {
        self.get_multi(MdContext::Td, keys().mrtd, 6)
    }

    pub fn sept_root(&self) -> Option<u64> {
        self.tdcx_pages.get(SEPT_ROOT_PAGE_INDEX).copied()
    }

    /// Folds one added page into the running measurement.
    pub fn extend_measurement(&mut self, gpa: u64, token: u64) {
        self.measurement.update(gpa.to_le_bytes());
        self.measurement.update(token.to_le_bytes());
    }

    pub fn finalize_measurement(&mut self) {
        let d = self.measurement.clone().finalize();
        let words: Vec<u64> = d.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        self.set_multi(MdContext::Td, keys().mrtd, &words);
        self.finalized = true;
    }

    /// Walks the secure EPT for `gpa`. An EPTP that does not name a valid
    /// root with a 4- or 5-level walk models the machine check taken on
    /// uninitialized private memory: a fatal status that freezes the TD.
    pub fn sept_walk(&mut self, gpa: u64) -> Result<(), StatusWord> {
        let e = self.eptp();
        let sane = (e.ept_pwl() == LVL_PML4 || e.ept_pwl() == LVL_PML5) && Some(e.base_pa()) == self.sept_root();
        if !sane {
            let s = StatusWord::SEAM_SHUTDOWN.with_operand(crate::status::shutdown::SEPT_WALK);
            self.fatal = Some(s);
            return Err(s);
        }
        let _ = gpa;
        Ok(())
    }

    /// Text dump for inspection and golden files.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let a = self.attributes();
        let e = self.eptp();
        let _ = writeln!(s, "tdr_page: 0x{:x}", self.tdr_page);
        let _ = writeln!(s, "hkid: {}", self.hkid);
        let _ = writeln!(s, "lifecycle: {}", self.lifecycle);
        let _ = writeln!(s, "op_state: {}", self.op_state);
        let _ = writeln!(s, "attributes: 0x{:x} [{}]", a.0, a.flags());
        let _ = writeln!(s, "xfam: 0x{:x}", self.xfam());
        let _ = writeln!(s, "gpaw: {}", self.gpaw() as u8);
        let _ = writeln!(
            s,
            "eptp: 0x{:x} (ps_mt {}, pwl {}, ad {}, sss {}, base_pa 0x{:x})",
            e.0,
            e.ept_ps_mt(),
            e.ept_pwl(),
            e.enable_ad_bits() as u8,
            e.enable_sss_control() as u8,
            e.base_pa()
        );
        let _ = writeln!(s, "num_vcpus: {}", self.num_vcpus());
        let _ = writeln!(s, "num_migrated_vcpus: {}", self.num_migrated_vcpus);
        let _ = writeln!(s, "tsc_frequency: {}", self.tsc_frequency());
        let _ = writeln!(s, "hp_lock_timeout: {}", self.hp_lock_timeout());
        let _ = writeln!(s, "export_count: {}", self.export_count());
        let n = (self.event_filters_num as usize).min(MAX_EVENT_FILTERS);
        let f: Vec<String> = self.event_filters[..n].iter().map(|v| format!("0x{v:x}")).collect();
        let _ = writeln!(s, "event_filters: {} [{}]", self.event_filters_num, f.join(", "));
        let _ = writeln!(s, "tdcx_pages: {}", self.tdcx_pages.len());
        let _ = writeln!(s, "vcpus: {}", self.vcpus.len());
        for (i, b) in self.bindings.iter().enumerate() {
            if let Some(b) = b {
                let _ = writeln!(
                    s,
                    "binding[{i}]: {:016x}-{:016x}-{:016x}-{:016x}",
                    b.uuid[0], b.uuid[1], b.uuid[2], b.uuid[3]
                );
            }
        }
        if let Some(f) = self.fatal {
            let _ = writeln!(s, "fatal: 0x{:x}", f.0);
        }
        s
    }
}

// ---------------------------------------------------------------------
// Field access

/// Who is touching a field; selects the mask column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdAccess {
    Host,
    Migtd,
    Import,
    Export,
}

fn rd_mask(td: &TdComplex, e: &FieldEntry, a: MdAccess) -> u64 {
    match a {
        MdAccess::Host if td.attributes().debug() => e.dbg_rd_mask,
        MdAccess::Host => e.prod_rd_mask,
        MdAccess::Migtd => e.migtd_rd_mask,
        MdAccess::Export => e.export_mask,
        MdAccess::Import => 0,
    }
}

fn wr_mask(td: &TdComplex, e: &FieldEntry, a: MdAccess) -> u64 {
    match a {
        MdAccess::Host if td.attributes().debug() => e.dbg_wr_mask,
        MdAccess::Host => e.prod_wr_mask,
        MdAccess::Migtd => e.migtd_wr_mask,
        MdAccess::Import => e.import_mask,
        MdAccess::Export => 0,
    }
}

fn resolve(ctx: MdContext, id: MdFieldId) -> Result<(&'static FieldEntry, MdFieldId), StatusWord> {
    let c = Catalog::builtin();
    if id.context_code != ctx.code() {
        return Err(StatusWord::METADATA_FIELD_ID_INCORRECT);
    }
    let (pos, elem) = c.locate(ctx, id).ok_or(StatusWord::METADATA_FIELD_ID_INCORRECT)?;
    let e = &c.table(ctx)[pos.entry];
    Ok((e, e.element_id(pos.field, elem)))
}

/// Masked element read.
pub fn md_read(
    td: &TdComplex,
    ctx: MdContext,
    vp: Option<usize>,
    id: MdFieldId,
    a: MdAccess,
) -> Result<u64, StatusWord> {
    let (e, eid) = resolve(ctx, id)?;
    let mask = rd_mask(td, e, a);
    if mask == 0 {
        return Err(StatusWord::METADATA_FIELD_NOT_READABLE);
    }
    if ctx == MdContext::Vp && vp.is_none_or(|i| i >= td.vcpus.len()) {
        return Err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX));
    }
    Ok(td.element(ctx, vp, eid) & mask)
}

/// Masked element write outside import. Returns the previous value.
pub fn md_write(
    td: &mut TdComplex,
    ctx: MdContext,
    vp: Option<usize>,
    id: MdFieldId,
    value: u64,
    req_mask: u64,
    a: MdAccess,
) -> Result<u64, StatusWord> {
    let (e, eid) = resolve(ctx, id)?;
    let mask = wr_mask(td, e, a) & req_mask;
    if mask == 0 {
        return Err(StatusWord::METADATA_FIELD_NOT_WRITABLE);
    }
    if ctx == MdContext::Vp && vp.is_none_or(|i| i >= td.vcpus.len()) {
        return Err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX));
    }
    let old = td.element(ctx, vp, eid);
    let new = (old & !mask) | (value & mask);
    if e.kind == FieldKind::GpaPointer && new != NULL_PA && !check_gpa_validity(new, td.gpaw(), true) {
        return Err(StatusWord::METADATA_FIELD_VALUE_NOT_VALID);
    }
    td.set_element(ctx, vp, eid, new);
    if e.kind == FieldKind::MigKey {
        if e.field_id.key() == keys().mig_dec_key.key() {
            td.mig_dec_key_set = true;
        } else {
            td.mig_enc_key_set = true;
        }
    }
    Ok(old)
}

/// Import-side sink. Applies the import mask and the per-field checks.
pub struct ImportSink<'a> {
    pub td: &'a mut TdComplex,
    pub vp: Option<usize>,
    /// Toggle for the import-time range checks that a skipped field
    /// would otherwise bypass (EXPORT_COUNT cap).
    pub required_checks: Variant,
    /// Toggle for GPA checks on import.
    pub gpa_checks: Variant,
}

impl ImportSink<'_> {
    fn check(&mut self, w: &FieldWrite<'_>, vals: &[u64]) -> Result<(), StatusWord> {
        let bad = Err(StatusWord::METADATA_FIELD_VALUE_NOT_VALID);
        let v = vals[0];
        match w.entry.kind {
            FieldKind::SysCompat => {
                let strict = matches!(w.entry.name.as_str(), "VENDOR_ID" | "MAJOR_VERSION");
                if strict && self.td.sys.get(w.entry.element_id(w.pos.field, 0)) != v {
                    return bad;
                }
            }
            FieldKind::Attributes => {
                if !verify_td_attributes(TdAttributes(v), true) {
                    return bad;
                }
            }
            FieldKind::Xfam => {
                if !check_xfam(v) {
                    return bad;
                }
            }
            FieldKind::Eptp => {
                let gpaw = self.td.gpaw();
                if !verify_and_set_td_eptp_controls(self.td, gpaw, Eptp(v)) {
                    return bad;
                }
            }
            FieldKind::NumVcpus => {
                if v == 0 || v > MAX_VCPUS_PER_TD as u64 {
                    return bad;
                }
            }
            FieldKind::TscFrequency => {
                if !(VIRT_TSC_FREQUENCY_MIN..=VIRT_TSC_FREQUENCY_MAX).contains(&v) {
                    return bad;
                }
            }
            FieldKind::HpLockTimeout => {
                if !(MIN_HP_LOCK_TIMEOUT_USEC..=MAX_HP_LOCK_TIMEOUT_USEC).contains(&v) {
                    return bad;
                }
            }
            FieldKind::ExportCount => {
                if self.required_checks == Variant::Fixed && v > MAX_EXPORT_COUNT {
                    return bad;
                }
            }
            FieldKind::VirtualTsc => {
                self.td.tsc_virt_params_valid =
                    (VIRT_TSC_FREQUENCY_MIN..=VIRT_TSC_FREQUENCY_MAX).contains(&self.td.tsc_frequency());
            }
            FieldKind::Xcr0 => {
                if !check_guest_xcr0_value(v, self.td.xfam()) {
                    return bad;
                }
            }
            FieldKind::GpaPointer => {
                if self.gpa_checks == Variant::Fixed && v != NULL_PA && !check_gpa_validity(v, self.td.gpaw(), true) {
                    return bad;
                }
            }
            FieldKind::Generic | FieldKind::Gpaw | FieldKind::MigKey | FieldKind::TscDeadline => {}
        }
        Ok(())
    }
}

impl MetadataSink for ImportSink<'_> {
    fn write_field(&mut self, w: &FieldWrite<'_>) -> Result<(), StatusWord> {
        let req = if w.write_mask_valid { w.wr_mask } else { u64::MAX };
        let mask = w.entry.import_mask & req;
        if mask == 0 {
            return Err(StatusWord::METADATA_FIELD_NOT_WRITABLE);
        }
        let ids: Vec<MdFieldId> = (0..w.entry.num_of_elem).map(|k| w.entry.element_id(w.pos.field, k)).collect();
        let vals: Vec<u64> = ids
            .iter()
            .zip(w.values)
            .map(|(&id, &v)| (self.td.element(w.ctx, self.vp, id) & !mask) | (v & mask))
            .collect();
        self.check(w, &vals)?;
        // Platform values are compared, never taken over. EPTP is stored
        // by its verification routine with the local root.
        if w.ctx == MdContext::Sys || w.entry.kind == FieldKind::Eptp {
            return Ok(());
        }
        for (id, v) in ids.into_iter().zip(vals) {
            self.td.set_element(w.ctx, self.vp, id, v);
        }
        Ok(())
    }
}

/// Export-side view of a TD or one of its VPs.
pub struct TdSource<'a> {
    pub td: &'a TdComplex,
    pub vp: Option<usize>,
}

impl MetadataSource for TdSource<'_> {
    fn read_field(&self, ctx: MdContext, entry: &FieldEntry, pos: FieldPos) -> Vec<u64> {
        (0..entry.num_of_elem).map(|k| self.td.element(ctx, self.vp, entry.element_id(pos.field, k))).collect()
    }
}

/// Exportable values of every field of a context, masked with the export
/// mask; used to compare a source and an imported TD.
pub fn exportable_values(td: &TdComplex, ctx: MdContext, vp: Option<usize>) -> BTreeMap<String, Vec<u64>> {
    let c = Catalog::builtin();
    let src = TdSource { td, vp };
    let mut out = BTreeMap::new();
    for (entry, e) in c.table(ctx).iter().enumerate() {
        if !(e.exported_in(Phase::Immutable) || e.exported_in(Phase::Mutable)) {
            continue;
        }
        let vals = (0..e.num_of_fields)
            .flat_map(|field| src.read_field(ctx, e, FieldPos { entry, field }))
            .map(|v| v & e.export_mask)
            .collect();
        out.insert(e.name.clone(), vals);
    }
    out
}

// ---------------------------------------------------------------------
// Service-TD metadata access

/// Resolves a TDR page to a TD, as the module's PAMT lookup would.
pub trait TdrLookup {
    fn td_at_page(&mut self, page: u64) -> Option<&mut TdComplex>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServtdAccess {
    Read,
    Write { value: u64, mask: u64 },
}

/// Guest-side read or write of a target TD's field through a binding
/// handle. Returns the value read, or the previous contents on a write.
///
/// The vulnerable variant reports "no TDR at that page" and "TDR present
/// but not bound to you" with different statuses; the fixed variant
/// returns one generic status for both.
pub fn servtd_metadata_access(
    lookup: &mut dyn TdrLookup,
    caller_uuid: &Uuid,
    handle: ServtdBindingHandle,
    field_id: MdFieldId,
    access: ServtdAccess,
    v: Variant,
) -> Result<u64, StatusWord> {
    let (page, slot) = break_binding_handle(handle, caller_uuid);
    let generic = StatusWord::SERVTD_ACCESS_DENIED;
    let Some(target) = lookup.td_at_page(page) else {
        return Err(match v {
            Variant::Vulnerable => StatusWord::OPERAND_PAGE_METADATA_INCORRECT.with_operand(operand::RCX),
            Variant::Fixed => generic,
        });
    };
    if target.locked {
        return Err(StatusWord::OPERAND_BUSY.with_operand(operand::RCX));
    }
    let bound = target.bindings.get(slot as usize).copied().flatten().is_some_and(|b| b.uuid == *caller_uuid);
    if !bound {
        return Err(match v {
            Variant::Vulnerable => StatusWord::SERVTD_UUID_MISMATCH,
            Variant::Fixed => generic,
        });
    }
    let leaf = match access {
        ServtdAccess::Read => Leaf::ServtdRd,
        ServtdAccess::Write { .. } => Leaf::ServtdWr,
    };
    if PermissionMatrix::builtin().is_allowed(target.op_state, leaf, Interface::Guest) != Ok(true) {
        return Err(StatusWord::OP_STATE_INCORRECT);
    }
    match access {
        ServtdAccess::Read => md_read(target, MdContext::Td, None, field_id, MdAccess::Migtd),
        ServtdAccess::Write { value, mask } => {
            md_write(target, MdContext::Td, None, field_id, value, mask, MdAccess::Migtd)
        }
    }
}

/// Plain-text snapshot of a TD for inspection tools.
pub fn snapshot(td: &TdComplex) -> String {
    let a = td.attributes();
    let key_readable =
        (0..4).all(|i| md_read(td, MdContext::Td, None, nth(keys().mig_dec_key, i), MdAccess::Host).is_ok());
    let mut lines = vec![
        format!("tdr: 0x{:x}", td.tdr_page * crate::engine::PAGE_SIZE),
        format!("hkid: {}", td.hkid),
        format!("lifecycle: {}", td.lifecycle),
        format!("op_state: {}", td.op_state),
        format!("attributes: 0x{:x} ({})", a.0, a.flags()),
        format!("xfam: 0x{:x}", td.xfam()),
        format!("num_vcpus: {}", td.num_vcpus()),
        format!("vcpus: {}", td.vcpus.len()),
        format!("event_filters_num: {}", td.event_filters_num),
        format!("finalized: {}", td.finalized),
        format!("mig_dec_key host-readable: {}", if key_readable { "yes" } else { "no" }),
    ];
    if let Some(f) = td.fatal {
        lines.push(format!("fatal: {}", f.transcript_line()));
    }
    lines.join("\n") + "\n"
}
