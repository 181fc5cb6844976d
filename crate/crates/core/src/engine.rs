// SPDX-License-Identifier: Apache-2.0
//! Host and guest API surface over a flat simulated platform.
//!
//! One call runs at a time. Host "physical addresses" are synthetic page
//! numbers handed out by a bump allocator; a TD is named by its TDR page.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::arena::ParseArena;
use crate::bundle::{list_context, Bundle};
use crate::catalog::{Catalog, FieldPos, Phase};
use crate::codec::{export_records, pack_lists, write_list, ImportProgress, ListContext, SizeTrace};
use crate::crypto::{open, BundleType, InterruptedState, MigStreamContext, MigrationSessionKey, ResumeCursor};
use crate::field_id::{MdContext, MdFieldId};
use crate::md_list::{join_lists, split_lists, MD_LIST_SIZE};
use crate::mode::{EngineMode, Variant};
use crate::state_machine::{Interface, Leaf, LifecycleState, OpState, Outcome, PermissionMatrix, TraceStep};
use crate::status::{operand, shutdown, ApiResult, StatusWord, TdxError};
use crate::td::{
    check_gpa_validity, check_guest_xcr0_value, init_event_filters, keys, md_read, md_write, nth,
    read_and_set_td_configurations, servtd_metadata_access, sys_config_reserve_hkid, verify_td_attributes,
    EventFiltersInfo, ImportSink, Kot, MdAccess, MetadataStore, ServtdAccess, ServtdBinding, ServtdBindingHandle,
    TdComplex, TdParams, TdSource, TdrLookup, Uuid, VcpuState, DEFAULT_KOT_SIZE, LVL_PML4, LVL_PML5, MAX_EXPORT_COUNT,
    MAX_SERVTDS, TDCS_PAGES, TDVPS_PAGES,
};

/// First synthetic page number handed out.
pub const FIRST_PAGE: u64 = 0x609_eada;
pub const PAGE_SIZE: u64 = 4096;

/// Decides when a host-side interrupt is pending between two lists of an
/// import call.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum InterruptPolicy {
    #[default]
    Never,
    /// Interrupt `leaf` right after list `index` has been written, at most
    /// `times` times.
    AfterList { leaf: Leaf, index: usize, times: u32 },
    /// Pending with probability `permille`/1000 at each list boundary,
    /// drawn from a generator seeded with `seed`.
    Seeded { seed: u64, permille: u16, draws: u64 },
}

impl InterruptPolicy {
    pub fn after_list(leaf: Leaf, index: usize) -> Self {
        InterruptPolicy::AfterList { leaf, index, times: 1 }
    }

    fn pending(&mut self, leaf: Leaf, index: usize) -> bool {
        match self {
            InterruptPolicy::Never => false,
            InterruptPolicy::AfterList { leaf: l, index: i, times } => {
                if *l == leaf && *i == index && *times > 0 {
                    *times -= 1;
                    true
                } else {
                    false
                }
            }
            InterruptPolicy::Seeded { seed, permille, draws } => {
                let mut r = ChaCha20Rng::seed_from_u64(seed.wrapping_add(*draws));
                *draws += 1;
                r.random_range(0..1000u16) < *permille
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochToken {
    pub stream_index: u32,
    pub epoch: u64,
    /// Marks the end of the in-order phase.
    pub start: bool,
}

/// Parameters of the composite build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildParams {
    pub td: TdParams,
    pub filters: EventFiltersInfo,
    /// Private pages to add: (GPA, page token).
    pub pages: Vec<(u64, u64)>,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            td: TdParams::default(),
            filters: EventFiltersInfo::default(),
            pages: vec![(0x1000, 0xa11ce), (0x2000, 0xb0b)],
        }
    }
}

/// Platform values every TD sees in its platform context.
fn platform_sys() -> MetadataStore {
    let c = Catalog::builtin();
    let mut s = MetadataStore::default();
    for (name, v) in [
        ("VENDOR_ID", 0x8086),
        ("BUILD_DATE", 0x2025_0401),
        ("BUILD_NUM", 0x2f1),
        ("MINOR_VERSION", 5),
        ("MAJOR_VERSION", 1),
        ("TDX_FEATURES0", 0x1f),
        ("ATTRIBUTES_FIXED0", 0xf000_00ff),
        ("ATTRIBUTES_FIXED1", 0),
        ("XFAM_FIXED0", 0x6_02ff),
        ("XFAM_FIXED1", 0x3),
    ] {
        if let Some(e) = c.by_name(MdContext::Sys, name) {
            s.set(e.element_id(0, 0), v);
        }
    }
    s
}

struct Tds<'a>(&'a mut BTreeMap<u64, TdComplex>);

impl TdrLookup for Tds<'_> {
    fn td_at_page(&mut self, page: u64) -> Option<&mut TdComplex> {
        self.0.get_mut(&page)
    }
}

/// What one list parse left behind.
#[derive(Clone, Debug)]
pub struct ListOracle {
    pub arena: ParseArena,
    pub trace: SizeTrace,
}

pub struct Platform {
    pub mode: EngineMode,
    pub kot: Kot,
    pub sys: MetadataStore,
    pub interrupt: InterruptPolicy,
    /// Whether the CPU supports perfmon event filtering.
    pub event_filtering: bool,
    /// Words written into every parse arena before a list is loaded.
    pub arena_plants: Vec<(usize, u64)>,
    /// Arena and size arithmetic of every list parsed by the most recent
    /// import call, for oracles.
    pub last_import: Vec<ListOracle>,
    pub migtd_uuid: Uuid,
    tds: BTreeMap<u64, TdComplex>,
    traces: BTreeMap<u64, Vec<TraceStep>>,
    next_page: u64,
    rng: ChaCha20Rng,
}

fn err(s: StatusWord) -> TdxError {
    TdxError::from(s)
}

impl Platform {
    pub fn new(mode: EngineMode, seed: u64) -> Platform {
        Platform::with_kot_size(mode, seed, DEFAULT_KOT_SIZE)
    }

    pub fn with_kot_size(mode: EngineMode, seed: u64, kot_size: usize) -> Platform {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let migtd_uuid = [rng.random(), rng.random(), rng.random(), rng.random()];
        Platform {
            mode,
            kot: Kot::new(kot_size),
            sys: platform_sys(),
            interrupt: InterruptPolicy::Never,
            event_filtering: true,
            arena_plants: Vec::new(),
            last_import: Vec::new(),
            migtd_uuid,
            tds: BTreeMap::new(),
            traces: BTreeMap::new(),
            next_page: FIRST_PAGE,
            rng,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn alloc_page(&mut self) -> u64 {
        let p = self.next_page;
        self.next_page += 1;
        p
    }

    pub fn td(&self, tdr: u64) -> Option<&TdComplex> {
        self.tds.get(&tdr)
    }

    pub fn td_mut(&mut self, tdr: u64) -> Option<&mut TdComplex> {
        self.tds.get_mut(&tdr)
    }

    pub fn tdr_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.tds.keys().copied()
    }

    pub fn trace(&self, tdr: u64) -> &[TraceStep] {
        self.traces.get(&tdr).map_or(&[], Vec::as_slice)
    }

    pub fn traces(&self) -> impl Iterator<Item = (u64, &[TraceStep])> {
        self.traces.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    fn tdm(&mut self, tdr: u64) -> Result<&mut TdComplex, TdxError> {
        self.tds.get_mut(&tdr).ok_or_else(|| err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX)))
    }

    /// Entry checks shared by every op_state-gated host leaf.
    fn begin(&self, tdr: u64, leaf: Leaf) -> Result<OpState, TdxError> {
        let td = self.tds.get(&tdr).ok_or_else(|| err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX)))?;
        if td.locked {
            return Err(err(StatusWord::OPERAND_BUSY.with_operand(operand::RCX)));
        }
        if td.fatal.is_some() || td.lifecycle != LifecycleState::KeysConfigured {
            return Err(err(StatusWord::LIFECYCLE_STATE_INCORRECT));
        }
        if PermissionMatrix::builtin().is_allowed(td.op_state, leaf, Interface::Host) != Ok(true) {
            return Err(err(StatusWord::OP_STATE_INCORRECT));
        }
        Ok(td.op_state)
    }

    /// Applies the matrix transition for a finished call and records it.
    fn end(&mut self, tdr: u64, leaf: Leaf, from: OpState, outcome: Outcome) -> OpState {
        let to = PermissionMatrix::builtin()
            .transition(from, leaf, outcome, self.mode.v1)
            .expect("begin() admitted this leaf");
        if let Some(td) = self.tds.get_mut(&tdr) {
            td.op_state = to;
        }
        self.traces.entry(tdr).or_default().push(TraceStep { from, leaf, outcome, to });
        to
    }

    /// Ends a call with a plain status: success completes, errors reject.
    fn finish<T>(&mut self, tdr: u64, leaf: Leaf, from: OpState, r: ApiResult<T>) -> ApiResult<T> {
        let outcome = match &r {
            Ok(_) => Outcome::Completed,
            Err(e) if e.status.is_fatal() => Outcome::Failed,
            Err(_) => Outcome::Rejected,
        };
        self.end(tdr, leaf, from, outcome);
        r
    }

    // -----------------------------------------------------------------
    // Platform configuration and TD build

    pub fn sys_config(&mut self, hkid: usize, tdmr_entries: &[u64]) -> ApiResult<()> {
        sys_config_reserve_hkid(&mut self.kot, hkid, tdmr_entries, self.mode.bug8).map_err(err)
    }

    pub fn mng_create(&mut self) -> ApiResult<u64> {
        let hkid = self.kot.first_free().ok_or_else(|| err(StatusWord::HKID_NOT_FREE))?;
        self.kot.assign(hkid).map_err(err)?;
        let tdr = self.alloc_page();
        self.tds.insert(tdr, TdComplex::new(tdr, hkid, self.sys.clone()));
        Ok(tdr)
    }

    pub fn mng_key_config(&mut self, tdr: u64) -> ApiResult<()> {
        let td = self.tdm(tdr)?;
        td.lifecycle =
            td.lifecycle.advance(Leaf::MngKeyConfig).ok_or_else(|| err(StatusWord::LIFECYCLE_STATE_INCORRECT))?;
        Ok(())
    }

    pub fn mng_addcx(&mut self, tdr: u64) -> ApiResult<u64> {
        let from = self.begin(tdr, Leaf::MngAddcx)?;
        let page = self.alloc_page();
        let td = self.tdm(tdr)?;
        let r = if td.tdcx_pages.len() >= TDCS_PAGES {
            Err(err(StatusWord::TDCX_NUM_INCORRECT))
        } else {
            td.tdcx_pages.push(page);
            Ok(page)
        };
        self.finish(tdr, Leaf::MngAddcx, from, r)
    }

    pub fn mng_init(&mut self, tdr: u64, params: &TdParams, filters: &EventFiltersInfo) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::MngInit)?;
        let (v1, bug3, filtering) = (self.mode.v1, self.mode.bug3, self.event_filtering);
        let uuid: Uuid = [self.rng.random(), self.rng.random(), self.rng.random(), self.rng.random()];
        let td = self.tdm(tdr)?;
        let r = (|| {
            if td.tdcx_pages.len() != TDCS_PAGES {
                return Err(StatusWord::TDCX_NUM_INCORRECT);
            }
            read_and_set_td_configurations(td, params, v1)?;
            init_event_filters(td, filtering, filters, bug3)?;
            td.set_td_uuid(uuid);
            Ok(())
        })()
        .map_err(err);
        self.finish(tdr, Leaf::MngInit, from, r)
    }

    pub fn vp_create(&mut self, tdr: u64) -> ApiResult<usize> {
        let from = self.begin(tdr, Leaf::VpCreate)?;
        let page = self.alloc_page();
        let td = self.tdm(tdr)?;
        let r = if td.vcpus.len() as u32 >= td.num_vcpus() {
            Err(err(StatusWord::MAX_VCPUS_EXCEEDED))
        } else {
            td.vcpus.push(VcpuState { tdvpr_page: page, ..VcpuState::default() });
            Ok(td.vcpus.len() - 1)
        };
        self.finish(tdr, Leaf::VpCreate, from, r)
    }

    pub fn vp_addcx(&mut self, tdr: u64, vp: usize) -> ApiResult<u64> {
        let from = self.begin(tdr, Leaf::VpAddcx)?;
        let page = self.alloc_page();
        let td = self.tdm(tdr)?;
        let r = match td.vcpus.get_mut(vp) {
            None => Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX))),
            Some(v) if v.tdcx_pages.len() + 1 >= TDVPS_PAGES => Err(err(StatusWord::TDCX_NUM_INCORRECT)),
            Some(v) => {
                v.tdcx_pages.push(page);
                Ok(page)
            }
        };
        self.finish(tdr, Leaf::VpAddcx, from, r)
    }

    pub fn vp_init(&mut self, tdr: u64, vp: usize) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::VpInit)?;
        let td = self.tdm(tdr)?;
        let xfam = td.xfam();
        let r = match td.vcpus.get_mut(vp) {
            None => Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX))),
            Some(v) if v.tdcx_pages.len() + 1 != TDVPS_PAGES => Err(err(StatusWord::TDCX_NUM_INCORRECT)),
            Some(v) if v.initialized => Err(err(StatusWord::OP_STATE_INCORRECT)),
            Some(v) => {
                let k = keys();
                v.md.set(k.xcr0, xfam & 3);
                v.md.set(k.rflags, 0x2);
                v.md.set(k.rip, 0xFFFF_FFF0);
                v.initialized = true;
                td.set(MdContext::Td, nth(keys().x2apic_ids, vp as u32), vp as u64);
                Ok(())
            }
        };
        self.finish(tdr, Leaf::VpInit, from, r)
    }

    pub fn mem_sept_add(&mut self, tdr: u64, gpa: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::MemSeptAdd)?;
        let td = self.tdm(tdr)?;
        let r = if !gpa.is_multiple_of(PAGE_SIZE) || !check_gpa_validity(gpa, td.gpaw(), true) {
            Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX)))
        } else {
            td.sept_walk(gpa).map_err(err).map(|()| {
                td.sept.insert(gpa);
            })
        };
        self.finish(tdr, Leaf::MemSeptAdd, from, r)
    }

    pub fn mem_page_add(&mut self, tdr: u64, gpa: u64, token: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::MemPageAdd)?;
        let td = self.tdm(tdr)?;
        let r = if !td.sept.contains(&gpa) || td.pages.contains_key(&gpa) {
            Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX)))
        } else {
            td.sept_walk(gpa).map_err(err).map(|()| {
                td.pages.insert(gpa, token);
                td.extend_measurement(gpa, token);
            })
        };
        self.finish(tdr, Leaf::MemPageAdd, from, r)
    }

    pub fn mr_extend(&mut self, tdr: u64, gpa: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::MrExtend)?;
        let td = self.tdm(tdr)?;
        let r = match td.pages.get(&gpa).copied() {
            Some(token) => {
                td.extend_measurement(gpa, token);
                Ok(())
            }
            None => Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX))),
        };
        self.finish(tdr, Leaf::MrExtend, from, r)
    }

    pub fn mr_finalize(&mut self, tdr: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::MrFinalize)?;
        self.tdm(tdr)?.finalize_measurement();
        self.finish(tdr, Leaf::MrFinalize, from, Ok(()))
    }

    /// Entry preconditions only: a sane EPTP and a legal guest XCR0.
    /// Either failure is a shutdown that freezes the TD.
    pub fn vp_enter(&mut self, tdr: u64, vp: usize) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::VpEnter)?;
        let td = self.tdm(tdr)?;
        let r = match td.vcpus.get(vp) {
            None => Err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX)),
            Some(v) if !(v.initialized || v.migrated) => Err(StatusWord::OP_STATE_INCORRECT),
            Some(v) => {
                let e = td.eptp();
                let xcr0 = v.xcr0();
                if !(e.ept_pwl() == LVL_PML4 || e.ept_pwl() == LVL_PML5) || Some(e.base_pa()) != td.sept_root() {
                    Err(StatusWord::SEAM_SHUTDOWN.with_operand(shutdown::GUEST_EPTP))
                } else if !check_guest_xcr0_value(xcr0, td.xfam()) {
                    Err(StatusWord::SEAM_SHUTDOWN.with_operand(shutdown::GUEST_XCR0))
                } else {
                    Ok(())
                }
            }
        };
        if let Err(s) = r {
            if s.is_fatal() {
                td.fatal = Some(s);
            }
        }
        self.finish(tdr, Leaf::VpEnter, from, r.map_err(err))
    }

    pub fn mng_rd(&mut self, tdr: u64, id: MdFieldId) -> ApiResult<u64> {
        let from = self.begin(tdr, Leaf::MngRd)?;
        let td = self.tdm(tdr)?;
        let r = md_read(td, MdContext::Td, None, id, MdAccess::Host).map_err(err);
        self.finish(tdr, Leaf::MngRd, from, r)
    }

    pub fn mng_wr(&mut self, tdr: u64, id: MdFieldId, value: u64, mask: u64) -> ApiResult<u64> {
        let from = self.begin(tdr, Leaf::MngWr)?;
        let td = self.tdm(tdr)?;
        let r = md_write(td, MdContext::Td, None, id, value, mask, MdAccess::Host).map_err(err);
        self.finish(tdr, Leaf::MngWr, from, r)
    }

    pub fn vp_rd(&mut self, tdr: u64, vp: usize, id: MdFieldId) -> ApiResult<u64> {
        let from = self.begin(tdr, Leaf::VpRd)?;
        let td = self.tdm(tdr)?;
        let r = md_read(td, MdContext::Vp, Some(vp), id, MdAccess::Host).map_err(err);
        self.finish(tdr, Leaf::VpRd, from, r)
    }

    pub fn vp_wr(&mut self, tdr: u64, vp: usize, id: MdFieldId, value: u64, mask: u64) -> ApiResult<u64> {
        let from = self.begin(tdr, Leaf::VpWr)?;
        let td = self.tdm(tdr)?;
        let r = md_write(td, MdContext::Vp, Some(vp), id, value, mask, MdAccess::Host).map_err(err);
        self.finish(tdr, Leaf::VpWr, from, r)
    }

    pub fn servtd_bind(&mut self, tdr: u64, slot: usize, uuid: Uuid) -> ApiResult<ServtdBindingHandle> {
        let from = self.begin(tdr, Leaf::ServtdBind)?;
        let td = self.tdm(tdr)?;
        let r = if slot >= MAX_SERVTDS {
            Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX)))
        } else {
            td.bindings[slot] = Some(ServtdBinding { uuid, info_hash: 0 });
            Ok(crate::td::make_binding_handle(slot as u16, tdr, &uuid))
        };
        self.finish(tdr, Leaf::ServtdBind, from, r)
    }

    /// Guest-side read through a binding handle.
    pub fn servtd_rd(&mut self, caller: &Uuid, handle: ServtdBindingHandle, id: MdFieldId) -> ApiResult<u64> {
        servtd_metadata_access(&mut Tds(&mut self.tds), caller, handle, id, ServtdAccess::Read, self.mode.bug6)
            .map_err(err)
    }

    /// Guest-side write through a binding handle; returns the previous
    /// contents.
    pub fn servtd_wr(
        &mut self,
        caller: &Uuid,
        handle: ServtdBindingHandle,
        id: MdFieldId,
        value: u64,
        mask: u64,
    ) -> ApiResult<u64> {
        let access = ServtdAccess::Write { value, mask };
        servtd_metadata_access(&mut Tds(&mut self.tds), caller, handle, id, access, self.mode.bug6).map_err(err)
    }

    /// Binds the platform's migration TD to slot 0 and has it write the
    /// session key into both key fields.
    pub fn migtd_install_key(&mut self, tdr: u64, key: MigrationSessionKey) -> ApiResult<ServtdBindingHandle> {
        let uuid = self.migtd_uuid;
        let handle = self.servtd_bind(tdr, 0, uuid)?;
        let k = keys();
        for base in [k.mig_dec_key, k.mig_enc_key] {
            for (i, q) in key.0.iter().enumerate() {
                self.servtd_wr(&uuid, handle, nth(base, i as u32), *q, u64::MAX)?;
            }
        }
        Ok(handle)
    }

    pub fn mig_stream_create(&mut self, tdr: u64) -> ApiResult<u32> {
        let from = self.begin(tdr, Leaf::MigStreamCreate)?;
        let td = self.tdm(tdr)?;
        let idx = td.streams.len() as u32;
        td.streams.push(MigStreamContext::new(idx));
        self.finish(tdr, Leaf::MigStreamCreate, from, Ok(idx))
    }

    /// mng_create, key_config, all control pages, mng_init, every VP, the
    /// initial pages, then finalize.
    pub fn build_td(&mut self, p: &BuildParams) -> ApiResult<u64> {
        let tdr = self.mng_create()?;
        self.mng_key_config(tdr)?;
        for _ in 0..TDCS_PAGES {
            self.mng_addcx(tdr)?;
        }
        self.mng_init(tdr, &p.td, &p.filters)?;
        for _ in 0..p.td.max_vcpus {
            let vp = self.vp_create(tdr)?;
            for _ in 1..TDVPS_PAGES {
                self.vp_addcx(tdr, vp)?;
            }
            self.vp_init(tdr, vp)?;
        }
        for &(gpa, token) in &p.pages {
            self.mem_sept_add(tdr, gpa)?;
            self.mem_page_add(tdr, gpa, token)?;
            self.mr_extend(tdr, gpa)?;
        }
        self.mr_finalize(tdr)?;
        Ok(tdr)
    }

    /// A destination TD ready to receive immutable state.
    pub fn create_import_target(&mut self) -> ApiResult<u64> {
        let tdr = self.mng_create()?;
        self.mng_key_config(tdr)?;
        for _ in 0..TDCS_PAGES {
            self.mng_addcx(tdr)?;
        }
        Ok(tdr)
    }

    /// Creates a VP with all its control pages on an importing TD.
    pub fn import_vp_slot(&mut self, tdr: u64) -> ApiResult<usize> {
        let vp = self.vp_create(tdr)?;
        for _ in 1..TDVPS_PAGES {
            self.vp_addcx(tdr, vp)?;
        }
        Ok(vp)
    }

    // -----------------------------------------------------------------
    // Export

    fn export_key(&mut self, tdr: u64, stream: u32) -> ApiResult<()> {
        let td = self.tdm(tdr)?;
        if !td.mig_enc_key_set {
            return Err(err(StatusWord::MIGRATION_KEY_NOT_SET));
        }
        let key = td.mig_enc_key();
        let sc = td
            .streams
            .get_mut(stream as usize)
            .ok_or_else(|| err(StatusWord::OPERAND_INVALID.with_operand(operand::R8)))?;
        if sc.is_busy() {
            return Err(err(StatusWord::OPERAND_BUSY.with_operand(operand::R8)));
        }
        sc.set_key(key);
        Ok(())
    }

    fn seal_metadata(
        &mut self,
        tdr: u64,
        stream: u32,
        ty: BundleType,
        groups: &[(MdContext, Phase, Option<usize>)],
    ) -> ApiResult<Bundle> {
        self.export_key(tdr, stream)?;
        let c = Catalog::builtin();
        let td = self.tdm(tdr)?;
        let mut lists = Vec::new();
        for &(ctx, phase, vp) in groups {
            let recs = export_records(c, ctx, phase, &TdSource { td, vp })
                .map_err(|_| err(StatusWord::METADATA_FIELD_NOT_READABLE))?;
            lists.extend(pack_lists(c, ctx, &recs));
        }
        let sc = &mut td.streams[stream as usize];
        let (mbmd, data) = sc.encrypt_bundle(ty, &join_lists(&lists)).map_err(|e| err(e.status()))?;
        Ok(Bundle { mbmd, data })
    }

    pub fn export_state_immutable(&mut self, tdr: u64, stream: u32) -> ApiResult<Bundle> {
        let from = self.begin(tdr, Leaf::ExportStateImmutable)?;
        let r = (|| {
            let td = self.tdm(tdr)?;
            if !td.attributes().migratable() {
                return Err(err(StatusWord::TD_NOT_MIGRATABLE));
            }
            let count = td.export_count();
            if count >= MAX_EXPORT_COUNT {
                return Err(err(StatusWord::EXPORT_COUNT_EXCEEDED));
            }
            td.set(MdContext::Td, keys().export_count, count + 1);
            self.seal_metadata(
                tdr,
                stream,
                BundleType::Immutable,
                &[(MdContext::Sys, Phase::Immutable, None), (MdContext::Td, Phase::Immutable, None)],
            )
        })();
        self.finish(tdr, Leaf::ExportStateImmutable, from, r)
    }

    pub fn export_pause(&mut self, tdr: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ExportPause)?;
        self.finish(tdr, Leaf::ExportPause, from, Ok(()))
    }

    pub fn export_state_td(&mut self, tdr: u64, stream: u32) -> ApiResult<Bundle> {
        let from = self.begin(tdr, Leaf::ExportStateTd)?;
        let r = self.seal_metadata(tdr, stream, BundleType::Td, &[(MdContext::Td, Phase::Mutable, None)]);
        self.finish(tdr, Leaf::ExportStateTd, from, r)
    }

    pub fn export_state_vp(&mut self, tdr: u64, stream: u32, vp: usize) -> ApiResult<Bundle> {
        let from = self.begin(tdr, Leaf::ExportStateVp)?;
        let r = if self.tds[&tdr].vcpus.len() <= vp {
            Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX)))
        } else {
            self.seal_metadata(tdr, stream, BundleType::Vp, &[(MdContext::Vp, Phase::Mutable, Some(vp))])
        };
        self.finish(tdr, Leaf::ExportStateVp, from, r)
    }

    /// Exports private pages. With `cancel` set the host abandons the
    /// call after the module has sealed the pages: the bundle is dropped
    /// but its IV is spent.
    pub fn export_mem(&mut self, tdr: u64, stream: u32, gpas: &[u64], cancel: bool) -> ApiResult<Option<Bundle>> {
        let from = self.begin(tdr, Leaf::ExportMem)?;
        let r = (|| {
            self.export_key(tdr, stream)?;
            let td = self.tdm(tdr)?;
            let mut pt = Vec::with_capacity(gpas.len() * MD_LIST_SIZE);
            for &gpa in gpas {
                let token =
                    *td.pages.get(&gpa).ok_or_else(|| err(StatusWord::OPERAND_INVALID.with_operand(operand::R9)))?;
                let mut page = vec![0u8; MD_LIST_SIZE];
                page[..8].copy_from_slice(&gpa.to_le_bytes());
                page[8..16].copy_from_slice(&token.to_le_bytes());
                pt.extend_from_slice(&page);
            }
            if pt.is_empty() {
                return Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::R9)));
            }
            let sc = &mut td.streams[stream as usize];
            let (mbmd, data) = sc.encrypt_bundle(BundleType::Mem, &pt).map_err(|e| err(e.status()))?;
            Ok((!cancel).then_some(Bundle { mbmd, data }))
        })();
        self.finish(tdr, Leaf::ExportMem, from, r)
    }

    pub fn export_track(&mut self, tdr: u64, stream: u32) -> ApiResult<EpochToken> {
        let from = self.begin(tdr, Leaf::ExportTrack)?;
        let td = self.tdm(tdr)?;
        td.export_epoch += 1;
        let t = EpochToken { stream_index: stream, epoch: td.export_epoch, start: true };
        self.finish(tdr, Leaf::ExportTrack, from, Ok(t))
    }

    pub fn export_abort(&mut self, tdr: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ExportAbort)?;
        self.finish(tdr, Leaf::ExportAbort, from, Ok(()))
    }

    pub fn export_blockw(&mut self, tdr: u64, gpa: u64) -> ApiResult<()> {
        self.sept_leaf(tdr, Leaf::ExportBlockw, gpa)
    }

    pub fn export_unblockw(&mut self, tdr: u64, gpa: u64) -> ApiResult<()> {
        self.sept_leaf(tdr, Leaf::ExportUnblockw, gpa)
    }

    fn sept_leaf(&mut self, tdr: u64, leaf: Leaf, gpa: u64) -> ApiResult<()> {
        let from = self.begin(tdr, leaf)?;
        let r = if self.tds[&tdr].sept.contains(&gpa) {
            Ok(())
        } else {
            Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RCX)))
        };
        self.finish(tdr, leaf, from, r)
    }

    // -----------------------------------------------------------------
    // Import

    pub fn import_state_immutable(&mut self, tdr: u64, stream: u32, b: &Bundle) -> ApiResult<StatusWord> {
        self.import_metadata(tdr, stream, Leaf::ImportStateImmutable, b, None)
    }

    pub fn import_state_td(&mut self, tdr: u64, stream: u32, b: &Bundle) -> ApiResult<StatusWord> {
        self.import_metadata(tdr, stream, Leaf::ImportStateTd, b, None)
    }

    pub fn import_state_vp(&mut self, tdr: u64, stream: u32, vp: usize, b: &Bundle) -> ApiResult<StatusWord> {
        self.import_metadata(tdr, stream, Leaf::ImportStateVp, b, Some(vp))
    }

    /// The shared list loop. Returns `SUCCESS` or `INTERRUPTED_RESUMABLE`;
    /// a list failure is latched in the stream, made fatal, and moves the
    /// TD to FAILED_IMPORT with the extended error words returned.
    fn import_metadata(
        &mut self,
        tdr: u64,
        stream: u32,
        leaf: Leaf,
        b: &Bundle,
        vp: Option<usize>,
    ) -> ApiResult<StatusWord> {
        let from = self.begin(tdr, leaf)?;
        let (ty, phase) = match leaf {
            Leaf::ImportStateImmutable => (BundleType::Immutable, Phase::Immutable),
            Leaf::ImportStateTd => (BundleType::Td, Phase::Mutable),
            _ => (BundleType::Vp, Phase::Mutable),
        };
        let prep = self.import_prepare(tdr, stream, leaf, ty, b, vp);
        let (lists, resume) = match prep {
            Ok(x) => x,
            Err(e) => return self.finish(tdr, leaf, from, Err(e)),
        };
        self.last_import.clear();
        let mode = self.mode;
        let catalog = Catalog::builtin();
        let (start, mut expected, mut progress) = match resume {
            Some(c) => (c.lists_done, c.expected, c.progress),
            None => (0, Some(FieldPos { entry: 0, field: 0 }), ImportProgress::default()),
        };
        let ctx_of = |i: usize| list_context(ty, i).expect("metadata bundle");
        let mut failure = None;
        let mut interrupted = false;
        for i in start..lists.len() {
            let ctx = ctx_of(i);
            if i > 0 && ctx_of(i - 1) != ctx {
                expected = Some(FieldPos { entry: 0, field: 0 });
            }
            let lc = ListContext {
                catalog,
                ctx,
                phase,
                mode: mode.parse_mode(),
                skip_non_writable: true,
                is_last_list: i + 1 == lists.len() || ctx_of(i + 1) != ctx,
            };
            let mut arena = ParseArena::new();
            for &(off, v) in &self.arena_plants {
                arena.plant(off, v);
            }
            arena.load_list(&lists[i].to_bytes());
            let td = self.tds.get_mut(&tdr).expect("checked by begin");
            let mut sink = ImportSink { td, vp, required_checks: mode.bug2, gpa_checks: mode.bug9 };
            let out = write_list(&lc, expected, &mut arena, &mut sink, &mut progress);
            self.last_import.push(ListOracle { arena, trace: out.trace.clone() });
            if out.status != StatusWord::SUCCESS {
                failure = Some((out.status, out.ext));
                break;
            }
            expected = out.next;
            if i + 1 < lists.len() && self.interrupt.pending(leaf, i) {
                let td = self.tds.get_mut(&tdr).expect("checked by begin");
                td.streams[stream as usize].interrupted_state.cursor = Some(ResumeCursor {
                    leaf,
                    mbmd: b.mbmd,
                    vp_index: vp,
                    lists_done: i + 1,
                    expected,
                    progress: progress.clone(),
                });
                interrupted = true;
                break;
            }
        }
        let td = self.tds.get_mut(&tdr).expect("checked by begin");
        if interrupted {
            td.streams[stream as usize].unlock();
            self.end(tdr, leaf, from, Outcome::Interrupted);
            return Ok(StatusWord::INTERRUPTED_RESUMABLE);
        }
        if failure.is_none() {
            failure = completion_check(td, leaf, &progress, catalog, ty, lists.len(), phase, mode);
        }
        let sc = &mut td.streams[stream as usize];
        sc.unlock();
        if let Some((status, ext)) = failure {
            sc.interrupted_state.latch(status, ext);
            let (status, ext) = (sc.interrupted_state.status.fatal(), sc.interrupted_state.ext);
            self.end(tdr, leaf, from, Outcome::Failed);
            return Err(TdxError::with_ext(status, ext));
        }
        sc.interrupted_state = InterruptedState::default();
        td.import_touched = true;
        if let Some(i) = vp {
            let v = &mut td.vcpus[i];
            v.migrated = true;
            v.initialized = true;
            td.num_migrated_vcpus += 1;
        }
        self.end(tdr, leaf, from, Outcome::Completed);
        Ok(StatusWord::SUCCESS)
    }

    /// Key, stream, MAC and resume-cursor checks ahead of the list loop.
    #[allow(clippy::type_complexity)]
    fn import_prepare(
        &mut self,
        tdr: u64,
        stream: u32,
        leaf: Leaf,
        ty: BundleType,
        b: &Bundle,
        vp: Option<usize>,
    ) -> ApiResult<(Vec<crate::md_list::MdList>, Option<ResumeCursor>)> {
        let td = self.tdm(tdr)?;
        if let Some(i) = vp {
            match td.vcpus.get(i) {
                None => return Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::RDX))),
                Some(v) if v.tdcx_pages.len() + 1 != TDVPS_PAGES => return Err(err(StatusWord::TDCX_NUM_INCORRECT)),
                Some(v) if v.migrated => return Err(err(StatusWord::IMPORT_ACTIVITY_MISMATCH)),
                Some(_) => {}
            }
        }
        if !td.mig_dec_key_set {
            return Err(err(StatusWord::MIGRATION_KEY_NOT_SET));
        }
        let key = td.mig_dec_key();
        let sc = td
            .streams
            .get_mut(stream as usize)
            .ok_or_else(|| err(StatusWord::OPERAND_INVALID.with_operand(operand::R8)))?;
        let resume = match sc.interrupted_state.cursor.take() {
            Some(c) if c.leaf == leaf && c.mbmd == b.mbmd && c.vp_index == vp => Some(c),
            Some(c) => {
                sc.interrupted_state.cursor = Some(c);
                return Err(err(StatusWord::IMPORT_ACTIVITY_MISMATCH));
            }
            None => None,
        };
        let restore = |sc: &mut MigStreamContext, c: Option<ResumeCursor>| sc.interrupted_state.cursor = c;
        let pt = match open(&key, &b.mbmd, &b.data) {
            Ok(pt) => pt,
            Err(e) => {
                restore(sc, resume);
                return Err(err(e.status()));
            }
        };
        if b.mbmd.kind() != Some(ty) || b.mbmd.stream_index != sc.stream_index {
            restore(sc, resume);
            return Err(err(StatusWord::MIGRATION_BUNDLE_INVALID));
        }
        if resume.is_none() {
            sc.accept_counter(b.mbmd.iv_counter).map_err(|e| err(e.status()))?;
        }
        let lists = split_lists(&pt).ok_or_else(|| err(StatusWord::MIGRATION_BUNDLE_INVALID))?;
        sc.lock().map_err(|e| err(e.status()))?;
        Ok((lists, resume))
    }

    pub fn import_mem(&mut self, tdr: u64, stream: u32, b: &Bundle) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ImportMem)?;
        let r = (|| {
            let td = self.tdm(tdr)?;
            if !td.mig_dec_key_set {
                return Err(err(StatusWord::MIGRATION_KEY_NOT_SET));
            }
            let key = td.mig_dec_key();
            let sc = td
                .streams
                .get_mut(stream as usize)
                .ok_or_else(|| err(StatusWord::OPERAND_INVALID.with_operand(operand::R8)))?;
            let pt = open(&key, &b.mbmd, &b.data).map_err(|e| err(e.status()))?;
            if b.mbmd.kind() != Some(BundleType::Mem) {
                return Err(err(StatusWord::MIGRATION_BUNDLE_INVALID));
            }
            sc.accept_counter(b.mbmd.iv_counter).map_err(|e| err(e.status()))?;
            for page in pt.chunks(MD_LIST_SIZE) {
                let gpa = u64::from_le_bytes(page[..8].try_into().expect("page holds a GPA"));
                let token = u64::from_le_bytes(page[8..16].try_into().expect("page holds a token"));
                if !gpa.is_multiple_of(PAGE_SIZE) || !check_gpa_validity(gpa, td.gpaw(), true) {
                    return Err(err(StatusWord::OPERAND_INVALID.with_operand(operand::R9)));
                }
                td.sept_walk(gpa).map_err(err)?;
                td.sept.insert(gpa);
                td.pages.insert(gpa, token);
            }
            Ok(())
        })();
        self.finish(tdr, Leaf::ImportMem, from, r)
    }

    /// Checks only the token and that every VP has been imported.
    pub fn import_track(&mut self, tdr: u64, token: &EpochToken) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ImportTrack)?;
        let td = self.tdm(tdr)?;
        let r = if !token.start {
            Err(err(StatusWord::MIGRATION_TOKEN_INVALID))
        } else if td.num_migrated_vcpus != td.num_vcpus() {
            Err(err(StatusWord::VCPU_COUNT_MISMATCH))
        } else {
            td.import_epoch = token.epoch;
            Ok(())
        };
        self.finish(tdr, Leaf::ImportTrack, from, r)
    }

    pub fn import_commit(&mut self, tdr: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ImportCommit)?;
        self.finish(tdr, Leaf::ImportCommit, from, Ok(()))
    }

    pub fn import_end(&mut self, tdr: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ImportEnd)?;
        self.finish(tdr, Leaf::ImportEnd, from, Ok(()))
    }

    pub fn import_abort(&mut self, tdr: u64) -> ApiResult<()> {
        let from = self.begin(tdr, Leaf::ImportAbort)?;
        self.finish(tdr, Leaf::ImportAbort, from, Ok(()))
    }
}

/// Post-loop checks of the fixed variants: every required field written
/// (skip accounting) and, for immutable state, import-grade attributes.
#[allow(clippy::too_many_arguments)]
fn completion_check(
    td: &TdComplex,
    leaf: Leaf,
    progress: &ImportProgress,
    catalog: &Catalog,
    ty: BundleType,
    num_lists: usize,
    phase: Phase,
    mode: EngineMode,
) -> Option<(StatusWord, [u64; 2])> {
    if mode.bug2 == Variant::Fixed {
        let mut ctxs: Vec<MdContext> = (0..num_lists).filter_map(|i| list_context(ty, i)).collect();
        ctxs.dedup();
        for ctx in ctxs {
            if let Some(id) = progress.missing_required(catalog, ctx, phase) {
                return Some((StatusWord::METADATA_REQUIRED_FIELD_MISSING, [id.raw(), 0]));
            }
        }
    }
    if leaf == Leaf::ImportStateImmutable && mode.v1 == Variant::Fixed && !verify_td_attributes(td.attributes(), true) {
        return Some((StatusWord::METADATA_FIELD_VALUE_NOT_VALID, [keys().attributes.raw(), 0]));
    }
    None
}

/// Source and destination sharing one platform, with a session key
/// installed on both and one stream each.
pub struct MigrationPair {
    pub src: u64,
    pub dst: u64,
    pub key: MigrationSessionKey,
    pub src_stream: u32,
    pub dst_stream: u32,
}

impl Platform {
    pub fn migration_pair(&mut self, p: &BuildParams) -> ApiResult<MigrationPair> {
        let src = self.build_td(p)?;
        let dst = self.create_import_target()?;
        let key = MigrationSessionKey::generate(&mut self.rng);
        self.migtd_install_key(src, key)?;
        self.migtd_install_key(dst, key)?;
        let src_stream = self.mig_stream_create(src)?;
        let dst_stream = self.mig_stream_create(dst)?;
        Ok(MigrationPair { src, dst, key, src_stream, dst_stream })
    }

    /// Whole export then whole import, every VP and page, ending RUNNABLE.
    pub fn migrate(&mut self, m: &MigrationPair) -> ApiResult<()> {
        let imm = self.export_state_immutable(m.src, m.src_stream)?;
        self.import_state_immutable(m.dst, m.dst_stream, &imm)?;
        let gpas: Vec<u64> = self.tds[&m.src].pages.keys().copied().collect();
        if !gpas.is_empty() {
            let mem = self.export_mem(m.src, m.src_stream, &gpas, false)?.expect("not cancelled");
            self.import_mem(m.dst, m.dst_stream, &mem)?;
        }
        self.export_pause(m.src)?;
        let tdb = self.export_state_td(m.src, m.src_stream)?;
        self.import_state_td(m.dst, m.dst_stream, &tdb)?;
        for vp in 0..self.tds[&m.src].vcpus.len() {
            let vb = self.export_state_vp(m.src, m.src_stream, vp)?;
            let slot = self.import_vp_slot(m.dst)?;
            self.import_state_vp(m.dst, m.dst_stream, slot, &vb)?;
        }
        let token = self.export_track(m.src, m.src_stream)?;
        self.import_track(m.dst, &token)?;
        self.import_commit(m.dst)?;
        self.import_end(m.dst)
    }
}
