// SPDX-License-Identifier: Apache-2.0
//! Sealed migration bundles as they travel between hosts, plus the
//! host-side editing helpers the toolkit needs (patch a value, blank a
//! write mask, re-seal).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::catalog::{Catalog, FieldPos};
use crate::codec::{pack_lists, parse_list, FieldRecord, ParseError};
use crate::crypto::{open, seal, BundleType, EnvelopeError, Mbmd, MigrationSessionKey};
use crate::field_id::{MdContext, MdFieldId};
use crate::md_list::{join_lists, split_lists, MdList};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bundle {
    pub mbmd: Mbmd,
    pub data: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("payload is not a whole number of 4 KiB lists")]
    NotLists,
    #[error("list {index}: {source}")]
    Parse { index: usize, source: ParseError },
    #[error("no field {0} in this bundle")]
    NoField(String),
    #[error("element {elem} out of range for {name}")]
    NoElement { name: String, elem: u32 },
    #[error("memory bundles carry no metadata lists")]
    NotMetadata,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.display().to_string(), source }
}

/// Context of each list in a bundle of the given type: an immutable
/// bundle starts with one platform list, everything after it is TD scope.
pub fn list_context(ty: BundleType, index: usize) -> Option<MdContext> {
    match ty {
        BundleType::Immutable if index == 0 => Some(MdContext::Sys),
        BundleType::Immutable | BundleType::Td => Some(MdContext::Td),
        BundleType::Vp => Some(MdContext::Vp),
        BundleType::Mem => None,
    }
}

impl Bundle {
    pub fn seal(
        key: &MigrationSessionKey,
        ty: BundleType,
        stream_index: u32,
        counter: u64,
        plaintext: &[u8],
    ) -> Bundle {
        let (mbmd, data) = seal(key, ty, stream_index, counter, plaintext);
        Bundle { mbmd, data }
    }

    pub fn seal_lists(
        key: &MigrationSessionKey,
        ty: BundleType,
        stream_index: u32,
        counter: u64,
        lists: &[MdList],
    ) -> Bundle {
        Bundle::seal(key, ty, stream_index, counter, &join_lists(lists))
    }

    pub fn kind(&self) -> Option<BundleType> {
        self.mbmd.kind()
    }

    pub fn open(&self, key: &MigrationSessionKey) -> Result<Vec<u8>, BundleError> {
        Ok(open(key, &self.mbmd, &self.data)?)
    }

    pub fn open_lists(&self, key: &MigrationSessionKey) -> Result<Vec<MdList>, BundleError> {
        split_lists(&self.open(key)?).ok_or(BundleError::NotLists)
    }

    /// Same plaintext under the next counter value.
    pub fn reseal(&self, key: &MigrationSessionKey, plaintext: &[u8]) -> Result<Bundle, BundleError> {
        let ty = self.kind().ok_or(EnvelopeError::Malformed)?;
        Ok(Bundle::seal(key, ty, self.mbmd.stream_index, self.mbmd.iv_counter + 1, plaintext))
    }

    pub fn write_pair(&self, mbmd_path: &Path, data_path: &Path) -> Result<(), BundleError> {
        fs::write(mbmd_path, self.mbmd.to_bytes()).map_err(io_err(mbmd_path))?;
        fs::write(data_path, &self.data).map_err(io_err(data_path))
    }

    pub fn read_pair(mbmd_path: &Path, data_path: &Path) -> Result<Bundle, BundleError> {
        let m = fs::read(mbmd_path).map_err(io_err(mbmd_path))?;
        let data = fs::read(data_path).map_err(io_err(data_path))?;
        Ok(Bundle { mbmd: Mbmd::from_bytes(&m)?, data })
    }
}

/// Field records of every list, grouped by context in list order.
pub fn lists_to_records(
    catalog: &Catalog,
    ty: BundleType,
    lists: &[MdList],
) -> Result<Vec<(MdContext, Vec<FieldRecord>)>, BundleError> {
    let mut out: Vec<(MdContext, Vec<FieldRecord>)> = Vec::new();
    for (index, list) in lists.iter().enumerate() {
        let ctx = list_context(ty, index).ok_or(BundleError::NotMetadata)?;
        let seqs = parse_list(catalog, ctx, list).map_err(|source| BundleError::Parse { index, source })?;
        if out.last().is_none_or(|(c, _)| *c != ctx) {
            out.push((ctx, Vec::new()));
        }
        let recs = &mut out.last_mut().expect("pushed above").1;
        for s in seqs {
            let single = s.fields.len() == 1;
            for f in s.fields {
                recs.push(FieldRecord { pos: f.pos, values: f.values, wr_mask: s.wr_mask.filter(|_| single) });
            }
        }
    }
    Ok(out)
}

pub fn records_to_lists(catalog: &Catalog, groups: &[(MdContext, Vec<FieldRecord>)]) -> Vec<MdList> {
    groups.iter().flat_map(|(ctx, recs)| pack_lists(catalog, *ctx, recs)).collect()
}

fn find_record<'a>(
    catalog: &Catalog,
    groups: &'a mut [(MdContext, Vec<FieldRecord>)],
    id: MdFieldId,
) -> Result<(&'a mut FieldRecord, u32), BundleError> {
    for (ctx, recs) in groups.iter_mut() {
        if id.context_code != ctx.code() {
            continue;
        }
        if let Some((pos, elem)) = catalog.locate(*ctx, id) {
            if let Some(r) = recs.iter_mut().find(|r| r.pos == pos) {
                return Ok((r, elem));
            }
        }
    }
    Err(BundleError::NoField(format!("{id:x}")))
}

/// Replaces one element value.
pub fn patch_element(
    catalog: &Catalog,
    ty: BundleType,
    lists: &[MdList],
    id: MdFieldId,
    value: u64,
) -> Result<Vec<MdList>, BundleError> {
    let mut groups = lists_to_records(catalog, ty, lists)?;
    let (rec, elem) = find_record(catalog, &mut groups, id)?;
    *rec.values.get_mut(elem as usize).ok_or_else(|| BundleError::NoElement { name: format!("{id:x}"), elem })? = value;
    Ok(records_to_lists(catalog, &groups))
}

/// Re-emits one field as its own sequence with a write mask, e.g. 0 to
/// have the importer skip it.
pub fn set_write_mask(
    catalog: &Catalog,
    ty: BundleType,
    lists: &[MdList],
    id: MdFieldId,
    mask: u64,
) -> Result<Vec<MdList>, BundleError> {
    let mut groups = lists_to_records(catalog, ty, lists)?;
    let (rec, _) = find_record(catalog, &mut groups, id)?;
    rec.wr_mask = Some(mask);
    Ok(records_to_lists(catalog, &groups))
}

/// Identifier of field `field` element 0 of a named entry.
pub fn field_id_by_name(catalog: &Catalog, ctx: MdContext, name: &str, field: u32) -> Option<MdFieldId> {
    let e = catalog.by_name(ctx, name)?;
    (field < e.num_of_fields).then(|| e.element_id(field, 0))
}

/// Position of a named entry's first field.
pub fn pos_by_name(catalog: &Catalog, ctx: MdContext, name: &str) -> Option<FieldPos> {
    catalog.index_of(ctx, name).map(|entry| FieldPos { entry, field: 0 })
}
