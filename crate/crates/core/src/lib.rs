// SPDX-License-Identifier: Apache-2.0
//! Desk-scale model of the TDX module TD lifecycle and the live-migration
//! metadata protocol, with switchable vulnerable and fixed behavior.

pub mod arena;
pub mod bundle;
pub mod catalog;
pub mod codec;
pub mod craft;
pub mod crypto;
pub mod engine;
pub mod field_id;
pub mod md_list;
pub mod mode;
pub mod scenario;
pub mod state_machine;
pub mod status;
pub mod td;
