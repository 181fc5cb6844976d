// SPDX-License-Identifier: Apache-2.0
use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdmig_core::bundle::Bundle;
use tdmig_core::crypto::{
    open, BundleType, CounterPolicy, EnvelopeError, InterruptedState, Mbmd, MigStreamContext, MigrationSessionKey,
    MBMD_SIZE,
};
use tdmig_core::engine::{BuildParams, Platform};
use tdmig_core::md_list::MD_LIST_SIZE;
use tdmig_core::mode::EngineMode;
use tdmig_core::status::StatusWord;

const TYPES: [BundleType; 4] = [BundleType::Immutable, BundleType::Td, BundleType::Vp, BundleType::Mem];

fn random_payload(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let lists = rng.random_range(1..=3);
    let mut pt = vec![0u8; lists * MD_LIST_SIZE];
    rng.fill(&mut pt[..]);
    pt
}

#[test]
fn round_trip_over_random_bundles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..300 {
        let key = MigrationSessionKey::generate(&mut rng);
        let mut sc = MigStreamContext::with_key(rng.random_range(0..4), key);
        let pt = random_payload(&mut rng);
        let ty = TYPES[i % 4];
        let (m, ct) = sc.encrypt_bundle(ty, &pt).unwrap();
        assert_ne!(ct, pt);
        assert_eq!(sc.decrypt_bundle(&m, &ct).unwrap(), pt);
        assert_eq!(m.kind(), Some(ty));
    }
}

#[test]
fn same_plaintext_twice_differs() {
    let mut sc = MigStreamContext::with_key(0, MigrationSessionKey([1, 2, 3, 4]));
    let pt = vec![7u8; MD_LIST_SIZE];
    let (m1, c1) = sc.encrypt_bundle(BundleType::Td, &pt).unwrap();
    let (m2, c2) = sc.encrypt_bundle(BundleType::Td, &pt).unwrap();
    assert_ne!(c1, c2);
    assert_eq!((m1.iv_counter, m2.iv_counter), (0, 1));
    let (iv1, iv2) = (m1.iv(), m2.iv());
    assert_eq!(iv1[..4], iv2[..4], "only the counter part differs");
    assert_ne!(iv1[4..], iv2[4..]);
}

#[test]
fn every_mbmd_bit_flip_is_detected() {
    let key = MigrationSessionKey([9, 8, 7, 6]);
    let mut sc = MigStreamContext::with_key(1, key);
    let (m, ct) = sc.encrypt_bundle(BundleType::Vp, &vec![0x5a; MD_LIST_SIZE]).unwrap();
    let bytes = m.to_bytes();
    for bit in 0..MBMD_SIZE * 8 {
        let mut b = bytes;
        b[bit / 8] ^= 1 << (bit % 8);
        let tampered = Mbmd::from_bytes(&b).unwrap();
        assert_eq!(open(&key, &tampered, &ct), Err(EnvelopeError::Integrity), "bit {bit}");
    }
}

#[test]
fn ciphertext_bit_flips_are_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let key = MigrationSessionKey::generate(&mut rng);
    let mut sc = MigStreamContext::with_key(0, key);
    let pt = random_payload(&mut rng);
    let (m, ct) = sc.encrypt_bundle(BundleType::Td, &pt).unwrap();
    // One flipped bit in every byte, at a random position.
    for byte in 0..ct.len() {
        let mut c = ct.clone();
        c[byte] ^= 1 << rng.random_range(0..8);
        assert_eq!(open(&key, &m, &c), Err(EnvelopeError::Integrity), "byte {byte}");
    }
    let mut short = ct.clone();
    short.pop();
    assert!(open(&key, &m, &short).is_err());
    let other = MigrationSessionKey::generate(&mut rng);
    assert_eq!(open(&other, &m, &ct), Err(EnvelopeError::Integrity));
}

#[test]
fn fresh_context_counts_from_zero() {
    let mut sc = MigStreamContext::with_key(3, MigrationSessionKey([1, 1, 1, 1]));
    assert_eq!(sc.iv_counter(), 0);
    let (m, _) = sc.encrypt_bundle(BundleType::Immutable, &vec![0; 3 * MD_LIST_SIZE]).unwrap();
    assert_eq!((m.iv_counter, sc.iv_counter()), (0, 1), "one step per bundle");
    sc.policy = CounterPolicy::PerList;
    let (m, _) = sc.encrypt_bundle(BundleType::Immutable, &vec![0; 3 * MD_LIST_SIZE]).unwrap();
    assert_eq!((m.iv_counter, sc.iv_counter()), (1, 4));
    assert_eq!(MigStreamContext::new(0).encrypt_bundle(BundleType::Td, &[0; MD_LIST_SIZE]), Err(EnvelopeError::NoKey));
    assert!(matches!(sc.encrypt_bundle(BundleType::Td, &[0; 100]), Err(EnvelopeError::NotListAligned(100))));
}

#[test]
fn import_side_rejects_replayed_counters() {
    let mut sc = MigStreamContext::new(0);
    sc.accept_counter(0).unwrap();
    sc.accept_counter(5).unwrap();
    assert_eq!(sc.accept_counter(5), Err(EnvelopeError::Integrity));
    assert_eq!(sc.accept_counter(2), Err(EnvelopeError::Integrity));
}

/// Memory exports through the engine, randomly cancelled: every sealed
/// bundle, kept or thrown away, consumed its own IV.
#[test]
fn ivs_unique_over_mixed_export_and_cancel() {
    let mut p = Platform::new(EngineMode::fixed(), 5);
    let m = p.migration_pair(&BuildParams::default()).unwrap();
    p.export_state_immutable(m.src, m.src_stream).unwrap();
    let gpa = *p.td(m.src).unwrap().pages.keys().next().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ivs = HashSet::new();
    let mut kept = 0;
    let n = 2_000u64;
    for _ in 0..n {
        let cancel = rng.random_bool(0.5);
        let before = p.td(m.src).unwrap().streams[m.src_stream as usize].iv_counter();
        let r = p.export_mem(m.src, m.src_stream, &[gpa], cancel).unwrap();
        let after = p.td(m.src).unwrap().streams[m.src_stream as usize].iv_counter();
        assert_eq!(after, before + 1, "cancelled exports still advance the counter");
        assert!(ivs.insert((m.src_stream, before)));
        if let Some(b) = r {
            kept += 1;
            assert_eq!(b.mbmd.iv_counter, before);
            assert!(ivs.contains(&(b.mbmd.stream_index, b.mbmd.iv_counter)));
        }
    }
    assert_eq!(ivs.len() as u64, n);
    assert!(kept > 0 && kept < n);
}

#[test]
fn reseal_moves_to_the_next_counter() {
    let key = MigrationSessionKey([4, 3, 2, 1]);
    let b = Bundle::seal(&key, BundleType::Td, 0, 10, &[1; MD_LIST_SIZE]);
    let r = b.reseal(&key, &[2; MD_LIST_SIZE]).unwrap();
    assert_eq!(r.mbmd.iv_counter, 11);
    assert_eq!(r.open(&key).unwrap(), vec![2; MD_LIST_SIZE]);
}

fn failure() -> impl Strategy<Value = (StatusWord, [u64; 2])> {
    (1u64..0x100, any::<[u64; 2]>()).prop_map(|(c, ext)| (StatusWord(0xC000_0000_0000_0000 | (c << 32)), ext))
}

proptest! {
    #[test]
    fn latch_keeps_the_first_failure(fs in prop::collection::vec(failure(), 1..10)) {
        let mut s = InterruptedState::default();
        for &(st, ext) in &fs {
            s.latch(st, ext);
        }
        prop_assert_eq!(s.status, fs[0].0);
        prop_assert_eq!(s.ext, fs[0].1);
    }

    #[test]
    fn key_text_round_trips(q in any::<[u64; 4]>()) {
        let k = MigrationSessionKey(q);
        prop_assert_eq!(k.to_string().parse::<MigrationSessionKey>().unwrap(), k);
    }
}
