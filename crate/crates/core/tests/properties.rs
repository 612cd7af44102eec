//! Property tests for the scheme-wide invariants.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use pmcdb::crypto::{det_decrypt, det_encrypt, group_encode, prg_expand, prp_shuffle, SchemeParams, SecretKeys};
use pmcdb::model::{closest_group, Element, Query, Record, RecordId};
use pmcdb::rss::{self, ShuffleJob};
use pmcdb::store;
use proptest::prelude::*;

fn arb_table() -> impl Strategy<Value = (SchemeParams, Vec<Row>)> {
    (1usize..=3, 0u32..=3, 1usize..40, 2usize..12).prop_flat_map(|(fields, bits, rows, alphabet)| {
        let p = SchemeParams::new(fields).with_group_bits(bits);
        let row = proptest::collection::vec(0..alphabet, fields).prop_map(|r| {
            r.into_iter()
                .enumerate()
                .map(|(f, v)| format!("f{f}v{v}"))
                .collect::<Row>()
        });
        (Just(p), proptest::collection::vec(row, rows))
    })
}

#[derive(Debug, Clone)]
enum Op {
    Select(usize, usize),
    Insert(Vec<usize>),
    Delete(usize, usize),
}

fn arb_ops(fields: usize) -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        4 => (0..fields, 0usize..14).prop_map(|(f, v)| Op::Select(f, v)),
        2 => proptest::collection::vec(0usize..14, fields).prop_map(Op::Insert),
        1 => (0..fields, 0usize..14).prop_map(|(f, v)| Op::Delete(f, v)),
    ];
    proptest::collection::vec(op, 1..25)
}

fn value(f: usize, v: usize) -> String {
    format!("f{f}v{v}")
}

/// Sorted id sets of every group, per field.
fn il_sets(stores: &pmcdb::admin::Stores) -> BTreeMap<pmcdb::model::GroupKey, BTreeSet<RecordId>> {
    stores.gdb.iter().map(|(k, e)| (*k, e.il.iter().copied().collect())).collect()
}

fn ids_once_per_field(stores: &pmcdb::admin::Stores, fields: usize) -> Result<(), TestCaseError> {
    for f in 0..fields {
        let mut ids: Vec<RecordId> = stores
            .gdb
            .iter()
            .filter(|(k, _)| k.field == f)
            .flat_map(|(_, e)| e.il.iter().copied())
            .collect();
        ids.sort_unstable();
        let expect: Vec<RecordId> = (0..stores.edb.len() as u64).collect();
        prop_assert_eq!(ids, expect, "field {} id lists do not cover each position once", f);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn det_encrypt_is_a_bijection(a in proptest::array::uniform16(any::<u8>()), b in proptest::array::uniform16(any::<u8>()), key in proptest::array::uniform16(any::<u8>())) {
        let p = SchemeParams::new(1);
        let ca = det_encrypt(&key, &a, &p).unwrap();
        prop_assert_eq!(det_decrypt(&key, &ca, &p).unwrap(), a.to_vec());
        let cb = det_encrypt(&key, &b, &p).unwrap();
        prop_assert_eq!(a == b, ca == cb);
    }

    #[test]
    fn prg_expand_depends_only_on_key_and_seed(s2 in proptest::array::uniform16(any::<u8>()), seed in proptest::array::uniform16(any::<u8>()), fields in 1usize..4) {
        let p = SchemeParams::new(fields);
        let a = prg_expand(&s2, &seed, &p).unwrap();
        let _ = prg_expand(&s2, &[0u8; 16], &p).unwrap();
        let b = prg_expand(&s2, &seed, &p).unwrap();
        prop_assert_eq!(a.as_bytes().len(), p.nonce_len());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shuffle_preserves_the_multiset(seed in any::<u64>(), ids in proptest::collection::vec(any::<u64>(), 1..200)) {
        let mut out = prp_shuffle(seed, &ids).unwrap();
        let mut ids = ids;
        out.sort_unstable();
        ids.sort_unstable();
        prop_assert_eq!(out, ids);
    }

    #[test]
    fn group_encode_stays_below_two_to_the_b(key in proptest::array::uniform16(any::<u8>()), e in proptest::array::uniform16(any::<u8>()), bits in 0u32..=20) {
        let p = SchemeParams::new(1);
        let g = group_encode(&key, &e, bits, &p).unwrap();
        prop_assert!(g.0 < 1u64 << bits);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn setup_invariants((p, rows) in arb_table(), seed in any::<u64>()) {
        let fx = deploy(p.clone(), rows.clone(), seed);
        let stores = fx.dep.endpoints().stores();
        prop_assert_eq!(stores.edb.len(), stores.ndb.len());

        // Position i of NDB unblinds position i of EDB, and the tag recovers
        // the real/dummy flag.
        let decrypted = fx.admin.decrypt_all(&stores.edb, &stores.ndb).unwrap();
        let real: Vec<Row> = decrypted.iter().filter(|r| r.real).map(text_row).collect();
        prop_assert_eq!(multiset(real), multiset(rows.clone()));
        for n in &stores.ndb {
            prop_assert_eq!(&prg_expand(fx.keys.s2(), &n.seed, &p).unwrap(), &n.nonce);
        }
        occurrence_equality(&fx.admin, &stores).map_err(TestCaseError::fail)?;
        ids_once_per_field(&stores, p.field_count)?;

        // Same keys, table and rng seed give the same stores.
        let again = fx.admin.setup(&to_db(&rows, &p), None, &mut rng(seed)).unwrap().stores;
        let twice = fx.admin.setup(&to_db(&rows, &p), None, &mut rng(seed)).unwrap().stores;
        prop_assert_eq!(again, twice);

        // Store files round-trip byte-exact and stay aligned.
        let edb = store::encode_edb(&stores.edb, &p).unwrap();
        let ndb = store::encode_ndb(&stores.ndb, &p).unwrap();
        let gdb = store::encode_gdb(&stores.gdb, &p);
        prop_assert_eq!(&store::encode_edb(&store::decode_edb(&edb, &p).unwrap(), &p).unwrap(), &edb);
        prop_assert_eq!(&store::encode_ndb(&store::decode_ndb(&ndb, &p).unwrap(), &p).unwrap(), &ndb);
        prop_assert_eq!(store::encode_gdb(&store::decode_gdb(&gdb, &p).unwrap(), &p), gdb);
        prop_assert_eq!(store::decode_edb(&edb, &p).unwrap().len(), store::decode_ndb(&ndb, &p).unwrap().len());
    }

    #[test]
    fn operation_sequences_keep_every_invariant((p, rows) in arb_table(), ops in arb_ops(3), seed in any::<u64>()) {
        let mut fx = deploy(p.clone(), rows.clone(), seed);
        let mut shadow = rows;
        for op in ops {
            let before = fx.dep.endpoints().stores();
            match op {
                Op::Select(f, v) => {
                    let f = f % p.field_count;
                    let v = value(f, v);
                    let e = Element::from_str(&v, &p).unwrap();
                    let t = fx.dep.select_traced(&Query::select(f, e.clone())).unwrap();
                    let got = multiset(t.rows.iter().map(text_row));
                    prop_assert_eq!(&got, &shadow_select(&shadow, f, &v));
                    let after = fx.dep.endpoints().stores();
                    prop_assert_eq!(after.edb.len(), before.edb.len());
                    prop_assert_eq!(after.ndb.len(), before.ndb.len());
                    // The searched group keeps its positions; groups of other
                    // fields may trade ids, which ids_once_per_field covers.
                    let key = closest_group(&before.gdb, f, fx.admin.client().group_of(&e).unwrap()).unwrap();
                    prop_assert_eq!(&il_sets(&after)[&key], &il_sets(&before)[&key]);
                    // |SR| is the threshold of the group the query resolved to.
                    let metas = fx.admin.open_metas(&before.gdb).unwrap();
                    if metas[&key].elements.contains(&e) {
                        prop_assert_eq!(t.sr_len as u64, metas[&key].tau);
                    }
                }
                Op::Insert(vs) => {
                    let row: Row = (0..p.field_count).map(|f| value(f, vs[f])).collect();
                    let cells: Vec<&str> = row.iter().map(String::as_str).collect();
                    let t = fx.dep.insert(&Record::from_strs(&cells, &p).unwrap()).unwrap();
                    let after = fx.dep.endpoints().stores();
                    prop_assert_eq!(after.edb.len(), before.edb.len() + t.w + 1);
                    prop_assert_eq!(after.ndb.len(), before.ndb.len() + t.w + 1);
                    shadow.push(row);
                }
                Op::Delete(f, v) => {
                    let f = f % p.field_count;
                    let v = value(f, v);
                    let e = Element::from_str(&v, &p).unwrap();
                    let key = closest_group(&before.gdb, f, fx.admin.client().group_of(&e).unwrap()).unwrap();
                    let t = fx.dep.delete(&Query::delete(f, e)).unwrap();
                    let n = shadow.len();
                    shadow.retain(|r| r[f] != v);
                    prop_assert_eq!(t.deleted, n - shadow.len());
                    let after = fx.dep.endpoints().stores();
                    prop_assert_eq!(after.edb.len(), before.edb.len());
                    prop_assert_eq!(&il_sets(&after)[&key], &il_sets(&before)[&key]);
                    let occ = |s: &pmcdb::admin::Stores| store_occurrences(&fx.admin.decrypt_all(&s.edb, &s.ndb).unwrap());
                    prop_assert_eq!(occ(&after), occ(&before));
                }
            }
            let now = fx.dep.endpoints().stores();
            occurrence_equality(&fx.admin, &now).map_err(TestCaseError::fail)?;
            ids_once_per_field(&now, p.field_count)?;
            for n in &now.ndb {
                prop_assert_eq!(&prg_expand(fx.keys.s2(), &n.seed, &p).unwrap(), &n.nonce);
            }
        }
        let all = fx.dep.endpoints().stores();
        let real: Vec<Row> = fx.admin.decrypt_all(&all.edb, &all.ndb).unwrap().iter().filter(|r| r.real).map(text_row).collect();
        prop_assert_eq!(multiset(real), multiset(shadow));
    }

    #[test]
    fn rss_shuffle_is_pure_and_conserves_plaintexts((p, rows) in arb_table(), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let mut fx = deploy(p.clone(), rows, seed);
        let stores = fx.dep.endpoints().stores();
        let keys: Vec<_> = stores.gdb.keys().copied().collect();
        let key = keys[pick.index(keys.len())];
        let il = stores.gdb[&key].il.clone();
        let plain = |recs: &[(RecordId, pmcdb::model::EncryptedRecord)], ndb: &[pmcdb::model::NonceEntry]| {
            let mut m: BTreeMap<(Row, bool), usize> = BTreeMap::new();
            for (id, r) in recs {
                let d = fx.admin.client().decrypt_with_nonce(r, &ndb[*id as usize].nonce).unwrap();
                *m.entry((text_row(&d), d.real)).or_default() += 1;
            }
            m
        };
        let ercds = fx.dep.endpoints().sss.sss().records(&il).unwrap();
        let before = plain(&ercds, &stores.ndb);

        let plan = fx.dep.endpoints_mut().iws.iws_mut().pre_shuffle(&il).unwrap();
        let job = ShuffleJob { ercds, il_prime: plan.il_prime, nn: plan.nn };
        let out = rss::shuffle(job.clone(), &p).unwrap();
        prop_assert_eq!(&rss::shuffle(job, &p).unwrap(), &out);
        let new_ndb = fx.dep.endpoints().iws.iws().ndb().to_vec();
        prop_assert_eq!(plain(&out, &new_ndb), before);
        let ids: BTreeSet<RecordId> = out.iter().map(|(id, _)| *id).collect();
        prop_assert_eq!(ids, il.iter().copied().collect::<BTreeSet<_>>());
    }
}

#[test]
fn fresh_keys_differ() {
    let p = SchemeParams::new(1);
    let mut r = rng(1);
    let a = SecretKeys::generate(&mut r, &p);
    let b = SecretKeys::generate(&mut r, &p);
    assert_ne!(a.s1(), b.s1());
    assert_ne!(a.s2(), b.s2());
}
