//! Random tables, deployments and plaintext oracles shared by the
//! integration tests. Oracles here recompute everything from plaintext and
//! raw HMAC, without going through the scheme's own grouping or padding code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hmac::{Hmac, Mac};
use pmcdb::admin::{Admin, Stores};
use pmcdb::crypto::{SchemeParams, SecretKeys};
use pmcdb::model::{Element, PlainDatabase, Record, UserId};
use pmcdb::transport::{Deployment, InProc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

pub type Row = Vec<String>;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Values are skewed so occurrence counts differ within groups.
pub fn random_rows<R: Rng>(rng: &mut R, rows: usize, fields: usize, alphabet: usize) -> Vec<Row> {
    (0..rows)
        .map(|_| {
            (0..fields)
                .map(|f| {
                    let u: f64 = rng.gen();
                    format!("f{f}v{}", (u * u * alphabet as f64) as usize)
                })
                .collect()
        })
        .collect()
}

pub fn to_db(rows: &[Row], params: &SchemeParams) -> PlainDatabase {
    let names = (0..params.field_count).map(|f| format!("c{f}")).collect();
    let recs = rows
        .iter()
        .map(|r| {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            Record::from_strs(&cells, params).unwrap()
        })
        .collect();
    PlainDatabase::new(names, recs)
}

pub fn text_row(r: &Record) -> Row {
    r.elements.iter().map(Element::text).collect()
}

pub fn multiset<I: IntoIterator<Item = Row>>(rows: I) -> BTreeMap<Row, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r).or_default() += 1;
    }
    m
}

/// Group id of `value` under keyed-hash grouping: the low `bits` bits of
/// HMAC-SHA256(s1, zero-padded value), read big-endian.
pub fn oracle_group(s1: &[u8], value: &str, elem_len: usize, bits: u32) -> u64 {
    let mut e = value.as_bytes().to_vec();
    e.resize(elem_len, 0);
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(s1).unwrap();
    mac.update(&e);
    let d = mac.finalize().into_bytes();
    let tail = u64::from_be_bytes(d[24..32].try_into().unwrap());
    if bits == 0 {
        0
    } else {
        tail & ((1u64 << bits) - 1)
    }
}

/// Per field: group id → (element → real occurrence).
pub type Census = Vec<BTreeMap<u64, BTreeMap<String, u64>>>;

pub fn census(rows: &[Row], fields: usize, group: impl Fn(&str) -> u64) -> Census {
    let mut c: Census = vec![BTreeMap::new(); fields];
    for r in rows {
        for (f, v) in r.iter().enumerate() {
            *c[f].entry(group(v)).or_default().entry(v.clone()).or_default() += 1;
        }
    }
    c
}

/// Σ_f = Σ over groups and members of (τ − O(e)); returns every Σ_f.
pub fn oracle_sigma(c: &Census) -> Vec<u64> {
    c.iter()
        .map(|groups| {
            groups
                .values()
                .map(|members| {
                    let tau = members.values().copied().max().unwrap_or(0);
                    members.values().map(|o| tau - o).sum::<u64>()
                })
                .sum()
        })
        .collect()
}

/// Occurrences (real and dummy, NULL excluded) per field and element in a
/// decrypted store.
pub fn store_occurrences(rows: &[Record]) -> Vec<BTreeMap<String, u64>> {
    let fields = rows.first().map_or(0, |r| r.elements.len());
    let mut occ = vec![BTreeMap::new(); fields];
    for r in rows {
        for (f, e) in r.elements.iter().enumerate() {
            if !e.is_null() {
                *occ[f].entry(e.text()).or_default() += 1;
            }
        }
    }
    occ
}

/// Every element of every group occurs exactly τ times. Group membership
/// and τ come from the admin's opened metadata; counts come from the
/// decrypted store.
pub fn occurrence_equality(admin: &Admin, stores: &Stores) -> Result<(), String> {
    let rows = admin.decrypt_all(&stores.edb, &stores.ndb).map_err(|e| e.to_string())?;
    let occ = store_occurrences(&rows);
    let metas = admin.open_metas(&stores.gdb).map_err(|e| e.to_string())?;
    let mut seen: Vec<BTreeSet<String>> = vec![BTreeSet::new(); admin.params().field_count];
    for (key, meta) in &metas {
        for e in &meta.elements {
            let n = occ.get(key.field).and_then(|m| m.get(&e.text())).copied().unwrap_or(0);
            if n != meta.tau {
                return Err(format!("group {key}: {:?} occurs {n} times, tau {}", e.text(), meta.tau));
            }
            seen[key.field].insert(e.text());
        }
    }
    for (f, m) in occ.iter().enumerate() {
        if let Some(stray) = m.keys().find(|e| !seen[f].contains(*e)) {
            return Err(format!("field {f}: {stray:?} is in no group"));
        }
    }
    if stores.edb.len() != stores.ndb.len() {
        return Err("EDB and NDB lengths differ".into());
    }
    Ok(())
}

pub struct Fixture {
    pub params: SchemeParams,
    pub keys: SecretKeys,
    pub admin: Admin,
    pub dep: Deployment<InProc>,
    pub rows: Vec<Row>,
}

pub fn deploy(params: SchemeParams, rows: Vec<Row>, seed: u64) -> Fixture {
    let mut r = rng(seed);
    let keys = SecretKeys::generate(&mut r, &params);
    let admin = Admin::new(keys.clone(), params.clone()).unwrap();
    let out = admin.setup(&to_db(&rows, &params), None, &mut r).unwrap();
    let link = InProc::with_rng_seed(&params, keys.s2(), out.stores, seed ^ 0x5555);
    let dep = Deployment::new(admin.client().clone(), UserId(1), link).with_rng_seed(seed ^ 0xaaaa);
    Fixture {
        params,
        keys,
        admin,
        dep,
        rows,
    }
}

/// Every distinct (field, value) of the table.
pub fn universe(rows: &[Row]) -> Vec<(usize, String)> {
    let set: BTreeSet<(usize, String)> = rows
        .iter()
        .flat_map(|r| r.iter().cloned().enumerate())
        .collect();
    set.into_iter().collect()
}

pub fn shadow_select(rows: &[Row], field: usize, value: &str) -> BTreeMap<Row, usize> {
    multiset(rows.iter().filter(|r| r[field] == value).cloned())
}
