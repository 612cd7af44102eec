//! Mechanical checks of what the servers can observe: result sizes, stale
//! query replay, post-delete results and shuffle refresh.
//!
//! Audits run against an in-process deployment and use the admin's keys as a
//! decryption oracle. Untraceability is reported as statistics, not judged.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use serde::Serialize;

use crate::admin::Admin;
use crate::error::{Error, Result};
use crate::model::{Element, GroupKey, Query, Record, RecordId, UserId};
use crate::transport::{Deployment, InProc};

#[derive(Debug, Clone, Serialize)]
pub struct GroupSizes {
    pub key: GroupKey,
    pub tau: u64,
    pub elements: usize,
    /// |SR| of each member query, in element order.
    pub sizes: Vec<usize>,
    pub uniform: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeReport {
    pub groups: Vec<GroupSizes>,
    pub uniform: bool,
    /// Distinct result sizes across groups. Differences here are expected:
    /// only queries inside one group are made indistinguishable by size.
    pub cross_group_sizes: BTreeSet<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardReport {
    pub group: GroupKey,
    /// Matches of the captured pair before any shuffle.
    pub control_matches: usize,
    /// Matches of the captured pair against the group after the shuffle.
    pub stale_matches: usize,
    pub inserted: bool,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BackwardReport {
    pub deleted: usize,
    pub checks: usize,
    /// Queries whose decrypted rows differed from the shadow table.
    pub mismatches: usize,
    /// Deleted rows that reappeared in a result.
    pub resurrected: usize,
    pub padding_ok: bool,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct UntraceReport {
    pub trials: usize,
    pub group_size: usize,
    /// Position refreshes observed and how many changed bytes.
    pub refreshes: usize,
    pub refreshed: usize,
    pub distinct_position_sets: usize,
    /// Distinct permutations recovered through the oracle (only when the
    /// group's plaintexts are pairwise distinct).
    pub permutations_seen: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PatternReport {
    pub size: Option<SizeReport>,
    pub forward: Vec<ForwardReport>,
    pub backward: Option<BackwardReport>,
    pub untraceability: Option<UntraceReport>,
}

impl PatternReport {
    pub fn ok(&self) -> bool {
        self.size.as_ref().is_none_or(|s| s.uniform)
            && self.forward.iter().all(|f| f.ok)
            && self.backward.as_ref().is_none_or(|b| b.ok)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(r) = &self.size {
            let _ = writeln!(s, "size pattern: {}", verdict(r.uniform));
            for g in &r.groups {
                let _ = writeln!(
                    s,
                    "  group {}: tau {} over {} elements, sizes {:?} {}",
                    g.key,
                    g.tau,
                    g.elements,
                    g.sizes,
                    verdict(g.uniform)
                );
            }
            let _ = writeln!(
                s,
                "  result sizes across groups: {:?} (cross-group differences are expected)",
                r.cross_group_sizes
            );
        }
        if !self.forward.is_empty() {
            let f = &self.forward;
            let ok = f.iter().all(|r| r.ok);
            let _ = writeln!(
                s,
                "forward privacy: {} ({} trials, {} with an insert after capture, {} control matches, {} stale matches)",
                verdict(ok),
                f.len(),
                f.iter().filter(|r| r.inserted).count(),
                f.iter().map(|r| r.control_matches).sum::<usize>(),
                f.iter().map(|r| r.stale_matches).sum::<usize>()
            );
            for r in f.iter().filter(|r| !r.ok) {
                let _ = writeln!(s, "  group {}: {} stale matches", r.group, r.stale_matches);
            }
        }
        if let Some(r) = &self.backward {
            let _ = writeln!(
                s,
                "backward privacy: {} ({} rows deleted, {} checks, {} mismatches, {} resurrected, padding {})",
                verdict(r.ok),
                r.deleted,
                r.checks,
                r.mismatches,
                r.resurrected,
                verdict(r.padding_ok)
            );
        }
        if let Some(r) = &self.untraceability {
            let _ = writeln!(
                s,
                "untraceability: {} trials on a group of {}, {}/{} position refreshes changed bytes, {} distinct result position sets{}",
                r.trials,
                r.group_size,
                r.refreshed,
                r.refreshes,
                r.distinct_position_sets,
                r.permutations_seen
                    .map(|p| format!(", {p} distinct permutations"))
                    .unwrap_or_default()
            );
        }
        s
    }

    /// One JSON object per audit, one per line.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        let mut line = |kind: &str, v: serde_json::Value| {
            let mut obj = serde_json::Map::new();
            obj.insert("audit".into(), kind.into());
            obj.insert("result".into(), v);
            s.push_str(&serde_json::Value::Object(obj).to_string());
            s.push('\n');
        };
        let json = |v: serde_json::Result<serde_json::Value>| v.expect("report serializes");
        if let Some(r) = &self.size {
            line("size", json(serde_json::to_value(r)));
        }
        for r in &self.forward {
            line("forward", json(serde_json::to_value(r)));
        }
        if let Some(r) = &self.backward {
            line("backward", json(serde_json::to_value(r)));
        }
        if let Some(r) = &self.untraceability {
            line("untraceability", json(serde_json::to_value(r)));
        }
        s
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

type Dep = Deployment<InProc>;

/// Issues a select for every element of every group and compares |SR|
/// against the group's threshold.
pub fn audit_size_pattern(dep: &mut Dep, admin: &Admin) -> Result<SizeReport> {
    let metas = admin.open_metas(dep.endpoints().iws.iws().gdb())?;
    let mut groups = Vec::with_capacity(metas.len());
    let mut cross = BTreeSet::new();
    for (key, meta) in &metas {
        let mut sizes = Vec::with_capacity(meta.elements.len());
        for e in &meta.elements {
            let n = dep.select_traced(&Query::select(key.field, e.clone()))?.sr_len;
            sizes.push(n);
            cross.insert(n);
        }
        groups.push(GroupSizes {
            key: *key,
            tau: meta.tau,
            elements: meta.elements.len(),
            uniform: sizes.iter().all(|n| *n as u64 == meta.tau),
            sizes,
        });
    }
    Ok(SizeReport {
        uniform: groups.iter().all(|g| g.uniform),
        groups,
        cross_group_sizes: cross,
    })
}

/// Matches of the stale witnesses `ws` against every record of `il`.
fn stale_matches(dep: &Dep, eq: &crate::model::EncryptedQuery, il: &[RecordId], ws: &HashSet<Vec<u8>>) -> Result<usize> {
    let staged = dep.endpoints().sss.sss().precompute(eq, il)?;
    Ok(staged.digests().iter().filter(|d| ws.contains(*d)).count())
}

/// Captures the (EQ, EN) pair of a query on `element`, shuffles the group,
/// optionally inserts a matching record, then replays the stale pair against
/// every record of the group.
pub fn audit_forward<R: RngCore + CryptoRng>(
    dep: &mut Dep,
    field: usize,
    element: &Element,
    insert: Option<&Record>,
    rng: &mut R,
) -> Result<ForwardReport> {
    let qs = dep.client().query_enc(&Query::select(field, element.clone()), rng)?;
    let user = dep.user();
    let blind = dep.endpoints().iws.iws().nonce_blind(user, field, &qs.eta, qs.group)?;
    let control = dep.endpoints().sss.sss().search(&qs.eq, &blind.il, &blind.en)?;
    let ws: HashSet<Vec<u8>> = blind.en.iter().map(|w| w.w.clone()).collect();

    dep.shuffle_group(blind.key)?;
    if let Some(rcd) = insert {
        dep.insert(rcd)?;
    }
    let il = dep
        .endpoints()
        .iws
        .iws()
        .resolve_il(&blind.key)
        .ok_or_else(|| Error::param("group vanished during audit"))?
        .to_vec();
    let stale = stale_matches(dep, &qs.eq, &il, &ws)?;
    Ok(ForwardReport {
        group: blind.key,
        control_matches: control.result.len(),
        stale_matches: stale,
        inserted: insert.is_some(),
        ok: stale == 0,
    })
}

fn row_key(r: &Record) -> Vec<Vec<u8>> {
    r.elements.iter().map(|e| e.as_bytes().to_vec()).collect()
}

fn multiset<'a>(rows: impl Iterator<Item = &'a Record>) -> BTreeMap<Vec<Vec<u8>>, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(row_key(r)).or_default() += 1;
    }
    m
}

/// Deletes every row matching `target`, then runs `checks` selects (half on
/// the deleted key, the rest on random keys of `universe`) and compares each
/// result with a plaintext shadow of the table.
pub fn audit_backward<R: Rng>(
    dep: &mut Dep,
    admin: &Admin,
    shadow: &mut Vec<Record>,
    target: &Query,
    universe: &[(usize, Element)],
    checks: usize,
    rng: &mut R,
) -> Result<BackwardReport> {
    let (field, element) = (target.field, &target.element);
    let trace = dep.delete(&Query::delete(field, element.clone()))?;
    let removed: Vec<Record> = shadow.iter().filter(|r| &r.elements[field] == element).cloned().collect();
    shadow.retain(|r| &r.elements[field] != element);
    let removed_keys: HashSet<Vec<Vec<u8>>> = removed.iter().map(row_key).collect();

    let mut mismatches = 0;
    let mut resurrected = 0;
    for i in 0..checks {
        let (f, e) = if i % 2 == 0 || universe.is_empty() {
            (field, element.clone())
        } else {
            universe.choose(rng).cloned().expect("non-empty universe")
        };
        let rows = dep.select(&Query::select(f, e.clone()))?;
        let expect = multiset(shadow.iter().filter(|r| r.elements[f] == e));
        let got = multiset(rows.iter());
        if got != expect {
            mismatches += 1;
        }
        for (k, n) in &got {
            if removed_keys.contains(k) && expect.get(k).copied().unwrap_or(0) < *n {
                resurrected += 1;
            }
        }
    }
    let padding_ok = admin.padding_issues(&dep.endpoints().stores())?.is_empty();
    Ok(BackwardReport {
        deleted: trace.deleted,
        checks,
        mismatches,
        resurrected,
        padding_ok,
        ok: mismatches == 0 && resurrected == 0 && padding_ok && trace.deleted == removed.len(),
    })
}

/// Repeats one select `trials` times, checking that every position of the
/// searched group gets new bytes and recording where the results land.
pub fn audit_untraceability(dep: &mut Dep, admin: &Admin, field: usize, element: &Element, trials: usize) -> Result<UntraceReport> {
    let q = Query::select(field, element.clone());
    let mut refreshes = 0;
    let mut refreshed = 0;
    let mut position_sets: HashSet<Vec<RecordId>> = HashSet::new();
    let mut perms: HashSet<Vec<usize>> = HashSet::new();
    let mut distinct = true;
    let mut group_size = 0;
    for _ in 0..trials {
        let g = dep.client().group_of(element)?;
        let key = crate::model::closest_group(dep.endpoints().iws.iws().gdb(), field, g)
            .ok_or_else(|| Error::param("field has no groups"))?;
        let il = dep.endpoints().iws.iws().resolve_il(&key).unwrap_or(&[]).to_vec();
        group_size = il.len();
        let before = dep.endpoints().stores();
        let plain_before = oracle(admin, &before, &il)?;

        let trace = dep.select_traced(&q)?;
        let mut ids = trace.ids.clone();
        ids.sort_unstable();
        position_sets.insert(ids);

        let after = dep.endpoints().stores();
        for id in &il {
            refreshes += 1;
            if before.edb[*id as usize] != after.edb[*id as usize] {
                refreshed += 1;
            }
        }
        let plain_after = oracle(admin, &after, &il)?;
        let unique: HashSet<&Vec<Vec<u8>>> = plain_before.iter().collect();
        if unique.len() != il.len() {
            distinct = false;
            continue;
        }
        // perm[i] = index in il where the record at il[i] moved to.
        let perm: Option<Vec<usize>> = plain_before
            .iter()
            .map(|p| plain_after.iter().position(|q| q == p))
            .collect();
        if let Some(perm) = perm {
            perms.insert(perm);
        }
    }
    Ok(UntraceReport {
        trials,
        group_size,
        refreshes,
        refreshed,
        distinct_position_sets: position_sets.len(),
        permutations_seen: distinct.then_some(perms.len()),
    })
}

fn oracle(admin: &Admin, stores: &crate::admin::Stores, il: &[RecordId]) -> Result<Vec<Vec<Vec<u8>>>> {
    il.iter()
        .map(|id| {
            let i = *id as usize;
            let r = admin.client().decrypt_with_nonce(&stores.edb[i], &stores.ndb[i].nonce)?;
            let mut k = row_key(&r);
            k.push(vec![r.real as u8]);
            Ok(k)
        })
        .collect()
}

/// User id under which audit deployments run.
pub const AUDIT_USER: UserId = UserId(0);
