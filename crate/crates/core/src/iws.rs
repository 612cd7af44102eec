//! Index and witness service. Owns the group directory and the nonce
//! directory; never sees encrypted records or blinded query elements.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{self, NonceGenerator, SchemeParams};
use crate::error::{Error, ErrorCode, Result};
use crate::model::{
    closest_group, GroupDirectory, GroupEntry, GroupId, GroupKey, Nonce, NonceEntry, Party, RecordId, UserId,
    Witness,
};

fn err(code: ErrorCode, detail: impl Into<String>) -> Error {
    Error::protocol(Party::Iws, code, detail)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindOutput {
    pub key: GroupKey,
    pub il: Vec<RecordId>,
    pub en: Vec<Witness>,
}

/// What the shuffle service needs from the index service: the permuted
/// positions and one re-blinding mask per destination position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShufflePlan {
    pub il: Vec<RecordId>,
    pub il_prime: Vec<RecordId>,
    pub nn: Vec<(RecordId, Vec<u8>)>,
}

/// One inserted row as seen by the index service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub nonce: NonceEntry,
    pub groups: Vec<GroupId>,
}

pub struct Iws {
    params: SchemeParams,
    gdb: GroupDirectory,
    ndb: Vec<NonceEntry>,
    s2: Vec<u8>,
    prg: NonceGenerator,
    revoked: BTreeSet<UserId>,
    rng: ChaCha20Rng,
}

impl Iws {
    pub fn new(params: SchemeParams, s2: &[u8], gdb: GroupDirectory, ndb: Vec<NonceEntry>) -> Self {
        let mut iws = Iws {
            prg: NonceGenerator::new(s2, &params),
            s2: s2.to_vec(),
            params,
            gdb,
            ndb,
            revoked: BTreeSet::new(),
            rng: ChaCha20Rng::from_entropy(),
        };
        for entry in iws.gdb.values_mut() {
            entry.il.sort_unstable();
        }
        iws
    }

    pub fn with_rng_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        self
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn gdb(&self) -> &GroupDirectory {
        &self.gdb
    }

    pub fn ndb(&self) -> &[NonceEntry] {
        &self.ndb
    }

    pub fn s2(&self) -> &[u8] {
        &self.s2
    }

    pub fn revoke(&mut self, user: UserId) {
        self.revoked.insert(user);
    }

    pub fn revoked(&self) -> &BTreeSet<UserId> {
        &self.revoked
    }

    pub fn check_user(&self, user: UserId) -> Result<()> {
        if self.revoked.contains(&user) {
            return Err(err(ErrorCode::Revoked, format!("{user} is revoked")));
        }
        Ok(())
    }

    fn resolve(&self, field: usize, g: GroupId) -> Result<GroupKey> {
        if field >= self.params.field_count {
            return Err(err(ErrorCode::Malformed, format!("field {field} out of range")));
        }
        closest_group(&self.gdb, field, g)
            .ok_or_else(|| err(ErrorCode::EmptyDirectory, format!("no groups for field {field}")))
    }

    pub fn resolve_il(&self, key: &GroupKey) -> Option<&[RecordId]> {
        self.gdb.get(key).map(|e| e.il.as_slice())
    }

    fn nonce(&self, id: RecordId) -> Result<&NonceEntry> {
        self.ndb
            .get(id as usize)
            .ok_or_else(|| err(ErrorCode::UnknownId, format!("no nonce for record {id}")))
    }

    /// Witness set for a query on `(field, g)`: per id of the resolved group,
    /// `w = H'(n_field ⊕ η)` and `t = η ⊕ seed`.
    pub fn nonce_blind(&self, user: UserId, field: usize, eta: &[u8], g: GroupId) -> Result<BlindOutput> {
        self.check_user(user)?;
        let p = &self.params;
        if eta.len() != p.elem_len {
            return Err(err(ErrorCode::Malformed, "eta has wrong length"));
        }
        let key = self.resolve(field, g)?;
        let il = self.gdb[&key].il.clone();
        let mut en = Vec::with_capacity(il.len());
        let mut buf = vec![0u8; p.elem_len];
        for id in &il {
            let entry = self.nonce(*id)?;
            buf.copy_from_slice(entry.nonce.segment(field, p));
            crypto::xor_into(&mut buf, eta);
            en.push(Witness {
                w: crypto::public_hash(&buf, p),
                t: crypto::xor(eta, &entry.seed),
            });
        }
        Ok(BlindOutput { key, il, en })
    }

    pub fn fetch_group_meta(&self, user: UserId, field: usize, g: GroupId) -> Result<(GroupKey, Vec<u8>)> {
        self.check_user(user)?;
        let key = self.resolve(field, g)?;
        Ok((key, self.gdb[&key].meta_ct.clone()))
    }

    /// The group whose id list is exactly `il` as a set, if any.
    pub fn group_with_ids(&self, il: &[RecordId]) -> Option<GroupKey> {
        let mut sorted = il.to_vec();
        sorted.sort_unstable();
        self.gdb
            .iter()
            .find(|(_, e)| e.il.len() == sorted.len() && e.il == sorted)
            .map(|(k, _)| *k)
    }

    /// Permutes the positions of `il`, refreshes every touched nonce, and
    /// remaps the id lists of all groups. Lists are kept sorted so that their
    /// order reveals nothing about the permutation.
    pub fn pre_shuffle(&mut self, il: &[RecordId]) -> Result<ShufflePlan> {
        if il.is_empty() {
            return Ok(ShufflePlan::default());
        }
        for id in il {
            self.nonce(*id)?;
        }
        let il_prime = crypto::prp_shuffle_with(&mut self.rng, il)
            .map_err(|e| err(ErrorCode::Malformed, e.to_string()))?;
        let sigma: HashMap<RecordId, RecordId> = il.iter().copied().zip(il_prime.iter().copied()).collect();

        let old: Vec<Nonce> = il.iter().map(|id| self.ndb[*id as usize].nonce.clone()).collect();
        let mut nn = Vec::with_capacity(il.len());
        for (src, old_n) in il.iter().zip(old) {
            let dst = sigma[src];
            let seed = crypto::random_bytes(&mut self.rng, self.params.seed_len);
            let nonce = self.prg.expand(&seed)?;
            nn.push((dst, crypto::xor(old_n.as_bytes(), nonce.as_bytes())));
            self.ndb[dst as usize] = NonceEntry { seed, nonce };
        }
        nn.sort_by_key(|(id, _)| *id);

        for entry in self.gdb.values_mut() {
            let mut touched = false;
            for id in entry.il.iter_mut() {
                if let Some(d) = sigma.get(id) {
                    *id = *d;
                    touched = true;
                }
            }
            if touched {
                entry.il.sort_unstable();
            }
        }
        Ok(ShufflePlan {
            il: il.to_vec(),
            il_prime,
            nn,
        })
    }

    /// Records the nonces and group memberships of freshly appended rows.
    pub fn register_insert(
        &mut self,
        user: UserId,
        entries: &[IndexEntry],
        ids: &[RecordId],
        metas: &[(GroupKey, Vec<u8>)],
    ) -> Result<Vec<GroupKey>> {
        self.check_user(user)?;
        let p = &self.params;
        if entries.len() != ids.len() {
            return Err(err(
                ErrorCode::SizeMismatch,
                format!("{} index entries for {} ids", entries.len(), ids.len()),
            ));
        }
        let base = self.ndb.len() as RecordId;
        if ids.iter().enumerate().any(|(i, id)| *id != base + i as RecordId) {
            return Err(err(
                ErrorCode::PositionCollision,
                format!("ids must continue the nonce directory at {base}"),
            ));
        }
        for e in entries {
            if e.groups.len() != p.field_count || e.nonce.seed.len() != p.seed_len {
                return Err(err(ErrorCode::Malformed, "index entry does not fit the schema"));
            }
            if self.prg.expand(&e.nonce.seed)? != e.nonce.nonce {
                return Err(err(ErrorCode::Malformed, "nonce does not expand from its seed"));
            }
        }
        for (key, _) in metas {
            if key.field >= p.field_count {
                return Err(err(ErrorCode::Malformed, "metadata for unknown field"));
            }
        }

        let mut touched = BTreeSet::new();
        for (e, id) in entries.iter().zip(ids) {
            for (f, g) in e.groups.iter().enumerate() {
                let key = closest_group(&self.gdb, f, *g).unwrap_or(GroupKey::new(f, *g));
                let entry = self.gdb.entry(key).or_insert_with(|| GroupEntry {
                    il: Vec::new(),
                    meta_ct: Vec::new(),
                });
                entry.il.push(*id);
                touched.insert(key);
            }
            self.ndb.push(e.nonce.clone());
        }
        for (key, ct) in metas {
            self.gdb
                .entry(*key)
                .or_insert_with(|| GroupEntry {
                    il: Vec::new(),
                    meta_ct: Vec::new(),
                })
                .meta_ct = ct.clone();
        }
        Ok(touched.into_iter().collect())
    }

    pub fn replace_state(&mut self, gdb: GroupDirectory, ndb: Vec<NonceEntry>) {
        self.gdb = gdb;
        for entry in self.gdb.values_mut() {
            entry.il.sort_unstable();
        }
        self.ndb = ndb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admin::Admin;
    use crate::crypto::SecretKeys;
    use crate::fixtures;
    use crate::model::{Element, Record};

    fn staff() -> (Admin, Iws, ChaCha20Rng) {
        let p = fixtures::staff_params();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let keys = SecretKeys::generate(&mut rng, &p);
        let admin = Admin::new(keys.clone(), p.clone()).unwrap();
        let out = admin.setup(&fixtures::staff_db(&p), None, &mut rng).unwrap();
        let iws = Iws::new(p, keys.s2(), out.stores.gdb, out.stores.ndb).with_rng_seed(5);
        (admin, iws, rng)
    }

    fn el(s: &str) -> Element {
        Element::from_str(s, &fixtures::staff_params()).unwrap()
    }

    #[test]
    fn staff_blind_covers_the_group() {
        let (admin, iws, _) = staff();
        let g = admin.client().group_of(&el("Bob")).unwrap();
        let out = iws.nonce_blind(UserId(1), 0, &[3; 16], g).unwrap();
        assert_eq!(out.il.len(), 4);
        assert_eq!(out.en.len(), 4);
    }

    #[test]
    fn zero_eta_exposes_plain_seed_and_nonce_hash() {
        let (admin, iws, _) = staff();
        let g = admin.client().group_of(&el("Alice")).unwrap();
        let out = iws.nonce_blind(UserId(1), 1, &[0; 16], g).unwrap();
        let p = iws.params();
        for (id, wit) in out.il.iter().zip(&out.en) {
            let n = &iws.ndb()[*id as usize];
            assert_eq!(wit.t, n.seed);
            assert_eq!(wit.w, crypto::public_hash(n.nonce.segment(1, p), p));
        }
    }

    #[test]
    fn absent_group_uses_closest() {
        let (_, iws, _) = staff();
        // Groups 1 and 2 exist; 3 = 0b11 is at distance 1 from both, so 1 wins.
        assert_eq!(iws.nonce_blind(UserId(1), 0, &[0; 16], GroupId(3)).unwrap().key, GroupKey::new(0, GroupId(1)));
        assert_eq!(iws.nonce_blind(UserId(1), 0, &[0; 16], GroupId(6)).unwrap().key, GroupKey::new(0, GroupId(2)));
        let (key, ct) = iws.fetch_group_meta(UserId(1), 1, GroupId(0)).unwrap();
        assert_eq!(key, GroupKey::new(1, GroupId(1)));
        assert_eq!(ct, iws.gdb()[&key].meta_ct);
    }

    #[test]
    fn revoked_and_empty_directory() {
        let (_, mut iws, _) = staff();
        iws.revoke(UserId(9));
        assert!(iws.nonce_blind(UserId(9), 0, &[0; 16], GroupId(1)).unwrap_err().is_revoked());
        assert!(iws.fetch_group_meta(UserId(9), 0, GroupId(1)).unwrap_err().is_revoked());
        let empty = Iws::new(fixtures::staff_params(), &[1; 16], GroupDirectory::new(), vec![]);
        let e = empty.nonce_blind(UserId(1), 0, &[0; 16], GroupId(1)).unwrap_err();
        assert_eq!((e.role(), e.code()), (Some(Party::Iws), Some(ErrorCode::EmptyDirectory)));
    }

    #[test]
    fn pre_shuffle_keeps_directories_consistent() {
        let (admin, mut iws, _) = staff();
        let before: Vec<BTreeSet<RecordId>> = (0..2)
            .map(|f| iws.gdb().iter().filter(|(k, _)| k.field == f).flat_map(|(_, e)| e.il.clone()).collect())
            .collect();
        let key = GroupKey::new(0, admin.client().group_of(&el("Bob")).unwrap());
        let il = iws.gdb()[&key].il.clone();
        let old = iws.ndb().to_vec();
        let plan = iws.pre_shuffle(&il).unwrap();
        let mut a = plan.il_prime.clone();
        a.sort_unstable();
        assert_eq!(a, il);
        for (id, mask) in &plan.nn {
            let src = plan.il[plan.il_prime.iter().position(|x| x == id).unwrap()];
            let expect = crypto::xor(old[src as usize].nonce.as_bytes(), iws.ndb()[*id as usize].nonce.as_bytes());
            assert_eq!(mask, &expect);
        }
        for (f, ids) in before.iter().enumerate() {
            let mut seen = Vec::new();
            for (_, e) in iws.gdb().iter().filter(|(k, _)| k.field == f) {
                assert!(e.il.windows(2).all(|w| w[0] < w[1]));
                seen.extend(e.il.iter().copied());
            }
            seen.sort_unstable();
            assert_eq!(seen, ids.iter().copied().collect::<Vec<_>>());
        }
        for n in iws.ndb() {
            assert_eq!(iws.prg.expand(&n.seed).unwrap(), n.nonce);
        }
    }

    #[test]
    fn singleton_shuffle_still_refreshes() {
        let (_, mut iws, _) = staff();
        let old = iws.ndb()[0].nonce.clone();
        let plan = iws.pre_shuffle(&[0]).unwrap();
        assert_eq!(plan.il_prime, vec![0]);
        assert_ne!(plan.nn[0].1, vec![0u8; old.as_bytes().len()]);
        assert!(iws.pre_shuffle(&[]).unwrap().nn.is_empty());
        assert_eq!(iws.pre_shuffle(&[99]).unwrap_err().code(), Some(ErrorCode::UnknownId));
    }

    #[test]
    fn register_insert_checks_positions() {
        let (admin, mut iws, mut rng) = staff();
        let c = admin.client();
        let row = c.rcd_enc(&Record::from_strs(&["Bob", "27"], iws.params()).unwrap(), &mut rng).unwrap();
        let entry = IndexEntry {
            nonce: row.nonce.clone(),
            groups: row.groups.clone(),
        };
        let n = iws.ndb().len() as RecordId;
        let e = iws.register_insert(UserId(1), &[entry.clone()], &[n + 1], &[]).unwrap_err();
        assert_eq!(e.code(), Some(ErrorCode::PositionCollision));
        let e = iws.register_insert(UserId(1), &[entry.clone()], &[], &[]).unwrap_err();
        assert_eq!(e.code(), Some(ErrorCode::SizeMismatch));
        let mut bad = entry.clone();
        bad.nonce.seed[0] ^= 1;
        assert!(iws.register_insert(UserId(1), &[bad], &[n], &[]).is_err());

        let sizes: usize = iws.gdb().values().map(|e| e.il.len()).sum();
        let touched = iws.register_insert(UserId(1), &[entry], &[n], &[]).unwrap();
        assert_eq!(touched.len(), 2);
        assert_eq!(iws.ndb().len() as RecordId, n + 1);
        assert_eq!(iws.gdb().values().map(|e| e.il.len()).sum::<usize>(), sizes + 2);
        for key in touched {
            assert!(iws.gdb()[&key].il.contains(&n));
        }
    }
}
