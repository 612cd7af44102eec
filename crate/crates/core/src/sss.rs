//! Storage and search service. Holds only encrypted records; it has no
//! access to nonces, group metadata, keys or query blinding factors.

use std::collections::BTreeSet;

use crate::crypto::{self, SchemeParams};
use crate::error::{Error, ErrorCode, Result};
use crate::model::{EncryptedQuery, EncryptedRecord, Party, RecordId, SearchHit, SearchResult, UserId, Witness};

fn err(code: ErrorCode, detail: impl Into<String>) -> Error {
    Error::protocol(Party::Sss, code, detail)
}

/// Digests computed before the witnesses arrive.
#[derive(Debug, Clone)]
pub struct StagedSearch {
    field: usize,
    il: Vec<RecordId>,
    digests: Vec<Vec<u8>>,
    pub hash_calls: usize,
}

impl StagedSearch {
    pub fn digests(&self) -> &[Vec<u8>] {
        &self.digests
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchOutcome {
    pub result: SearchResult,
    /// Aligned with the searched id list.
    pub matched: Vec<bool>,
    pub comparisons: usize,
}

impl SearchOutcome {
    pub fn matched_ids<'a>(&'a self, il: &'a [RecordId]) -> impl Iterator<Item = RecordId> + 'a {
        il.iter().zip(&self.matched).filter(|(_, m)| **m).map(|(id, _)| *id)
    }
}

#[derive(Debug, Clone)]
pub struct Sss {
    params: SchemeParams,
    edb: Vec<EncryptedRecord>,
    revoked: BTreeSet<UserId>,
}

impl Sss {
    pub fn new(params: SchemeParams, edb: Vec<EncryptedRecord>) -> Self {
        Sss {
            params,
            edb,
            revoked: BTreeSet::new(),
        }
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn edb(&self) -> &[EncryptedRecord] {
        &self.edb
    }

    pub fn len(&self) -> usize {
        self.edb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edb.is_empty()
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

    fn record(&self, id: RecordId) -> Result<&EncryptedRecord> {
        self.edb
            .get(id as usize)
            .ok_or_else(|| err(ErrorCode::UnknownId, format!("record {id} out of range")))
    }

    /// First half of a search: `H'(EDB(id, f) ⊕ e*)` for every id.
    pub fn precompute(&self, eq: &EncryptedQuery, il: &[RecordId]) -> Result<StagedSearch> {
        let p = &self.params;
        if eq.field >= p.field_count || eq.e_star.len() != p.elem_len {
            return Err(err(ErrorCode::Malformed, "encrypted query does not fit the schema"));
        }
        let mut digests = Vec::with_capacity(il.len());
        let mut buf = vec![0u8; p.elem_len];
        for id in il {
            buf.copy_from_slice(self.record(*id)?.segment(eq.field, p));
            crypto::xor_into(&mut buf, &eq.e_star);
            digests.push(crypto::public_hash(&buf, p));
        }
        Ok(StagedSearch {
            field: eq.field,
            hash_calls: digests.len(),
            il: il.to_vec(),
            digests,
        })
    }

    /// Second half: compare staged digests against the witnesses.
    pub fn finish(&self, staged: StagedSearch, en: &[Witness]) -> Result<SearchOutcome> {
        if en.len() != staged.il.len() {
            return Err(err(
                ErrorCode::SizeMismatch,
                format!("{} witnesses for {} ids", en.len(), staged.il.len()),
            ));
        }
        let _ = staged.field;
        let mut out = SearchOutcome {
            matched: Vec::with_capacity(en.len()),
            ..Default::default()
        };
        for ((id, digest), wit) in staged.il.iter().zip(&staged.digests).zip(en) {
            out.comparisons += 1;
            let hit = *digest == wit.w;
            out.matched.push(hit);
            if hit {
                out.result.entries.push(SearchHit {
                    id: *id,
                    record: self.record(*id)?.clone(),
                    t: wit.t.clone(),
                });
            }
        }
        Ok(out)
    }

    /// Returns every record of `il` whose blinded field matches `w`.
    pub fn search(&self, eq: &EncryptedQuery, il: &[RecordId], en: &[Witness]) -> Result<SearchOutcome> {
        if en.len() != il.len() {
            return Err(err(
                ErrorCode::SizeMismatch,
                format!("{} witnesses for {} ids", en.len(), il.len()),
            ));
        }
        let staged = self.precompute(eq, il)?;
        self.finish(staged, en)
    }

    pub fn records(&self, ids: &[RecordId]) -> Result<Vec<(RecordId, EncryptedRecord)>> {
        ids.iter().map(|id| Ok((*id, self.record(*id)?.clone()))).collect()
    }

    pub fn append(&mut self, records: Vec<EncryptedRecord>) -> Result<Vec<RecordId>> {
        let len = self.params.record_len();
        if records.iter().any(|r| r.as_bytes().len() != len) {
            return Err(err(ErrorCode::Malformed, "appended record has wrong length"));
        }
        let start = self.edb.len() as RecordId;
        let ids = (start..start + records.len() as RecordId).collect();
        self.edb.extend(records);
        Ok(ids)
    }

    /// Overwrites the listed positions with re-randomised records.
    pub fn apply_shuffle(&mut self, records: Vec<EncryptedRecord>, il_prime: &[RecordId]) -> Result<()> {
        if records.len() != il_prime.len() {
            return Err(err(
                ErrorCode::SizeMismatch,
                format!("{} records for {} positions", records.len(), il_prime.len()),
            ));
        }
        let len = self.params.record_len();
        for (id, r) in il_prime.iter().zip(&records) {
            self.record(*id)?;
            if r.as_bytes().len() != len {
                return Err(err(ErrorCode::Malformed, "shuffled record has wrong length"));
            }
        }
        for (id, r) in il_prime.iter().zip(records) {
            self.edb[*id as usize] = r;
        }
        Ok(())
    }

    /// Replaces only the tag bytes of the named records.
    pub fn apply_tags(&mut self, updates: &[(RecordId, Vec<u8>)]) -> Result<()> {
        let tag_len = self.params.tag_len();
        for (id, tag) in updates {
            self.record(*id)?;
            if tag.len() != tag_len {
                return Err(err(ErrorCode::Malformed, "tag has wrong length"));
            }
        }
        for (id, tag) in updates {
            self.edb[*id as usize].set_tag(tag, &self.params);
        }
        Ok(())
    }

    /// Tags of the listed records, used by deletes.
    pub fn tags(&self, ids: &[RecordId]) -> Result<Vec<Vec<u8>>> {
        ids.iter()
            .map(|id| Ok(self.record(*id)?.tag_part(&self.params).to_vec()))
            .collect()
    }

    pub fn replace_edb(&mut self, edb: Vec<EncryptedRecord>) {
        self.edb = edb;
    }
}
