//! User-side cryptography: record and query encryption, result decryption,
//! insert bundles and delete-time tag rewriting.

use std::collections::{BTreeSet, HashMap};

use rand::{CryptoRng, RngCore};

use crate::crypto::{
    self, ElementCipher, GroupEncoder, KeyedHasher, MetaCipher, NonceGenerator, SchemeParams, SecretKeys,
};
use crate::error::{Error, ErrorCode, Result};
use crate::model::{
    tag_check, tag_make, Element, EncryptedQuery, EncryptedRecord, GroupId, GroupKey, GroupMeta, Nonce,
    NonceEntry, Party, Query, Record, RecordId, SearchResult,
};

/// Output of record encryption: the ciphertext, its nonce material, and the
/// group of each field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedRow {
    pub record: EncryptedRecord,
    pub nonce: NonceEntry,
    pub groups: Vec<GroupId>,
}

/// Per-query client state. `eta` never leaves the client except towards the
/// index service.
#[derive(Debug, Clone)]
pub struct QuerySession {
    pub eta: Vec<u8>,
    pub group: GroupId,
    pub eq: EncryptedQuery,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decrypted {
    pub rows: Vec<Record>,
    pub dummies: usize,
    pub dropped: usize,
}

/// Everything produced for one insert: the real row first, then `w` dummies.
#[derive(Debug, Clone)]
pub struct InsertBundle {
    pub rows: Vec<EncryptedRow>,
    pub updated_meta: Vec<(GroupKey, Vec<u8>)>,
    pub w: usize,
    pub gammas: Vec<usize>,
    pub dummies: Vec<Record>,
}

/// A searched record as seen by the user during a delete.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchedTag {
    pub id: RecordId,
    pub tag: Vec<u8>,
    pub t: Vec<u8>,
}

/// Key holder for the user side. The admin uses the same machinery.
#[derive(Clone)]
pub struct Client {
    params: SchemeParams,
    keys: SecretKeys,
    cipher: ElementCipher,
    hasher: KeyedHasher,
    encoder: GroupEncoder,
    prg: NonceGenerator,
    meta: MetaCipher,
}

impl Client {
    pub fn new(keys: SecretKeys, params: SchemeParams) -> Result<Self> {
        params.validate()?;
        if keys.s1().len() != params.key_len() {
            return Err(Error::param("key length does not match parameters"));
        }
        Ok(Client {
            cipher: ElementCipher::new(keys.s1(), &params)?,
            hasher: KeyedHasher::new(keys.s1(), params.hash_len),
            encoder: GroupEncoder::new(keys.s1(), &params),
            prg: NonceGenerator::new(keys.s2(), &params),
            meta: MetaCipher::new(keys.s1()),
            params,
            keys,
        })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn keys(&self) -> &SecretKeys {
        &self.keys
    }

    pub fn encoder(&self) -> &GroupEncoder {
        &self.encoder
    }

    pub fn meta_cipher(&self) -> &MetaCipher {
        &self.meta
    }

    pub fn group_of(&self, e: &Element) -> Result<GroupId> {
        self.encoder.encode(e.as_bytes())
    }

    pub fn expand(&self, seed: &[u8]) -> Result<Nonce> {
        self.prg.expand(seed)
    }

    pub fn fresh_nonce<R: RngCore + ?Sized>(&self, rng: &mut R) -> NonceEntry {
        let seed = crypto::random_bytes(rng, self.params.seed_len);
        let nonce = self.prg.expand(&seed).expect("seed has configured length");
        NonceEntry { seed, nonce }
    }

    /// Encrypts one row under a fresh seed. The row's `real` flag selects the
    /// tag construction.
    pub fn rcd_enc<R: RngCore + ?Sized>(&self, rcd: &Record, rng: &mut R) -> Result<EncryptedRow> {
        rcd.validate(&self.params)?;
        let nonce = self.fresh_nonce(rng);
        let p = &self.params;
        let mut bytes = Vec::with_capacity(p.record_len());
        let mut groups = Vec::with_capacity(p.field_count);
        for (f, e) in rcd.elements.iter().enumerate() {
            groups.push(self.encoder.encode(e.as_bytes())?);
            let mut ct = self.cipher.encrypt(e.as_bytes())?;
            crypto::xor_into(&mut ct, nonce.nonce.segment(f, p));
            bytes.extend_from_slice(&ct);
        }
        bytes.extend(tag_make(rcd.real, nonce.nonce.tag_part(p), &self.hasher, p, rng)?);
        Ok(EncryptedRow {
            record: EncryptedRecord::from_bytes(bytes),
            nonce,
            groups,
        })
    }

    /// Unblinds and decrypts a record with its current nonce. The returned
    /// flag is the tag check result.
    pub fn decrypt_with_nonce(&self, ercd: &EncryptedRecord, nonce: &Nonce) -> Result<Record> {
        let p = &self.params;
        if ercd.as_bytes().len() != p.record_len() || nonce.as_bytes().len() != p.nonce_len() {
            return Err(Error::param("record or nonce has wrong length"));
        }
        let elements = (0..p.field_count)
            .map(|f| {
                let blinded = crypto::xor(ercd.segment(f, p), nonce.segment(f, p));
                Element::from_exact(self.cipher.decrypt(&blinded)?, p)
            })
            .collect::<Result<Vec<_>>>()?;
        let real = tag_check(ercd.tag_part(p), nonce.tag_part(p), &self.hasher, p)?;
        Ok(Record { elements, real })
    }

    pub fn query_enc<R: RngCore + ?Sized>(&self, q: &Query, rng: &mut R) -> Result<QuerySession> {
        q.validate(&self.params)?;
        let group = self.encoder.encode(q.element.as_bytes())?;
        let eta = crypto::random_bytes(rng, self.params.elem_len);
        let mut e_star = self.cipher.encrypt(q.element.as_bytes())?;
        crypto::xor_into(&mut e_star, &eta);
        Ok(QuerySession {
            eta,
            group,
            eq: EncryptedQuery {
                qtype: q.qtype,
                field: q.field,
                e_star,
            },
        })
    }

    /// Recovers each hit's nonce from `t ⊕ η`, filters dummies by tag, and
    /// decrypts the real rows. Malformed entries are dropped and counted.
    pub fn rcd_dec(&self, sr: &SearchResult, eta: &[u8]) -> Result<Decrypted> {
        if eta.len() != self.params.seed_len {
            return Err(Error::param("eta has wrong length"));
        }
        let mut out = Decrypted::default();
        for hit in &sr.entries {
            if hit.t.len() != eta.len() {
                out.dropped += 1;
                continue;
            }
            let nonce = self.prg.expand(&crypto::xor(&hit.t, eta))?;
            match self.decrypt_with_nonce(&hit.record, &nonce) {
                Ok(rec) if rec.real => out.rows.push(rec),
                Ok(_) => out.dummies += 1,
                Err(_) => out.dropped += 1,
            }
        }
        Ok(out)
    }

    /// Builds the real record plus the dummies that keep every touched group
    /// uniformly padded. `metas[f]` is the (possibly substituted) group of
    /// field `f` and its sealed metadata.
    pub fn build_insert<R: RngCore + CryptoRng>(
        &self,
        rcd: &Record,
        metas: &[(GroupKey, Vec<u8>)],
        rng: &mut R,
    ) -> Result<InsertBundle> {
        let p = &self.params;
        let rcd = Record::real(rcd.elements.clone());
        rcd.validate(p)?;
        if rcd.elements.iter().any(Element::is_null) {
            return Err(Error::param("the NULL sentinel cannot be inserted as data"));
        }
        if metas.len() != p.field_count {
            return Err(Error::param("one group metadata entry per field is required"));
        }

        let mut opened = Vec::with_capacity(p.field_count);
        for (key, ct) in metas {
            opened.push((*key, GroupMeta::open(ct, &self.meta, p)?));
        }

        // Per field: the elements destined for dummy slots.
        let mut fills: Vec<Vec<Element>> = Vec::with_capacity(p.field_count);
        for (f, (_, meta)) in opened.iter_mut().enumerate() {
            let e = &rcd.elements[f];
            if !meta.elements.contains(e) && meta.tau == 0 {
                // An empty group behaves as if e were already a member.
                meta.elements.insert(e.clone());
            }
            if meta.elements.contains(e) {
                fills.push(meta.elements.iter().filter(|x| *x != e).cloned().collect());
                meta.tau += 1;
            } else {
                fills.push(vec![e.clone(); meta.tau as usize - 1]);
                meta.elements.insert(e.clone());
            }
        }
        let gammas: Vec<usize> = fills.iter().map(Vec::len).collect();
        let w = gammas.iter().copied().max().unwrap_or(0);

        let null = Element::null(p);
        let dummies: Vec<Record> = (0..w)
            .map(|i| Record::dummy(fills.iter().map(|fill| fill.get(i).unwrap_or(&null).clone()).collect()))
            .collect();

        let mut rows = Vec::with_capacity(w + 1);
        rows.push(self.rcd_enc(&rcd, rng)?);
        for d in &dummies {
            rows.push(self.rcd_enc(d, rng)?);
        }
        let updated_meta = opened
            .iter()
            .map(|(key, meta)| (*key, meta.seal(&self.meta, rng)))
            .collect();
        Ok(InsertBundle {
            rows,
            updated_meta,
            w,
            gammas,
            dummies,
        })
    }

    /// New tags for every searched record of a delete: matched records get
    /// uniform bytes (turning them into dummies), the rest keep their class
    /// under a freshly drawn tag.
    pub fn rebuild_delete_tags<R: RngCore + ?Sized>(
        &self,
        matched: &[RecordId],
        searched: &[SearchedTag],
        eta: &[u8],
        rng: &mut R,
    ) -> Result<Vec<(RecordId, Vec<u8>)>> {
        let p = &self.params;
        let by_id: HashMap<RecordId, &SearchedTag> = searched.iter().map(|s| (s.id, s)).collect();
        if let Some(id) = matched.iter().find(|id| !by_id.contains_key(id)) {
            return Err(Error::protocol(
                Party::User,
                ErrorCode::UnknownId,
                format!("matched id {id} was not among the searched records"),
            ));
        }
        let matched: BTreeSet<RecordId> = matched.iter().copied().collect();
        let mut out = Vec::with_capacity(searched.len());
        for s in searched {
            if matched.contains(&s.id) {
                out.push((s.id, crypto::random_bytes(rng, p.tag_len())));
                continue;
            }
            if s.t.len() != p.seed_len {
                return Err(Error::protocol(
                    Party::User,
                    ErrorCode::MissingWitness,
                    format!("no usable witness for record {}", s.id),
                ));
            }
            let nonce = self.prg.expand(&crypto::xor(&s.t, eta))?;
            let real = tag_check(&s.tag, nonce.tag_part(p), &self.hasher, p)?;
            out.push((s.id, tag_make(real, nonce.tag_part(p), &self.hasher, p, rng)?));
        }
        Ok(out)
    }

    /// Real/dummy classification of a blinded tag under a known nonce.
    pub fn is_real_tag(&self, tag: &[u8], nonce: &Nonce) -> Result<bool> {
        tag_check(tag, nonce.tag_part(&self.params), &self.hasher, &self.params)
    }
}
