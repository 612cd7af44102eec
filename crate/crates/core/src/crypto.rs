//! Stateless primitives shared by every role.
//!
//! | primitive        | construction                                      |
//! |------------------|---------------------------------------------------|
//! | group encoder    | low `b` bits of HMAC-SHA256(s1, e), or `e mod m`  |
//! | nonce generator  | HMAC-SHA256(s2, seed ‖ ctr) in counter mode       |
//! | element cipher   | AES in ECB mode over `elem_len / 16` blocks       |
//! | keyed hash       | HMAC-SHA256(s1, ·), truncated to `hash_len`       |
//! | public hash      | SHA-256, truncated to `witness_len`               |
//! | permutation      | Fisher-Yates driven by a seeded ChaCha generator  |
//! | metadata cipher  | AES-256-GCM under a key derived from s1           |

use std::collections::{BTreeMap, HashSet};

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};
use aes_gcm::aead::Aead;
use aes_gcm::Aes256Gcm;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GroupId, RecordId};

type HmacSha256 = Hmac<Sha256>;

const AES_BLOCK: usize = 16;
const SHA256_LEN: usize = 32;
const GCM_NONCE_LEN: usize = 12;

/// The two scheme keys. `s1` stays with the admin and users; `s2` is also
/// shared with the index service so it can regenerate nonces.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKeys {
    s1: Vec<u8>,
    s2: Vec<u8>,
}

impl std::fmt::Debug for SecretKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecretKeys")
            .field("len", &self.s1.len())
            .finish_non_exhaustive()
    }
}

impl SecretKeys {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, params: &SchemeParams) -> Self {
        let len = params.key_len();
        loop {
            let mut s1 = vec![0u8; len];
            let mut s2 = vec![0u8; len];
            rng.fill_bytes(&mut s1);
            rng.fill_bytes(&mut s2);
            if s1 != s2 {
                return SecretKeys { s1, s2 };
            }
        }
    }

    pub fn from_parts(s1: Vec<u8>, s2: Vec<u8>, params: &SchemeParams) -> Result<Self> {
        let len = params.key_len();
        if s1.len() != len || s2.len() != len {
            return Err(Error::param(format!(
                "keys must be {len} bytes, got {} and {}",
                s1.len(),
                s2.len()
            )));
        }
        if s1 == s2 {
            return Err(Error::param("s1 and s2 must differ"));
        }
        Ok(SecretKeys { s1, s2 })
    }

    pub fn from_hex(s1: &str, s2: &str, params: &SchemeParams) -> Result<Self> {
        let dec = |s: &str| hex::decode(s.trim()).map_err(|e| Error::param(format!("bad key hex: {e}")));
        Self::from_parts(dec(s1)?, dec(s2)?, params)
    }

    pub fn s1(&self) -> &[u8] {
        &self.s1
    }

    pub fn s2(&self) -> &[u8] {
        &self.s2
    }

    pub fn s1_hex(&self) -> String {
        hex::encode(&self.s1)
    }

    pub fn s2_hex(&self) -> String {
        hex::encode(&self.s2)
    }
}

/// How elements are mapped to group identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grouping {
    /// Low `group_bits` bits of the keyed hash.
    KeyedHash,
    /// Decimal integer elements grouped by `value mod modulus`; anything that
    /// does not parse falls back to the keyed hash reduced mod `modulus`.
    Modulo { modulus: u64 },
    /// Explicit element → group table. Unlisted elements use the keyed hash.
    Table { table: BTreeMap<String, u64> },
}

/// Global length and security parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub key_bits: usize,
    pub elem_len: usize,
    pub seed_len: usize,
    pub hash_len: usize,
    pub witness_len: usize,
    pub field_count: usize,
    pub group_bits: u32,
    pub lambda: usize,
    pub grouping: Grouping,
}

impl SchemeParams {
    /// Defaults: 16-byte elements, 32-byte hashes, 128-bit keys, one group.
    pub fn new(field_count: usize) -> Self {
        SchemeParams {
            key_bits: 128,
            elem_len: 16,
            seed_len: 16,
            hash_len: 32,
            witness_len: 32,
            field_count,
            group_bits: 0,
            lambda: 1,
            grouping: Grouping::KeyedHash,
        }
    }

    pub fn with_group_bits(mut self, bits: u32) -> Self {
        self.group_bits = bits;
        self
    }

    pub fn with_grouping(mut self, grouping: Grouping) -> Self {
        self.grouping = grouping;
        self
    }

    pub fn with_lambda(mut self, lambda: usize) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_elem_len(mut self, elem_len: usize) -> Self {
        self.elem_len = elem_len;
        self.seed_len = elem_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_count == 0 {
            return Err(Error::param("field count must be at least 1"));
        }
        if self.field_count > u16::MAX as usize {
            return Err(Error::param("too many fields"));
        }
        if self.lambda == 0 {
            return Err(Error::param("lambda must be at least 1"));
        }
        if self.elem_len == 0 || self.elem_len % AES_BLOCK != 0 {
            return Err(Error::param(format!(
                "element length must be a positive multiple of {AES_BLOCK}, got {}",
                self.elem_len
            )));
        }
        if self.seed_len != self.elem_len {
            return Err(Error::param("seed length must equal element length"));
        }
        if !(1..=SHA256_LEN).contains(&self.hash_len) || !(1..=SHA256_LEN).contains(&self.witness_len) {
            return Err(Error::param("hash and witness lengths must be in 1..=32"));
        }
        if self.key_bits != 128 && self.key_bits != 256 {
            return Err(Error::param("key size must be 128 or 256 bits"));
        }
        if self.group_bits > self.max_group_bits() {
            return Err(Error::param(format!(
                "group bits {} exceed maximum {}",
                self.group_bits,
                self.max_group_bits()
            )));
        }
        if let Grouping::Modulo { modulus: 0 } = self.grouping {
            return Err(Error::param("modulus must be positive"));
        }
        Ok(())
    }

    pub fn key_len(&self) -> usize {
        self.key_bits / 8
    }

    pub fn tag_len(&self) -> usize {
        self.hash_len + self.elem_len
    }

    pub fn nonce_len(&self) -> usize {
        self.field_count * self.elem_len + self.tag_len()
    }

    /// Bytes of one encrypted record; equal to the nonce length.
    pub fn record_len(&self) -> usize {
        self.nonce_len()
    }

    pub fn max_group_bits(&self) -> u32 {
        (8 * self.hash_len).min(64) as u32
    }
}

fn hmac_for(key: &[u8]) -> HmacSha256 {
    // HMAC accepts keys of any length.
    <HmacSha256 as Mac>::new_from_slice(key).expect("hmac key")
}

/// HMAC-SHA256 with a pre-expanded key schedule.
#[derive(Clone)]
pub struct KeyedHasher {
    mac: HmacSha256,
    len: usize,
}

impl KeyedHasher {
    pub fn new(key: &[u8], len: usize) -> Self {
        KeyedHasher {
            mac: hmac_for(key),
            len: len.min(SHA256_LEN),
        }
    }

    pub fn hash(&self, parts: &[&[u8]]) -> Vec<u8> {
        let mut mac = self.mac.clone();
        for p in parts {
            mac.update(p);
        }
        let out = mac.finalize().into_bytes();
        out[..self.len].to_vec()
    }
}

pub fn keyed_hash(s1: &[u8], m: &[u8], params: &SchemeParams) -> Vec<u8> {
    KeyedHasher::new(s1, params.hash_len).hash(&[m])
}

pub fn public_hash(m: &[u8], params: &SchemeParams) -> Vec<u8> {
    let out = Sha256::digest(m);
    out[..params.witness_len.min(SHA256_LEN)].to_vec()
}

fn low_bits(digest: &[u8], bits: u32) -> u64 {
    if bits == 0 {
        return 0;
    }
    // The digest is read as a big-endian integer; its low bits sit at the end.
    let tail = &digest[digest.len().saturating_sub(8)..];
    let mut v = 0u64;
    for b in tail {
        v = (v << 8) | u64::from(*b);
    }
    if bits >= 64 {
        v
    } else {
        v & ((1u64 << bits) - 1)
    }
}

/// `LSB_b(H_{s1}(e))`.
pub fn group_encode(s1: &[u8], e: &[u8], bits: u32, params: &SchemeParams) -> Result<GroupId> {
    if bits > params.max_group_bits() {
        return Err(Error::param(format!("group bits {bits} out of range")));
    }
    if e.len() != params.elem_len {
        return Err(Error::param("element has wrong length"));
    }
    Ok(GroupId(low_bits(&keyed_hash(s1, e, params), bits)))
}

/// Group encoder bound to a key and the configured grouping.
#[derive(Clone)]
pub struct GroupEncoder {
    hasher: KeyedHasher,
    bits: u32,
    grouping: Grouping,
    elem_len: usize,
}

impl GroupEncoder {
    pub fn new(s1: &[u8], params: &SchemeParams) -> Self {
        GroupEncoder {
            hasher: KeyedHasher::new(s1, params.hash_len),
            bits: params.group_bits,
            grouping: params.grouping.clone(),
            elem_len: params.elem_len,
        }
    }

    pub fn encode(&self, e: &[u8]) -> Result<GroupId> {
        if e.len() != self.elem_len {
            return Err(Error::param("element has wrong length"));
        }
        let keyed = || low_bits(&self.hasher.hash(&[e]), self.bits);
        Ok(GroupId(match &self.grouping {
            Grouping::KeyedHash => keyed(),
            Grouping::Modulo { modulus } => match parse_decimal(e) {
                Some(v) => v % modulus,
                None => low_bits(&self.hasher.hash(&[e]), 64) % modulus,
            },
            Grouping::Table { table } => {
                let text = std::str::from_utf8(trim_padding(e)).ok();
                match text.and_then(|t| table.get(t)) {
                    Some(g) => *g,
                    None => keyed(),
                }
            }
        }))
    }
}

fn trim_padding(e: &[u8]) -> &[u8] {
    let end = e.iter().rposition(|b| *b != 0).map_or(0, |i| i + 1);
    &e[..end]
}

fn parse_decimal(e: &[u8]) -> Option<u64> {
    let digits = trim_padding(e);
    if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
        return None;
    }
    std::str::from_utf8(digits).ok()?.parse().ok()
}

/// Expand `seed` under `s2` into a full record nonce.
pub fn prg_expand(s2: &[u8], seed: &[u8], params: &SchemeParams) -> Result<crate::model::Nonce> {
    NonceGenerator::new(s2, params).expand(seed)
}

#[derive(Clone)]
pub struct NonceGenerator {
    mac: HmacSha256,
    seed_len: usize,
    out_len: usize,
}

impl NonceGenerator {
    pub fn new(s2: &[u8], params: &SchemeParams) -> Self {
        NonceGenerator {
            mac: hmac_for(s2),
            seed_len: params.seed_len,
            out_len: params.nonce_len(),
        }
    }

    pub fn expand(&self, seed: &[u8]) -> Result<crate::model::Nonce> {
        if seed.len() != self.seed_len {
            return Err(Error::param(format!(
                "seed must be {} bytes, got {}",
                self.seed_len,
                seed.len()
            )));
        }
        let mut out = Vec::with_capacity(self.out_len + SHA256_LEN);
        let mut counter = 0u32;
        while out.len() < self.out_len {
            let mut mac = self.mac.clone();
            mac.update(seed);
            mac.update(&counter.to_be_bytes());
            out.extend_from_slice(&mac.finalize().into_bytes());
            counter += 1;
        }
        out.truncate(self.out_len);
        Ok(crate::model::Nonce::from_bytes(out))
    }
}

#[derive(Clone)]
enum BlockCipher {
    Aes128(Box<Aes128>),
    Aes256(Box<Aes256>),
}

/// Deterministic, length-preserving element cipher (AES-ECB).
#[derive(Clone)]
pub struct ElementCipher {
    cipher: BlockCipher,
    elem_len: usize,
}

impl ElementCipher {
    pub fn new(s1: &[u8], params: &SchemeParams) -> Result<Self> {
        let cipher = match s1.len() {
            16 => BlockCipher::Aes128(Box::new(Aes128::new(GenericArray::from_slice(s1)))),
            32 => BlockCipher::Aes256(Box::new(Aes256::new(GenericArray::from_slice(s1)))),
            n => return Err(Error::param(format!("unsupported key length {n}"))),
        };
        Ok(ElementCipher {
            cipher,
            elem_len: params.elem_len,
        })
    }

    fn check(&self, e: &[u8]) -> Result<()> {
        if e.len() != self.elem_len {
            return Err(Error::param(format!(
                "element must be {} bytes, got {}",
                self.elem_len,
                e.len()
            )));
        }
        Ok(())
    }

    pub fn encrypt(&self, e: &[u8]) -> Result<Vec<u8>> {
        self.check(e)?;
        let mut out = e.to_vec();
        for block in out.chunks_exact_mut(AES_BLOCK) {
            let block = GenericArray::from_mut_slice(block);
            match &self.cipher {
                BlockCipher::Aes128(c) => c.encrypt_block(block),
                BlockCipher::Aes256(c) => c.encrypt_block(block),
            }
        }
        Ok(out)
    }

    pub fn decrypt(&self, e: &[u8]) -> Result<Vec<u8>> {
        self.check(e)?;
        let mut out = e.to_vec();
        for block in out.chunks_exact_mut(AES_BLOCK) {
            let block = GenericArray::from_mut_slice(block);
            match &self.cipher {
                BlockCipher::Aes128(c) => c.decrypt_block(block),
                BlockCipher::Aes256(c) => c.decrypt_block(block),
            }
        }
        Ok(out)
    }
}

pub fn det_encrypt(s1: &[u8], e: &[u8], params: &SchemeParams) -> Result<Vec<u8>> {
    ElementCipher::new(s1, params)?.encrypt(e)
}

pub fn det_decrypt(s1: &[u8], e: &[u8], params: &SchemeParams) -> Result<Vec<u8>> {
    ElementCipher::new(s1, params)?.decrypt(e)
}

/// Modern Fisher-Yates: position `i` is swapped with a uniformly chosen
/// position in `i..n`.
pub fn prp_shuffle_with<R: Rng + ?Sized>(rng: &mut R, ids: &[RecordId]) -> Result<Vec<RecordId>> {
    if ids.is_empty() {
        return Err(Error::param("cannot permute an empty id list"));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if !ids.iter().all(|id| seen.insert(*id)) {
        return Err(Error::param("id list contains duplicates"));
    }
    let mut out = ids.to_vec();
    let n = out.len();
    for i in 0..n.saturating_sub(1) {
        let j = rng.gen_range(i..n);
        out.swap(i, j);
    }
    Ok(out)
}

/// Replayable permutation of `ids` derived from `seed`.
pub fn prp_shuffle(seed: u64, ids: &[RecordId]) -> Result<Vec<RecordId>> {
    prp_shuffle_with(&mut ChaCha20Rng::seed_from_u64(seed), ids)
}

/// Authenticated cipher protecting group metadata at rest on the index
/// service. Keyed by a subkey of s1 so the index service cannot open it.
#[derive(Clone)]
pub struct MetaCipher {
    aead: Aes256Gcm,
}

impl MetaCipher {
    pub fn new(s1: &[u8]) -> Self {
        let key = hmac_for(s1).chain_update(b"pmcdb group metadata").finalize().into_bytes();
        MetaCipher {
            aead: Aes256Gcm::new(&key),
        }
    }

    pub fn seal<R: RngCore + CryptoRng>(&self, rng: &mut R, plaintext: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; GCM_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ct = self
            .aead
            .encrypt(GenericArray::from_slice(&nonce), plaintext)
            .expect("aes-gcm encryption");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&ct);
        out
    }

    pub fn open(&self, ct: &[u8]) -> Result<Vec<u8>> {
        if ct.len() < GCM_NONCE_LEN {
            return Err(Error::Auth("metadata ciphertext too short".into()));
        }
        let (nonce, body) = ct.split_at(GCM_NONCE_LEN);
        self.aead
            .decrypt(GenericArray::from_slice(nonce), body)
            .map_err(|_| Error::Auth("group metadata failed to authenticate".into()))
    }
}

pub fn xor_into(dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

pub fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = a.to_vec();
    xor_into(&mut out, b);
    out
}

pub fn random_bytes<R: RngCore + ?Sized>(rng: &mut R, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}
