//! Plain values passed between roles: records, queries, directory entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, KeyedHasher, MetaCipher, SchemeParams};
use crate::error::{Error, Result};

/// Storage position of a record in the encrypted database.
pub type RecordId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "user#{}", self.0)
    }
}

/// A participant in the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    User,
    Admin,
    Sss,
    Iws,
    Rss,
    Bus,
}

impl Party {
    pub fn code(self) -> u8 {
        match self {
            Party::User => 1,
            Party::Admin => 2,
            Party::Sss => 3,
            Party::Iws => 4,
            Party::Rss => 5,
            Party::Bus => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Party::User,
            2 => Party::Admin,
            3 => Party::Sss,
            4 => Party::Iws,
            5 => Party::Rss,
            6 => Party::Bus,
            _ => return None,
        })
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::User => "user",
            Party::Admin => "admin",
            Party::Sss => "sss",
            Party::Iws => "iws",
            Party::Rss => "rss",
            Party::Bus => "bus",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub u64);

impl GroupId {
    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }

    pub fn hamming(self, other: GroupId) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// `(f, g)`: a field index (0-based) and a group id within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub field: usize,
    pub group: GroupId,
}

impl GroupKey {
    pub fn new(field: usize, group: GroupId) -> Self {
        GroupKey { field, group }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.field, self.group)
    }
}

/// A fixed-width field value.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(Vec<u8>);

impl Element {
    pub const NULL_BYTE: u8 = 0xff;

    /// Right-pads `raw` with zero bytes up to the element width.
    pub fn pad(raw: &[u8], params: &SchemeParams) -> Result<Self> {
        if raw.len() > params.elem_len {
            return Err(Error::param(format!(
                "element of {} bytes exceeds width {}",
                raw.len(),
                params.elem_len
            )));
        }
        let mut v = raw.to_vec();
        v.resize(params.elem_len, 0);
        Ok(Element(v))
    }

    pub fn from_str(s: &str, params: &SchemeParams) -> Result<Self> {
        Self::pad(s.as_bytes(), params)
    }

    /// Reserved filler for unused dummy slots.
    pub fn null(params: &SchemeParams) -> Self {
        Element(vec![Self::NULL_BYTE; params.elem_len])
    }

    pub fn from_exact(bytes: Vec<u8>, params: &SchemeParams) -> Result<Self> {
        if bytes.len() != params.elem_len {
            return Err(Error::param("element has wrong length"));
        }
        Ok(Element(bytes))
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|b| *b == Self::NULL_BYTE)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    /// The element text with padding removed.
    pub fn text(&self) -> String {
        if self.is_null() {
            return "NULL".to_string();
        }
        let end = self.0.iter().rposition(|b| *b != 0).map_or(0, |i| i + 1);
        String::from_utf8_lossy(&self.0[..end]).into_owned()
    }
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.text())
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// A plaintext row. `real` is false for dummy rows.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record {
    pub elements: Vec<Element>,
    pub real: bool,
}

impl Record {
    pub fn real(elements: Vec<Element>) -> Self {
        Record { elements, real: true }
    }

    pub fn dummy(elements: Vec<Element>) -> Self {
        Record { elements, real: false }
    }

    pub fn from_strs(cells: &[&str], params: &SchemeParams) -> Result<Self> {
        let elements = cells
            .iter()
            .map(|c| Element::from_str(c, params))
            .collect::<Result<_>>()?;
        let r = Record::real(elements);
        r.validate(params)?;
        Ok(r)
    }

    pub fn validate(&self, params: &SchemeParams) -> Result<()> {
        if self.elements.len() != params.field_count {
            return Err(Error::param(format!(
                "record has {} fields, expected {}",
                self.elements.len(),
                params.field_count
            )));
        }
        if self.elements.iter().any(|e| e.as_bytes().len() != params.elem_len) {
            return Err(Error::param("record element has wrong width"));
        }
        Ok(())
    }

    pub fn is_all_null(&self) -> bool {
        self.elements.iter().all(Element::is_null)
    }
}

macro_rules! byte_newtype {
    ($name:ident) => {
        #[derive(Clone, PartialEq, Eq, Hash)]
        pub struct $name(Vec<u8>);

        impl $name {
            pub fn from_bytes(bytes: Vec<u8>) -> Self {
                $name(bytes)
            }

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }

            pub fn into_bytes(self) -> Vec<u8> {
                self.0
            }

            /// Field `f` (0-based) of the blinded layout.
            pub fn segment(&self, f: usize, params: &SchemeParams) -> &[u8] {
                &self.0[f * params.elem_len..(f + 1) * params.elem_len]
            }

            /// Trailing tag portion.
            pub fn tag_part(&self, params: &SchemeParams) -> &[u8] {
                &self.0[params.field_count * params.elem_len..]
            }

            pub fn xor_with(&mut self, mask: &[u8]) {
                crypto::xor_into(&mut self.0, mask);
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let h = hex::encode(&self.0);
                write!(f, "{}({}…)", stringify!($name), &h[..h.len().min(16)])
            }
        }
    };
}

byte_newtype!(Nonce);
byte_newtype!(EncryptedRecord);

impl EncryptedRecord {
    pub fn set_tag(&mut self, tag: &[u8], params: &SchemeParams) {
        let start = params.field_count * params.elem_len;
        self.0[start..].copy_from_slice(tag);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryType {
    Select,
    Delete,
}

impl QueryType {
    pub fn code(self) -> u8 {
        match self {
            QueryType::Select => 0,
            QueryType::Delete => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(QueryType::Select),
            1 => Some(QueryType::Delete),
            _ => None,
        }
    }
}

/// Single equality predicate `field = element`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub qtype: QueryType,
    pub field: usize,
    pub element: Element,
}

impl Query {
    pub fn select(field: usize, element: Element) -> Self {
        Query {
            qtype: QueryType::Select,
            field,
            element,
        }
    }

    pub fn delete(field: usize, element: Element) -> Self {
        Query {
            qtype: QueryType::Delete,
            field,
            element,
        }
    }

    pub fn validate(&self, params: &SchemeParams) -> Result<()> {
        if self.field >= params.field_count {
            return Err(Error::param(format!("field {} out of range", self.field)));
        }
        if self.element.as_bytes().len() != params.elem_len {
            return Err(Error::param("query element has wrong width"));
        }
        Ok(())
    }
}

/// What the storage service sees of a query: type and field in clear, the
/// keyword blinded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedQuery {
    pub qtype: QueryType,
    pub field: usize,
    pub e_star: Vec<u8>,
}

/// Decrypted group metadata: distinct elements and the padding threshold.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupMeta {
    pub elements: BTreeSet<Element>,
    pub tau: u64,
}

impl GroupMeta {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.tau.to_be_bytes());
        out.extend_from_slice(&(self.elements.len() as u32).to_be_bytes());
        for e in &self.elements {
            out.extend_from_slice(&(e.as_bytes().len() as u32).to_be_bytes());
            out.extend_from_slice(e.as_bytes());
        }
        out
    }

    fn decode(bytes: &[u8], params: &SchemeParams) -> Result<Self> {
        let bad = || Error::Format("malformed group metadata".into());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad());
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let tau = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let mut elements = BTreeSet::new();
        for _ in 0..count {
            let len = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
            elements.insert(Element::from_exact(take(len)?.to_vec(), params).map_err(|_| bad())?);
        }
        Ok(GroupMeta { elements, tau })
    }

    pub fn seal<R: RngCore + CryptoRng>(&self, cipher: &MetaCipher, rng: &mut R) -> Vec<u8> {
        cipher.seal(rng, &self.encode())
    }

    pub fn open(ct: &[u8], cipher: &MetaCipher, params: &SchemeParams) -> Result<Self> {
        Self::decode(&cipher.open(ct)?, params)
    }
}

/// One row of the group directory held by the index service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupEntry {
    pub il: Vec<RecordId>,
    pub meta_ct: Vec<u8>,
}

pub type GroupDirectory = BTreeMap<GroupKey, GroupEntry>;

/// The group used for `(field, g)`: `g` itself when present, otherwise the
/// group in `field` whose id has the smallest Hamming distance to `g`, ties
/// going to the smaller id.
pub fn closest_group(gdb: &GroupDirectory, field: usize, g: GroupId) -> Option<GroupKey> {
    let exact = GroupKey::new(field, g);
    if gdb.contains_key(&exact) {
        return Some(exact);
    }
    let lo = GroupKey::new(field, GroupId(0));
    let hi = GroupKey::new(field, GroupId(u64::MAX));
    gdb.range(lo..=hi)
        .map(|(k, _)| *k)
        .min_by_key(|k| (k.group.hamming(g), k.group))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonceEntry {
    pub seed: Vec<u8>,
    pub nonce: Nonce,
}

/// Per-record witness: `w` for the match test, `t` for nonce recovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub w: Vec<u8>,
    pub t: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchHit {
    pub id: RecordId,
    pub record: EncryptedRecord,
    pub t: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SearchResult {
    pub entries: Vec<SearchHit>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Census {
    /// Count only rows flagged real.
    RealOnly,
    /// Count every row, dummies included.
    AllRows,
}

/// A plaintext table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlainDatabase {
    pub field_names: Vec<String>,
    pub rows: Vec<Record>,
}

impl PlainDatabase {
    pub fn new(field_names: Vec<String>, rows: Vec<Record>) -> Self {
        PlainDatabase { field_names, rows }
    }

    pub fn field_count(&self) -> usize {
        self.field_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|n| n == name)
    }

    /// `O(e)` for every element appearing in `field`.
    pub fn occurrence_census(&self, field: usize, scope: Census) -> Result<BTreeMap<Element, u64>> {
        if field >= self.field_count() {
            return Err(Error::param(format!("field {field} out of range")));
        }
        let mut counts = BTreeMap::new();
        for row in &self.rows {
            if scope == Census::RealOnly && !row.real {
                continue;
            }
            *counts.entry(row.elements[field].clone()).or_insert(0) += 1;
        }
        Ok(counts)
    }

    /// `U_f`, the distinct real elements of `field`.
    pub fn universe(&self, field: usize) -> Result<BTreeSet<Element>> {
        Ok(self.occurrence_census(field, Census::RealOnly)?.into_keys().collect())
    }
}

/// Builds a record tag. Real tags are `(H_{s1}(S) ‖ S) ⊕ n_tag` for a fresh
/// `S`; dummy tags are uniform bytes.
pub fn tag_make<R: RngCore + ?Sized>(
    real: bool,
    n_tag: &[u8],
    hasher: &KeyedHasher,
    params: &SchemeParams,
    rng: &mut R,
) -> Result<Vec<u8>> {
    if n_tag.len() != params.tag_len() {
        return Err(Error::param("tag nonce has wrong length"));
    }
    if !real {
        return Ok(crypto::random_bytes(rng, params.tag_len()));
    }
    let s = crypto::random_bytes(rng, params.elem_len);
    let mut tag = hasher.hash(&[&s]);
    tag.extend_from_slice(&s);
    crypto::xor_into(&mut tag, n_tag);
    Ok(tag)
}

/// True when the tag unblinds to a well-formed real tag.
pub fn tag_check(tag: &[u8], n_tag: &[u8], hasher: &KeyedHasher, params: &SchemeParams) -> Result<bool> {
    if tag.len() != params.tag_len() || n_tag.len() != params.tag_len() {
        return Err(Error::param("tag has wrong length"));
    }
    let plain = crypto::xor(tag, n_tag);
    let (left, right) = plain.split_at(params.hash_len);
    Ok(hasher.hash(&[right]) == left)
}
