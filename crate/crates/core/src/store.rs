//! On-disk formats and plaintext ingestion.
//!
//! Every store file starts with a 20-byte header:
//! `"PMCD" | version u16 | F u16 | elem_len u16 | tag_len u16 | count u64`.
//! Keys never appear in store files.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::admin::Stores;
use crate::codec::{Reader, Writer};
use crate::crypto::{SchemeParams, SecretKeys};
use crate::error::{Error, Result};
use crate::model::{
    EncryptedRecord, GroupDirectory, GroupEntry, GroupId, GroupKey, Nonce, NonceEntry, PlainDatabase, Record, UserId,
};

pub const MAGIC: &[u8; 4] = b"PMCD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

pub const EDB_FILE: &str = "edb.bin";
pub const NDB_FILE: &str = "ndb.bin";
pub const GDB_FILE: &str = "gdb.bin";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const REVOKED_FILE: &str = "revoked.txt";

pub const ENV_S1: &str = "PMCDB_S1";
pub const ENV_S2: &str = "PMCDB_S2";

fn header(w: &mut Writer, params: &SchemeParams, count: usize) {
    w.raw(MAGIC)
        .u16(VERSION)
        .u16(params.field_count as u16)
        .u16(params.elem_len as u16)
        .u16(params.tag_len() as u16)
        .u64(count as u64);
}

fn read_header(r: &mut Reader, params: &SchemeParams) -> Result<usize> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let (f, elem, tag) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    if (f, elem, tag) != (params.field_count, params.elem_len, params.tag_len()) {
        return Err(Error::Format(format!(
            "store layout (F {f}, elem {elem}, tag {tag}) does not match parameters (F {}, elem {}, tag {})",
            params.field_count,
            params.elem_len,
            params.tag_len()
        )));
    }
    usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflows".into()))
}

fn fixed_body_len(count: usize, item: usize, r: &Reader) -> Result<()> {
    if count.checked_mul(item) != Some(r.remaining()) {
        return Err(Error::Format(format!(
            "body holds {} bytes, expected {count} × {item}",
            r.remaining()
        )));
    }
    Ok(())
}

pub fn encode_edb(edb: &[EncryptedRecord], params: &SchemeParams) -> Result<Vec<u8>> {
    let len = params.record_len();
    let mut w = Writer::new();
    header(&mut w, params, edb.len());
    for r in edb {
        if r.as_bytes().len() != len {
            return Err(Error::Format("record has wrong length".into()));
        }
        w.raw(r.as_bytes());
    }
    Ok(w.finish())
}

pub fn decode_edb(bytes: &[u8], params: &SchemeParams) -> Result<Vec<EncryptedRecord>> {
    let mut r = Reader::new(bytes);
    let count = read_header(&mut r, params)?;
    let len = params.record_len();
    fixed_body_len(count, len, &r)?;
    (0..count)
        .map(|_| Ok(EncryptedRecord::from_bytes(r.take(len)?.to_vec())))
        .collect()
}

pub fn encode_ndb(ndb: &[NonceEntry], params: &SchemeParams) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    header(&mut w, params, ndb.len());
    for n in ndb {
        if n.seed.len() != params.seed_len || n.nonce.as_bytes().len() != params.nonce_len() {
            return Err(Error::Format("nonce entry has wrong length".into()));
        }
        w.raw(&n.seed).raw(n.nonce.as_bytes());
    }
    Ok(w.finish())
}

pub fn decode_ndb(bytes: &[u8], params: &SchemeParams) -> Result<Vec<NonceEntry>> {
    let mut r = Reader::new(bytes);
    let count = read_header(&mut r, params)?;
    fixed_body_len(count, params.seed_len + params.nonce_len(), &r)?;
    (0..count)
        .map(|_| {
            Ok(NonceEntry {
                seed: r.take(params.seed_len)?.to_vec(),
                nonce: Nonce::from_bytes(r.take(params.nonce_len())?.to_vec()),
            })
        })
        .collect()
}

pub fn encode_gdb(gdb: &GroupDirectory, params: &SchemeParams) -> Vec<u8> {
    let mut w = Writer::new();
    header(&mut w, params, gdb.len());
    for (k, e) in gdb {
        w.u16(k.field as u16).bytes(&k.group.to_bytes()).count(e.il.len());
        for id in &e.il {
            w.u64(*id);
        }
        w.bytes(&e.meta_ct);
    }
    w.finish()
}

pub fn decode_gdb(bytes: &[u8], params: &SchemeParams) -> Result<GroupDirectory> {
    let mut r = Reader::new(bytes);
    let count = read_header(&mut r, params)?;
    let mut gdb = GroupDirectory::new();
    for _ in 0..count {
        let field = r.u16()? as usize;
        if field >= params.field_count {
            return Err(Error::Format(format!("group for field {field} out of range")));
        }
        let g = r.bytes()?;
        let g: [u8; 8] = g
            .try_into()
            .map_err(|_| Error::Format("group id must be 8 bytes".into()))?;
        let n = r.count(8)?;
        let il = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let meta_ct = r.bytes()?;
        if gdb
            .insert(GroupKey::new(field, GroupId(u64::from_be_bytes(g))), GroupEntry { il, meta_ct })
            .is_some()
        {
            return Err(Error::Format("duplicate group entry".into()));
        }
    }
    r.finish()?;
    Ok(gdb)
}

/// Writes through a temporary file so a failed save never leaves a partial
/// store behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_edb(path: &Path, edb: &[EncryptedRecord], params: &SchemeParams) -> Result<()> {
    write_atomic(path, &encode_edb(edb, params)?)
}

pub fn load_edb(path: &Path, params: &SchemeParams) -> Result<Vec<EncryptedRecord>> {
    decode_edb(&fs::read(path)?, params)
}

pub fn save_ndb(path: &Path, ndb: &[NonceEntry], params: &SchemeParams) -> Result<()> {
    write_atomic(path, &encode_ndb(ndb, params)?)
}

pub fn load_ndb(path: &Path, params: &SchemeParams) -> Result<Vec<NonceEntry>> {
    decode_ndb(&fs::read(path)?, params)
}

pub fn save_gdb(path: &Path, gdb: &GroupDirectory, params: &SchemeParams) -> Result<()> {
    write_atomic(path, &encode_gdb(gdb, params))
}

pub fn load_gdb(path: &Path, params: &SchemeParams) -> Result<GroupDirectory> {
    decode_gdb(&fs::read(path)?, params)
}

/// Parameters and schema of a deployment directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub field_names: Vec<String>,
    pub params: SchemeParams,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        m.params.validate()?;
        if m.field_names.len() != m.params.field_count {
            return Err(Error::Format("manifest field names do not match the field count".into()));
        }
        Ok(m)
    }

    pub fn field_index(&self, name: &str) -> Result<usize> {
        if let Some(i) = self.field_names.iter().position(|n| n == name) {
            return Ok(i);
        }
        name.parse::<usize>()
            .ok()
            .filter(|i| *i < self.field_names.len())
            .ok_or_else(|| Error::param(format!("unknown field {name:?}")))
    }
}

/// The three store files of a deployment directory.
pub fn save_stores(dir: &Path, stores: &Stores, params: &SchemeParams) -> Result<()> {
    save_edb(&dir.join(EDB_FILE), &stores.edb, params)?;
    save_ndb(&dir.join(NDB_FILE), &stores.ndb, params)?;
    save_gdb(&dir.join(GDB_FILE), &stores.gdb, params)
}

pub fn load_stores(dir: &Path, params: &SchemeParams) -> Result<Stores> {
    let stores = Stores {
        edb: load_edb(&dir.join(EDB_FILE), params)?,
        ndb: load_ndb(&dir.join(NDB_FILE), params)?,
        gdb: load_gdb(&dir.join(GDB_FILE), params)?,
    };
    if stores.edb.len() != stores.ndb.len() {
        return Err(Error::Format(format!(
            "EDB holds {} records but NDB holds {} entries",
            stores.edb.len(),
            stores.ndb.len()
        )));
    }
    Ok(stores)
}

pub fn load_revoked(path: &Path) -> Result<BTreeSet<UserId>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<u32>()
                .map(UserId)
                .map_err(|_| Error::Format(format!("bad user id {l:?} in revocation list")))
        })
        .collect()
}

pub fn save_revoked(path: &Path, users: &BTreeSet<UserId>) -> Result<()> {
    let text: String = users.iter().map(|u| format!("{}\n", u.0)).collect();
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    s1: String,
    s2: String,
}

pub fn save_key_file(path: &Path, keys: &SecretKeys) -> Result<()> {
    let text = toml::to_string(&KeyFile {
        s1: keys.s1_hex(),
        s2: keys.s2_hex(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_key_file(path: &Path, params: &SchemeParams) -> Result<SecretKeys> {
    let kf: KeyFile = toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))?;
    SecretKeys::from_hex(&kf.s1, &kf.s2, params)
}

/// Keys from `PMCDB_S1` / `PMCDB_S2`, if both are set.
pub fn keys_from_env(params: &SchemeParams) -> Result<Option<SecretKeys>> {
    match (std::env::var(ENV_S1), std::env::var(ENV_S2)) {
        (Ok(s1), Ok(s2)) => SecretKeys::from_hex(s1.trim(), s2.trim(), params).map(Some),
        _ => Ok(None),
    }
}

/// Environment keys first, then the key file.
pub fn resolve_keys(key_file: Option<&Path>, params: &SchemeParams) -> Result<SecretKeys> {
    if let Some(k) = keys_from_env(params)? {
        return Ok(k);
    }
    match key_file {
        Some(p) if p.exists() => load_key_file(p, params),
        _ => Err(Error::Auth(format!(
            "no keys: set {ENV_S1}/{ENV_S2} or provide a key file{}",
            key_file.map(|p| format!(" (looked for {})", p.display())).unwrap_or_default()
        ))),
    }
}

/// Reads a CSV table whose header names the fields. Cells are padded to the
/// element length; longer cells are rejected.
pub fn ingest_csv<R: Read>(input: R, params: &SchemeParams) -> Result<PlainDatabase> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Format("csv has no header row".into()));
    }
    if headers.len() != params.field_count {
        return Err(Error::Format(format!(
            "csv has {} columns, parameters expect {}",
            headers.len(),
            params.field_count
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let cells: Vec<&str> = rec.iter().map(str::trim).collect();
        let row = Record::from_strs(&cells, params).map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
        if row.elements.iter().any(|e| e.is_null()) {
            return Err(Error::Format(format!("row {}: reserved NULL value", i + 1)));
        }
        rows.push(row);
    }
    Ok(PlainDatabase::new(headers, rows))
}

pub fn ingest_csv_file(path: &Path, params: &SchemeParams) -> Result<PlainDatabase> {
    ingest_csv(fs::File::open(path)?, params)
}

/// Reads just the header row, to size parameters before ingesting.
pub fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(rdr
        .headers()
        .map_err(|e| Error::Format(format!("csv: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect())
}

pub fn write_csv<W: Write>(out: W, db: &PlainDatabase) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(&db.field_names).map_err(err)?;
    for r in &db.rows {
        w.write_record(r.elements.iter().map(|e| e.text())).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Width of generated integer keys.
pub const INT_KEY_WIDTH: usize = 10;

/// Single-field table of `rows` integer keys drawn uniformly from
/// `0..distinct`, rendered as zero-padded decimals.
pub fn generate_int_table<R: Rng>(rows: usize, distinct: u64, rng: &mut R) -> Result<Vec<String>> {
    if distinct == 0 {
        return Err(Error::param("need at least one distinct key"));
    }
    Ok((0..rows)
        .map(|_| format!("{:0width$}", rng.gen_range(0..distinct), width = INT_KEY_WIDTH))
        .collect())
}

pub fn int_table_db(keys: &[String], params: &SchemeParams) -> Result<PlainDatabase> {
    let rows = keys
        .iter()
        .map(|k| Record::from_strs(&[k.as_str()], params))
        .collect::<Result<_>>()?;
    Ok(PlainDatabase::new(vec!["key".into()], rows))
}

pub fn dir_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
