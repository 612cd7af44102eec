//! Command implementations behind the `pmcdb` binary.
//!
//! A deployment directory holds `edb.bin`, `ndb.bin`, `gdb.bin`,
//! `manifest.toml` and `revoked.txt`. Keys live in a separate file (or the
//! `PMCDB_S1`/`PMCDB_S2` environment variables).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::time::Duration;

use pmcdb::admin::{Admin, CompactReport, Stores};
use pmcdb::auditor::{self, PatternReport, AUDIT_USER};
use pmcdb::crypto::{Grouping, SchemeParams, SecretKeys};
use pmcdb::error::{Error, ErrorCode, Result};
use pmcdb::iws::Iws;
use pmcdb::model::{Element, GroupKey, PlainDatabase, Query, Record, UserId};
use pmcdb::sss::Sss;
use pmcdb::store::{self, Manifest};
use pmcdb::transport::{
    serve, DeleteTrace, Deployment, InProc, InsertTrace, IwsService, RssService, SelectTrace, SssService, TcpEndpoints,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const KEY_FILE: &str = "keys.toml";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const PROTOCOL: i32 = 3;
    pub const AUTH: i32 = 4;
    pub const IO: i32 = 5;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Param(_) => exit::USAGE,
        Error::Auth(_) => exit::AUTH,
        Error::Protocol {
            code: ErrorCode::Revoked,
            ..
        } => exit::AUTH,
        Error::Protocol { .. } => exit::PROTOCOL,
        Error::Format(_) | Error::Io(_) => exit::IO,
    }
}

/// `keyed`, `mod:<n>` or `table:<csv of element,group>`.
pub fn parse_grouping(spec: &str) -> Result<Grouping> {
    if spec == "keyed" {
        return Ok(Grouping::KeyedHash);
    }
    if let Some(n) = spec.strip_prefix("mod:") {
        let modulus = n
            .parse()
            .map_err(|_| Error::param(format!("bad modulus {n:?}")))?;
        return Ok(Grouping::Modulo { modulus });
    }
    if let Some(path) = spec.strip_prefix("table:") {
        return read_group_table(Path::new(path)).map(|table| Grouping::Table { table });
    }
    Err(Error::param(format!(
        "unknown grouping {spec:?}: expected keyed, mod:<n> or table:<file>"
    )))
}

fn read_group_table(path: &Path) -> Result<BTreeMap<String, u64>> {
    let text = std::fs::read_to_string(path)?;
    let mut table = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (e, g) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected element,group", path.display(), i + 1)))?;
        let g = g
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad group {g:?}", path.display(), i + 1)))?;
        table.insert(e.trim().to_string(), g);
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub group_bits: u32,
    pub lambda: usize,
    pub elem_len: usize,
    pub grouping: Grouping,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            group_bits: 0,
            lambda: 1,
            elem_len: 16,
            grouping: Grouping::KeyedHash,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitSummary {
    pub rows: usize,
    pub records: usize,
    pub dummies: u64,
    pub groups: usize,
    pub undersized: usize,
    pub key_file: Option<PathBuf>,
}

fn rng_for(seed: Option<u64>, salt: u64) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        None => ChaCha20Rng::from_entropy(),
    }
}

fn derived_seed(seed: Option<u64>, salt: u64) -> Option<u64> {
    seed.map(|s| s ^ salt.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
}

pub fn default_key_file(dir: &Path) -> PathBuf {
    dir.join(KEY_FILE)
}

/// Ingests `csv` and writes a fresh deployment to `dir`. Keys come from the
/// environment, an existing key file, or are generated into `key_file`.
pub fn init(csv: &Path, dir: &Path, key_file: &Path, opts: &InitOptions, seed: Option<u64>) -> Result<InitSummary> {
    let headers = store::csv_headers(csv)?;
    let params = SchemeParams::new(headers.len())
        .with_group_bits(opts.group_bits)
        .with_lambda(opts.lambda)
        .with_elem_len(opts.elem_len)
        .with_grouping(opts.grouping.clone());
    params.validate()?;
    let db = store::ingest_csv_file(csv, &params)?;
    let mut rng = rng_for(seed, 1);

    let (keys, written) = match store::keys_from_env(&params)? {
        Some(k) => (k, None),
        None if key_file.exists() => (store::load_key_file(key_file, &params)?, None),
        None => {
            let k = SecretKeys::generate(&mut rng, &params);
            (k, Some(key_file.to_path_buf()))
        }
    };
    let admin = Admin::new(keys.clone(), params.clone())?;
    let out = admin.setup(&db, None, &mut rng)?;

    std::fs::create_dir_all(dir)?;
    Manifest {
        field_names: db.field_names.clone(),
        params: params.clone(),
    }
    .save(dir)?;
    store::save_stores(dir, &out.stores, &params)?;
    store::save_revoked(&dir.join(store::REVOKED_FILE), &Default::default())?;
    if let Some(p) = &written {
        store::save_key_file(p, &keys)?;
    }
    Ok(InitSummary {
        rows: db.len(),
        records: out.stores.edb.len(),
        dummies: out.sigma_max,
        groups: out.stores.gdb.len(),
        undersized: out.undersized.len(),
        key_file: written,
    })
}

/// An opened deployment directory plus the keys to use with it.
pub struct Workspace {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub keys: SecretKeys,
}

impl Workspace {
    pub fn open(dir: &Path, key_file: Option<&Path>) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let default = default_key_file(dir);
        let keys = store::resolve_keys(Some(key_file.unwrap_or(&default)), &manifest.params)?;
        Ok(Workspace {
            dir: dir.to_path_buf(),
            manifest,
            keys,
        })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.manifest.params
    }

    pub fn admin(&self) -> Result<Admin> {
        Admin::new(self.keys.clone(), self.params().clone())
    }

    pub fn stores(&self) -> Result<Stores> {
        store::load_stores(&self.dir, self.params())
    }

    pub fn revoked_path(&self) -> PathBuf {
        self.dir.join(store::REVOKED_FILE)
    }

    pub fn load_inproc(&self, seed: Option<u64>) -> Result<InProc> {
        let stores = self.stores()?;
        let mut link = match derived_seed(seed, 2) {
            Some(s) => InProc::with_rng_seed(self.params(), self.keys.s2(), stores, s),
            None => InProc::new(self.params(), self.keys.s2(), stores),
        };
        for u in store::load_revoked(&self.revoked_path())? {
            link.sss.sss_mut().revoke(u);
            link.iws.iws_mut().revoke(u);
        }
        Ok(link)
    }

    pub fn save_inproc(&self, link: &InProc) -> Result<()> {
        store::save_stores(&self.dir, &link.stores(), self.params())?;
        store::save_revoked(&self.revoked_path(), link.sss.sss().revoked())
    }

    /// Parses a `(field, value)` pair against the manifest.
    pub fn query(&self, field: &str, value: &str) -> Result<(usize, Element)> {
        let f = self.manifest.field_index(field)?;
        Ok((f, Element::from_str(value, self.params())?))
    }

    pub fn record(&self, values: &[String]) -> Result<Record> {
        let cells: Vec<&str> = values.iter().map(String::as_str).collect();
        if cells.len() != self.params().field_count {
            return Err(Error::param(format!(
                "expected {} values ({}), got {}",
                self.params().field_count,
                self.manifest.field_names.join(", "),
                cells.len()
            )));
        }
        Record::from_strs(&cells, self.params())
    }
}

#[derive(Debug, Clone)]
pub enum Transport {
    InProc,
    Tcp { sss: SocketAddr, iws: SocketAddr, rss: SocketAddr },
}

/// A user session over either transport. In-process sessions write the
/// updated stores back on `finish`.
pub enum Session {
    Local(Deployment<InProc>),
    Remote(Deployment<TcpEndpoints>),
}

macro_rules! each {
    ($s:expr, $d:ident => $body:expr) => {
        match $s {
            Session::Local($d) => $body,
            Session::Remote($d) => $body,
        }
    };
}

impl Session {
    pub fn open(ws: &Workspace, transport: &Transport, user: UserId, seed: Option<u64>) -> Result<Self> {
        let client = ws.admin()?.client().clone();
        let dseed = derived_seed(seed, 3);
        Ok(match transport {
            Transport::InProc => {
                let d = Deployment::new(client, user, ws.load_inproc(seed)?);
                Session::Local(match dseed {
                    Some(s) => d.with_rng_seed(s),
                    None => d,
                })
            }
            Transport::Tcp { sss, iws, rss } => {
                let link = TcpEndpoints::connect_with_retry(*sss, *iws, *rss, Duration::from_secs(5))?;
                let d = Deployment::new(client, user, link);
                Session::Remote(match dseed {
                    Some(s) => d.with_rng_seed(s),
                    None => d,
                })
            }
        })
    }

    pub fn select(&mut self, q: &Query) -> Result<SelectTrace> {
        each!(self, d => d.select_traced(q))
    }

    pub fn insert(&mut self, r: &Record) -> Result<InsertTrace> {
        each!(self, d => d.insert(r))
    }

    pub fn delete(&mut self, q: &Query) -> Result<DeleteTrace> {
        each!(self, d => d.delete(q))
    }

    pub fn revoke(&mut self, user: UserId) -> Result<()> {
        each!(self, d => d.revoke(user))
    }

    pub fn finish(self, ws: &Workspace) -> Result<()> {
        match self {
            Session::Local(d) => ws.save_inproc(d.endpoints()),
            Session::Remote(_) => Ok(()),
        }
    }
}

pub fn select(ws: &Workspace, t: &Transport, user: UserId, field: &str, value: &str, seed: Option<u64>) -> Result<SelectTrace> {
    let (f, e) = ws.query(field, value)?;
    let mut s = Session::open(ws, t, user, seed)?;
    let trace = s.select(&Query::select(f, e))?;
    s.finish(ws)?;
    Ok(trace)
}

pub fn insert(ws: &Workspace, t: &Transport, user: UserId, values: &[String], seed: Option<u64>) -> Result<InsertTrace> {
    let r = ws.record(values)?;
    let mut s = Session::open(ws, t, user, seed)?;
    let trace = s.insert(&r)?;
    s.finish(ws)?;
    Ok(trace)
}

pub fn delete(ws: &Workspace, t: &Transport, user: UserId, field: &str, value: &str, seed: Option<u64>) -> Result<DeleteTrace> {
    let (f, e) = ws.query(field, value)?;
    let mut s = Session::open(ws, t, user, seed)?;
    let trace = s.delete(&Query::delete(f, e))?;
    s.finish(ws)?;
    Ok(trace)
}

pub fn revoke(ws: &Workspace, t: &Transport, user: UserId) -> Result<()> {
    let mut s = Session::open(ws, t, AUDIT_USER, None)?;
    s.revoke(user)?;
    s.finish(ws)
}

pub fn compact(ws: &Workspace, seed: Option<u64>) -> Result<CompactReport> {
    let admin = ws.admin()?;
    let mut stores = ws.stores()?;
    let report = admin.compact(&mut stores, &mut rng_for(seed, 4))?;
    store::save_stores(&ws.dir, &stores, ws.params())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStat {
    pub key: GroupKey,
    pub field: String,
    pub elements: usize,
    pub tau: u64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stats {
    pub records: usize,
    pub dummies: usize,
    pub groups: Vec<GroupStat>,
}

pub fn stats(ws: &Workspace) -> Result<Stats> {
    let admin = ws.admin()?;
    let stores = ws.stores()?;
    let rows = admin.decrypt_all(&stores.edb, &stores.ndb)?;
    let metas = admin.open_metas(&stores.gdb)?;
    let groups = metas
        .iter()
        .map(|(k, m)| GroupStat {
            key: *k,
            field: ws.manifest.field_names[k.field].clone(),
            elements: m.elements.len(),
            tau: m.tau,
            records: stores.gdb[k].il.len(),
        })
        .collect();
    Ok(Stats {
        records: rows.len(),
        dummies: rows.iter().filter(|r| !r.real).count(),
        groups,
    })
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records\t{}", self.records)?;
        writeln!(f, "dummies\t{}", self.dummies)?;
        writeln!(f, "groups\t{}", self.groups.len())?;
        writeln!(f, "field\tgroup\telements\ttau\trecords")?;
        for g in &self.groups {
            writeln!(f, "{}\t{}\t{}\t{}\t{}", g.field, g.key.group.0, g.elements, g.tau, g.records)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditKind {
    Size,
    Forward,
    Backward,
    Untrace,
    All,
}

impl std::str::FromStr for AuditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "size" => AuditKind::Size,
            "forward" => AuditKind::Forward,
            "backward" => AuditKind::Backward,
            "untrace" | "untraceability" => AuditKind::Untrace,
            "all" => AuditKind::All,
            _ => return Err(Error::param(format!("unknown audit {s:?}"))),
        })
    }
}

/// Runs audits against an in-memory copy of the deployment; the files on
/// disk are left untouched.
pub fn audit(ws: &Workspace, kind: AuditKind, trials: usize, seed: Option<u64>) -> Result<PatternReport> {
    let admin = ws.admin()?;
    let mut rng = rng_for(seed, 5);
    let fresh = || -> Result<Deployment<InProc>> {
        let d = Deployment::new(admin.client().clone(), AUDIT_USER, ws.load_inproc(seed)?);
        Ok(match derived_seed(seed, 6) {
            Some(s) => d.with_rng_seed(s),
            None => d,
        })
    };
    let stores = ws.stores()?;
    let shadow: Vec<Record> = admin
        .decrypt_all(&stores.edb, &stores.ndb)?
        .into_iter()
        .filter(|r| r.real)
        .collect();
    let universe: Vec<(usize, Element)> = admin
        .open_metas(&stores.gdb)?
        .iter()
        .flat_map(|(k, m)| m.elements.iter().map(move |e| (k.field, e.clone())))
        .collect();
    if shadow.is_empty() {
        return Err(Error::param("nothing to audit: the table has no real rows"));
    }
    let trials = trials.max(1);
    let want = |k: AuditKind| kind == k || kind == AuditKind::All;
    let mut report = PatternReport::default();

    if want(AuditKind::Size) {
        report.size = Some(auditor::audit_size_pattern(&mut fresh()?, &admin)?);
    }
    if want(AuditKind::Forward) {
        let mut dep = fresh()?;
        for i in 0..trials {
            let row = shadow.choose(&mut rng).expect("non-empty");
            let f = i % ws.params().field_count;
            let insert = (i % 2 == 1).then_some(row);
            report
                .forward
                .push(auditor::audit_forward(&mut dep, f, &row.elements[f], insert, &mut rng)?);
        }
    }
    if want(AuditKind::Backward) {
        let row = shadow.choose(&mut rng).expect("non-empty");
        let f = rng_index(&mut rng, ws.params().field_count);
        let mut sh = shadow.clone();
        report.backward = Some(auditor::audit_backward(
            &mut fresh()?,
            &admin,
            &mut sh,
            &Query::delete(f, row.elements[f].clone()),
            &universe,
            trials,
            &mut rng,
        )?);
    }
    if want(AuditKind::Untrace) {
        let row = shadow.choose(&mut rng).expect("non-empty");
        report.untraceability = Some(auditor::audit_untraceability(&mut fresh()?, &admin, 0, &row.elements[0], trials)?);
    }
    Ok(report)
}

fn rng_index(rng: &mut ChaCha20Rng, n: usize) -> usize {
    use rand::Rng;
    rng.gen_range(0..n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Sss,
    Iws,
    Rss,
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sss" => Role::Sss,
            "iws" => Role::Iws,
            "rss" => Role::Rss,
            _ => return Err(Error::param(format!("unknown role {s:?}"))),
        })
    }
}

/// Hosts one role on `listener`, writing its state back to `dir` after
/// every frame. The storage service owns the revocation file.
pub fn serve_role(dir: &Path, key_file: Option<&Path>, role: Role, listener: &TcpListener, max_connections: Option<usize>, seed: Option<u64>) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let params = manifest.params.clone();
    let revoked = store::load_revoked(&dir.join(store::REVOKED_FILE))?;
    match role {
        Role::Sss => {
            let mut sss = Sss::new(params.clone(), store::load_edb(&dir.join(store::EDB_FILE), &params)?);
            revoked.iter().for_each(|u| sss.revoke(*u));
            let mut svc = SssService::new(sss);
            serve(listener, &mut svc, max_connections, |s| {
                store::save_edb(&dir.join(store::EDB_FILE), s.sss().edb(), &params)?;
                store::save_revoked(&dir.join(store::REVOKED_FILE), s.sss().revoked())
            })
        }
        Role::Iws => {
            let default = default_key_file(dir);
            let keys = store::resolve_keys(Some(key_file.unwrap_or(&default)), &params)?;
            let ndb = store::load_ndb(&dir.join(store::NDB_FILE), &params)?;
            let gdb = store::load_gdb(&dir.join(store::GDB_FILE), &params)?;
            let mut iws = Iws::new(params.clone(), keys.s2(), gdb, ndb);
            if let Some(s) = derived_seed(seed, 2) {
                iws = iws.with_rng_seed(s);
            }
            revoked.iter().for_each(|u| iws.revoke(*u));
            let mut svc = IwsService::new(iws);
            serve(listener, &mut svc, max_connections, |s| {
                store::save_ndb(&dir.join(store::NDB_FILE), s.iws().ndb(), &params)?;
                store::save_gdb(&dir.join(store::GDB_FILE), s.iws().gdb(), &params)
            })
        }
        Role::Rss => serve(listener, &mut RssService::new(params), max_connections, |_| Ok(())),
    }
}

/// Writes a single-column CSV of `rows` zero-padded integer keys.
pub fn gen<W: Write>(out: W, rows: usize, distinct: u64, seed: Option<u64>) -> Result<()> {
    let keys = store::generate_int_table(rows, distinct, &mut rng_for(seed, 7))?;
    let params = SchemeParams::new(1);
    store::write_csv(out, &store::int_table_db(&keys, &params)?)
}

pub fn write_rows<W: Write>(out: W, field_names: &[String], rows: &[Record]) -> Result<()> {
    store::write_csv(out, &PlainDatabase::new(field_names.to_vec(), rows.to_vec()))
}
