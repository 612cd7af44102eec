//! Protocol messages and their frame encoding.
//!
//! A frame is `len: u32 | msg_type: u8 | payload`, where `len` counts the
//! payload only. Every payload starts with the sender and recipient role
//! codes. Integers are big-endian; byte strings and lists carry a 4-byte
//! length prefix.

use std::io::{Read, Write};

use crate::codec::{Reader, Writer};
use crate::error::{Error, ErrorCode, Result};
use crate::iws::IndexEntry;
use crate::model::{
    EncryptedQuery, EncryptedRecord, GroupId, GroupKey, Nonce, NonceEntry, Party, QueryType, RecordId, SearchHit,
    SearchResult, UserId, Witness,
};

pub type SessionId = u64;

/// Upper bound on a single frame's payload.
pub const MAX_FRAME: usize = 1 << 30;

/// Frame type of a reply batch on socket links.
pub const BATCH_TYPE: u8 = 0xF0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShuffleTarget {
    Ids(Vec<RecordId>),
    Group(GroupKey),
}

/// Extra material a delete needs: the tag and `t` of every searched record,
/// plus the matched ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeleteView {
    pub searched: Vec<(RecordId, Vec<u8>, Vec<u8>)>,
    pub matched: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Query {
        session: SessionId,
        user: UserId,
        eq: EncryptedQuery,
    },
    NonceReq {
        session: SessionId,
        user: UserId,
        field: usize,
        eta: Vec<u8>,
        group: GroupId,
    },
    WitnessSet {
        session: SessionId,
        il: Vec<RecordId>,
        en: Vec<Witness>,
    },
    SearchResult {
        session: SessionId,
        sr: SearchResult,
        delete: Option<DeleteView>,
    },
    ShuffleReq {
        session: SessionId,
        target: ShuffleTarget,
    },
    ShuffleData {
        session: SessionId,
        il_prime: Vec<RecordId>,
        nn: Vec<(RecordId, Vec<u8>)>,
    },
    ShuffleRecords {
        session: SessionId,
        records: Vec<(RecordId, EncryptedRecord)>,
    },
    ShuffledRecords {
        session: SessionId,
        records: Vec<(RecordId, EncryptedRecord)>,
    },
    InsertRecords {
        session: SessionId,
        user: UserId,
        records: Vec<EncryptedRecord>,
    },
    InsertIndex {
        session: SessionId,
        user: UserId,
        entries: Vec<IndexEntry>,
        metas: Vec<(GroupKey, Vec<u8>)>,
    },
    InsertIds {
        session: SessionId,
        ids: Vec<RecordId>,
    },
    DeleteTags {
        session: SessionId,
        user: UserId,
        updates: Vec<(RecordId, Vec<u8>)>,
    },
    MetaFetch {
        session: SessionId,
        user: UserId,
        field: usize,
        group: GroupId,
    },
    MetaReply {
        session: SessionId,
        key: GroupKey,
        meta_ct: Vec<u8>,
    },
    Revoke {
        user: UserId,
    },
    Ack {
        session: SessionId,
        groups: Vec<GroupKey>,
    },
    Error {
        session: SessionId,
        role: Party,
        code: ErrorCode,
        detail: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Query { .. } => 1,
            Message::NonceReq { .. } => 2,
            Message::WitnessSet { .. } => 3,
            Message::SearchResult { .. } => 4,
            Message::ShuffleReq { .. } => 5,
            Message::ShuffleData { .. } => 6,
            Message::ShuffleRecords { .. } => 7,
            Message::ShuffledRecords { .. } => 8,
            Message::InsertRecords { .. } => 9,
            Message::InsertIndex { .. } => 10,
            Message::InsertIds { .. } => 11,
            Message::DeleteTags { .. } => 12,
            Message::MetaFetch { .. } => 13,
            Message::MetaReply { .. } => 14,
            Message::Revoke { .. } => 15,
            Message::Ack { .. } => 16,
            Message::Error { .. } => 17,
        }
    }

    pub fn name(&self) -> &'static str {
        type_name(self.msg_type())
    }

    pub fn session(&self) -> Option<SessionId> {
        match self {
            Message::Revoke { .. } => None,
            Message::Query { session, .. }
            | Message::NonceReq { session, .. }
            | Message::WitnessSet { session, .. }
            | Message::SearchResult { session, .. }
            | Message::ShuffleReq { session, .. }
            | Message::ShuffleData { session, .. }
            | Message::ShuffleRecords { session, .. }
            | Message::ShuffledRecords { session, .. }
            | Message::InsertRecords { session, .. }
            | Message::InsertIndex { session, .. }
            | Message::InsertIds { session, .. }
            | Message::DeleteTags { session, .. }
            | Message::MetaFetch { session, .. }
            | Message::MetaReply { session, .. }
            | Message::Ack { session, .. }
            | Message::Error { session, .. } => Some(*session),
        }
    }
}

pub fn type_name(t: u8) -> &'static str {
    match t {
        1 => "Query",
        2 => "NonceReq",
        3 => "WitnessSet",
        4 => "SearchResult",
        5 => "ShuffleReq",
        6 => "ShuffleData",
        7 => "ShuffleRecords",
        8 => "ShuffledRecords",
        9 => "InsertRecords",
        10 => "InsertIndex",
        11 => "InsertIds",
        12 => "DeleteTags",
        13 => "MetaFetch",
        14 => "MetaReply",
        15 => "Revoke",
        16 => "Ack",
        17 => "Error",
        BATCH_TYPE => "Batch",
        _ => "Unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: Party,
    pub to: Party,
    pub msg: Message,
}

impl Envelope {
    pub fn new(from: Party, to: Party, msg: Message) -> Self {
        Envelope { from, to, msg }
    }

    pub fn error(from: Party, session: SessionId, e: &Error) -> Self {
        let (role, code) = match e {
            Error::Protocol { role, code, .. } => (*role, *code),
            Error::Format(_) => (from, ErrorCode::Malformed),
            _ => (from, ErrorCode::Internal),
        };
        let detail = match e {
            Error::Protocol { detail, .. } => detail.clone(),
            other => other.to_string(),
        };
        Envelope::new(
            from,
            Party::User,
            Message::Error {
                session,
                role,
                code,
                detail,
            },
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.from.code()).u8(self.to.code());
        encode_body(&self.msg, &mut w);
        let payload = w.finish();
        let mut out = Vec::with_capacity(payload.len() + 5);
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.push(self.msg.msg_type());
        out.extend(payload);
        out
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let mut r = Reader::new(frame);
        let len = r.u32()? as usize;
        let t = r.u8()?;
        if r.remaining() != len {
            return Err(Error::Format(format!("frame declares {len} payload bytes, has {}", r.remaining())));
        }
        let env = decode_payload(t, &mut r)?;
        r.finish()?;
        Ok(env)
    }
}

fn party(c: u8) -> Result<Party> {
    Party::from_code(c).ok_or_else(|| Error::Format(format!("unknown role code {c}")))
}

fn put_key(w: &mut Writer, k: &GroupKey) {
    w.u16(k.field as u16).u64(k.group.0);
}

fn get_key(r: &mut Reader) -> Result<GroupKey> {
    Ok(GroupKey::new(r.u16()? as usize, GroupId(r.u64()?)))
}

fn put_ids(w: &mut Writer, ids: &[RecordId]) {
    w.count(ids.len());
    for id in ids {
        w.u64(*id);
    }
}

fn get_ids(r: &mut Reader) -> Result<Vec<RecordId>> {
    let n = r.count(8)?;
    (0..n).map(|_| r.u64()).collect()
}

fn put_id_bytes<T: AsRef<[u8]>>(w: &mut Writer, items: &[(RecordId, T)]) {
    w.count(items.len());
    for (id, b) in items {
        w.u64(*id).bytes(b.as_ref());
    }
}

fn get_id_bytes(r: &mut Reader) -> Result<Vec<(RecordId, Vec<u8>)>> {
    let n = r.count(12)?;
    (0..n).map(|_| Ok((r.u64()?, r.bytes()?))).collect()
}

fn put_records(w: &mut Writer, recs: &[(RecordId, EncryptedRecord)]) {
    w.count(recs.len());
    for (id, rec) in recs {
        w.u64(*id).bytes(rec.as_bytes());
    }
}

fn get_records(r: &mut Reader) -> Result<Vec<(RecordId, EncryptedRecord)>> {
    Ok(get_id_bytes(r)?
        .into_iter()
        .map(|(id, b)| (id, EncryptedRecord::from_bytes(b)))
        .collect())
}

fn encode_body(msg: &Message, w: &mut Writer) {
    match msg {
        Message::Query { session, user, eq } => {
            w.u64(*session).u32(user.0).u8(eq.qtype.code()).u16(eq.field as u16).bytes(&eq.e_star);
        }
        Message::NonceReq {
            session,
            user,
            field,
            eta,
            group,
        } => {
            w.u64(*session).u32(user.0).u16(*field as u16).bytes(eta).u64(group.0);
        }
        Message::WitnessSet { session, il, en } => {
            w.u64(*session);
            put_ids(w, il);
            w.count(en.len());
            for wit in en {
                w.bytes(&wit.w).bytes(&wit.t);
            }
        }
        Message::SearchResult { session, sr, delete } => {
            w.u64(*session).count(sr.entries.len());
            for h in &sr.entries {
                w.u64(h.id).bytes(h.record.as_bytes()).bytes(&h.t);
            }
            match delete {
                None => {
                    w.u8(0);
                }
                Some(d) => {
                    w.u8(1).count(d.searched.len());
                    for (id, tag, t) in &d.searched {
                        w.u64(*id).bytes(tag).bytes(t);
                    }
                    put_ids(w, &d.matched);
                }
            }
        }
        Message::ShuffleReq { session, target } => {
            w.u64(*session);
            match target {
                ShuffleTarget::Ids(ids) => {
                    w.u8(0);
                    put_ids(w, ids);
                }
                ShuffleTarget::Group(k) => {
                    w.u8(1);
                    put_key(w, k);
                }
            }
        }
        Message::ShuffleData { session, il_prime, nn } => {
            w.u64(*session);
            put_ids(w, il_prime);
            put_id_bytes(w, nn);
        }
        Message::ShuffleRecords { session, records } | Message::ShuffledRecords { session, records } => {
            w.u64(*session);
            put_records(w, records);
        }
        Message::InsertRecords { session, user, records } => {
            w.u64(*session).u32(user.0).count(records.len());
            for r in records {
                w.bytes(r.as_bytes());
            }
        }
        Message::InsertIndex {
            session,
            user,
            entries,
            metas,
        } => {
            w.u64(*session).u32(user.0).count(entries.len());
            for e in entries {
                w.bytes(&e.nonce.seed).bytes(e.nonce.nonce.as_bytes()).count(e.groups.len());
                for g in &e.groups {
                    w.u64(g.0);
                }
            }
            w.count(metas.len());
            for (k, ct) in metas {
                put_key(w, k);
                w.bytes(ct);
            }
        }
        Message::InsertIds { session, ids } => {
            w.u64(*session);
            put_ids(w, ids);
        }
        Message::DeleteTags { session, user, updates } => {
            w.u64(*session).u32(user.0);
            put_id_bytes(w, updates);
        }
        Message::MetaFetch {
            session,
            user,
            field,
            group,
        } => {
            w.u64(*session).u32(user.0).u16(*field as u16).u64(group.0);
        }
        Message::MetaReply { session, key, meta_ct } => {
            w.u64(*session);
            put_key(w, key);
            w.bytes(meta_ct);
        }
        Message::Revoke { user } => {
            w.u32(user.0);
        }
        Message::Ack { session, groups } => {
            w.u64(*session).count(groups.len());
            for k in groups {
                put_key(w, k);
            }
        }
        Message::Error {
            session,
            role,
            code,
            detail,
        } => {
            w.u64(*session).u8(role.code()).u16(*code as u16).str(detail);
        }
    }
}

fn decode_payload(t: u8, r: &mut Reader) -> Result<Envelope> {
    let from = party(r.u8()?)?;
    let to = party(r.u8()?)?;
    let msg = match t {
        1 => {
            let session = r.u64()?;
            let user = UserId(r.u32()?);
            let qtype = QueryType::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown query type".into()))?;
            let field = r.u16()? as usize;
            let e_star = r.bytes()?;
            Message::Query {
                session,
                user,
                eq: EncryptedQuery { qtype, field, e_star },
            }
        }
        2 => Message::NonceReq {
            session: r.u64()?,
            user: UserId(r.u32()?),
            field: r.u16()? as usize,
            eta: r.bytes()?,
            group: GroupId(r.u64()?),
        },
        3 => {
            let session = r.u64()?;
            let il = get_ids(r)?;
            let n = r.count(8)?;
            let en = (0..n)
                .map(|_| Ok(Witness { w: r.bytes()?, t: r.bytes()? }))
                .collect::<Result<_>>()?;
            Message::WitnessSet { session, il, en }
        }
        4 => {
            let session = r.u64()?;
            let n = r.count(16)?;
            let entries = (0..n)
                .map(|_| {
                    Ok(SearchHit {
                        id: r.u64()?,
                        record: EncryptedRecord::from_bytes(r.bytes()?),
                        t: r.bytes()?,
                    })
                })
                .collect::<Result<_>>()?;
            let delete = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.count(16)?;
                    let searched = (0..n)
                        .map(|_| Ok((r.u64()?, r.bytes()?, r.bytes()?)))
                        .collect::<Result<_>>()?;
                    Some(DeleteView {
                        searched,
                        matched: get_ids(r)?,
                    })
                }
                x => return Err(Error::Format(format!("bad delete flag {x}"))),
            };
            Message::SearchResult {
                session,
                sr: SearchResult { entries },
                delete,
            }
        }
        5 => {
            let session = r.u64()?;
            let target = match r.u8()? {
                0 => ShuffleTarget::Ids(get_ids(r)?),
                1 => ShuffleTarget::Group(get_key(r)?),
                x => return Err(Error::Format(format!("bad shuffle target {x}"))),
            };
            Message::ShuffleReq { session, target }
        }
        6 => Message::ShuffleData {
            session: r.u64()?,
            il_prime: get_ids(r)?,
            nn: get_id_bytes(r)?,
        },
        7 => Message::ShuffleRecords {
            session: r.u64()?,
            records: get_records(r)?,
        },
        8 => Message::ShuffledRecords {
            session: r.u64()?,
            records: get_records(r)?,
        },
        9 => {
            let session = r.u64()?;
            let user = UserId(r.u32()?);
            let n = r.count(4)?;
            let records = (0..n)
                .map(|_| Ok(EncryptedRecord::from_bytes(r.bytes()?)))
                .collect::<Result<_>>()?;
            Message::InsertRecords { session, user, records }
        }
        10 => {
            let session = r.u64()?;
            let user = UserId(r.u32()?);
            let n = r.count(12)?;
            let entries = (0..n)
                .map(|_| {
                    let seed = r.bytes()?;
                    let nonce = Nonce::from_bytes(r.bytes()?);
                    let k = r.count(8)?;
                    let groups = (0..k).map(|_| Ok(GroupId(r.u64()?))).collect::<Result<_>>()?;
                    Ok(IndexEntry {
                        nonce: NonceEntry { seed, nonce },
                        groups,
                    })
                })
                .collect::<Result<_>>()?;
            let m = r.count(14)?;
            let metas = (0..m).map(|_| Ok((get_key(r)?, r.bytes()?))).collect::<Result<_>>()?;
            Message::InsertIndex {
                session,
                user,
                entries,
                metas,
            }
        }
        11 => Message::InsertIds {
            session: r.u64()?,
            ids: get_ids(r)?,
        },
        12 => Message::DeleteTags {
            session: r.u64()?,
            user: UserId(r.u32()?),
            updates: get_id_bytes(r)?,
        },
        13 => Message::MetaFetch {
            session: r.u64()?,
            user: UserId(r.u32()?),
            field: r.u16()? as usize,
            group: GroupId(r.u64()?),
        },
        14 => Message::MetaReply {
            session: r.u64()?,
            key: get_key(r)?,
            meta_ct: r.bytes()?,
        },
        15 => Message::Revoke { user: UserId(r.u32()?) },
        16 => {
            let session = r.u64()?;
            let n = r.count(10)?;
            let groups = (0..n).map(|_| get_key(r)).collect::<Result<_>>()?;
            Message::Ack { session, groups }
        }
        17 => {
            let session = r.u64()?;
            let role = party(r.u8()?)?;
            let raw = r.u16()?;
            let code = ErrorCode::from_u16(raw).ok_or_else(|| Error::Format(format!("unknown error code {raw}")))?;
            Message::Error {
                session,
                role,
                code,
                detail: r.str()?,
            }
        }
        other => return Err(Error::Format(format!("unknown message type {other}"))),
    };
    Ok(Envelope { from, to, msg })
}

/// Reads one complete frame (header included). Returns `None` on a clean
/// end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        let n = r.read(&mut head[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Format("stream ended inside a frame header".into()));
        }
        got += n;
    }
    let len = u32::from_be_bytes(head[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(Error::Format(format!("frame of {len} bytes exceeds limit")));
    }
    let mut frame = Vec::with_capacity(len + 5);
    frame.extend_from_slice(&head);
    frame.resize(len + 5, 0);
    r.read_exact(&mut frame[5..])?;
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<()> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

pub fn encode_batch(frames: &[Vec<u8>]) -> Vec<u8> {
    let mut w = Writer::new();
    w.count(frames.len());
    for f in frames {
        w.raw(f);
    }
    let payload = w.finish();
    let mut out = Vec::with_capacity(payload.len() + 5);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(BATCH_TYPE);
    out.extend(payload);
    out
}

pub fn decode_batch(frame: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut r = Reader::new(frame);
    let len = r.u32()? as usize;
    if r.u8()? != BATCH_TYPE || r.remaining() != len {
        return Err(Error::Format("expected a reply batch".into()));
    }
    let n = r.count(5)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let inner = r.u32()? as usize;
        let t = r.u8()?;
        let body = r.take(inner)?;
        let mut f = Vec::with_capacity(inner + 5);
        f.extend_from_slice(&(inner as u32).to_be_bytes());
        f.push(t);
        f.extend_from_slice(body);
        out.push(f);
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<Envelope> {
        let rec = EncryptedRecord::from_bytes(vec![9; 80]);
        let key = GroupKey::new(1, GroupId(3));
        let msgs = vec![
            Message::Query {
                session: 1,
                user: UserId(2),
                eq: EncryptedQuery {
                    qtype: QueryType::Delete,
                    field: 1,
                    e_star: vec![5; 16],
                },
            },
            Message::NonceReq {
                session: 1,
                user: UserId(2),
                field: 0,
                eta: vec![1; 16],
                group: GroupId(u64::MAX),
            },
            Message::WitnessSet {
                session: 3,
                il: vec![0, 4],
                en: vec![
                    Witness { w: vec![1; 32], t: vec![2; 16] },
                    Witness { w: vec![3; 32], t: vec![4; 16] },
                ],
            },
            Message::SearchResult {
                session: 4,
                sr: SearchResult {
                    entries: vec![SearchHit {
                        id: 4,
                        record: rec.clone(),
                        t: vec![4; 16],
                    }],
                },
                delete: Some(DeleteView {
                    searched: vec![(0, vec![7; 48], vec![2; 16])],
                    matched: vec![4],
                }),
            },
            Message::SearchResult {
                session: 4,
                sr: SearchResult::default(),
                delete: None,
            },
            Message::ShuffleReq {
                session: 5,
                target: ShuffleTarget::Ids(vec![1, 2]),
            },
            Message::ShuffleReq {
                session: 5,
                target: ShuffleTarget::Group(key),
            },
            Message::ShuffleData {
                session: 6,
                il_prime: vec![2, 1],
                nn: vec![(1, vec![0; 80]), (2, vec![1; 80])],
            },
            Message::ShuffleRecords {
                session: 7,
                records: vec![(1, rec.clone())],
            },
            Message::ShuffledRecords {
                session: 8,
                records: vec![(1, rec.clone())],
            },
            Message::InsertRecords {
                session: 9,
                user: UserId(1),
                records: vec![rec.clone(), rec],
            },
            Message::InsertIndex {
                session: 10,
                user: UserId(1),
                entries: vec![IndexEntry {
                    nonce: NonceEntry {
                        seed: vec![1; 16],
                        nonce: Nonce::from_bytes(vec![2; 80]),
                    },
                    groups: vec![GroupId(1), GroupId(2)],
                }],
                metas: vec![(key, vec![3; 40])],
            },
            Message::InsertIds { session: 11, ids: vec![5, 6] },
            Message::DeleteTags {
                session: 12,
                user: UserId(1),
                updates: vec![(3, vec![0; 48])],
            },
            Message::MetaFetch {
                session: 13,
                user: UserId(1),
                field: 1,
                group: GroupId(2),
            },
            Message::MetaReply {
                session: 14,
                key,
                meta_ct: vec![1, 2, 3],
            },
            Message::Revoke { user: UserId(8) },
            Message::Ack {
                session: 15,
                groups: vec![key],
            },
            Message::Error {
                session: 16,
                role: Party::Iws,
                code: ErrorCode::Revoked,
                detail: "user 8 is revoked".into(),
            },
        ];
        msgs.into_iter()
            .map(|m| Envelope::new(Party::User, Party::Sss, m))
            .collect()
    }

    #[test]
    fn every_message_round_trips() {
        for env in samples() {
            let frame = env.encode();
            assert_eq!(frame[4], env.msg.msg_type());
            assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 5);
            assert_eq!(Envelope::decode(&frame).unwrap(), env, "{}", env.msg.name());
        }
    }

    #[test]
    fn damaged_frames_are_rejected() {
        for env in samples() {
            let frame = env.encode();
            assert!(Envelope::decode(&frame[..frame.len() - 1]).is_err());
            let mut longer = frame.clone();
            longer.push(0);
            assert!(Envelope::decode(&longer).is_err());
        }
        let mut bad = samples()[0].encode();
        bad[4] = 99;
        assert!(Envelope::decode(&bad).is_err());
    }

    #[test]
    fn batches_and_streams() {
        let frames: Vec<Vec<u8>> = samples().iter().map(Envelope::encode).collect();
        let batch = encode_batch(&frames);
        assert_eq!(decode_batch(&batch).unwrap(), frames);
        assert_eq!(decode_batch(&encode_batch(&[])).unwrap(), Vec::<Vec<u8>>::new());

        let mut stream = Vec::new();
        for f in &frames {
            write_frame(&mut stream, f).unwrap();
        }
        let mut cursor = std::io::Cursor::new(stream);
        for f in &frames {
            assert_eq!(read_frame(&mut cursor).unwrap().as_ref(), Some(f));
        }
        assert_eq!(read_frame(&mut cursor).unwrap(), None);
        let mut cut = std::io::Cursor::new(frames[0][..3].to_vec());
        assert!(read_frame(&mut cut).is_err());
    }
}
