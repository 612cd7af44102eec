//! Message-driven wrappers around the three server roles. Each service
//! consumes one envelope at a time and returns the envelopes it emits.

use std::collections::{HashMap, HashSet};

use crate::crypto::SchemeParams;
use crate::error::{Error, ErrorCode, Result};
use crate::iws::{IndexEntry, Iws};
use crate::model::{EncryptedQuery, EncryptedRecord, GroupKey, Party, QueryType, RecordId, UserId, Witness};
use crate::rss::{self, ShuffleJob};
use crate::sss::Sss;

use super::message::{DeleteView, Envelope, Message, SessionId, ShuffleTarget};

pub trait Service: Send {
    fn role(&self) -> Party;
    fn handle(&mut self, env: Envelope) -> Result<Vec<Envelope>>;
}

fn unexpected(role: Party, env: &Envelope) -> Error {
    Error::protocol(
        role,
        ErrorCode::UnexpectedMessage,
        format!("{} from {} is not accepted", env.msg.name(), env.from),
    )
}

fn expect_from(role: Party, env: &Envelope, allowed: &[Party]) -> Result<()> {
    if allowed.contains(&env.from) {
        Ok(())
    } else {
        Err(unexpected(role, env))
    }
}

struct PendingQuery {
    user: UserId,
    eq: EncryptedQuery,
}

/// Searched ids of a delete waiting for its new tags.
struct PendingDelete {
    user: UserId,
    il: Vec<RecordId>,
}

pub struct SssService {
    sss: Sss,
    queries: HashMap<SessionId, PendingQuery>,
    witnesses: HashMap<SessionId, (Vec<RecordId>, Vec<Witness>)>,
    deletes: HashMap<SessionId, PendingDelete>,
    shuffles: HashMap<SessionId, Vec<RecordId>>,
}

impl SssService {
    pub fn new(sss: Sss) -> Self {
        SssService {
            sss,
            queries: HashMap::new(),
            witnesses: HashMap::new(),
            deletes: HashMap::new(),
            shuffles: HashMap::new(),
        }
    }

    pub fn sss(&self) -> &Sss {
        &self.sss
    }

    pub fn sss_mut(&mut self) -> &mut Sss {
        &mut self.sss
    }

    fn env(to: Party, msg: Message) -> Envelope {
        Envelope::new(Party::Sss, to, msg)
    }

    /// Sends the records of `il` to the shuffle service and asks the index
    /// service for the matching plan.
    fn start_shuffle(&mut self, session: SessionId, il: Vec<RecordId>, ask_iws: bool) -> Result<Vec<Envelope>> {
        if il.is_empty() {
            return Ok(vec![Self::env(Party::User, Message::Ack { session, groups: vec![] })]);
        }
        let records = self.sss.records(&il)?;
        let mut out = vec![Self::env(Party::Rss, Message::ShuffleRecords { session, records })];
        if ask_iws {
            out.push(Self::env(
                Party::Iws,
                Message::ShuffleReq {
                    session,
                    target: ShuffleTarget::Ids(il.clone()),
                },
            ));
        }
        self.shuffles.insert(session, il);
        Ok(out)
    }

    fn try_search(&mut self, session: SessionId) -> Result<Vec<Envelope>> {
        if !(self.queries.contains_key(&session) && self.witnesses.contains_key(&session)) {
            return Ok(vec![]);
        }
        let q = self.queries.remove(&session).unwrap();
        let (il, en) = self.witnesses.remove(&session).unwrap();
        self.sss.check_user(q.user)?;
        let outcome = self.sss.search(&q.eq, &il, &en)?;
        match q.eq.qtype {
            QueryType::Select => {
                let mut out = vec![Self::env(
                    Party::User,
                    Message::SearchResult {
                        session,
                        sr: outcome.result,
                        delete: None,
                    },
                )];
                out.extend(self.start_shuffle(session, il, true)?);
                Ok(out)
            }
            QueryType::Delete => {
                let tags = self.sss.tags(&il)?;
                let searched = il
                    .iter()
                    .zip(tags)
                    .zip(&en)
                    .map(|((id, tag), wit)| (*id, tag, wit.t.clone()))
                    .collect();
                let matched = outcome.matched_ids(&il).collect();
                self.deletes.insert(session, PendingDelete { user: q.user, il });
                Ok(vec![Self::env(
                    Party::User,
                    Message::SearchResult {
                        session,
                        sr: outcome.result,
                        delete: Some(DeleteView { searched, matched }),
                    },
                )])
            }
        }
    }
}

impl Service for SssService {
    fn role(&self) -> Party {
        Party::Sss
    }

    fn handle(&mut self, env: Envelope) -> Result<Vec<Envelope>> {
        let role = Party::Sss;
        match env.msg {
            Message::Query { session, user, ref eq } => {
                expect_from(role, &env, &[Party::User])?;
                self.sss.check_user(user)?;
                self.queries.insert(session, PendingQuery { user, eq: eq.clone() });
                self.try_search(session)
            }
            Message::WitnessSet { session, ref il, ref en } => {
                expect_from(role, &env, &[Party::Iws])?;
                self.witnesses.insert(session, (il.clone(), en.clone()));
                self.try_search(session)
            }
            Message::DeleteTags { session, user, ref updates } => {
                expect_from(role, &env, &[Party::User])?;
                self.sss.check_user(user)?;
                let pending = self
                    .deletes
                    .remove(&session)
                    .ok_or_else(|| Error::protocol(role, ErrorCode::UnknownSession, "no delete in progress"))?;
                if pending.user != user {
                    return Err(Error::protocol(role, ErrorCode::UnknownSession, "delete belongs to another user"));
                }
                let searched: HashSet<RecordId> = pending.il.iter().copied().collect();
                if let Some((id, _)) = updates.iter().find(|(id, _)| !searched.contains(id)) {
                    return Err(Error::protocol(
                        role,
                        ErrorCode::UnknownId,
                        format!("record {id} was not searched by this delete"),
                    ));
                }
                self.sss.apply_tags(updates)?;
                self.start_shuffle(session, pending.il, true)
            }
            Message::ShuffleReq {
                session,
                target: ShuffleTarget::Ids(ref ids),
            } => {
                expect_from(role, &env, &[Party::Iws])?;
                self.start_shuffle(session, ids.clone(), false)
            }
            Message::ShuffledRecords { session, ref records } => {
                expect_from(role, &env, &[Party::Rss])?;
                let il = self
                    .shuffles
                    .remove(&session)
                    .ok_or_else(|| Error::protocol(role, ErrorCode::UnknownSession, "no shuffle in progress"))?;
                let mut expected = il;
                expected.sort_unstable();
                let ids: Vec<RecordId> = records.iter().map(|(id, _)| *id).collect();
                let mut got = ids.clone();
                got.sort_unstable();
                if got != expected {
                    return Err(Error::protocol(role, ErrorCode::SizeMismatch, "shuffled ids differ from the searched ids"));
                }
                let recs: Vec<EncryptedRecord> = records.iter().map(|(_, r)| r.clone()).collect();
                self.sss.apply_shuffle(recs, &ids)?;
                Ok(vec![Self::env(Party::User, Message::Ack { session, groups: vec![] })])
            }
            Message::InsertRecords {
                session,
                user,
                ref records,
            } => {
                expect_from(role, &env, &[Party::User])?;
                self.sss.check_user(user)?;
                let ids = self.sss.append(records.clone())?;
                Ok(vec![Self::env(Party::Iws, Message::InsertIds { session, ids })])
            }
            Message::Revoke { user } => {
                expect_from(role, &env, &[Party::Admin])?;
                self.sss.revoke(user);
                Ok(vec![Self::env(Party::User, Message::Ack { session: 0, groups: vec![] })])
            }
            _ => Err(unexpected(role, &env)),
        }
    }
}

struct PendingInsert {
    user: UserId,
    entries: Vec<IndexEntry>,
    metas: Vec<(GroupKey, Vec<u8>)>,
}

pub struct IwsService {
    iws: Iws,
    served: HashMap<SessionId, Vec<RecordId>>,
    inserts: HashMap<SessionId, PendingInsert>,
    early_ids: HashMap<SessionId, Vec<RecordId>>,
}

impl IwsService {
    pub fn new(iws: Iws) -> Self {
        IwsService {
            iws,
            served: HashMap::new(),
            inserts: HashMap::new(),
            early_ids: HashMap::new(),
        }
    }

    pub fn iws(&self) -> &Iws {
        &self.iws
    }

    pub fn iws_mut(&mut self) -> &mut Iws {
        &mut self.iws
    }

    fn env(to: Party, msg: Message) -> Envelope {
        Envelope::new(Party::Iws, to, msg)
    }

    fn shuffle_data(&mut self, session: SessionId, il: &[RecordId]) -> Result<Envelope> {
        let plan = self.iws.pre_shuffle(il)?;
        Ok(Self::env(
            Party::Rss,
            Message::ShuffleData {
                session,
                il_prime: plan.il_prime,
                nn: plan.nn,
            },
        ))
    }

    fn try_register(&mut self, session: SessionId) -> Result<Vec<Envelope>> {
        if !(self.inserts.contains_key(&session) && self.early_ids.contains_key(&session)) {
            return Ok(vec![]);
        }
        let p = self.inserts.remove(&session).unwrap();
        let ids = self.early_ids.remove(&session).unwrap();
        let groups = self.iws.register_insert(p.user, &p.entries, &ids, &p.metas)?;
        Ok(vec![Self::env(Party::User, Message::Ack { session, groups })])
    }
}

impl Service for IwsService {
    fn role(&self) -> Party {
        Party::Iws
    }

    fn handle(&mut self, env: Envelope) -> Result<Vec<Envelope>> {
        let role = Party::Iws;
        match env.msg {
            Message::NonceReq {
                session,
                user,
                field,
                ref eta,
                group,
            } => {
                expect_from(role, &env, &[Party::User])?;
                let out = self.iws.nonce_blind(user, field, eta, group)?;
                self.served.insert(session, out.il.clone());
                Ok(vec![Self::env(
                    Party::Sss,
                    Message::WitnessSet {
                        session,
                        il: out.il,
                        en: out.en,
                    },
                )])
            }
            Message::ShuffleReq {
                session,
                target: ShuffleTarget::Ids(ref ids),
            } => {
                expect_from(role, &env, &[Party::Sss])?;
                let served = self
                    .served
                    .remove(&session)
                    .ok_or_else(|| Error::protocol(role, ErrorCode::UnknownSession, "no witness set was served"))?;
                if &served != ids {
                    return Err(Error::protocol(role, ErrorCode::SizeMismatch, "shuffle ids differ from the served list"));
                }
                Ok(vec![self.shuffle_data(session, ids)?])
            }
            Message::ShuffleReq {
                session,
                target: ShuffleTarget::Group(key),
            } => {
                expect_from(role, &env, &[Party::User])?;
                let il = self
                    .iws
                    .resolve_il(&key)
                    .ok_or_else(|| Error::protocol(role, ErrorCode::UnknownId, format!("no group {key}")))?
                    .to_vec();
                if il.is_empty() {
                    return Ok(vec![Self::env(Party::User, Message::Ack { session, groups: vec![] })]);
                }
                let data = self.shuffle_data(session, &il)?;
                Ok(vec![
                    data,
                    Self::env(
                        Party::Sss,
                        Message::ShuffleReq {
                            session,
                            target: ShuffleTarget::Ids(il),
                        },
                    ),
                ])
            }
            Message::MetaFetch {
                session,
                user,
                field,
                group,
            } => {
                expect_from(role, &env, &[Party::User])?;
                let (key, meta_ct) = self.iws.fetch_group_meta(user, field, group)?;
                Ok(vec![Self::env(Party::User, Message::MetaReply { session, key, meta_ct })])
            }
            Message::InsertIndex {
                session,
                user,
                ref entries,
                ref metas,
            } => {
                expect_from(role, &env, &[Party::User])?;
                self.iws.check_user(user)?;
                self.inserts.insert(
                    session,
                    PendingInsert {
                        user,
                        entries: entries.clone(),
                        metas: metas.clone(),
                    },
                );
                self.try_register(session)
            }
            Message::InsertIds { session, ref ids } => {
                expect_from(role, &env, &[Party::Sss])?;
                self.early_ids.insert(session, ids.clone());
                self.try_register(session)
            }
            Message::Revoke { user } => {
                expect_from(role, &env, &[Party::Admin])?;
                self.iws.revoke(user);
                Ok(vec![Self::env(Party::User, Message::Ack { session: 0, groups: vec![] })])
            }
            _ => Err(unexpected(role, &env)),
        }
    }
}

/// Buffers the two halves of each shuffle job; nothing survives a job.
pub struct RssService {
    params: SchemeParams,
    records: HashMap<SessionId, Vec<(RecordId, EncryptedRecord)>>,
    plans: HashMap<SessionId, (Vec<RecordId>, Vec<(RecordId, Vec<u8>)>)>,
}

impl RssService {
    pub fn new(params: SchemeParams) -> Self {
        RssService {
            params,
            records: HashMap::new(),
            plans: HashMap::new(),
        }
    }

    pub fn pending_jobs(&self) -> usize {
        self.records.len() + self.plans.len()
    }

    fn try_shuffle(&mut self, session: SessionId) -> Result<Vec<Envelope>> {
        if !(self.records.contains_key(&session) && self.plans.contains_key(&session)) {
            return Ok(vec![]);
        }
        let ercds = self.records.remove(&session).unwrap();
        let (il_prime, nn) = self.plans.remove(&session).unwrap();
        let records = rss::shuffle(ShuffleJob { ercds, il_prime, nn }, &self.params)?;
        Ok(vec![Envelope::new(
            Party::Rss,
            Party::Sss,
            Message::ShuffledRecords { session, records },
        )])
    }
}

impl Service for RssService {
    fn role(&self) -> Party {
        Party::Rss
    }

    fn handle(&mut self, env: Envelope) -> Result<Vec<Envelope>> {
        let role = Party::Rss;
        match env.msg {
            Message::ShuffleRecords { session, ref records } => {
                expect_from(role, &env, &[Party::Sss])?;
                self.records.insert(session, records.clone());
                self.try_shuffle(session)
            }
            Message::ShuffleData {
                session,
                ref il_prime,
                ref nn,
            } => {
                expect_from(role, &env, &[Party::Iws])?;
                self.plans.insert(session, (il_prime.clone(), nn.clone()));
                self.try_shuffle(session)
            }
            _ => Err(unexpected(role, &env)),
        }
    }
}
