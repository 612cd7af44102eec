//! User-side orchestration of the select, insert and delete flows.
//!
//! Every operation runs the bus to quiescence before returning, so all
//! phases of one operation (including its shuffle) finish before the next
//! operation starts.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::client::{Client, SearchedTag};
use crate::error::{Error, ErrorCode, Result};
use crate::iws::IndexEntry;
use crate::model::{GroupKey, Party, Query, QueryType, Record, RecordId, UserId};

use super::bus::{Bus, Endpoints};
use super::isolation::{IsolationMonitor, IsolationReport};
use super::message::{Envelope, Message, SessionId, ShuffleTarget};

#[derive(Debug, Clone, Default)]
pub struct SelectTrace {
    pub rows: Vec<Record>,
    /// Size of the search result, dummies included.
    pub sr_len: usize,
    pub dummies: usize,
    pub dropped: usize,
    /// Positions of the returned records at search time.
    pub ids: Vec<RecordId>,
    pub shuffled: bool,
}

#[derive(Debug, Clone, Default)]
pub struct InsertTrace {
    pub w: usize,
    pub gammas: Vec<usize>,
    pub dummies: Vec<Record>,
    pub touched: Vec<GroupKey>,
}

#[derive(Debug, Clone, Default)]
pub struct DeleteTrace {
    /// Real rows that matched and were turned into dummies.
    pub deleted: usize,
    pub matched: usize,
    pub searched: usize,
}

pub struct Deployment<E> {
    client: Client,
    user: UserId,
    bus: Bus<E>,
    rng: ChaCha20Rng,
    next_session: SessionId,
    monitor: Option<IsolationMonitor>,
}

fn find_error(inbox: &[Envelope]) -> Option<Error> {
    inbox.iter().find_map(|env| match &env.msg {
        Message::Error { role, code, detail, .. } => Some(Error::protocol(*role, *code, detail.clone())),
        _ => None,
    })
}

fn unexpected(detail: &str) -> Error {
    Error::protocol(Party::User, ErrorCode::UnexpectedMessage, detail)
}

impl<E: Endpoints> Deployment<E> {
    pub fn new(client: Client, user: UserId, endpoints: E) -> Self {
        Deployment {
            client,
            user,
            bus: Bus::new(endpoints),
            rng: ChaCha20Rng::from_entropy(),
            next_session: 1,
            monitor: None,
        }
    }

    pub fn with_rng_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        self
    }

    /// Records every frame and the role secrets for `isolation_audit`.
    pub fn with_monitor(mut self) -> Self {
        self.bus.set_logging(true);
        let mut m = IsolationMonitor::new();
        if let Some(snap) = self.bus.endpoints().snapshot() {
            m.observe_snapshot(&snap, self.client.params());
        }
        self.monitor = Some(m);
        self
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn set_user(&mut self, user: UserId) {
        self.user = user;
    }

    pub fn bus(&self) -> &Bus<E> {
        &self.bus
    }

    pub fn endpoints(&self) -> &E {
        self.bus.endpoints()
    }

    pub fn endpoints_mut(&mut self) -> &mut E {
        self.bus.endpoints_mut()
    }

    pub fn into_endpoints(self) -> E {
        self.bus.into_endpoints()
    }

    fn session(&mut self) -> SessionId {
        let s = self.next_session;
        self.next_session += 1;
        s
    }

    fn exchange(&mut self, out: Vec<Envelope>) -> Result<Vec<Envelope>> {
        let inbox = self.bus.run(out)?;
        if let Some(m) = self.monitor.as_mut() {
            if let Some(snap) = self.bus.endpoints().snapshot() {
                m.observe_snapshot(&snap, self.client.params());
            }
        }
        match find_error(&inbox) {
            Some(e) => Err(e),
            None => Ok(inbox),
        }
    }

    fn search(&mut self, q: &Query) -> Result<(SessionId, Vec<u8>, Vec<Envelope>)> {
        let qs = self.client.query_enc(q, &mut self.rng)?;
        let session = self.session();
        let user = self.user;
        let inbox = self.exchange(vec![
            Envelope::new(
                Party::User,
                Party::Sss,
                Message::Query {
                    session,
                    user,
                    eq: qs.eq.clone(),
                },
            ),
            Envelope::new(
                Party::User,
                Party::Iws,
                Message::NonceReq {
                    session,
                    user,
                    field: q.field,
                    eta: qs.eta.clone(),
                    group: qs.group,
                },
            ),
        ])?;
        Ok((session, qs.eta, inbox))
    }

    pub fn select(&mut self, q: &Query) -> Result<Vec<Record>> {
        Ok(self.select_traced(q)?.rows)
    }

    pub fn select_traced(&mut self, q: &Query) -> Result<SelectTrace> {
        if q.qtype != QueryType::Select {
            return Err(Error::param("select requires a select query"));
        }
        let (session, eta, inbox) = self.search(q)?;
        let sr = inbox
            .iter()
            .find_map(|env| match &env.msg {
                Message::SearchResult { session: s, sr, .. } if *s == session => Some(sr.clone()),
                _ => None,
            })
            .ok_or_else(|| unexpected("no search result"))?;
        let shuffled = inbox
            .iter()
            .any(|env| matches!(env.msg, Message::Ack { session: s, .. } if s == session));
        let dec = self.client.rcd_dec(&sr, &eta)?;
        Ok(SelectTrace {
            sr_len: sr.len(),
            ids: sr.entries.iter().map(|h| h.id).collect(),
            rows: dec.rows,
            dummies: dec.dummies,
            dropped: dec.dropped,
            shuffled,
        })
    }

    pub fn insert(&mut self, rcd: &Record) -> Result<InsertTrace> {
        let rcd = Record::real(rcd.elements.clone());
        rcd.validate(self.client.params())?;
        let user = self.user;
        let session = self.session();
        let mut fetches = Vec::with_capacity(rcd.elements.len());
        for (field, e) in rcd.elements.iter().enumerate() {
            fetches.push(Envelope::new(
                Party::User,
                Party::Iws,
                Message::MetaFetch {
                    session,
                    user,
                    field,
                    group: self.client.group_of(e)?,
                },
            ));
        }
        let inbox = self.exchange(fetches)?;
        let mut metas: Vec<(GroupKey, Vec<u8>)> = inbox
            .into_iter()
            .filter_map(|env| match env.msg {
                Message::MetaReply { key, meta_ct, .. } => Some((key, meta_ct)),
                _ => None,
            })
            .collect();
        metas.sort_by_key(|(k, _)| k.field);
        if metas.iter().enumerate().any(|(f, (k, _))| k.field != f) || metas.len() != rcd.elements.len() {
            return Err(unexpected("group metadata replies do not cover every field"));
        }

        let bundle = self.client.build_insert(&rcd, &metas, &mut self.rng)?;
        let session = self.session();
        let entries = bundle
            .rows
            .iter()
            .map(|r| IndexEntry {
                nonce: r.nonce.clone(),
                groups: r.groups.clone(),
            })
            .collect();
        let records = bundle.rows.iter().map(|r| r.record.clone()).collect();
        let inbox = self.exchange(vec![
            Envelope::new(
                Party::User,
                Party::Iws,
                Message::InsertIndex {
                    session,
                    user,
                    entries,
                    metas: bundle.updated_meta.clone(),
                },
            ),
            Envelope::new(Party::User, Party::Sss, Message::InsertRecords { session, user, records }),
        ])?;
        let touched = inbox
            .into_iter()
            .find_map(|env| match env.msg {
                Message::Ack { session: s, groups } if s == session => Some(groups),
                _ => None,
            })
            .ok_or_else(|| unexpected("insert was not acknowledged"))?;

        // One group at a time: groups of different fields share positions.
        for key in &touched {
            self.shuffle_group(*key)?;
        }
        Ok(InsertTrace {
            w: bundle.w,
            gammas: bundle.gammas,
            dummies: bundle.dummies,
            touched,
        })
    }

    /// Shuffles one group outside any query.
    pub fn shuffle_group(&mut self, key: GroupKey) -> Result<()> {
        let session = self.session();
        self.exchange(vec![Envelope::new(
            Party::User,
            Party::Iws,
            Message::ShuffleReq {
                session,
                target: ShuffleTarget::Group(key),
            },
        )])?;
        Ok(())
    }

    pub fn delete(&mut self, q: &Query) -> Result<DeleteTrace> {
        let q = Query::delete(q.field, q.element.clone());
        let (session, eta, inbox) = self.search(&q)?;
        let (sr, view) = inbox
            .into_iter()
            .find_map(|env| match env.msg {
                Message::SearchResult {
                    session: s,
                    sr,
                    delete: Some(view),
                } if s == session => Some((sr, view)),
                _ => None,
            })
            .ok_or_else(|| unexpected("no delete view"))?;
        let deleted = self.client.rcd_dec(&sr, &eta)?.rows.len();
        let searched: Vec<SearchedTag> = view
            .searched
            .iter()
            .map(|(id, tag, t)| SearchedTag {
                id: *id,
                tag: tag.clone(),
                t: t.clone(),
            })
            .collect();
        let updates = self
            .client
            .rebuild_delete_tags(&view.matched, &searched, &eta, &mut self.rng)?;
        let user = self.user;
        self.exchange(vec![Envelope::new(
            Party::User,
            Party::Sss,
            Message::DeleteTags { session, user, updates },
        )])?;
        Ok(DeleteTrace {
            deleted,
            matched: view.matched.len(),
            searched: searched.len(),
        })
    }

    /// Adds `user` to the revocation lists of the storage and index services.
    pub fn revoke(&mut self, user: UserId) -> Result<()> {
        self.exchange(vec![
            Envelope::new(Party::Admin, Party::Sss, Message::Revoke { user }),
            Envelope::new(Party::Admin, Party::Iws, Message::Revoke { user }),
        ])?;
        Ok(())
    }

    /// Route and secret checks over everything the bus delivered so far.
    /// Requires `with_monitor`.
    pub fn isolation_audit(&mut self) -> Result<IsolationReport> {
        let m = self
            .monitor
            .as_mut()
            .ok_or_else(|| Error::param("isolation audit needs a monitored deployment"))?;
        m.observe_log(self.bus.log());
        Ok(m.audit(self.bus.log()))
    }
}

