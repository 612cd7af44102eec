//! Frame routing between the user and the three roles.

use std::collections::VecDeque;

use crate::admin::Stores;
use crate::crypto::SchemeParams;
use crate::error::{Error, Result};
use crate::iws::Iws;
use crate::model::{EncryptedRecord, NonceEntry, Party};
use crate::sss::Sss;

use super::message::Envelope;
use super::service::{IwsService, RssService, Service, SssService};

/// Deliveries allowed for one exchange before the bus assumes a loop.
const MAX_DELIVERIES: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct LoggedFrame {
    pub from: Party,
    pub to: Party,
    pub msg_type: u8,
    pub bytes: Vec<u8>,
}

/// Role state visible to an in-process harness, used to seed the isolation
/// monitor with the secrets each role must never receive.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub edb: Vec<EncryptedRecord>,
    pub ndb: Vec<NonceEntry>,
    pub s2: Vec<u8>,
}

pub trait Endpoints {
    /// Hands one encoded frame to role `to` and returns the frames it emits.
    fn deliver(&mut self, to: Party, frame: &[u8]) -> Result<Vec<Vec<u8>>>;

    fn snapshot(&self) -> Option<Snapshot> {
        None
    }
}

fn route(frame: &[u8]) -> Result<(Party, Party, u8)> {
    if frame.len() < 7 {
        return Err(Error::Format("frame too short to route".into()));
    }
    let party = |c: u8| Party::from_code(c).ok_or_else(|| Error::Format(format!("unknown role code {c}")));
    Ok((party(frame[5])?, party(frame[6])?, frame[4]))
}

/// Runs a service on an encoded frame, turning role errors into error
/// frames addressed to the user.
pub fn dispatch<S: Service + ?Sized>(service: &mut S, frame: &[u8]) -> Vec<Vec<u8>> {
    let role = service.role();
    let env = match Envelope::decode(frame) {
        Ok(env) => env,
        Err(e) => return vec![Envelope::error(role, 0, &e).encode()],
    };
    let session = env.msg.session().unwrap_or(0);
    if env.to != role {
        let e = Error::protocol(
            role,
            crate::error::ErrorCode::UnexpectedMessage,
            format!("frame addressed to {}", env.to),
        );
        return vec![Envelope::error(role, session, &e).encode()];
    }
    match service.handle(env) {
        Ok(out) => out.iter().map(Envelope::encode).collect(),
        Err(e) => {
            log::debug!("{role} rejected session {session}: {e}");
            vec![Envelope::error(role, session, &e).encode()]
        }
    }
}

pub struct InProc {
    pub sss: SssService,
    pub iws: IwsService,
    pub rss: RssService,
}

impl InProc {
    pub fn new(params: &SchemeParams, s2: &[u8], stores: Stores) -> Self {
        InProc {
            sss: SssService::new(Sss::new(params.clone(), stores.edb)),
            iws: IwsService::new(Iws::new(params.clone(), s2, stores.gdb, stores.ndb)),
            rss: RssService::new(params.clone()),
        }
    }

    pub fn with_rng_seed(params: &SchemeParams, s2: &[u8], stores: Stores, seed: u64) -> Self {
        InProc {
            sss: SssService::new(Sss::new(params.clone(), stores.edb)),
            iws: IwsService::new(Iws::new(params.clone(), s2, stores.gdb, stores.ndb).with_rng_seed(seed)),
            rss: RssService::new(params.clone()),
        }
    }

    pub fn stores(&self) -> Stores {
        Stores {
            edb: self.sss.sss().edb().to_vec(),
            ndb: self.iws.iws().ndb().to_vec(),
            gdb: self.iws.iws().gdb().clone(),
        }
    }
}

impl Endpoints for InProc {
    fn deliver(&mut self, to: Party, frame: &[u8]) -> Result<Vec<Vec<u8>>> {
        Ok(match to {
            Party::Sss => dispatch(&mut self.sss, frame),
            Party::Iws => dispatch(&mut self.iws, frame),
            Party::Rss => dispatch(&mut self.rss, frame),
            other => return Err(Error::Format(format!("{other} is not a service role"))),
        })
    }

    fn snapshot(&self) -> Option<Snapshot> {
        Some(Snapshot {
            edb: self.sss.sss().edb().to_vec(),
            ndb: self.iws.iws().ndb().to_vec(),
            s2: self.iws.iws().s2().to_vec(),
        })
    }
}

pub struct Bus<E> {
    endpoints: E,
    log: Option<Vec<LoggedFrame>>,
    deliveries: u64,
}

impl<E: Endpoints> Bus<E> {
    pub fn new(endpoints: E) -> Self {
        Bus {
            endpoints,
            log: None,
            deliveries: 0,
        }
    }

    pub fn set_logging(&mut self, on: bool) {
        self.log = if on { Some(self.log.take().unwrap_or_default()) } else { None };
    }

    pub fn log(&self) -> &[LoggedFrame] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn deliveries(&self) -> u64 {
        self.deliveries
    }

    pub fn endpoints(&self) -> &E {
        &self.endpoints
    }

    pub fn endpoints_mut(&mut self) -> &mut E {
        &mut self.endpoints
    }

    pub fn into_endpoints(self) -> E {
        self.endpoints
    }

    /// Delivers `initial` and everything it triggers, in FIFO order, until
    /// no frame is in flight. Returns the envelopes addressed to the user.
    pub fn run(&mut self, initial: Vec<Envelope>) -> Result<Vec<Envelope>> {
        let mut queue: VecDeque<Vec<u8>> = initial.iter().map(Envelope::encode).collect();
        let mut inbox = Vec::new();
        let mut budget = MAX_DELIVERIES;
        while let Some(frame) = queue.pop_front() {
            let (from, to, msg_type) = route(&frame)?;
            log::trace!("{from} -> {to}: {} ({} bytes)", super::message::type_name(msg_type), frame.len());
            if let Some(log) = self.log.as_mut() {
                log.push(LoggedFrame {
                    from,
                    to,
                    msg_type,
                    bytes: frame.clone(),
                });
            }
            if to == Party::User {
                inbox.push(Envelope::decode(&frame)?);
                continue;
            }
            budget = budget
                .checked_sub(1)
                .ok_or_else(|| Error::Format("message loop exceeded delivery budget".into()))?;
            self.deliveries += 1;
            queue.extend(self.endpoints.deliver(to, &frame)?);
        }
        Ok(inbox)
    }
}
