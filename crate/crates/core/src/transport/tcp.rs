//! Socket transport. Each role listens on its own address; the user-side
//! bus keeps one connection per role and relays role-to-role frames.

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::model::Party;

use super::bus::{dispatch, Endpoints};
use super::message::{decode_batch, encode_batch, read_frame, write_frame};
use super::service::Service;

pub struct TcpEndpoints {
    sss: TcpStream,
    iws: TcpStream,
    rss: TcpStream,
}

fn connect<A: ToSocketAddrs>(addr: A, retry_for: Duration) -> Result<TcpStream> {
    let start = std::time::Instant::now();
    loop {
        match TcpStream::connect(&addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if start.elapsed() >= retry_for => return Err(e.into()),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

impl TcpEndpoints {
    pub fn connect<A: ToSocketAddrs>(sss: A, iws: A, rss: A) -> Result<Self> {
        Self::connect_with_retry(sss, iws, rss, Duration::ZERO)
    }

    /// Retries refused connections until `retry_for` elapses, for services
    /// that are still starting.
    pub fn connect_with_retry<A: ToSocketAddrs>(sss: A, iws: A, rss: A, retry_for: Duration) -> Result<Self> {
        Ok(TcpEndpoints {
            sss: connect(sss, retry_for)?,
            iws: connect(iws, retry_for)?,
            rss: connect(rss, retry_for)?,
        })
    }
}

impl Endpoints for TcpEndpoints {
    fn deliver(&mut self, to: Party, frame: &[u8]) -> Result<Vec<Vec<u8>>> {
        let stream = match to {
            Party::Sss => &mut self.sss,
            Party::Iws => &mut self.iws,
            Party::Rss => &mut self.rss,
            other => return Err(Error::Format(format!("{other} is not a service role"))),
        };
        write_frame(stream, frame)?;
        let reply = read_frame(stream)?.ok_or_else(|| Error::Format(format!("{to} closed the connection")))?;
        decode_batch(&reply)
    }
}

/// Serves `service` on `listener`, one connection at a time. Every inbound
/// frame is answered with one batch frame holding the emitted frames.
/// `after` runs after each handled frame (used for persistence). Returns
/// after `max_connections` connections when a limit is given.
pub fn serve<S, F>(listener: &TcpListener, service: &mut S, max_connections: Option<usize>, mut after: F) -> Result<()>
where
    S: Service,
    F: FnMut(&S) -> Result<()>,
{
    let mut served = 0;
    for conn in listener.incoming() {
        let mut stream = conn?;
        stream.set_nodelay(true)?;
        log::info!("{} accepted connection from {:?}", service.role(), stream.peer_addr().ok());
        loop {
            let frame = match read_frame(&mut stream) {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    log::warn!("{}: dropping connection: {e}", service.role());
                    break;
                }
            };
            let out = dispatch(service, &frame);
            after(service)?;
            if let Err(e) = write_frame(&mut stream, &encode_batch(&out)) {
                log::warn!("{}: reply failed: {e}", service.role());
                break;
            }
        }
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}
