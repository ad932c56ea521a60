//! Authenticated-by-config TCP links between servers and the MPC channel
//! built on them.

use std::net::{Shutdown, TcpStream};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{de::DeserializeOwned, Serialize};
use trendscope_core::mpc::Channel;
use trendscope_core::MpcError;

use crate::protocol::{ErrorBody, ErrorCode};
use crate::wire::{pack_u128, read_frame, unpack_u128, write_frame, Frame, FrameKind, WireError};

/// One peer connection. Writes go through a dedicated thread so that two
/// servers sending large batches at once cannot deadlock on full buffers.
pub struct Link {
    tx: Sender<Frame>,
    rx: Receiver<Result<Frame, String>>,
    stream: TcpStream,
}

impl Link {
    pub fn spawn(stream: TcpStream) -> std::io::Result<Link> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(None)?;
        let (tx, out_rx) = unbounded::<Frame>();
        let (in_tx, rx) = unbounded();
        let mut writer = stream.try_clone()?;
        thread::spawn(move || {
            for f in out_rx {
                if write_frame(&mut writer, &f).is_err() {
                    let _ = writer.shutdown(Shutdown::Both);
                    break;
                }
            }
        });
        let mut reader = std::io::BufReader::new(stream.try_clone()?);
        thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(f) => {
                    if in_tx.send(Ok(f)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = in_tx.send(Err(e.to_string()));
                    break;
                }
            }
        });
        Ok(Link { tx, rx, stream })
    }

    pub fn send(&self, frame: Frame) -> Result<(), MpcError> {
        self.tx
            .send(frame)
            .map_err(|_| MpcError::PeerUnreachable("link writer stopped".into()))
    }

    pub fn recv(&self, timeout: Duration) -> Result<Frame, LinkError> {
        match self.rx.recv_timeout(timeout) {
            Ok(Ok(f)) => Ok(f),
            Ok(Err(e)) => Err(LinkError::Closed(e)),
            Err(RecvTimeoutError::Timeout) => Err(LinkError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::Closed("reader stopped".into())),
        }
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkError {
    Timeout,
    Closed(String),
}

/// All links of one server, indexed by party id. Used as the MPC channel
/// for the current session: frames from other sessions are discarded.
pub struct Mesh {
    id: usize,
    links: Vec<Option<Link>>,
    session: u64,
    timeout: Duration,
}

impl Mesh {
    pub fn new(id: usize, n: usize, timeout: Duration) -> Self {
        Mesh {
            id,
            links: (0..n).map(|_| None).collect(),
            session: 0,
            timeout,
        }
    }

    pub fn install(&mut self, party: usize, link: Link) {
        self.links[party] = Some(link);
    }

    pub fn drop_link(&mut self, party: usize) {
        self.links[party] = None;
    }

    pub fn has_link(&self, party: usize) -> bool {
        self.links[party].is_some()
    }

    pub fn connected(&self) -> usize {
        self.links.iter().filter(|l| l.is_some()).count()
    }

    pub fn complete(&self) -> bool {
        (0..self.links.len()).all(|p| p == self.id || self.links[p].is_some())
    }

    pub fn begin(&mut self, session: u64) {
        self.session = session;
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn link(&self, party: usize) -> Option<&Link> {
        self.links[party].as_ref()
    }

    fn peers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.links.len()).filter(move |p| *p != self.id)
    }

    pub fn send_to(&self, party: usize, frame: Frame) -> Result<(), MpcError> {
        match &self.links[party] {
            Some(l) => l.send(frame),
            None => Err(MpcError::PeerUnreachable(format!(
                "no link to party {party}"
            ))),
        }
    }

    pub fn broadcast(&self, frame: &Frame) -> Result<(), MpcError> {
        self.peers()
            .try_for_each(|p| self.send_to(p, frame.clone()))
    }

    /// Best-effort notice to every peer that this session is over.
    pub fn abort(&self, body: &ErrorBody) {
        let f = Frame::json(FrameKind::Error, self.session, body);
        for p in self.peers() {
            let _ = self.send_to(p, f.clone());
        }
    }

    /// Next frame of the current session from `party`, skipping stale ones.
    pub fn recv_from(&mut self, party: usize, kind: FrameKind) -> Result<Frame, MpcError> {
        loop {
            let link = self.links[party]
                .as_ref()
                .ok_or_else(|| MpcError::PeerUnreachable(format!("no link to party {party}")))?;
            let frame = match link.recv(self.timeout) {
                Ok(f) => f,
                Err(LinkError::Timeout) => {
                    return Err(MpcError::PeerUnreachable(format!(
                        "party {party} timed out"
                    )));
                }
                Err(LinkError::Closed(e)) => {
                    self.links[party] = None;
                    return Err(MpcError::PeerUnreachable(format!("party {party}: {e}")));
                }
            };
            if frame.session != self.session {
                continue;
            }
            if frame.kind == FrameKind::Error {
                let body: ErrorBody = frame
                    .parse_json()
                    .unwrap_or_else(|e| ErrorBody::new(ErrorCode::Internal, e.to_string()));
                return Err(match body.code {
                    ErrorCode::IntegrityFailure => {
                        MpcError::IntegrityFailure(format!("party {party}: {}", body.message))
                    }
                    _ => MpcError::PeerUnreachable(format!(
                        "party {party} aborted: {}",
                        body.message
                    )),
                });
            }
            if frame.kind != kind {
                return Err(MpcError::Malformed(format!(
                    "party {party} sent {:?}, expected {kind:?}",
                    frame.kind
                )));
            }
            return Ok(frame);
        }
    }

    /// All-to-all exchange of JSON values; entry `p` is party `p`'s value.
    pub fn exchange_json<T: Serialize + DeserializeOwned + Clone>(
        &mut self,
        kind: FrameKind,
        mine: &T,
    ) -> Result<Vec<T>, MpcError> {
        self.broadcast(&Frame::json(kind, self.session, mine))?;
        let mut out = Vec::with_capacity(self.links.len());
        for p in 0..self.links.len() {
            if p == self.id {
                out.push(mine.clone());
            } else {
                let f = self.recv_from(p, kind)?;
                out.push(
                    f.parse_json()
                        .map_err(|e: WireError| MpcError::Malformed(e.to_string()))?,
                );
            }
        }
        Ok(out)
    }
}

impl Channel for Mesh {
    fn party_id(&self) -> usize {
        self.id
    }

    fn n_parties(&self) -> usize {
        self.links.len()
    }

    fn exchange(&mut self, mine: &[u128]) -> Result<Vec<Vec<u128>>, MpcError> {
        self.broadcast(&Frame::new(
            FrameKind::ShareExchange,
            self.session,
            pack_u128(mine),
        ))?;
        let mut out = Vec::with_capacity(self.links.len());
        for p in 0..self.links.len() {
            if p == self.id {
                out.push(mine.to_vec());
            } else {
                let f = self.recv_from(p, FrameKind::ShareExchange)?;
                out.push(unpack_u128(&f.body).map_err(|e| MpcError::Malformed(e.to_string()))?);
            }
        }
        Ok(out)
    }
}
