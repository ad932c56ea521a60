//! Client side of the server protocol, used by donors and the gateway.

use std::io::BufReader;
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::Duration;

use rand::RngCore;
use trendscope_core::dp::{BudgetView, ChargeReceipt};
use trendscope_core::engine::{assemble, PartyReply};
use trendscope_core::{Epoch, QueryRequest, QueryResponse, ShareBundle};

use crate::codec::encode_bundle;
use crate::protocol::{
    AlertView, ErrorBody, Health, Hello, StatusRequest, StatusResponse, SubmitAck,
};
use crate::wire::{read_frame, write_frame, Frame, FrameKind, WireError};
use crate::NodeError;

/// One client connection to one server.
pub struct Connection {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    addr: SocketAddr,
}

impl Connection {
    pub fn open(addr: SocketAddr, timeout: Duration) -> Result<Self, NodeError> {
        let unreachable = |e: std::io::Error| NodeError::Unreachable(format!("{addr}: {e}"));
        let mut writer = TcpStream::connect_timeout(&addr, timeout).map_err(unreachable)?;
        writer.set_nodelay(true).map_err(unreachable)?;
        writer
            .set_read_timeout(Some(timeout))
            .map_err(unreachable)?;
        let reader = BufReader::new(writer.try_clone().map_err(unreachable)?);
        write_frame(
            &mut writer,
            &Frame::json(FrameKind::Handshake, 0, &Hello::Client),
        )?;
        let mut conn = Connection {
            writer,
            reader,
            addr,
        };
        conn.expect(FrameKind::Ack)?;
        Ok(conn)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<(), NodeError> {
        self.writer.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), NodeError> {
        write_frame(&mut self.writer, frame).map_err(|e| self.transport(e))
    }

    fn transport(&self, e: WireError) -> NodeError {
        NodeError::Unreachable(format!("{}: {e}", self.addr))
    }

    /// Reads the next frame, turning an `Error` frame into [`NodeError::Remote`].
    pub fn expect(&mut self, kind: FrameKind) -> Result<Frame, NodeError> {
        let f = read_frame(&mut self.reader).map_err(|e| self.transport(e))?;
        match f.kind {
            k if k == kind => Ok(f),
            FrameKind::Error => Err(f.parse_json::<ErrorBody>()?.into()),
            other => Err(WireError::Body(format!("expected {kind:?}, got {other:?}")).into()),
        }
    }

    pub fn submit(&mut self, bundle: &ShareBundle) -> Result<SubmitAck, NodeError> {
        self.send(
            &Frame::new(FrameKind::SubmitShares, 0, encode_bundle(bundle)).with_epoch(bundle.epoch),
        )?;
        Ok(self.expect(FrameKind::Ack)?.parse_json()?)
    }

    pub fn status(&mut self, req: &StatusRequest) -> Result<StatusResponse, NodeError> {
        self.send(&Frame::json(FrameKind::BudgetEvent, 0, req))?;
        Ok(self.expect(FrameKind::BudgetEvent)?.parse_json()?)
    }
}

/// Sends each donation's bundles to their servers over kept-open connections.
pub struct Donor {
    conns: Vec<Connection>,
}

impl Donor {
    pub fn connect(servers: &[SocketAddr], timeout: Duration) -> Result<Self, NodeError> {
        Ok(Donor {
            conns: servers
                .iter()
                .map(|a| Connection::open(*a, timeout))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Submits one bundle per server; `bundles[p]` goes to server `p`.
    pub fn submit(&mut self, bundles: &[ShareBundle]) -> Result<SubmitAck, NodeError> {
        if bundles.len() != self.conns.len() {
            return Err(NodeError::Config(format!(
                "{} bundles for {} servers",
                bundles.len(),
                self.conns.len()
            )));
        }
        let mut ack = None;
        for (c, b) in self.conns.iter_mut().zip(bundles) {
            ack = Some(c.submit(b)?);
        }
        Ok(ack.expect("at least two servers"))
    }
}

/// A query's combined result together with the coordinator's receipts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAnswer {
    pub response: QueryResponse,
    pub receipts: Vec<ChargeReceipt>,
}

/// Talks to every server of a deployment.
#[derive(Clone, Debug)]
pub struct ClusterClient {
    servers: Vec<SocketAddr>,
    timeout: Duration,
}

impl ClusterClient {
    pub fn new(servers: Vec<SocketAddr>, timeout: Duration) -> Self {
        ClusterClient { servers, timeout }
    }

    pub fn servers(&self) -> &[SocketAddr] {
        &self.servers
    }

    /// Sends the request to every server under one fresh session id, then
    /// unmasks and checks their reply shares.
    pub fn query(&self, req: &QueryRequest) -> Result<ClusterAnswer, NodeError> {
        let session = rand::rng().next_u64() | 1;
        let frame = Frame::json(FrameKind::QueryRequest, session, req);
        // Connect everywhere first so that an unreachable server fails the
        // query before any server starts waiting for it.
        let mut conns = self
            .servers
            .iter()
            .map(|a| Connection::open(*a, self.timeout))
            .collect::<Result<Vec<_>, _>>()?;
        // A query may legitimately take a while; allow generous reads.
        let patience = self.timeout * 8;
        let replies: Vec<Result<PartyReply, NodeError>> = thread::scope(|s| {
            let handles: Vec<_> = conns
                .iter_mut()
                .map(|c| {
                    let frame = frame.clone();
                    s.spawn(move || {
                        c.set_timeout(Some(patience))?;
                        c.send(&frame)?;
                        let f = c.expect(FrameKind::QueryResponseShare)?;
                        if f.session != session {
                            return Err(WireError::Body("reply for another session".into()).into());
                        }
                        Ok(f.parse_json::<PartyReply>()?)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(NodeError::Unreachable("client thread panicked".into()))
                    })
                })
                .collect()
        });
        let mut ok = Vec::with_capacity(replies.len());
        let mut first_err: Option<NodeError> = None;
        for r in replies {
            match r {
                Ok(reply) => ok.push(reply),
                // Prefer the most specific error: a server's own verdict
                // over a transport failure.
                Err(e) => {
                    if first_err
                        .as_ref()
                        .is_none_or(|f| f.is_transport() && !e.is_transport())
                    {
                        first_err = Some(e);
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let receipts = ok
            .iter()
            .find(|r| r.party_id == 0)
            .map(|r| r.receipts.clone())
            .unwrap_or_default();
        Ok(ClusterAnswer {
            response: assemble(&ok)?,
            receipts,
        })
    }

    fn status(&self, req: StatusRequest) -> Result<StatusResponse, NodeError> {
        let mut c = Connection::open(self.servers[0], self.timeout)?;
        c.status(&req)
    }

    pub fn budget(&self, epochs: Option<Vec<Epoch>>) -> Result<BudgetView, NodeError> {
        match self.status(StatusRequest::Budget { epochs })? {
            StatusResponse::Budget(v) => Ok(v),
            other => Err(WireError::Body(format!("unexpected status answer {other:?}")).into()),
        }
    }

    pub fn alerts(&self) -> Result<Vec<AlertView>, NodeError> {
        match self.status(StatusRequest::Alerts)? {
            StatusResponse::Alerts { alerts } => Ok(alerts),
            other => Err(WireError::Body(format!("unexpected status answer {other:?}")).into()),
        }
    }

    pub fn health(&self, server: usize) -> Result<Health, NodeError> {
        let mut c = Connection::open(self.servers[server], self.timeout)?;
        match c.status(&StatusRequest::Health)? {
            StatusResponse::Health(h) => Ok(h),
            other => Err(WireError::Body(format!("unexpected status answer {other:?}")).into()),
        }
    }
}
