//! Frame carriers (in-process loopback and TCP) and the two session loops
//! that drive a split-training run over them: [`Server::serve`] on the
//! server and [`connect`] on each client.
//!
//! The server runs one reader thread per connection; readers only decode
//! frames and forward them to the round executor over a channel, and the
//! executor alone writes to connections.

mod loopback;
mod tcp;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::protocol::{bye, decode_message, encode_message, Message};
use crate::split::Contribution;
use crate::tensor::Tensor;

pub use loopback::LoopbackHub;

/// Where a session lives.
#[derive(Debug, Clone)]
pub enum Endpoint {
    Loopback(LoopbackHub),
    /// `host:port`; servers may use port 0 for an ephemeral port.
    Tcp(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    /// Client connect, and the wait for a new connection's Hello.
    pub handshake: Duration,
    /// How long the server waits for all clients to register.
    pub accept: Duration,
    /// Longest wait for any single message during training.
    pub round: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            handshake: Duration::from_secs(10),
            accept: Duration::from_secs(60),
            round: Duration::from_secs(60),
        }
    }
}

pub(crate) trait FrameSender: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    fn close(&mut self);
}

pub(crate) trait FrameReceiver: Send {
    /// Blocks for one frame; `None` waits forever.
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>>;
}

pub(crate) struct Link {
    tx: Box<dyn FrameSender>,
    rx: Box<dyn FrameReceiver>,
}

impl Link {
    fn send(&mut self, m: &Message) -> Result<()> {
        self.tx.send_frame(&encode_message(m))
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message> {
        let frame = self.rx.recv_frame(timeout)?;
        Ok(decode_message(&frame)?)
    }
}

pub(crate) trait Listener: Send {
    /// Next incoming connection, or `None` once `timeout` passes.
    fn accept(&mut self, timeout: Duration) -> Result<Option<Link>>;

    fn local_addr(&self) -> Option<SocketAddr> {
        None
    }
}

/// Server-side training logic driven by [`Server::serve`].
pub trait RoundHandler {
    /// All clients are registered; `partition_sizes[id]` is what each announced.
    fn begin(&mut self, partition_sizes: &[u32]) -> Result<()>;

    /// Per-client batch quotas for the next round, or `None` when training is over.
    fn next_quotas(&mut self) -> Result<Option<Vec<u32>>>;

    /// Server forward/backward. Uploads arrive sorted by client id; the result
    /// holds one cut gradient per upload in the same order.
    fn on_activations(&mut self, round: u32, uploads: Vec<Contribution>) -> Result<Vec<Tensor>>;

    /// Aggregates the clients' flattened front gradients (sorted by id) and
    /// returns the updated front parameters to broadcast.
    fn on_front_gradients(&mut self, round: u32, grads: Vec<(u32, Tensor)>) -> Result<Vec<Tensor>>;

    /// Called after the weight broadcast; `Some((loss, accuracy))` is sent
    /// to every client as a Metrics message.
    fn after_round(&mut self, round: u32) -> Result<Option<(f64, f64)>>;
}

/// Client-side training logic driven by [`connect`].
pub trait ClientWorker {
    fn partition_size(&self) -> u32;

    /// Feature maps and labels for the next `quota` local samples.
    fn forward(&mut self, round: u32, quota: usize) -> Result<(Tensor, Tensor)>;

    /// Front gradients for this round's cut gradient, flattened into one
    /// rank-1 tensor. `round_total` is the global batch of the round.
    fn backward(&mut self, round: u32, cut_grad: &Tensor, round_total: usize) -> Result<Tensor>;

    fn sync(&mut self, round: u32, params: Vec<Tensor>) -> Result<()>;

    fn metrics(&mut self, _round: u32, _loss: f64, _accuracy: f64) {}
}

/// A bound server endpoint.
pub struct Server {
    listener: Box<dyn Listener>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeReport {
    pub rounds: u32,
}

struct Event {
    client: u32,
    msg: Result<Message>,
}

struct Session {
    links: BTreeMap<u32, Box<dyn FrameSender>>,
    events: Receiver<Event>,
    round_timeout: Duration,
}

impl Session {
    fn send(&mut self, client: u32, m: &Message) -> Result<()> {
        let frame = encode_message(m);
        let link = self.links.get_mut(&client).expect("registered client");
        link.send_frame(&frame)
            .map_err(|e| Error::Transport(format!("client {client}: {e}")))
    }

    fn broadcast(&mut self, m: &Message) -> Result<()> {
        let ids: Vec<u32> = self.links.keys().copied().collect();
        ids.into_iter().try_for_each(|id| self.send(id, m))
    }

    /// Best-effort goodbye, then drop every connection.
    fn close(&mut self, reason: u32) {
        let frame = encode_message(&Message::Bye { reason });
        for link in self.links.values_mut() {
            let _ = link.send_frame(&frame);
            link.close();
        }
    }

    /// Waits for exactly one message from each of `expected`, passing each to
    /// `accept`, which rejects anything out of place.
    fn gather<T>(&mut self, expected: &[u32], mut accept: impl FnMut(u32, Message) -> Result<T>) -> Result<Vec<(u32, T)>> {
        let mut got: BTreeMap<u32, T> = BTreeMap::new();
        let deadline = Instant::now() + self.round_timeout;
        while got.len() < expected.len() {
            let wait = deadline.saturating_duration_since(Instant::now());
            let ev = match self.events.recv_timeout(wait) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => {
                    let missing: Vec<u32> = expected.iter().filter(|id| !got.contains_key(id)).copied().collect();
                    return Err(Error::Transport(format!("round timed out waiting for clients {missing:?}")));
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Transport("all client readers stopped".into())),
            };
            let msg = ev.msg.map_err(|e| match e {
                Error::Decode(d) => Error::Protocol(format!("client {}: {d}", ev.client)),
                other => Error::Transport(format!("client {} disconnected: {other}", ev.client)),
            })?;
            if let Message::Bye { reason } = msg {
                return Err(Error::Transport(format!("client {} left mid-run (reason {reason})", ev.client)));
            }
            if !expected.contains(&ev.client) || got.contains_key(&ev.client) {
                return Err(Error::Protocol(format!("unexpected {} from client {}", msg.name(), ev.client)));
            }
            let value = accept(ev.client, msg)?;
            got.insert(ev.client, value);
        }
        Ok(got.into_iter().collect())
    }
}

impl Server {
    pub fn bind(endpoint: &Endpoint) -> Result<Server> {
        let listener: Box<dyn Listener> = match endpoint {
            Endpoint::Loopback(hub) => Box::new(hub.bind()?),
            Endpoint::Tcp(addr) => Box::new(tcp::TcpAcceptor::bind(addr)?),
        };
        Ok(Server { listener })
    }

    /// Actual TCP address (useful after binding port 0).
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.listener.local_addr()
    }

    /// Registers `n_clients`, then runs rounds until the handler stops.
    /// Every client receives `Bye` at the end, or on any failure.
    pub fn serve<H: RoundHandler>(mut self, n_clients: usize, handler: &mut H, timeouts: &Timeouts) -> Result<ServeReport> {
        if n_clients == 0 {
            return Err(Error::config("clients", "must be >= 1"));
        }
        let (events_tx, events) = channel();
        let mut session = Session {
            links: BTreeMap::new(),
            events,
            round_timeout: timeouts.round,
        };
        let mut sizes = vec![0u32; n_clients];
        let registered = self.register(n_clients, &mut session, &mut sizes, &events_tx, timeouts);
        drop(events_tx);
        let result = registered.and_then(|()| run_rounds(&mut session, handler, &sizes));
        match &result {
            Ok(_) => session.close(bye::DONE),
            Err(Error::Protocol(_)) => session.close(bye::PROTOCOL),
            Err(_) => session.close(bye::ABORTED),
        }
        result
    }

    fn register(
        &mut self,
        n_clients: usize,
        session: &mut Session,
        sizes: &mut [u32],
        events_tx: &Sender<Event>,
        timeouts: &Timeouts,
    ) -> Result<()> {
        let deadline = Instant::now() + timeouts.accept;
        while session.links.len() < n_clients {
            let wait = deadline.saturating_duration_since(Instant::now());
            let Some(mut link) = self.listener.accept(wait)? else {
                return Err(Error::Transport(format!(
                    "only {} of {n_clients} clients connected in time",
                    session.links.len()
                )));
            };
            let (client_id, partition_size) = match link.recv(Some(timeouts.handshake)) {
                Ok(Message::Hello { client_id, partition_size }) => (client_id, partition_size),
                // a bad newcomer is turned away without disturbing the others
                Ok(_) | Err(_) => {
                    let _ = link.send(&Message::Bye { reason: bye::PROTOCOL });
                    continue;
                }
            };
            if client_id as usize >= n_clients {
                let _ = link.send(&Message::Bye { reason: bye::BAD_CLIENT_ID });
                continue;
            }
            if session.links.contains_key(&client_id) {
                let _ = link.send(&Message::Bye { reason: bye::DUPLICATE_ID });
                continue;
            }
            sizes[client_id as usize] = partition_size;
            let Link { tx, mut rx } = link;
            let events = events_tx.clone();
            std::thread::spawn(move || loop {
                let msg = rx.recv_frame(None).and_then(|f| Ok(decode_message(&f)?));
                let stop = msg.is_err();
                if events.send(Event { client: client_id, msg }).is_err() || stop {
                    break;
                }
            });
            session.links.insert(client_id, tx);
        }
        Ok(())
    }
}

fn run_rounds<H: RoundHandler>(session: &mut Session, handler: &mut H, sizes: &[u32]) -> Result<ServeReport> {
    handler.begin(sizes)?;
    let mut round = 0u32;
    while let Some(quotas) = handler.next_quotas()? {
        if quotas.len() != sizes.len() {
            return Err(Error::Invalid(format!("{} quotas for {} clients", quotas.len(), sizes.len())));
        }
        session.broadcast(&Message::RoundStart { round, quotas: quotas.clone() })?;
        let participants: Vec<u32> = (0..quotas.len() as u32).filter(|&id| quotas[id as usize] > 0).collect();

        let uploads = session.gather(&participants, |id, msg| match msg {
            Message::Activations { round: r, client_id, feature_map, labels } if client_id == id => {
                if r != round {
                    return Err(Error::Protocol(format!("client {id} sent activations for round {r} during round {round}")));
                }
                if feature_map.shape()[0] != quotas[id as usize] as usize {
                    return Err(Error::Protocol(format!(
                        "client {id} sent {} samples for quota {}",
                        feature_map.shape()[0],
                        quotas[id as usize]
                    )));
                }
                Ok(Contribution { client_id, feature_map, labels })
            }
            other => Err(Error::Protocol(format!("expected Activations from client {id}, got {}", other.name()))),
        })?;
        let cut_grads = handler.on_activations(round, uploads.into_iter().map(|(_, c)| c).collect())?;
        if cut_grads.len() != participants.len() {
            return Err(Error::Invalid("handler returned the wrong number of cut gradients".into()));
        }
        for (&id, gradient) in participants.iter().zip(cut_grads) {
            session.send(id, &Message::Gradients { round, client_id: id, gradient })?;
        }

        let grads = session.gather(&participants, |id, msg| match msg {
            Message::Gradients { round: r, client_id, gradient } if client_id == id && r == round => Ok(gradient),
            other => Err(Error::Protocol(format!(
                "expected front Gradients for round {round} from client {id}, got {}",
                other.name()
            ))),
        })?;
        let params = handler.on_front_gradients(round, grads)?;
        session.broadcast(&Message::WeightSync { round, params })?;
        if let Some((loss, accuracy)) = handler.after_round(round)? {
            session.broadcast(&Message::Metrics { round, loss, accuracy })?;
        }
        round += 1;
    }
    Ok(ServeReport { rounds: round })
}

/// Binds `endpoint` and serves in one call.
pub fn serve<H: RoundHandler>(endpoint: &Endpoint, n_clients: usize, handler: &mut H, timeouts: &Timeouts) -> Result<ServeReport> {
    Server::bind(endpoint)?.serve(n_clients, handler, timeouts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClientReport {
    /// Rounds announced by the server.
    pub rounds: u32,
    /// Rounds in which this client contributed samples.
    pub participated: u32,
}

/// Runs a client session until the server says `Bye(DONE)`.
pub fn connect<W: ClientWorker>(endpoint: &Endpoint, client_id: u32, worker: &mut W, timeouts: &Timeouts) -> Result<ClientReport> {
    let mut link = match endpoint {
        Endpoint::Loopback(hub) => hub.dial()?,
        Endpoint::Tcp(addr) => tcp::dial(addr, timeouts.handshake)?,
    };
    link.send(&Message::Hello {
        client_id,
        partition_size: worker.partition_size(),
    })?;
    let result = client_loop(&mut link, client_id, worker, timeouts);
    if let Err(e) = &result {
        let reason = if matches!(e, Error::Protocol(_) | Error::Decode(_)) { bye::PROTOCOL } else { bye::ABORTED };
        let _ = link.send(&Message::Bye { reason });
    }
    link.tx.close();
    result
}

fn client_loop<W: ClientWorker>(link: &mut Link, client_id: u32, worker: &mut W, timeouts: &Timeouts) -> Result<ClientReport> {
    let mut report = ClientReport::default();
    let mut pending: Option<(u32, usize)> = None;
    // registration can take as long as the server's accept window
    let mut wait = timeouts.accept + timeouts.round;
    loop {
        let msg = link.recv(Some(wait)).map_err(|e| match e {
            Error::Decode(d) => Error::Protocol(format!("from server: {d}")),
            other => other,
        })?;
        wait = timeouts.round;
        match msg {
            Message::RoundStart { round, quotas } => {
                let quota = *quotas.get(client_id as usize).ok_or_else(|| {
                    Error::Protocol(format!("RoundStart lists {} quotas, none for client {client_id}", quotas.len()))
                })? as usize;
                report.rounds += 1;
                if quota > 0 {
                    let (feature_map, labels) = worker.forward(round, quota)?;
                    link.send(&Message::Activations { round, client_id, feature_map, labels })?;
                    pending = Some((round, quotas.iter().map(|&q| q as usize).sum()));
                    report.participated += 1;
                }
            }
            Message::Gradients { round, gradient, .. } => {
                let Some((pending_round, total)) = pending.take() else {
                    return Err(Error::Protocol(format!("cut gradient for round {round} without a pending forward")));
                };
                if pending_round != round {
                    return Err(Error::Protocol(format!("cut gradient for round {round}, expected round {pending_round}")));
                }
                let front = worker.backward(round, &gradient, total)?;
                link.send(&Message::Gradients { round, client_id, gradient: front })?;
            }
            Message::WeightSync { round, params } => worker.sync(round, params)?,
            Message::Metrics { round, loss, accuracy } => worker.metrics(round, loss, accuracy),
            Message::Bye { reason: bye::DONE } => return Ok(report),
            Message::Bye { reason } => {
                return Err(match reason {
                    bye::DUPLICATE_ID => Error::Transport(format!("server rejected client id {client_id} as a duplicate")),
                    bye::BAD_CLIENT_ID => Error::Transport(format!("server rejected client id {client_id} as out of range")),
                    bye::PROTOCOL => Error::Protocol("server closed the session after a protocol error".into()),
                    _ => Error::Transport(format!("server aborted the session (reason {reason})")),
                })
            }
            other => return Err(Error::Protocol(format!("unexpected {} from server", other.name()))),
        }
    }
}

#[cfg(test)]
mod tests;
