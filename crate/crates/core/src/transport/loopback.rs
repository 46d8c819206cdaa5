//! In-process carrier: frames travel over channels, still fully encoded.

use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{FrameReceiver, FrameSender, Link, Listener};
use crate::error::{Error, Result};

type Pending = (Sender<Vec<u8>>, Receiver<Vec<u8>>);

/// Rendezvous point shared by one server and its in-process clients.
#[derive(Clone)]
pub struct LoopbackHub {
    dial: Sender<Pending>,
    accept: Arc<Mutex<Option<Receiver<Pending>>>>,
}

impl std::fmt::Debug for LoopbackHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LoopbackHub")
    }
}

impl Default for LoopbackHub {
    fn default() -> Self {
        Self::new()
    }
}

impl LoopbackHub {
    pub fn new() -> Self {
        let (dial, accept) = channel();
        LoopbackHub {
            dial,
            accept: Arc::new(Mutex::new(Some(accept))),
        }
    }

    /// Takes the accepting side; only one server may bind a hub.
    pub(crate) fn bind(&self) -> Result<LoopbackListener> {
        let rx = self
            .accept
            .lock()
            .expect("hub lock")
            .take()
            .ok_or_else(|| Error::Transport("loopback hub is already bound".into()))?;
        Ok(LoopbackListener { rx })
    }

    pub(crate) fn dial(&self) -> Result<Link> {
        let (to_server, server_rx) = channel();
        let (server_tx, from_server) = channel();
        self.dial
            .send((server_tx, server_rx))
            .map_err(|_| Error::Transport("loopback server is gone".into()))?;
        Ok(Link {
            tx: Box::new(ChannelSender(Some(to_server))),
            rx: Box::new(ChannelReceiver(from_server)),
        })
    }
}

pub(crate) struct LoopbackListener {
    rx: Receiver<Pending>,
}

impl Listener for LoopbackListener {
    fn accept(&mut self, timeout: Duration) -> Result<Option<Link>> {
        match self.rx.recv_timeout(timeout) {
            Ok((tx, rx)) => Ok(Some(Link {
                tx: Box::new(ChannelSender(Some(tx))),
                rx: Box::new(ChannelReceiver(rx)),
            })),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("loopback hub dropped".into())),
        }
    }
}

struct ChannelSender(Option<Sender<Vec<u8>>>);

impl FrameSender for ChannelSender {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.0
            .as_ref()
            .and_then(|tx| tx.send(frame.to_vec()).ok())
            .ok_or_else(|| Error::Transport("loopback peer disconnected".into()))
    }

    fn close(&mut self) {
        self.0 = None;
    }
}

struct ChannelReceiver(Receiver<Vec<u8>>);

impl FrameReceiver for ChannelReceiver {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        let r = match timeout {
            Some(t) => self.0.recv_timeout(t),
            None => self.0.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        r.map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Transport("timed out waiting for a frame".into()),
            RecvTimeoutError::Disconnected => Error::Transport("loopback peer disconnected".into()),
        })
    }
}
