//! TCP carrier using the protocol's self-delimiting frames.

use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{FrameReceiver, FrameSender, Link, Listener};
use crate::error::{Error, Result};
use crate::protocol::{read_frame, write_frame};

pub(crate) struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub(crate) fn bind(addr: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Transport(format!("cannot listen on {addr}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Transport(format!("listener setup: {e}")))?;
        Ok(TcpAcceptor { listener })
    }
}

impl Listener for TcpAcceptor {
    fn accept(&mut self, timeout: Duration) -> Result<Option<Link>> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream
                        .set_nonblocking(false)
                        .map_err(|e| Error::Transport(format!("socket setup: {e}")))?;
                    return link(stream).map(Some);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::Transport(format!("accept failed: {e}"))),
            }
        }
    }

    fn local_addr(&self) -> Option<SocketAddr> {
        self.listener.local_addr().ok()
    }
}

pub(crate) fn dial(addr: &str, timeout: Duration) -> Result<Link> {
    let targets: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| Error::Transport(format!("cannot resolve {addr}: {e}")))?
        .collect();
    let mut last = None;
    for target in targets {
        match TcpStream::connect_timeout(&target, timeout) {
            Ok(stream) => return link(stream),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Transport(match last {
        Some(e) => format!("cannot connect to {addr}: {e}"),
        None => format!("{addr} resolved to no addresses"),
    }))
}

fn link(stream: TcpStream) -> Result<Link> {
    stream.set_nodelay(true).ok();
    let reader = stream
        .try_clone()
        .map_err(|e| Error::Transport(format!("socket clone: {e}")))?;
    Ok(Link {
        tx: Box::new(TcpSender(BufWriter::new(stream))),
        rx: Box::new(TcpReceiver(BufReader::new(reader))),
    })
}

struct TcpSender(BufWriter<TcpStream>);

impl FrameSender for TcpSender {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        write_frame(&mut self.0, frame).map_err(|e| Error::Transport(format!("send failed: {e}")))
    }

    fn close(&mut self) {
        let _ = self.0.get_ref().shutdown(Shutdown::Both);
    }
}

struct TcpReceiver(BufReader<TcpStream>);

impl FrameReceiver for TcpReceiver {
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        self.0
            .get_ref()
            .set_read_timeout(timeout)
            .map_err(|e| Error::Transport(format!("socket setup: {e}")))?;
        read_frame(&mut self.0).map_err(|e| match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::Transport("timed out waiting for a frame".into()),
            ErrorKind::UnexpectedEof => Error::Transport("peer closed the connection".into()),
            ErrorKind::InvalidData => Error::Protocol(format!("malformed frame: {e}")),
            _ => Error::Transport(format!("receive failed: {e}")),
        })
    }
}
