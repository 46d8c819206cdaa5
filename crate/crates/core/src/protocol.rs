//! Binary wire format shared by both transports and the checkpoint file.
//!
//! ```text
//! tensor  := ndims:u8 (1..=8) ‖ dim:u32le × ndims ‖ value:f32le × Π dims
//! frame   := "SASL" ‖ version:u8 (=1) ‖ tag:u8 ‖ payload_len:u32le ‖ payload
//! ```
//!
//! Payload fields are written in declaration order: integers as `u32le`,
//! reals as `f64le`, tensors as above, lists as a `u32le` count followed by
//! the elements.
//!
//! | tag | message     | payload                                               |
//! |-----|-------------|-------------------------------------------------------|
//! | 1   | Hello       | client_id, partition_size                             |
//! | 2   | RoundStart  | round, quotas: list of u32 (indexed by client id)     |
//! | 3   | Activations | round, client_id, feature_map, labels                 |
//! | 4   | Gradients   | round, client_id, gradient                            |
//! | 5   | WeightSync  | round, params: list of tensors                        |
//! | 6   | Metrics     | round, loss: f64, accuracy: f64                       |
//! | 7   | Bye         | reason                                                |

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SASL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_RANK: usize = 8;
/// Upper bound accepted when reading a frame from a stream.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    Truncated,
    BadRank(u8),
    ZeroDim,
    SizeMismatch,
    NonFinite,
    BadMagic,
    UnknownVersion(u8),
    UnknownTag(u8),
    LengthOverrun,
    TrailingBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {kind:?}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

impl DecodeError {
    fn at(offset: usize, kind: DecodeErrorKind) -> Self {
        DecodeError { offset, kind }
    }
}

/// Reason codes carried by [`Message::Bye`].
pub mod bye {
    pub const DONE: u32 = 0;
    pub const DUPLICATE_ID: u32 = 1;
    pub const BAD_CLIENT_ID: u32 = 2;
    pub const PROTOCOL: u32 = 3;
    pub const ABORTED: u32 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32, partition_size: u32 },
    RoundStart { round: u32, quotas: Vec<u32> },
    Activations { round: u32, client_id: u32, feature_map: Tensor, labels: Tensor },
    /// Server to client: cut-layer gradient. Client to server: flattened
    /// front-parameter gradient (local-mean form).
    Gradients { round: u32, client_id: u32, gradient: Tensor },
    WeightSync { round: u32, params: Vec<Tensor> },
    Metrics { round: u32, loss: f64, accuracy: f64 },
    Bye { reason: u32 },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 1,
            Message::RoundStart { .. } => 2,
            Message::Activations { .. } => 3,
            Message::Gradients { .. } => 4,
            Message::WeightSync { .. } => 5,
            Message::Metrics { .. } => 6,
            Message::Bye { .. } => 7,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::RoundStart { .. } => "RoundStart",
            Message::Activations { .. } => "Activations",
            Message::Gradients { .. } => "Gradients",
            Message::WeightSync { .. } => "WeightSync",
            Message::Metrics { .. } => "Metrics",
            Message::Bye { .. } => "Bye",
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + 4 * t.ndim() + 4 * t.len());
    write_tensor(&mut out, t);
    out
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    assert!(t.ndim() <= MAX_RANK, "tensor rank {} exceeds {MAX_RANK}", t.ndim());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dimension exceeds u32").to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes exactly one tensor occupying all of `bytes`.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    let mut r = ByteReader::new(bytes, 0);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize), DecodeError> {
    let mut r = ByteReader::new(bytes, 0);
    let t = r.tensor()?;
    Ok((t, r.pos))
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    let put = |p: &mut Vec<u8>, v: u32| p.extend_from_slice(&v.to_le_bytes());
    match m {
        Message::Hello { client_id, partition_size } => {
            put(&mut payload, *client_id);
            put(&mut payload, *partition_size);
        }
        Message::RoundStart { round, quotas } => {
            put(&mut payload, *round);
            put(&mut payload, quotas.len() as u32);
            for &q in quotas {
                put(&mut payload, q);
            }
        }
        Message::Activations { round, client_id, feature_map, labels } => {
            put(&mut payload, *round);
            put(&mut payload, *client_id);
            write_tensor(&mut payload, feature_map);
            write_tensor(&mut payload, labels);
        }
        Message::Gradients { round, client_id, gradient } => {
            put(&mut payload, *round);
            put(&mut payload, *client_id);
            write_tensor(&mut payload, gradient);
        }
        Message::WeightSync { round, params } => {
            put(&mut payload, *round);
            put(&mut payload, params.len() as u32);
            for t in params {
                write_tensor(&mut payload, t);
            }
        }
        Message::Metrics { round, loss, accuracy } => {
            put(&mut payload, *round);
            payload.extend_from_slice(&loss.to_le_bytes());
            payload.extend_from_slice(&accuracy.to_le_bytes());
        }
        Message::Bye { reason } => put(&mut payload, *reason),
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(m.tag());
    frame.extend_from_slice(&u32::try_from(payload.len()).expect("payload exceeds u32").to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

/// Validates a frame header and returns `(tag, payload_len)`.
fn parse_header(header: &[u8]) -> Result<(u8, usize), DecodeError> {
    if header.len() < HEADER_LEN {
        return Err(DecodeError::at(header.len(), DecodeErrorKind::Truncated));
    }
    if header[..4] != MAGIC {
        return Err(DecodeError::at(0, DecodeErrorKind::BadMagic));
    }
    if header[4] != VERSION {
        return Err(DecodeError::at(4, DecodeErrorKind::UnknownVersion(header[4])));
    }
    let tag = header[5];
    if !(1..=7).contains(&tag) {
        return Err(DecodeError::at(5, DecodeErrorKind::UnknownTag(tag)));
    }
    let len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    Ok((tag, len))
}

pub fn decode_message(frame: &[u8]) -> Result<Message, DecodeError> {
    let (tag, len) = parse_header(frame)?;
    let available = frame.len() - HEADER_LEN;
    if len > available {
        return Err(DecodeError::at(6, DecodeErrorKind::LengthOverrun));
    }
    if len < available {
        return Err(DecodeError::at(HEADER_LEN + len, DecodeErrorKind::TrailingBytes));
    }
    let mut r = ByteReader::new(&frame[HEADER_LEN..], HEADER_LEN);
    let msg = match tag {
        1 => Message::Hello {
            client_id: r.u32()?,
            partition_size: r.u32()?,
        },
        2 => {
            let round = r.u32()?;
            let count = r.u32()? as usize;
            // each quota needs four bytes; refuse counts the payload cannot hold
            if count > r.remaining() / 4 {
                return Err(DecodeError::at(r.offset(), DecodeErrorKind::Truncated));
            }
            let quotas = (0..count).map(|_| r.u32()).collect::<Result<_, _>>()?;
            Message::RoundStart { round, quotas }
        }
        3 => Message::Activations {
            round: r.u32()?,
            client_id: r.u32()?,
            feature_map: r.tensor()?,
            labels: r.tensor()?,
        },
        4 => Message::Gradients {
            round: r.u32()?,
            client_id: r.u32()?,
            gradient: r.tensor()?,
        },
        5 => {
            let round = r.u32()?;
            let count = r.u32()? as usize;
            // the smallest tensor is 9 bytes
            if count > r.remaining() / 9 {
                return Err(DecodeError::at(r.offset(), DecodeErrorKind::Truncated));
            }
            let params = (0..count).map(|_| r.tensor()).collect::<Result<_, _>>()?;
            Message::WeightSync { round, params }
        }
        6 => Message::Metrics {
            round: r.u32()?,
            loss: r.f64()?,
            accuracy: r.f64()?,
        },
        7 => Message::Bye { reason: r.u32()? },
        _ => unreachable!("tag validated by parse_header"),
    };
    r.finish()?;
    Ok(msg)
}

/// Reads one complete frame from a byte stream (header plus payload).
pub fn read_frame<R: Read>(reader: &mut R) -> std::io::Result<Vec<u8>> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    let (_, len) = parse_header(&header).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    if len > MAX_PAYLOAD as usize {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            DecodeError::at(6, DecodeErrorKind::LengthOverrun),
        ));
    }
    let mut frame = vec![0u8; HEADER_LEN + len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    reader.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(frame)
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> std::io::Result<()> {
    writer.write_all(frame)?;
    writer.flush()
}

/// Bounds-checked little-endian cursor. `base` is added to reported offsets.
struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        ByteReader { buf, pos: 0, base }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(DecodeError::at(self.offset(), DecodeErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        let at = self.offset();
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(DecodeError::at(at, DecodeErrorKind::NonFinite));
        }
        Ok(v)
    }

    fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let start = self.offset();
        let ndims = self.u8()?;
        if ndims == 0 || ndims as usize > MAX_RANK {
            return Err(DecodeError::at(start, DecodeErrorKind::BadRank(ndims)));
        }
        let mut shape = Vec::with_capacity(ndims as usize);
        let mut count: usize = 1;
        for _ in 0..ndims {
            let at = self.offset();
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(DecodeError::at(at, DecodeErrorKind::ZeroDim));
            }
            count = count
                .checked_mul(d)
                .filter(|&c| c <= self.remaining() / 4)
                .ok_or_else(|| DecodeError::at(at, DecodeErrorKind::SizeMismatch))?;
            shape.push(d);
        }
        let data_at = self.offset();
        let raw = self.take(count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DecodeError::at(data_at + 4 * i, DecodeErrorKind::NonFinite));
        }
        Ok(Tensor::from_parts(shape, data))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError::at(self.offset(), DecodeErrorKind::TrailingBytes));
        }
        Ok(())
    }
}
