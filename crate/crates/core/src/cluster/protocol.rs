//! Messages exchanged between the parameter server and workers, and their
//! binary encoding.
//!
//! A frame is a 4-byte little-endian payload length followed by the payload.
//! The payload starts with a tag byte (1 = RoundRequest, 2 = RoundReply,
//! 3 = Shutdown, 4 = Error) followed by the fields in declaration order.
//! Reals are 8-byte little-endian IEEE-754, indices 8-byte little-endian
//! unsigned, matrices row-major. Vector lengths are implied by the shape
//! fields that precede them; strings are an index length then UTF-8 bytes.

use std::io::{self, Read, Write};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::ChainState;
use crate::samplers::NoiseSource;

const TAG_REQUEST: u8 = 1;
const TAG_REPLY: u8 = 2;
const TAG_SHUTDOWN: u8 = 3;
const TAG_ERROR: u8 = 4;

const MAX_FRAME: usize = 1 << 31;

/// Rows of `U`, `V`, `a`, `b` covering one block.
#[derive(Debug, Clone, PartialEq)]
pub struct SubParameters {
    pub row_start: usize,
    pub col_start: usize,
    pub dim: usize,
    /// `n_rows × dim`, row-major.
    pub u: Vec<f64>,
    /// `n_cols × dim`, row-major.
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl SubParameters {
    pub fn extract(state: &ChainState, rows: Range<usize>, cols: Range<usize>) -> Self {
        SubParameters {
            row_start: rows.start,
            col_start: cols.start,
            dim: state.dim(),
            u: state.u.row_block(rows.clone()).to_vec(),
            v: state.v.row_block(cols.clone()).to_vec(),
            a: state.a[rows].to_vec(),
            b: state.b[cols].to_vec(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.a.len()
    }

    pub fn n_cols(&self) -> usize {
        self.b.len()
    }

    pub fn rows(&self) -> Range<usize> {
        self.row_start..self.row_start + self.n_rows()
    }

    pub fn cols(&self) -> Range<usize> {
        self.col_start..self.col_start + self.n_cols()
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.u.len() != self.n_rows() * self.dim || self.v.len() != self.n_cols() * self.dim {
            return Err(Error::Protocol(format!(
                "sub-parameter shapes disagree: {} U values for {} rows, {} V values for {} cols, dim {}",
                self.u.len(),
                self.n_rows(),
                self.v.len(),
                self.n_cols(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Copies these rows into `state`.
    pub fn install(&self, state: &mut ChainState) -> Result<()> {
        self.check_shape()?;
        if self.dim != state.dim()
            || self.rows().end > state.n_users()
            || self.cols().end > state.n_items()
        {
            return Err(Error::Protocol(
                "sub-parameters do not fit the chain state".into(),
            ));
        }
        state.u.set_row_block(self.row_start, &self.u)?;
        state.v.set_row_block(self.col_start, &self.v)?;
        state.a[self.rows()].copy_from_slice(&self.a);
        state.b[self.cols()].copy_from_slice(&self.b);
        Ok(())
    }
}

/// Work order for one round of one chain at one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRequest {
    pub chain_id: usize,
    pub block_id: usize,
    pub round: u64,
    pub params: SubParameters,
    pub lambda_u: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub tau: f64,
    pub eps: f64,
    pub round_length: usize,
    pub minibatch_size: usize,
    pub visit: f64,
    pub noise: NoiseSource,
    /// False for the SGD baselines.
    pub inject_noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReply {
    pub chain_id: usize,
    pub block_id: usize,
    pub round: u64,
    pub iterations: u64,
    pub params: SubParameters,
    /// RMSE over the last minibatch of the round; NaN when no iteration ran.
    pub train_rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireErrorKind {
    Divergence = 1,
    Protocol = 2,
    Other = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireError {
    pub chain_id: usize,
    pub block_id: usize,
    pub round: u64,
    pub kind: WireErrorKind,
    pub iteration: u64,
    pub message: String,
}

impl WireError {
    pub fn from_error(err: &Error, chain_id: usize, block_id: usize, round: u64) -> Self {
        let (kind, iteration) = match err {
            Error::Divergence { iteration, .. } => (WireErrorKind::Divergence, *iteration),
            Error::Protocol(_) => (WireErrorKind::Protocol, 0),
            _ => (WireErrorKind::Other, 0),
        };
        WireError {
            chain_id,
            block_id,
            round,
            kind,
            iteration,
            message: err.to_string(),
        }
    }

    pub fn into_error(self) -> Error {
        match self.kind {
            WireErrorKind::Divergence => Error::Divergence {
                chain: self.chain_id,
                iteration: self.iteration,
                detail: self.message,
            },
            WireErrorKind::Protocol => Error::Protocol(self.message),
            WireErrorKind::Other => Error::Worker {
                round: self.round,
                chain: self.chain_id,
                block: self.block_id,
                message: self.message,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(RoundRequest),
    Reply(RoundReply),
    Shutdown,
    Error(WireError),
}

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn index(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn real(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn reals(&mut self, xs: &[f64]) {
        for &x in xs {
            self.real(x);
        }
    }

    fn params(&mut self, p: &SubParameters) {
        self.index(p.row_start as u64);
        self.index(p.n_rows() as u64);
        self.index(p.col_start as u64);
        self.index(p.n_cols() as u64);
        self.index(p.dim as u64);
        self.reals(&p.u);
        self.reals(&p.v);
        self.reals(&p.a);
        self.reals(&p.b);
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol(format!(
                "payload truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn index(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.index()?)
            .map_err(|_| Error::Protocol("index does not fit usize".into()))
    }

    fn real(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Protocol("vector length overflows".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn params(&mut self) -> Result<SubParameters> {
        let row_start = self.usize()?;
        let n_rows = self.usize()?;
        let col_start = self.usize()?;
        let n_cols = self.usize()?;
        let dim = self.usize()?;
        let mul = |x: usize, y: usize| {
            x.checked_mul(y)
                .ok_or_else(|| Error::Protocol("matrix shape overflows".into()))
        };
        let u = self.reals(mul(n_rows, dim)?)?;
        let v = self.reals(mul(n_cols, dim)?)?;
        let a = self.reals(n_rows)?;
        let b = self.reals(n_cols)?;
        Ok(SubParameters {
            row_start,
            col_start,
            dim,
            u,
            v,
            a,
            b,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Serializes a message payload (without the length prefix).
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut e = Encoder { buf: Vec::new() };
    match msg {
        Message::Request(r) => {
            e.buf.push(TAG_REQUEST);
            e.index(r.chain_id as u64);
            e.index(r.block_id as u64);
            e.index(r.round);
            e.params(&r.params);
            e.reals(&r.lambda_u);
            e.reals(&r.lambda_v);
            e.real(r.lambda_a);
            e.real(r.lambda_b);
            e.real(r.tau);
            e.real(r.eps);
            e.index(r.round_length as u64);
            e.index(r.minibatch_size as u64);
            e.real(r.visit);
            e.index(r.noise.seed);
            e.index(r.noise.stream_id);
            e.index(u64::from(r.inject_noise));
        }
        Message::Reply(r) => {
            e.buf.push(TAG_REPLY);
            e.index(r.chain_id as u64);
            e.index(r.block_id as u64);
            e.index(r.round);
            e.index(r.iterations);
            e.params(&r.params);
            e.real(r.train_rmse);
        }
        Message::Shutdown => e.buf.push(TAG_SHUTDOWN),
        Message::Error(w) => {
            e.buf.push(TAG_ERROR);
            e.index(w.chain_id as u64);
            e.index(w.block_id as u64);
            e.index(w.round);
            e.index(w.kind as u64);
            e.index(w.iteration);
            e.index(w.message.len() as u64);
            e.buf.extend_from_slice(w.message.as_bytes());
        }
    }
    e.buf
}

pub fn decode(payload: &[u8]) -> Result<Message> {
    let (&tag, rest) = payload
        .split_first()
        .ok_or_else(|| Error::Protocol("empty payload".into()))?;
    let mut d = Decoder { buf: rest, pos: 0 };
    let msg = match tag {
        TAG_REQUEST => {
            let chain_id = d.usize()?;
            let block_id = d.usize()?;
            let round = d.index()?;
            let params = d.params()?;
            let lambda_u = d.reals(params.dim)?;
            let lambda_v = d.reals(params.dim)?;
            Message::Request(RoundRequest {
                chain_id,
                block_id,
                round,
                lambda_u,
                lambda_v,
                lambda_a: d.real()?,
                lambda_b: d.real()?,
                tau: d.real()?,
                eps: d.real()?,
                round_length: d.usize()?,
                minibatch_size: d.usize()?,
                visit: d.real()?,
                noise: NoiseSource::new(d.index()?, d.index()?),
                inject_noise: match d.index()? {
                    0 => false,
                    1 => true,
                    x => return Err(Error::Protocol(format!("bad noise flag {x}"))),
                },
                params,
            })
        }
        TAG_REPLY => Message::Reply(RoundReply {
            chain_id: d.usize()?,
            block_id: d.usize()?,
            round: d.index()?,
            iterations: d.index()?,
            params: d.params()?,
            train_rmse: d.real()?,
        }),
        TAG_SHUTDOWN => Message::Shutdown,
        TAG_ERROR => {
            let chain_id = d.usize()?;
            let block_id = d.usize()?;
            let round = d.index()?;
            let kind = match d.index()? {
                1 => WireErrorKind::Divergence,
                2 => WireErrorKind::Protocol,
                3 => WireErrorKind::Other,
                x => return Err(Error::Protocol(format!("unknown error kind {x}"))),
            };
            let iteration = d.index()?;
            let len = d.usize()?;
            let message = String::from_utf8(d.take(len)?.to_vec())
                .map_err(|_| Error::Protocol("error message is not UTF-8".into()))?;
            Message::Error(WireError {
                chain_id,
                block_id,
                round,
                kind,
                iteration,
                message,
            })
        }
        other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
    };
    d.finish()?;
    Ok(msg)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let payload = encode(msg);
    let len =
        u32::try_from(payload.len()).map_err(|_| Error::Protocol("frame too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!(
            "frame of {len} bytes exceeds limit"
        )));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode(&payload).map(Some)
}
