//! Frame codec.
//!
//! ```text
//! "OBL1" | type u8 | version u8 | payload length u32 LE | payload
//! ```
//!
//! All integers little-endian. Latents travel as binary16.

use std::io::Read;

use crate::accel::{AccelConfig, RefreshOrigin};
use crate::error::{Error, Result};
use crate::schedule::{build_schedule, NoiseSchedule, Spacing};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OBL1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

const TYPE_REQUEST: u8 = 1;
const TYPE_RESPONSE: u8 = 2;
const TYPE_ERROR: u8 = 3;

/// Noise schedule as carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: Spacing,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: crate::schedule::DEFAULT_STEPS,
            beta_start: crate::schedule::DEFAULT_BETA_START,
            beta_end: crate::schedule::DEFAULT_BETA_END,
            spacing: Spacing::ScaledLinear,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end, self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub candidates: Vec<String>,
    pub seed: u64,
    /// Accel gates; `switch_point` is the number of cloud steps `k`.
    pub accel: AccelConfig,
    pub schedule: ScheduleParams,
    pub model_id: String,
}

impl GenerateRequest {
    pub fn cloud_steps(&self) -> usize {
        self.accel.switch_point
    }
}

/// Per-iteration server record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepReport {
    pub iteration: usize,
    pub flops: u64,
    pub skipped_blocks: bool,
    pub cached_sites: u8,
    pub reused_sites: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateResponse {
    /// Timestep of the returned latents, `T − k`.
    pub step_reached: usize,
    pub latents: Tensor,
    /// Server FLOPs indexed like [`crate::tensor::FlopKind::ALL`].
    pub flops_by_kind: [u64; 8],
    pub steps: Vec<StepReport>,
}

impl GenerateResponse {
    pub fn total_flops(&self) -> u64 {
        self.flops_by_kind.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReply {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(GenerateRequest),
    Response(GenerateResponse),
    Error(ErrorReply),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Frame(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

fn encode_request(req: &GenerateRequest, w: &mut Writer) -> Result<()> {
    if req.candidates.is_empty() {
        return Err(Error::Frame("request needs at least one candidate".into()));
    }
    w.u32(req.candidates.len())?;
    for c in &req.candidates {
        w.str(c)?;
    }
    w.u64(req.seed);
    let a = &req.accel;
    w.u32(a.switch_point)?;
    w.u32(a.cache_point)?;
    w.u32(a.skip_point)?;
    w.u8(a.reuse as u8);
    w.u32(a.refresh_period)?;
    w.u32(a.pivot_index)?;
    w.u8(a.refresh_origin.to_byte());
    let s = &req.schedule;
    w.u32(s.steps)?;
    w.f64(s.beta_start);
    w.f64(s.beta_end);
    w.u8(s.spacing.to_byte());
    w.str(&req.model_id)
}

fn encode_response(resp: &GenerateResponse, w: &mut Writer) -> Result<()> {
    w.u32(resp.step_reached)?;
    w.u32(resp.latents.shape().len())?;
    for &d in resp.latents.shape() {
        w.u32(d)?;
    }
    for bits in resp.latents.to_f16_bits()? {
        w.0.extend_from_slice(&bits.to_le_bytes());
    }
    for f in resp.flops_by_kind {
        w.u64(f);
    }
    w.u32(resp.steps.len())?;
    for s in &resp.steps {
        w.u32(s.iteration)?;
        w.u64(s.flops);
        w.u8(s.skipped_blocks as u8);
        w.u8(s.cached_sites);
        w.u8(s.reused_sites);
    }
    Ok(())
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    let kind = match msg {
        Message::Request(r) => {
            encode_request(r, &mut w)?;
            TYPE_REQUEST
        }
        Message::Response(r) => {
            encode_response(r, &mut w)?;
            TYPE_RESPONSE
        }
        Message::Error(e) => {
            w.str(&e.message)?;
            TYPE_ERROR
        }
    };
    let len = u32::try_from(w.0.len())
        .map_err(|_| Error::Frame(format!("payload of {} bytes is too large", w.0.len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + w.0.len());
    out.extend_from_slice(&MAGIC);
    out.push(kind);
    out.push(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&w.0);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::protocol(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn bool(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::protocol(at, format!("{what}: invalid flag {b}"))),
        }
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::protocol(at, format!("{what} is not valid UTF-8")))
    }
}

fn decode_request(r: &mut Reader) -> Result<GenerateRequest> {
    let at = r.pos;
    let n = r.u32("candidate count")?;
    if n == 0 {
        return Err(Error::protocol(at, "request has no candidates"));
    }
    let mut candidates = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        candidates.push(r.str("candidate")?);
    }
    let seed = r.u64("seed")?;
    let switch_point = r.u32("switch point")?;
    let cache_point = r.u32("cache point")?;
    let skip_point = r.u32("skip point")?;
    let reuse = r.bool("reuse flag")?;
    let refresh_period = r.u32("refresh period")?;
    let pivot_index = r.u32("pivot index")?;
    let at = r.pos;
    let refresh_origin = RefreshOrigin::from_byte(r.u8("refresh origin")?)
        .ok_or_else(|| Error::protocol(at, "unknown refresh origin"))?;
    let steps = r.u32("steps")?;
    let beta_start = r.f64("beta start")?;
    let beta_end = r.f64("beta end")?;
    let at = r.pos;
    let spacing = Spacing::from_byte(r.u8("spacing")?)
        .ok_or_else(|| Error::protocol(at, "unknown beta spacing"))?;
    let model_id = r.str("model id")?;
    Ok(GenerateRequest {
        candidates,
        seed,
        accel: AccelConfig {
            switch_point,
            cache_point,
            skip_point,
            reuse,
            refresh_period,
            pivot_index,
            refresh_origin,
        },
        schedule: ScheduleParams {
            steps,
            beta_start,
            beta_end,
            spacing,
        },
        model_id,
    })
}

fn decode_response(r: &mut Reader) -> Result<GenerateResponse> {
    let step_reached = r.u32("step reached")?;
    let at = r.pos;
    let rank = r.u32("latent rank")?;
    if rank == 0 || rank > 8 {
        return Err(Error::protocol(at, format!("latent rank {rank} unsupported")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("latent dimension")?);
    }
    let at = r.pos;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::protocol(at, "latent shape overflows"))?;
    let raw = r.take(count.checked_mul(2).unwrap_or(usize::MAX), "latent data")?;
    let bits: Vec<u16> = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let latents = Tensor::from_f16_bits(shape, &bits)
        .map_err(|e| Error::protocol(at, format!("latent data: {e}")))?;
    let mut flops_by_kind = [0u64; 8];
    for f in &mut flops_by_kind {
        *f = r.u64("flops")?;
    }
    let n = r.u32("step count")?;
    let mut steps = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        steps.push(StepReport {
            iteration: r.u32("step iteration")?,
            flops: r.u64("step flops")?,
            skipped_blocks: r.bool("skip flag")?,
            cached_sites: r.u8("cache mask")?,
            reused_sites: r.u8("reuse mask")?,
        });
    }
    Ok(GenerateResponse {
        step_reached,
        latents,
        flops_by_kind,
        steps,
    })
}

/// Validates a frame header and returns `(type, payload length)`.
fn parse_header(b: &[u8]) -> Result<(u8, usize)> {
    if let Some(i) = (0..4.min(b.len())).find(|&i| b[i] != MAGIC[i]) {
        return Err(Error::protocol(i, "bad magic"));
    }
    if b.len() < HEADER_LEN {
        return Err(Error::protocol(
            b.len(),
            format!("truncated header: need {HEADER_LEN} bytes, got {}", b.len()),
        ));
    }
    let kind = b[4];
    if !(TYPE_REQUEST..=TYPE_ERROR).contains(&kind) {
        return Err(Error::protocol(4, format!("unknown frame type {kind}")));
    }
    if b[5] != VERSION {
        return Err(Error::protocol(5, format!("unsupported version {}", b[5])));
    }
    let len = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
    Ok((kind, len))
}

pub fn decode_frame(b: &[u8]) -> Result<Message> {
    let (kind, len) = parse_header(b)?;
    let available = b.len() - HEADER_LEN;
    if available < len {
        return Err(Error::protocol(
            b.len(),
            format!("truncated payload: expected {len} bytes, got {available}"),
        ));
    }
    if available > len {
        return Err(Error::protocol(
            HEADER_LEN + len,
            format!("{} trailing bytes after payload", available - len),
        ));
    }
    let mut r = Reader {
        buf: &b[..HEADER_LEN + len],
        pos: HEADER_LEN,
    };
    let msg = match kind {
        TYPE_REQUEST => Message::Request(decode_request(&mut r)?),
        TYPE_RESPONSE => Message::Response(decode_response(&mut r)?),
        _ => Message::Error(ErrorReply {
            message: r.str("error message")?,
        }),
    };
    if r.pos != r.buf.len() {
        return Err(Error::protocol(
            r.pos,
            format!("{} unread payload bytes", r.buf.len() - r.pos),
        ));
    }
    Ok(msg)
}

/// Largest payload [`read_frame`] accepts from a stream.
pub const MAX_STREAM_PAYLOAD: usize = 256 << 20;

/// Reads one complete frame from a stream. Returns `Ok(None)` on a clean end
/// of stream before any header byte.
pub fn read_frame(mut r: impl Read) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = r.read(&mut header[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::protocol(filled, "stream ended inside frame header"));
        }
        filled += n;
        if filled >= 4 && header[..4] != MAGIC {
            break;
        }
    }
    let (_, len) = parse_header(&header[..filled])?;
    if len > MAX_STREAM_PAYLOAD {
        return Err(Error::Frame(format!("payload of {len} bytes exceeds stream limit")));
    }
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + len, 0);
    r.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::protocol(HEADER_LEN, format!("stream ended inside {len}-byte payload"))
        } else {
            Error::Transport(e)
        }
    })?;
    Ok(Some(frame))
}
