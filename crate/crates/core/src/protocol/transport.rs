use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::server::Server;
use super::wire::read_frame;

/// Link model: fixed round trip plus serialisation at `bandwidth_bps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    pub bandwidth_bps: f64,
    pub rtt_s: f64,
}

/// Average WiFi bandwidth used for the transfer estimates.
pub const DEFAULT_BANDWIDTH_BPS: f64 = 18.88e6;

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            rtt_s: 0.0,
        }
    }
}

impl ChannelModel {
    pub fn new(bandwidth_bps: f64, rtt_s: f64) -> Result<Self> {
        let ch = Self {
            bandwidth_bps,
            rtt_s,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_bps
            )));
        }
        if !(self.rtt_s >= 0.0 && self.rtt_s.is_finite()) {
            return Err(Error::Config(format!("rtt must be non-negative, got {}", self.rtt_s)));
        }
        Ok(())
    }
}

/// `rtt + bytes·8 / bandwidth`, in seconds.
pub fn simulate_transfer(bytes_count: usize, ch: &ChannelModel) -> f64 {
    ch.rtt_s + bytes_count as f64 * 8.0 / ch.bandwidth_bps
}

/// One request frame in, one reply frame out.
pub trait Transport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>>;
}

/// In-process server behind a modelled channel.
#[derive(Debug, Clone)]
pub struct SimulatedTransport {
    server: Arc<Server>,
    channel: ChannelModel,
    elapsed_s: f64,
    /// Number of upcoming exchanges that fail before reaching the server.
    pub inject_failures: usize,
}

impl SimulatedTransport {
    pub fn new(server: Arc<Server>, channel: ChannelModel) -> Self {
        Self {
            server,
            channel,
            elapsed_s: 0.0,
            inject_failures: 0,
        }
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    /// Modelled time spent on the wire so far.
    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_s
    }
}

impl Transport for SimulatedTransport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        if self.inject_failures > 0 {
            self.inject_failures -= 1;
            return Err(Error::Transport(std::io::Error::new(
                std::io::ErrorKind::ConnectionReset,
                "simulated link failure",
            )));
        }
        let reply = self.server.handle_frame(request)?;
        self.elapsed_s += simulate_transfer(request.len() + reply.len(), &self.channel);
        Ok(reply)
    }
}

/// Stream-socket transport; the connection is opened lazily and reused.
#[derive(Debug)]
pub struct TcpTransport {
    addr: String,
    stream: Option<TcpStream>,
    timeout: Option<Duration>,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            stream: None,
            timeout: Some(Duration::from_secs(300)),
        }
    }

    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    fn connect(&mut self) -> Result<&mut TcpStream> {
        if self.stream.is_none() {
            let s = TcpStream::connect(&self.addr)?;
            s.set_read_timeout(self.timeout)?;
            s.set_nodelay(true)?;
            self.stream = Some(s);
        }
        Ok(self.stream.as_mut().unwrap())
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        let result = (|| {
            let stream = self.connect()?;
            stream.write_all(request)?;
            stream.flush()?;
            read_frame(&mut *stream)?.ok_or_else(|| {
                Error::Transport(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "server closed the connection",
                ))
            })
        })();
        if result.is_err() {
            self.stream = None;
        }
        result
    }
}
