//! Split execution between a stateless cloud server and the device client.

pub mod client;
pub mod server;
pub mod transport;
pub mod wire;

pub use client::{build_request, run_session, ClientConfig, SessionOutput};
pub use server::Server;
pub use transport::{simulate_transfer, ChannelModel, SimulatedTransport, TcpTransport, Transport};
pub use wire::{
    decode_frame, encode_frame, read_frame, GenerateRequest, GenerateResponse, Message,
    ScheduleParams, StepReport,
};
