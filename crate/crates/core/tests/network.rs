use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use oblix_core::accel::AccelConfig;
use oblix_core::denoiser::{ModelConfig, ModelWeights};
use oblix_core::oblivious::AttributeLexicon;
use oblix_core::protocol::{
    encode_frame, run_session, ChannelModel, ClientConfig, GenerateRequest, Message, Server,
    SimulatedTransport, TcpTransport,
};

fn weights() -> Arc<ModelWeights> {
    Arc::new(ModelWeights::generate(ModelConfig::default(), 1).unwrap())
}

fn spawn_server(w: &Arc<ModelWeights>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = Arc::new(Server::new().with_model("toy", Arc::clone(w)));
    thread::spawn(move || server.serve(listener));
    addr
}

fn cfg(seed: u64) -> ClientConfig {
    ClientConfig {
        seed,
        accel: AccelConfig { switch_point: 10, ..AccelConfig::fast_preset() },
        ..ClientConfig::default()
    }
}

#[test]
fn tcp_matches_simulated() {
    let w = weights();
    let addr = spawn_server(&w);
    let lex = AttributeLexicon::default();
    let p = "a photo of an old woman";
    let mut tcp = TcpTransport::new(addr);
    let over_tcp = run_session(p, &cfg(4), &lex, &w, &mut tcp).unwrap();
    let mut sim = SimulatedTransport::new(
        Arc::new(Server::new().with_model("toy", Arc::clone(&w))),
        ChannelModel::default(),
    );
    let local = run_session(p, &cfg(4), &lex, &w, &mut sim).unwrap();
    assert_eq!(over_tcp.latent, local.latent);
    assert_eq!(over_tcp.image, local.image);
    assert_eq!(over_tcp.transcript.flatten(), local.transcript.flatten());
    // The connection is reused for a second session.
    let again = run_session(p, &cfg(4), &lex, &w, &mut tcp).unwrap();
    assert_eq!(again.latent, local.latent);
}

#[test]
fn concurrent_clients() {
    let w = weights();
    let addr = spawn_server(&w);
    let handles: Vec<_> = (0..4u64)
        .map(|seed| {
            let (addr, w) = (addr.clone(), Arc::clone(&w));
            thread::spawn(move || {
                let lex = AttributeLexicon::default();
                let out = run_session("a photo of a man", &cfg(seed), &lex, &w, &mut TcpTransport::new(addr)).unwrap();
                (seed, out.latent)
            })
        })
        .collect();
    let server = Arc::new(Server::new().with_model("toy", Arc::clone(&w)));
    let lex = AttributeLexicon::default();
    for h in handles {
        let (seed, latent) = h.join().unwrap();
        let mut sim = SimulatedTransport::new(Arc::clone(&server), ChannelModel::default());
        assert_eq!(latent, run_session("a photo of a man", &cfg(seed), &lex, &w, &mut sim).unwrap().latent);
    }
}

#[test]
fn malformed_frame_drops_only_that_connection() {
    let w = weights();
    let addr = spawn_server(&w);
    let mut raw = TcpStream::connect(&addr).unwrap();
    raw.write_all(b"XXXX\x01\x01\x04\x00\x00\x00abcd").unwrap();
    let mut buf = Vec::new();
    let n = raw.read_to_end(&mut buf).unwrap_or(0);
    assert_eq!(n, 0, "server should close without replying");

    let lex = AttributeLexicon::default();
    let out = run_session("a photo of a man", &cfg(1), &lex, &w, &mut TcpTransport::new(addr)).unwrap();
    assert_eq!(out.candidates, 2);
}

#[test]
fn unknown_model_is_an_error_frame() {
    let w = weights();
    let addr = spawn_server(&w);
    let lex = AttributeLexicon::default();
    let c = ClientConfig { model_id: "missing".into(), ..cfg(0) };
    let err = run_session("a photo of a man", &c, &lex, &w, &mut TcpTransport::new(addr.clone())).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");

    let req = GenerateRequest {
        candidates: vec!["x".into()],
        seed: 0,
        accel: AccelConfig::disabled(25, 30),
        schedule: Default::default(),
        model_id: "toy".into(),
    };
    let mut raw = TcpStream::connect(&addr).unwrap();
    raw.write_all(&encode_frame(&Message::Request(req)).unwrap()).unwrap();
    let frame = oblix_core::protocol::read_frame(&mut raw).unwrap().unwrap();
    assert!(matches!(oblix_core::protocol::decode_frame(&frame).unwrap(), Message::Error(_)));
}

#[test]
fn retries_recover_from_transient_failures() {
    let w = weights();
    let lex = AttributeLexicon::default();
    let server = Arc::new(Server::new().with_model("toy", Arc::clone(&w)));
    let mut sim = SimulatedTransport::new(Arc::clone(&server), ChannelModel::default());
    sim.inject_failures = 2;
    let ok = run_session("a photo of a man", &cfg(2), &lex, &w, &mut sim).unwrap();
    let mut clean = SimulatedTransport::new(server, ChannelModel::default());
    assert_eq!(ok.latent, run_session("a photo of a man", &cfg(2), &lex, &w, &mut clean).unwrap().latent);

    let mut sim = SimulatedTransport::new(Arc::new(Server::new().with_model("toy", w.clone())), ChannelModel::default());
    sim.inject_failures = 3;
    assert!(run_session("a photo of a man", &cfg(2), &lex, &w, &mut sim).is_err());
}
