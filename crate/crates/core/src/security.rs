//! Transcript attestation and distinguisher experiments.
//!
//! The server's view of a session is the byte sequence crossing its boundary.
//! Prompts in one equivalence class must yield identical views; the
//! experiments here check that exactly and measure how well transcript-only
//! adversaries can guess the real index.

use serde::Serialize;

use crate::denoiser::stable_hash;
use crate::error::Result;
use crate::oblivious::{transform, AttributeLexicon, CandidateSet};
use crate::protocol::client::{build_request, ClientConfig};
use crate::protocol::server::Server;
use crate::protocol::wire::{encode_frame, GenerateRequest, Message};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    ToServer,
    ToClient,
}

/// Bytes observed at the server boundary, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<(Direction, Vec<u8>)>,
}

impl Transcript {
    pub fn push(&mut self, dir: Direction, bytes: Vec<u8>) {
        self.entries.push((dir, bytes));
    }

    pub fn entries(&self) -> &[(Direction, Vec<u8>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self, dir: Direction) -> usize {
        self.entries
            .iter()
            .filter(|(d, _)| *d == dir)
            .map(|(_, b)| b.len())
            .sum()
    }

    /// Flat encoding: direction byte, u64 length, bytes, per entry.
    pub fn flatten(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (dir, bytes) in &self.entries {
            out.push(*dir as u8);
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    /// Offset of the first differing byte in the flat encodings.
    pub fn first_difference(&self, other: &Transcript) -> Option<usize> {
        let (a, b) = (self.flatten(), other.flatten());
        match a.iter().zip(&b).position(|(x, y)| x != y) {
            Some(i) => Some(i),
            None if a.len() != b.len() => Some(a.len().min(b.len())),
            None => None,
        }
    }
}

/// How the client orders candidates before sending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    #[default]
    Canonical,
    /// Negative control: the real prompt is moved to the front.
    LeakyRealFirst,
}

fn request_for(
    prompt: &str,
    lex: &AttributeLexicon,
    cfg: &ClientConfig,
    ordering: Ordering,
) -> Result<(CandidateSet, GenerateRequest)> {
    let (cset, mut req) = build_request(prompt, cfg, lex)?;
    if ordering == Ordering::LeakyRealFirst {
        req.candidates = cset.leaky_real_first().prompts().to_vec();
    }
    Ok((cset, req))
}

/// The server's view of a session for `prompt`: the request frame, followed by
/// the reply frame when a server is supplied.
pub fn server_view(
    prompt: &str,
    lex: &AttributeLexicon,
    cfg: &ClientConfig,
    server: Option<&Server>,
) -> Result<Transcript> {
    server_view_ordered(prompt, lex, cfg, server, Ordering::Canonical)
}

pub fn server_view_ordered(
    prompt: &str,
    lex: &AttributeLexicon,
    cfg: &ClientConfig,
    server: Option<&Server>,
    ordering: Ordering,
) -> Result<Transcript> {
    let (_, req) = request_for(prompt, lex, cfg, ordering)?;
    let frame = encode_frame(&Message::Request(req))?;
    let mut t = Transcript::default();
    if let Some(s) = server {
        let reply = s.handle_frame(&frame)?;
        t.push(Direction::ToServer, frame);
        t.push(Direction::ToClient, reply);
    } else {
        t.push(Direction::ToServer, frame);
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObliviousnessVerdict {
    pub class_size: usize,
    pub pass: bool,
    pub first_difference: Option<usize>,
    /// Empirical adversary accuracy, for distinguisher runs.
    pub accuracy: Option<f64>,
    /// Chance level `E[1/N]` over the trials.
    pub chance: Option<f64>,
    /// Three binomial standard deviations around chance.
    pub tolerance: Option<f64>,
    pub trials: usize,
}

/// Enumerates the prompt's equivalence class, the prompt as typed included,
/// and requires every member's server view to be byte-identical.
pub fn check_indistinguishability(
    prompt: &str,
    lex: &AttributeLexicon,
    cfg: &ClientConfig,
    server: Option<&Server>,
    ordering: Ordering,
) -> Result<ObliviousnessVerdict> {
    let cset = transform(prompt, lex)?;
    let reference = server_view_ordered(prompt, lex, cfg, server, ordering)?;
    let mut first_difference = None;
    for member in cset.prompts() {
        let view = server_view_ordered(member, lex, cfg, server, ordering)?;
        if let Some(off) = reference.first_difference(&view) {
            first_difference = Some(off);
            break;
        }
    }
    Ok(ObliviousnessVerdict {
        class_size: cset.len(),
        pass: first_difference.is_none(),
        first_difference,
        accuracy: None,
        chance: None,
        tolerance: None,
        trials: cset.len(),
    })
}

/// What an adversary sees in one trial.
pub struct AdversaryView<'a> {
    pub transcript: &'a Transcript,
    pub class_size: usize,
    /// Filled only for the leaky sanity control.
    pub leaked_index: Option<usize>,
}

pub trait Adversary {
    fn name(&self) -> &str;
    fn guess(&mut self, view: &AdversaryView) -> usize;
}

/// Hash of the transcript bytes, bucketed into `N`.
#[derive(Debug, Default)]
pub struct ByteHashAdversary;

impl Adversary for ByteHashAdversary {
    fn name(&self) -> &str {
        "byte-hash"
    }

    fn guess(&mut self, view: &AdversaryView) -> usize {
        (stable_hash(&view.transcript.flatten()) % view.class_size as u64) as usize
    }
}

#[derive(Debug, Default)]
pub struct FirstCandidateAdversary;

impl Adversary for FirstCandidateAdversary {
    fn name(&self) -> &str {
        "first-candidate"
    }

    fn guess(&mut self, _: &AdversaryView) -> usize {
        0
    }
}

/// Transcript length modulo `N`.
#[derive(Debug, Default)]
pub struct LengthAdversary;

impl Adversary for LengthAdversary {
    fn name(&self) -> &str {
        "length"
    }

    fn guess(&mut self, view: &AdversaryView) -> usize {
        view.transcript.flatten().len() % view.class_size
    }
}

/// Reads the real index out of band; must reach accuracy 1.
#[derive(Debug, Default)]
pub struct OracleAdversary;

impl Adversary for OracleAdversary {
    fn name(&self) -> &str {
        "oracle"
    }

    fn guess(&mut self, view: &AdversaryView) -> usize {
        view.leaked_index.unwrap_or(0)
    }
}

pub fn transcript_adversaries() -> Vec<Box<dyn Adversary>> {
    vec![
        Box::new(ByteHashAdversary),
        Box::new(FirstCandidateAdversary),
        Box::new(LengthAdversary),
    ]
}

/// Each trial draws a prompt from `pool`, a real member of its class
/// uniformly and a fresh seed, then asks the adversary for the real index.
/// Passes when accuracy lies within three binomial standard deviations of
/// chance.
pub fn distinguisher_experiment(
    pool: &[String],
    lex: &AttributeLexicon,
    cfg: &ClientConfig,
    trials: usize,
    adversary: &mut dyn Adversary,
    seed: u64,
    leak: bool,
) -> Result<ObliviousnessVerdict> {
    if trials < 100 {
        log::warn!("distinguisher experiment with only {trials} trials");
    }
    if pool.is_empty() {
        return Err(crate::error::Error::Input("empty prompt pool".into()));
    }
    let mut rng = Rng::new(seed);
    let mut hits = 0usize;
    let mut chance_sum = 0.0;
    let mut var_sum = 0.0;
    let mut sizes = Vec::new();
    for _ in 0..trials {
        let base = &pool[rng.next_below(pool.len())];
        let class = transform(base, lex)?;
        let n = class.len();
        let j = rng.next_below(n);
        let real = &class.prompts()[j];
        let trial_cfg = ClientConfig {
            seed: rng.next_u64(),
            ..cfg.clone()
        };
        let transcript = server_view(real, lex, &trial_cfg, None)?;
        let view = AdversaryView {
            transcript: &transcript,
            class_size: n,
            leaked_index: leak.then(|| transform(real, lex).map(|c| c.real_index())).transpose()?,
        };
        if adversary.guess(&view) == j {
            hits += 1;
        }
        let p = 1.0 / n as f64;
        chance_sum += p;
        var_sum += p * (1.0 - p);
        sizes.push(n);
    }
    let t = trials.max(1) as f64;
    let accuracy = hits as f64 / t;
    let chance = chance_sum / t;
    let tolerance = 3.0 * var_sum.sqrt() / t;
    sizes.sort_unstable();
    sizes.dedup();
    Ok(ObliviousnessVerdict {
        class_size: if sizes.len() == 1 { sizes[0] } else { 0 },
        pass: (accuracy - chance).abs() <= tolerance,
        first_difference: None,
        accuracy: Some(accuracy),
        chance: Some(chance),
        tolerance: Some(tolerance),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::AccelConfig;
    use crate::denoiser::{ModelConfig, ModelWeights};
    use std::sync::Arc;

    fn cfg(seed: u64) -> ClientConfig {
        ClientConfig {
            seed,
            ..ClientConfig::default()
        }
    }

    fn lex23() -> AttributeLexicon {
        AttributeLexicon::default().restricted(&["gender", "age"]).unwrap()
    }

    #[test]
    fn deterministic_views() {
        let lex = AttributeLexicon::default();
        let a = server_view("a young man", &lex, &cfg(1), None).unwrap();
        let b = server_view("a young man", &lex, &cfg(1), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_only_the_seed_field() {
        let lex = AttributeLexicon::default();
        let a = server_view("a young man", &lex, &cfg(1), None).unwrap();
        let b = server_view("a young man", &lex, &cfg(2), None).unwrap();
        let (fa, fb) = (&a.entries()[0].1, &b.entries()[0].1);
        assert_eq!(fa.len(), fb.len());
        let diffs: Vec<usize> = (0..fa.len()).filter(|&i| fa[i] != fb[i]).collect();
        // Seed sits right after the candidate list.
        let (_, req) = build_request("a young man", &cfg(1), &lex).unwrap();
        let seed_at = 10 + 4 + req.candidates.iter().map(|c| 4 + c.len()).sum::<usize>();
        assert!(!diffs.is_empty());
        assert!(diffs.iter().all(|&i| (seed_at..seed_at + 8).contains(&i)));
    }

    #[test]
    fn class_members_share_a_view() {
        let lex = lex23();
        let a = server_view("photo of a young male", &lex, &cfg(9), None).unwrap();
        let b = server_view("photo of a old female", &lex, &cfg(9), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attestation_and_negative_control() {
        let lex = AttributeLexicon::default();
        let p = "portrait of young African woman";
        let ok = check_indistinguishability(p, &lex, &cfg(3), None, Ordering::Canonical).unwrap();
        assert!(ok.pass);
        assert_eq!(ok.class_size, 30);
        let bad = check_indistinguishability(p, &lex, &cfg(3), None, Ordering::LeakyRealFirst).unwrap();
        assert!(!bad.pass);
        assert!(bad.first_difference.unwrap() > 10);
        let none = check_indistinguishability("a red bicycle", &lex, &cfg(3), None, Ordering::Canonical)
            .unwrap();
        assert!(none.pass);
        assert_eq!(none.class_size, 1);
    }

    #[test]
    fn views_with_replies_match_across_class() {
        let w = Arc::new(
            ModelWeights::generate(
                ModelConfig {
                    res: 8,
                    ..ModelConfig::default()
                },
                2,
            )
            .unwrap(),
        );
        let server = Server::new().with_model("toy", w);
        let c = ClientConfig {
            accel: AccelConfig {
                switch_point: 3,
                ..AccelConfig::fast_preset()
            },
            ..cfg(4)
        };
        let v = check_indistinguishability("a man", &AttributeLexicon::default(), &c, Some(&server), Ordering::Canonical)
            .unwrap();
        assert!(v.pass);
        assert_eq!(v.class_size, 2);
    }

    #[test]
    fn real_index_bytes_absent_from_request() {
        // Under the leaky ordering the first candidate encodes j; canonical
        // ordering must produce the same first candidate for every j.
        let lex = lex23();
        let class = transform("a young man", &lex).unwrap();
        let firsts: std::collections::HashSet<Vec<u8>> = class
            .prompts()
            .iter()
            .map(|p| server_view(p, &lex, &cfg(0), None).unwrap().flatten())
            .collect();
        assert_eq!(firsts.len(), 1);
        let leaky: std::collections::HashSet<Vec<u8>> = class
            .prompts()
            .iter()
            .map(|p| {
                server_view_ordered(p, &lex, &cfg(0), None, Ordering::LeakyRealFirst)
                    .unwrap()
                    .flatten()
            })
            .collect();
        assert_eq!(leaky.len(), class.len());
    }

    #[test]
    fn distinguisher_controls() {
        let lex = AttributeLexicon::default().restricted(&["gender"]).unwrap();
        let pool = vec!["a man".to_string(), "a photo of a woman smiling".to_string()];
        let v = distinguisher_experiment(&pool, &lex, &cfg(0), 400, &mut ByteHashAdversary, 1, false)
            .unwrap();
        assert!(v.pass, "{v:?}");
        assert_eq!(v.class_size, 2);
        let v = distinguisher_experiment(&pool, &lex, &cfg(0), 200, &mut OracleAdversary, 1, true).unwrap();
        assert_eq!(v.accuracy, Some(1.0));
        assert!(!v.pass);
    }
}
