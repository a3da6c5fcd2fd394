//! Miniature U-Net noise predictor, text embedder and latent decoder.
//!
//! Layout per batch row, with `res` the latent side:
//!
//! ```text
//! down: patchify(z) ─ conv ─ self-attn ─ cross-attn            (res/2)²  tokens
//! mid:  patchify    ─ conv ─ self-attn ─ cross-attn ─▶ f_mid    (res/4)²  tokens
//! up:   unpatchify(conv(f_mid)) + conv(patchify(z))
//!                   ─ self-attn ─ cross-attn ─ conv ─ unpatchify ─▶ ε
//! ```
//!
//! Convolutions are 2×2 stride-2 kernels expressed as dense matrices over
//! patchified tokens. The up block reads the current latent directly, so it can
//! run from a cached `f_mid` when the down and mid blocks are skipped.

use std::io::{Read, Write};

use crate::accel::{self, AccelState, StepGates};
use crate::error::{Error, Result};
use crate::tensor::{FlopCounter, FlopKind, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub res: usize,
    pub d_text: usize,
    pub hidden: usize,
    pub token_capacity: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            res: 16,
            d_text: 32,
            hidden: 32,
            token_capacity: 16,
            heads: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.latent_channels,
            self.d_text,
            self.hidden,
            self.token_capacity,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !self.res.is_power_of_two() || self.res < 4 {
            return Err(Error::Config(format!(
                "latent resolution must be a power of two >= 4, got {}",
                self.res
            )));
        }
        if self.heads != 1 {
            return Err(Error::Config(format!(
                "only single-head attention is supported, got {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Shape of one latent: `[C, res, res]`.
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_channels, self.res, self.res]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_channels * self.res * self.res
    }

    /// Token count at the down/up level.
    pub fn outer_tokens(&self) -> usize {
        (self.res / 2).pow(2)
    }

    /// Token count at the mid level.
    pub fn mid_tokens(&self) -> usize {
        (self.res / 4).pow(2)
    }
}

/// Attention sites, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    DownSelf,
    DownCross,
    MidSelf,
    MidCross,
    UpSelf,
    UpCross,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::DownSelf,
        Site::DownCross,
        Site::MidSelf,
        Site::MidCross,
        Site::UpSelf,
        Site::UpCross,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_cross(self) -> bool {
        matches!(self, Site::DownCross | Site::MidCross | Site::UpCross)
    }

    /// Down and mid sites disappear when blocks are skipped.
    pub fn in_skipped_blocks(self) -> bool {
        matches!(
            self,
            Site::DownSelf | Site::DownCross | Site::MidSelf | Site::MidCross
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::DownSelf => "down.self",
            Site::DownCross => "down.cross",
            Site::MidSelf => "mid.self",
            Site::MidCross => "mid.cross",
            Site::UpSelf => "up.self",
            Site::UpCross => "up.cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    fn random(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f32) -> Self {
        let scale = gain / (fan_in as f32).sqrt();
        let weight = Tensor::randn(vec![fan_in, fan_out], rng)
            .scale(scale)
            .expect("finite");
        let bias = Tensor::randn(vec![1, fan_out], rng)
            .scale(0.02)
            .expect("finite");
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor, kind: FlopKind, flops: &mut FlopCounter) -> Result<Tensor> {
        flops.matmul(kind, x, &self.weight)?.add_row(&self.bias)
    }
}

/// Projections of one attention site. `to_q` is `[d, d]`; `to_k`/`to_v` are
/// `[kv_width, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub to_q: Tensor,
    pub to_k: Tensor,
    pub to_v: Tensor,
    pub to_out: Linear,
}

impl AttnWeights {
    fn random(rng: &mut Rng, hidden: usize, kv_width: usize) -> Self {
        let proj = |rng: &mut Rng, fan_in: usize| {
            Tensor::randn(vec![fan_in, hidden], rng)
                .scale(1.0 / (fan_in as f32).sqrt())
                .expect("finite")
        };
        Self {
            to_q: proj(rng, hidden),
            to_k: proj(rng, kv_width),
            to_v: proj(rng, kv_width),
            to_out: Linear::random(rng, hidden, hidden, 0.5),
        }
    }

    pub fn width(&self) -> usize {
        self.to_q.cols()
    }
}

/// `softmax(q·kᵀ/√d)`.
pub fn attention_map(q: &Tensor, k: &Tensor, flops: &mut FlopCounter) -> Result<Tensor> {
    let scores = flops.matmul(FlopKind::Scores, q, &k.transpose()?)?;
    let scale = 1.0 / (q.cols() as f32).sqrt();
    flops.softmax_rows(&scores.scale(scale)?)
}

/// Single-row attention `O = softmax(Q·Kᵀ/√d)·V` with `Q = to_q(q_in)`,
/// `K = to_k(kv_in)`, `V = to_v(kv_in)`. The output projection is applied by
/// the enclosing block.
pub fn attention(
    q_in: &Tensor,
    kv_in: &Tensor,
    w: &AttnWeights,
    flops: &mut FlopCounter,
) -> Result<Tensor> {
    let q = flops.matmul(FlopKind::ToQ, q_in, &w.to_q)?;
    let k = flops.matmul(FlopKind::ToK, kv_in, &w.to_k)?;
    let v = flops.matmul(FlopKind::ToV, kv_in, &w.to_v)?;
    let map = attention_map(&q, &k, flops)?;
    flops.matmul(FlopKind::Mix, &map, &v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    seed: u64,
    fingerprint: u64,
    pub(crate) down_in: Linear,
    pub(crate) down_self: AttnWeights,
    pub(crate) down_cross: AttnWeights,
    pub(crate) to_mid: Linear,
    pub(crate) mid_self: AttnWeights,
    pub(crate) mid_cross: AttnWeights,
    pub(crate) from_mid: Linear,
    pub(crate) up_in: Linear,
    pub(crate) up_self: AttnWeights,
    pub(crate) up_cross: AttnWeights,
    pub(crate) out: Linear,
    /// `[C, 48]`: each latent cell maps to a 3×4×4 pixel patch.
    pub(crate) decoder: Tensor,
}

const WEIGHTS_MAGIC: &[u8; 4] = b"OBLW";
const WEIGHTS_VERSION: u8 = 1;
const DECODER_PATCH: usize = 4;

impl ModelWeights {
    /// Seed-pinned random initialisation.
    pub fn generate(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (c, d, dt) = (config.latent_channels, config.hidden, config.d_text);
        let down_in = Linear::random(&mut rng, 4 * c, d, 1.0);
        let down_self = AttnWeights::random(&mut rng, d, d);
        let down_cross = AttnWeights::random(&mut rng, d, dt);
        let to_mid = Linear::random(&mut rng, 4 * d, d, 1.0);
        let mid_self = AttnWeights::random(&mut rng, d, d);
        let mid_cross = AttnWeights::random(&mut rng, d, dt);
        let from_mid = Linear::random(&mut rng, d, 4 * d, 1.0);
        let up_in = Linear::random(&mut rng, 4 * c, d, 1.0);
        let up_self = AttnWeights::random(&mut rng, d, d);
        let up_cross = AttnWeights::random(&mut rng, d, dt);
        let out = Linear::random(&mut rng, d, 4 * c, 0.5);
        let decoder = Tensor::randn(vec![c, 3 * DECODER_PATCH * DECODER_PATCH], &mut rng)
            .scale(0.15)?;
        let mut w = Self {
            config,
            seed,
            fingerprint: 0,
            down_in,
            down_self,
            down_cross,
            to_mid,
            mid_self,
            mid_cross,
            from_mid,
            up_in,
            up_self,
            up_cross,
            out,
            decoder,
        };
        w.fingerprint = fingerprint(&w.matrices());
        Ok(w)
    }

    /// Expected `[rows, cols]` of every stored matrix, in file order.
    fn layout(config: &ModelConfig) -> Vec<[usize; 2]> {
        let (c, d, dt) = (config.latent_channels, config.hidden, config.d_text);
        let attn = |kv: usize| [[d, d], [kv, d], [kv, d], [d, d], [1, d]];
        let mut out = vec![[4 * c, d], [1, d]];
        out.extend(attn(d));
        out.extend(attn(dt));
        out.extend([[4 * d, d], [1, d]]);
        out.extend(attn(d));
        out.extend(attn(dt));
        out.extend([[d, 4 * d], [1, 4 * d], [4 * c, d], [1, d]]);
        out.extend(attn(d));
        out.extend(attn(dt));
        out.extend([[d, 4 * c], [1, 4 * c], [c, 48]]);
        out
    }

    fn assemble(config: ModelConfig, seed: u64, mats: Vec<Tensor>) -> Result<Self> {
        let layout = Self::layout(&config);
        if mats.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} matrices, found {}",
                layout.len(),
                mats.len()
            )));
        }
        for (i, (m, want)) in mats.iter().zip(&layout).enumerate() {
            if m.shape() != want {
                return Err(Error::Config(format!(
                    "matrix {i} has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        let mut it = mats.into_iter();
        let mut take = move || it.next().expect("length checked");
        let down_in = take_linear(&mut take);
        let down_self = take_attn(&mut take);
        let down_cross = take_attn(&mut take);
        let to_mid = take_linear(&mut take);
        let mid_self = take_attn(&mut take);
        let mid_cross = take_attn(&mut take);
        let from_mid = take_linear(&mut take);
        let up_in = take_linear(&mut take);
        let up_self = take_attn(&mut take);
        let up_cross = take_attn(&mut take);
        let out = take_linear(&mut take);
        let decoder = take();
        let mut w = Self {
            config,
            seed,
            fingerprint: 0,
            down_in,
            down_self,
            down_cross,
            to_mid,
            mid_self,
            mid_cross,
            from_mid,
            up_in,
            up_self,
            up_cross,
            out,
            decoder,
        };
        w.fingerprint = fingerprint(&w.matrices());
        Ok(w)
    }

    fn matrices(&self) -> Vec<&Tensor> {
        fn attn(a: &AttnWeights) -> [&Tensor; 5] {
            [&a.to_q, &a.to_k, &a.to_v, &a.to_out.weight, &a.to_out.bias]
        }
        let mut v = vec![&self.down_in.weight, &self.down_in.bias];
        v.extend(attn(&self.down_self));
        v.extend(attn(&self.down_cross));
        v.extend([&self.to_mid.weight, &self.to_mid.bias]);
        v.extend(attn(&self.mid_self));
        v.extend(attn(&self.mid_cross));
        v.extend([
            &self.from_mid.weight,
            &self.from_mid.bias,
            &self.up_in.weight,
            &self.up_in.bias,
        ]);
        v.extend(attn(&self.up_self));
        v.extend(attn(&self.up_cross));
        v.extend([&self.out.weight, &self.out.bias, &self.decoder]);
        v
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hash over every stored weight; identifies the model an
    /// [`AccelState`] was bound to.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn site(&self, site: Site) -> &AttnWeights {
        match site {
            Site::DownSelf => &self.down_self,
            Site::DownCross => &self.down_cross,
            Site::MidSelf => &self.mid_self,
            Site::MidCross => &self.mid_cross,
            Site::UpSelf => &self.up_self,
            Site::UpCross => &self.up_cross,
        }
    }

    /// Writes the flat `OBLW` weight file.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&[WEIGHTS_VERSION])?;
        for v in [
            c.latent_channels,
            c.res,
            c.d_text,
            c.hidden,
            c.token_capacity,
            c.heads,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        let mats = self.matrices();
        w.write_all(&(mats.len() as u32).to_le_bytes())?;
        for m in mats {
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            w.write_all(&(rows as u32).to_le_bytes())?;
            w.write_all(&(cols as u32).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Config("not an OBLW weight file".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != WEIGHTS_VERSION {
            return Err(Error::Config(format!(
                "unsupported weight file version {}",
                version[0]
            )));
        }
        let mut u32s = [0usize; 6];
        for v in u32s.iter_mut() {
            *v = read_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            latent_channels: u32s[0],
            res: u32s[1],
            d_text: u32s[2],
            hidden: u32s[3],
            token_capacity: u32s[4],
            heads: u32s[5],
        };
        config.validate()?;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let seed = u64::from_le_bytes(seed);
        let count = read_u32(&mut r)? as usize;
        let layout = Self::layout(&config);
        if count != layout.len() {
            return Err(Error::Config(format!(
                "weight file holds {count} matrices, expected {}",
                layout.len()
            )));
        }
        let mut mats = Vec::with_capacity(count);
        for want in layout {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            if [rows, cols] != want {
                return Err(Error::Config(format!(
                    "matrix shape [{rows}, {cols}] does not match expected {want:?}"
                )));
            }
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            mats.push(Tensor::new(vec![rows, cols], data)?);
        }
        Self::assemble(config, seed, mats)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// 64-bit FNV-1a.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn take_linear(take: &mut impl FnMut() -> Tensor) -> Linear {
    Linear {
        weight: take(),
        bias: take(),
    }
}

fn take_attn(take: &mut impl FnMut() -> Tensor) -> AttnWeights {
    AttnWeights {
        to_q: take(),
        to_k: take(),
        to_v: take(),
        to_out: take_linear(take),
    }
}

fn fingerprint(mats: &[&Tensor]) -> u64 {
    let mut bytes = Vec::new();
    for m in mats {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    stable_hash(&bytes)
}

/// Prompt conditioning: one row per token, padded to the token capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub matrix: Tensor,
    pub tokens: usize,
}

const PAD_TOKEN: &str = "\u{0}<pad>";

fn token_vector(token: &str, width: usize) -> Vec<f32> {
    let mut rng = Rng::new(stable_hash(token.as_bytes()));
    (0..width).map(|_| rng.next_gaussian() as f32).collect()
}

pub fn embed_prompt(prompt: &str, cfg: &ModelConfig) -> Result<TextEmbedding> {
    let tokens: Vec<&str> = prompt.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    let used = tokens.len().min(cfg.token_capacity);
    let pad = token_vector(PAD_TOKEN, cfg.d_text);
    let mut data = Vec::with_capacity(cfg.token_capacity * cfg.d_text);
    for i in 0..cfg.token_capacity {
        match tokens.get(i).filter(|_| i < used) {
            Some(tok) => data.extend(token_vector(tok, cfg.d_text)),
            None => data.extend_from_slice(&pad),
        }
    }
    Ok(TextEmbedding {
        matrix: Tensor::new(vec![cfg.token_capacity, cfg.d_text], data)?,
        tokens: used,
    })
}

/// Sinusoidal time vector of width `width` for schedule timestep `t`.
pub fn time_embedding(t: usize, width: usize) -> Tensor {
    let data = (0..width)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / width as f64);
            let arg = t as f64 * freq;
            (if i % 2 == 0 { arg.sin() } else { arg.cos() }) as f32
        })
        .collect();
    Tensor::new(vec![1, width], data).expect("finite")
}

/// `[C, res, res]` latent to `[res², C]` tokens.
fn latent_to_tokens(latent: &Tensor, c: usize, res: usize) -> Tensor {
    let src = latent.data();
    let mut data = vec![0.0; c * res * res];
    for ch in 0..c {
        for p in 0..res * res {
            data[p * c + ch] = src[ch * res * res + p];
        }
    }
    Tensor::new(vec![res * res, c], data).expect("finite")
}

fn tokens_to_latent(tokens: &Tensor, c: usize, res: usize) -> Tensor {
    let src = tokens.data();
    let mut data = vec![0.0; c * res * res];
    for p in 0..res * res {
        for ch in 0..c {
            data[ch * res * res + p] = src[p * c + ch];
        }
    }
    Tensor::new(vec![c, res, res], data).expect("finite")
}

/// `[side², ch]` grid tokens to `[(side/2)², 4·ch]` with features ordered
/// `(dy, dx, ch)`.
fn patchify(x: &Tensor, side: usize) -> Tensor {
    let ch = x.cols();
    let half = side / 2;
    let src = x.data();
    let mut data = Vec::with_capacity(x.len());
    for py in 0..half {
        for px in 0..half {
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = (2 * py + dy) * side + 2 * px + dx;
                    data.extend_from_slice(&src[p * ch..(p + 1) * ch]);
                }
            }
        }
    }
    Tensor::new(vec![half * half, 4 * ch], data).expect("finite")
}

/// Inverse of [`patchify`]: `[(side/2)², 4·ch]` to `[side², ch]`.
fn unpatchify(x: &Tensor, side: usize) -> Tensor {
    let ch = x.cols() / 4;
    let half = side / 2;
    let src = x.data();
    let mut data = vec![0.0; side * side * ch];
    for py in 0..half {
        for px in 0..half {
            let base = (py * half + px) * 4 * ch;
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = (2 * py + dy) * side + 2 * px + dx;
                    let off = base + (dy * 2 + dx) * ch;
                    data[p * ch..(p + 1) * ch].copy_from_slice(&src[off..off + ch]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, ch], data).expect("finite")
}

fn silu(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v / (1.0 + (-v).exp()), "silu")
}

/// Sampling position: `iteration` drives the acceleration gates (1 at the
/// noisiest step), `timestep` is the schedule index used for conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndex {
    pub iteration: usize,
    pub timestep: usize,
}

/// Per-site attention outputs and the mid features fed to the up block,
/// captured by [`ModelWeights::unet_forward_traced`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub sites: Vec<(Site, Vec<Tensor>)>,
    pub up_block_mid_input: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn site(&self, site: Site) -> Option<&[Tensor]> {
        self.sites
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, v)| v.as_slice())
    }
}

struct StepRun<'a> {
    step: StepIndex,
    accel: Option<&'a mut AccelState>,
    flops: &'a mut FlopCounter,
    trace: Option<&'a mut ForwardTrace>,
    gates: StepGates,
}

impl ModelWeights {
    /// Predicts ε for a batch `[N, C, res, res]`, one embedding per row.
    ///
    /// With `accel = None` every site evaluates plain attention; with a state
    /// the cache, skip and reuse gates decide what runs. Only executed matrix
    /// products are charged to `flops`.
    pub fn unet_forward(
        &self,
        latents: &Tensor,
        texts: &[TextEmbedding],
        step: StepIndex,
        accel: Option<&mut AccelState>,
        flops: &mut FlopCounter,
    ) -> Result<(Tensor, StepGates)> {
        self.forward_inner(latents, texts, step, accel, flops, None)
    }

    pub fn unet_forward_traced(
        &self,
        latents: &Tensor,
        texts: &[TextEmbedding],
        step: StepIndex,
        accel: Option<&mut AccelState>,
        flops: &mut FlopCounter,
        trace: &mut ForwardTrace,
    ) -> Result<(Tensor, StepGates)> {
        self.forward_inner(latents, texts, step, accel, flops, Some(trace))
    }

    fn forward_inner(
        &self,
        latents: &Tensor,
        texts: &[TextEmbedding],
        step: StepIndex,
        mut accel: Option<&mut AccelState>,
        flops: &mut FlopCounter,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<(Tensor, StepGates)> {
        let cfg = &self.config;
        let n = latents.rows();
        let mut want = vec![n];
        want.extend(cfg.latent_shape());
        if latents.shape() != want.as_slice() || n == 0 {
            return Err(Error::Dimension {
                op: "unet_forward",
                lhs: latents.shape().to_vec(),
                rhs: want,
            });
        }
        if texts.len() != n {
            return Err(Error::Input(format!(
                "{} text embeddings for a batch of {n}",
                texts.len()
            )));
        }
        if let Some(state) = accel.as_deref_mut() {
            state.bind(self.fingerprint, n)?;
        }
        let (c, res) = (cfg.latent_channels, cfg.res);
        let temb = time_embedding(step.timestep, cfg.hidden);
        let z_patches: Vec<Tensor> = latents
            .unstack()
            .iter()
            .map(|z| patchify(&latent_to_tokens(z, c, res), res))
            .collect();
        let text_rows: Vec<&Tensor> = texts.iter().map(|t| &t.matrix).collect();

        let skip = match accel.as_deref() {
            Some(state) => {
                let gate = accel::should_skip_blocks(step.iteration, state.config());
                if gate && !state.has_mid_features(n) {
                    log::warn!(
                        "skip gate fired at iteration {} without cached mid features; computing blocks",
                        step.iteration
                    );
                }
                gate && state.has_mid_features(n)
            }
            None => false,
        };

        let mut run = StepRun {
            step,
            accel,
            flops,
            trace,
            gates: StepGates::new(step.iteration),
        };
        run.gates.skipped_blocks = skip;

        let f_mid = if skip {
            run.accel
                .as_deref()
                .and_then(|s| s.mid_features().map(|f| f.to_vec()))
                .ok_or_else(|| Error::Internal("skip without mid features".into()))?
        } else {
            let mut h = Vec::with_capacity(n);
            for zp in &z_patches {
                let x = self.down_in.forward(zp, FlopKind::Conv, run.flops)?;
                h.push(silu(&x.add_row(&temb)?)?);
            }
            let h = self.attn_block(Site::DownSelf, Site::DownCross, h, &text_rows, &mut run)?;
            let side = res / 2;
            let mut m = Vec::with_capacity(n);
            for x in &h {
                let y = self.to_mid.forward(&patchify(x, side), FlopKind::Conv, run.flops)?;
                m.push(silu(&y)?);
            }
            let m = self.attn_block(Site::MidSelf, Site::MidCross, m, &text_rows, &mut run)?;
            if let Some(state) = run.accel.as_deref_mut() {
                state.store_mid_features(m.clone());
            }
            m
        };

        if let Some(t) = run.trace.as_deref_mut() {
            t.up_block_mid_input = f_mid.clone();
        }

        let mut u = Vec::with_capacity(n);
        for (fm, zp) in f_mid.iter().zip(&z_patches) {
            let lifted = self.from_mid.forward(fm, FlopKind::Conv, run.flops)?;
            let lifted = unpatchify(&lifted, res / 2);
            let direct = self.up_in.forward(zp, FlopKind::Conv, run.flops)?;
            u.push(silu(&lifted.add(&direct)?.add_row(&temb)?)?);
        }
        let u = self.attn_block(Site::UpSelf, Site::UpCross, u, &text_rows, &mut run)?;
        let mut eps = Vec::with_capacity(n);
        for x in &u {
            let y = self.out.forward(x, FlopKind::Conv, run.flops)?;
            eps.push(tokens_to_latent(&unpatchify(&y, res), c, res));
        }
        Ok((Tensor::stack(&eps)?, run.gates))
    }

    /// Self-attention then cross-attention, each with residual.
    fn attn_block(
        &self,
        self_site: Site,
        cross_site: Site,
        h: Vec<Tensor>,
        text: &[&Tensor],
        run: &mut StepRun<'_>,
    ) -> Result<Vec<Tensor>> {
        let kv: Vec<&Tensor> = h.iter().collect();
        let o = self.run_site(self_site, &h, &kv, run)?;
        let h = self.residual(self_site, h, &o, run)?;
        let o = self.run_site(cross_site, &h, text, run)?;
        self.residual(cross_site, h, &o, run)
    }

    fn residual(
        &self,
        site: Site,
        h: Vec<Tensor>,
        o: &[Tensor],
        run: &mut StepRun<'_>,
    ) -> Result<Vec<Tensor>> {
        let proj = &self.site(site).to_out;
        h.iter()
            .zip(o)
            .map(|(x, oi)| x.add(&proj.forward(oi, FlopKind::ToOut, run.flops)?))
            .collect()
    }

    fn run_site(
        &self,
        site: Site,
        q_in: &[Tensor],
        kv_in: &[&Tensor],
        run: &mut StepRun<'_>,
    ) -> Result<Vec<Tensor>> {
        let w = self.site(site);
        let out = match run.accel.as_deref_mut() {
            None => plain_batch(q_in, kv_in, w, run.flops)?,
            Some(state) => {
                let t = run.step.iteration;
                let cfg = *state.config();
                let cached = if accel::should_recompute_attention(t, &cfg) {
                    None
                } else {
                    state.cached_output(site, q_in.len()).map(|o| o.to_vec())
                };
                match cached {
                    Some(o) => {
                        run.gates.mark_cached(site);
                        state.note_hit(site, t);
                        o
                    }
                    None => {
                        let o = if accel::reuse_active(t, &cfg) {
                            run.gates.mark_reused(site);
                            accel::reuse_attention_batch(q_in, kv_in, w, cfg.pivot_index, run.flops)?
                        } else {
                            plain_batch(q_in, kv_in, w, run.flops)?
                        };
                        state.store_output(site, t, o.clone());
                        o
                    }
                }
            }
        };
        if let Some(t) = run.trace.as_deref_mut() {
            t.sites.push((site, out.clone()));
        }
        Ok(out)
    }

    /// Predicts ε with every acceleration absent.
    pub fn unet_forward_plain(
        &self,
        latents: &Tensor,
        texts: &[TextEmbedding],
        step: StepIndex,
        flops: &mut FlopCounter,
    ) -> Result<Tensor> {
        self.unet_forward(latents, texts, step, None, flops).map(|(e, _)| e)
    }
}

fn plain_batch(
    q_in: &[Tensor],
    kv_in: &[&Tensor],
    w: &AttnWeights,
    flops: &mut FlopCounter,
) -> Result<Vec<Tensor>> {
    q_in.iter()
        .zip(kv_in)
        .map(|(q, kv)| attention(q, kv, w, flops))
        .collect()
}

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.height + y) * self.width + x]
    }

    /// Binary portable pixmap (`P6`, 8 bits per channel).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for ch in 0..3 {
                    out.push((self.pixel(ch, y, x) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

/// Fixed affine decoder: every latent cell becomes a 4×4 RGB patch
/// `clamp(0.5 + zᵀ·D, 0, 1)`.
pub fn decode_latent(latent: &Tensor, w: &ModelWeights) -> Result<Image> {
    let cfg = w.config();
    if latent.shape() != cfg.latent_shape().as_slice() {
        return Err(Error::Dimension {
            op: "decode_latent",
            lhs: latent.shape().to_vec(),
            rhs: cfg.latent_shape(),
        });
    }
    let (c, res) = (cfg.latent_channels, cfg.res);
    let side = res * DECODER_PATCH;
    let dec = w.decoder.data();
    let z = latent.data();
    let mut data = vec![0.0f32; 3 * side * side];
    for y in 0..res {
        for x in 0..res {
            for ch in 0..3 {
                for dy in 0..DECODER_PATCH {
                    for dx in 0..DECODER_PATCH {
                        let col = (ch * DECODER_PATCH + dy) * DECODER_PATCH + dx;
                        let mut v = 0.5f32;
                        for lc in 0..c {
                            v += z[lc * res * res + y * res + x] * dec[lc * 48 + col];
                        }
                        let py = y * DECODER_PATCH + dy;
                        let px = x * DECODER_PATCH + dx;
                        data[(ch * side + py) * side + px] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Image {
        width: side,
        height: side,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights() -> ModelWeights {
        ModelWeights::generate(ModelConfig::default(), 5).unwrap()
    }

    /// Eq-by-hand attention in f64.
    fn oracle_attention(q_in: &Tensor, kv_in: &Tensor, w: &AttnWeights) -> Vec<f64> {
        let mm = |a: &[f64], b: &Tensor, m: usize, n: usize| {
            let p = b.cols();
            let bd = b.data();
            let mut out = vec![0.0; m * p];
            for i in 0..m {
                for j in 0..p {
                    for l in 0..n {
                        out[i * p + j] += a[i * n + l] * bd[l * p + j] as f64;
                    }
                }
            }
            out
        };
        let wide = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (lq, lk, d) = (q_in.rows(), kv_in.rows(), w.width());
        let q = mm(&wide(q_in), &w.to_q, lq, q_in.cols());
        let k = mm(&wide(kv_in), &w.to_k, lk, kv_in.cols());
        let v = mm(&wide(kv_in), &w.to_v, lk, kv_in.cols());
        let mut out = vec![0.0; lq * d];
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..d).map(|l| q[i * d + l] * k[j * d + l]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for j in 0..lk {
                let m = (scores[j] - max).exp() / z;
                for l in 0..d {
                    out[i * d + l] += m * v[j * d + l];
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_token() {
        let w = weights();
        let mut rng = Rng::new(1);
        let q = Tensor::randn(vec![1, 32], &mut rng);
        let kv = Tensor::randn(vec![1, 32], &mut rng);
        let mut f = FlopCounter::new();
        let o = attention(&q, &kv, &w.down_self, &mut f).unwrap();
        let v = kv.matmul(&w.down_self.to_v).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-6);
    }

    #[test]
    fn attention_zero_query_key_is_mean_of_values() {
        let mut w = weights().down_self.clone();
        w.to_q = Tensor::zeros(vec![32, 32]);
        w.to_k = Tensor::zeros(vec![32, 32]);
        let mut rng = Rng::new(2);
        let q = Tensor::randn(vec![3, 32], &mut rng);
        let kv = Tensor::randn(vec![5, 32], &mut rng);
        let o = attention(&q, &kv, &w, &mut FlopCounter::new()).unwrap();
        let v = kv.matmul(&w.to_v).unwrap();
        for i in 0..3 {
            for l in 0..32 {
                let mean: f32 = (0..5).map(|j| v.data()[j * 32 + l]).sum::<f32>() / 5.0;
                assert!((o.data()[i * 32 + l] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_matches_direct_oracle() {
        let w = weights();
        let mut rng = Rng::new(3);
        let q = Tensor::randn(vec![6, 32], &mut rng);
        let kv = Tensor::randn(vec![4, 32], &mut rng);
        let got = attention(&q, &kv, &w.mid_cross, &mut FlopCounter::new()).unwrap();
        for (g, o) in got.data().iter().zip(oracle_attention(&q, &kv, &w.mid_cross)) {
            assert!((*g as f64 - o).abs() < 1e-5);
        }
    }

    #[test]
    fn embedding_determinism_and_locality() {
        let cfg = ModelConfig::default();
        let a = embed_prompt("a red bicycle", &cfg).unwrap();
        assert_eq!(a, embed_prompt("a red bicycle", &cfg).unwrap());
        let b = embed_prompt("a blue bicycle", &cfg).unwrap();
        for row in 0..cfg.token_capacity {
            let same = a.matrix.row(row).unwrap() == b.matrix.row(row).unwrap();
            assert_eq!(same, row != 1, "row {row}");
        }
        assert!(matches!(embed_prompt("  \t ", &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn embedding_swaps_rows_for_swapped_tokens() {
        let cfg = ModelConfig::default();
        let ab = embed_prompt("a b", &cfg).unwrap();
        let ba = embed_prompt("b a", &cfg).unwrap();
        let va = token_vector("a", cfg.d_text);
        let vb = token_vector("b", cfg.d_text);
        assert_eq!(ab.matrix.row(0).unwrap().data(), va.as_slice());
        assert_eq!(ab.matrix.row(1).unwrap().data(), vb.as_slice());
        assert_eq!(ba.matrix.row(0).unwrap(), ab.matrix.row(1).unwrap());
        assert_eq!(ba.matrix.row(1).unwrap(), ab.matrix.row(0).unwrap());
        assert_eq!(ab.tokens, 2);
    }

    #[test]
    fn embedding_truncates() {
        let cfg = ModelConfig::default();
        let long: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let e = embed_prompt(&long.join(" "), &cfg).unwrap();
        assert_eq!(e.tokens, cfg.token_capacity);
        assert_eq!(e.matrix.shape(), &[16, 32]);
    }

    #[test]
    fn patchify_roundtrip() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(vec![64, 3], &mut rng);
        assert_eq!(unpatchify(&patchify(&x, 8), 8), x);
    }

    #[test]
    fn duplicated_rows_give_equal_outputs() {
        let w = weights();
        let cfg = *w.config();
        let z = Tensor::randn(cfg.latent_shape(), &mut Rng::new(9));
        let batch = Tensor::stack(&[z.clone(), z]).unwrap();
        let text = embed_prompt("portrait of a person", &cfg).unwrap();
        let (eps, _) = w
            .unet_forward(
                &batch,
                &[text.clone(), text],
                StepIndex { iteration: 1, timestep: 25 },
                None,
                &mut FlopCounter::new(),
            )
            .unwrap();
        assert_eq!(eps.row(0).unwrap(), eps.row(1).unwrap());
    }

    #[test]
    fn batch_rows_are_independent_under_permutation() {
        let w = weights();
        let cfg = *w.config();
        let mut rng = Rng::new(10);
        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(cfg.latent_shape(), &mut rng)).collect();
        let texts: Vec<TextEmbedding> = ["a cat", "a dog", "a fox"]
            .iter()
            .map(|p| embed_prompt(p, &cfg).unwrap())
            .collect();
        let step = StepIndex { iteration: 3, timestep: 23 };
        let (eps, _) = w
            .unet_forward(&Tensor::stack(&zs).unwrap(), &texts, step, None, &mut FlopCounter::new())
            .unwrap();
        let perm = [2, 0, 1];
        let pz: Vec<Tensor> = perm.iter().map(|&i| zs[i].clone()).collect();
        let pt: Vec<TextEmbedding> = perm.iter().map(|&i| texts[i].clone()).collect();
        let (peps, _) = w
            .unet_forward(&Tensor::stack(&pz).unwrap(), &pt, step, None, &mut FlopCounter::new())
            .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(peps.row(k).unwrap(), eps.row(i).unwrap());
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let w = weights();
        let cfg = *w.config();
        let text = embed_prompt("x", &cfg).unwrap();
        let bad = Tensor::zeros(vec![1, 4, 8, 8]);
        let step = StepIndex { iteration: 1, timestep: 25 };
        assert!(w.unet_forward(&bad, &[text.clone()], step, None, &mut FlopCounter::new()).is_err());
        let ok = Tensor::zeros(vec![2, 4, 16, 16]);
        assert!(w.unet_forward(&ok, &[text], step, None, &mut FlopCounter::new()).is_err());
    }

    #[test]
    fn decode_zero_is_mid_gray() {
        let w = weights();
        let img = decode_latent(&Tensor::zeros(vec![4, 16, 16]), &w).unwrap();
        assert_eq!((img.width, img.height), (64, 64));
        assert_eq!(img.data.len(), 3 * 64 * 64);
        assert!(img.data.iter().all(|&v| v == 0.5));
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    }

    #[test]
    fn decode_is_patch_local() {
        let w = weights();
        let mut rng = Rng::new(12);
        let a = Tensor::randn(vec![4, 16, 16], &mut rng);
        let mut data = a.data().to_vec();
        let (cy, cx) = (5, 9);
        for ch in 0..4 {
            data[ch * 256 + cy * 16 + cx] += 1.0;
        }
        let b = Tensor::new(vec![4, 16, 16], data).unwrap();
        let (ia, ib) = (decode_latent(&a, &w).unwrap(), decode_latent(&b, &w).unwrap());
        let mut changed = 0;
        for ch in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let inside = y / 4 == cy && x / 4 == cx;
                    let differs = ia.pixel(ch, y, x) != ib.pixel(ch, y, x);
                    if !inside {
                        assert!(!differs, "pixel ({ch},{y},{x}) outside the patch changed");
                    }
                    changed += differs as usize;
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn weight_file_roundtrip() {
        let w = weights();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"OBLW");
        assert_eq!(bytes[4], 1);
        let back = ModelWeights::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, w);
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(ModelWeights::read_from(broken.as_slice()).is_err());
        assert!(ModelWeights::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn weights_depend_only_on_config_and_seed() {
        assert_eq!(weights(), weights());
        let other = ModelWeights::generate(ModelConfig::default(), 6).unwrap();
        assert_ne!(other.fingerprint(), weights().fingerprint());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.res = 12;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.heads = 2;
        assert!(c.validate().is_err());
    }
}
