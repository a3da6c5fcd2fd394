//! Dense row-major `f32` tensors, a counter-based Gaussian generator and the
//! FLOPs meter every matrix product in the pipeline goes through.
//!
//! Values stay finite: every constructor and public operation rejects NaN and
//! infinities instead of propagating them.

use std::fmt;

use half::f16;

use crate::error::{Error, Result};

/// Dense tensor with an explicit shape, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Fills a tensor with standard normal draws from `rng`.
    pub fn randn(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.next_gaussian() as f32).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing extent of a matrix; for higher ranks, the product of all
    /// dimensions after the first.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Slice `index` along the leading dimension.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        let rows = self.rows();
        if index >= rows || self.shape.is_empty() {
            return Err(Error::Dimension {
                op: "row",
                lhs: self.shape.clone(),
                rhs: vec![index],
            });
        }
        let width = self.cols();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * width..(index + 1) * width].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Splits along the leading dimension.
    pub fn unstack(&self) -> Vec<Tensor> {
        (0..self.rows()).map(|i| self.row(i).expect("in range")).collect()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        finite(Tensor {
            shape: self.shape.clone(),
            data,
        }, "add")
    }

    /// Adds a `1×n` (or length-`n`) row vector to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("add_row")?;
        if row.len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for (v, b) in data[i * n..(i + 1) * n].iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        finite(Tensor {
            shape: self.shape.clone(),
            data,
        }, "add_row")
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        self.map(|v| v * factor, "scale")
    }

    pub fn map(&self, f: impl Fn(f32) -> f32, op: &'static str) -> Result<Tensor> {
        finite(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }, op)
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "axpby",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        finite(Tensor {
            shape: self.shape.clone(),
            data,
        }, "axpby")
    }

    /// Standard matrix product `[m×n] · [n×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("matmul")?;
        let (n2, p) = other.expect_matrix("matmul")?;
        if n != n2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m * p];
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            let out_row = &mut out[i * p..(i + 1) * p];
            for (l, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[l * p..(l + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        finite(Tensor {
            shape: vec![m, p],
            data: out,
        }, "matmul")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("softmax_rows")?;
        let mut data = self.data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v as f64;
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / sum) as f32;
            }
        }
        finite(Tensor {
            shape: self.shape.clone(),
            data,
        }, "softmax_rows")
    }

    /// Quantizes every element to binary16 (round to nearest even) and widens
    /// it back.
    pub fn fp16_roundtrip(&self) -> Result<Tensor> {
        let bits = self.to_f16_bits()?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: bits.into_iter().map(|b| f16::from_bits(b).to_f32()).collect(),
        })
    }

    /// Binary16 bit patterns of every element, in storage order.
    pub fn to_f16_bits(&self) -> Result<Vec<u16>> {
        self.data
            .iter()
            .map(|&v| {
                let h = f16::from_f32(v);
                if h.is_infinite() {
                    Err(Error::Range {
                        value: v,
                        context: "binary16",
                    })
                } else {
                    Ok(h.to_bits())
                }
            })
            .collect()
    }

    pub fn from_f16_bits(shape: Vec<usize>, bits: &[u16]) -> Result<Tensor> {
        Tensor::new(shape, bits.iter().map(|&b| f16::from_bits(b).to_f32()).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based SplitMix64 generator: draw `i` is a pure function of
/// `(seed, i)`, so cloud and device reproduce the same stream from a seed.
///
/// Gaussians use Box–Muller; both values of each pair are consumed in order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    position: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        let mut z = self
            .seed
            .wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] keeps ln finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }
}

/// Where a counted FLOP was spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlopKind {
    /// Convolution-as-matrix projections outside attention.
    Conv,
    ToQ,
    ToK,
    ToV,
    /// `Q·Kᵀ` scores.
    Scores,
    Softmax,
    /// `M·V`.
    Mix,
    /// Attention output projection.
    ToOut,
}

impl FlopKind {
    pub const ALL: [FlopKind; 8] = [
        FlopKind::Conv,
        FlopKind::ToQ,
        FlopKind::ToK,
        FlopKind::ToV,
        FlopKind::Scores,
        FlopKind::Softmax,
        FlopKind::Mix,
        FlopKind::ToOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopKind::Conv => "conv",
            FlopKind::ToQ => "to_q",
            FlopKind::ToK => "to_k",
            FlopKind::ToV => "to_v",
            FlopKind::Scores => "scores",
            FlopKind::Softmax => "softmax",
            FlopKind::Mix => "mix",
            FlopKind::ToOut => "to_out",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Parts of the attention-map computation that batch reuse performs once.
    pub fn is_attention_map(self) -> bool {
        matches!(
            self,
            FlopKind::ToQ | FlopKind::ToK | FlopKind::Scores | FlopKind::Softmax
        )
    }
}

/// Softmax cost per score element: scale, max, subtract, exp, normalise.
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;

/// Session FLOPs counter. A multiply-accumulate counts as 2 FLOPs; elementwise
/// bias, residual and activation work is not counted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    by_kind: [u64; 8],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.by_kind.iter().sum()
    }

    pub fn get(&self, kind: FlopKind) -> u64 {
        self.by_kind[kind.index()]
    }

    pub fn attention_map(&self) -> u64 {
        FlopKind::ALL
            .iter()
            .filter(|k| k.is_attention_map())
            .map(|&k| self.get(k))
            .sum()
    }

    pub fn record(&mut self, kind: FlopKind, flops: u64) {
        self.by_kind[kind.index()] += flops;
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.by_kind.iter_mut().zip(other.by_kind) {
            *a += b;
        }
    }

    /// Difference `self - earlier`; counters only grow, so this is exact.
    pub fn since(&self, earlier: &FlopCounter) -> FlopCounter {
        let mut out = FlopCounter::default();
        for i in 0..out.by_kind.len() {
            out.by_kind[i] = self.by_kind[i] - earlier.by_kind[i];
        }
        out
    }

    /// Counted matrix product: adds `2·m·n·p` under `kind`.
    pub fn matmul(&mut self, kind: FlopKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = a.matmul(b)?;
        let flops = 2 * (a.rows() * a.cols() * b.cols()) as u64;
        self.record(kind, flops);
        Ok(out)
    }

    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = a.softmax_rows()?;
        self.record(FlopKind::Softmax, SOFTMAX_FLOPS_PER_ELEMENT * a.len() as u64);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for l in 0..n {
                    out[i * p + j] += a[i * n + l] * b[l * p + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn zero_row_product() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 5.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Tensor::randn(vec![3, 4], &mut rng);
        let b = Tensor::randn(vec![4, 2], &mut rng);
        let wide = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let oracle = naive_matmul(&wide(&a), &wide(&b), 3, 4, 2);
        let got = a.matmul(&b).unwrap();
        for (g, o) in got.data().iter().zip(oracle) {
            assert!((*g as f64 - o).abs() < 1e-6, "{g} vs {o}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        match a.matmul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn counter_charges_two_mnp() {
        let mut c = FlopCounter::new();
        c.matmul(FlopKind::Conv, &Tensor::zeros(vec![3, 4]), &Tensor::zeros(vec![4, 5]))
            .unwrap();
        assert_eq!(c.total(), 2 * 3 * 4 * 5);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap().softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap().softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);

        let s = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap().softmax_rows().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((*v as f64 - want).abs() < 1e-6);
        }
    }

    /// Bit-level binary16 encoder (round to nearest even) for normal and
    /// subnormal halves, written from the format definition.
    fn binary16_oracle(x: f32) -> f64 {
        let v = x as f64;
        if v == 0.0 {
            return 0.0;
        }
        let sign = v.signum();
        let a = v.abs();
        let exp = a.log2().floor() as i32;
        let exp = exp.max(-14);
        let ulp = 2f64.powi(exp - 10);
        let q = a / ulp;
        let fl = q.floor();
        let frac = q - fl;
        let mant = if frac > 0.5 || (frac == 0.5 && fl % 2.0 == 1.0) {
            fl + 1.0
        } else {
            fl
        };
        sign * mant * ulp
    }

    #[test]
    fn fp16_examples() {
        let t = Tensor::new(vec![3], vec![0.0, 1.0, 0.1]).unwrap();
        let r = t.fp16_roundtrip().unwrap();
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[1], 1.0);
        assert_eq!(r.data()[2] as f64, 0.0999755859375);
        assert_eq!(binary16_oracle(0.1), 0.0999755859375);
    }

    #[test]
    fn fp16_matches_bit_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..2000 {
            let x = (rng.next_gaussian() * 50.0) as f32;
            let got = Tensor::new(vec![1], vec![x]).unwrap().fp16_roundtrip().unwrap();
            assert_eq!(got.data()[0] as f64, binary16_oracle(x), "x = {x}");
        }
    }

    #[test]
    fn fp16_overflow_is_range_error() {
        let t = Tensor::new(vec![1], vec![70000.0]).unwrap();
        assert!(matches!(t.fp16_roundtrip(), Err(Error::Range { .. })));
        let ok = Tensor::new(vec![1], vec![65504.0]).unwrap();
        assert_eq!(ok.fp16_roundtrip().unwrap().data()[0], 65504.0);
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_gaussian().to_bits(), b.next_gaussian().to_bits());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(3);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn stack_and_row() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.row(1).unwrap(), b);
        assert_eq!(s.unstack(), vec![a, b]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use super::Rng;

        proptest! {
            #[test]
            fn fp16_roundtrip_is_idempotent(xs in proptest::collection::vec(-65000.0f32..65000.0, 1..64)) {
                let t = Tensor::new(vec![xs.len()], xs).unwrap();
                let once = t.fp16_roundtrip().unwrap();
                let twice = once.fp16_roundtrip().unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn identity_is_exact(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
                let a = Tensor::randn(vec![m, n], &mut Rng::new(seed));
                prop_assert_eq!(Tensor::identity(m).matmul(&a).unwrap(), a);
            }

            #[test]
            fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-50.0f32..50.0, 1..32)) {
                let n = xs.len();
                let s = Tensor::new(vec![1, n], xs).unwrap().softmax_rows().unwrap();
                let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
