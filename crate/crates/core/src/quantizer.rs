//! Group-wise lookup-free quantization.
//!
//! A latent of shape `(h, w, d)` is viewed as `(h, w, g, d')` with
//! `d = g * d'`; channel `k * d' + t` becomes channel `t` of group `k`.
//! Each channel is quantized to its sign and each group's sign pattern is
//! read as a `d'`-bit token id, most significant bit first, `+1` as bit 1.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest group width whose token ids fit in a `u32`.
pub const MAX_INDEX_BITS: usize = 32;

/// Value assigned to `sign(0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieRule {
    #[default]
    Positive,
    Negative,
}

/// Optional squashing applied to the encoder output before quantization and
/// entropy estimation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PreActivation {
    #[default]
    None,
    Tanh,
}

impl std::str::FromStr for PreActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("pre_activation must be none|tanh, got {other}"))),
        }
    }
}

impl std::fmt::Display for PreActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantConfig {
    groups: usize,
    group_channels: usize,
    pub tie_rule: TieRule,
    pub pre_activation: PreActivation,
}

impl QuantConfig {
    pub fn new(groups: usize, group_channels: usize) -> Result<Self> {
        if groups == 0 || group_channels == 0 {
            return Err(Error::invalid(format!(
                "group count and group width must be >= 1 (g={groups}, d'={group_channels})"
            )));
        }
        Ok(Self {
            groups,
            group_channels,
            tie_rule: TieRule::default(),
            pre_activation: PreActivation::default(),
        })
    }

    /// `g`
    pub fn groups(&self) -> usize {
        self.groups
    }

    /// `d'`
    pub fn group_channels(&self) -> usize {
        self.group_channels
    }

    /// `d = g * d'`
    pub fn channels(&self) -> usize {
        self.groups * self.group_channels
    }

    /// Codes per group, `2^d'`. `None` if it does not fit in a `usize`.
    pub fn group_codebook_size(&self) -> Option<usize> {
        1usize.checked_shl(self.group_channels as u32)
    }

    /// log2 of the implied codebook size, `g * d'`.
    pub fn codebook_bits(&self) -> usize {
        self.channels()
    }
}

/// Ungrouped latent `(h, w, d)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl Latent {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w * d {
            return Err(Error::invalid(format!(
                "latent ({h},{w},{d}) needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        Ok(Self { h, w, d, values })
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.w + j) * self.d + c]
    }
}

/// Latent viewed as `(h, w, g, d')`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedLatent {
    pub h: usize,
    pub w: usize,
    pub g: usize,
    pub d_prime: usize,
    pub values: Vec<f64>,
}

impl GroupedLatent {
    pub fn at(&self, i: usize, j: usize, k: usize, t: usize) -> f64 {
        self.values[((i * self.w + j) * self.g + k) * self.d_prime + t]
    }

    /// Slice holding group `k` at position `(i, j)`.
    pub fn group(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let off = ((i * self.w + j) * self.g + k) * self.d_prime;
        &self.values[off..off + self.d_prime]
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Inverse of [`group_reshape`].
    pub fn ungroup(&self) -> Latent {
        Latent {
            h: self.h,
            w: self.w,
            d: self.g * self.d_prime,
            values: self.values.clone(),
        }
    }
}

/// Token ids `(h, w, g)`, each below `2^d'`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub g: usize,
    pub d_prime: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, g: usize, d_prime: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != h * w * g {
            return Err(Error::invalid(format!(
                "token grid ({h},{w},{g}) needs {} ids, got {}",
                h * w * g,
                indices.len()
            )));
        }
        if d_prime == 0 || d_prime > MAX_INDEX_BITS {
            return Err(Error::invalid(format!("group width {d_prime} outside 1..={MAX_INDEX_BITS}")));
        }
        let limit = 1u64 << d_prime;
        if let Some(bad) = indices.iter().find(|&&i| u64::from(i) >= limit) {
            return Err(Error::invalid(format!("token id {bad} >= 2^{d_prime}")));
        }
        Ok(Self {
            h,
            w,
            g,
            d_prime,
            indices,
        })
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> u32 {
        self.indices[(i * self.w + j) * self.g + k]
    }

    /// `(h, w, g, d')` array of `±1` reconstructed from the ids.
    pub fn to_signs(&self) -> GroupedLatent {
        let mut values = Vec::with_capacity(self.indices.len() * self.d_prime);
        for &idx in &self.indices {
            for t in 0..self.d_prime {
                let bit = (idx >> (self.d_prime - 1 - t)) & 1;
                values.push(if bit == 1 { 1.0 } else { -1.0 });
            }
        }
        GroupedLatent {
            h: self.h,
            w: self.w,
            g: self.g,
            d_prime: self.d_prime,
            values,
        }
    }
}

/// A point of `{-1, +1}^d'`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignCode(Vec<i8>);

impl SignCode {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::invalid("sign code entries must be -1 or +1"));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn code_to_index(code: &SignCode) -> Result<u32> {
    if code.len() > MAX_INDEX_BITS {
        return Err(Error::invalid(format!(
            "code of length {} does not fit a {MAX_INDEX_BITS}-bit id",
            code.len()
        )));
    }
    Ok(code
        .bits()
        .iter()
        .fold(0u32, |acc, &b| (acc << 1) | u32::from(b > 0)))
}

pub fn index_to_code(index: u32, d_prime: usize) -> Result<SignCode> {
    if d_prime == 0 || d_prime > MAX_INDEX_BITS {
        return Err(Error::invalid(format!("group width {d_prime} outside 1..={MAX_INDEX_BITS}")));
    }
    if u64::from(index) >= 1u64 << d_prime {
        return Err(Error::invalid(format!("token id {index} >= 2^{d_prime}")));
    }
    Ok(SignCode(
        (0..d_prime)
            .map(|t| if (index >> (d_prime - 1 - t)) & 1 == 1 { 1 } else { -1 })
            .collect(),
    ))
}

/// `(d', 2^d')` matrix whose column `m` is `index_to_code(m)`.
pub fn code_matrix(d_prime: usize) -> Result<Tensor> {
    let k = 1usize
        .checked_shl(d_prime as u32)
        .filter(|_| d_prime <= MAX_INDEX_BITS)
        .ok_or_else(|| Error::invalid(format!("group width {d_prime} too large")))?;
    let mut data = vec![0.0; d_prime * k];
    for m in 0..k {
        for t in 0..d_prime {
            let bit = (m >> (d_prime - 1 - t)) & 1;
            data[t * k + m] = if bit == 1 { 1.0 } else { -1.0 };
        }
    }
    Tensor::new(vec![d_prime, k], data)
}

pub fn group_reshape(u: &Latent, cfg: &QuantConfig) -> Result<GroupedLatent> {
    if u.d != cfg.channels() {
        return Err(Error::invalid(format!(
            "latent has {} channels but g*d' = {}*{} = {}",
            u.d,
            cfg.groups(),
            cfg.group_channels(),
            cfg.channels()
        )));
    }
    // (h, w, d) and (h, w, g, d') share one row-major layout.
    Ok(GroupedLatent {
        h: u.h,
        w: u.w,
        g: cfg.groups(),
        d_prime: cfg.group_channels(),
        values: u.values.clone(),
    })
}

#[inline]
pub fn sign(x: f64, tie: TieRule) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        match tie {
            TieRule::Positive => 1.0,
            TieRule::Negative => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub signs: GroupedLatent,
    pub tokens: TokenGrid,
}

pub fn sign_quantize(x: &GroupedLatent, tie: TieRule) -> Result<Quantized> {
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("sign_quantize"));
    }
    if x.d_prime > MAX_INDEX_BITS {
        return Err(Error::invalid(format!("group width {} too large for token ids", x.d_prime)));
    }
    let signs: Vec<f64> = x.values.iter().map(|&v| sign(v, tie)).collect();
    let indices = signs
        .chunks(x.d_prime)
        .map(|grp| grp.iter().fold(0u32, |acc, &s| (acc << 1) | u32::from(s > 0.0)))
        .collect();
    Ok(Quantized {
        signs: GroupedLatent {
            h: x.h,
            w: x.w,
            g: x.g,
            d_prime: x.d_prime,
            values: signs,
        },
        tokens: TokenGrid {
            h: x.h,
            w: x.w,
            g: x.g,
            d_prime: x.d_prime,
            indices,
        },
    })
}

/// `u + stop_gradient(signs - u)`: the value of `signs` with the gradient of `u`.
pub fn straight_through(graph: &mut Graph, u: NodeId, signs: Tensor) -> Result<NodeId> {
    let q = graph.constant(signs);
    let diff = graph.sub(q, u)?;
    let detached = graph.stop_gradient(diff)?;
    graph.add(u, detached)
}

pub fn pre_activate(graph: &mut Graph, u: NodeId, cfg: &QuantConfig) -> Result<NodeId> {
    match cfg.pre_activation {
        PreActivation::None => Ok(u),
        PreActivation::Tanh => graph.tanh(u),
    }
}

/// Per-image `(h, w, d)` latents out of an `(n, d, h, w)` batch.
pub fn latents_from_nchw(t: &Tensor) -> Result<Vec<Latent>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected (n,d,h,w), got {s:?}")));
    }
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let data = t.data();
    Ok((0..n)
        .map(|b| {
            let mut values = vec![0.0; h * w * d];
            for c in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        values[(i * w + j) * d + c] = data[((b * d + c) * h + i) * w + j];
                    }
                }
            }
            Latent { h, w, d, values }
        })
        .collect())
}

/// Inverse of [`latents_from_nchw`].
pub fn latents_to_nchw(latents: &[Latent]) -> Result<Tensor> {
    let first = latents
        .first()
        .ok_or_else(|| Error::invalid("empty latent batch"))?;
    let (h, w, d) = (first.h, first.w, first.d);
    let mut data = vec![0.0; latents.len() * d * h * w];
    for (b, l) in latents.iter().enumerate() {
        if (l.h, l.w, l.d) != (h, w, d) {
            return Err(Error::invalid("latent batch with mixed shapes"));
        }
        for c in 0..d {
            for i in 0..h {
                for j in 0..w {
                    data[((b * d + c) * h + i) * w + j] = l.values[(i * w + j) * d + c];
                }
            }
        }
    }
    Tensor::new(vec![latents.len(), d, h, w], data)
}

/// Quantize an `(n, d, h, w)` batch: sign tensor in the same layout plus one
/// token grid per image.
pub fn quantize_batch(u: &Tensor, cfg: &QuantConfig) -> Result<(Tensor, Vec<TokenGrid>)> {
    let mut signs = Vec::new();
    let mut grids = Vec::new();
    for latent in latents_from_nchw(u)? {
        let q = sign_quantize(&group_reshape(&latent, cfg)?, cfg.tie_rule)?;
        signs.push(q.signs.ungroup());
        grids.push(q.tokens);
    }
    Ok((latents_to_nchw(&signs)?, grids))
}

/// `(n, d, h, w)` sign tensor for a batch of token grids.
pub fn signs_from_tokens(grids: &[TokenGrid]) -> Result<Tensor> {
    let latents: Vec<Latent> = grids.iter().map(|t| t.to_signs().ungroup()).collect();
    latents_to_nchw(&latents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(bits: &[i8]) -> SignCode {
        SignCode::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn msb_first_indices() {
        assert_eq!(code_to_index(&code(&[-1, -1])).unwrap(), 0);
        assert_eq!(code_to_index(&code(&[1, 1])).unwrap(), 3);
        assert_eq!(code_to_index(&code(&[1, -1])).unwrap(), 2);
    }

    #[test]
    fn index_out_of_range_is_an_error() {
        assert!(index_to_code(4, 2).is_err());
        assert!(index_to_code(0, 0).is_err());
    }

    #[test]
    fn index_code_bijection_exhaustive() {
        for d_prime in 1..=16usize {
            for i in 0..(1u32 << d_prime) {
                let c = index_to_code(i, d_prime).unwrap();
                assert_eq!(code_to_index(&c).unwrap(), i);
            }
        }
    }

    #[test]
    fn grouping_splits_channels_in_order() {
        let cfg = QuantConfig::new(2, 2).unwrap();
        let u = Latent::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gl = group_reshape(&u, &cfg).unwrap();
        assert_eq!(gl.group(0, 0, 0), &[1.0, 2.0]);
        assert_eq!(gl.group(0, 0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn single_group_equals_input() {
        let cfg = QuantConfig::new(1, 3).unwrap();
        let u = Latent::new(1, 2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let gl = group_reshape(&u, &cfg).unwrap();
        assert_eq!(gl.group(0, 1, 0), &[0.4, 0.5, -0.6]);
        assert_eq!(gl.values, u.values);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let cfg = QuantConfig::new(2, 3).unwrap();
        let u = Latent::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert!(group_reshape(&u, &cfg).is_err());
    }

    #[test]
    fn sign_examples() {
        let x = GroupedLatent {
            h: 1,
            w: 1,
            g: 1,
            d_prime: 3,
            values: vec![0.5, -0.3, 0.0],
        };
        let q = sign_quantize(&x, TieRule::Positive).unwrap();
        assert_eq!(q.signs.values, vec![1.0, -1.0, 1.0]);
        assert_eq!(q.tokens.indices, vec![0b101]);
        let q = sign_quantize(&x, TieRule::Negative).unwrap();
        assert_eq!(q.signs.values, vec![1.0, -1.0, -1.0]);
    }

    #[test]
    fn nan_is_rejected() {
        let x = GroupedLatent {
            h: 1,
            w: 1,
            g: 1,
            d_prime: 2,
            values: vec![f64::NAN, 1.0],
        };
        assert!(sign_quantize(&x, TieRule::Positive).is_err());
    }

    #[test]
    fn straight_through_value_and_gradient() {
        let mut g = Graph::default();
        let u = g.param(Tensor::new(vec![1, 1, 1, 3], vec![0.4, -2.0, 0.0]).unwrap());
        let signs = Tensor::new(vec![1, 1, 1, 3], vec![1.0, -1.0, 1.0]).unwrap();
        let uq = straight_through(&mut g, u, signs.clone()).unwrap();
        assert_eq!(g.value(uq), &signs);
        let l = g.sum(uq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(u).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn batch_layout_round_trip() {
        let data: Vec<f64> = (0..2 * 4 * 2 * 3).map(|i| i as f64 - 20.0).collect();
        let t = Tensor::new(vec![2, 4, 2, 3], data).unwrap();
        let back = latents_to_nchw(&latents_from_nchw(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tokens_to_signs_matches_quantization() {
        let cfg = QuantConfig::new(2, 3).unwrap();
        let u = Latent::new(1, 2, 6, vec![0.1, -1.0, 2.0, -0.5, 0.3, 0.0, 1.0, 1.0, -1.0, -1.0, 0.2, 0.2])
            .unwrap();
        let q = sign_quantize(&group_reshape(&u, &cfg).unwrap(), cfg.tie_rule).unwrap();
        assert_eq!(q.tokens.to_signs(), q.signs);
    }

    proptest! {
        #[test]
        fn reshape_round_trips(h in 1usize..4, w in 1usize..4, g in 1usize..4, dp in 1usize..4,
                               seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = QuantConfig::new(g, dp).unwrap();
            let values: Vec<f64> = (0..h * w * g * dp).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u = Latent::new(h, w, g * dp, values).unwrap();
            prop_assert_eq!(group_reshape(&u, &cfg).unwrap().ungroup(), u);
        }

        #[test]
        fn positive_scaling_invariance(values in prop::collection::vec(-5.0f64..5.0, 12),
                                       which in 0usize..3) {
            let lambda = [0.1, 3.0, 100.0][which];
            let x = GroupedLatent { h: 1, w: 2, g: 2, d_prime: 3, values: values.clone() };
            let scaled = GroupedLatent { values: values.iter().map(|v| v * lambda).collect(), ..x.clone() };
            prop_assert_eq!(sign_quantize(&x, TieRule::Positive).unwrap(),
                            sign_quantize(&scaled, TieRule::Positive).unwrap().clone());
        }

        #[test]
        fn quantization_is_idempotent(values in prop::collection::vec(-5.0f64..5.0, 8)) {
            let x = GroupedLatent { h: 2, w: 1, g: 2, d_prime: 2, values };
            let once = sign_quantize(&x, TieRule::Positive).unwrap();
            let twice = sign_quantize(&once.signs, TieRule::Positive).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
