//! Grouped token and codebook entropy.
//!
//! The soft assignment of group `k` at position `(i, j)` is
//!
//! ```text
//! q(m | u) = softmax_m( <u[i,j,k,:], code(m)> / tau ),   code(m) in {-1,+1}^d'
//! ```
//!
//! Because `<u, c> = sum_k <u_k, c_k>`, the softmax over the full codebook
//! `{-1,+1}^d` is exactly the product of the per-group softmaxes, so the
//! grouped token entropy equals the full-codebook token entropy. The grouped
//! codebook entropy is the sum of per-group marginal entropies of the
//! position-averaged distribution, an upper bound on the joint entropy.
//!
//! Entropies are in nats. Buffers scale as `positions * g * 2^d'`; nothing
//! in the grouped path is indexed by the full `2^(g*d')` codebook.
//!
//! There are two routes to each quantity: a value-level one over
//! [`GroupDistribution`] and a differentiable one that builds nodes on a
//! [`Graph`]. [`oracle`] holds an exhaustive third route used for checking.

pub mod oracle;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::quantizer::{code_matrix, GroupedLatent, QuantConfig, MAX_INDEX_BITS};

pub const LN_2: f64 = std::f64::consts::LN_2;

/// `q_G(. | u[i,j,k])` for every position and group: `(h, w, g, 2^d')`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDistribution {
    pub h: usize,
    pub w: usize,
    pub g: usize,
    pub d_prime: usize,
    pub tau: f64,
    pub probs: Vec<f64>,
}

impl GroupDistribution {
    pub fn codes(&self) -> usize {
        1 << self.d_prime
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn row(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let kk = self.codes();
        let off = ((i * self.w + j) * self.g + k) * kk;
        &self.probs[off..off + kk]
    }

    fn max_entropy(&self) -> f64 {
        (self.g * self.d_prime) as f64 * LN_2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyLossValue {
    pub token_entropy: f64,
    pub codebook_entropy: f64,
    /// `token_entropy - zeta * codebook_entropy`
    pub combined: f64,
    pub zeta: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn shannon(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

fn debug_check_bounds(h: f64, max: f64) {
    debug_assert!(
        h >= -1e-9 && h <= max + 1e-9 * max.max(1.0),
        "entropy {h} outside [0, {max}]"
    );
}

pub fn soft_assignment(x: &GroupedLatent, tau: f64) -> Result<GroupDistribution> {
    check_tau(tau)?;
    if x.d_prime > MAX_INDEX_BITS {
        return Err(Error::invalid(format!("group width {} too large", x.d_prime)));
    }
    let kk = 1usize << x.d_prime;
    let mut probs = Vec::with_capacity(x.h * x.w * x.g * kk);
    let mut logits = vec![0.0; kk];
    for grp in x.values.chunks(x.d_prime) {
        for (m, l) in logits.iter_mut().enumerate() {
            let dot: f64 = grp
                .iter()
                .enumerate()
                .map(|(t, &v)| if (m >> (x.d_prime - 1 - t)) & 1 == 1 { v } else { -v })
                .sum();
            *l = dot / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = probs.len();
        probs.extend(logits.iter().map(|l| (l - max).exp()));
        let z: f64 = probs[start..].iter().sum();
        probs[start..].iter_mut().for_each(|p| *p /= z);
    }
    Ok(GroupDistribution {
        h: x.h,
        w: x.w,
        g: x.g,
        d_prime: x.d_prime,
        tau,
        probs,
    })
}

/// `(1/hw) sum_{i,j} sum_k H(q_G(. | u[i,j,k]))`
pub fn token_entropy(dist: &GroupDistribution) -> f64 {
    let kk = dist.codes();
    let total: f64 = dist.probs.chunks(kk).map(shannon).sum();
    let h = total / dist.positions() as f64;
    debug_check_bounds(h, dist.max_entropy());
    h
}

/// `sum_k H((1/hw) sum_{i,j} q_G(. | u[i,j,k]))`
pub fn codebook_entropy(dist: &GroupDistribution) -> f64 {
    let kk = dist.codes();
    let p = dist.positions() as f64;
    let mut h = 0.0;
    for k in 0..dist.g {
        let mut mean = vec![0.0; kk];
        for i in 0..dist.h {
            for j in 0..dist.w {
                for (m, v) in mean.iter_mut().zip(dist.row(i, j, k)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= p);
        h += shannon(&mean);
    }
    debug_check_bounds(h, dist.max_entropy());
    h
}

pub fn entropy_loss(dist: &GroupDistribution, zeta: f64) -> Result<EntropyLossValue> {
    if !(zeta >= 0.0 && zeta.is_finite()) {
        return Err(Error::invalid(format!("zeta must be >= 0, got {zeta}")));
    }
    let token = token_entropy(dist);
    let codebook = codebook_entropy(dist);
    Ok(EntropyLossValue {
        token_entropy: token,
        codebook_entropy: codebook,
        combined: token - zeta * codebook,
        zeta,
    })
}

/// Auxiliary buffer size of the grouped entropy path:
/// `h * w * g * 2^d' * element_size` bytes. Saturates at `u128::MAX`.
pub fn entropy_buffer_footprint(cfg: &QuantConfig, h: usize, w: usize, element_size: usize) -> u128 {
    footprint(h, w, cfg.groups(), cfg.group_channels(), element_size)
}

/// What an ungrouped entropy over the full `2^(g*d')` codebook would need:
/// `h * w * 2^(g*d') * element_size` bytes. Saturates at `u128::MAX`.
pub fn ungrouped_buffer_footprint(cfg: &QuantConfig, h: usize, w: usize, element_size: usize) -> u128 {
    footprint(h, w, 1, cfg.channels(), element_size)
}

fn footprint(h: usize, w: usize, g: usize, bits: usize, element_size: usize) -> u128 {
    let codes = 1u128.checked_shl(bits as u32).filter(|_| bits < 128);
    codes
        .and_then(|c| c.checked_mul(h as u128))
        .and_then(|c| c.checked_mul(w as u128))
        .and_then(|c| c.checked_mul(g as u128))
        .and_then(|c| c.checked_mul(element_size as u128))
        .unwrap_or(u128::MAX)
}

/// Allocation accounting for one grouped-entropy build on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntropyFootprint {
    /// Extent of the code axis shared by every per-code buffer.
    pub code_axis: usize,
    /// Largest buffer created, in elements.
    pub peak_elements: usize,
    /// Sum of all buffers created, in elements.
    pub total_elements: usize,
}

impl EntropyFootprint {
    /// Whether any buffer was indexed by the full `2^(g*d')` codebook.
    pub fn spans_full_codebook(&self, cfg: &QuantConfig) -> bool {
        match 1usize.checked_shl(cfg.channels() as u32) {
            Some(full) if cfg.channels() < usize::BITS as usize => self.code_axis >= full,
            _ => false,
        }
    }
}

/// Graph node holding `log q_G` with shape `(positions, g, 2^d')`.
#[derive(Clone, Copy, Debug)]
pub struct AssignmentNode {
    pub log_probs: NodeId,
    pub positions: usize,
    pub groups: usize,
    pub codes: usize,
}

/// Differentiable soft assignment of `latent_rows: (positions, g*d')`.
pub fn soft_assignment_node(
    graph: &mut Graph,
    latent_rows: NodeId,
    cfg: &QuantConfig,
    tau: f64,
) -> Result<AssignmentNode> {
    check_tau(tau)?;
    let shape = graph.shape(latent_rows).to_vec();
    if shape.len() != 2 || shape[1] != cfg.channels() {
        return Err(Error::ShapeMismatch {
            op: "soft_assignment",
            lhs: shape,
            rhs: vec![0, cfg.channels()],
        });
    }
    let (p, g, dp) = (shape[0], cfg.groups(), cfg.group_channels());
    let codes = code_matrix(dp)?;
    let kk = codes.shape()[1];
    let c = graph.constant(codes);
    let rows = graph.reshape(latent_rows, &[p * g, dp])?;
    let dots = graph.matmul(rows, c)?;
    let logits = graph.scale(dots, 1.0 / tau)?;
    let logits = graph.reshape(logits, &[p, g, kk])?;
    let log_probs = graph.log_softmax(logits)?;
    Ok(AssignmentNode {
        log_probs,
        positions: p,
        groups: g,
        codes: kk,
    })
}

/// Scalar node: mean over positions of the summed per-group entropies.
pub fn token_entropy_node(graph: &mut Graph, a: &AssignmentNode) -> Result<NodeId> {
    let probs = graph.exp(a.log_probs)?;
    let plogp = graph.mul(probs, a.log_probs)?;
    let s = graph.sum(plogp)?;
    graph.scale(s, -1.0 / a.positions as f64)
}

/// Scalar node: summed per-group entropies of the position-averaged
/// assignment. The log of the average is taken as a log-sum-exp over
/// positions so that vanishing probabilities stay finite.
pub fn codebook_entropy_node(graph: &mut Graph, a: &AssignmentNode) -> Result<NodeId> {
    let by_code = graph.permute(a.log_probs, &[1, 2, 0])?;
    let lse = graph.logsumexp(by_code)?;
    let log_mean = graph.add_scalar(lse, -(a.positions as f64).ln())?;
    let mean = graph.exp(log_mean)?;
    let plogp = graph.mul(mean, log_mean)?;
    let s = graph.sum(plogp)?;
    graph.neg(s)
}

/// Token entropy, codebook entropy and allocation accounting for one build.
#[derive(Clone, Copy, Debug)]
pub struct EntropyTerms {
    pub token: NodeId,
    pub codebook: NodeId,
    pub footprint: EntropyFootprint,
}

impl EntropyTerms {
    /// `token - zeta * codebook` as a node.
    pub fn combined(&self, graph: &mut Graph, zeta: f64) -> Result<NodeId> {
        let weighted = graph.scale(self.codebook, zeta)?;
        graph.sub(self.token, weighted)
    }
}

pub fn entropy_terms(
    graph: &mut Graph,
    latent_rows: NodeId,
    cfg: &QuantConfig,
    tau: f64,
) -> Result<EntropyTerms> {
    let mark = graph.len();
    let a = soft_assignment_node(graph, latent_rows, cfg, tau)?;
    let token = token_entropy_node(graph, &a)?;
    let codebook = codebook_entropy_node(graph, &a)?;
    let mut footprint = EntropyFootprint {
        code_axis: 0,
        peak_elements: 0,
        total_elements: 0,
    };
    footprint.code_axis = a.codes;
    for s in graph.shapes_since(mark) {
        let n: usize = s.iter().product();
        footprint.peak_elements = footprint.peak_elements.max(n);
        footprint.total_elements += n;
    }
    if cfg!(debug_assertions) {
        let max = cfg.channels() as f64 * LN_2;
        debug_check_bounds(graph.value(token).item(), max);
        debug_check_bounds(graph.value(codebook).item(), max);
    }
    Ok(EntropyTerms {
        token,
        codebook,
        footprint,
    })
}

/// `(n, d, h, w)` latent node to `(n*h*w, d)` rows, one per position.
pub fn latent_rows(graph: &mut Graph, u: NodeId) -> Result<NodeId> {
    let s = graph.shape(u).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected (n,d,h,w) latent, got {s:?}")));
    }
    let nhwc = graph.permute(u, &[0, 2, 3, 1])?;
    graph.reshape(nhwc, &[s[0] * s[2] * s[3], s[1]])
}
