//! Exhaustive entropies over the full `{-1,+1}^d` codebook.
//!
//! Nothing here shares code with the grouped path: every code is enumerated,
//! scored with an explicit inner product and normalized per position.

use crate::error::{Error, Result};
use crate::quantizer::Latent;

/// Largest `d` the oracle enumerates.
pub const MAX_ORACLE_BITS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactEntropy {
    /// `(1/hw) sum_{i,j} H(q(. | u[i,j]))`
    pub token: f64,
    /// `H((1/hw) sum_{i,j} q(. | u[i,j]))`
    pub codebook: f64,
}

pub fn oracle_full_entropy(u: &Latent, tau: f64) -> Result<ExactEntropy> {
    if u.d > MAX_ORACLE_BITS {
        return Err(Error::EnumerationTooLarge {
            d: u.d,
            max: MAX_ORACLE_BITS,
        });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let d = u.d;
    let n_codes = 1usize << d;
    let positions = u.h * u.w;
    let mut scores = vec![0.0f64; n_codes];
    let mut mean = vec![0.0f64; n_codes];
    let mut token_total = 0.0;

    for pos in u.values.chunks(d) {
        for (c, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for (t, &v) in pos.iter().enumerate() {
                // channel t is bit (d - 1 - t) of the code id
                if (c >> (d - 1 - t)) & 1 == 1 {
                    dot += v;
                } else {
                    dot -= v;
                }
            }
            *s = dot / tau;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + z.ln();
        let mut h = 0.0;
        for (c, &s) in scores.iter().enumerate() {
            let log_p = s - log_z;
            let p = log_p.exp();
            if p > 0.0 {
                h -= p * log_p;
            }
            mean[c] += p;
        }
        token_total += h;
    }

    let mut codebook = 0.0;
    for m in &mean {
        let p = m / positions as f64;
        if p > 0.0 {
            codebook -= p * p.ln();
        }
    }
    Ok(ExactEntropy {
        token: token_total / positions as f64,
        codebook,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_bit_has_ln2() {
        let u = Latent::new(1, 1, 1, vec![0.0]).unwrap();
        let e = oracle_full_entropy(&u, 1.0).unwrap();
        assert!((e.token - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((e.codebook - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn too_many_bits_points_at_grouped_path() {
        let u = Latent::new(1, 1, 21, vec![0.0; 21]).unwrap();
        let err = oracle_full_entropy(&u, 1.0).unwrap_err();
        assert!(err.to_string().contains("grouped"));
    }
}
