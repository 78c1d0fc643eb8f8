//! Helpers shared by the integration suites.
#![allow(dead_code)]

use gqtok::autodiff::{Graph, NodeId, Precision};
use gqtok::config::ModelConfig;
use gqtok::model::{Discriminator, EncoderSpec};
use gqtok::quantizer::{QuantConfig, TokenGrid};
use gqtok::tensor::Tensor;
use gqtok::trainer::Tokenizer;
use gqtok::Result;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest per-input relative error between reverse-mode gradients and
/// central differences of `build`. Detached branches recorded on the first
/// pass are replayed unchanged on every perturbed pass.
pub fn grad_check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let stops = g.recorded_stops().to_vec();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut r = Graph::replaying(Precision::F64, stops.clone());
        let ids: Vec<NodeId> = xs.iter().map(|t| r.param(t.clone())).collect();
        let l = build(&mut r, &ids)?;
        Ok(r.value(l).item())
    };

    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut xs = inputs.to_vec();
        for (j, n) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - step;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            *n = (up - down) / (2.0 * step);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// A few-hundred-parameter tokenizer on `(n, 1, 4, 4)` images, `g = 2`, `d' = 2`.
pub fn micro_model() -> ModelConfig {
    let quant = QuantConfig::new(2, 2).unwrap();
    ModelConfig {
        quant,
        tau: 1.0,
        arch: EncoderSpec {
            image_channels: 1,
            base_channels: 2,
            channel_mult: vec![1, 1],
            n_res_blocks: 1,
            downsample: 2,
            latent_channels: quant.channels(),
        },
        noise_channels: Some(2),
        disc_base_channels: 2,
        disc_layers: 2,
    }
}

pub fn micro_tokenizer(seed: u64) -> Tokenizer {
    Tokenizer::new(micro_model(), seed).unwrap()
}

pub fn micro_discriminator(seed: u64) -> Discriminator {
    Discriminator::new(micro_model().discriminator_spec(), seed).unwrap()
}

/// Every element of a param list flattened, in order.
pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Recon,
    TokenEntropy,
    CodebookEntropy,
    GanGenerator,
    GanDiscriminator,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::Recon,
        Term::TokenEntropy,
        Term::CodebookEntropy,
        Term::GanGenerator,
        Term::GanDiscriminator,
    ];
}

fn pick(pass: &gqtok::trainer::GeneratorPass, term: Term) -> NodeId {
    match term {
        Term::Recon => pass.recon,
        Term::TokenEntropy => pass.token,
        Term::CodebookEntropy => pass.codebook,
        _ => pass.gan.expect("generator pass without discriminator"),
    }
}

/// Reverse-mode vs central differences for one loss term of the micro model,
/// over every parameter the term depends on. Returns the worst per-tensor
/// relative error.
pub fn model_grad_check(seed: u64, term: Term, step: f64) -> Result<f64> {
    use gqtok::trainer::{discriminator_pass, generator_pass, LossWeights};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut rng);
    let weights = LossWeights {
        recon: 1.0,
        entropy: 1.0,
        zeta: 1.0,
        commit: 0.0,
        gan: 1.0,
        non_saturating: false,
    };
    let mut tok = micro_tokenizer(seed);
    let disc = micro_discriminator(seed.wrapping_add(1));

    if term == Term::GanDiscriminator {
        let fake = Tensor::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut rng);
        let p = discriminator_pass(Graph::new(Precision::F64), &disc, &images, &fake)?;
        let grads = p.graph.backward(p.loss)?;
        let mut worst: f64 = 0.0;
        for (i, id) in p.ids.iter().enumerate() {
            let analytic = grads.get(*id).map(|t| t.data().to_vec()).unwrap_or_default();
            let n = disc.params().tensors()[i].len();
            let mut numeric = vec![0.0; n];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut d = disc.clone();
                    d.params_mut().tensors_mut()[i].data_mut()[j] += delta;
                    let q = discriminator_pass(Graph::new(Precision::F64), &d, &images, &fake)?;
                    Ok(q.graph.value(q.loss).item())
                };
                *slot = (eval(step)? - eval(-step)?) / (2.0 * step);
            }
            let analytic = if analytic.is_empty() { vec![0.0; n] } else { analytic };
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        return Ok(worst);
    }

    let (disc_ref, noise) = if term == Term::GanGenerator {
        tok.decoder.expand_input_zero_init()?;
        // move the fresh noise weights off zero so their path is exercised
        let w = &mut tok.decoder.params_mut().tensors_mut()[0];
        for v in w.data_mut().iter_mut().filter(|v| **v == 0.0) {
            *v = 0.1;
        }
        let z = Tensor::randn(&[2, 2, 2, 2], &mut rng);
        (Some(&disc), Some(z))
    } else {
        (None, None)
    };

    let pass = generator_pass(Graph::new(Precision::F64), &tok, disc_ref, &images, noise.as_ref(), &weights)?;
    let node = pick(&pass, term);
    let grads = pass.graph.backward(node)?;
    let stops = pass.graph.recorded_stops().to_vec();

    let eval = |t: &Tokenizer| -> Result<f64> {
        let p = generator_pass(
            Graph::replaying(Precision::F64, stops.clone()),
            t,
            disc_ref,
            &images,
            noise.as_ref(),
            &weights,
        )?;
        Ok(p.graph.value(pick(&p, term)).item())
    };

    let mut worst: f64 = 0.0;
    for (net, ids) in [(0usize, &pass.encoder_ids), (1, &pass.decoder_ids)] {
        for (i, id) in ids.iter().enumerate() {
            let n = if net == 0 {
                tok.encoder.params().tensors()[i].len()
            } else {
                tok.decoder.params().tensors()[i].len()
            };
            let analytic = grads.get(*id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
            let mut numeric = vec![0.0; n];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let at = |delta: f64| -> Result<f64> {
                    let mut t = tok.clone();
                    let params = if net == 0 {
                        t.encoder.params_mut()
                    } else {
                        t.decoder.params_mut()
                    };
                    params.tensors_mut()[i].data_mut()[j] += delta;
                    eval(&t)
                };
                *slot = (at(step)? - at(-step)?) / (2.0 * step);
            }
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    Ok(worst)
}

/// Fixed grids whose packed bytes are stored under `tests/golden`.
pub fn golden_cases() -> Vec<(&'static str, TokenGrid, usize, usize)> {
    let scrambled = |n: usize, bits: usize| -> Vec<u32> {
        (0..n as u64)
            .map(|i| ((i.wrapping_mul(2654435761) >> 3) % (1u64 << bits)) as u32)
            .collect()
    };
    vec![
        ("single_3", TokenGrid::new(1, 1, 1, 2, vec![3]).unwrap(), 2, 2),
        ("grid2x2_g2_d4", TokenGrid::new(2, 2, 2, 4, (0..8).collect()).unwrap(), 8, 8),
        ("grid3x2_g4_d3", TokenGrid::new(3, 2, 4, 3, scrambled(24, 3)).unwrap(), 12, 8),
        ("grid2x2_g1_d16", TokenGrid::new(2, 2, 1, 16, scrambled(4, 16)).unwrap(), 32, 32),
        ("grid4x4_g4_d8", TokenGrid::new(4, 4, 4, 8, scrambled(64, 8)).unwrap(), 256, 256),
    ]
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.wtok"))
}
