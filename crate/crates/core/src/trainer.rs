//! Two-stage training.
//!
//! Stage 1 fits encoder and decoder with reconstruction, grouped entropy and an
//! optional commitment term. Stage 2 widens the decoder input with zero-initialized
//! noise channels, adds a patch discriminator and alternates one generator step
//! with one discriminator step.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Precision};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::entropy::{entropy_terms, latent_rows, EntropyFootprint};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{sample_noise, Decoder, Discriminator, Encoder, NoisePrior, ParamSet};
use crate::optim::{ema_update, Adam};
use crate::pnm::Image;
use crate::quantizer::{quantize_batch, signs_from_tokens, straight_through, PreActivation, TokenGrid};
use crate::tensor::Tensor;

const DECODER_SEED: u64 = 0x5eed_0001;
const DISCRIMINATOR_SEED: u64 = 0x5eed_0002;
const NOISE_SEED: u64 = 0x5eed_0003;

/// Encoder/decoder pair plus the quantizer settings that bind them.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub model: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Tokenizer {
    pub fn new(model: ModelConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        let encoder = Encoder::new(model.arch.clone(), seed)?;
        let decoder = Decoder::new(model.arch.clone(), model.noise_channels(), seed ^ DECODER_SEED)?;
        Ok(Self {
            model,
            encoder,
            decoder,
        })
    }

    pub fn is_generative(&self) -> bool {
        self.decoder.is_generative()
    }

    /// Encoder output after the configured pre-activation, `(n, d, h, w)`.
    pub fn latent(&self, images: &Tensor) -> Result<Tensor> {
        let u = self.encoder.encode(images)?;
        Ok(match self.model.quant.pre_activation {
            PreActivation::None => u,
            PreActivation::Tanh => u.map(f64::tanh),
        })
    }

    pub fn tokenize(&self, images: &Tensor) -> Result<Vec<TokenGrid>> {
        Ok(quantize_batch(&self.latent(images)?, &self.model.quant)?.1)
    }

    /// Decode token grids; `noise` is required iff the decoder is generative.
    pub fn decode_tokens(&self, grids: &[TokenGrid], noise: Option<&Tensor>) -> Result<Tensor> {
        for t in grids {
            if (t.g, t.d_prime) != (self.model.quant.groups(), self.model.quant.group_channels()) {
                return Err(Error::invalid(format!(
                    "token grid has g={} d'={}, model expects g={} d'={}",
                    t.g,
                    t.d_prime,
                    self.model.quant.groups(),
                    self.model.quant.group_channels()
                )));
            }
        }
        self.decoder.decode(&signs_from_tokens(grids)?, noise)
    }

    /// Noise for a generative decode of `grids`, reproducible from `seed`.
    pub fn noise_for(&self, grids: &[TokenGrid], seed: u64) -> Option<Tensor> {
        let first = grids.first()?;
        self.is_generative().then(|| {
            NoisePrior {
                channels: self.model.noise_channels(),
                seed,
            }
            .sample(grids.len(), first.h, first.w)
        })
    }

    pub fn reconstruct(&self, images: &Tensor, noise_seed: u64) -> Result<Tensor> {
        let grids = self.tokenize(images)?;
        let z = self.noise_for(&grids, noise_seed);
        self.decode_tokens(&grids, z.as_ref())
    }

    pub fn checkpoint(&self, stage: u8, disc: Option<&Discriminator>, ema: Option<&Tokenizer>) -> Checkpoint {
        let mut meta = self.model.to_meta();
        meta.insert("stage".into(), stage.to_string());
        meta.insert("generative".into(), self.is_generative().to_string());
        let mut tensors = Vec::new();
        push_named(&mut tensors, "encoder", self.encoder.params());
        push_named(&mut tensors, "decoder", self.decoder.params());
        if let Some(d) = disc {
            push_named(&mut tensors, "discriminator", d.params());
        }
        if let Some(e) = ema {
            push_named(&mut tensors, "ema.encoder", e.encoder.params());
            push_named(&mut tensors, "ema.decoder", e.decoder.params());
        }
        Checkpoint { meta, tensors }
    }

    /// Rebuild from a checkpoint; with `use_ema` the averaged weights are
    /// loaded when present.
    pub fn from_checkpoint(ck: &Checkpoint, use_ema: bool) -> Result<(Self, Option<Discriminator>)> {
        let model = ModelConfig::from_meta(&ck.meta)?;
        let generative = match ck.meta_value("generative")? {
            "true" => true,
            "false" => false,
            other => return Err(Error::Checkpoint(format!("bad generative flag {other:?}"))),
        };
        let mut tok = Self::new(model, 0)?;
        if generative {
            tok.decoder.expand_input_zero_init()?;
        }
        let has_ema = !ck.with_prefix("ema.encoder").is_empty();
        let (ep, dp) = if use_ema && has_ema {
            ("ema.encoder", "ema.decoder")
        } else {
            ("encoder", "decoder")
        };
        tok.encoder.params_mut().load(&ck.with_prefix(ep))?;
        tok.decoder.params_mut().load(&ck.with_prefix(dp))?;
        let disc_tensors = ck.with_prefix("discriminator");
        let disc = if disc_tensors.is_empty() {
            None
        } else {
            let mut d = Discriminator::new(tok.model.discriminator_spec(), 0)?;
            d.params_mut().load(&disc_tensors)?;
            Some(d)
        };
        Ok((tok, disc))
    }
}

fn push_named(out: &mut Vec<(String, Tensor)>, prefix: &str, p: &ParamSet) {
    out.extend(p.iter().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())));
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub entropy: f64,
    pub zeta: f64,
    pub commit: f64,
    pub gan: f64,
    pub non_saturating: bool,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            recon: c.recon_weight,
            entropy: c.entropy_weight,
            zeta: c.zeta,
            commit: c.commit_weight,
            gan: c.gan_weight,
            non_saturating: c.non_saturating,
        }
    }
}

/// One recorded generator forward pass.
pub struct GeneratorPass {
    pub graph: Graph,
    pub encoder_ids: Vec<NodeId>,
    pub decoder_ids: Vec<NodeId>,
    pub recon: NodeId,
    pub token: NodeId,
    pub codebook: NodeId,
    pub commit: NodeId,
    /// Generator adversarial term; present when a discriminator was given.
    pub gan: Option<NodeId>,
    pub total: NodeId,
    pub fake: NodeId,
    pub tokens: Vec<TokenGrid>,
    pub footprint: EntropyFootprint,
}

/// Build the generator objective on `graph` (fresh or replaying).
pub fn generator_pass(
    mut graph: Graph,
    tok: &Tokenizer,
    disc: Option<&Discriminator>,
    images: &Tensor,
    noise: Option<&Tensor>,
    w: &LossWeights,
) -> Result<GeneratorPass> {
    let g = &mut graph;
    let encoder_ids = tok.encoder.params().bind(g);
    let decoder_ids = tok.decoder.params().bind(g);
    let x = g.constant(images.clone());
    let raw = tok.encoder.forward(g, &encoder_ids, x)?;
    let u = crate::quantizer::pre_activate(g, raw, &tok.model.quant)?;
    let (signs, tokens) = quantize_batch(g.value(u), &tok.model.quant)?;
    let q = straight_through(g, u, signs.clone())?;
    let z = noise.map(|z| g.constant(z.clone()));
    let fake = tok.decoder.forward(g, &decoder_ids, q, z)?;

    let diff = g.sub(fake, x)?;
    let sq = g.mul(diff, diff)?;
    let recon = g.mean(sq)?;

    let rows = latent_rows(g, u)?;
    let terms = entropy_terms(g, rows, &tok.model.quant, tok.model.tau)?;
    let ent = terms.combined(g, w.zeta)?;

    let s = g.constant(signs);
    let cd = g.sub(u, s)?;
    let csq = g.mul(cd, cd)?;
    let commit = g.mean(csq)?;

    let mut total = g.scale(recon, w.recon)?;
    let e = g.scale(ent, w.entropy)?;
    total = g.add(total, e)?;
    let c = g.scale(commit, w.commit)?;
    total = g.add(total, c)?;

    let gan = match disc {
        Some(d) => {
            let ids = d.params().bind_frozen(g);
            let logits = d.forward(g, &ids, fake)?;
            let term = if w.non_saturating {
                // -log D(fake)
                let n = g.neg(logits)?;
                g.softplus(n)?
            } else {
                // log(1 - D(fake))
                let sp = g.softplus(logits)?;
                g.neg(sp)?
            };
            let gan = g.mean(term)?;
            let weighted = g.scale(gan, w.gan)?;
            total = g.add(total, weighted)?;
            Some(gan)
        }
        None => None,
    };

    Ok(GeneratorPass {
        graph,
        encoder_ids,
        decoder_ids,
        recon,
        token: terms.token,
        codebook: terms.codebook,
        commit,
        gan,
        total,
        fake,
        tokens,
        footprint: terms.footprint,
    })
}

pub struct DiscriminatorPass {
    pub graph: Graph,
    pub ids: Vec<NodeId>,
    pub loss: NodeId,
}

/// `mean softplus(-D(real)) + mean softplus(D(fake))`, i.e. the logistic loss.
pub fn discriminator_pass(mut graph: Graph, disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<DiscriminatorPass> {
    let g = &mut graph;
    let ids = disc.params().bind(g);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let lr = disc.forward(g, &ids, r)?;
    let lf = disc.forward(g, &ids, f)?;
    let nr = g.neg(lr)?;
    let sr = g.softplus(nr)?;
    let mr = g.mean(sr)?;
    let sf = g.softplus(lf)?;
    let mf = g.mean(sf)?;
    let loss = g.add(mr, mf)?;
    Ok(DiscriminatorPass { graph, ids, loss })
}

/// Per-step losses. `gan_g`/`gan_d` are zero in stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub recon: f64,
    pub token_h: f64,
    pub codebook_h: f64,
    pub commit: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total: f64,
    /// Fraction of each group's codebook used by the step's batch.
    pub usage: Vec<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,recon,token_h,codebook_h,gan_g,gan_d,total,usage_mean";

    pub fn usage_mean(&self) -> f64 {
        self.usage.iter().sum::<f64>() / self.usage.len().max(1) as f64
    }

    /// Weighted sum of the components, for cross-checking `total`.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        w.recon * self.recon
            + w.entropy * (self.token_h - w.zeta * self.codebook_h)
            + w.commit * self.commit
            + w.gan * self.gan_g
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.recon,
            self.token_h,
            self.codebook_h,
            self.gan_g,
            self.gan_d,
            self.total,
            self.usage_mean()
        )
    }
}

pub fn write_loss_csv(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{}", LossReport::CSV_HEADER).expect("string write");
    for r in reports {
        writeln!(s, "{}", r.csv_row()).expect("string write");
    }
    std::fs::File::create(path)?.write_all(s.as_bytes())?;
    Ok(())
}

/// Per-group fraction of distinct token ids seen across `grids`.
pub fn codebook_usage(grids: &[TokenGrid]) -> Result<Vec<f64>> {
    let first = grids.first().ok_or_else(|| Error::invalid("no token grids"))?;
    let (g, dp) = (first.g, first.d_prime);
    if dp > 24 {
        return Err(Error::invalid(format!("usage tracking limited to d' <= 24, got {dp}")));
    }
    let size = 1usize << dp;
    let mut seen = vec![vec![false; size]; g];
    for t in grids {
        if (t.g, t.d_prime) != (g, dp) {
            return Err(Error::invalid("token grids with mixed group layouts"));
        }
        for (n, &idx) in t.indices.iter().enumerate() {
            seen[n % g][idx as usize] = true;
        }
    }
    Ok(seen
        .iter()
        .map(|s| s.iter().filter(|&&b| b).count() as f64 / size as f64)
        .collect())
}

/// Mean codebook usage of `tok` over every image of `data`.
pub fn dataset_usage(tok: &Tokenizer, data: &Dataset) -> Result<Vec<f64>> {
    codebook_usage(&tok.tokenize(data.images())?)
}

/// Reconstruction metrics averaged over `data`, computed on 8-bit images.
pub fn evaluate(tok: &Tokenizer, data: &Dataset, noise_seed: u64) -> Result<MetricReport> {
    let recon = tok.reconstruct(data.images(), noise_seed)?;
    let reference = Image::batch_from_tensor(data.images())?;
    let test = Image::batch_from_tensor(&recon)?;
    let reports = reference
        .iter()
        .zip(&test)
        .map(|(a, b)| MetricReport::compare(a, b))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::average(&reports)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub tokenizer: Tokenizer,
    pub discriminator: Option<Discriminator>,
    pub ema: Option<Tokenizer>,
    pub reports: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, stage: u8) -> Checkpoint {
        self.tokenizer.checkpoint(stage, self.discriminator.as_ref(), self.ema.as_ref())
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, .. } => Error::Diverged {
            step,
            what: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn collect_grads(grads: &mut crate::autodiff::Gradients, ids: &[NodeId], params: &ParamSet, step: usize) -> Result<Vec<Tensor>> {
    ids.iter()
        .zip(params.tensors())
        .map(|(&id, p)| {
            let g = grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape()));
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::Diverged {
                    step,
                    what: "non-finite gradient".into(),
                })
            }
        })
        .collect()
}

fn round_if_f32(p: &mut ParamSet, precision: Precision) {
    if precision == Precision::F32 {
        p.round_to_f32();
    }
}

struct GeneratorState {
    tok: Tokenizer,
    enc_opt: Adam,
    dec_opt: Adam,
    ema: Option<Tokenizer>,
}

impl GeneratorState {
    fn new(mut tok: Tokenizer, cfg: &TrainConfig) -> Self {
        round_if_f32(tok.encoder.params_mut(), cfg.precision);
        round_if_f32(tok.decoder.params_mut(), cfg.precision);
        Self {
            ema: cfg.ema.then(|| tok.clone()),
            tok,
            enc_opt: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            dec_opt: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
        }
    }

    /// Forward, backward and update. Returns the report (pre-update values)
    /// and the generated images.
    fn step(
        &mut self,
        cfg: &TrainConfig,
        step: usize,
        disc: Option<&Discriminator>,
        images: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<(LossReport, Tensor)> {
        let w = LossWeights::from(cfg);
        let pass = generator_pass(Graph::new(cfg.precision), &self.tok, disc, images, noise, &w)
            .map_err(|e| diverged(step, e))?;
        let g = &pass.graph;
        let total = g.value(pass.total).item();
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "loss".into(),
            });
        }
        let report = LossReport {
            step,
            recon: g.value(pass.recon).item(),
            token_h: g.value(pass.token).item(),
            codebook_h: g.value(pass.codebook).item(),
            commit: g.value(pass.commit).item(),
            gan_g: pass.gan.map_or(0.0, |id| g.value(id).item()),
            gan_d: 0.0,
            total,
            usage: codebook_usage(&pass.tokens)?,
        };
        let fake = g.value(pass.fake).clone();
        let mut grads = g.backward(pass.total).map_err(|e| diverged(step, e))?;
        let ge = collect_grads(&mut grads, &pass.encoder_ids, self.tok.encoder.params(), step)?;
        let gd = collect_grads(&mut grads, &pass.decoder_ids, self.tok.decoder.params(), step)?;
        self.enc_opt.step(self.tok.encoder.params_mut().tensors_mut(), &ge)?;
        self.dec_opt.step(self.tok.decoder.params_mut().tensors_mut(), &gd)?;
        round_if_f32(self.tok.encoder.params_mut(), cfg.precision);
        round_if_f32(self.tok.decoder.params_mut(), cfg.precision);
        if let Some(ema) = &mut self.ema {
            ema_update(ema.encoder.params_mut().tensors_mut(), self.tok.encoder.params().tensors(), cfg.ema_decay)?;
            ema_update(ema.decoder.params_mut().tensors_mut(), self.tok.decoder.params().tensors(), cfg.ema_decay)?;
        }
        Ok((report, fake))
    }
}

fn log_progress(stage: u8, r: &LossReport, steps: usize) {
    if r.step % 50 == 0 || r.step + 1 == steps {
        log::info!(
            "stage{stage} step {} recon={:.5} token_h={:.4} codebook_h={:.4} gan_g={:.4} gan_d={:.4} total={:.5} usage={:.3}",
            r.step,
            r.recon,
            r.token_h,
            r.codebook_h,
            r.gan_g,
            r.gan_d,
            r.total,
            r.usage_mean()
        );
    }
}

/// Stage 1 from a fresh tokenizer seeded by `cfg.seed`.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    let tok = Tokenizer::new(cfg.model.clone(), cfg.seed)?;
    let mut state = GeneratorState::new(tok, cfg);
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.batch(step, cfg.batch_size);
        let (report, _) = state.step(cfg, step, None, &batch, None)?;
        log_progress(1, &report, cfg.steps);
        reports.push(report);
    }
    Ok(TrainOutcome {
        tokenizer: state.tok,
        discriminator: None,
        ema: state.ema,
        reports,
    })
}

/// Stage 2 starting from a stage-1 tokenizer. A non-generative decoder is
/// widened with zero-initialized noise channels first, so step 0 reproduces
/// the stage-1 reconstructions for any noise.
pub fn train_stage2(cfg: &TrainConfig, init: Tokenizer, disc: Option<Discriminator>, data: &Dataset) -> Result<TrainOutcome> {
    let mut tok = init;
    if !tok.is_generative() {
        tok.decoder.expand_input_zero_init()?;
    }
    let mut disc = match disc {
        Some(d) => d,
        None => Discriminator::new(tok.model.discriminator_spec(), cfg.seed ^ DISCRIMINATOR_SEED)?,
    };
    round_if_f32(disc.params_mut(), cfg.precision);
    let nz = tok.model.noise_channels();
    let mut state = GeneratorState::new(tok, cfg);
    let mut disc_opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_SEED);
    let f = cfg.model.arch.downsample;
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.batch(step, cfg.batch_size);
        let s = batch.shape();
        let z = sample_noise(&mut noise_rng, s[0], nz, s[2] / f, s[3] / f);
        let (mut report, fake) = state.step(cfg, step, Some(&disc), &batch, Some(&z))?;

        let pass = discriminator_pass(Graph::new(cfg.precision), &disc, &batch, &fake).map_err(|e| diverged(step, e))?;
        report.gan_d = pass.graph.value(pass.loss).item();
        let mut grads = pass.graph.backward(pass.loss).map_err(|e| diverged(step, e))?;
        let gd = collect_grads(&mut grads, &pass.ids, disc.params(), step)?;
        disc_opt.step(disc.params_mut().tensors_mut(), &gd)?;
        round_if_f32(disc.params_mut(), cfg.precision);

        log_progress(2, &report, cfg.steps);
        reports.push(report);
    }
    Ok(TrainOutcome {
        tokenizer: state.tok,
        discriminator: Some(disc),
        ema: state.ema,
        reports,
    })
}

/// Run the stage selected by `cfg`, loading `init_checkpoint` for stage 2.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.stage {
        1 => train_stage1(cfg, data),
        _ => {
            let path = cfg
                .init_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("stage 2 requires init_checkpoint".into()))?;
            let ck = Checkpoint::load(path)?;
            let (tok, disc) = Tokenizer::from_checkpoint(&ck, false)?;
            if tok.model.quant != cfg.model.quant || tok.model.arch != cfg.model.arch {
                log::warn!("architecture settings taken from {}, overriding config", path.display());
            }
            let mut cfg = cfg.clone();
            cfg.model = tok.model.clone();
            train_stage2(&cfg, tok, disc, data)
        }
    }
}
