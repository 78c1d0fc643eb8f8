mod common;

use common::{micro_model, model_grad_check, Term};
use gqtok::autodiff::Precision;
use gqtok::checkpoint::Checkpoint;
use gqtok::config::TrainConfig;
use gqtok::data::Dataset;
use gqtok::error::Error;
use gqtok::model::Decoder;
use gqtok::tensor::Tensor;
use gqtok::trainer::{train_stage1, train_stage2, LossWeights, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::parse(
        "batch_size = 4\nlr = 2e-3\nprecision = f64\nimage_channels = 1\nbase_channels = 4\nchannel_mult = 1,1\n\
         downsample = 2\ng = 2\nd_prime = 2\ndisc_base_channels = 4\ndisc_layers = 2\n",
    )
    .unwrap();
    c.steps = steps;
    c.dataset_size = 8;
    c.image_size = 8;
    c
}

fn data(c: &TrainConfig) -> Dataset {
    Dataset::synthetic(c.dataset_size, c.image_size, c.model.arch.image_channels, 11).unwrap()
}

#[test]
fn loss_terms_match_finite_differences() {
    for seed in 0..3 {
        for term in Term::ALL {
            let err = model_grad_check(seed, term, 1e-6).unwrap();
            assert!(err <= 1e-4, "{term:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn zero_init_expansion_is_bit_identical() {
    let arch = micro_model().arch;
    let dec = Decoder::new(arch.clone(), 3, 4).unwrap();
    let mut wide = dec.clone();
    wide.expand_input_zero_init().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let q = Tensor::new(
            vec![2, arch.latent_channels, 3, 3],
            (0..2 * arch.latent_channels * 9).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let z = Tensor::randn(&[2, 3, 3, 3], &mut rng);
        let a = dec.decode(&q, None).unwrap();
        let b = wide.decode(&q, Some(&z)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn same_seed_same_run() {
    let c = toy(5);
    let d = data(&c);
    let a = train_stage1(&c, &d).unwrap();
    let b = train_stage1(&c, &d).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(
        a.checkpoint(1).to_bytes().unwrap(),
        b.checkpoint(1).to_bytes().unwrap()
    );
    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(train_stage1(&other, &d).unwrap().reports, a.reports);
}

#[test]
fn recorded_total_is_the_weighted_sum() {
    let mut c = toy(4);
    c.commit_weight = 0.25;
    c.gan_weight = 0.3;
    let d = data(&c);
    let s1 = train_stage1(&c, &d).unwrap();
    let s2 = train_stage2(&c, s1.tokenizer, None, &d).unwrap();
    let w = LossWeights::from(&c);
    for r in s1.reports.iter().chain(&s2.reports) {
        assert!((r.total - r.recompute_total(&w)).abs() <= 1e-12 * r.total.abs().max(1.0), "{r:?}");
    }
    assert!(s1.reports.iter().all(|r| r.gan_g == 0.0 && r.gan_d == 0.0));
}

#[test]
fn discriminator_loss_decreases() {
    let c = toy(100);
    let d = data(&c);
    let s1 = train_stage1(&toy(20), &d).unwrap();
    let s2 = train_stage2(&c, s1.tokenizer, None, &d).unwrap();
    let first = s2.reports[0].gan_d;
    let tail: f64 = s2.reports[90..].iter().map(|r| r.gan_d).sum::<f64>() / 10.0;
    assert!(tail < first, "gan_d {first} -> {tail}");
}

#[test]
fn ema_tracks_weights() {
    let mut c = toy(3);
    c.ema = true;
    c.ema_decay = 0.0;
    let d = data(&c);
    let out = train_stage1(&c, &d).unwrap();
    assert_eq!(out.ema.as_ref().unwrap(), &out.tokenizer);

    c.ema_decay = 1.0;
    let out = train_stage1(&c, &d).unwrap();
    let init = Tokenizer::new(c.model.clone(), c.seed).unwrap();
    assert_eq!(out.ema.unwrap().encoder.params(), init.encoder.params());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let mut c = toy(50);
    c.lr = 1e200;
    let err = train_stage1(&c, &data(&c)).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn f32_training_checkpoints_round_trip_exactly() {
    let mut c = toy(3);
    c.precision = Precision::F32;
    let d = data(&c);
    let s1 = train_stage1(&c, &d).unwrap();
    let s2 = train_stage2(&c, s1.tokenizer, None, &d).unwrap();
    let ck = s2.checkpoint(2);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let (tok, disc) = Tokenizer::from_checkpoint(&back, false).unwrap();
    assert_eq!(tok, s2.tokenizer);
    assert_eq!(disc.as_ref(), s2.discriminator.as_ref());
    assert_eq!(back, ck);
}

#[test]
fn tanh_pre_activation_bounds_the_latent() {
    let mut m = micro_model();
    m.quant.pre_activation = gqtok::quantizer::PreActivation::Tanh;
    let tok = Tokenizer::new(m, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut rng).map(|v| v * 50.0);
    assert!(tok.latent(&x).unwrap().data().iter().all(|v| v.abs() <= 1.0));
}
