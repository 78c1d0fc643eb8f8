//! Desk-scale convolutional encoder, decoder and patch discriminator.
//!
//! Tensors are `(n, c, h, w)`. Each network owns a [`ParamSet`]; a forward
//! pass binds those parameters onto a [`Graph`] and returns the output node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Precision};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative slope of every leaky ReLU in the model zoo.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Bind as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Bind as constants; no gradient flows to them.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Replace every tensor, checking names and shapes.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, slot), (n, t)) in self.names.iter().zip(&mut self.tensors).zip(named) {
            if name != n || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match stored {n} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
        let shape = if transpose {
            [cin, cout, k, k]
        } else {
            [cout, cin, k, k]
        };
        let w = params.push(format!("{name}.weight"), Tensor::uniform(&shape, -bound, bound, rng));
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad,
            transpose,
        }
    }

    fn apply(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        if self.transpose {
            g.conv2d_transpose(x, ids[self.w], Some(ids[self.b]), self.stride, self.pad)
        } else {
            g.conv2d(x, ids[self.w], Some(ids[self.b]), self.stride, self.pad)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Self {
        Self {
            c1: Conv::new(params, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1, false),
            c2: Conv::new(params, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1, false),
        }
    }

    fn apply(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = g.leaky_relu(x, LEAKY_SLOPE)?;
        let h = self.c1.apply(g, ids, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.c2.apply(g, ids, h)?;
        g.add(x, h)
    }
}

/// Shared shape of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub n_res_blocks: usize,
    /// Spatial downsampling factor `f`, one of 2, 4, 8.
    pub downsample: usize,
    /// `d`
    pub latent_channels: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.downsample) {
            return Err(Error::invalid(format!("downsample must be 2, 4 or 8, got {}", self.downsample)));
        }
        if self.image_channels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::invalid("channel_mult must be a non-empty list of positive values"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Channel width at resolution level `l` (0 = full resolution).
    pub fn width(&self, l: usize) -> usize {
        self.base_channels * self.channel_mult[l.min(self.channel_mult.len() - 1)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderSpec {
    pub arch: EncoderSpec,
    /// `n_z`
    pub noise_channels: usize,
    pub generative: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub image_channels: usize,
    pub base_channels: usize,
    pub n_layers: usize,
}

fn check_image(x: &[usize], channels: usize, f: usize) -> Result<()> {
    if x.len() != 4 || x[1] != channels {
        return Err(Error::invalid(format!(
            "expected (n,{channels},H,W) images, got {x:?}"
        )));
    }
    if x[2] % f != 0 || x[3] % f != 0 || x[2] == 0 || x[3] == 0 {
        return Err(Error::invalid(format!(
            "image dims {}x{} not divisible by downsample factor {f}",
            x[2], x[3]
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    params: ParamSet,
    conv_in: Conv,
    levels: Vec<(Vec<ResBlock>, Conv)>,
    conv_out: Conv,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let p = &mut params;
        let conv_in = Conv::new(p, &mut rng, "conv_in", spec.image_channels, spec.width(0), 3, 1, 1, false);
        let mut levels = Vec::new();
        for l in 0..spec.levels() {
            let ch = spec.width(l);
            let blocks = (0..spec.n_res_blocks)
                .map(|r| ResBlock::new(p, &mut rng, &format!("down{l}.res{r}"), ch))
                .collect();
            let down = Conv::new(p, &mut rng, &format!("down{l}.downsample"), ch, spec.width(l + 1), 3, 2, 1, false);
            levels.push((blocks, down));
        }
        let top = spec.width(spec.levels());
        let conv_out = Conv::new(p, &mut rng, "conv_out", top, spec.latent_channels, 3, 1, 1, false);
        Ok(Self {
            spec,
            params,
            conv_in,
            levels,
            conv_out,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `(n, C, H, W)` images to `(n, d, H/f, W/f)` latents.
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_image(g.shape(x), self.spec.image_channels, self.spec.downsample)?;
        let mut h = self.conv_in.apply(g, ids, x)?;
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.apply(g, ids, h)?;
            }
            h = down.apply(g, ids, h)?;
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        self.conv_out.apply(g, ids, h)
    }

    /// Inference on a batch without recording gradients.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Precision::F64);
        let ids = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let u = self.forward(&mut g, &ids, x)?;
        Ok(g.value(u).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    spec: DecoderSpec,
    params: ParamSet,
    conv_in: Conv,
    levels: Vec<(Vec<ResBlock>, Conv)>,
    conv_out: Conv,
}

impl Decoder {
    /// Stage-1 decoder: `conv_in` reads only the `d` latent channels.
    pub fn new(arch: EncoderSpec, noise_channels: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let p = &mut params;
        let top = arch.width(arch.levels());
        let conv_in = Conv::new(p, &mut rng, "conv_in", arch.latent_channels, top, 3, 1, 1, false);
        let mut levels = Vec::new();
        for l in (0..arch.levels()).rev() {
            let ch = arch.width(l + 1);
            let blocks = (0..arch.n_res_blocks)
                .map(|r| ResBlock::new(p, &mut rng, &format!("up{l}.res{r}"), ch))
                .collect();
            let up = Conv::new(p, &mut rng, &format!("up{l}.upsample"), ch, arch.width(l), 4, 2, 1, true);
            levels.push((blocks, up));
        }
        let conv_out = Conv::new(p, &mut rng, "conv_out", arch.width(0), arch.image_channels, 3, 1, 1, false);
        Ok(Self {
            spec: DecoderSpec {
                arch,
                noise_channels,
                generative: false,
            },
            params,
            conv_in,
            levels,
            conv_out,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn is_generative(&self) -> bool {
        self.spec.generative
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Widen `conv_in` by `n_z` input channels whose weights start at zero.
    /// Existing weights and biases are kept bit-exact.
    pub fn expand_input_zero_init(&mut self) -> Result<()> {
        if self.spec.generative {
            return Err(Error::invalid("decoder input is already expanded"));
        }
        let nz = self.spec.noise_channels;
        let d = self.spec.arch.latent_channels;
        let old = &self.params.tensors[self.conv_in.w];
        let (cout, k) = (old.shape()[0], old.shape()[2]);
        let cin = d + nz;
        let mut data = vec![0.0; cout * cin * k * k];
        for co in 0..cout {
            let src = &old.data()[co * d * k * k..(co + 1) * d * k * k];
            data[co * cin * k * k..co * cin * k * k + d * k * k].copy_from_slice(src);
        }
        self.params.tensors[self.conv_in.w] = Tensor::new(vec![cout, cin, k, k], data)?;
        self.spec.generative = true;
        Ok(())
    }

    /// Latent `(n, d, h, w)` plus optional noise `(n, n_z, h, w)` to images
    /// `(n, C, h*f, w*f)` in `[-1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        latent: NodeId,
        noise: Option<NodeId>,
    ) -> Result<NodeId> {
        let ls = g.shape(latent).to_vec();
        if ls.len() != 4 || ls[1] != self.spec.arch.latent_channels {
            return Err(Error::invalid(format!(
                "expected (n,{},h,w) latent, got {ls:?}",
                self.spec.arch.latent_channels
            )));
        }
        let input = match (self.spec.generative, noise) {
            (false, None) => latent,
            (false, Some(_)) => {
                return Err(Error::invalid("noise given to a non-generative decoder"));
            }
            (true, None) => return Err(Error::invalid("generative decoder requires noise z")),
            (true, Some(z)) => {
                let zs = g.shape(z);
                if zs != [ls[0], self.spec.noise_channels, ls[2], ls[3]] {
                    return Err(Error::ShapeMismatch {
                        op: "decode",
                        lhs: ls.clone(),
                        rhs: zs.to_vec(),
                    });
                }
                g.concat(&[latent, z], 1)?
            }
        };
        let mut h = self.conv_in.apply(g, ids, input)?;
        for (blocks, up) in &self.levels {
            for b in blocks {
                h = b.apply(g, ids, h)?;
            }
            let a = g.leaky_relu(h, LEAKY_SLOPE)?;
            h = up.apply(g, ids, a)?;
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv_out.apply(g, ids, h)?;
        g.tanh(h)
    }

    pub fn decode(&self, latent: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new(Precision::F64);
        let ids = self.params.bind_frozen(&mut g);
        let l = g.constant(latent.clone());
        let z = noise.map(|z| g.constant(z.clone()));
        let out = self.forward(&mut g, &ids, l, z)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    params: ParamSet,
    layers: Vec<Conv>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        if spec.n_layers == 0 || spec.image_channels == 0 || spec.base_channels == 0 {
            return Err(Error::invalid("discriminator needs at least one layer and positive widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut layers = Vec::new();
        let mut cin = spec.image_channels;
        for l in 0..spec.n_layers {
            let last = l + 1 == spec.n_layers;
            let cout = if last { 1 } else { spec.base_channels << l };
            layers.push(Conv::new(&mut params, &mut rng, &format!("layer{l}"), cin, cout, 3, 2, 1, false));
            cin = cout;
        }
        Ok(Self {
            spec,
            params,
            layers,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Patch logits `(n, 1, H/2^L, W/2^L)`.
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (l, conv) in self.layers.iter().enumerate() {
            h = conv.apply(g, ids, h)?;
            if l + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    pub fn discriminate(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Precision::F64);
        let ids = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &ids, x)?;
        Ok(g.value(out).clone())
    }
}

/// Standard-normal noise for the generative decoder, reproducible per seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoisePrior {
    pub channels: usize,
    pub seed: u64,
}

impl NoisePrior {
    pub fn sample(&self, n: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Tensor::randn(&[n, self.channels, h, w], &mut rng)
    }
}

/// Draw `(n, channels, h, w)` standard-normal noise from an existing stream.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, channels: usize, h: usize, w: usize) -> Tensor {
    Tensor::randn(&[n, channels, h, w], rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> EncoderSpec {
        EncoderSpec {
            image_channels: 1,
            base_channels: 4,
            channel_mult: vec![1, 2],
            n_res_blocks: 1,
            downsample: 4,
            latent_channels: 8,
        }
    }

    fn image(seed: u64, c: usize, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, c, s, s], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn encoder_shape_contract() {
        let enc = Encoder::new(arch(), 0).unwrap();
        let u = enc.encode(&image(1, 1, 16)).unwrap();
        assert_eq!(u.shape(), &[1, 8, 4, 4]);
        assert!(u.is_finite());
    }

    #[test]
    fn encoder_is_deterministic() {
        let enc = Encoder::new(arch(), 0).unwrap();
        let x = image(1, 1, 16);
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        assert_eq!(Encoder::new(arch(), 0).unwrap(), enc);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let enc = Encoder::new(arch(), 0).unwrap();
        assert!(enc.encode(&image(1, 1, 14)).is_err());
        assert!(enc.encode(&image(1, 3, 16)).is_err());
    }

    #[test]
    fn first_conv_receives_gradient() {
        let enc = Encoder::new(arch(), 3).unwrap();
        let mut g = Graph::default();
        let ids = enc.params().bind(&mut g);
        let x = g.constant(image(2, 1, 16));
        let u = enc.forward(&mut g, &ids, x).unwrap();
        let sq = g.mul(u, u).unwrap();
        let l = g.mean(sq).unwrap();
        let grads = g.backward(l).unwrap();
        let gw = grads.get(ids[0]).unwrap();
        assert!(gw.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn decoder_output_shape_and_range() {
        let dec = Decoder::new(arch(), 8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::uniform(&[2, 8, 4, 4], -3.0, 3.0, &mut rng);
        let out = dec.decode(&q, None).unwrap();
        assert_eq!(out.shape(), &[2, 1, 16, 16]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generative_decoder_requires_noise() {
        let mut dec = Decoder::new(arch(), 8, 5).unwrap();
        dec.expand_input_zero_init().unwrap();
        let q = Tensor::full(&[1, 8, 4, 4], 1.0);
        assert!(dec.decode(&q, None).is_err());
        assert!(dec.expand_input_zero_init().is_err());
    }

    #[test]
    fn zero_init_expansion_preserves_function() {
        let dec1 = Decoder::new(arch(), 3, 5).unwrap();
        let mut dec2 = dec1.clone();
        dec2.expand_input_zero_init().unwrap();
        assert_eq!(dec2.params().count(), dec1.params().count() + 3 * 3 * 3 * 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
        let base = dec1.decode(&q, None).unwrap();
        for z in [Tensor::zeros(&[2, 3, 4, 4]), Tensor::randn(&[2, 3, 4, 4], &mut rng)] {
            assert_eq!(dec2.decode(&q, Some(&z)).unwrap(), base);
        }
    }

    #[test]
    fn discriminator_patch_shape() {
        let spec = DiscriminatorSpec {
            image_channels: 1,
            base_channels: 4,
            n_layers: 3,
        };
        let d = Discriminator::new(spec, 0).unwrap();
        assert_eq!(d.discriminate(&image(0, 1, 16)).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn zero_weight_discriminator_is_constant() {
        let spec = DiscriminatorSpec {
            image_channels: 1,
            base_channels: 4,
            n_layers: 3,
        };
        let mut d = Discriminator::new(spec, 0).unwrap();
        for t in d.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = d.discriminate(&image(4, 1, 16)).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    }

    #[test]
    fn noise_prior_is_seeded() {
        let p = NoisePrior { channels: 2, seed: 7 };
        assert_eq!(p.sample(1, 3, 3), p.sample(1, 3, 3));
        assert_ne!(p.sample(1, 3, 3), NoisePrior { channels: 2, seed: 8 }.sample(1, 3, 3));
    }
}
