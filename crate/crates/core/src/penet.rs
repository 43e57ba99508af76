//! Perspective-estimation auto-encoder.
//!
//! Two encoders share one decoder: `enc_s` reads a perspective map, `enc_i`
//! reads an RGB image. Each encoder has six 3x3 stride-2 convolutions with
//! leaky ReLU (slope 0.2); the decoder has six stride-2 transposed
//! convolutions with ReLU, the last one producing a single channel. Widths
//! are `32, 64, ..., 1024` times `width_mult`.

use crate::data::io::Checkpoint;
use crate::error::{Error, Result};
use crate::fdconv::ConvWeights;
use crate::layers::{
    conv2d_backward, conv2d_forward, leaky_relu, leaky_relu_backward, relu, relu_backward, upconv_backward,
    upconv_forward, ConvGeom, UpConvWeights,
};
use crate::params::{load_params, prefixed, save_params, ParamSet, ParamView};
use crate::tensor::{Grid2, Rng, Tensor4};

pub const DEPTH: usize = 6;
pub const LRELU_SLOPE: f32 = 0.2;
/// Spatial dims must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;
/// Reported PSNR when prediction and target agree exactly.
pub const PSNR_CAP: f64 = 99.0;

const ENC: ConvGeom = ConvGeom { k: 3, stride: 2, pad: 1 };

/// Channel counts of the six encoder stages.
pub fn stage_channels(width_mult: f32) -> Result<[usize; DEPTH]> {
    if !(width_mult > 0.0 && width_mult.is_finite()) {
        return Err(Error::Config(format!("width_mult must be positive, got {width_mult}")));
    }
    let mut out = [0; DEPTH];
    for (i, c) in out.iter_mut().enumerate() {
        *c = ((32usize << i) as f32 * width_mult).round().max(1.0) as usize;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Map-to-map reconstruction; trains `enc_s` and the decoder.
    Reconstruct,
    /// Image-to-map with the decoder frozen; trains `enc_i`.
    ImageToMap,
    /// Joint training with the counting network, perspective supervised.
    JointSupervised,
    /// Joint training with the counting network, no perspective labels.
    JointWeak,
}

impl Phase {
    pub fn decoder_frozen(self) -> bool {
        self != Phase::Reconstruct
    }

    pub fn code(self) -> u32 {
        match self {
            Phase::Reconstruct => 1,
            Phase::ImageToMap => 2,
            Phase::JointSupervised => 3,
            Phase::JointWeak => 4,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            1 => Phase::Reconstruct,
            2 => Phase::ImageToMap,
            3 => Phase::JointSupervised,
            4 => Phase::JointWeak,
            _ => return Err(Error::Format(format!("unknown phase code {c}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// 1-channel perspective map into `enc_s`.
    Map,
    /// 3-channel image into `enc_i`.
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stages: Vec<ConvWeights>,
}

#[derive(Clone, Debug)]
struct EncoderCache {
    inputs: Vec<Tensor4>,
    pre: Vec<Tensor4>,
}

impl Encoder {
    fn he(in_channels: usize, chans: &[usize; DEPTH], rng: &mut Rng) -> Result<Self> {
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(DEPTH);
        for &c in chans {
            stages.push(ConvWeights::he(c, cin, 3, rng)?);
            cin = c;
        }
        Ok(Self { stages })
    }

    fn in_channels(&self) -> usize {
        self.stages[0].cin()
    }

    fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(ConvWeights::zeros_like).collect(),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, EncoderCache)> {
        let mut cache = EncoderCache {
            inputs: Vec::with_capacity(DEPTH),
            pre: Vec::with_capacity(DEPTH),
        };
        let mut cur = x.clone();
        for w in &self.stages {
            let z = conv2d_forward(&cur, w, ENC)?;
            let a = leaky_relu(&z, LRELU_SLOPE);
            cache.inputs.push(cur);
            cache.pre.push(z);
            cur = a;
        }
        Ok((cur, cache))
    }

    fn backward(&self, cache: &EncoderCache, dy: &Tensor4) -> Result<(Tensor4, Encoder)> {
        let mut grads = self.zeros_like();
        let mut g = dy.clone();
        for i in (0..DEPTH).rev() {
            let dz = leaky_relu_backward(&cache.pre[i], &g, LRELU_SLOPE);
            let (dx, dw) = conv2d_backward(&cache.inputs[i], &self.stages[i], ENC, &dz)?;
            grads.stages[i] = dw;
            g = dx;
        }
        Ok((g, grads))
    }
}

impl ParamSet for Encoder {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        self.stages.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.stages.tensors_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub stages: Vec<UpConvWeights>,
}

#[derive(Clone, Debug)]
struct DecoderCache {
    inputs: Vec<Tensor4>,
    pre: Vec<Tensor4>,
}

impl Decoder {
    fn he(chans: &[usize; DEPTH], rng: &mut Rng) -> Self {
        let stages = (0..DEPTH)
            .map(|i| {
                let cin = chans[DEPTH - 1 - i];
                let cout = if i + 1 == DEPTH { 1 } else { chans[DEPTH - 2 - i] };
                UpConvWeights::he(cin, cout, rng)
            })
            .collect();
        Self { stages }
    }

    fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(UpConvWeights::zeros_like).collect(),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, DecoderCache)> {
        let mut cache = DecoderCache {
            inputs: Vec::with_capacity(DEPTH),
            pre: Vec::with_capacity(DEPTH),
        };
        let mut cur = x.clone();
        for w in &self.stages {
            let z = upconv_forward(&cur, w)?;
            let a = relu(&z);
            cache.inputs.push(cur);
            cache.pre.push(z);
            cur = a;
        }
        Ok((cur, cache))
    }

    fn backward(&self, cache: &DecoderCache, dy: &Tensor4) -> Result<(Tensor4, Decoder)> {
        let mut grads = self.zeros_like();
        let mut g = dy.clone();
        for i in (0..DEPTH).rev() {
            let dz = relu_backward(&cache.pre[i], &g);
            let (dx, dw) = upconv_backward(&cache.inputs[i], &self.stages[i], &dz)?;
            grads.stages[i] = dw;
            g = dx;
        }
        Ok((g, grads))
    }
}

impl ParamSet for Decoder {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        self.stages.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.stages.tensors_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Penet {
    pub width_mult: f32,
    pub enc_s: Encoder,
    pub enc_i: Encoder,
    pub dec: Decoder,
    pub phase: Phase,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct PenetCache {
    source: Source,
    input_shape: [usize; 4],
    enc: EncoderCache,
    dec: DecoderCache,
}

impl PenetCache {
    pub fn source(&self) -> Source {
        self.source
    }
}

/// Gradients of one backward pass. The encoder entry belongs to whichever
/// encoder ran forward; `dec` is all zeros when the decoder is frozen.
#[derive(Clone, Debug)]
pub struct PenetGrads {
    pub source: Source,
    pub enc: Encoder,
    pub dec: Decoder,
    pub d_input: Tensor4,
}

impl Penet {
    pub fn new(width_mult: f32, rng: &mut Rng) -> Result<Self> {
        let chans = stage_channels(width_mult)?;
        Ok(Self {
            width_mult,
            enc_s: Encoder::he(1, &chans, rng)?,
            enc_i: Encoder::he(3, &chans, rng)?,
            dec: Decoder::he(&chans, rng),
            phase: Phase::Reconstruct,
        })
    }

    /// All-zero weights of the given width.
    pub fn zeros(width_mult: f32) -> Result<Self> {
        let mut p = Self::new(width_mult, &mut Rng::new(0))?;
        p.scale(0.0);
        Ok(p)
    }

    pub fn encoder(&self, source: Source) -> &Encoder {
        match source {
            Source::Map => &self.enc_s,
            Source::Image => &self.enc_i,
        }
    }

    pub fn encoder_mut(&mut self, source: Source) -> &mut Encoder {
        match source {
            Source::Map => &mut self.enc_s,
            Source::Image => &mut self.enc_i,
        }
    }

    /// Runs one encoder and the decoder. Output is `N x 1 x H x W`.
    pub fn forward(&self, x: &Tensor4, source: Source) -> Result<(Tensor4, PenetCache)> {
        let enc = self.encoder(source);
        let [_, c, h, w] = x.shape();
        if c != enc.in_channels() {
            return Err(Error::Shape(format!("{source:?} encoder takes {} channels, got {c}", enc.in_channels())));
        }
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!("input {h}x{w} not divisible by {SIZE_MULTIPLE}")));
        }
        let (code, enc_cache) = enc.forward(x)?;
        let (out, dec_cache) = self.dec.forward(&code)?;
        Ok((
            out,
            PenetCache {
                source,
                input_shape: x.shape(),
                enc: enc_cache,
                dec: dec_cache,
            },
        ))
    }

    /// Forward pass returning one map per batch item.
    pub fn predict(&self, x: &Tensor4, source: Source) -> Result<Vec<Grid2>> {
        let (out, _) = self.forward(x, source)?;
        Ok(split_maps(&out))
    }

    pub fn backward(&self, cache: &PenetCache, dy: &Tensor4) -> Result<PenetGrads> {
        let [n, _, h, w] = cache.input_shape;
        if dy.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!("upstream {:?} vs {:?}", dy.shape(), [n, 1, h, w])));
        }
        let (d_code, mut dec) = self.dec.backward(&cache.dec, dy)?;
        if self.phase.decoder_frozen() {
            dec.scale(0.0);
        }
        let (d_input, enc) = self.encoder(cache.source).backward(&cache.enc, &d_code)?;
        Ok(PenetGrads {
            source: cache.source,
            enc,
            dec,
            d_input,
        })
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push(format!("{prefix}.width_mult"), &[1], &[self.width_mult]);
        ck.push(format!("{prefix}.phase"), &[1], &[self.phase.code() as f32]);
        save_params(ck, prefix, self);
    }

    pub fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let wm = ck.require(&format!("{prefix}.width_mult"))?.data[0];
        let mut p = Self::zeros(wm)?;
        p.phase = Phase::from_code(ck.require(&format!("{prefix}.phase"))?.data[0] as u32)?;
        load_params(ck, prefix, &mut p)?;
        Ok(p)
    }
}

impl ParamSet for Penet {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        let mut v = prefixed("enc_s", self.enc_s.tensors());
        v.extend(prefixed("enc_i", self.enc_i.tensors()));
        v.extend(prefixed("dec", self.dec.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.enc_s.tensors_mut();
        v.extend(self.enc_i.tensors_mut());
        v.extend(self.dec.tensors_mut());
        v
    }
}

/// Splits an `N x 1 x H x W` tensor into per-item grids.
pub fn split_maps(t: &Tensor4) -> Vec<Grid2> {
    let [n, _, h, w] = t.shape();
    (0..n)
        .map(|b| Grid2::from_vec(h, w, t.plane(b, 0).to_vec()).expect("plane size"))
        .collect()
}

/// Stacks per-item grids into `N x 1 x H x W`.
pub fn stack_maps(maps: &[Grid2]) -> Result<Tensor4> {
    let first = maps.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.shape() != (h, w) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", m.shape(), (h, w))));
        }
        data.extend_from_slice(m.data());
    }
    Tensor4::from_vec([maps.len(), 1, h, w], data)
}

/// `(1 / 2N) * sum ||pred - target||^2` over a batch of `N` maps, with its
/// gradient with respect to each prediction.
pub fn l2_loss(pred: &[Grid2], target: &[Grid2]) -> Result<(f64, Vec<Grid2>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let mut g = Grid2::zeros(p.h(), p.w());
        for ((gv, &a), &b) in g.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
            let d = a as f64 - b as f64;
            total += d * d;
            *gv = (d / n) as f32;
        }
        grads.push(g);
    }
    Ok((total / (2.0 * n), grads))
}

/// Reconstruction loss of the map-to-map path.
pub fn loss_s2s(pred: &[Grid2], target: &[Grid2]) -> Result<f64> {
    l2_loss(pred, target).map(|(l, _)| l)
}

/// Loss of the image-to-map path. Same form as [`loss_s2s`]; kept separate
/// because it drives the image encoder.
pub fn loss_i2s(pred: &[Grid2], target: &[Grid2]) -> Result<f64> {
    l2_loss(pred, target).map(|(l, _)| l)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Grid2, target: &Grid2, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be positive, got {peak}")));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pred.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}
