//! Toy-scale counting network built around six PFC blocks.
//!
//! Image -> three `conv3x3 + ReLU + maxpool2` stages (feature stride 8) ->
//! six fractional-dilation convolutions with ReLU, each driven by its own
//! rate map -> bilinear x4 upsampling -> 1x1 convolution with ReLU. The
//! density map comes out at half the input resolution.
//!
//! The perspective map reaches feature resolution by average pooling and is
//! divided by `persp_unit` before entering the rate pipeline.

use std::str::FromStr;

use crate::data::density::DensityMap;
use crate::data::io::Checkpoint;
use crate::error::{Error, Result};
use crate::fdconv::{fdconv_backward, fdconv_forward, ConvWeights};
use crate::layers::{
    avg_pool, conv2d_backward, conv2d_forward, maxpool2, maxpool2_backward, relu,
    relu_backward, upsample_bilinear, upsample_bilinear_backward, ConvGeom,
};
use crate::params::{load_params, prefixed, save_params, ParamSet, ParamView};
use crate::penet::{split_maps, stack_maps, Penet, PenetCache, PenetGrads, Phase, Source, SIZE_MULTIPLE};
use crate::perspective::{mean_perspective, normalize_zeta, rate_backward, rate_map, PerspectiveMap, RateParams};
use crate::tensor::{resample_grid, Grid2, ResampleMode, Rng, Tensor4};

pub const NUM_PFC: usize = 6;
pub const BACKBONE_STAGES: usize = 3;
pub const FEATURE_STRIDE: usize = 8;
pub const UPSAMPLE: usize = 4;
/// Constant rate of blocks left as plain dilated convolutions when fewer
/// than six blocks are PFCs.
pub const PLAIN_RATE: f32 = 2.0;

/// The head starts with zero taps and this bias, so its ReLU is active
/// everywhere whatever the features look like.
pub const HEAD_INIT_BIAS: f32 = 1e-3;

const CONV3: ConvGeom = ConvGeom { k: 3, stride: 1, pad: 1 };
const CONV1: ConvGeom = ConvGeom { k: 1, stride: 1, pad: 0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerspSource {
    GroundTruth,
    Penet,
    /// Each map replaced by its spatial mean.
    Mean,
}

impl PerspSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PerspSource::GroundTruth => "gt",
            PerspSource::Penet => "penet",
            PerspSource::Mean => "mean",
        }
    }

    fn code(self) -> f32 {
        match self {
            PerspSource::GroundTruth => 0.0,
            PerspSource::Penet => 1.0,
            PerspSource::Mean => 2.0,
        }
    }

    fn from_code(c: f32) -> Result<Self> {
        match c as u32 {
            0 => Ok(PerspSource::GroundTruth),
            1 => Ok(PerspSource::Penet),
            2 => Ok(PerspSource::Mean),
            _ => Err(Error::Format(format!("unknown perspective source code {c}"))),
        }
    }
}

impl FromStr for PerspSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(PerspSource::GroundTruth),
            "penet" => Ok(PerspSource::Penet),
            "mean" => Ok(PerspSource::Mean),
            _ => Err(Error::Config(format!("unknown perspective source {s:?} (gt|penet|mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfdnetConfig {
    pub backbone_channels: Vec<usize>,
    pub pfc_channels: Vec<usize>,
    /// The first `pfc_count` blocks are PFCs; the rest run at
    /// [`PLAIN_RATE`].
    pub pfc_count: usize,
    pub persp_source: PerspSource,
    pub persp_unit: f32,
    /// Average-pooling factor applied to the image before PENet.
    pub penet_downsample: usize,
    /// Gaussian init std; `None` selects He init.
    pub init_std: Option<f32>,
}

impl Default for PfdnetConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64],
            pfc_channels: vec![64, 64, 64, 32, 32, 16],
            pfc_count: NUM_PFC,
            persp_source: PerspSource::GroundTruth,
            persp_unit: 16.0,
            penet_downsample: 8,
            init_std: None,
        }
    }
}

impl PfdnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.len() != BACKBONE_STAGES || self.pfc_channels.len() != NUM_PFC {
            return Err(Error::Config(format!(
                "need {BACKBONE_STAGES} backbone and {NUM_PFC} PFC widths, got {} and {}",
                self.backbone_channels.len(),
                self.pfc_channels.len()
            )));
        }
        if self.backbone_channels.iter().chain(&self.pfc_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.pfc_count > NUM_PFC {
            return Err(Error::Config(format!("pfc_count {} > {NUM_PFC}", self.pfc_count)));
        }
        if !(self.persp_unit > 0.0 && self.persp_unit.is_finite()) {
            return Err(Error::Config(format!("persp_unit must be positive, got {}", self.persp_unit)));
        }
        if ![1, 2, 4, 8].contains(&self.penet_downsample) {
            return Err(Error::Config(format!("penet_downsample must be 1, 2, 4 or 8, got {}", self.penet_downsample)));
        }
        Ok(())
    }
}

/// Trainable tensors of the counting network (PENet excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct PfdnetParams {
    pub backbone: Vec<ConvWeights>,
    pub blocks: Vec<ConvWeights>,
    pub rates: Vec<RateParams>,
    pub head: ConvWeights,
}

impl PfdnetParams {
    fn init(cfg: &PfdnetConfig, rng: &mut Rng) -> Result<Self> {
        let mut make = |cout: usize, cin: usize, k: usize| match cfg.init_std {
            Some(std) => ConvWeights::gaussian(cout, cin, k, std, rng),
            None => ConvWeights::he(cout, cin, k, rng),
        };
        let mut cin = 3;
        let mut backbone = Vec::new();
        for &c in &cfg.backbone_channels {
            backbone.push(make(c, cin, 3)?);
            cin = c;
        }
        let mut blocks = Vec::new();
        for &c in &cfg.pfc_channels {
            blocks.push(make(c, cin, 3)?);
            cin = c;
        }
        let mut head = ConvWeights::zeros(1, cin, 1)?;
        head.bias.fill(HEAD_INIT_BIAS);
        Ok(Self {
            backbone,
            blocks,
            rates: vec![RateParams::default(); NUM_PFC],
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.iter().map(ConvWeights::zeros_like).collect(),
            blocks: self.blocks.iter().map(ConvWeights::zeros_like).collect(),
            rates: vec![RateParams::zero(); self.rates.len()],
            head: self.head.zeros_like(),
        }
    }
}

impl ParamSet for PfdnetParams {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        let mut v = prefixed("backbone", self.backbone.tensors());
        v.extend(prefixed("pfc", self.blocks.tensors()));
        v.extend(prefixed("pfc", self.rates.tensors()));
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.blocks.tensors_mut());
        v.extend(self.rates.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pfdnet {
    pub config: PfdnetConfig,
    pub params: PfdnetParams,
    /// Perspective estimator, required when `persp_source` is `Penet`.
    pub penet: Option<Penet>,
    /// PENet outputs are multiplied by this to get perspective values.
    pub penet_scale: f32,
}

#[derive(Clone, Debug)]
pub struct PfdnetOutput {
    pub density: Vec<Grid2>,
    /// `rate_maps[block][item]` at feature resolution.
    pub rate_maps: Vec<Vec<Grid2>>,
    /// Raw PENet prediction per item (before `penet_scale`), when PENet ran.
    pub penet_pred: Option<Vec<Grid2>>,
}

#[derive(Clone, Debug)]
struct StageCache {
    input: Tensor4,
    pre: Tensor4,
    argmax: Vec<u32>,
}

#[derive(Clone, Debug)]
struct PenetLink {
    cache: PenetCache,
    /// Spatial size of the PENet output.
    size: (usize, usize),
}

/// State captured by [`Pfdnet::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct PfdnetCache {
    fingerprint: u64,
    backbone: Vec<StageCache>,
    /// Normalized perspective per item at feature resolution.
    s_feat: Vec<Grid2>,
    block_inputs: Vec<Tensor4>,
    block_pre: Vec<Tensor4>,
    rates: Vec<Vec<Grid2>>,
    up_input_shape: [usize; 4],
    head_input: Tensor4,
    head_pre: Tensor4,
    penet: Option<PenetLink>,
}

#[derive(Clone, Debug)]
pub struct PfdnetGrads {
    pub params: PfdnetParams,
    pub penet: Option<PenetGrads>,
    /// Gradient with respect to each raw PENet prediction, when PENet ran.
    pub d_penet_pred: Option<Vec<Grid2>>,
}

/// FNV-1a over the bit patterns of every parameter.
fn fingerprint<P: ParamSet + ?Sized>(p: &P, mut h: u64) -> u64 {
    for t in p.tensors() {
        for v in t.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01B3);
            }
        }
    }
    h
}

impl Pfdnet {
    pub fn new(config: PfdnetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = PfdnetParams::init(&config, rng)?;
        Ok(Self {
            config,
            params,
            penet: None,
            penet_scale: 1.0,
        })
    }

    /// Attaches a trained PENet whose outputs times `scale` are perspective
    /// values. Its phase becomes one of the joint phases, so the decoder
    /// stays frozen.
    pub fn attach_penet(&mut self, mut penet: Penet, scale: f32, supervised: bool) {
        penet.phase = if supervised { Phase::JointSupervised } else { Phase::JointWeak };
        self.penet = Some(penet);
        self.penet_scale = scale;
    }

    fn fingerprint(&self) -> u64 {
        let h = fingerprint(&self.params, 0xCBF2_9CE4_8422_2325);
        match &self.penet {
            Some(p) => fingerprint(p, h),
            None => h,
        }
    }

    fn check_input(&self, image: &Tensor4) -> Result<()> {
        let [_, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {c}")));
        }
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by {FEATURE_STRIDE}")));
        }
        if self.config.persp_source == PerspSource::Penet {
            let m = SIZE_MULTIPLE * self.config.penet_downsample;
            if h % m != 0 || w % m != 0 {
                return Err(Error::Shape(format!("image {h}x{w} not divisible by {m} for PENet input")));
            }
        }
        Ok(())
    }

    /// Perspective per item at feature resolution, divided by `persp_unit`.
    fn feature_persp(&self, image: &Tensor4, persp: Option<&[PerspectiveMap]>) -> Result<(Vec<Grid2>, Option<PenetLink>, Option<Vec<Grid2>>)> {
        let [n, _, h, w] = image.shape();
        let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
        let unit = self.config.persp_unit;
        let from_maps = |mean: bool| -> Result<Vec<Grid2>> {
            let maps = persp.ok_or_else(|| Error::Config("perspective maps required for this source".into()))?;
            if maps.len() != n {
                return Err(Error::Shape(format!("{} perspective maps for {n} images", maps.len())));
            }
            maps.iter()
                .map(|m| {
                    if m.grid().shape() != (h, w) {
                        return Err(Error::Shape(format!("perspective {:?} vs image {:?}", m.grid().shape(), (h, w))));
                    }
                    let g = if mean {
                        Grid2::filled(fh, fw, mean_perspective(m).grid().get(0, 0))
                    } else {
                        resample_grid(m.grid(), fh, fw, ResampleMode::AveragePool)?
                    };
                    Ok(g.map(|v| v / unit))
                })
                .collect()
        };
        match self.config.persp_source {
            PerspSource::GroundTruth => Ok((from_maps(false)?, None, None)),
            PerspSource::Mean => Ok((from_maps(true)?, None, None)),
            PerspSource::Penet => {
                let penet = self
                    .penet
                    .as_ref()
                    .ok_or_else(|| Error::Config("persp_source=penet needs a PENet".into()))?;
                let d = self.config.penet_downsample;
                let small = if d > 1 { avg_pool(image, d)? } else { image.clone() };
                let (out, cache) = penet.forward(&small, Source::Image)?;
                let pred = split_maps(&out);
                let s = pred
                    .iter()
                    .map(|g| {
                        let pooled = resample_grid(g, fh, fw, ResampleMode::AveragePool)?;
                        Ok(pooled.map(|v| v * self.penet_scale / unit))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let link = PenetLink {
                    cache,
                    size: (h / d, w / d),
                };
                Ok((s, Some(link), Some(pred)))
            }
        }
    }

    fn block_rates(&self, b: usize, s_feat: &[Grid2]) -> Vec<Grid2> {
        s_feat
            .iter()
            .map(|s| {
                if b < self.config.pfc_count {
                    let rp = &self.params.rates[b];
                    rate_map(&normalize_zeta(s, rp), rp)
                } else {
                    Grid2::filled(s.h(), s.w(), PLAIN_RATE)
                }
            })
            .collect()
    }

    pub fn forward(&self, image: &Tensor4, persp: Option<&[PerspectiveMap]>) -> Result<(PfdnetOutput, PfdnetCache)> {
        self.check_input(image)?;
        let (s_feat, penet, penet_pred) = self.feature_persp(image, persp)?;

        let mut backbone = Vec::with_capacity(BACKBONE_STAGES);
        let mut cur = image.clone();
        for w in &self.params.backbone {
            let pre = conv2d_forward(&cur, w, CONV3)?;
            let (pooled, argmax) = maxpool2(&relu(&pre))?;
            backbone.push(StageCache { input: cur, pre, argmax });
            cur = pooled;
        }

        let mut block_inputs = Vec::with_capacity(NUM_PFC);
        let mut block_pre = Vec::with_capacity(NUM_PFC);
        let mut rates = Vec::with_capacity(NUM_PFC);
        for (b, w) in self.params.blocks.iter().enumerate() {
            let r = self.block_rates(b, &s_feat);
            let pre = fdconv_forward(&cur, w, &r)?;
            let next = relu(&pre);
            block_inputs.push(cur);
            block_pre.push(pre);
            rates.push(r);
            cur = next;
        }

        let up_input_shape = cur.shape();
        let up = upsample_bilinear(&cur, UPSAMPLE);
        let head_pre = conv2d_forward(&up, &self.params.head, CONV1)?;
        let density = split_maps(&relu(&head_pre));

        let out = PfdnetOutput {
            density,
            rate_maps: rates.clone(),
            penet_pred,
        };
        let cache = PfdnetCache {
            fingerprint: self.fingerprint(),
            backbone,
            s_feat,
            block_inputs,
            block_pre,
            rates,
            up_input_shape,
            head_input: up,
            head_pre,
            penet,
        };
        Ok((out, cache))
    }

    /// Counting-only inference.
    pub fn predict(&self, image: &Tensor4, persp: Option<&[PerspectiveMap]>) -> Result<Vec<Grid2>> {
        Ok(self.forward(image, persp)?.0.density)
    }

    /// Backpropagates `d_density` (and, in supervised PENet mode, an extra
    /// gradient on the raw PENet prediction). The cache must come from a
    /// forward pass with the current parameters.
    pub fn backward(&self, cache: &PfdnetCache, d_density: &[Grid2], d_penet_pred: Option<&[Grid2]>) -> Result<PfdnetGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::InvalidState("parameters changed since the forward pass".into()));
        }
        let dy = stack_maps(d_density)?;
        if dy.shape() != cache.head_pre.shape() {
            return Err(Error::Shape(format!("upstream {:?} vs {:?}", dy.shape(), cache.head_pre.shape())));
        }
        let mut grads = self.params.zeros_like();

        let dz = relu_backward(&cache.head_pre, &dy);
        let (d_up, dw) = conv2d_backward(&cache.head_input, &self.params.head, CONV1, &dz)?;
        grads.head = dw;
        let mut g = upsample_bilinear_backward(cache.up_input_shape, UPSAMPLE, &d_up);

        let n = cache.s_feat.len();
        let mut dl_ds: Vec<Grid2> = cache.s_feat.iter().map(|s| Grid2::zeros(s.h(), s.w())).collect();
        for b in (0..NUM_PFC).rev() {
            let dz = relu_backward(&cache.block_pre[b], &g);
            let fg = fdconv_backward(&cache.block_inputs[b], &self.params.blocks[b], &cache.rates[b], &dz)?;
            grads.blocks[b] = fg.d_weights;
            if b < self.config.pfc_count {
                for item in 0..n {
                    let (rg, ds) = rate_backward(&cache.s_feat[item], &self.params.rates[b], &fg.d_rate[item])?;
                    grads.rates[b].add_assign(&rg);
                    for (a, v) in dl_ds[item].data_mut().iter_mut().zip(ds.data()) {
                        *a += v;
                    }
                }
            }
            g = fg.d_input;
        }

        for (i, st) in cache.backbone.iter().enumerate().rev() {
            let d_act = maxpool2_backward(st.pre.shape(), &st.argmax, &g);
            let dz = relu_backward(&st.pre, &d_act);
            let (dx, dw) = conv2d_backward(&st.input, &self.params.backbone[i], CONV3, &dz)?;
            grads.backbone[i] = dw;
            g = dx;
        }

        let mut pred_grads: Option<Vec<Grid2>> = None;
        let penet = match (&cache.penet, &self.penet) {
            (Some(link), Some(penet)) => {
                let (ph, pw) = link.size;
                let f = (ph / dl_ds[0].h()) as f32;
                let k = self.penet_scale / self.config.persp_unit / (f * f);
                let mut maps = Vec::with_capacity(n);
                for (item, ds) in dl_ds.iter().enumerate() {
                    let mut m = Grid2::zeros(ph, pw);
                    let fi = ph / ds.h();
                    for i in 0..ph {
                        for j in 0..pw {
                            m.set(i, j, ds.get(i / fi, j / fi) * k);
                        }
                    }
                    if let Some(extra) = d_penet_pred {
                        for (a, v) in m.data_mut().iter_mut().zip(extra[item].data()) {
                            *a += v;
                        }
                    }
                    maps.push(m);
                }
                let pg = penet.backward(&link.cache, &stack_maps(&maps)?)?;
                pred_grads = Some(maps);
                Some(pg)
            }
            _ => None,
        };
        Ok(PfdnetGrads {
            params: grads,
            penet,
            d_penet_pred: pred_grads,
        })
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        let c = &self.config;
        let as_f32 = |v: &[usize]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        ck.push("pfdnet.backbone_channels", &[BACKBONE_STAGES], &as_f32(&c.backbone_channels));
        ck.push("pfdnet.pfc_channels", &[NUM_PFC], &as_f32(&c.pfc_channels));
        ck.push("pfdnet.pfc_count", &[1], &[c.pfc_count as f32]);
        ck.push("pfdnet.persp_source", &[1], &[c.persp_source.code()]);
        ck.push("pfdnet.persp_unit", &[1], &[c.persp_unit]);
        ck.push("pfdnet.penet_downsample", &[1], &[c.penet_downsample as f32]);
        save_params(ck, "pfdnet", &self.params);
        if let Some(p) = &self.penet {
            ck.push("penet.scale", &[1], &[self.penet_scale]);
            p.save(ck, "penet");
        }
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let usizes = |name: &str| -> Result<Vec<usize>> { Ok(ck.require(name)?.data.iter().map(|&v| v as usize).collect()) };
        let scalar = |name: &str| -> Result<f32> { Ok(ck.require(name)?.data[0]) };
        let config = PfdnetConfig {
            backbone_channels: usizes("pfdnet.backbone_channels")?,
            pfc_channels: usizes("pfdnet.pfc_channels")?,
            pfc_count: scalar("pfdnet.pfc_count")? as usize,
            persp_source: PerspSource::from_code(scalar("pfdnet.persp_source")?)?,
            persp_unit: scalar("pfdnet.persp_unit")?,
            penet_downsample: scalar("pfdnet.penet_downsample")? as usize,
            init_std: None,
        };
        let mut net = Self::new(config, &mut Rng::new(0))?;
        load_params(ck, "pfdnet", &mut net.params)?;
        if ck.get("penet.scale").is_some() {
            net.penet_scale = scalar("penet.scale")?;
            net.penet = Some(Penet::load(ck, "penet")?);
        }
        Ok(net)
    }
}

/// Sum-pools a full-resolution density target to the network's
/// half-resolution output, preserving the count.
pub fn half_resolution_target(d: &DensityMap) -> Result<Grid2> {
    let g = d.grid();
    resample_grid(g, g.h() / 2, g.w() / 2, ResampleMode::SumPool)
}

/// `sum density`; negative entries are rejected.
pub fn predict_count(density: &Grid2) -> Result<f64> {
    if let Some(v) = density.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Domain(format!("density entry {v} is negative")));
    }
    Ok(density.sum())
}
