//! Finite-difference gradient checks for every differentiable component.
//!
//! Each check perturbs one scalar by `+-STEP` in `f32`, evaluates the loss in
//! `f64` and compares the central difference with the analytic gradient.
//! The relative error of an entry is `|a - fd| / max(|a|, |fd|, floor)` with
//! `floor = 1e-2 * max |a|` over the entries of that class, so entries whose
//! gradient is tiny next to their class are judged on an absolute scale.
//!
//! Rates are kept at least [`KINK_MARGIN`] away from integers and from the
//! rate clamp, where the sampled function has kinks. The composite checks
//! sample network parameters, and a perturbation there can flip a ReLU or a
//! max-pool winner somewhere downstream. Such a sample is recognised from
//! the loss at `0`, `+-STEP / 2`, `+-STEP` and `+-2 * STEP`: the central
//! differences disagree, or the second differences do. It is counted as
//! skipped and replaced by a fresh draw.

use std::fmt;

use crate::error::Result;
use crate::fdconv::{fdconv_backward, fdconv_forward, ConvWeights};
use crate::params::ParamSet;
use crate::penet::{l2_loss, split_maps, stack_maps, Penet, Phase, Source};
use crate::perspective::{normalize_zeta, rate_backward, rate_map, PerspectiveMap, RateParams};
use crate::pfdnet::{Pfdnet, PfdnetConfig, PerspSource, FEATURE_STRIDE};
use crate::tensor::{Fill, Grid2, Rng, Tensor4};

pub const STEP: f32 = 1e-3;
pub const KINK_MARGIN: f32 = 0.2;
pub const OP_TOL: f64 = 1e-2;
pub const COMPOSITE_TOL: f64 = 3e-2;
pub const MAX_DRAWS_PER_SAMPLE: usize = 40;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: &'static str,
    pub class: String,
    pub checked: usize,
    /// Samples discarded because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{:.3e},{:.0e},{}",
            self.suite,
            self.class,
            self.checked,
            self.skipped,
            self.max_rel,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub const CSV_HEADER: &str = "suite,class,checked,skipped,max_rel,tol,status";

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }
}

fn summarize(suite: &'static str, class: impl Into<String>, pairs: &[(f64, f64)], tol: f64) -> CheckResult {
    let scale = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
    summarize_scaled(suite, class, pairs, tol, scale)
}

/// As [`summarize`], with the class scale given (the largest analytic
/// magnitude over the whole class, not only the sampled entries).
fn summarize_scaled(suite: &'static str, class: impl Into<String>, pairs: &[(f64, f64)], tol: f64, scale: f64) -> CheckResult {
    let floor = (1e-2 * scale).max(1e-12);
    // an all-zero class means the instance never exercised it
    let max_rel = if scale == 0.0 {
        f64::INFINITY
    } else {
        pairs
            .iter()
            .map(|&(a, fd)| (a - fd).abs() / a.abs().max(fd.abs()).max(floor))
            .fold(0.0, f64::max)
    };
    CheckResult {
        suite,
        class: class.into(),
        checked: pairs.len(),
        skipped: 0,
        max_rel,
        tol,
    }
}

fn central(mut eval: impl FnMut(f32) -> Result<f64>) -> Result<f64> {
    Ok((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP as f64))
}

fn random_tensor(shape: [usize; 4], mean: f32, std: f32, rng: &mut Rng) -> Result<Tensor4> {
    Tensor4::new(shape, Fill::Gaussian { mean, std, rng })
}

/// A rate in `[lo, hi]` at least [`KINK_MARGIN`] from every integer.
pub fn smooth_rate(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    loop {
        let r = rng.range(lo, hi);
        if (r - r.round()).abs() >= KINK_MARGIN {
            return r;
        }
    }
}

fn sum_sq(t: &Tensor4) -> f64 {
    t.data().iter().map(|&v| (v as f64).powi(2)).sum()
}

/// `L = sum y^2` through one fractional-dilation convolution on a
/// `1 x 2 x 6 x 6` input; every entry of every gradient is checked.
/// Inputs are kept small so that `f32` rounding in the loss stays well below
/// the tolerance at this step size.
pub fn fdconv_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let x = random_tensor([1, 2, 6, 6], 0.0, 0.25, &mut rng)?;
    let mut w = ConvWeights::gaussian(3, 2, 3, 0.5, &mut rng)?;
    w.bias.iter_mut().for_each(|b| *b = rng.normal(0.0, 0.1));
    let rate = Grid2::from_vec(6, 6, (0..36).map(|_| smooth_rate(&mut rng, 0.2, 2.8)).collect())?;
    let rates = vec![rate];
    let y = fdconv_forward(&x, &w, &rates)?;
    let g = fdconv_backward(&x, &w, &rates, &y.map(|v| 2.0 * v))?;

    let loss = |x: &Tensor4, w: &ConvWeights, r: &[Grid2]| -> Result<f64> { Ok(sum_sq(&fdconv_forward(x, w, r)?)) };
    let mut out = Vec::new();

    let mut pairs = Vec::new();
    for i in 0..w.kernel.len() {
        let fd = central(|d| {
            let mut w2 = w.clone();
            w2.kernel[i] += d;
            loss(&x, &w2, &rates)
        })?;
        pairs.push((g.d_weights.kernel[i] as f64, fd));
    }
    out.push(summarize("fdconv", "d_weights", &pairs, OP_TOL));

    let mut pairs = Vec::new();
    for i in 0..w.bias.len() {
        let fd = central(|d| {
            let mut w2 = w.clone();
            w2.bias[i] += d;
            loss(&x, &w2, &rates)
        })?;
        pairs.push((g.d_weights.bias[i] as f64, fd));
    }
    out.push(summarize("fdconv", "d_bias", &pairs, OP_TOL));

    let mut pairs = Vec::new();
    for i in 0..x.len() {
        let fd = central(|d| {
            let mut x2 = x.clone();
            x2.data_mut()[i] += d;
            loss(&x2, &w, &rates)
        })?;
        pairs.push((g.d_input.data()[i] as f64, fd));
    }
    out.push(summarize("fdconv", "d_input", &pairs, OP_TOL));

    let mut pairs = Vec::new();
    for i in 0..36 {
        let fd = central(|d| {
            let mut r2 = rates.clone();
            r2[0].data_mut()[i] += d;
            loss(&x, &w, &r2)
        })?;
        pairs.push((g.d_rate[0].data()[i] as f64, fd));
    }
    out.push(summarize("fdconv", "d_rate", &pairs, OP_TOL));
    Ok(out)
}

/// `L = sum rate_map(normalize_zeta(s))^2` with respect to the four rate
/// scalars and every perspective entry.
pub fn perspective_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let s = Grid2::from_vec(4, 5, (0..20).map(|_| rng.range(-1.0, 4.0)).collect())?;
    let p = RateParams {
        alpha: rng.range(0.5, 1.5),
        beta: rng.range(0.5, 1.5),
        gamma: rng.range(1.0, 2.0),
        theta: rng.range(0.5, 1.5),
    };
    let loss = |s: &Grid2, p: &RateParams| -> f64 {
        rate_map(&normalize_zeta(s, p), p)
            .data()
            .iter()
            .map(|&r| (r as f64).powi(2))
            .sum()
    };
    let r = rate_map(&normalize_zeta(&s, &p), &p);
    let (g, ds) = rate_backward(&s, &p, &r.map(|v| 2.0 * v))?;
    let mut out = Vec::new();
    // the four scalars share one scale, so one that happens to be near zero
    // is judged against the others
    let scale = g.as_array().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    for (k, name) in ["alpha", "beta", "gamma", "theta"].iter().enumerate() {
        let fd = central(|d| {
            let mut v = p.as_array();
            v[k] += d;
            Ok(loss(&s, &RateParams::from_array(v)))
        })?;
        out.push(summarize_scaled("perspective", *name, &[(g.as_array()[k] as f64, fd)], OP_TOL, scale));
    }
    let mut pairs = Vec::new();
    for i in 0..20 {
        let fd = central(|d| {
            let mut s2 = s.clone();
            s2.data_mut()[i] += d;
            Ok(loss(&s2, &p))
        })?;
        pairs.push((ds.data()[i] as f64, fd));
    }
    out.push(summarize("perspective", "d_persp", &pairs, OP_TOL));
    Ok(out)
}

/// Central difference at [`STEP`], or `None` when the loss has a kink near
/// the sample: the central differences at `STEP / 2`, `STEP` and
/// `2 * STEP` disagree, or so do the second differences. `base` is the loss
/// at zero offset and `floor` the absolute scale below which differences
/// are not meaningful.
fn kink_free_central(base: f64, floor: f64, mut eval: impl FnMut(f32) -> Result<f64>) -> Result<Option<f64>> {
    let h = STEP as f64;
    let (p1, m1, p2, m2) = (eval(STEP)?, eval(-STEP)?, eval(2.0 * STEP)?, eval(-2.0 * STEP)?);
    let fd = (p1 - m1) / (2.0 * h);
    let wide = (p2 - m2) / (4.0 * h);
    let narrow = (eval(0.5 * STEP)? - eval(-0.5 * STEP)?) / h;
    // curvature seen at both steps agrees for any smooth loss; a kink near
    // the sample makes it scale like 1/h instead
    let bend = ((p1 + m1 - 2.0 * base) - (p2 + m2 - 2.0 * base) / 4.0).abs() / h;
    let limit = 0.1 * COMPOSITE_TOL * fd.abs().max(wide.abs()).max(floor);
    let agree = (fd - wide).abs() <= limit && (fd - narrow).abs() <= limit;
    Ok((agree && bend <= limit).then_some(fd))
}

/// Checks `samples` random entries of every tensor of a [`ParamSet`] model,
/// grouping results by tensor name with the leading stage index removed.
/// Draws that land on a kink are skipped and redrawn, up to
/// [`MAX_DRAWS_PER_SAMPLE`] times per wanted sample.
fn check_params<P: ParamSet + Clone>(
    suite: &'static str,
    model: &P,
    grads: &P,
    samples: usize,
    rng: &mut Rng,
    mut loss: impl FnMut(&P) -> Result<f64>,
) -> Result<Vec<CheckResult>> {
    let views: Vec<(String, usize)> = model.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let gvals: Vec<Vec<f32>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut floors: Vec<(String, f64)> = Vec::new();
    for ((name, _), g) in views.iter().zip(&gvals) {
        let class = class_name(name);
        let m = g.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        match floors.iter_mut().find(|(c, _)| *c == class) {
            Some((_, f)) => *f = f.max(m),
            None => floors.push((class, m)),
        }
    }
    let base = loss(model)?;
    let mut classes: Vec<(String, Vec<(f64, f64)>, usize)> = Vec::new();
    for (ti, (name, len)) in views.iter().enumerate() {
        let class = class_name(name);
        let floor = 1e-2 * floors.iter().find(|(c, _)| *c == class).map_or(0.0, |f| f.1);
        let want = samples.min(*len);
        let mut pairs = Vec::new();
        let mut skipped = 0;
        let mut draws = 0;
        while pairs.len() < want && draws < want * MAX_DRAWS_PER_SAMPLE {
            draws += 1;
            let idx = rng.below(*len);
            let fd = kink_free_central(base, floor, |d| {
                let mut m = model.clone();
                m.tensors_mut()[ti][idx] += d;
                loss(&m)
            })?;
            let Some(fd) = fd else {
                skipped += 1;
                continue;
            };
            pairs.push((gvals[ti][idx] as f64, fd));
        }
        match classes.iter_mut().find(|(c, _, _)| *c == class) {
            Some((_, v, s)) => {
                v.extend(pairs);
                *s += skipped;
            }
            None => classes.push((class, pairs, skipped)),
        }
    }
    Ok(classes
        .into_iter()
        .map(|(c, pairs, skipped)| {
            let scale = floors.iter().find(|(f, _)| *f == c).map_or(0.0, |f| f.1);
            CheckResult {
                skipped,
                ..summarize_scaled(suite, c, &pairs, COMPOSITE_TOL, scale)
            }
        })
        .collect())
}

/// `enc_s.3.kernel` -> `enc_s.kernel`.
fn class_name(name: &str) -> String {
    name.split('.')
        .filter(|part| part.parse::<usize>().is_err())
        .collect::<Vec<_>>()
        .join(".")
}

/// Replaces every bias of `p` with a small positive draw. Zero biases on
/// freshly initialized layers put many pre-activations exactly on a ReLU
/// kink, which no finite difference can check.
fn lift_biases<P: ParamSet + ?Sized>(p: &mut P, rng: &mut Rng) {
    set_biases(p, rng, 0.05, 0.2);
}

/// Non-negative weights summing to one per output channel.
fn make_averaging(w: &mut ConvWeights) {
    let per_out = w.kernel.len() / w.cout();
    for row in w.kernel.chunks_mut(per_out) {
        row.iter_mut().for_each(|v| *v = v.abs());
        let total: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total.max(f32::MIN_POSITIVE));
    }
}

fn set_biases<P: ParamSet + ?Sized>(p: &mut P, rng: &mut Rng, lo: f32, hi: f32) {
    let names: Vec<bool> = p.tensors().iter().map(|t| t.name.ends_with("bias")).collect();
    for (t, is_bias) in p.tensors_mut().into_iter().zip(names) {
        if is_bias {
            t.iter_mut().for_each(|v| *v = rng.range(lo, hi));
        }
    }
}

/// Reconstruction loss through the full auto-encoder at width 1/16 on a
/// 64x64 map (map encoder and decoder), then the image-to-map loss with the
/// decoder frozen (image encoder).
pub fn penet_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut net = Penet::new(1.0 / 16.0, &mut rng)?;
    lift_biases(&mut net, &mut rng);
    let target = vec![Grid2::from_vec(64, 64, (0..64 * 64).map(|_| rng.range(0.0, 1.0)).collect())?];
    let loss = |n: &Penet, x: &Tensor4, src: Source| -> Result<f64> {
        let (out, _) = n.forward(x, src)?;
        Ok(l2_loss(&split_maps(&out), &target)?.0)
    };
    let grads_for = |n: &Penet, x: &Tensor4, src: Source| -> Result<crate::penet::PenetGrads> {
        let (out, cache) = n.forward(x, src)?;
        let (_, d) = l2_loss(&split_maps(&out), &target)?;
        n.backward(&cache, &stack_maps(&d)?)
    };

    let map = random_tensor([1, 1, 64, 64], 1.0, 0.5, &mut rng)?;
    net.phase = Phase::Reconstruct;
    let g = grads_for(&net, &map, Source::Map)?;
    let mut results = check_params("penet", &net.enc_s, &g.enc, 3, &mut rng, |e| {
        let mut m = net.clone();
        m.enc_s = e.clone();
        loss(&m, &map, Source::Map)
    })
    .map(|v| prefix_classes(v, "enc_s"))?;
    results.extend(
        check_params("penet", &net.dec, &g.dec, 3, &mut rng, |d| {
            let mut m = net.clone();
            m.dec = d.clone();
            loss(&m, &map, Source::Map)
        })
        .map(|v| prefix_classes(v, "dec"))?,
    );

    let image = random_tensor([1, 3, 64, 64], 0.5, 0.25, &mut rng)?;
    net.phase = Phase::ImageToMap;
    let g = grads_for(&net, &image, Source::Image)?;
    results.extend(
        check_params("penet", &net.enc_i, &g.enc, 3, &mut rng, |e| {
            let mut m = net.clone();
            m.enc_i = e.clone();
            loss(&m, &image, Source::Image)
        })
        .map(|v| prefix_classes(v, "enc_i"))?,
    );
    Ok(results)
}

fn prefix_classes(mut v: Vec<CheckResult>, prefix: &str) -> Vec<CheckResult> {
    for c in &mut v {
        c.class = format!("{prefix}.{}", c.class);
    }
    v
}

/// Perspective values (divided by the unit) whose rates stay clear of the
/// integer 2 under the default rate parameters; constant over each
/// stride-8 block so pooling keeps them.
fn blocky_persp(h: usize, w: usize, unit: f32, rng: &mut Rng) -> Result<PerspectiveMap> {
    let (bh, bw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let vals: Vec<f32> = (0..bh * bw)
        .map(|_| if rng.bernoulli(0.5) { rng.range(0.0, 1.4) } else { rng.range(2.0, 3.0) })
        .collect();
    let mut g = Grid2::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            g.set(i, j, unit * vals[(i / FEATURE_STRIDE) * bw + j / FEATURE_STRIDE]);
        }
    }
    PerspectiveMap::new(g.map(|v| v.max(1e-3)))
}

fn total_density(out: &[Grid2]) -> f64 {
    out.iter().map(Grid2::sum).sum()
}

/// Total predicted count of a tiny counting network, checked on sampled
/// entries of every parameter class, all 24 rate scalars included. A second
/// pass lets PENet supply the perspective and checks the gradient that
/// reaches its prediction map, perturbing the same map fed in as ground
/// truth; how PENet turns that gradient into encoder gradients is covered by
/// [`penet_suite`].
pub fn pfdnet_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let cfg = PfdnetConfig {
        backbone_channels: vec![4, 4, 4],
        pfc_channels: vec![4; 6],
        ..Default::default()
    };
    let mut net = Pfdnet::new(cfg.clone(), &mut rng)?;
    lift_biases(&mut net.params, &mut rng);
    // a positive head over ReLU features never goes dead; the default head
    // starts at zero, which would leave every upstream gradient zero
    net.params.head.kernel.iter_mut().for_each(|v| *v = rng.range(0.2, 1.0));
    let img = random_tensor([1, 3, 32, 32], 0.5, 0.25, &mut rng)?;
    let persp = vec![blocky_persp(32, 32, cfg.persp_unit, &mut rng)?];
    let (out, cache) = net.forward(&img, Some(&persp))?;
    let ones: Vec<Grid2> = out.density.iter().map(|d| Grid2::filled(d.h(), d.w(), 1.0)).collect();
    let grads = net.backward(&cache, &ones, None)?;
    let mut results = check_params("pfdnet", &net.params, &grads.params, 5, &mut rng, |p| {
        let mut m = net.clone();
        m.params = p.clone();
        Ok(total_density(&m.predict(&img, Some(&persp))?))
    })?;

    let pcfg = PfdnetConfig {
        persp_source: PerspSource::Penet,
        penet_downsample: 1,
        persp_unit: 1.0,
        ..cfg
    };
    let mut pnet = Pfdnet::new(pcfg, &mut rng)?;
    pnet.params = net.params.clone();
    // averaging blocks keep every ReLU after the backbone active, so the
    // perspective reaches the count through smooth operations only; the
    // head bias is dropped since a constant only adds rounding noise
    for b in &mut pnet.params.blocks {
        make_averaging(b);
        b.bias.iter_mut().for_each(|v| *v = 1e-3);
    }
    pnet.params.head.bias.iter_mut().for_each(|v| *v = 0.0);
    // a non-negative last layer over ReLU inputs keeps the prediction
    // strictly positive, as a ground-truth map must be
    let mut penet = Penet::new(1.0 / 16.0, &mut rng)?;
    lift_biases(&mut penet, &mut rng);
    if let Some(last) = penet.dec.stages.last_mut() {
        last.kernel.iter_mut().for_each(|v| *v = v.abs());
    }
    pnet.attach_penet(penet, 1.0, false);
    let img = random_tensor([1, 3, 64, 64], 0.5, 0.25, &mut rng)?;
    let (probe, _) = pnet.forward(&img, None)?;
    let pred = probe.penet_pred.expect("penet mode").remove(0);
    if pred.data().iter().any(|&v| v <= 0.0) {
        return Err(crate::error::Error::Numerical("PENet prediction not positive in the link check".into()));
    }
    // scale the perspective to mean 2, put a steep sigmoid's centre there,
    // and confine rates to (1.2, 1.8), clear of the bilinear kinks at
    // integers
    let mean = pred.sum() / (pred.h() * pred.w()) as f64;
    pnet.penet_scale = (2.0 / mean) as f32;
    for rp in &mut pnet.params.rates {
        *rp = RateParams {
            alpha: 4.0,
            beta: 2.0,
            gamma: 0.6,
            theta: 1.2,
        };
    }
    let (out, cache) = pnet.forward(&img, None)?;
    let ones: Vec<Grid2> = out.density.iter().map(|d| Grid2::filled(d.h(), d.w(), 1.0)).collect();
    let g = pnet.backward(&cache, &ones, None)?;
    let d_pred = g.d_penet_pred.expect("penet mode").remove(0);

    // the same map as ground truth; raising one feature cell's pixels by
    // `d` raises its pooled perspective by `d`
    let mut gt = pnet.clone();
    gt.penet = None;
    gt.config.persp_source = PerspSource::GroundTruth;
    let scale = pnet.penet_scale;
    let base_map = pred.map(|v| v * scale);
    let (fh, fw) = (pred.h() / FEATURE_STRIDE, pred.w() / FEATURE_STRIDE);
    let cell = |ci: usize, cj: usize| {
        (0..FEATURE_STRIDE).flat_map(move |i| (0..FEATURE_STRIDE).map(move |j| ((ci * FEATURE_STRIDE + i), (cj * FEATURE_STRIDE + j))))
    };
    let gt_loss = |m: Grid2| -> Result<f64> { Ok(total_density(&gt.predict(&img, Some(&[PerspectiveMap::new(m)?]))?)) };
    let mut pairs = Vec::with_capacity(fh * fw);
    for c in 0..fh * fw {
        let analytic = cell(c / fw, c % fw).map(|(i, j)| d_pred.get(i, j) as f64).sum::<f64>() / scale as f64;
        let fd = central(|d| {
            let mut m = base_map.clone();
            for (i, j) in cell(c / fw, c % fw) {
                m.set(i, j, m.get(i, j) + d);
            }
            gt_loss(m)
        })?;
        pairs.push((analytic, fd));
    }
    // judged as one map: `|a - fd| / |a|` in the 2-norm, since single cells
    // with a tiny gradient sit at the f32 rounding floor of the count
    let err: f64 = pairs.iter().map(|(a, fd)| (a - fd).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    results.push(CheckResult {
        suite: "pfdnet",
        class: "penet_pred_map".into(),
        checked: pairs.len(),
        skipped: 0,
        max_rel: if norm > 0.0 { err / norm } else { f64::INFINITY },
        tol: COMPOSITE_TOL,
    });

    let pg = g.penet.expect("penet mode yields PENet gradients");
    debug_assert_eq!(pnet.penet.as_ref().map(|p| p.phase), Some(Phase::JointWeak));
    results.push(CheckResult {
        suite: "pfdnet",
        class: "penet_dec_frozen".into(),
        checked: pg.dec.num_params(),
        skipped: 0,
        max_rel: if pg.dec.all_zero() { 0.0 } else { f64::INFINITY },
        tol: 0.0,
    });
    Ok(results)
}

pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    let mut results = fdconv_suite(seed)?;
    results.extend(perspective_suite(seed)?);
    results.extend(penet_suite(seed)?);
    results.extend(pfdnet_suite(seed)?);
    Ok(GradcheckReport { results })
}
