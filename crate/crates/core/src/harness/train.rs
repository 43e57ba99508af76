//! Training and evaluation loops for PENet and the counting network.

use std::io::Write;

use crate::data::density::make_density;
use crate::data::metrics::{game, mae_rmse};
use crate::error::{Error, Result};
use crate::harness::adam::Adam;
use crate::harness::dataset::{flip_tensor, Sample};
use crate::layers::avg_pool;
use crate::penet::{l2_loss, psnr, split_maps, stack_maps, Penet, Phase, Source};
use crate::perspective::PerspectiveMap;
use crate::pfdnet::{half_resolution_target, PerspSource, Pfdnet};
use crate::tensor::{resample_grid, Grid2, ResampleMode, Rng, Tensor4};

/// Epoch-wise shuffled batches, deterministic in the seed.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            for i in (1..self.order.len()).rev() {
                let j = rng.below(i + 1);
                self.order.swap(i, j);
            }
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn stack_images(images: &[&Tensor4]) -> Result<Tensor4> {
    Tensor4::stack(images)
}

// ---------------------------------------------------------------------------
// PENet

/// PENet inputs and targets at the network's working resolution.
#[derive(Clone, Debug)]
pub struct PenetData {
    /// `1 x 3 x h x w` average-pooled images.
    pub images: Vec<Tensor4>,
    /// Perspective maps pooled to `h x w` and divided by `scale`.
    pub maps: Vec<Grid2>,
    pub scale: f32,
}

/// Pools images and perspective maps by `downsample`. Targets are divided
/// by `scale`, or by the largest perspective value in the set when `scale`
/// is `None`, so they lie in `(0, 1]`.
pub fn penet_data(samples: &[Sample], downsample: usize, scale: Option<f32>) -> Result<PenetData> {
    let mut images = Vec::with_capacity(samples.len());
    let mut raw = Vec::with_capacity(samples.len());
    for s in samples {
        let p = s
            .persp
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no perspective map", s.id)))?;
        let (h, w) = s.shape();
        images.push(avg_pool(&s.image, downsample)?);
        raw.push(resample_grid(p.grid(), h / downsample, w / downsample, ResampleMode::AveragePool)?);
    }
    let scale = scale.unwrap_or_else(|| {
        raw.iter()
            .flat_map(|g| g.data().iter().copied())
            .fold(0.0f32, f32::max)
    });
    if !(scale > 0.0) {
        return Err(Error::Data(format!("invalid perspective scale {scale}")));
    }
    let maps = raw.into_iter().map(|g| g.map(|v| v / scale)).collect();
    Ok(PenetData { images, maps, scale })
}

#[derive(Clone, Debug)]
pub struct PenetOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PenetReport {
    pub psnr_per_epoch: Vec<f64>,
    pub final_psnr: f64,
}

fn penet_input(data: &PenetData, idx: &[usize], source: Source) -> Result<Tensor4> {
    match source {
        Source::Map => stack_maps(&idx.iter().map(|&i| data.maps[i].clone()).collect::<Vec<_>>()),
        Source::Image => stack_images(&idx.iter().map(|&i| &data.images[i]).collect::<Vec<_>>()),
    }
}

/// Mean PSNR (peak 1) of PENet predictions over the whole set.
pub fn penet_psnr(penet: &Penet, data: &PenetData, source: Source) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.maps.len()).collect();
    for chunk in idx.chunks(16) {
        let pred = penet.predict(&penet_input(data, chunk, source)?, source)?;
        for (p, &i) in pred.iter().zip(chunk) {
            total += psnr(p, &data.maps[i], 1.0)?;
        }
    }
    Ok(total / data.maps.len() as f64)
}

/// Phase 1 trains `enc_s` and the decoder on map reconstruction. Phase 2
/// trains `enc_i` to reproduce the maps from images through the frozen
/// decoder. Writes `epoch,loss,psnr` lines to `log`.
pub fn train_penet(penet: &mut Penet, phase: Phase, data: &PenetData, opts: &PenetOptions, log: &mut dyn Write) -> Result<PenetReport> {
    let source = match phase {
        Phase::Reconstruct => Source::Map,
        Phase::ImageToMap => Source::Image,
        _ => return Err(Error::Usage("PENet standalone training runs phase 1 or 2".into())),
    };
    if data.maps.is_empty() || opts.batch == 0 {
        return Err(Error::Usage("empty dataset or batch".into()));
    }
    penet.phase = phase;
    let mut rng = Rng::new(opts.seed);
    let mut batcher = Batcher::new(data.maps.len(), opts.batch);
    let steps_per_epoch = data.maps.len().div_ceil(batcher.batch);
    let mut opt_enc = Adam::new(opts.lr);
    let mut opt_dec = Adam::new(opts.lr);
    writeln!(log, "epoch,loss,psnr")?;
    let mut psnr_per_epoch = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let idx = batcher.next(&mut rng);
            let x = penet_input(data, &idx, source)?;
            let (out, cache) = penet.forward(&x, source)?;
            let target: Vec<Grid2> = idx.iter().map(|&i| data.maps[i].clone()).collect();
            let (loss, d) = l2_loss(&split_maps(&out), &target)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("PENet loss diverged at epoch {epoch}")));
            }
            epoch_loss += loss;
            let g = penet.backward(&cache, &stack_maps(&d)?)?;
            opt_enc.step(penet.encoder_mut(source), &g.enc)?;
            if !phase.decoder_frozen() {
                opt_dec.step(&mut penet.dec, &g.dec)?;
            }
        }
        let p = penet_psnr(penet, data, source)?;
        writeln!(log, "{epoch},{:.6e},{p:.4}", epoch_loss / steps_per_epoch as f64)?;
        psnr_per_epoch.push(p);
    }
    let final_psnr = match psnr_per_epoch.last() {
        Some(&p) => p,
        None => penet_psnr(penet, data, source)?,
    };
    Ok(PenetReport {
        psnr_per_epoch,
        final_psnr,
    })
}

// ---------------------------------------------------------------------------
// Counting network

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f32,
    /// PENet image-encoder learning rate in the joint modes.
    pub penet_lr: f32,
    pub flip_prob: f64,
    pub lambda_persp: f32,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Loss of the first iteration, before any update.
    pub first_loss: f64,
    /// Full-set MAE before training and after the last iteration.
    pub initial_mae: f64,
    pub final_mae: f64,
    pub losses: Vec<f64>,
}

/// Half-resolution density targets, one per sample.
pub fn density_targets(samples: &[Sample]) -> Result<Vec<Grid2>> {
    samples
        .iter()
        .map(|s| half_resolution_target(&make_density(&s.heads, s.shape())?))
        .collect()
}

fn maybe_persp<'a>(net: &Pfdnet, maps: &'a [PerspectiveMap]) -> Option<&'a [PerspectiveMap]> {
    (net.config.persp_source != PerspSource::Penet).then_some(maps)
}

fn persp_of(s: &Sample, needed: bool) -> Result<Option<PerspectiveMap>> {
    match (&s.persp, needed) {
        (Some(p), _) => Ok(Some(p.clone())),
        (None, false) => Ok(None),
        (None, true) => Err(Error::Data(format!("{}: no perspective map", s.id))),
    }
}

/// Trains `net` with Adam on `(1 / 2N) sum ||density - target||^2`, plus
/// `lambda_persp` times the PENet image-to-map loss when the attached PENet
/// is in supervised joint mode. Writes `step,loss,mae` lines to `log`.
pub fn train_pfdnet(net: &mut Pfdnet, samples: &[Sample], opts: &TrainOptions, log: &mut dyn Write) -> Result<TrainReport> {
    if samples.is_empty() || opts.batch == 0 {
        return Err(Error::Usage("empty dataset or batch".into()));
    }
    let penet_mode = net.config.persp_source == PerspSource::Penet;
    if penet_mode && net.penet.is_none() {
        return Err(Error::Usage("persp_source=penet needs a PENet checkpoint".into()));
    }
    let supervised = net.penet.as_ref().is_some_and(|p| p.phase == Phase::JointSupervised);
    let needs_persp = !penet_mode || supervised;
    let targets = density_targets(samples)?;
    let persp: Vec<Option<PerspectiveMap>> = samples.iter().map(|s| persp_of(s, needs_persp)).collect::<Result<_>>()?;

    let initial_mae = evaluate(net, samples)?.mae;
    let mut rng = Rng::new(opts.seed);
    let mut batcher = Batcher::new(samples.len(), opts.batch);
    let mut opt = Adam::new(opts.lr);
    let mut opt_penet = Adam::new(opts.penet_lr);
    let mut losses = Vec::with_capacity(opts.iterations);
    writeln!(log, "step,loss,mae")?;
    for step in 1..=opts.iterations {
        let idx = batcher.next(&mut rng);
        let mut images = Vec::with_capacity(idx.len());
        let mut tgts = Vec::with_capacity(idx.len());
        let mut maps = Vec::with_capacity(idx.len());
        for &i in &idx {
            let flip = rng.bernoulli(opts.flip_prob);
            let s = &samples[i];
            images.push(if flip { flip_tensor(&s.image) } else { s.image.clone() });
            tgts.push(if flip { targets[i].flip_horizontal() } else { targets[i].clone() });
            if let Some(p) = &persp[i] {
                maps.push(if flip { PerspectiveMap::new(p.grid().flip_horizontal())? } else { p.clone() });
            }
        }
        let x = stack_images(&images.iter().collect::<Vec<_>>())?;
        let (out, cache) = net.forward(&x, maybe_persp(net, &maps))?;
        let (mut loss, d) = l2_loss(&out.density, &tgts)?;

        let d_penet = if supervised {
            let pred = out.penet_pred.as_ref().expect("PENet ran");
            let (ph, pw) = (pred[0].h(), pred[0].w());
            let scale = net.penet_scale;
            let ptgt: Vec<Grid2> = maps
                .iter()
                .map(|m| Ok(resample_grid(m.grid(), ph, pw, ResampleMode::AveragePool)?.map(|v| v / scale)))
                .collect::<Result<_>>()?;
            let (pl, pd) = l2_loss(pred, &ptgt)?;
            loss += opts.lambda_persp as f64 * pl;
            Some(pd.into_iter().map(|g| g.map(|v| v * opts.lambda_persp)).collect::<Vec<_>>())
        } else {
            None
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at step {step}")));
        }
        let preds: Vec<f64> = out.density.iter().map(Grid2::sum).collect();
        let gts: Vec<f64> = idx.iter().map(|&i| samples[i].heads.len() as f64).collect();
        let (mae, _) = mae_rmse(&preds, &gts)?;
        writeln!(log, "{step},{loss:.6e},{mae:.6}")?;
        losses.push(loss);

        let g = net.backward(&cache, &d, d_penet.as_deref())?;
        opt.step(&mut net.params, &g.params)?;
        if let (Some(pg), Some(penet)) = (&g.penet, net.penet.as_mut()) {
            opt_penet.step(&mut penet.enc_i, &pg.enc)?;
        }
    }
    let final_mae = evaluate(net, samples)?.mae;
    Ok(TrainReport {
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        initial_mae,
        final_mae,
        losses,
    })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    /// GAME(0) through GAME(3), averaged over images.
    pub game: [f64; 4],
    pub pred_counts: Vec<f64>,
}

/// Compares half-resolution density maps against targets.
pub fn score_maps(preds: &[Grid2], gts: &[Grid2], gt_counts: &[f64]) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Usage(format!("{} predictions vs {} targets", preds.len(), gts.len())));
    }
    let pred_counts: Vec<f64> = preds.iter().map(Grid2::sum).collect();
    let (mae, rmse) = mae_rmse(&pred_counts, gt_counts)?;
    let mut g = [0.0; 4];
    for (level, slot) in g.iter_mut().enumerate() {
        let mut total = 0.0;
        for (p, t) in preds.iter().zip(gts) {
            total += game(p, t, level as u32)?;
        }
        *slot = total / preds.len() as f64;
    }
    Ok(EvalReport {
        mae,
        rmse,
        game: g,
        pred_counts,
    })
}

/// Runs the network over every sample (no augmentation) and scores it.
pub fn evaluate(net: &Pfdnet, samples: &[Sample]) -> Result<EvalReport> {
    let targets = density_targets(samples)?;
    let needs_persp = net.config.persp_source != PerspSource::Penet;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(4) {
        let x = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let maps: Vec<PerspectiveMap> = chunk
            .iter()
            .map(|s| persp_of(s, needs_persp))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        preds.extend(net.predict(&x, maybe_persp(net, &maps))?);
    }
    let counts: Vec<f64> = samples.iter().map(|s| s.heads.len() as f64).collect();
    score_maps(&preds, &targets, &counts)
}
