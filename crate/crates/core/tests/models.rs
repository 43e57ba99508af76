use pfdnet_core::data::synth::synth_dataset;
use pfdnet_core::harness::dataset::{from_scenes, Sample};
use pfdnet_core::harness::gradcheck::{self, COMPOSITE_TOL, OP_TOL};
use pfdnet_core::harness::train::{density_targets, penet_data, train_penet, train_pfdnet, PenetOptions, TrainOptions};
use pfdnet_core::params::ParamSet;
use pfdnet_core::penet::{l2_loss, Penet, Phase, Source};
use pfdnet_core::perspective::PerspectiveMap;
use pfdnet_core::pfdnet::{PerspSource, Pfdnet, PfdnetConfig, NUM_PFC};
use pfdnet_core::tensor::{Rng, Tensor4};

fn tiny(source: PerspSource) -> PfdnetConfig {
    PfdnetConfig {
        backbone_channels: vec![4, 4, 8],
        pfc_channels: vec![8, 8, 8, 4, 4, 4],
        persp_source: source,
        ..Default::default()
    }
}

fn samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    from_scenes(&synth_dataset(n, (size, size), (3, 8), seed).unwrap())
}

fn batch(samples: &[Sample]) -> (Tensor4, Vec<PerspectiveMap>) {
    let imgs: Vec<&Tensor4> = samples.iter().map(|s| &s.image).collect();
    let maps = samples.iter().map(|s| s.persp.clone().unwrap()).collect();
    (Tensor4::stack(&imgs).unwrap(), maps)
}

#[test]
fn gradient_suites_pass_on_several_seeds() {
    for seed in [1, 7, 19] {
        let report = gradcheck::run_all(seed).unwrap();
        for r in &report.results {
            assert!(r.passed(), "seed {seed}: {r}");
            if r.suite == "fdconv" || r.suite == "perspective" {
                assert!(r.tol <= OP_TOL);
            } else if r.class != "penet_dec_frozen" {
                assert!(r.tol <= COMPOSITE_TOL);
            }
        }
        let classes: Vec<&str> = report.results.iter().map(|r| r.class.as_str()).collect();
        for needed in ["d_weights", "d_input", "d_rate", "alpha", "beta", "gamma", "theta", "pfc.rate", "head.kernel"] {
            assert!(classes.contains(&needed), "missing class {needed}");
        }
        // at least five samples for every composite class; the tiny head
        // has only four taps and one bias
        for r in report.results.iter().filter(|r| r.suite == "pfdnet") {
            let want = match r.class.as_str() {
                "head.kernel" => 4,
                "head.bias" => 1,
                _ => 5,
            };
            assert!(r.checked >= want, "{r}");
        }
    }
}

#[test]
fn small_step_against_gradient_lowers_loss() {
    let data = samples(2, 32, 3);
    let mut net = Pfdnet::new(tiny(PerspSource::GroundTruth), &mut Rng::new(5)).unwrap();
    // a nonzero head so the gradient reaches every layer
    net.params.head.kernel.iter_mut().for_each(|v| *v = 0.05);
    let (x, maps) = batch(&data);
    let targets = density_targets(&data).unwrap();
    let loss_of = |n: &Pfdnet| l2_loss(&n.predict(&x, Some(&maps)).unwrap(), &targets).unwrap().0;
    let (out, cache) = net.forward(&x, Some(&maps)).unwrap();
    let (l0, d) = l2_loss(&out.density, &targets).unwrap();
    let g = net.backward(&cache, &d, None).unwrap();
    let mut stepped = net.clone();
    stepped.params.add_scaled(&g.params, -1e-3);
    assert!(loss_of(&stepped) < l0);
}

#[test]
fn mean_ablation_rate_maps_are_constant() {
    let data = samples(2, 32, 4);
    let net = Pfdnet::new(tiny(PerspSource::Mean), &mut Rng::new(1)).unwrap();
    let (x, maps) = batch(&data);
    let (out, _) = net.forward(&x, Some(&maps)).unwrap();
    assert_eq!(out.rate_maps.len(), NUM_PFC);
    for block in &out.rate_maps {
        for item in block {
            let first = item.data()[0];
            assert!(item.data().iter().all(|&v| v == first));
        }
    }
    let gt = Pfdnet { config: tiny(PerspSource::GroundTruth), ..net.clone() };
    let (out_gt, _) = gt.forward(&x, Some(&maps)).unwrap();
    let varies = out_gt.rate_maps[0][0].data().windows(2).any(|w| w[0] != w[1]);
    assert!(varies, "row-linear perspective should give varying rates");
}

#[test]
fn penet_phase_two_keeps_decoder_bytes() {
    let data = samples(4, 128, 9);
    let pdata = penet_data(&data, 2, None).unwrap();
    let mut penet = Penet::new(1.0 / 16.0, &mut Rng::new(2)).unwrap();
    let opts = PenetOptions { epochs: 1, batch: 2, lr: 1e-3, seed: 1 };
    let before_s = penet.enc_s.clone();
    let before_dec = penet.dec.clone();
    train_penet(&mut penet, Phase::Reconstruct, &pdata, &opts, &mut Vec::new()).unwrap();
    assert_ne!(penet.enc_s, before_s);
    assert_ne!(penet.dec, before_dec);

    let dec = penet.dec.clone();
    let enc_i = penet.enc_i.clone();
    train_penet(&mut penet, Phase::ImageToMap, &pdata, &opts, &mut Vec::new()).unwrap();
    assert_eq!(penet.dec, dec);
    assert_ne!(penet.enc_i, enc_i);
    assert!(matches!(
        train_penet(&mut penet, Phase::JointSupervised, &pdata, &opts, &mut Vec::new()),
        Err(pfdnet_core::Error::Usage(_))
    ));
}

#[test]
fn joint_training_leaves_decoder_untouched() {
    let data = samples(2, 64, 2);
    let mut net = Pfdnet::new(
        PfdnetConfig { penet_downsample: 1, ..tiny(PerspSource::Penet) },
        &mut Rng::new(3),
    )
    .unwrap();
    let penet = Penet::new(1.0 / 16.0, &mut Rng::new(4)).unwrap();
    let dec = penet.dec.clone();
    net.attach_penet(penet, 100.0, true);
    let opts = TrainOptions {
        iterations: 2,
        batch: 2,
        lr: 1e-3,
        penet_lr: 1e-3,
        flip_prob: 0.5,
        lambda_persp: 1.0,
        seed: 0,
    };
    let enc_i = net.penet.as_ref().unwrap().enc_i.clone();
    train_pfdnet(&mut net, &data, &opts, &mut Vec::new()).unwrap();
    let p = net.penet.as_ref().unwrap();
    assert_eq!(p.dec, dec);
    assert_ne!(p.enc_i, enc_i);
    assert_eq!(p.phase, Phase::JointSupervised);
}

#[test]
fn training_ignores_thread_count() {
    let data = samples(4, 32, 6);
    let opts = TrainOptions {
        iterations: 4,
        batch: 2,
        lr: 1e-3,
        penet_lr: 1e-3,
        flip_prob: 0.5,
        lambda_persp: 1.0,
        seed: 2,
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut net = Pfdnet::new(tiny(PerspSource::GroundTruth), &mut Rng::new(8)).unwrap();
            let mut log = Vec::new();
            train_pfdnet(&mut net, &data, &opts, &mut log).unwrap();
            (net.params, log)
        })
    };
    let (p1, l1) = run(1);
    let (p4, l4) = run(4);
    assert_eq!(p1, p4);
    assert_eq!(l1, l4);
}

#[test]
fn penet_reconstruction_gradients_are_nonzero() {
    let data = samples(1, 64, 5);
    let pdata = penet_data(&data, 1, None).unwrap();
    let mut penet = Penet::new(1.0 / 16.0, &mut Rng::new(3)).unwrap();
    penet.phase = Phase::Reconstruct;
    let x = pfdnet_core::penet::stack_maps(&pdata.maps).unwrap();
    let (out, cache) = penet.forward(&x, Source::Map).unwrap();
    let (_, d) = l2_loss(&pfdnet_core::penet::split_maps(&out), &pdata.maps).unwrap();
    let g = penet.backward(&cache, &pfdnet_core::penet::stack_maps(&d).unwrap()).unwrap();
    assert!(!g.enc.all_zero());
    assert!(!g.dec.all_zero());
}
