//! Acceptance criteria 1 to 9. Prints one PASS or FAIL line per criterion
//! and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pfdnet_core::data::density::{make_density, HeadAnnotations};
use pfdnet_core::data::metrics::{game, grid_count, mae_rmse};
use pfdnet_core::data::synth::synth_dataset;
use pfdnet_core::fdconv::{bilinear_sample, bilinear_sample_grads, dilated_conv_ref, fdconv_forward, ConvWeights, SamplePoint};
use pfdnet_core::harness::bench::{bench_op, BenchOp, BenchSpec};
use pfdnet_core::harness::config::RunConfig;
use pfdnet_core::harness::dataset::Sample;
use pfdnet_core::harness::gradcheck::{self, COMPOSITE_TOL, OP_TOL, STEP};
use pfdnet_core::harness::train::{penet_data, train_penet, train_pfdnet, PenetOptions, TrainOptions};
use pfdnet_core::penet::{Penet, Phase};
use pfdnet_core::pfdnet::{PerspSource, Pfdnet};
use pfdnet_core::tensor::{Fill, Grid2, Rng, Tensor4};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64, detail: String) -> Outcome {
    let detail = format!("{detail}; {:.1} s (limit {limit_s} s)", elapsed.as_secs_f64());
    check(elapsed.as_secs() < limit_s, detail)
}

fn integer_rate_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let shape = [rng.between(1, 2), rng.between(1, 8), rng.between(3, 16), rng.between(3, 16)];
        let x = Tensor4::new(shape, Fill::Gaussian { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        let cout = rng.between(1, 8);
        let mut w = ConvWeights::gaussian(cout, shape[1], 3, 0.5, &mut rng).unwrap();
        w.bias.iter_mut().for_each(|b| *b = rng.normal(0.0, 0.1));
        let r = rng.between(1, 3) as i64;
        let y = fdconv_forward(&x, &w, &[Grid2::filled(shape[2], shape[3], r as f32)]).unwrap();
        let y_ref = dilated_conv_ref(&x, &w, r).unwrap();
        for (a, b) in y.data().iter().zip(y_ref.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = worst <= 1e-5;
    let res = within(start.elapsed(), 10, format!("100 instances, max abs diff {worst:.2e} (tol 1e-5)"));
    if ok {
        res
    } else {
        Err(res.unwrap_or_else(|e| e))
    }
}

fn bilinear_oracle() -> Outcome {
    let g = |m: f64, n: f64| (1.0 - (m - n).abs()).max(0.0);
    let mut rng = Rng::new(2);
    let (mut worst, mut worst_pu, mut interior) = (0.0f64, 0.0f64, 0);
    for _ in 0..10 {
        let x = Tensor4::new([1, 1, 7, 7], Fill::Gaussian { mean: 0.0, std: 1.0, rng: &mut rng }).unwrap();
        for _ in 0..100 {
            let p = SamplePoint::new(rng.range(-1.0, 7.0), rng.range(-1.0, 7.0));
            let mut brute = 0.0;
            for qi in 0..7 {
                for qj in 0..7 {
                    brute += g(qi as f64, p.i as f64) * g(qj as f64, p.j as f64) * x.get(0, 0, qi, qj) as f64;
                }
            }
            let v = bilinear_sample(&x, 0, 0, p).unwrap() as f64;
            worst = worst.max((v - brute).abs());
            if (0.0..=6.0).contains(&p.i) && (0.0..=6.0).contains(&p.j) {
                interior += 1;
                let total: f64 = bilinear_sample_grads(&x, 0, 0, p).unwrap().d_dx.iter().map(|(_, c)| *c as f64).sum();
                worst_pu = worst_pu.max((total - 1.0).abs());
            }
        }
    }
    check(
        worst <= 1e-6 && worst_pu <= 1e-6,
        format!("1000 points, max abs diff {worst:.2e}; partition of unity over {interior} interior points, max dev {worst_pu:.2e} (tol 1e-6)"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run_all(0).map_err(|e| e.to_string())?;
    let failed: Vec<String> = report.results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let tol_ok = STEP == 1e-3 && OP_TOL <= 1e-2 && COMPOSITE_TOL <= 3e-2;
    let detail = format!(
        "{} classes, worst relative error {:.2e} (tol {OP_TOL:e} ops, {COMPOSITE_TOL:e} composite, step {STEP:e}){}",
        report.results.len(),
        report.worst(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(" | ")) }
    );
    let res = within(start.elapsed(), 120, detail);
    if failed.is_empty() && tol_ok {
        res
    } else {
        Err(res.unwrap_or_else(|e| e))
    }
}

fn count_conservation() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for k in 0..500 {
        let (h, w) = (rng.between(8, 64), rng.between(8, 64));
        let (hf, wf) = (h as f32, w as f32);
        let n = rng.between(0, 30);
        let mut pts: Vec<(f32, f32)> = (0..n).map(|_| (rng.range(0.0, wf - 0.01), rng.range(0.0, hf - 0.01))).collect();
        // every configuration carries a corner head, and every other one a
        // head on each edge
        pts.push([(0.0, 0.0), (wf - 0.5, 0.0), (0.0, hf - 0.5), (wf - 0.5, hf - 0.5)][k % 4]);
        if k % 2 == 0 {
            pts.extend([(rng.range(0.0, wf - 0.5), 0.0), (0.0, rng.range(0.0, hf - 0.5)), (wf - 0.5, rng.range(0.0, hf - 0.5))]);
        }
        let heads = HeadAnnotations::new(format!("c{k}"), pts);
        let d = make_density(&heads, (h, w)).map_err(|e| e.to_string())?;
        let n = heads.len() as f64;
        worst = worst.max((d.count() - n).abs() / n);
    }
    check(worst <= 1e-4, format!("500 configurations, max relative count error {worst:.2e} (tol 1e-4)"))
}

fn metric_identities() -> Outcome {
    let mut rng = Rng::new(5);
    let mut game0_exact = true;
    let mut monotone = true;
    for _ in 0..100 {
        let (h, w) = (rng.between(8, 48), rng.between(8, 48));
        let p = Grid2::from_vec(h, w, (0..h * w).map(|_| rng.range(0.0, 0.1)).collect()).unwrap();
        let g = Grid2::from_vec(h, w, (0..h * w).map(|_| rng.range(0.0, 0.1)).collect()).unwrap();
        let levels: Vec<f64> = (0..4).map(|l| game(&p, &g, l).unwrap()).collect();
        game0_exact &= levels[0] == (grid_count(&p) - grid_count(&g)).abs();
        monotone &= levels.windows(2).all(|v| v[1] >= v[0]);
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.between(1, 40);
        let preds: Vec<f64> = (0..n).map(|_| rng.range(0.0, 200.0) as f64).collect();
        let gts: Vec<f64> = (0..n).map(|_| rng.range(0.0, 200.0) as f64).collect();
        let (mae, rmse) = mae_rmse(&preds, &gts).unwrap();
        let nf = n as f64;
        let mae_o = preds.iter().zip(&gts).map(|(p, g)| (g - p).abs()).sum::<f64>() / nf;
        let rmse_o = (preds.iter().zip(&gts).map(|(p, g)| (g - p) * (g - p)).sum::<f64>() / nf).sqrt();
        worst = worst.max((mae - mae_o).abs()).max((rmse - rmse_o).abs());
    }
    check(
        game0_exact && monotone && worst <= 1e-6,
        format!("GAME(0) exact: {game0_exact}; GAME monotone: {monotone}; MAE/RMSE max dev {worst:.2e} (tol 1e-6)"),
    )
}

fn runtime_analog() -> Outcome {
    let start = Instant::now();
    let run = |op, value, kernel| {
        bench_op(&BenchSpec {
            op,
            shape: [1, 256, 96, 128],
            value,
            kernel,
            repeats: 5,
            seed: 0,
        })
        .map(|r| r.median_ms)
        .map_err(|e| e.to_string())
    };
    let (r1, r4) = (run(BenchOp::Fdconv, 1.0, 3)?, run(BenchOp::Fdconv, 4.0, 3)?);
    let (p3, p7) = (run(BenchOp::Pgc, 1.0, 3)?, run(BenchOp::Pgc, 1.0, 7)?);
    let ratio = r1.max(r4) / r1.min(r4);
    let ok = ratio < 2.0 && p7 > p3;
    let res = within(
        start.elapsed(),
        120,
        format!("fdconv median rate 1 {r1:.1} ms vs rate 4 {r4:.1} ms (ratio {ratio:.2}, limit 2); pgc 3x3 {p3:.1} ms < 7x7 {p7:.1} ms"),
    );
    if ok {
        res
    } else {
        Err(res.unwrap_or_else(|e| e))
    }
}

fn penet_psnr() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let seed: u64 = cfg.get("seed").unwrap();
    let scenes = synth_dataset(200, (512, 512), cfg.pair("heads").unwrap(), seed).map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = scenes.into_iter().map(Sample::from).collect();
    let data = penet_data(&samples, cfg.get("penet_downsample").unwrap(), None).map_err(|e| e.to_string())?;
    drop(samples);
    let opts = PenetOptions {
        epochs: cfg.get("penet_epochs").unwrap(),
        batch: cfg.get("penet_batch").unwrap(),
        lr: cfg.get("penet_lr").unwrap(),
        seed,
    };
    let width = cfg.fraction("width_mult").unwrap();
    let mut penet = Penet::new(width, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
    let p1 = train_penet(&mut penet, Phase::Reconstruct, &data, &opts, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let dec = penet.dec.clone();
    let p2 = train_penet(&mut penet, Phase::ImageToMap, &data, &opts, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let frozen = penet.dec == dec;
    let ok = p1.final_psnr >= 30.0 && p2.final_psnr >= 22.0 && frozen;
    let res = within(
        start.elapsed(),
        1800,
        format!(
            "200 scenes 512x512, width 1/{}, {} epochs per phase: phase 1 {:.2} dB (min 30), phase 2 {:.2} dB (min 22), decoder unchanged in phase 2: {frozen}",
            (1.0 / width).round(),
            opts.epochs,
            p1.final_psnr,
            p2.final_psnr
        ),
    );
    if ok {
        res
    } else {
        Err(res.unwrap_or_else(|e| e))
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let seed: u64 = cfg.get("seed").unwrap();
    let scenes = synth_dataset(50, cfg.pair("image_size").unwrap(), cfg.pair("heads").unwrap(), seed).map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = scenes.into_iter().map(Sample::from).collect();
    let opts = TrainOptions {
        iterations: 200,
        batch: cfg.get("batch").unwrap(),
        lr: cfg.get("lr").unwrap(),
        penet_lr: cfg.get("lr").unwrap(),
        flip_prob: cfg.get("flip_prob").unwrap(),
        lambda_persp: cfg.get("lambda_persp").unwrap(),
        seed,
    };
    let train = |source| -> Result<_, String> {
        let mut c = cfg.pfdnet_config().map_err(|e| e.to_string())?;
        c.persp_source = source;
        let mut net = Pfdnet::new(c, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        train_pfdnet(&mut net, &samples, &opts, &mut std::io::sink()).map_err(|e| e.to_string())
    };
    let gt = train(PerspSource::GroundTruth)?;
    let mean = train(PerspSource::Mean)?;
    let reduction = 1.0 - gt.final_mae / gt.initial_mae;
    let ok = reduction >= 0.5 && mean.final_mae > gt.final_mae;
    let res = within(
        start.elapsed(),
        600,
        format!(
            "50 scenes, 200 iterations: MAE {:.3} -> {:.3} ({:.0}% reduction, min 50%); mean-perspective ablation ends at {:.3} (must exceed {:.3})",
            gt.initial_mae,
            gt.final_mae,
            100.0 * reduction,
            mean.final_mae,
            gt.final_mae
        ),
    );
    if ok {
        res
    } else {
        Err(res.unwrap_or_else(|e| e))
    }
}

/// Every file under `dir` by relative path, `.lock` files excluded.
fn snapshot(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            snapshot(&path, root, out);
        } else if path.file_name().is_some_and(|n| n != ".lock") {
            out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
        }
    }
}

/// Runs every deterministic CLI command once in a fresh directory and
/// returns their stdout plus every file they wrote.
fn cli_pipeline(threads: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let s = |p: &str| root.join(p).display().to_string();
    fs::write(root.join("heads.csv"), "x,y\n3,4\n20,30\n63,0\n").unwrap();
    fs::write(root.join("heights.csv"), "y_h,h_px\n10,8\n50,20\n60,23\n").unwrap();
    let small = [
        "--set", "backbone_channels=4,4,8", "--set", "pfc_channels=8,8,8,4,4,4", "--set", "iterations=4", "--set", "batch=2",
        "--width-mult", "1/16", "--set", "penet_epochs=2", "--set", "penet_batch=2", "--set", "penet_downsample=1",
    ];
    let commands: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--out".into(), s("data"), "--scenes".into(), "4".into(), "--size".into(), "64,64".into()],
        vec!["make-density".into(), "--annotations".into(), s("heads.csv"), "--shape".into(), "48,64".into(), "--out".into(), s("density.f32m")],
        vec!["fit-persp".into(), "--heights".into(), s("heights.csv"), "--shape".into(), "64,64".into(), "--out".into(), s("persp.f32m")],
        vec!["train-penet".into(), "--phase".into(), "1".into(), "--data".into(), s("data"), "--out".into(), s("p1")],
        vec!["train-penet".into(), "--phase".into(), "2".into(), "--data".into(), s("data"), "--out".into(), s("p2"), "--phase1".into(), s("p1/penet.pfdc")],
        vec!["train".into(), "--data".into(), s("data"), "--out".into(), s("gt")],
        vec!["--persp-source".into(), "mean".into(), "train".into(), "--data".into(), s("data"), "--out".into(), s("mean")],
        vec!["--persp-source".into(), "penet".into(), "train".into(), "--data".into(), s("data"), "--out".into(), s("joint"), "--penet".into(), s("p2/penet.pfdc")],
        vec!["eval".into(), "--checkpoint".into(), s("gt/checkpoint.pfdc"), "--data".into(), s("data")],
        vec!["predict".into(), "--checkpoint".into(), s("joint/checkpoint.pfdc"), "--image".into(), String::new(), "--out".into(), s("pred.f32m")],
        vec!["gradcheck".into()],
    ];
    let mut outputs = BTreeMap::new();
    for (i, mut cmd) in commands.into_iter().enumerate() {
        if cmd[0] == "predict" {
            // synth names scenes by their seeds
            let mut ppms: Vec<_> = fs::read_dir(root.join("data"))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|q| q.extension().is_some_and(|x| x == "ppm"))
                .collect();
            ppms.sort();
            cmd[4] = ppms[0].display().to_string();
        }
        let out = Command::new(env!("CARGO_BIN_EXE_pfdnet"))
            .args(small)
            .args(["--threads", &threads.to_string(), "--seed", "7"])
            .args(&cmd)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        outputs.insert(format!("stdout:{i}:{}", cmd.iter().find(|a| !a.starts_with('-')).unwrap()), out.stdout);
    }
    snapshot(root, root, &mut outputs);
    Ok(outputs)
}

fn determinism() -> Outcome {
    let runs = [(1, cli_pipeline(1)?), (1, cli_pipeline(1)?), (4, cli_pipeline(4)?), (4, cli_pipeline(4)?)];
    let reference = &runs[0].1;
    let mut diffs = Vec::new();
    for (threads, run) in &runs[1..] {
        if run.keys().ne(reference.keys()) {
            diffs.push(format!("threads {threads}: different file set"));
            continue;
        }
        for (k, v) in run {
            if reference[k] != *v {
                diffs.push(format!("threads {threads}: {k}"));
            }
        }
    }
    check(
        diffs.is_empty(),
        format!(
            "11 commands x 2 runs x threads 1 and 4, {} logs and files compared{}",
            reference.len(),
            if diffs.is_empty() { String::new() } else { format!("; differing: {}", diffs.join(", ")) }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("integer-rate equivalence", integer_rate_equivalence),
        ("bilinear oracle", bilinear_oracle),
        ("gradient suite", gradient_suite),
        ("count conservation", count_conservation),
        ("metric identities", metric_identities),
        ("runtime analog", runtime_analog),
        ("PENet PSNR", penet_psnr),
        ("end-to-end smoke", end_to_end),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} criterion {}: {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
