use pfdnet_core::data::density::{make_density, HeadAnnotations};
use pfdnet_core::data::io::{
    decode_f32m, decode_ppm, encode_f32m, encode_ppm, format_annotations, format_heights, parse_annotations, parse_heights,
    Checkpoint,
};
use pfdnet_core::data::metrics::{game, grid_count, mae_rmse};
use pfdnet_core::perspective::{fit_perspective_map, mean_perspective, normalize_zeta, rate_map, PerspectiveMap, RateParams};
use pfdnet_core::tensor::{Grid2, Rng, Tensor4};
use pfdnet_core::Error;
use proptest::prelude::*;

fn random_grid(h: usize, w: usize, rng: &mut Rng) -> Grid2 {
    Grid2::from_vec(h, w, (0..h * w).map(|_| rng.range(0.0, 1.0)).collect()).unwrap()
}

/// Heads anywhere in the image, with a share pinned to edges and corners.
fn heads_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<(f32, f32)>> {
    let (hf, wf) = (h as f32, w as f32);
    let anywhere = (0.0f32..wf - 0.01, 0.0f32..hf - 0.01).boxed();
    let edge = prop_oneof![
        Just((0.0, 0.0)),
        Just((wf - 0.5, hf - 0.5)),
        Just((0.0, hf - 0.5)),
        (0.0f32..wf - 0.01).prop_map(move |x| (x, 0.0)),
        (0.0f32..hf - 0.01).prop_map(move |y| (wf - 0.5, y)),
    ]
    .boxed();
    prop::collection::vec(prop_oneof![3 => anywhere, 1 => edge], 0..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_conserves_count(points in heads_strategy(37, 53)) {
        let heads = HeadAnnotations::new("p", points);
        let d = make_density(&heads, (37, 53)).unwrap();
        let n = heads.len() as f64;
        prop_assert!((d.count() - n).abs() <= 1e-4 * n.max(1.0));
        prop_assert!(d.grid().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn game_zero_is_count_error(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (p, g) = (random_grid(16, 12, &mut rng), random_grid(16, 12, &mut rng));
        prop_assert_eq!(game(&p, &g, 0).unwrap(), (grid_count(&p) - grid_count(&g)).abs());
    }

    #[test]
    fn game_is_monotone_in_level(seed in any::<u64>(), h in 8usize..40, w in 8usize..40) {
        let mut rng = Rng::new(seed);
        let (p, g) = (random_grid(h, w, &mut rng), random_grid(h, w, &mut rng));
        let levels: Vec<f64> = (0..4).map(|l| game(&p, &g, l).unwrap()).collect();
        for pair in levels.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-9);
        }
    }

    #[test]
    fn mae_rmse_match_direct_formulas(errs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..50)) {
        let (preds, gts): (Vec<f64>, Vec<f64>) = errs.into_iter().unzip();
        let (mae, rmse) = mae_rmse(&preds, &gts).unwrap();
        let n = preds.len() as f64;
        let mae_o = preds.iter().zip(&gts).map(|(p, g)| (g - p).abs()).sum::<f64>() / n;
        let rmse_o = (preds.iter().zip(&gts).map(|(p, g)| (g - p).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((mae - mae_o).abs() <= 1e-6 && (rmse - rmse_o).abs() <= 1e-6);
        prop_assert!(rmse >= mae - 1e-9);
    }

    #[test]
    fn rate_map_matches_formula(s in 0.0f32..10.0, a in 0.1f32..3.0, b in 0.0f32..3.0, g in -2.0f32..2.0, t in -1.0f32..2.0) {
        let p = RateParams { alpha: a, beta: b, gamma: g, theta: t };
        let r = rate_map(&normalize_zeta(&Grid2::filled(1, 1, s), &p), &p).get(0, 0) as f64;
        let st = 1.0 / (1.0 + (-(a as f64) * (s as f64 - b as f64)).exp());
        let want = (g as f64 * st + t as f64).max(0.0);
        prop_assert!((r - want).abs() <= 1e-6);
    }

    #[test]
    fn mean_perspective_ignores_pixel_order(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = random_grid(6, 9, &mut rng).map(|v| v + 0.5);
        let mut shuffled = g.data().to_vec();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i + 1));
        }
        let a = mean_perspective(&PerspectiveMap::new(g).unwrap());
        let b = mean_perspective(&PerspectiveMap::new(Grid2::from_vec(6, 9, shuffled).unwrap()).unwrap());
        let p = RateParams::default();
        let (ra, rb) = (rate_map(&normalize_zeta(a.grid(), &p), &p), rate_map(&normalize_zeta(b.grid(), &p), &p));
        for (x, y) in ra.data().iter().zip(rb.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn f32m_round_trip(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let g = random_grid(h, w, &mut Rng::new(seed));
        prop_assert_eq!(decode_f32m(&encode_f32m(&g)).unwrap(), g);
    }
}

#[test]
fn edge_and_corner_heads_keep_their_mass() {
    let heads = HeadAnnotations::new("c", vec![(0.0, 0.0), (63.9, 0.0), (0.0, 47.9), (63.9, 47.9), (32.0, 0.0)]);
    let d = make_density(&heads, (48, 64)).unwrap();
    assert!((d.count() - 5.0).abs() < 1e-5);
    assert!(matches!(
        make_density(&HeadAnnotations::new("o", vec![(64.0, 1.0)]), (48, 64)),
        Err(Error::Data(_))
    ));
}

#[test]
fn interior_head_gets_the_full_gaussian() {
    let d = make_density(&HeadAnnotations::new("i", vec![(20.0, 20.0)]), (41, 41)).unwrap();
    let g = |d: f64| (-d * d / 32.0).exp();
    let norm: f64 = (-7..=7).map(|i| g(i as f64)).sum::<f64>().powi(2);
    assert!((d.grid().get(20, 20) as f64 - 1.0 / norm).abs() < 1e-7);
    assert!((d.grid().get(23, 18) as f64 - g(3.0) * g(2.0) / norm).abs() < 1e-7);
    assert_eq!(d.grid().get(20, 28), 0.0);
}

#[test]
fn metric_errors() {
    assert!(matches!(mae_rmse(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
    assert!(matches!(mae_rmse(&[], &[]), Err(Error::Usage(_))));
    assert!(game(&Grid2::zeros(4, 4), &Grid2::zeros(4, 5), 1).is_err());
}

#[test]
fn known_metric_values() {
    let (mae, rmse) = mae_rmse(&[10.0, 12.0], &[11.0, 15.0]).unwrap();
    assert!((mae - 2.0).abs() < 1e-12);
    assert!((rmse - 5.0f64.sqrt()).abs() < 1e-12);
    // one unit misplaced across the vertical midline: invisible at level 0
    let mut p = Grid2::zeros(4, 4);
    let mut g = Grid2::zeros(4, 4);
    p.set(0, 0, 1.0);
    g.set(0, 3, 1.0);
    assert_eq!(game(&p, &g, 0).unwrap(), 0.0);
    assert_eq!(game(&p, &g, 1).unwrap(), 2.0);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut ck = Checkpoint::new();
    ck.push("a.kernel", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    ck.push_u64("meta.seed", u64::MAX - 7);
    ck.push_text("meta.config", "seed=3\nlr=1e-4\n");
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.require("a.kernel").unwrap().dims, vec![2, 3]);
    assert_eq!(back.get_u64("meta.seed").unwrap(), u64::MAX - 7);
    assert_eq!(back.get_text("meta.config").unwrap(), "seed=3\nlr=1e-4\n");
    assert_eq!(back.encode().unwrap(), bytes);

    let mut flipped = bytes.clone();
    flipped[20] ^= 0x01;
    assert!(Checkpoint::decode(&flipped).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    assert!(matches!(Checkpoint::decode(b"XXXX0000000000000000"), Err(Error::Format(_))));
    assert!(back.require("missing").is_err());
}

#[test]
fn ppm_round_trip_quantizes_to_bytes() {
    let mut rng = Rng::new(4);
    let data: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.below(256) as f32 / 255.0).collect();
    let img = Tensor4::from_vec([1, 3, 5, 7], data).unwrap();
    assert_eq!(decode_ppm(&encode_ppm(&img).unwrap()).unwrap(), img);
    assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
}

#[test]
fn csv_round_trips() {
    let pts = vec![(1.5, 2.25), (0.0, 9.0)];
    assert_eq!(parse_annotations(&format_annotations(&pts)).unwrap(), pts);
    assert_eq!(parse_heights(&format_heights(&pts)).unwrap(), pts);
    assert!(matches!(parse_annotations("a,b\n1,2\n"), Err(Error::Format(_))));
    assert!(matches!(parse_annotations("x,y\n1,abc\n"), Err(Error::Format(_))));
}

#[test]
fn perspective_fit_recovers_a_line() {
    // person height 1.75 m; observed pixel heights follow s(y) = 0.1 y + 5
    let samples: Vec<(f32, f32)> = [10.0f32, 40.0, 90.0].iter().map(|&y| (y, 1.75 * (0.1 * y + 5.0))).collect();
    let fit = fit_perspective_map(&samples, 1.75, (100, 4)).unwrap();
    assert!((fit.slope - 0.1).abs() < 1e-5 && (fit.intercept - 5.0).abs() < 1e-4);
    assert!((fit.map.grid().get(60, 2) - 11.0).abs() < 1e-4);
    assert!(fit.clamped_rows.is_empty());
    assert!(matches!(fit_perspective_map(&samples[..1], 1.75, (10, 4)), Err(Error::Underdetermined(_))));
    assert!(matches!(fit_perspective_map(&[(3.0, 1.0), (3.0, 2.0)], 1.75, (10, 4)), Err(Error::Underdetermined(_))));
}

#[test]
fn perspective_fit_clamps_nonpositive_rows() {
    // decreasing toward the bottom: the lower rows fit negative values
    let fit = fit_perspective_map(&[(0.0, 10.0), (10.0, 5.0)], 1.0, (40, 2)).unwrap();
    assert!(!fit.clamped_rows.is_empty());
    assert!(fit.map.grid().data().iter().all(|&v| v > 0.0));
}
