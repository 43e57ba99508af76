//! Perspective maps and the perspective -> dilation-rate pipeline.
//!
//! A perspective value is the number of image pixels spanned by one meter of
//! real-world height. For a planar scene viewed by a fixed camera it is a
//! linear function of the image row, so ground truth is produced by a
//! least-squares line through labeled person heights.
//!
//! The rate pipeline is `s -> zeta(s) = sigmoid(alpha (s - beta))` followed
//! by `r = max(gamma zeta + theta, 0)`, with four learnable scalars per
//! layer.

use crate::error::{Error, Result};
use crate::tensor::Grid2;

/// Mean adult height in meters.
pub const PERSON_HEIGHT_M: f32 = 1.75;

/// Floor applied to fitted rows whose value would be nonpositive.
pub const PERSPECTIVE_FLOOR: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct PerspectiveMap(Grid2);

impl PerspectiveMap {
    /// Wraps a grid, rejecting nonpositive or non-finite entries.
    pub fn new(grid: Grid2) -> Result<Self> {
        if let Some(v) = grid.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Data(format!("perspective value {v} is not positive")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid2 {
        &self.0
    }

    pub fn into_grid(self) -> Grid2 {
        self.0
    }
}

/// Per-layer scalars of the rate pipeline. Also used to carry their
/// gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
#[repr(C)]
pub struct RateParams {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub theta: f32,
}

impl Default for RateParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.5,
            theta: 1.0,
        }
    }
}

impl RateParams {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            theta: 0.0,
        }
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.alpha, self.beta, self.gamma, self.theta]
    }

    pub fn from_array(v: [f32; 4]) -> Self {
        Self {
            alpha: v[0],
            beta: v[1],
            gamma: v[2],
            theta: v[3],
        }
    }

    /// The four scalars in `alpha, beta, gamma, theta` order.
    pub fn as_slice(&self) -> &[f32] {
        // SAFETY: `repr(C)` struct of four `f32` fields has no padding.
        unsafe { std::slice::from_raw_parts(self as *const Self as *const f32, 4) }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        // SAFETY: as above; the borrow of `self` is exclusive.
        unsafe { std::slice::from_raw_parts_mut(self as *mut Self as *mut f32, 4) }
    }

    pub fn add_assign(&mut self, o: &RateParams) {
        self.alpha += o.alpha;
        self.beta += o.beta;
        self.gamma += o.gamma;
        self.theta += o.theta;
    }
}

#[derive(Clone, Debug)]
pub struct PerspectiveFit {
    pub map: PerspectiveMap,
    pub slope: f64,
    pub intercept: f64,
    /// Rows whose fitted value was raised to [`PERSPECTIVE_FLOOR`].
    pub clamped_rows: Vec<usize>,
}

/// Fits `s = slope * y_h + intercept` to labeled `(y_h, observed height
/// in px)` samples, where each sample's perspective is `height / person_height`,
/// and fills every row of a `(h, w)` map with the fitted value.
pub fn fit_perspective_map(samples: &[(f32, f32)], person_height: f32, out_shape: (usize, usize)) -> Result<PerspectiveFit> {
    let (h, w) = out_shape;
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape(format!("{h}x{w}")));
    }
    if !(person_height > 0.0) {
        return Err(Error::Domain(format!("person height {person_height}")));
    }
    if let Some(s) = samples.iter().find(|s| !(s.1 > 0.0) || !s.0.is_finite()) {
        return Err(Error::Domain(format!("bad sample (y_h={}, h={})", s.0, s.1)));
    }
    if samples.len() < 2 {
        return Err(Error::Underdetermined(format!("{} samples", samples.len())));
    }
    let n = samples.len() as f64;
    let mean_y = samples.iter().map(|s| s.0 as f64).sum::<f64>() / n;
    let mean_s = samples
        .iter()
        .map(|s| (s.1 / person_height) as f64)
        .sum::<f64>()
        / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(y, hp) in samples {
        let dy = y as f64 - mean_y;
        sxy += dy * ((hp / person_height) as f64 - mean_s);
        sxx += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::Underdetermined("all samples on one row".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_s - slope * mean_y;
    let mut grid = Grid2::zeros(h, w);
    let mut clamped_rows = Vec::new();
    for i in 0..h {
        let mut v = (slope * i as f64 + intercept) as f32;
        if v <= 0.0 {
            v = PERSPECTIVE_FLOOR;
            clamped_rows.push(i);
        }
        grid.data_mut()[i * w..(i + 1) * w].fill(v);
    }
    Ok(PerspectiveFit {
        map: PerspectiveMap(grid),
        slope,
        intercept,
        clamped_rows,
    })
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn normalize_zeta(s: &Grid2, p: &RateParams) -> Grid2 {
    s.map(|v| sigmoid(p.alpha * (v - p.beta)))
}

pub fn rate_map(s_tilde: &Grid2, p: &RateParams) -> Grid2 {
    s_tilde.map(|v| (p.gamma * v + p.theta).max(0.0))
}

/// Chains `dl_dr` back through [`rate_map`] and [`normalize_zeta`].
/// Returns the gradients of the four scalars and of the perspective input.
/// Positions where the clamp is active contribute nothing.
pub fn rate_backward(s: &Grid2, p: &RateParams, dl_dr: &Grid2) -> Result<(RateParams, Grid2)> {
    if s.shape() != dl_dr.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", s.shape(), dl_dr.shape())));
    }
    let (mut da, mut db, mut dg, mut dt) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut dl_ds = Grid2::zeros(s.h(), s.w());
    for (idx, (&sv, &g)) in s.data().iter().zip(dl_dr.data()).enumerate() {
        let st = sigmoid(p.alpha * (sv - p.beta));
        if p.gamma * st + p.theta <= 0.0 || g == 0.0 {
            continue;
        }
        dt += g as f64;
        dg += (g * st) as f64;
        let dst = g * p.gamma;
        let slope = st * (1.0 - st);
        da += (dst * (sv - p.beta) * slope) as f64;
        db += (dst * -p.alpha * slope) as f64;
        dl_ds.data_mut()[idx] = dst * p.alpha * slope;
    }
    let grads = RateParams {
        alpha: da as f32,
        beta: db as f32,
        gamma: dg as f32,
        theta: dt as f32,
    };
    Ok((grads, dl_ds))
}

/// Constant map holding the spatial mean of `s`.
pub fn mean_perspective(s: &PerspectiveMap) -> PerspectiveMap {
    let g = s.grid();
    PerspectiveMap(Grid2::filled(g.h(), g.w(), g.mean() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn two_point_fit() {
        let fit = fit_perspective_map(&[(100.0, 87.5), (200.0, 175.0)], 1.75, (301, 2)).unwrap();
        let g = fit.map.grid();
        assert!((g.get(100, 0) - 50.0).abs() < 1e-4);
        assert!((g.get(200, 1) - 100.0).abs() < 1e-4);
        assert!((g.get(300, 0) - 150.0).abs() < 1e-4);
        assert!((fit.slope - 0.5).abs() < 1e-9);
        // row 0 fits to exactly zero and is floored
        assert_eq!(fit.clamped_rows, vec![0]);
        assert_eq!(g.get(0, 0), PERSPECTIVE_FLOOR);
    }

    #[test]
    fn zero_slope_fit() {
        let fit = fit_perspective_map(&[(3.0, 1.75 * 4.0), (9.0, 1.75 * 4.0), (20.0, 1.75 * 4.0)], 1.75, (5, 3)).unwrap();
        assert!(fit.map.grid().data().iter().all(|v| (v - 4.0).abs() < 1e-5));
    }

    #[test]
    fn noisy_fit_matches_normal_equations() {
        let samples = [(10.0f32, 20.0f32), (40.0, 33.0), (70.0, 61.0)];
        // solve [sum y^2, sum y; sum y, n] [a; b] = [sum y s; sum s]
        let (mut syy, mut sy, mut sys, mut ss) = (0.0f64, 0.0, 0.0, 0.0);
        for &(y, hp) in &samples {
            let s = hp as f64 / 1.75;
            syy += (y as f64).powi(2);
            sy += y as f64;
            sys += y as f64 * s;
            ss += s;
        }
        let det = syy * 3.0 - sy * sy;
        let a = (sys * 3.0 - sy * ss) / det;
        let b = (syy * ss - sy * sys) / det;
        let fit = fit_perspective_map(&samples, 1.75, (80, 1)).unwrap();
        for row in [0usize, 10, 40, 79] {
            let want = a * row as f64 + b;
            let got = fit.map.grid().get(row, 0) as f64;
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{row}: {got} vs {want}");
        }
    }

    #[test]
    fn underdetermined_fits_rejected() {
        assert!(matches!(fit_perspective_map(&[(1.0, 2.0)], 1.75, (4, 4)), Err(Error::Underdetermined(_))));
        assert!(matches!(
            fit_perspective_map(&[(1.0, 2.0), (1.0, 3.0)], 1.75, (4, 4)),
            Err(Error::Underdetermined(_))
        ));
    }

    #[test]
    fn zeta_examples() {
        let p = RateParams::default();
        let g = Grid2::from_vec(1, 3, vec![1.0, 1e6, 3.0]).unwrap();
        let z = normalize_zeta(&g, &p);
        assert_eq!(z.get(0, 0), 0.5);
        assert!((z.get(0, 1) - 1.0).abs() < 1e-6);
        assert!((z.get(0, 2) - 1.0 / (1.0 + (-2.0f32).exp())).abs() < 1e-7);
        assert!((z.get(0, 2) - 0.880_797_1).abs() < 1e-6);
        // far negative argument stays finite
        let z = normalize_zeta(&Grid2::filled(1, 1, -1e6), &p);
        assert_eq!(z.get(0, 0), 0.0);
    }

    #[test]
    fn rate_examples() {
        let p = RateParams::default();
        assert_eq!(rate_map(&Grid2::filled(1, 1, 0.5), &p).get(0, 0), 1.75);
        assert_eq!(rate_map(&Grid2::filled(1, 1, 0.0), &p).get(0, 0), 1.0);
        let q = RateParams {
            gamma: 1.0,
            theta: -2.0,
            ..p
        };
        assert_eq!(rate_map(&Grid2::filled(1, 1, 0.5), &q).get(0, 0), 0.0);
    }

    #[test]
    fn rate_backward_scalar_case() {
        let p = RateParams::default();
        let (g, ds) = rate_backward(&Grid2::filled(1, 1, 1.0), &p, &Grid2::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.theta, 1.0);
        assert_eq!(g.gamma, 0.5);
        assert_eq!(g.alpha, 0.0);
        assert!((g.beta + 0.375).abs() < 1e-7);
        assert!((ds.get(0, 0) - 0.375).abs() < 1e-7);

        let (g, ds) = rate_backward(&Grid2::filled(2, 2, 3.0), &p, &Grid2::zeros(2, 2)).unwrap();
        assert_eq!(g, RateParams::zero());
        assert!(ds.data().iter().all(|&v| v == 0.0));

        let q = RateParams { theta: -5.0, ..p };
        let (g, _) = rate_backward(&Grid2::filled(2, 2, 3.0), &q, &Grid2::filled(2, 2, 1.0)).unwrap();
        assert_eq!(g, RateParams::zero());
    }

    #[test]
    fn mean_map() {
        let m = PerspectiveMap::new(Grid2::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap()).unwrap();
        let mm = mean_perspective(&m);
        assert!(mm.grid().data().iter().all(|&v| v == 4.0));
        assert_eq!(mean_perspective(&mm), mm);
    }

    #[test]
    fn composite_chain_rule_against_finite_differences() {
        let mut rng = Rng::new(21);
        let s = Grid2::from_vec(3, 4, (0..12).map(|_| rng.range(0.0, 3.0)).collect()).unwrap();
        let p = RateParams {
            alpha: 0.8,
            beta: 1.2,
            gamma: 1.5,
            theta: 0.7,
        };
        let loss = |s: &Grid2, p: &RateParams| -> f64 {
            rate_map(&normalize_zeta(s, p), p)
                .data()
                .iter()
                .map(|&r| (r as f64).powi(2))
                .sum()
        };
        let r = rate_map(&normalize_zeta(&s, &p), &p);
        let dl_dr = r.map(|v| 2.0 * v);
        let (g, ds) = rate_backward(&s, &p, &dl_dr).unwrap();
        let h = 1e-3f32;
        let analytic = g.as_array();
        for k in 0..4 {
            let mut hi = p.as_array();
            let mut lo = p.as_array();
            hi[k] += h;
            lo[k] -= h;
            let fd = (loss(&s, &RateParams::from_array(hi)) - loss(&s, &RateParams::from_array(lo))) / (2.0 * h as f64);
            let a = analytic[k] as f64;
            assert!((a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()).max(1e-2), "param {k}: {a} vs {fd}");
        }
        for idx in 0..12 {
            let mut hi = s.clone();
            let mut lo = s.clone();
            hi.data_mut()[idx] += h;
            lo.data_mut()[idx] -= h;
            let fd = (loss(&hi, &p) - loss(&lo, &p)) / (2.0 * h as f64);
            let a = ds.data()[idx] as f64;
            assert!((a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()).max(1e-2), "s[{idx}]: {a} vs {fd}");
        }
    }

    proptest::proptest! {
        #[test]
        fn zeta_monotone_and_bounded(alpha in -3.0f32..3.0, beta in -1.0f32..1.0, seed in 0u64..500) {
            proptest::prop_assume!(alpha.abs() > 0.05);
            let mut rng = Rng::new(seed);
            let mut v: Vec<f32> = (0..16).map(|_| rng.range(-1.5, 1.5)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() < 1e-2);
            let p = RateParams { alpha, beta, ..RateParams::default() };
            let z = normalize_zeta(&Grid2::from_vec(1, v.len(), v.clone()).unwrap(), &p);
            for pair in z.data().windows(2) {
                if alpha > 0.0 {
                    proptest::prop_assert!(pair[1] > pair[0]);
                } else {
                    proptest::prop_assert!(pair[1] < pair[0]);
                }
            }
            proptest::prop_assert!(z.data().iter().all(|&t| t > 0.0 && t < 1.0));
            let r = rate_map(&z, &p);
            proptest::prop_assert!(r.data().iter().all(|&t| t >= 0.0));
        }

        #[test]
        fn fitted_rows_are_constant(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let samples: Vec<(f32, f32)> = (0..4).map(|i| (i as f32 * 10.0 + rng.range(0.0, 5.0), rng.range(5.0, 50.0))).collect();
            let fit = fit_perspective_map(&samples, 1.75, (40, 6)).unwrap();
            let g = fit.map.grid();
            for i in 0..40 {
                proptest::prop_assert!((0..6).all(|j| g.get(i, j) == g.get(i, 0)));
            }
        }
    }
}
