//! Operator micro-benchmarks: one untimed warmup call, then `repeats` timed
//! calls; reports the median, 10th and 90th percentile in milliseconds and a
//! checksum of the output.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fdconv::{dilated_conv_ref, fdconv_forward, ConvWeights};
use crate::pgc::pgc_smooth_forward;
use crate::tensor::{reduce, Fill, Grid2, ReduceOp, Rng, Tensor4};

pub const CSV_HEADER: &str = "op,n,c,h,w,k,rate_summary,median_ms,p10_ms,p90_ms,checksum";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Fdconv,
    DilatedRef,
    Pgc,
}

impl BenchOp {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchOp::Fdconv => "fdconv",
            BenchOp::DilatedRef => "dilated_ref",
            BenchOp::Pgc => "pgc",
        }
    }
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdconv" => Ok(BenchOp::Fdconv),
            "dilated_ref" => Ok(BenchOp::DilatedRef),
            "pgc" => Ok(BenchOp::Pgc),
            _ => Err(Error::Usage(format!("unknown op {s:?} (fdconv|dilated_ref|pgc)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub op: BenchOp,
    pub shape: [usize; 4],
    /// Rate for the convolutions, sigma for PGC; constant over the map.
    pub value: f32,
    pub kernel: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub spec: BenchSpec,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub checksum: f64,
}

impl BenchRow {
    pub fn rate_summary(&self) -> String {
        let key = if self.spec.op == BenchOp::Pgc { "sigma" } else { "rate" };
        format!("{key}={}", self.spec.value)
    }
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.spec.shape;
        write!(
            f,
            "{},{n},{c},{h},{w},{},{},{:.3},{:.3},{:.3},{:.6e}",
            self.spec.op.as_str(),
            self.spec.kernel,
            self.rate_summary(),
            self.median_ms,
            self.p10_ms,
            self.p90_ms,
            self.checksum
        )
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn bench_op(spec: &BenchSpec) -> Result<BenchRow> {
    if spec.repeats < 5 {
        return Err(Error::Usage(format!("repeats must be >= 5, got {}", spec.repeats)));
    }
    let mut rng = Rng::new(spec.seed);
    let [_, c, h, w] = spec.shape;
    let x = Tensor4::new(spec.shape, Fill::Gaussian { mean: 0.0, std: 1.0, rng: &mut rng })?;
    let run: Box<dyn Fn() -> Result<Tensor4>> = match spec.op {
        BenchOp::Fdconv | BenchOp::DilatedRef => {
            let wts = ConvWeights::he(c, c, spec.kernel, &mut rng)?;
            if spec.op == BenchOp::Fdconv {
                let rates = vec![Grid2::filled(h, w, spec.value)];
                Box::new(move || fdconv_forward(&x, &wts, &rates))
            } else {
                if spec.value < 1.0 || spec.value.fract() != 0.0 {
                    return Err(Error::Usage(format!("dilated_ref needs an integer rate, got {}", spec.value)));
                }
                let r = spec.value as i64;
                Box::new(move || dilated_conv_ref(&x, &wts, r))
            }
        }
        BenchOp::Pgc => {
            let sigma = Grid2::filled(h, w, spec.value);
            let k = spec.kernel;
            Box::new(move || pgc_smooth_forward(&x, &sigma, k))
        }
    };
    let checksum = reduce(&run()?, ReduceOp::Sum);
    let mut times = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let t0 = Instant::now();
        let y = run()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&y);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    Ok(BenchRow {
        spec: spec.clone(),
        median_ms: percentile(&times, 0.5),
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
        checksum,
    })
}
