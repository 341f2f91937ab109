//! Latency harness: one `WᵀX` GEMM against the folded pair `(PᵀW)ᵀ(PᵀX)`.
//!
//! Operands are redrawn every repetition and generation is kept out of the
//! timed region. Timing is reported, never judged.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{EspaceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchDtype {
    F64,
    F32,
}

impl FromStr for BenchDtype {
    type Err = EspaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(BenchDtype::F64),
            "f32" => Ok(BenchDtype::F32),
            other => Err(EspaceError::config("dtype", format!("expected f64 or f32, got `{other}`"))),
        }
    }
}

impl fmt::Display for BenchDtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchDtype::F64 => "f64",
            BenchDtype::F32 => "f32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub reps: usize,
    pub warmup: usize,
    pub dtype: BenchDtype,
    pub parallel: bool,
    pub seed: u64,
}

impl BenchConfig {
    pub const MIN_REPS: usize = 10;

    pub fn new(k: usize, n: usize, m: usize, l: usize) -> Self {
        BenchConfig {
            k,
            n,
            m,
            l,
            reps: 1000,
            warmup: 50,
            dtype: BenchDtype::F32,
            parallel: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("k", self.k), ("n", self.n), ("m", self.m), ("l", self.l)] {
            if v == 0 {
                return Err(EspaceError::config(key, "must be positive"));
            }
        }
        if self.l > self.k {
            return Err(EspaceError::config("l", format!("{} exceeds k = {}", self.l, self.k)));
        }
        if self.reps < Self::MIN_REPS {
            return Err(EspaceError::config(
                "reps",
                format!("need at least {}, got {}", Self::MIN_REPS, self.reps),
            ));
        }
        Ok(())
    }
}

/// Multiply-adds counted as two flops each.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub reps: usize,
    pub warmup: usize,
    pub dtype: BenchDtype,
    pub baseline_mean_s: f64,
    pub baseline_median_s: f64,
    pub projected_mean_s: f64,
    pub projected_median_s: f64,
    pub baseline_flops: u64,
    pub projected_flops: u64,
    pub flop_ratio: f64,
}

impl BenchResult {
    pub fn render(&self) -> String {
        format!(
            "shape K={} N={} M={} L={} dtype={} reps={} warmup={}\n\
             baseline  mean {:.6e} s  median {:.6e} s  flops {}\n\
             projected mean {:.6e} s  median {:.6e} s  flops {}\n\
             flop_ratio {}\n\
             latency_ratio(median) {:.4}\n",
            self.k,
            self.n,
            self.m,
            self.l,
            self.dtype,
            self.reps,
            self.warmup,
            self.baseline_mean_s,
            self.baseline_median_s,
            self.baseline_flops,
            self.projected_mean_s,
            self.projected_median_s,
            self.projected_flops,
            self.flop_ratio,
            self.projected_median_s / self.baseline_median_s,
        )
    }
}

pub fn baseline_flops(k: usize, n: usize, m: usize) -> u64 {
    2 * (k as u64) * (n as u64) * (m as u64)
}

pub fn projected_flops(k: usize, n: usize, m: usize, l: usize) -> u64 {
    2 * (l as u64) * (m as u64) * (k as u64 + n as u64)
}

/// `L(K+N)/(KN)`; the same rational as the flop counts' quotient.
pub fn flop_ratio(k: usize, n: usize, l: usize) -> f64 {
    (l as u64 * (k + n) as u64) as f64 / (k as u64 * n as u64) as f64
}

trait Scalar: Copy + Send + Sync + Default {
    fn sample(rng: &mut ChaCha8Rng) -> Self;

    /// `c = a·b`, `a` is m×k with strides `(rsa, csa)`, `b` and `c` row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], c: &mut [Self]);
}

impl Scalar for f64 {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        rng.sample(StandardNormal)
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], c: &mut [f64]) {
        assert!(b.len() >= k * n && c.len() >= m * n);
        // SAFETY: callers pass slices covering every strided index touched.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f32 {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        rng.sample(StandardNormal)
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: isize, csa: isize, b: &[f32], c: &mut [f32]) {
        assert!(b.len() >= k * n && c.len() >= m * n);
        // SAFETY: callers pass slices covering every strided index touched.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

fn alloc<T: Scalar>(len: usize) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|e| EspaceError::Resource(format!("cannot allocate {len} elements: {e}")))?;
    v.resize(len, T::default());
    Ok(v)
}

fn fill<T: Scalar>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for x in v {
        *x = T::sample(rng);
    }
}

/// `out = Aᵀ·B` with `A` row-major `k×rows`, `B` row-major `k×cols`.
fn t_gemm<T: Scalar>(a: &[T], rows: usize, k: usize, b: &[T], cols: usize, out: &mut [T], parallel: bool) {
    if !parallel {
        T::gemm(rows, k, cols, a, 1, rows as isize, b, out);
        return;
    }
    let chunk = rows.div_ceil(rayon::current_num_threads()).max(1);
    out.par_chunks_mut(chunk * cols).enumerate().for_each(|(i, c)| {
        let r0 = i * chunk;
        let nr = c.len() / cols;
        T::gemm(nr, k, cols, &a[r0..], 1, rows as isize, b, c);
    });
}

struct Buffers<T> {
    w: Vec<T>,
    x: Vec<T>,
    p: Vec<T>,
    folded: Vec<T>,
    z: Vec<T>,
    y: Vec<T>,
}

fn run_typed<T: Scalar>(cfg: &BenchConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let BenchConfig { k, n, m, l, .. } = *cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buf = Buffers::<T> {
        w: alloc(k * n)?,
        x: alloc(k * m)?,
        p: alloc(k * l)?,
        folded: alloc(l * n)?,
        z: alloc(l * m)?,
        y: alloc(n * m)?,
    };
    let mut base = Vec::with_capacity(cfg.reps);
    let mut proj = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.warmup + cfg.reps {
        fill(&mut buf.w, &mut rng);
        fill(&mut buf.x, &mut rng);
        fill(&mut buf.p, &mut rng);
        fill(&mut buf.folded, &mut rng);

        let t0 = Instant::now();
        t_gemm(&buf.w, n, k, &buf.x, m, &mut buf.y, cfg.parallel);
        let tb = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        t_gemm(&buf.p, l, k, &buf.x, m, &mut buf.z, cfg.parallel);
        t_gemm(&buf.folded, n, l, &buf.z, m, &mut buf.y, cfg.parallel);
        let tp = t1.elapsed().as_secs_f64();

        if rep >= cfg.warmup {
            base.push(tb.max(f64::MIN_POSITIVE));
            proj.push(tp.max(f64::MIN_POSITIVE));
        }
    }
    Ok((base, proj))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let h = s.len() / 2;
    if s.len() % 2 == 1 {
        s[h]
    } else {
        0.5 * (s[h - 1] + s[h])
    }
}

/// Times both paths. The folded `L×N` operand is drawn directly; its values
/// do not affect the cost of the product.
pub fn bench_gemm(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let (base, proj) = match cfg.dtype {
        BenchDtype::F64 => run_typed::<f64>(cfg)?,
        BenchDtype::F32 => run_typed::<f32>(cfg)?,
    };
    Ok(BenchResult {
        k: cfg.k,
        n: cfg.n,
        m: cfg.m,
        l: cfg.l,
        reps: cfg.reps,
        warmup: cfg.warmup,
        dtype: cfg.dtype,
        baseline_mean_s: mean(&base),
        baseline_median_s: median(&base),
        projected_mean_s: mean(&proj),
        projected_median_s: median(&proj),
        baseline_flops: baseline_flops(cfg.k, cfg.n, cfg.m),
        projected_flops: projected_flops(cfg.k, cfg.n, cfg.m, cfg.l),
        flop_ratio: flop_ratio(cfg.k, cfg.n, cfg.l),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{t_matmul, Matrix};

    #[test]
    fn kernels_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, rows, cols) = (7, 5, 9);
        let a = Matrix::random_normal(k, rows, 1.0, &mut rng);
        let b = Matrix::random_normal(k, cols, 1.0, &mut rng);
        let expect = t_matmul(&a, &b).unwrap();
        for parallel in [false, true] {
            let mut out = vec![0.0f64; rows * cols];
            t_gemm(a.as_slice(), rows, k, b.as_slice(), cols, &mut out, parallel);
            let got = Matrix::from_vec(rows, cols, out).unwrap();
            assert!(got.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn flop_ratio_examples() {
        assert_eq!(flop_ratio(4096, 4096, 1024), 0.5);
        assert_eq!(flop_ratio(64, 64, 64), 2.0);
        assert!(flop_ratio(64, 128, 64) >= 1.0);
        let (k, n, m, l) = (2048, 6144, 512, 512);
        assert_eq!(
            projected_flops(k, n, m, l) as f64 / baseline_flops(k, n, m) as f64,
            flop_ratio(k, n, l)
        );
    }

    #[test]
    fn small_run_reports_positive_times() {
        let mut cfg = BenchConfig::new(32, 48, 16, 8);
        cfg.reps = 10;
        cfg.warmup = 2;
        for dtype in [BenchDtype::F64, BenchDtype::F32] {
            cfg.dtype = dtype;
            let r = bench_gemm(&cfg).unwrap();
            assert!(r.baseline_mean_s > 0.0 && r.projected_median_s > 0.0);
            assert_eq!(r.flop_ratio, 8.0 * 80.0 / (32.0 * 48.0));
            let again = bench_gemm(&cfg).unwrap();
            assert_eq!((again.baseline_flops, again.projected_flops, again.flop_ratio), (r.baseline_flops, r.projected_flops, r.flop_ratio));
        }
    }

    #[test]
    fn validation() {
        let mut cfg = BenchConfig::new(8, 8, 8, 16);
        assert!(cfg.validate().is_err());
        cfg.l = 4;
        cfg.reps = 3;
        assert!(cfg.validate().is_err());
        cfg.reps = 10;
        cfg.m = 0;
        assert!(cfg.validate().is_err());
        assert!("f16".parse::<BenchDtype>().is_err());
    }
}
