use super::require;
use crate::error::CliResult;
use crate::RunContext;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssmdynlab::numerics::NumericFormat;
use ssmdynlab::ssm::{scan_parallel_in, scan_sequential_in, with_workers, ScanElement};
use ssmdynlab::Tensor;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanBenchConfig {
    pub lengths: Vec<usize>,
    pub d: usize,
    /// Thread counts the parallel scan is run with.
    pub workers: Vec<usize>,
    pub chunk: usize,
    /// Timed repetitions per row; the fastest is reported.
    pub repeats: usize,
    /// Random instances checked per length.
    pub instances: usize,
}

impl Default for ScanBenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1, 2, 3, 17, 1024, 4096],
            d: 16,
            workers: vec![1, 2, 4],
            chunk: 64,
            repeats: 3,
            instances: 5,
        }
    }
}

#[derive(Debug, Serialize)]
struct Row {
    t: usize,
    d: usize,
    instances: usize,
    /// `max |parallel - sequential| / max |sequential|` over instances.
    max_rel_deviation_fp64: f64,
    max_rel_deviation_fp32: f64,
    /// Parallel results are bit-identical for every worker count.
    workers_bit_identical: bool,
}

#[derive(Debug, Serialize)]
struct Report {
    rows: Vec<Row>,
}

#[derive(Debug, Serialize)]
struct TimingRow {
    t: usize,
    workers: usize,
    sequential_seconds: f64,
    parallel_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Timing {
    rows: Vec<TimingRow>,
}

fn random_elements(rng: &mut ChaCha8Rng, t: usize, d: usize) -> (Vec<ScanElement>, Vec<f64>) {
    let elems = (0..t)
        .map(|_| {
            // decays in (0, 1]
            let a = (0..d).map(|_| 1.0 - rng.random::<f64>()).collect();
            let b = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            ScanElement::new(a, b)
        })
        .collect();
    let x0 = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (elems, x0)
}

fn rel_deviation(a: &Tensor, reference: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = reference.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let r = f();
        best = best.min(start.elapsed().as_secs_f64());
        out = Some(r);
    }
    (best, out.expect("at least one repeat"))
}

pub fn run(ctx: &RunContext) -> CliResult<()> {
    let cfg: ScanBenchConfig = ctx.doc.section("scan-bench")?;
    require(!cfg.lengths.is_empty() && cfg.lengths.iter().all(|&t| t > 0), || {
        "[scan-bench] lengths must be a non-empty list of positive integers".into()
    })?;
    require(cfg.d > 0 && cfg.chunk > 0 && cfg.instances > 0, || {
        "[scan-bench] d, chunk and instances must be positive".into()
    })?;
    require(!cfg.workers.is_empty() && cfg.workers.iter().all(|&w| w > 0), || {
        "[scan-bench] workers must be a non-empty list of positive integers".into()
    })?;
    let dir = ctx.start(&cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let (mut rows, mut timing) = (Vec::new(), Vec::new());
    let mut csv = String::from("t,d,max_rel_deviation_fp64,max_rel_deviation_fp32,workers_bit_identical\n");
    for &t in &cfg.lengths {
        let (mut dev64, mut dev32, mut identical) = (0.0_f64, 0.0_f64, true);
        for inst in 0..cfg.instances {
            let (elems, x0) = random_elements(&mut rng, t, cfg.d);
            let (seq_time, seq) = best_of(if inst == 0 { cfg.repeats } else { 1 }, || {
                scan_sequential_in(&elems, &x0, NumericFormat::Fp64)
            });
            let seq = seq?;
            let seq32 = scan_sequential_in(&elems, &x0, NumericFormat::Fp32)?;
            let mut first: Option<Tensor> = None;
            for &w in &cfg.workers {
                let reps = if inst == 0 { cfg.repeats } else { 1 };
                let (par_time, par) = with_workers(w, || {
                    best_of(reps, || scan_parallel_in(&elems, &x0, cfg.chunk, NumericFormat::Fp64))
                });
                let par = par?;
                let par32 = with_workers(w, || scan_parallel_in(&elems, &x0, cfg.chunk, NumericFormat::Fp32))?;
                dev64 = dev64.max(rel_deviation(&par, &seq));
                dev32 = dev32.max(rel_deviation(&par32, &seq32));
                match &first {
                    Some(f) => identical &= f.bit_eq(&par),
                    None => first = Some(par),
                }
                if inst == 0 {
                    timing.push(TimingRow {
                        t,
                        workers: w,
                        sequential_seconds: seq_time,
                        parallel_seconds: par_time,
                    });
                }
            }
        }
        let _ = writeln!(csv, "{t},{},{dev64:e},{dev32:e},{identical}", cfg.d);
        rows.push(Row {
            t,
            d: cfg.d,
            instances: cfg.instances,
            max_rel_deviation_fp64: dev64,
            max_rel_deviation_fp32: dev32,
            workers_bit_identical: identical,
        });
    }

    let mut tcsv = String::from("t,workers,sequential_seconds,parallel_seconds\n");
    for r in &timing {
        let _ = writeln!(
            tcsv,
            "{},{},{:e},{:e}",
            r.t, r.workers, r.sequential_seconds, r.parallel_seconds
        );
    }
    dir.write_csv("scan_bench.csv", &csv)?;
    dir.write_csv("timing.csv", &tcsv)?;
    dir.write_json("timing.json", &Timing { rows: timing })?;
    dir.write_json("report.json", &Report { rows })?;
    Ok(())
}
