//! Acceptance run: every criterion at its stated tolerance, one line each.
//!
//! Library-level properties are checked against independent oracles here;
//! the training, tying and determinism criteria go through the `ssmdynlab`
//! binary the way a user would run them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use ssmdynlab::dynamics::{
    divergence_probe, fit_deviation_rate, is_strictly_contracting, lyapunov_closed_form, lyapunov_numeric,
    random_instance, Perturbation,
};
use ssmdynlab::numerics::{NumericFormat, PrecisionPolicy};
use ssmdynlab::ssm::{
    mamba_backward, mamba_forward, scan_parallel_in, scan_sequential_in, with_workers, BufferMode, Container,
    MambaConfig, MambaParams, ScanElement,
};
use ssmdynlab::train::{preset, train_loop, ToyModel, ToyModelConfig};
use ssmdynlab::Tensor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- helpers

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssmdynlab"))
}

fn run_cli(args: &[&str], out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SSMDYNLAB_SEED")
        .output()
        .expect("spawn ssmdynlab")
}

fn run_ok(args: &[&str], out: &Path) -> Result<Value, String> {
    let o = run_cli(args, out);
    ensure!(
        o.status.success(),
        "`ssmdynlab {}` exited {:?}: {}",
        args.join(" "),
        o.status.code(),
        String::from_utf8_lossy(&o.stderr).trim()
    );
    read_json(&out.join("report.json"))
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], half_width: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-half_width..half_width)).collect(),
    )
}

// ------------------------------------------------------- criteria 1 and 2

struct LyapunovDraws {
    worst_lambda: f64,
    worst_gap: f64,
    draws: usize,
    seconds: f64,
}

fn lyapunov_draws() -> Result<LyapunovDraws, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_lambda, mut worst_gap) = (f64::NEG_INFINITY, 0.0_f64);
    for k in 0..1000 {
        let d = [1usize, 4, 16][k % 3];
        let t = [64usize, 512][(k / 3) % 2];
        let mode = if (k / 6) % 2 == 0 {
            BufferMode::TimeIndexed
        } else {
            BufferMode::InputProjected
        };
        let (p, u) = random_instance(&mut rng, d, t, mode).map_err(|e| e.to_string())?;
        let numeric = lyapunov_numeric(&p, &u).map_err(|e| e.to_string())?;
        let tr = mamba_forward(&p, &u, &vec![0.0; d], &PrecisionPolicy::FP64).map_err(|e| e.to_string())?;
        let closed = lyapunov_closed_form(p.a_log.data(), &tr.delta_bar).map_err(|e| e.to_string())?;
        worst_lambda = worst_lambda.max(numeric.lambda_max);
        for (a, b) in closed.per_dim.iter().zip(&numeric.per_dim) {
            worst_gap = worst_gap.max((a - b).abs());
        }
    }
    Ok(LyapunovDraws {
        worst_lambda,
        worst_gap,
        draws: 1000,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn criterion_1(l: &LyapunovDraws) -> Outcome {
    ensure!(l.worst_lambda <= 1e-12, "max lambda_max {:e} > 1e-12", l.worst_lambda);
    ensure!(l.seconds < 60.0, "took {:.1} s", l.seconds);
    Ok(format!(
        "{} draws, max lambda_max {:.3e}, {:.2} s",
        l.draws, l.worst_lambda, l.seconds
    ))
}

fn criterion_2(l: &LyapunovDraws) -> Outcome {
    ensure!(l.worst_gap <= 1e-12, "closed/numeric gap {:e} > 1e-12", l.worst_gap);
    Ok(format!("max per-dimension gap {:.3e}", l.worst_gap))
}

// ---------------------------------------------------------------- criterion 3

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

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut dev64, mut dev32) = (0.0_f64, 0.0_f64);
    let mut instances = 0;
    for &t in &[1usize, 2, 3, 17, 1024, 4096] {
        for _ in 0..50 {
            let d = rng.random_range(1..=8);
            let elems: Vec<ScanElement> = (0..t)
                .map(|_| {
                    let a = (0..d).map(|_| 1.0 - rng.random::<f64>()).collect();
                    let b = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    ScanElement::new(a, b)
                })
                .collect();
            let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let chunk = rng.random_range(1..=64);
            for (fmt, worst) in [(NumericFormat::Fp64, &mut dev64), (NumericFormat::Fp32, &mut dev32)] {
                let seq = scan_sequential_in(&elems, &x0, fmt).map_err(|e| e.to_string())?;
                let mut first: Option<Tensor> = None;
                for w in [1usize, 2, 4] {
                    let par =
                        with_workers(w, || scan_parallel_in(&elems, &x0, chunk, fmt)).map_err(|e| e.to_string())?;
                    *worst = worst.max(rel_deviation(&par, &seq));
                    match &first {
                        Some(p) => ensure!(p.bit_eq(&par), "T={t}: result changed with {w} workers"),
                        None => first = Some(par),
                    }
                }
            }
            instances += 1;
        }
    }
    ensure!(dev64 < 1e-10, "FP64 deviation {dev64:e}");
    ensure!(dev32 < 1e-4, "FP32 deviation {dev32:e}");
    Ok(format!(
        "{instances} instances, FP64 {dev64:.2e}, FP32 {dev32:.2e}, bit-identical over 1/2/4 workers"
    ))
}

// ---------------------------------------------------------------- criterion 4

const FD_STEP: f64 = 1e-5;
/// Denominator floor so finite-difference noise on near-zero gradients
/// does not read as relative error.
const FD_FLOOR: f64 = 1e-3;

struct GradInstance {
    params: MambaParams,
    u: Tensor,
    x0: Vec<f64>,
    weights: Tensor,
}

impl GradInstance {
    fn loss(&self) -> f64 {
        let tr = mamba_forward(&self.params, &self.u, &self.x0, &PrecisionPolicy::FP64).expect("forward");
        tr.outputs
            .data()
            .iter()
            .zip(self.weights.data())
            .map(|(y, w)| y * w)
            .sum()
    }

    fn central(&mut self, slot: impl Fn(&mut Self) -> &mut f64) -> f64 {
        let orig = *slot(self);
        *slot(self) = orig + FD_STEP;
        let up = self.loss();
        *slot(self) = orig - FD_STEP;
        let down = self.loss();
        *slot(self) = orig;
        (up - down) / (2.0 * FD_STEP)
    }
}

fn worst_grad_error(inst: &mut GradInstance) -> f64 {
    let tr = mamba_forward(&inst.params, &inst.u, &inst.x0, &PrecisionPolicy::FP64).expect("forward");
    let g = mamba_backward(&inst.params, &tr, &inst.weights).expect("backward");
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR);
    let mut worst: f64 = 0.0;
    for i in 0..inst.params.d {
        worst = worst.max(rel(
            g.a_log.data()[i],
            inst.central(|s| &mut s.params.a_log.data_mut()[i]),
        ));
        worst = worst.max(rel(
            g.delta_bias.data()[i],
            inst.central(|s| &mut s.params.delta_bias.data_mut()[i]),
        ));
        worst = worst.max(rel(g.x0[i], inst.central(|s| &mut s.x0[i])));
    }
    let gf = g.fused.clone().expect("fused gradient");
    for i in 0..gf.numel() {
        worst = worst.max(rel(
            gf.data()[i],
            inst.central(|s| &mut s.params.fused.weight.data_mut()[i]),
        ));
    }
    if let Some(gg) = g.gate_weight.clone() {
        for i in 0..gg.numel() {
            worst = worst.max(rel(
                gg.data()[i],
                inst.central(|s| &mut s.params.gate_weight.data_mut()[i]),
            ));
        }
    }
    for i in 0..inst.u.numel() {
        worst = worst.max(rel(g.input.data()[i], inst.central(|s| &mut s.u.data_mut()[i])));
    }
    worst
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for mode in [BufferMode::TimeIndexed, BufferMode::InputProjected] {
        for gate in [false, true] {
            for _ in 0..30 {
                let d = rng.random_range(1..=4);
                let t = rng.random_range(1..=8);
                let cfg = MambaConfig::new(d, t, mode).with_gate(gate);
                let params = MambaParams::random(cfg, &mut rng).map_err(|e| e.to_string())?;
                let mut inst = GradInstance {
                    params,
                    u: uniform(&mut rng, &[t, d], 2.0),
                    x0: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    weights: uniform(&mut rng, &[t, d], 1.0),
                };
                worst = worst.max(worst_grad_error(&mut inst));
                n += 1;
            }
        }
    }
    ensure!(n >= 100, "only {n} instances");
    ensure!(worst < 1e-6, "worst relative error {worst:e}");
    Ok(format!("{n} instances, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_zeta, mut contracting, mut extinguished) = (f64::NEG_INFINITY, 0, 0);
    for k in 0..100 {
        let d = [1usize, 4, 16][k % 3];
        let mode = if k % 2 == 0 {
            BufferMode::TimeIndexed
        } else {
            BufferMode::InputProjected
        };
        let (p, u) = random_instance(&mut rng, d, 256, mode).map_err(|e| e.to_string())?;
        let tr = divergence_probe(&p, &u, 1e-4, Perturbation::X0, &PrecisionPolicy::FP64).map_err(|e| e.to_string())?;
        match fit_deviation_rate(&tr) {
            Ok(z) => worst_zeta = worst_zeta.max(z),
            Err(_) => {
                // no fit is possible only once the deviation has died out
                ensure!(
                    tr.last() == 0.0,
                    "config {k}: no fit but final deviation {:e}",
                    tr.last()
                );
                extinguished += 1;
            }
        }
        let nominal = mamba_forward(&p, &u, &vec![0.0; d], &PrecisionPolicy::FP64).map_err(|e| e.to_string())?;
        if is_strictly_contracting(&nominal, 1e-3) {
            contracting += 1;
            ensure!(tr.last() <= tr.first(), "config {k}: contracting but deviation grew");
        }
    }
    ensure!(worst_zeta <= 1e-3, "max zeta {worst_zeta:e} > 1e-3");
    Ok(format!(
        "100 configs, max zeta {worst_zeta:.3e}, {contracting} strictly contracting, {extinguished} died out"
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut parts = Vec::new();
    for policy in [PrecisionPolicy::bf16(), PrecisionPolicy::fp16()] {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let d = [1usize, 4, 16][seed % 3];
            let (p, u) = random_instance(&mut rng, d, 256, BufferMode::InputProjected).map_err(|e| e.to_string())?;
            for eps in [1e-2, 1e-3] {
                let tr = divergence_probe(&p, &u, eps, Perturbation::X0, &policy).map_err(|e| e.to_string())?;
                ensure!(!tr.overflowed, "{} seed {seed}: overflow", policy.label());
                worst = worst.max(tr.half_ratio());
            }
        }
        ensure!(worst <= 2.0, "{}: half ratio {worst}", policy.label());
        parts.push(format!("{} max ratio {worst:.3}", policy.label()));
    }
    Ok(format!("100 seeds x 2 eps each; {}", parts.join(", ")))
}

// ------------------------------------------------------- criteria 7 and 8

fn tamper(src: &Path, dst: &Path) -> Result<(), String> {
    let mut c = Container::load(src).map_err(|e| e.to_string())?;
    let name = "block.x_proj.adapted";
    let mut w = c.take(name, None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in w.data_mut() {
        *v += 1e-3 * rng.random_range(-1.0..1.0);
    }
    c.push(name, w);
    c.save(dst).map_err(|e| e.to_string())
}

fn criterion_7(work: &Path) -> Outcome {
    let mut lines = Vec::new();
    for mode in ["time-indexed", "input-projected"] {
        let train_dir = work.join(format!("tying-train-{mode}"));
        run_ok(
            &[
                "train",
                "--preset",
                "toy-lora",
                "--set",
                "total_steps=500",
                "--set",
                &format!("mode=\"{mode}\""),
            ],
            &train_dir,
        )?;
        let ckpt = train_dir.join("model.ckpt");
        let report = run_ok(
            &["lora-verify", ckpt.to_str().unwrap()],
            &work.join(format!("tying-verify-{mode}")),
        )?;
        let tying = &report["tying"];
        let worst = tying["segment_residuals"]
            .as_array()
            .ok_or("no residuals")?
            .iter()
            .map(f)
            .fold(0.0, f64::max);
        let (rank, bound) = (tying["rank_observed"].as_u64(), tying["rank_bound"].as_u64());
        ensure!(worst < 1e-10, "{mode}: residual {worst:e}");
        ensure!(rank <= bound && rank.is_some(), "{mode}: rank {rank:?} above {bound:?}");
        ensure!(rank > Some(0), "{mode}: adapter never moved");

        let bad = work.join(format!("tampered-{mode}.ckpt"));
        tamper(&ckpt, &bad)?;
        let o = run_cli(
            &["lora-verify", bad.to_str().unwrap()],
            &work.join(format!("tying-tampered-{mode}")),
        );
        ensure!(
            o.status.code() == Some(3),
            "{mode}: tampered checkpoint exited {:?}",
            o.status.code()
        );
        lines.push(format!(
            "{mode}: residual {worst:.1e}, rank {}/{}",
            rank.unwrap(),
            bound.unwrap()
        ));
    }
    Ok(format!("{}; tampering exits 3 in both", lines.join("; ")))
}

fn criterion_8(work: &Path) -> Outcome {
    let cfg = ToyModelConfig {
        vocab: 16,
        d: 32,
        t_max: 32,
        mode: BufferMode::InputProjected,
        gate: true,
    };
    let mut model = ToyModel::init(cfg, 8).map_err(|e| e.to_string())?;
    let before = work.join("frozen-before.ckpt");
    let after = work.join("frozen-after.ckpt");
    model.save(&before).map_err(|e| e.to_string())?;
    let mut tc = preset("toy-lora").ok_or("no toy-lora preset")?.config;
    tc.total_steps = 100;
    tc.max_seq_len = 32;
    let data = ssmdynlab::data::gen_selective_copy(8, 32, 16, 64).map_err(|e| e.to_string())?;
    let out = train_loop(&mut model, &tc, &PrecisionPolicy::bf16(), &data).map_err(|e| e.to_string())?;
    let moved = out
        .adapters
        .as_ref()
        .map_or(0.0, |s| s.adapters.values().map(|a| a.u.max_abs()).fold(0.0, f64::max));
    ensure!(moved > 0.0, "adapters did not train");
    model.save(&after).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(&before).unwrap(), std::fs::read(&after).unwrap());
    ensure!(a == b, "library checkpoint differs after training");

    // the CLI checkpoints from criterion 7 hold the untouched initial weights
    for mode in [BufferMode::TimeIndexed, BufferMode::InputProjected] {
        let ckpt = work.join(format!("tying-train-{mode}")).join("model.ckpt");
        let saved = ToyModel::load(&ckpt).map_err(|e| e.to_string())?;
        let fresh = ToyModel::init(saved.config(), 0).map_err(|e| e.to_string())?;
        ensure!(
            saved.bit_eq(&fresh),
            "{mode}: base weights changed in the CLI checkpoint"
        );
    }
    Ok(format!(
        "{} checkpoint bytes identical; CLI checkpoints match a fresh init",
        a.len()
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(work: &Path) -> Outcome {
    let start = Instant::now();
    let full = run_ok(&["train", "--preset", "toy"], &work.join("converge-full"))?;
    let lora = run_ok(&["train", "--preset", "toy-lora"], &work.join("converge-lora"))?;
    let seconds = start.elapsed().as_secs_f64();
    let acc = |r: &Value| {
        (
            f(&r["eval"]["answer_accuracy"]),
            f(&r["eval"]["token_accuracy"]),
            r["steps"].as_u64(),
        )
    };
    let (fa, ft, fs) = acc(&full);
    let (la, lt, ls) = acc(&lora);
    ensure!(fs <= Some(2000) && ls <= Some(2000), "step budget exceeded");
    ensure!(fa >= 0.95, "full answer accuracy {fa:.4} < 0.95");
    ensure!(la >= 0.90, "LoRA answer accuracy {la:.4} < 0.90");
    ensure!(seconds < 600.0, "took {seconds:.0} s");
    Ok(format!(
        "held-out answer accuracy full {:.2}% / LoRA r16 {:.2}% (all-position {:.2}% / {:.2}%), {:.0} s",
        100.0 * fa,
        100.0 * la,
        100.0 * ft,
        100.0 * lt,
        seconds
    ))
}

// --------------------------------------------------------------- criterion 10

fn criterion_10(work: &Path) -> Outcome {
    let dir = work.join("compare");
    let report = run_ok(&["train", "--compare", "--preset", "toy-compare"], &dir)?;
    let timing = read_json(&dir.join("timing.json"))?;
    let (fa, la) = (f(&timing["baseline_atps_best"]), f(&timing["adapter_atps_best"]));
    let (fp, lp) = (
        f(&report["baseline"]["peak_bytes"]),
        f(&report["adapter"]["peak_bytes"]),
    );
    let share = f(&report["trainable_share"]);
    ensure!(la >= fa, "adapter ATPS {la:.0} < full ATPS {fa:.0}");
    ensure!(lp < fp, "adapter peak {lp} not below full peak {fp}");
    ensure!(share <= 0.10, "trainable share {share:.4} > 10%");
    Ok(format!(
        "ATPS LoRA-BF16 {la:.0} vs Full-FP32 {fa:.0} ({:.2}x), peak bytes {:.2}x, trainable {:.2}%",
        la / fa,
        lp / fp,
        100.0 * share
    ))
}

// --------------------------------------------------------------- criterion 11

fn criterion_11(work: &Path) -> Outcome {
    let base = work.join("determinism");
    let ckpt = work.join("tying-train-input-projected").join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("lyapunov", vec!["lyapunov", "--workers", "2"]),
        ("divergence", vec!["divergence", "--workers", "2"]),
        ("scan-bench", vec!["scan-bench", "--workers", "2", "--set", "repeats=1"]),
        ("train", vec!["train", "--seed", "5", "--set", "total_steps=40"]),
        (
            "train-compare",
            vec![
                "train",
                "--compare",
                "--set",
                "total_steps=4",
                "--set",
                "compare_repeats=1",
            ],
        ),
        ("lora-verify", vec!["lora-verify", ckpt]),
    ];
    let mut dirs: Vec<PathBuf> = Vec::new();
    for (name, args) in &runs {
        let (a, b) = (base.join(format!("{name}-a")), base.join(format!("{name}-b")));
        run_ok(args, &a)?;
        run_ok(args, &b)?;
        let (ra, rb) = (
            std::fs::read(a.join("report.json")).unwrap(),
            std::fs::read(b.join("report.json")).unwrap(),
        );
        ensure!(ra == rb, "{name}: report.json differs between runs");
        dirs.push(a);
    }
    let listed: Vec<&str> = dirs.iter().map(|d| d.to_str().unwrap()).collect();
    let mut args = vec!["report"];
    args.extend(&listed);
    let (a, b) = (base.join("report-a"), base.join("report-b"));
    run_ok(&args, &a)?;
    run_ok(&args, &b)?;
    ensure!(
        std::fs::read(a.join("report.json")).unwrap() == std::fs::read(b.join("report.json")).unwrap(),
        "report: report.json differs between runs"
    );
    Ok(format!("{} subcommand runs byte-identical", runs.len() + 1))
}

// ----------------------------------------------------------------- driver

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let lyap = lyapunov_draws();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "Lyapunov non-positivity", Box::new(|| criterion_1(lyap.as_ref()?))),
        (
            2,
            "closed-form/numeric agreement",
            Box::new(|| criterion_2(lyap.as_ref()?)),
        ),
        (3, "scan equivalence", Box::new(criterion_3)),
        (4, "gradient correctness", Box::new(criterion_4)),
        (5, "divergence probes", Box::new(criterion_5)),
        (6, "mixed-precision boundedness", Box::new(criterion_6)),
        (7, "adapter weight tying", Box::new(|| criterion_7(work))),
        (8, "frozen base", Box::new(|| criterion_8(work))),
        (9, "training convergence", Box::new(|| criterion_9(work))),
        (10, "efficiency direction", Box::new(|| criterion_10(work))),
        (11, "CLI determinism", Box::new(|| criterion_11(work))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
