use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aligned_sae::data::{gen_synthetic, read_activations, write_activations, ActivationSet, SyntheticSpec};
use aligned_sae::grad::{grad_check as check_instance, random_instance, variant_grid, GRAD_TOLERANCE};
use aligned_sae::metrics::{alignment_histogram, evaluate, mmcs_symmetric, MetricsRecord};
use aligned_sae::model::{alignment_scores, EncoderMode};
use aligned_sae::trainer::{lambda_schedule, load_checkpoint, save_checkpoint, train as train_sae, Checkpoint};
use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{usage, RunConfig};
use crate::{AlignHistArgs, CompareArgs, EvalArgs, GenDataArgs, GradCheckArgs, SweepArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.saec";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        n: args.n,
        m_true: args.m_true,
        fire_prob: args.rho,
        noise_sigma: args.noise,
        samples: args.samples,
        seed: args.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let set = gen_synthetic(&spec)?;
    write_activations(&set, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {}: samples {}, n {}, expected L0 {}",
        args.out.display(),
        set.samples(),
        set.n(),
        spec.expected_l0()
    );
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<ActivationSet> {
    read_activations(path).with_context(|| format!("reading activations {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Writes the checkpoint, the metrics log and the resolved config into `dir`.
fn write_run(dir: &Path, cfg: &RunConfig, ckpt: &Checkpoint, log: &[MetricsRecord]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_checkpoint(ckpt, dir.join(CHECKPOINT_FILE))?;
    let mut lines = String::new();
    for rec in log {
        lines.push_str(&rec.to_json_line());
        lines.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), lines)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let data = load_data(&cfg.data)?;
    let (ckpt, log) = train_sae(&cfg.train, &data)?;
    write_run(&cfg.out_dir, &cfg, &ckpt, &log)?;
    println!("{}", ckpt.metrics.to_json_line());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    let cfg = &ckpt.config;
    let chunk = args.chunk.unwrap_or(cfg.batch_size);
    if chunk == 0 {
        return Err(usage("--chunk must be positive"));
    }
    let rec = evaluate(
        &ckpt.params,
        &data.data,
        lambda_schedule(ckpt.step, cfg),
        cfg.p_at(ckpt.step),
        chunk,
        ckpt.step,
    )?;
    println!("{}", serde_json::to_string_pretty(&rec)?);
    Ok(())
}

pub fn compare(args: &CompareArgs) -> anyhow::Result<()> {
    let a = load_ckpt(&args.a)?;
    let b = load_ckpt(&args.b)?;
    let pair = mmcs_symmetric(&a.params.w_dec, &b.params.w_dec)?;
    println!("{}", serde_json::to_string_pretty(&pair)?);
    Ok(())
}

pub fn align_hist(args: &AlignHistArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.checkpoint)?;
    let scores = alignment_scores(&ckpt.params)?;
    let hist = alignment_histogram(&scores, args.bins, args.lo, args.hi)?;
    print!("{}", hist.to_csv());
    Ok(())
}

pub fn grad_check(args: &GradCheckArgs) -> anyhow::Result<()> {
    if args.n < 2 || args.m == 0 || args.batch == 0 {
        return Err(usage("grad-check needs n >= 2, m >= 1 and batch >= 1"));
    }
    let grid = variant_grid(args.m);
    // variant -> (trials, worst error, skipped, worst tensor)
    let mut worst: Vec<(u64, f64, usize, String)> = vec![(0, 0.0, 0, String::new()); grid.len()];
    for t in 0..args.trials {
        let slot = (t % grid.len() as u64) as usize;
        let inst = random_instance(grid[slot], args.n, args.m, args.batch, args.seed.wrapping_add(t));
        let report = check_instance(&inst.params, &inst.x, inst.lambda, inst.p_current)?;
        let w = &mut worst[slot];
        w.0 += 1;
        w.2 += report.skipped;
        if report.max_rel_err >= w.1 {
            w.1 = report.max_rel_err;
            w.3 = report.worst_tensor.map(|n| n.to_string()).unwrap_or_default();
        }
    }

    let mut failed = 0;
    let mut overall = 0.0f64;
    println!("{:<32} {:>6} {:>12} {:>8}  {:<6} status", "variant", "trials", "max_rel_err", "skipped", "tensor");
    for (variant, (trials, err, skipped, tensor)) in grid.iter().zip(&worst) {
        if *trials == 0 {
            continue;
        }
        let ok = *err <= GRAD_TOLERANCE;
        failed += usize::from(!ok);
        overall = overall.max(*err);
        println!(
            "{:<32} {:>6} {:>12.3e} {:>8}  {:<6} {}",
            variant.to_string(),
            trials,
            err,
            skipped,
            tensor,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!("{failed} variant(s) exceed relative error {GRAD_TOLERANCE:e} (worst {overall:.3e})");
    }
    println!("pass: {} trials, worst relative error {overall:.3e}", args.trials);
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    mode: String,
    lambda: f64,
    seed: u64,
    l0: f64,
    explained_variance: Option<f64>,
    dead_fraction: Option<f64>,
    mmcs_vs_other_seed: Option<f64>,
}

#[derive(Serialize)]
struct FailureRow {
    mode: String,
    lambda: f64,
    seed: u64,
    error: String,
}

pub const SUMMARY_FILE: &str = "summary.csv";
const SUMMARY_COLUMNS: [&str; 7] = [
    "mode",
    "lambda",
    "seed",
    "l0",
    "explained_variance",
    "dead_fraction",
    "mmcs_vs_other_seed",
];
pub const FAILURES_FILE: &str = "failures.csv";

fn run_dir_name(mode: EncoderMode, lambda: f64, seed: u64) -> String {
    format!("{mode}_lambda{lambda}_seed{seed}")
}

pub fn sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let base = RunConfig::load(&args.config, &args.overrides)?;
    let lambdas = if args.lambdas.is_empty() {
        vec![base.train.lambda]
    } else {
        args.lambdas.clone()
    };
    let seeds = if args.seeds.is_empty() {
        base.seeds.clone()
    } else {
        args.seeds.clone()
    };
    if seeds.is_empty() {
        return Err(usage("sweep needs at least one seed (--seeds or the config's seeds list)"));
    }
    let modes = args
        .modes
        .iter()
        .map(|m| m.parse::<EncoderMode>().map_err(|e| usage(format!("--modes: {e}"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(usage("sweep needs at least one mode"));
    }
    let out_dir: PathBuf = args.out_dir.clone().unwrap_or_else(|| base.out_dir.clone());

    let mut jobs = Vec::new();
    for &mode in &modes {
        for &lambda in &lambdas {
            for &seed in &seeds {
                let mut run = base.clone();
                run.train.variant.encoder = mode;
                run.train.lambda = lambda;
                run.train.seed = seed;
                run.out_dir = out_dir.join(run_dir_name(mode, lambda, seed));
                run.train
                    .validate()
                    .map_err(|e| usage(format!("{mode}, lambda {lambda}, seed {seed}: {e}")))?;
                jobs.push((mode, lambda, seed, run));
            }
        }
    }

    let data = load_data(&base.data)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let results: Vec<Result<Checkpoint, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, _, _, run)| {
                let (ckpt, log) = train_sae(&run.train, &data).map_err(|e| e.to_string())?;
                write_run(&run.out_dir, run, &ckpt, &log).map_err(|e| format!("{e:#}"))?;
                Ok(ckpt)
            })
            .collect()
    });

    // Completed runs grouped by (mode, lambda), in seed order.
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, res) in results.iter().enumerate() {
        if res.is_ok() {
            let mode_idx = modes.iter().position(|m| *m == jobs[i].0).expect("mode listed");
            let lambda_idx = lambdas.iter().position(|l| *l == jobs[i].1).expect("lambda listed");
            groups.entry((mode_idx, lambda_idx)).or_default().push(i);
        }
    }
    let mut partner = vec![None; jobs.len()];
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        for (pos, &i) in members.iter().enumerate() {
            partner[i] = Some(members[(pos + 1) % members.len()]);
        }
    }

    let mut summary = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out_dir.join(SUMMARY_FILE))?;
    summary.write_record(SUMMARY_COLUMNS)?;
    let mut failures = Vec::new();
    for (i, ((mode, lambda, seed, _), res)) in jobs.iter().zip(&results).enumerate() {
        match res {
            Ok(ckpt) => {
                let mmcs = match partner[i] {
                    Some(j) => {
                        let other = results[j].as_ref().expect("partners completed");
                        Some(mmcs_symmetric(&ckpt.params.w_dec, &other.params.w_dec)?.mean)
                    }
                    None => None,
                };
                summary.serialize(SummaryRow {
                    mode: mode.to_string(),
                    lambda: *lambda,
                    seed: *seed,
                    l0: ckpt.metrics.l0_mean,
                    explained_variance: ckpt.metrics.explained_variance,
                    dead_fraction: ckpt.metrics.dead_fraction_eval,
                    mmcs_vs_other_seed: mmcs,
                })?;
            }
            Err(e) => failures.push(FailureRow {
                mode: mode.to_string(),
                lambda: *lambda,
                seed: *seed,
                error: e.clone(),
            }),
        }
    }
    summary.flush()?;

    let completed = jobs.len() - failures.len();
    println!(
        "{completed} of {} runs completed; summary in {}",
        jobs.len(),
        out_dir.join(SUMMARY_FILE).display()
    );
    if !failures.is_empty() {
        let mut w = csv::Writer::from_path(out_dir.join(FAILURES_FILE))?;
        for f in &failures {
            w.serialize(f)?;
        }
        w.flush()?;
        let mut err = std::io::stderr();
        for f in &failures {
            let _ = writeln!(err, "run {} failed: {}", run_dir_name(f.mode.parse()?, f.lambda, f.seed), f.error);
        }
        bail!("{} of {} sweep runs failed", failures.len(), jobs.len());
    }
    Ok(())
}
