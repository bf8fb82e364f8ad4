use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dpssm_core::bench::{self, BenchCase, CaseOutcome};
use dpssm_core::degrade::{make_corpus, synthetic_clean, write_corpus};
use dpssm_core::extractor::{probe_experiment, ExtractorNet};
use dpssm_core::gradcheck::grad_check;
use dpssm_core::image::Image;
use dpssm_core::losses::{psnr, ssim};
use dpssm_core::modulation::{delta_stats, write_delta_csv, StatsSample};
use dpssm_core::params::Params;
use dpssm_core::restoration::DpmambaNet;
use dpssm_core::toy::{overfit_2d, overfit_pair, train_toy1d};
use dpssm_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::weights;

pub const THREADS_ENV: &str = "DPSSM_THREADS";
pub const PROBE_MIN_ACCURACY: f64 = 0.80;
pub const OVERFIT_MIN_GAIN_DB: f64 = 3.0;
pub const TOY_MIN_REDUCTION: f64 = 0.10;

#[derive(Debug, Parser)]
#[command(name = "dpssm", version, about = "Degradation-aware selective scan engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a labelled degraded corpus from a directory of PPM/PGM images.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore one image with a weight file.
    Restore {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference image; PSNR and SSIM go to stdout as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write freshly initialised restoration and extractor weights.
    InitWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time sequential and parallel scans after checking they agree.
    BenchScan {
        #[arg(long = "L", value_delimiter = ',', default_value = "1024,4096,16384")]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        dinner: usize,
        #[arg(long = "N", default_value_t = 16)]
        n: usize,
        /// Worker counts; defaults to $DPSSM_THREADS, then 1.
        #[arg(long, value_delimiter = ',')]
        threads: Option<Vec<usize>>,
        #[arg(long, default_value_t = bench::MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the scan, loss and network gradients.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Step-size statistics per degradation label.
    StatsDelta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Modulated vs fixed selective scan on the 1-D toy task.
    #[command(name = "train-toy1d")]
    TrainToy1d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the 2-D network to two image pairs.
    #[command(name = "overfit-2d")]
    Overfit2d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the extractor and fit a linear probe on its embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failed check ids; empty means success.
pub type Checks = Vec<String>;

pub fn run(cmd: Command) -> Result<Checks> {
    match cmd {
        Command::Degrade { common, input, out } => degrade(&common.load()?, &input, &out),
        Command::Restore {
            weights,
            input,
            out,
            metrics,
            config,
        } => restore(&RunConfig::load_or_default(config.as_deref())?, &weights, &input, &out, metrics.as_deref()),
        Command::InitWeights { common, out } => init_weights(&common.load()?, &out),
        Command::BenchScan {
            lens,
            dinner,
            n,
            threads,
            reps,
            seed,
            out,
        } => {
            let threads = match threads {
                Some(t) => t,
                None => threads_from_env(std::env::var(THREADS_ENV).ok().as_deref())?,
            };
            bench_scan(&lens, dinner, n, &threads, reps, seed, out.as_deref())
        }
        Command::GradCheck { seed, out } => grad_check_cmd(seed, out.as_deref()),
        Command::StatsDelta { common, weights, out } => stats_delta(&common.load()?, weights.as_deref(), &out),
        Command::TrainToy1d { common, steps, out } => train_toy(&common.load()?, steps, &out),
        Command::Overfit2d { common, steps, out } => overfit(&common.load()?, steps, &out),
        Command::Probe { common, out } => probe(&common.load()?, &out),
    }
}

pub fn threads_from_env(value: Option<&str>) -> Result<Vec<usize>> {
    let Some(v) = value.map(str::trim).filter(|v| !v.is_empty()) else {
        return Ok(vec![1]);
    };
    v.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must list positive integers, got {v:?}"))),
        })
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)? + "\n")?;
    Ok(())
}

fn check(failed: &mut Checks, id: &str, ok: bool, detail: String) {
    if !ok {
        eprintln!("check failed: {id}: {detail}");
        failed.push(id.to_string());
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")));
    paths.sort();
    Ok(paths)
}

pub fn degrade(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Checks> {
    let paths = list_images(input)?;
    if paths.is_empty() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no input images in {}", input.display()),
        )));
    }
    let clean: Vec<Image> = paths.iter().map(|p| Image::read(p)).collect::<Result<_>>()?;
    let recipes = &cfg.degrade.recipes;
    let count = cfg.degrade.count.unwrap_or(clean.len() * recipes.len());
    let samples = make_corpus(&clean, recipes, count, cfg.seed)?;
    let manifest = write_corpus(out, &samples)?;
    println!("{}", json!({ "count": manifest.count, "out": out.display().to_string() }));
    Ok(Vec::new())
}

fn build_models(cfg: &RunConfig, weights: Option<&Path>) -> Result<(DpmambaNet, ExtractorNet)> {
    match weights {
        Some(path) => {
            let params = weights::load(path)?;
            let net = DpmambaNet::from_params(cfg.restoration.clone(), params.subset("net."))?;
            let ext = ExtractorNet::from_params(cfg.extractor.clone(), params.subset("ext."))?;
            Ok((net, ext))
        }
        None => Ok((
            DpmambaNet::new(cfg.restoration.clone(), cfg.seed)?,
            ExtractorNet::new(cfg.extractor.clone(), cfg.seed.wrapping_add(1))?,
        )),
    }
}

pub fn init_weights(cfg: &RunConfig, out: &Path) -> Result<Checks> {
    let (net, ext) = build_models(cfg, None)?;
    let mut params = Params::new();
    params.merge_prefixed("net.", &net.params);
    params.merge_prefixed("ext.", &ext.params);
    weights::save(out, &params)?;
    println!(
        "{}",
        json!({ "restoration_params": net.param_count(), "extractor_params": ext.param_count() })
    );
    Ok(Vec::new())
}

pub fn restore(cfg: &RunConfig, weights: &Path, input: &Path, out: &Path, reference: Option<&Path>) -> Result<Checks> {
    let (net, ext) = build_models(cfg, Some(weights))?;
    let image = Image::read(input)?;
    let e = ext.extract(&image)?;
    let restored = net.forward(&image, &e)?.quantize8();
    restored.write(out)?;
    if let Some(r) = reference {
        let reference = Image::read(r)?;
        let p = psnr(reference.tensor(), restored.tensor(), 1.0)?;
        let s = ssim(reference.tensor(), restored.tensor())?;
        println!("{}", json!({ "psnr": p, "ssim": s }));
    }
    Ok(Vec::new())
}

pub fn bench_scan(
    lens: &[usize],
    d_inner: usize,
    n: usize,
    threads: &[usize],
    reps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<Checks> {
    let mut failed = Vec::new();
    let mut csv = vec![bench::CSV_HEADER.to_string()];
    println!("{}", bench::CSV_HEADER);
    for &len in lens {
        for &workers in threads {
            let case = BenchCase {
                len,
                d_inner,
                n,
                workers,
            };
            match bench::bench_case(&case, reps, seed, &bench::parallel_scan)? {
                CaseOutcome::Timed { rows, .. } => {
                    for r in &rows {
                        let line = bench::csv_row(r);
                        println!("{line}");
                        csv.push(line);
                    }
                }
                CaseOutcome::Refused { rel_err, .. } => check(
                    &mut failed,
                    &format!("scan_agreement_L{len}_w{workers}"),
                    false,
                    format!("relative error {rel_err:e}; no timing recorded"),
                ),
            }
        }
    }
    let counts: Vec<_> = lens.iter().map(|&l| bench::op_count_report(l, d_inner, n)).collect();
    for c in &counts {
        eprintln!(
            "op-count L={} single={} bidirectional={} scan_ratio={} total_ratio={:.6}",
            c.len,
            c.single.total(),
            c.bidirectional.total(),
            c.scan_ratio,
            c.total_ratio
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), csv.join("\n") + "\n")?;
        write_json(&dir.join("op_counts.json"), &counts)?;
    }
    Ok(failed)
}

pub fn grad_check_cmd(seed: u64, out: Option<&Path>) -> Result<Checks> {
    let report = grad_check(seed)?;
    println!("{}", to_json(&report)?);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("grad_check.json"), &report)?;
    }
    let mut failed = Vec::new();
    for e in &report.entries {
        let id = format!("{}.{}", e.check, e.operand);
        check(&mut failed, &id, e.passed, format!("{:e} > {:e}", e.max_rel_err, e.tolerance));
    }
    Ok(failed)
}

pub fn stats_delta(cfg: &RunConfig, weights: Option<&Path>, out: &Path) -> Result<Checks> {
    let (net, ext) = build_models(cfg, weights)?;
    let s = cfg.stats.image_size;
    let clean: Vec<Image> = (0..cfg.stats.clean_images.max(1) as u64)
        .map(|i| synthetic_clean(cfg.restoration.in_channels, s, s, cfg.seed.wrapping_add(i)))
        .collect::<Result<_>>()?;
    let recipes = &cfg.degrade.recipes;
    let samples = make_corpus(&clean, recipes, recipes.len() * cfg.stats.per_class, cfg.seed)?;
    let corpus: Vec<StatsSample> = samples
        .iter()
        .map(|x| {
            Ok(StatsSample {
                label: x.spec.label.clone(),
                input: x.degraded.tensor().clone(),
                embedding: ext.extract(&x.degraded)?,
            })
        })
        .collect::<Result<_>>()?;
    let rows = delta_stats(&net, &corpus)?;
    fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    write_delta_csv(&rows, &mut buf)?;
    fs::write(out.join("delta_stats.csv"), &buf)?;
    io::stdout().write_all(&buf)?;
    Ok(Vec::new())
}

pub fn train_toy(cfg: &RunConfig, steps: Option<usize>, out: &Path) -> Result<Checks> {
    let mut toy = cfg.toy.clone();
    toy.seed = cfg.seed;
    if let Some(s) = steps {
        toy.steps = s;
    }
    let report = train_toy1d(&toy)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &report)?;
    let mut buf = Vec::new();
    write_delta_csv(&report.delta_stats, &mut buf)?;
    fs::write(out.join("delta_stats.csv"), &buf)?;
    println!("{}", to_json(&report)?);

    let mut failed = Vec::new();
    let (m, f) = (report.mse_modulated, report.mse_fixed);
    if toy.steps == 0 {
        check(&mut failed, "identity_at_init", m == f, format!("{m} != {f}"));
    } else {
        check(
            &mut failed,
            "mse_reduction",
            m <= (1.0 - TOY_MIN_REDUCTION) * f,
            format!("modulated {m:.6} vs fixed {f:.6}"),
        );
        let mean = |k: &str| report.delta_mean_per_class.get(k).copied().unwrap_or(f64::NAN);
        let (noise, blur) = (mean("noise"), mean("blur"));
        check(
            &mut failed,
            "delta_ordering",
            noise < blur,
            format!("mean delta noise {noise:.6} vs blur {blur:.6}"),
        );
    }
    Ok(failed)
}

pub fn overfit(cfg: &RunConfig, steps: Option<usize>, out: &Path) -> Result<Checks> {
    let mut ocfg = cfg.overfit.clone();
    if let Some(s) = steps {
        ocfg.steps = s;
    }
    let (mut net, ext) = build_models(cfg, None)?;
    let samples = overfit_pair(&ext, cfg.seed)?;
    let input_psnr = samples
        .iter()
        .map(|s| psnr(&s.clean, &s.degraded, 1.0))
        .sum::<Result<f64>>()?
        / samples.len() as f64;
    let report = overfit_2d(&mut net, &samples, &ocfg)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &report)?;
    let mut csv = String::from("step,loss,psnr\n");
    for (i, (l, p)) in report.losses.iter().zip(&report.psnr).enumerate() {
        csv.push_str(&format!("{i},{l},{p}\n"));
    }
    fs::write(out.join("trajectory.csv"), csv)?;
    println!(
        "{}",
        json!({ "initial_psnr": report.initial_psnr, "final_psnr": report.final_psnr, "input_psnr": input_psnr })
    );

    let mut failed = Vec::new();
    let (a, b) = (report.initial_psnr, report.final_psnr);
    check(
        &mut failed,
        "identity_at_init",
        (a - input_psnr).abs() <= 1e-9,
        format!("initial {a} vs degraded input {input_psnr}"),
    );
    if ocfg.steps > 0 {
        check(
            &mut failed,
            "psnr_gain",
            b >= a + OVERFIT_MIN_GAIN_DB,
            format!("{a:.3} dB -> {b:.3} dB"),
        );
    }
    Ok(failed)
}

pub fn probe(cfg: &RunConfig, out: &Path) -> Result<Checks> {
    let mut pcfg = cfg.probe.clone();
    pcfg.seed = cfg.seed;
    let (net, report) = probe_experiment(&pcfg)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("probe.json"), &report.probe)?;
    let mut params = Params::new();
    params.merge_prefixed("ext.", &net.params);
    weights::save(&out.join("extractor.dpmw"), &params)?;
    println!("{}", to_json(&report.probe)?);
    let mut failed = Vec::new();
    let acc = report.probe.accuracy;
    check(
        &mut failed,
        "probe_accuracy",
        acc >= PROBE_MIN_ACCURACY,
        format!("{acc:.3} < {PROBE_MIN_ACCURACY}"),
    );
    Ok(failed)
}
