//! `sdgzsl` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 a check command found a
//! value outside its threshold.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sdgzsl::data::{self, TensorData, TensorMap};
use sdgzsl::evaluation::{evaluate_gzsl, evaluate_retrieval, Representation};
use sdgzsl::par::init_threads;
use sdgzsl::tc_bench::{run_tc_bench, TcBenchConfig};
use sdgzsl::trainer::{gradient_suite, load_model, Ablation, Trainer};

use config::RunConfig;

const CHECKPOINT_FILE: &str = "checkpoint.sdck";
const LOG_FILE: &str = "train_log.csv";
const GROUND_TRUTH_FILE: &str = "ground_truth.sdt";
/// Largest accepted |estimate| when the true TC is 0.
const TC_ZERO_TOL: f64 = 0.05;
/// Largest accepted relative TC error otherwise.
const TC_REL_TOL: f64 = 0.15;

#[derive(Parser)]
#[command(name = "sdgzsl", version, about = "Semantic disentangling generative zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for every randomized section of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark with known semantic and nuisance factors.
    SynthData {
        /// Synthetic spec (the `synthetic` section of a run config).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// GZSL evaluation: report JSON plus confusion CSVs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "hs")]
        rep: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot retrieval mAP table.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, default_value = "hs")]
        rep: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every loss term in 64-bit arithmetic.
    Gradcheck {
        /// Number of consecutive seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimated against analytic total correlation on correlated Gaussians.
    TcBench {
        #[arg(long, value_delimiter = ',')]
        rho: Option<Vec<f64>>,
        /// `l,m`: sizes of the two halves.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AblationArg {
    NoRn,
    NoTc,
    CvaeOnly,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoRn => Ablation::NoRn,
            AblationArg::NoTc => Ablation::NoTc,
            AblationArg::CvaeOnly => Ablation::CvaeOnly,
        }
    }
}

/// A check command ran to completion but a value missed its threshold.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn resolve(common: &Common, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?
        .with_overrides(&common.sets)?
        .with_seed(common.seed);
    if let Some(out) = out {
        cfg.out_dir = Some(out.to_path_buf());
    }
    Ok(cfg)
}

/// Writes the resolved config into the output directory, or prints it to
/// stderr when the command has none.
fn dump(cfg: &RunConfig) -> Result<()> {
    match &cfg.out_dir {
        Some(dir) => {
            let p = cfg.dump(dir)?;
            log::info!("resolved config written to {}", p.display());
        }
        None => eprintln!("resolved config: {}", serde_json::to_string(cfg)?),
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { spec, out, common } => {
            let mut cfg = resolve(&common, Some(&out))?;
            if let Some(p) = spec {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                cfg.synthetic = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                cfg = cfg.with_overrides(&common.sets)?.with_seed(common.seed);
            }
            let (bundle, truth) = data::generate_synthetic(&cfg.synthetic)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let manifest = data::write_bundle(&bundle, &out)?;
            let mut gt = TensorMap::new();
            gt.insert("semantic".into(), TensorData::F32(truth.semantic));
            gt.insert("nuisance".into(), TensorData::F32(truth.nuisance));
            gt.insert("semantic_map".into(), TensorData::F64(truth.semantic_map));
            gt.insert("mixing".into(), TensorData::F64(truth.mixing));
            data::write_sdtensor(out.join(GROUND_TRUTH_FILE), &gt)?;
            dump(&cfg)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            data: manifest,
            out,
            ablation,
            resume,
            common,
        } => {
            let mut cfg = resolve(&common, Some(&out))?;
            if let Some(a) = ablation {
                Ablation::from(a).apply(&mut cfg.train.weights);
            }
            let bundle = data::load_bundle(&manifest)?;
            let mut trainer = match resume {
                Some(ckpt) => {
                    let mut t = Trainer::load(&ckpt)?;
                    let mut want = cfg.train.clone();
                    want.arch.resolve_data_dims(bundle.feature_dim(), bundle.attr_dim())?;
                    want.epochs = t.config.epochs;
                    if want != t.config {
                        bail!(
                            "config differs from the one stored in {}; resume with its resolved config",
                            ckpt.display()
                        );
                    }
                    t.config.epochs = cfg.train.epochs;
                    t
                }
                None => Trainer::new(cfg.train.clone(), &bundle)?,
            };
            dump(&cfg)?;
            let ckpt = out.join(CHECKPOINT_FILE);
            while trainer.epoch < trainer.config.epochs {
                trainer.run_epoch(&bundle)?;
                trainer.save(&ckpt)?;
            }
            if trainer.log.records.is_empty() {
                trainer.save(&ckpt)?;
            }
            trainer.log.save_csv(out.join(LOG_FILE))?;
            println!("{}", ckpt.display());
        }
        Command::Eval {
            data: manifest,
            ckpt,
            rep,
            out,
            common,
        } => {
            let cfg = resolve(&common, Some(&out))?;
            let rep = Representation::parse(&rep)?;
            let bundle = data::load_bundle(&manifest)?;
            let (_, state) = load_model(&ckpt)?;
            dump(&cfg)?;
            let report = evaluate_gzsl(&state, &bundle, cfg.train.n_syn, &cfg.eval, rep)?;
            let tag = serde_json::to_value(rep)?.as_str().unwrap_or("rep").to_string();
            write_json(&out.join(format!("report_{tag}.json")), &report)?;
            report.confusion.save(&out, &format!("confusion_{tag}"))?;
            println!(
                "rep {tag}  U {:.1}  S {:.1}  H {:.1}  T1 {:.1}",
                report.unseen, report.seen, report.harmonic, report.zsl_top1
            );
        }
        Command::Retrieve {
            data: manifest,
            ckpt,
            ratios,
            rep,
            out,
            common,
        } => {
            let mut cfg = resolve(&common, out.as_deref())?;
            if let Some(r) = ratios {
                cfg.eval.ratios = r;
            }
            let rep = Representation::parse(&rep)?;
            let bundle = data::load_bundle(&manifest)?;
            let (_, state) = load_model(&ckpt)?;
            dump(&cfg)?;
            let map = evaluate_retrieval(&state, &bundle, cfg.train.n_syn, &cfg.eval.ratios, rep, cfg.eval.seed)?;
            println!("ratio,mAP");
            let mut rows = String::from("ratio,mAP\n");
            for r in &cfg.eval.ratios {
                let line = format!("{r},{:.6}", map[&format!("{r}")]);
                println!("{line}");
                rows += &line;
                rows.push('\n');
            }
            if let Some(dir) = &cfg.out_dir {
                let p = dir.join("retrieval.csv");
                std::fs::write(&p, rows).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Gradcheck { seeds, out, common } => {
            let cfg = resolve(&common, out.as_deref())?;
            dump(&cfg)?;
            let mut all = Vec::new();
            let mut failed = Vec::new();
            println!("seed,term,max_rel_err,checked,skipped,passed");
            for seed in cfg.train.seed..cfg.train.seed + seeds {
                for c in gradient_suite(seed, &cfg.gradcheck)? {
                    let r = &c.report;
                    println!(
                        "{},{},{:.3e},{},{},{}",
                        seed,
                        c.term,
                        r.max_rel_err(),
                        r.checked(),
                        r.skipped(),
                        r.passed()
                    );
                    if !r.passed() {
                        failed.push(format!("{} (seed {seed})", c.term));
                    }
                    all.push(c);
                }
            }
            if let Some(dir) = &cfg.out_dir {
                write_json(&dir.join("gradcheck.json"), &all)?;
            }
            if !failed.is_empty() {
                return Err(CheckFailed(format!("gradient mismatch in {}", failed.join(", "))).into());
            }
        }
        Command::TcBench {
            rho,
            dims,
            out,
            common,
        } => {
            let mut cfg = resolve(&common, out.as_deref())?;
            if let Some(d) = dims {
                let [l, m] = d[..] else {
                    bail!("--dims expects two sizes, e.g. 4,4");
                };
                cfg.tc_bench.hs_dim = l;
                cfg.tc_bench.hn_dim = m;
            }
            let rhos = rho.unwrap_or_else(|| vec![cfg.tc_bench.rho]);
            if let [r] = rhos[..] {
                cfg.tc_bench.rho = r;
            }
            dump(&cfg)?;
            let mut results = Vec::new();
            let mut failed = Vec::new();
            println!("rho,analytic,estimate,rel_err");
            for r in rhos {
                let res = run_tc_bench(&TcBenchConfig {
                    rho: r,
                    ..cfg.tc_bench.clone()
                })?;
                let rel = res.rel_err.map_or("-".to_string(), |e| format!("{e:.4}"));
                println!("{r},{:.6},{:.6},{rel}", res.analytic, res.estimate);
                let ok = match res.rel_err {
                    Some(e) => e <= TC_REL_TOL,
                    None => res.estimate.abs() < TC_ZERO_TOL,
                };
                if !ok {
                    failed.push(format!("rho {r}"));
                }
                results.push(res);
            }
            if let Some(dir) = &cfg.out_dir {
                write_json(&dir.join("tc_bench.json"), &results)?;
            }
            if !failed.is_empty() {
                return Err(CheckFailed(format!("TC estimate off for {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads(None);
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CheckFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
