//! `tprd3`: train, evaluate, ablate and analyze D3 fast weight memory models.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or input error,
//! 3 numerical divergence.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tprd3::analysis::{self, Probed, ProbeSpec, Slot};
use tprd3::config::{self, RunConfig, DESK_SEEDS};
use tprd3::sar::{self, Phase};
use tprd3::trainer::{self, MANIFEST_FILE};
use tprd3::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

/// Environment variable that replaces the configured seed.
const SEED_ENV: &str = "TPRD3_SEED";

/// Probe count for the analysis episodes.
const PROBES: usize = 30;

#[derive(Parser)]
#[command(name = "tprd3", version, about = "D3 layer in a fast weight memory, trained on systematic associative recall")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file or a run's manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; takes precedence over TPRD3_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value settings applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; prints the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parent directory for the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-record progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy of a checkpoint over the full evaluation pass.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write per-query predictions as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = DESK_SEEDS.to_vec())]
        seeds: Vec<u64>,
    },
    /// Cosine-similarity matrices (CSV + PPM) for a trained checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `analysis/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print generated episodes as JSON lines.
    DumpEpisodes {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Role,
    Unbind,
    Query,
    Code,
    Codebook,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_CONFIG,
            })
        }
    }
}

fn load_config(cfg: &ConfigArgs, fallback_manifest: Option<&Path>) -> tprd3::Result<RunConfig> {
    let path = cfg.config.clone().or_else(|| fallback_manifest.filter(|p| p.exists()).map(Path::to_path_buf));
    let mut config = match path {
        Some(p) => config::parse_config(&p, &cfg.overrides)?,
        None => config::default_config(&cfg.overrides)?,
    };
    if let Ok(s) = std::env::var(SEED_ENV) {
        config.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    if let Some(seed) = cfg.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn manifest_beside(ckpt: &Path) -> tprd3::Result<PathBuf> {
    if !ckpt.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", ckpt.display())));
    }
    Ok(ckpt.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE))
}

/// `{variant}-{seed}-{timestamp}` under `parent`, suffixed if taken.
fn fresh_run_dir(parent: &Path, config: &RunConfig) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{}-{stamp}", config.variant, config.seed);
    let mut dir = parent.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{base}.{n}"));
        n += 1;
    }
    dir
}

fn run(command: Command) -> tprd3::Result<()> {
    match command {
        Command::Train { cfg, out, quiet } => {
            let mut config = load_config(&cfg, None)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            let dir = fresh_run_dir(&config.output_dir, &config);
            trainer::train(&config, &dir, |r| {
                if !quiet {
                    eprintln!("iter {:>6}  loss {:.4}  acc {:.4}  {:.0}s", r.iteration, r.loss, r.accuracy, r.seconds);
                }
            })?;
            println!("{}", dir.display());
        }
        Command::Eval { ckpt, cfg, predictions } => {
            let manifest = manifest_beside(&ckpt)?;
            let config = load_config(&cfg, Some(&manifest))?;
            let model = trainer::load_model(&config, &ckpt)?;
            let report = trainer::evaluate(&model, &config.vocab(), config.seed)?;
            if let Some(path) = predictions {
                let mut s = String::from("episode,query,x,target,prediction\n");
                for (e, (ep, preds)) in report.episodes.iter().zip(&report.predictions).enumerate() {
                    for (q, ((x, t), p)) in ep.inference.iter().zip(&ep.targets).zip(preds).enumerate() {
                        s.push_str(&format!("{e},{q},{x},{t},{p}\n"));
                    }
                }
                fs::write(path, s)?;
            }
            println!("accuracy={:.6} correct={} total={}", report.accuracy, report.correct, report.total);
        }
        Command::Ablate { cfg, out, seeds } => {
            let config = load_config(&cfg, None)?;
            let out = out.unwrap_or_else(|| config.output_dir.join("ablation"));
            let grid = trainer::ablation_grid();
            trainer::run_ablation_suite(&config, &grid, &seeds, &out, |name, seed, result| match result {
                Ok(r) => eprintln!("{name} seed {seed}: {:.4}", r.final_record().accuracy),
                Err(e) => eprintln!("{name} seed {seed}: failed: {e}"),
            })?;
            println!("{}", out.join("ablation.csv").display());
        }
        Command::Analyze { ckpt, which, cfg, out } => {
            let manifest = manifest_beside(&ckpt)?;
            let config = load_config(&cfg, Some(&manifest))?;
            let model = trainer::load_model(&config, &ckpt)?;
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("analysis"));
            fs::create_dir_all(&out)?;
            analyze(&model, &config, which, &out)?;
            println!("{}", out.display());
        }
        Command::DumpEpisodes { n, split, cfg } => {
            let config = load_config(&cfg, None)?;
            let vocab = config.vocab();
            let episodes = match split {
                Split::Train => (0..n as u64)
                    .map(|i| sar::gen_train_episode(&vocab, config.seed, i))
                    .collect::<tprd3::Result<Vec<_>>>()?,
                Split::Eval => sar::gen_eval_pass(&vocab, config.seed)?.into_iter().take(n).collect(),
            };
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            sar::dump_episodes(&episodes, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn analyze(model: &tprd3::model::SarModel<f64>, config: &RunConfig, which: Which, out: &Path) -> tprd3::Result<()> {
    let spec = ProbeSpec::desk(config.v, PROBES);
    fs::write(
        out.join("probe.txt"),
        format!(
            "# One eval-mode episode binds each probe x (X1 ids {:?}) to the fixed y={} (Y2),\n\
             # then queries the same x in the same order. Discovery step i yields the role\n\
             # of x_i; inference step i yields its unbinding operator. Slot 1 is role1/unbind1,\n\
             # slot 2 is role2/unbind2.\n",
            spec.xs, spec.y
        ),
    )?;
    let labels = spec.labels();
    let slots = [(Slot::First, 1), (Slot::Second, 2)];
    match which {
        Which::Role | Which::Unbind => {
            let mut reports = Vec::new();
            for (slot, s) in slots {
                let r = analysis::orthogonality_report(model, &spec, slot)?;
                analysis::write_matrix(out, &format!("role_role_slot{s}"), &r.role_role)?;
                analysis::write_matrix(out, &format!("role_unbind_slot{s}"), &r.role_unbind)?;
                if matches!(which, Which::Unbind) {
                    let u = analysis::probe_representations(model, &spec, Probed::Unbind, Phase::Inference, slot)?;
                    let (m, _) = analysis::cosine_matrix_labeled(&u, &u, labels.clone(), labels.clone())?;
                    analysis::write_matrix(out, &format!("unbind_unbind_slot{s}"), &m)?;
                }
                reports.push(r);
            }
            fs::write(out.join("orthogonality.csv"), analysis::orthogonality_csv(&reports))?;
        }
        Which::Query | Which::Code => {
            let probed = if matches!(which, Which::Query) { Probed::Query } else { Probed::Code };
            let name = if matches!(which, Which::Query) { "query" } else { "code" };
            for (slot, s) in slots {
                let enc = analysis::probe_representations(model, &spec, probed, Phase::Discovery, slot)?;
                let dec = analysis::probe_representations(model, &spec, probed, Phase::Inference, slot)?;
                let (m, _) = analysis::cosine_matrix_labeled(&enc, &enc, labels.clone(), labels.clone())?;
                analysis::write_matrix(out, &format!("{name}_role_slot{s}"), &m)?;
                let (m, _) = analysis::cosine_matrix_labeled(&enc, &dec, labels.clone(), labels.clone())?;
                analysis::write_matrix(out, &format!("{name}_role_unbind_slot{s}"), &m)?;
            }
        }
        Which::Codebook => {
            let layer = model
                .fwm()
                .d3()
                .ok_or_else(|| Error::Config("codebook analysis needs a D3 variant".into()))?;
            for (g, dict) in layer.dictionaries().iter().enumerate() {
                let store = model.store();
                let sim = analysis::codebook_similarity(store.tensor(dict.keys), store.tensor(dict.values))?;
                analysis::write_matrix(out, &format!("group{g}_keys"), &sim.keys)?;
                analysis::write_matrix(out, &format!("group{g}_values"), &sim.values)?;
                let order: Vec<String> = sim.order.iter().map(usize::to_string).collect();
                fs::write(out.join(format!("group{g}_order.txt")), order.join(",") + "\n")?;
            }
        }
    }
    Ok(())
}
