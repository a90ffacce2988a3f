//! Training, evaluation and the ablation grid.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::SarModel;
use crate::optim::AdamState;
use crate::rng::{self, Domain};
use crate::sar::{gen_eval_pass, gen_train_episode, SarEpisode, SarVocab};
use crate::Real;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

pub fn usage_file(group: usize) -> String {
    format!("usage_group{group}.csv")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
    /// Cumulative key selections per dictionary group during training.
    pub usage: Vec<Vec<u64>>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub best_iteration: usize,
    pub best_accuracy: f64,
    /// Number of D3 component evaluations behind the usage counts.
    pub component_invocations: u64,
}

impl TrainReport {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("a run records at least once")
    }
}

/// Anything that answers the inference queries of a batch of episodes.
pub trait Recall {
    fn recall(&self, episodes: &[SarEpisode]) -> Result<Vec<Vec<usize>>>;
}

impl Recall for SarModel<Real> {
    fn recall(&self, episodes: &[SarEpisode]) -> Result<Vec<Vec<usize>>> {
        let dropout = rng::stream(0, Domain::Dropout, u64::MAX);
        Ok(self.run(episodes, Mode::Eval, dropout, false)?.predictions)
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub episodes: Vec<SarEpisode>,
    pub predictions: Vec<Vec<usize>>,
}

/// Accuracy over the full `X1 x Y2` evaluation pass.
pub fn evaluate<R: Recall>(model: &R, vocab: &SarVocab, seed: u64) -> Result<EvalReport> {
    let episodes = gen_eval_pass(vocab, seed)?;
    let predictions = model.recall(&episodes)?;
    let (correct, total) = count_correct(&episodes, &predictions);
    Ok(EvalReport { accuracy: correct as f64 / total as f64, correct, total, episodes, predictions })
}

/// `(correct, total)` over every inference query.
pub fn count_correct(episodes: &[SarEpisode], predictions: &[Vec<usize>]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (ep, preds) in episodes.iter().zip(predictions) {
        total += ep.targets.len();
        correct += ep.targets.iter().zip(preds).filter(|(t, p)| t == p).count();
    }
    (correct, total)
}

/// Training batch `iteration` (1-based); episode ids never repeat across iterations.
pub fn train_batch(config: &RunConfig, iteration: usize) -> Result<Vec<SarEpisode>> {
    let vocab = config.vocab();
    let first = (iteration as u64 - 1) * config.batch_size as u64;
    (0..config.batch_size as u64).map(|b| gen_train_episode(&vocab, config.seed, first + b)).collect()
}

struct CsvOut(BufWriter<File>);

impl CsvOut {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        w.flush()?;
        Ok(Self(w))
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.0, "{line}")?;
        self.0.flush()?;
        Ok(())
    }
}

fn write_usage(dir: &Path, usage: &[Vec<u64>]) -> Result<()> {
    for (g, counts) in usage.iter().enumerate() {
        let mut s = String::from("key_index,count\n");
        for (k, c) in counts.iter().enumerate() {
            s.push_str(&format!("{k},{c}\n"));
        }
        fs::write(dir.join(usage_file(g)), s)?;
    }
    Ok(())
}

/// Trains from scratch into `run_dir`, writing the manifest, the metrics
/// stream (flushed per record), wall-clock timings, usage counts and the best
/// and final checkpoints. `on_record` sees every record as it is written.
///
/// On divergence the partial metrics stay on disk and the error is returned.
pub fn train(config: &RunConfig, run_dir: &Path, mut on_record: impl FnMut(&MetricsRecord)) -> Result<TrainReport> {
    config.validate()?;
    if config.iterations == 0 {
        return Err(Error::config("iterations must be positive"));
    }
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(MANIFEST_FILE), config.to_manifest())?;
    let mut metrics = CsvOut::create(&run_dir.join(METRICS_FILE), "iteration,loss,accuracy")?;
    let mut timing = CsvOut::create(&run_dir.join(TIMING_FILE), "iteration,seconds")?;

    let mut model = SarModel::<Real>::new(config)?;
    let mut adam = AdamState::new(config.adam.clone(), model.store());
    let vocab = config.vocab();
    let start = Instant::now();
    let groups = model.fwm().d3().map_or(0, |d| d.n_groups());
    let n_code = model.fwm().d3().map_or(0, |d| d.config().n_code);
    let per_step = model.fwm().d3().map_or(0, |d| d.n_components()) as u64;
    let mut usage = vec![vec![0u64; n_code]; groups];
    let mut invocations = 0u64;
    let mut records = Vec::new();
    let (mut best_iteration, mut best_accuracy) = (0, f64::NEG_INFINITY);
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for it in 1..=config.iterations {
        let episodes = train_batch(config, it)?;
        let dropout = rng::stream(config.seed, Domain::Dropout, it as u64);
        model.store_mut().zero_grads();
        let run = model.run(&episodes, Mode::Train, dropout, false)?;
        let loss = run.loss_value();
        if !loss.is_finite() {
            return Err(Error::Divergence { timestep: 0, what: format!("non-finite loss at iteration {it}") });
        }
        for (acc, counts) in usage.iter_mut().zip(&run.usage) {
            acc.iter_mut().zip(counts).for_each(|(a, c)| *a += c);
        }
        invocations += per_step * 2 * (vocab.length * config.batch_size) as u64;
        let graph = run.backward()?;
        graph.accumulate_param_grads(model.store_mut());
        adam.step(model.store_mut())?;
        loss_sum += loss;
        loss_count += 1;

        if it % config.eval_every == 0 || it == config.iterations {
            let accuracy = evaluate(&model, &vocab, config.seed)?.accuracy;
            let record = MetricsRecord {
                iteration: it,
                loss: loss_sum / loss_count as f64,
                accuracy,
                seconds: start.elapsed().as_secs_f64(),
                usage: usage.clone(),
            };
            (loss_sum, loss_count) = (0.0, 0);
            metrics.line(&format!("{},{:.9e},{:.9e}", it, record.loss, record.accuracy))?;
            timing.line(&format!("{},{:.3}", it, record.seconds))?;
            write_usage(run_dir, &usage)?;
            if accuracy >= best_accuracy {
                (best_iteration, best_accuracy) = (it, accuracy);
                checkpoint::save(&run_dir.join(BEST_CKPT), model.store())?;
            }
            on_record(&record);
            records.push(record);
        }
    }
    checkpoint::save(&run_dir.join(FINAL_CKPT), model.store())?;
    Ok(TrainReport {
        run_dir: run_dir.to_path_buf(),
        records,
        best_iteration,
        best_accuracy,
        component_invocations: invocations,
    })
}

/// Loads a checkpoint into a freshly built model for `config`.
pub fn load_model(config: &RunConfig, ckpt: &Path) -> Result<SarModel<Real>> {
    let mut model = SarModel::<Real>::new(config)?;
    let stored = checkpoint::load(ckpt)?;
    model.store_mut().load_from(&stored)?;
    Ok(model)
}

/// One row of the ablation grid.
#[derive(Clone, Debug)]
pub struct AblationSetting {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationSetting {
    fn new(name: impl Into<String>, overrides: &[(&str, String)]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let settings = self.overrides.iter().cloned().collect();
        let mut c = base.clone();
        c.apply(&settings)?;
        Ok(c)
    }
}

/// Top-k used while sweeping `N_code`; it must fit the smallest codebook.
pub const N_CODE_SWEEP_TOP_K: usize = 2;

/// `D_code`, top-k, `N_code`, without codebook, without residual, and the
/// single-key codebook.
pub fn ablation_grid() -> Vec<AblationSetting> {
    let mut grid = Vec::new();
    for d in [8, 16, 32, 64] {
        grid.push(AblationSetting::new(format!("D_code={d}"), &[("D_code", d.to_string())]));
    }
    for k in [1, 2, 4, 8] {
        grid.push(AblationSetting::new(
            format!("top_k={k},N_code=64"),
            &[("top_k", k.to_string()), ("N_code", "64".into())],
        ));
    }
    for n in [2, 4, 8, 16, 64] {
        grid.push(AblationSetting::new(
            format!("N_code={n},top_k={N_CODE_SWEEP_TOP_K}"),
            &[("N_code", n.to_string()), ("top_k", N_CODE_SWEEP_TOP_K.to_string())],
        ));
    }
    grid.push(AblationSetting::new("w/o codebook", &[("use_codebook", "false".into())]));
    grid.push(AblationSetting::new("w/o residual", &[("use_residual", "false".into())]));
    grid.push(AblationSetting::new(
        "N_code=1,top_k=1",
        &[("N_code", "1".into()), ("top_k", "1".into())],
    ));
    grid
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Final eval accuracy per seed; `None` when the run failed.
    pub accuracies: Vec<Option<f64>>,
}

impl AblationRow {
    fn ok(&self) -> Vec<f64> {
        self.accuracies.iter().flatten().copied().collect()
    }

    pub fn mean(&self) -> Option<f64> {
        let a = self.ok();
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }

    /// Sample standard deviation; zero for a single run.
    pub fn sd(&self) -> Option<f64> {
        let a = self.ok();
        let m = self.mean()?;
        if a.len() < 2 {
            return Some(0.0);
        }
        Some((a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt())
    }
}

/// Runs every setting for every seed under `out_dir/<setting>/seed<s>`,
/// keeping going past failed runs, and writes `ablation.csv`.
pub fn run_ablation_suite(
    base: &RunConfig,
    grid: &[AblationSetting],
    seeds: &[u64],
    out_dir: &Path,
    mut on_run: impl FnMut(&str, u64, &Result<TrainReport>),
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(grid.len());
    for setting in grid {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let result = setting.apply(base).and_then(|mut c| {
                c.seed = seed;
                let dir = out_dir.join(sanitize(&setting.name)).join(format!("seed{seed}"));
                train(&c, &dir, |_| {})
            });
            on_run(&setting.name, seed, &result);
            accuracies.push(result.ok().map(|r| r.final_record().accuracy));
        }
        rows.push(AblationRow { name: setting.name.clone(), seeds: seeds.to_vec(), accuracies });
    }
    fs::write(out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    let mut s = String::from("setting,runs,mean,sd,accuracies\n");
    for r in rows {
        let per_seed: Vec<String> = r.accuracies.iter().map(|&a| fmt(a)).collect();
        s.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            r.name,
            r.ok().len(),
            fmt(r.mean()),
            fmt(r.sd()),
            per_seed.join(";")
        ));
    }
    s
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '=' || c == '_' { c } else { '-' }).collect()
}
