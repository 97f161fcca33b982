//! Ablation sweeps: measure variants, predictor-count sweeps and dispersion
//! measures, each run over several seeds on one shared dataset.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSummary;
use crate::losses::MeasureKind;
use crate::synth::{fmt_f64, Splits};
use crate::trainer::{run_experiment_on, write_json, ExperimentConfig, Mode};

/// Bank sizes visited by the predictor-count sweeps.
pub const SWEEP_COUNTS: [usize; 6] = [0, 2, 4, 8, 16, 32];

pub const THREADS_ENV: &str = "TIA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Adversarial baselines against pairwise and bank measures.
    Table4,
    /// Classifier-bank and localizer-bank size sweeps.
    Fig5,
    /// Localization dispersion measures with the classification bank off.
    Table6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub table: String,
    pub name: String,
    pub mode: Mode,
    pub aux_classifiers: usize,
    pub aux_localizers: usize,
}

impl AblationCell {
    fn new(table: &str, name: impl Into<String>, mode: Mode, n: usize, m: usize) -> Self {
        AblationCell {
            table: table.into(),
            name: name.into(),
            mode,
            aux_classifiers: n,
            aux_localizers: m,
        }
    }

    pub fn config(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        cfg.seed = seed;
        cfg.model.aux_classifiers = self.aux_classifiers;
        cfg.model.aux_localizers = self.aux_localizers;
        cfg
    }
}

impl Preset {
    pub fn cells(self, base: &ExperimentConfig) -> Vec<AblationCell> {
        let (n, m) = (base.model.aux_classifiers, base.model.aux_localizers);
        let variant = |cls, loc| Mode::MeasureVariant { cls, loc };
        use MeasureKind::*;
        match self {
            Preset::Table4 => vec![
                AblationCell::new("table4", "baseline_dann", Mode::BaselineDann, n, m),
                AblationCell::new("table4", "dann_task", Mode::DannTask, n, m),
                AblationCell::new("table4", "l1_l1", variant(Some(L1), Some(L1)), 2, 2),
                AblationCell::new("table4", "kl_l1", variant(Some(Kl), Some(L1)), 2, 2),
                AblationCell::new("table4", "swd_swd", variant(Some(Swd), Some(Swd)), 2, 2),
                AblationCell::new("table4", "tia_full", Mode::TiaFull, n, m),
            ],
            Preset::Fig5 => {
                let mut cells: Vec<AblationCell> = SWEEP_COUNTS
                    .iter()
                    .map(|&k| AblationCell::new("fig5", format!("n{k}_m0"), Mode::TiaFull, k, 0))
                    .collect();
                cells.extend(
                    SWEEP_COUNTS
                        .iter()
                        .map(|&k| AblationCell::new("fig5", format!("n0_m{k}"), Mode::TiaFull, 0, k)),
                );
                cells
            }
            Preset::Table6 => [Mad, Variance, Sd]
                .into_iter()
                .map(|k| AblationCell::new("table6", k.as_str(), variant(None, Some(k)), 0, m))
                .collect(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub base: ExperimentConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub presets: Vec<Preset>,
    #[serde(default)]
    pub cells: Vec<AblationCell>,
}

impl AblationSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: AblationSpec = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Preset cells in preset order, then the explicit cells.
    pub fn all_cells(&self) -> Vec<AblationCell> {
        let mut cells: Vec<AblationCell> = self.presets.iter().flat_map(|p| p.cells(&self.base)).collect();
        cells.extend(self.cells.iter().cloned());
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let cells = self.all_cells();
        if cells.is_empty() {
            return Err(Error::Config("ablation needs at least one preset or cell".into()));
        }
        for c in &cells {
            c.config(&self.base, self.seeds[0])
                .validate()
                .map_err(|e| Error::Config(format!("cell {}/{}: {e}", c.table, c.name)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeedOutcome {
    Done(EvalSummary),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: AblationCell,
    /// One outcome per seed, in spec order.
    pub runs: Vec<(u64, SeedOutcome)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

const METRICS: [&str; 3] = ["tgt_acc", "tgt_loc_mse", "tgt_mean_iou"];

fn metric(s: &EvalSummary, k: usize) -> f64 {
    [s.accuracy, s.loc_mse, s.mean_iou][k]
}

impl CellResult {
    pub fn status(&self) -> String {
        let failed = self.runs.iter().filter(|(_, o)| matches!(o, SeedOutcome::Failed(_))).count();
        match failed {
            0 => "ok".into(),
            f if f == self.runs.len() => "failed".into(),
            f => format!("partial {}/{}", self.runs.len() - f, self.runs.len()),
        }
    }

    fn done(&self) -> Vec<&EvalSummary> {
        self.runs
            .iter()
            .filter_map(|(_, o)| match o {
                SeedOutcome::Done(s) => Some(s),
                SeedOutcome::Failed(_) => None,
            })
            .collect()
    }

    /// Statistics of one target metric (`tgt_acc`, `tgt_loc_mse` or
    /// `tgt_mean_iou`) over the successful seeds.
    pub fn stats(&self, name: &str) -> Option<MeanStd> {
        let k = METRICS.iter().position(|m| *m == name)?;
        let values: Vec<f64> = self.done().iter().map(|s| metric(s, k)).collect();
        mean_std(&values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<CellResult>,
}

impl AblationTable {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["table", "cell", "mode", "n_aux_cls", "n_aux_loc", "status"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for seed in &self.seeds {
            h.extend(METRICS.iter().map(|m| format!("{m}_s{seed}")));
        }
        for m in METRICS {
            h.push(format!("{m}_mean"));
            h.push(format!("{m}_std"));
        }
        h
    }

    pub fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut rec = vec![
                    r.cell.table.clone(),
                    r.cell.name.clone(),
                    r.cell.mode.label(),
                    r.cell.aux_classifiers.to_string(),
                    r.cell.aux_localizers.to_string(),
                    r.status(),
                ];
                for (_, o) in &r.runs {
                    for k in 0..METRICS.len() {
                        rec.push(match o {
                            SeedOutcome::Done(s) => fmt_f64(metric(s, k)),
                            SeedOutcome::Failed(_) => String::new(),
                        });
                    }
                }
                for m in METRICS {
                    match r.stats(m) {
                        Some(s) => rec.extend([fmt_f64(s.mean), fmt_f64(s.std)]),
                        None => rec.extend([String::new(), String::new()]),
                    }
                }
                rec
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_record(self.header())?;
        for rec in self.records() {
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn find(&self, table: &str, name: &str) -> Option<&CellResult> {
        self.rows.iter().find(|r| r.cell.table == table && r.cell.name == name)
    }
}

/// Worker count from `TIA_THREADS`, defaulting to the available parallelism.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    pub threads: usize,
    /// When set, every (cell, seed) run writes its target summary here.
    pub cell_dir: Option<PathBuf>,
}

fn cell_file(dir: &Path, index: usize, cell: &AblationCell, seed: u64) -> PathBuf {
    dir.join(format!("{index:03}_{}_{}_seed{seed}.json", cell.table, cell.name))
}

/// Runs every cell for every seed. Runs are independent and individually
/// seeded, so the table does not depend on `threads` or on scheduling.
pub fn run_ablation(spec: &AblationSpec, splits: &Splits, options: &AblationOptions) -> Result<AblationTable> {
    spec.validate()?;
    let cells = spec.all_cells();
    if let Some(dir) = &options.cell_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let cfg = cells[c].config(&spec.base, seed);
                let outcome = match run_experiment_on(&cfg, splits) {
                    Ok(r) => SeedOutcome::Done(r.final_eval.target),
                    Err(e) => SeedOutcome::Failed(e.to_string()),
                };
                if let (Some(dir), SeedOutcome::Done(s)) = (&options.cell_dir, &outcome) {
                    if let Err(e) = write_json(&cell_file(dir, c, &cells[c], seed), s) {
                        return SeedOutcome::Failed(e.to_string());
                    }
                }
                outcome
            })
            .collect()
    });
    let mut outcomes = outcomes.into_iter();
    let rows = cells
        .into_iter()
        .map(|cell| CellResult {
            cell,
            runs: spec.seeds.iter().map(|&s| (s, outcomes.next().expect("one per job"))).collect(),
        })
        .collect();
    Ok(AblationTable {
        seeds: spec.seeds.clone(),
        rows,
    })
}

/// Appends a line per failed run to `out` for diagnostics.
pub fn report_failures(table: &AblationTable, out: &mut impl Write) -> std::io::Result<()> {
    for r in &table.rows {
        for (seed, o) in &r.runs {
            if let SeedOutcome::Failed(msg) = o {
                writeln!(out, "cell {}/{} seed {seed} failed: {msg}", r.cell.table, r.cell.name)?;
            }
        }
    }
    Ok(())
}
