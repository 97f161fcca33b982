//! Training loop, experiment configuration and metrics logging.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{self, bank_measure, LossWeights, MeasureKind, Task};
use crate::model::{ForwardBundle, Model, ModelConfig, ModelVars, Paths};
use crate::synth::{generate_dataset, Dataset, ShiftParams, ShiftSpec, Splits};

const DEFAULT_CONFIG: &str = include_str!("../configs/default_experiment.json");

/// Domain label of source rows for the discriminator; target rows get 0.
pub const SOURCE_DOMAIN_LABEL: f64 = 1.0;

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    BaselineDann,
    /// Adversarial alignment with one discriminator per task branch.
    DannTask,
    TiaCls,
    TiaLoc,
    TiaFull,
    /// Adversarial alignment plus the given measures on the auxiliary banks;
    /// `None` disables a branch.
    MeasureVariant {
        cls: Option<MeasureKind>,
        loc: Option<MeasureKind>,
    },
}

impl Mode {
    pub fn uses_dann(self) -> bool {
        self != Mode::SourceOnly
    }

    pub fn cls_measure(self) -> Option<MeasureKind> {
        match self {
            Mode::TiaCls | Mode::TiaFull => Some(MeasureKind::SeWeighted),
            Mode::MeasureVariant { cls, .. } => cls,
            _ => None,
        }
    }

    pub fn loc_measure(self) -> Option<MeasureKind> {
        match self {
            Mode::TiaLoc | Mode::TiaFull => Some(MeasureKind::Sd),
            Mode::MeasureVariant { loc, .. } => loc,
            _ => None,
        }
    }

    pub fn label(self) -> String {
        let m = |k: Option<MeasureKind>| k.map_or("none", MeasureKind::as_str);
        match self {
            Mode::SourceOnly => "source_only".into(),
            Mode::BaselineDann => "baseline_dann".into(),
            Mode::DannTask => "dann_task".into(),
            Mode::TiaCls => "tia_cls".into(),
            Mode::TiaLoc => "tia_loc".into(),
            Mode::TiaFull => "tia_full".into(),
            Mode::MeasureVariant { cls, loc } => format!("measure_{}_{}", m(cls), m(loc)),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Learning-rate multiplier applied every `lr_decay_interval` iterations.
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Seeds model initialization and batch sampling.
    pub seed: u64,
    pub grl_scale: f64,
    pub eval_interval: usize,
    /// Directory holding the four split CSVs. When absent the default shift
    /// is generated with `data_seed`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("embedded default config parses")
    }
}

/// Loss branches a configuration actually trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub dann: bool,
    pub cls: Option<MeasureKind>,
    pub loc: Option<MeasureKind>,
}

impl ActiveTerms {
    fn any_bank(&self) -> bool {
        self.cls.is_some() || self.loc.is_some()
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model configuration with the task-branch layout the mode needs.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.task_branches = self.mode == Mode::DannTask;
        m
    }

    pub fn active_terms(&self) -> Result<ActiveTerms> {
        let bank = |kind: Option<MeasureKind>, count: usize, task: Task| -> Result<Option<MeasureKind>> {
            let Some(kind) = kind else { return Ok(None) };
            if count == 0 {
                return Ok(None);
            }
            if !kind.supports(task) {
                return Err(Error::Config(format!("measure {kind} does not apply to the {task:?} bank")));
            }
            if count == 1 {
                return Err(Error::Config(format!(
                    "a {task:?} bank of one predictor has no inconsistency; use 0 or at least 2"
                )));
            }
            if kind.is_pairwise() && count != 2 {
                return Err(Error::Config(format!("measure {kind} needs a bank of exactly 2, got {count}")));
            }
            Ok(Some(kind))
        };
        Ok(ActiveTerms {
            dann: self.mode.uses_dann(),
            cls: bank(self.mode.cls_measure(), self.model.aux_classifiers, Task::Classification)?,
            loc: bank(self.mode.loc_measure(), self.model.aux_localizers, Task::Localization)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.lr_decay > 1.0 {
            return Err(Error::Config(format!("lr_decay must not exceed 1, got {}", self.lr_decay)));
        }
        if !(self.grl_scale.is_finite() && self.grl_scale >= 0.0) {
            return Err(Error::Config(format!("grl_scale must be nonnegative, got {}", self.grl_scale)));
        }
        for (name, v) in [
            ("lr_decay_interval", self.lr_decay_interval),
            ("batch_source", self.batch_source),
            ("batch_target", self.batch_target),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.active_terms()?;
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((iteration / self.lr_decay_interval) as i32)
    }

    /// Reads `data_dir`, or generates the default shift when it is unset.
    pub fn load_data(&self) -> Result<Splits> {
        match &self.data_dir {
            Some(dir) => Splits::read_dir(dir),
            None => generate_dataset(&ShiftSpec::build(&ShiftParams::default())?, self.data_seed),
        }
    }
}

/// Labeled source mini-batch.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub boxes: Tensor,
}

/// Shuffled-epoch index stream over one split.
#[derive(Debug, Clone)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        EpochSampler {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Source data with labels and target features only; target labels never
/// reach the training loop.
pub struct TrainData {
    source: Dataset,
    target_x: Vec<Vec<f64>>,
    dim: usize,
}

impl TrainData {
    pub fn new(source: &Dataset, target: &Dataset) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("training needs nonempty source and target splits"));
        }
        if source.dim != target.dim {
            return Err(Error::invalid(format!(
                "source and target feature widths differ ({} vs {})",
                source.dim, target.dim
            )));
        }
        Ok(TrainData {
            source: source.clone(),
            target_x: target.samples.iter().map(|s| s.x.clone()).collect(),
            dim: source.dim,
        })
    }

    fn source_batch(&self, rows: &[usize]) -> SourceBatch {
        SourceBatch {
            x: self.source.features(rows),
            labels: self.source.labels(rows),
            boxes: self.source.boxes(rows),
        }
    }

    fn target_batch(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(&self.target_x[r]);
        }
        Tensor::new(vec![rows.len(), self.dim], data).expect("rows have dataset width")
    }
}

/// Model, optimizer state and batch streams of one run.
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub iteration: usize,
    source_sampler: EpochSampler,
    target_sampler: EpochSampler,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let model_cfg = config.effective_model();
        if model_cfg.input_dim != data.dim {
            return Err(Error::Config(format!(
                "model input_dim {} does not match the data width {}",
                model_cfg.input_dim, data.dim
            )));
        }
        if let Some(y) = data.source.samples.iter().map(|s| s.y).find(|&y| y >= model_cfg.classes) {
            return Err(Error::Config(format!(
                "source label {y} out of range for {} classes",
                model_cfg.classes
            )));
        }
        let model = Model::init(&model_cfg, config.seed)?;
        let velocity = model.params().iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Ok(TrainState {
            model,
            velocity,
            iteration: 0,
            source_sampler: EpochSampler::new(data.source.len(), config.seed, SOURCE_STREAM),
            target_sampler: EpochSampler::new(data.target_x.len(), config.seed, TARGET_STREAM),
        })
    }

    pub fn next_batches(&mut self, config: &ExperimentConfig, data: &TrainData) -> (SourceBatch, Tensor) {
        let s = self.source_sampler.next(config.batch_source);
        let t = self.target_sampler.next(config.batch_target);
        (data.source_batch(&s), data.target_batch(&t))
    }
}

/// Loss values of one step. Absent terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub iteration: usize,
    pub learning_rate: f64,
    pub loss_det: f64,
    pub loss_da: Option<f64>,
    pub loss_cls_da: Option<f64>,
    pub loss_loc_da: Option<f64>,
    pub total: f64,
    /// Classification-bank measure on the target batch.
    pub tgt_cls_inconsistency: Option<f64>,
    pub src_cls_inconsistency: Option<f64>,
    pub tgt_loc_inconsistency: Option<f64>,
    pub src_loc_inconsistency: Option<f64>,
}

/// Scalar handles of the assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub det: Var,
    pub da: Option<Var>,
    pub cls_da: Option<Var>,
    pub loc_da: Option<Var>,
    pub src_cls: Option<Var>,
    pub tgt_cls: Option<Var>,
    pub src_loc: Option<Var>,
    pub tgt_loc: Option<Var>,
}

fn detection_terms(tape: &mut Tape, f: &ForwardBundle, batch: &SourceBatch) -> Result<Var> {
    let ce = losses::cross_entropy(tape, f.class_probs, &batch.labels)?;
    let reg = losses::smooth_l1_loss(tape, f.boxes, &batch.boxes)?;
    let mut det = tape.add(ce, reg)?;
    for &p in &f.aux_probs_detached {
        let ce = losses::cross_entropy(tape, p, &batch.labels)?;
        det = tape.add(det, ce)?;
    }
    for &b in &f.aux_boxes_detached {
        let reg = losses::smooth_l1_loss(tape, b, &batch.boxes)?;
        det = tape.add(det, reg)?;
    }
    Ok(det)
}

fn domain_terms(tape: &mut Tape, src: Var, tgt: Var) -> Result<Var> {
    let ns = tape.value(src).len();
    let nt = tape.value(tgt).len();
    let s = losses::dann_loss(tape, src, &vec![SOURCE_DOMAIN_LABEL; ns])?;
    let t = losses::dann_loss(tape, tgt, &vec![1.0 - SOURCE_DOMAIN_LABEL; nt])?;
    tape.add(s, t)
}

/// Builds the full objective for one source/target batch pair on `tape`.
///
/// With `plain` set, gradient reversal and detachment are replaced by the
/// identity, which leaves every value unchanged.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    source: &SourceBatch,
    target: &Tensor,
    terms: ActiveTerms,
    weights: &LossWeights,
    grl_scale: f64,
    plain: bool,
) -> Result<ObjectiveVars> {
    let paths = |supervised: bool| Paths {
        aux_supervised: supervised && terms.any_bank(),
        aux_adapt: terms.any_bank(),
        discriminator: terms.dann,
        cls_bank: terms.cls.is_some(),
        loc_bank: terms.loc.is_some(),
        plain,
    };
    let sx = tape.constant(source.x.clone())?;
    let tx = tape.constant(target.clone())?;
    let fs = model.forward(tape, vars, sx, paths(true), grl_scale)?;
    let ft = model.forward(tape, vars, tx, paths(false), grl_scale)?;

    let det = detection_terms(tape, &fs, source)?;
    let da = if terms.dann {
        let mut da = domain_terms(tape, fs.domain_probs.expect("built"), ft.domain_probs.expect("built"))?;
        if let (Some(s), Some(t)) = (fs.domain_probs_loc, ft.domain_probs_loc) {
            let loc = domain_terms(tape, s, t)?;
            da = tape.add(da, loc)?;
        }
        Some(da)
    } else {
        None
    };
    let mut out = ObjectiveVars {
        total: det,
        det,
        da,
        cls_da: None,
        loc_da: None,
        src_cls: None,
        tgt_cls: None,
        src_loc: None,
        tgt_loc: None,
    };
    if let Some(kind) = terms.cls {
        let s = bank_measure(tape, kind, Task::Classification, &fs.aux_probs_grl)?;
        let t = bank_measure(tape, kind, Task::Classification, &ft.aux_probs_grl)?;
        out.src_cls = Some(s);
        out.tgt_cls = Some(t);
        out.cls_da = Some(losses::task_da(tape, s, t)?);
    }
    if let Some(kind) = terms.loc {
        let s = bank_measure(tape, kind, Task::Localization, &fs.aux_boxes_grl)?;
        let t = bank_measure(tape, kind, Task::Localization, &ft.aux_boxes_grl)?;
        out.src_loc = Some(s);
        out.tgt_loc = Some(t);
        out.loc_da = Some(losses::task_da(tape, s, t)?);
    }
    out.total = losses::total_loss_var(tape, det, out.da, out.cls_da, out.loc_da, weights)?;
    Ok(out)
}

fn record_of(tape: &Tape, o: &ObjectiveVars, iteration: usize, learning_rate: f64) -> StepRecord {
    let v = |x: Var| tape.value(x).item();
    StepRecord {
        iteration,
        learning_rate,
        loss_det: v(o.det),
        loss_da: o.da.map(v),
        loss_cls_da: o.cls_da.map(v),
        loss_loc_da: o.loc_da.map(v),
        total: v(o.total),
        tgt_cls_inconsistency: o.tgt_cls.map(v),
        src_cls_inconsistency: o.src_cls.map(v),
        tgt_loc_inconsistency: o.tgt_loc.map(v),
        src_loc_inconsistency: o.src_loc.map(v),
    }
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            iteration,
            detail: e.to_string(),
        },
        other => other,
    }
}

fn components_detail(r: &StepRecord) -> String {
    let f = |v: Option<f64>| v.map_or("absent".to_string(), |x| x.to_string());
    format!(
        "det={} da={} cls_da={} loc_da={} total={}",
        r.loss_det,
        f(r.loss_da),
        f(r.loss_cls_da),
        f(r.loss_loc_da),
        r.total
    )
}

/// Losses at the current parameters on the given batches, without updating.
pub fn evaluate_objective(
    state: &TrainState,
    config: &ExperimentConfig,
    source: &SourceBatch,
    target: &Tensor,
) -> Result<StepRecord> {
    let terms = config.active_terms()?;
    let mut tape = Tape::new();
    let vars = state.model.register(&mut tape, false)?;
    let it = state.iteration;
    let o = build_objective(
        &mut tape,
        &state.model,
        &vars,
        source,
        target,
        terms,
        &config.weights,
        config.grl_scale,
        false,
    )
    .map_err(|e| diverged(it, e))?;
    Ok(record_of(&tape, &o, it, config.learning_rate_at(it)))
}

/// One momentum-SGD update on a source/target batch pair. The returned
/// losses are those at the parameters before the update.
pub fn train_step(
    state: &mut TrainState,
    config: &ExperimentConfig,
    source: &SourceBatch,
    target: &Tensor,
) -> Result<StepRecord> {
    let terms = config.active_terms()?;
    let it = state.iteration;
    let lr = config.learning_rate_at(it);
    let mut tape = Tape::new();
    let vars = state.model.register(&mut tape, true)?;
    let o = build_objective(
        &mut tape,
        &state.model,
        &vars,
        source,
        target,
        terms,
        &config.weights,
        config.grl_scale,
        false,
    )
    .map_err(|e| diverged(it, e))?;
    let record = record_of(&tape, &o, it, lr);
    let grads = tape.backward(o.total).map_err(|e| diverged(it, e))?;

    let handles: Vec<Var> = vars.all().into_iter().map(|(_, v)| v).collect();
    for (k, &h) in handles.iter().enumerate() {
        if !grads.get_ref(h).is_none_or(|g| g.all_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("non-finite gradient in parameter tensor {k}; {}", components_detail(&record)),
            });
        }
    }
    let mu = config.momentum;
    for ((param, vel), &h) in state.model.params_mut().into_iter().zip(&mut state.velocity).zip(&handles) {
        let Some(g) = grads.get_ref(h) else { continue };
        for ((p, v), gv) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
            *v = mu * *v + gv;
            *p -= lr * *v;
        }
    }
    if !state.model.all_finite() {
        return Err(Error::Diverged {
            iteration: it,
            detail: format!("parameters became non-finite; {}", components_detail(&record)),
        });
    }
    state.iteration += 1;
    Ok(record)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: StepRecord,
    pub eval: EvalReport,
}

pub const METRICS_HEADER: [&str; 10] = [
    "iter",
    "loss_det",
    "loss_da",
    "loss_cls_da",
    "loss_loc_da",
    "src_acc",
    "tgt_acc",
    "src_loc_mse",
    "tgt_loc_mse",
    "tgt_mean_iou",
];

impl MetricsRow {
    pub fn csv_fields(&self) -> Vec<String> {
        let f = crate::synth::fmt_f64;
        let s = &self.step;
        vec![
            s.iteration.to_string(),
            f(s.loss_det),
            f(s.loss_da.unwrap_or(0.0)),
            f(s.loss_cls_da.unwrap_or(0.0)),
            f(s.loss_loc_da.unwrap_or(0.0)),
            f(self.eval.source.accuracy),
            f(self.eval.target.accuracy),
            f(self.eval.source.loc_mse),
            f(self.eval.target.loc_mse),
            f(self.eval.target.mean_iou),
        ]
    }
}

/// Streams metrics rows to a CSV file, flushing after every row so a run
/// that aborts leaves the rows logged so far.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        inner.write_record(METRICS_HEADER)?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.csv_fields())?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: Model,
    pub history: Vec<MetricsRow>,
    pub final_eval: EvalReport,
}

fn eval_report(model: &Model, splits: &Splits) -> Result<EvalReport> {
    Ok(EvalReport {
        source: evaluate(model, &splits.source_test)?,
        target: evaluate(model, &splits.target_test)?,
    })
}

/// Trains on `splits`, calling `on_row` for each metrics row as soon as it
/// is available. Rows are logged at iteration 0, every `eval_interval`
/// iterations, and after the last update.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    splits: &Splits,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<ExperimentResult> {
    let data = TrainData::new(&splits.source_train, &splits.target_train)?;
    let mut state = TrainState::new(config, &data)?;
    let mut history = Vec::new();
    for k in 0..config.iterations {
        let (src, tgt) = state.next_batches(config, &data);
        let eval = if k % config.eval_interval == 0 {
            Some(eval_report(&state.model, splits)?)
        } else {
            None
        };
        let step = train_step(&mut state, config, &src, &tgt)?;
        if let Some(eval) = eval {
            let row = MetricsRow { step, eval };
            on_row(&row)?;
            history.push(row);
        }
    }
    let (src, tgt) = state.next_batches(config, &data);
    let step = evaluate_objective(&state, config, &src, &tgt)?;
    let final_eval = eval_report(&state.model, splits)?;
    let row = MetricsRow {
        step,
        eval: final_eval.clone(),
    };
    on_row(&row)?;
    history.push(row);
    Ok(ExperimentResult {
        model: state.model,
        history,
        final_eval,
    })
}

pub fn run_experiment_on(config: &ExperimentConfig, splits: &Splits) -> Result<ExperimentResult> {
    run_experiment_with(config, splits, |_| Ok(()))
}

/// Loads the configured data and trains.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    run_experiment_on(config, &config.load_data()?)
}

/// Trains and writes `metrics.csv`, `model.json` and `eval.json` to `out`.
pub fn run_experiment_to_dir(config: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    let splits = config.load_data()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;
    let result = run_experiment_with(config, &splits, |row| writer.write(row))?;
    result.model.save(&out.join("model.json"))?;
    write_json(&out.join("eval.json"), &result.final_eval)?;
    Ok(result)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            model: ModelConfig {
                input_dim: 10,
                classes: 4,
                trunk_widths: vec![16, 16],
                aux_classifiers: 3,
                aux_localizers: 2,
                disc_widths: vec![8],
                task_branches: false,
            },
            iterations: 20,
            eval_interval: 10,
            batch_source: 8,
            batch_target: 8,
            ..ExperimentConfig::default()
        }
    }

    fn tiny_splits() -> Splits {
        let spec = ShiftSpec::build(&ShiftParams {
            train_per_domain: 64,
            test_per_domain: 32,
            ..ShiftParams::default()
        })
        .unwrap();
        generate_dataset(&spec, 9).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn mode_json_forms() {
        let m: Mode = serde_json::from_str(r#""tia_loc""#).unwrap();
        assert_eq!(m, Mode::TiaLoc);
        let m: Mode = serde_json::from_str(r#"{"measure_variant":{"cls":"kl","loc":null}}"#).unwrap();
        assert_eq!(
            m,
            Mode::MeasureVariant {
                cls: Some(MeasureKind::Kl),
                loc: None
            }
        );
    }

    #[test]
    fn active_terms_per_mode() {
        let t = tiny_config(Mode::SourceOnly).active_terms().unwrap();
        assert!(!t.dann && t.cls.is_none() && t.loc.is_none());
        let t = tiny_config(Mode::TiaCls).active_terms().unwrap();
        assert!(t.dann && t.cls == Some(MeasureKind::SeWeighted) && t.loc.is_none());
        let t = tiny_config(Mode::TiaLoc).active_terms().unwrap();
        assert!(t.cls.is_none() && t.loc == Some(MeasureKind::Sd));
        let mut cfg = tiny_config(Mode::TiaFull);
        cfg.model.aux_classifiers = 0;
        let t = cfg.active_terms().unwrap();
        assert!(t.cls.is_none() && t.loc.is_some());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny_config(Mode::TiaFull);
        cfg.model.aux_classifiers = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_config(Mode::MeasureVariant {
            cls: Some(MeasureKind::L1),
            loc: None,
        });
        assert!(cfg.validate().is_err(), "pairwise measure on a bank of 3");
        cfg.model.aux_classifiers = 2;
        cfg.validate().unwrap();

        let cfg = tiny_config(Mode::MeasureVariant {
            cls: Some(MeasureKind::Sd),
            loc: None,
        });
        assert!(cfg.validate().is_err());

        for edit in [
            |c: &mut ExperimentConfig| c.learning_rate = 0.0,
            |c: &mut ExperimentConfig| c.momentum = 1.0,
            |c: &mut ExperimentConfig| c.batch_target = 0,
            |c: &mut ExperimentConfig| c.weights.lambda_loc = -1.0,
            |c: &mut ExperimentConfig| c.lr_decay = 1.5,
        ] {
            let mut cfg = tiny_config(Mode::TiaFull);
            edit(&mut cfg);
            assert!(cfg.validate().is_err());
        }
        assert!(ExperimentConfig::from_json(r#"{"mode":"tia_full","bogus":1}"#).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        assert_eq!(cfg.learning_rate_at(3499), 0.01);
        assert!((cfg.learning_rate_at(3500) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn sampler_covers_epoch() {
        let mut s = EpochSampler::new(10, 3, 1);
        let mut first: Vec<usize> = s.next(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next(25).len(), 25);
    }

    #[test]
    fn rows_logged_on_schedule() {
        let cfg = tiny_config(Mode::TiaFull);
        let r = run_experiment_on(&cfg, &tiny_splits()).unwrap();
        let iters: Vec<usize> = r.history.iter().map(|m| m.step.iteration).collect();
        assert_eq!(iters, vec![0, 10, 20]);
        let last = &r.history[2].step;
        assert!(last.loss_da.is_some() && last.loss_cls_da.is_some() && last.loss_loc_da.is_some());
    }

    #[test]
    fn absent_components_by_mode() {
        let splits = tiny_splits();
        let r = run_experiment_on(&tiny_config(Mode::SourceOnly), &splits).unwrap();
        let s = &r.history[0].step;
        assert!(s.loss_da.is_none() && s.loss_cls_da.is_none() && s.loss_loc_da.is_none());
        assert_eq!(s.total, s.loss_det);
        let r = run_experiment_on(&tiny_config(Mode::TiaLoc), &splits).unwrap();
        let s = &r.history[0].step;
        assert!(s.loss_cls_da.is_none() && s.loss_loc_da.is_some());
    }

    #[test]
    fn dann_task_uses_branch_discriminators() {
        let cfg = tiny_config(Mode::DannTask);
        let r = run_experiment_on(&cfg, &tiny_splits()).unwrap();
        assert!(r.model.trunk_loc.is_some() && r.model.discriminator_loc.is_some());
        // two discriminators at chance give twice the single-discriminator loss
        assert!(r.history[0].step.loss_da.unwrap() > 2.0 * 2f64.ln() * 1.5);
    }

    #[test]
    fn same_seed_same_run() {
        let splits = tiny_splits();
        let cfg = tiny_config(Mode::TiaFull);
        let a = run_experiment_on(&cfg, &splits).unwrap();
        let b = run_experiment_on(&cfg, &splits).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut cfg = tiny_config(Mode::SourceOnly);
        cfg.learning_rate = 1e300;
        cfg.momentum = 0.0;
        let err = run_experiment_on(&cfg, &tiny_splits()).unwrap_err();
        match err {
            Error::Diverged { iteration, .. } => assert!(iteration < 20),
            other => panic!("expected divergence, got {other}"),
        }
    }
}
