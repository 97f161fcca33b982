//! Two-dimensional, two-class problem for looking at where the auxiliary
//! classifiers disagree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synth::{fmt_f64, generate_dataset, ShiftParams, ShiftSpec, Splits};
use crate::trainer::{run_experiment_on, ExperimentConfig, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toy2dConfig {
    pub seed: u64,
    pub iterations: usize,
    pub aux_classifiers: usize,
    /// Grid points per axis.
    pub resolution: usize,
    pub rotation_strength: f64,
    pub samples_per_domain: usize,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Toy2dConfig {
            seed: 0,
            iterations: 1500,
            aux_classifiers: 3,
            resolution: 41,
            rotation_strength: 0.8,
            samples_per_domain: 300,
        }
    }
}

impl Toy2dConfig {
    pub fn shift(&self) -> Result<ShiftSpec> {
        ShiftSpec::build(&ShiftParams {
            dim: 2,
            classes: 2,
            separation: 3.0,
            latent_scale: 0.7,
            rotation_strength: self.rotation_strength,
            translation_scale: 0.5,
            noise_sigma: 0.2,
            train_per_domain: self.samples_per_domain,
            test_per_domain: self.samples_per_domain / 2,
            ..ShiftParams::default()
        })
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            mode: Mode::TiaCls,
            model: ModelConfig {
                input_dim: 2,
                classes: 2,
                trunk_widths: vec![16, 16],
                aux_classifiers: self.aux_classifiers,
                aux_localizers: 0,
                disc_widths: vec![16],
                task_branches: false,
            },
            iterations: self.iterations,
            eval_interval: self.iterations.max(1),
            lr_decay_interval: self.iterations.max(1),
            batch_source: 32,
            batch_target: 32,
            seed: self.seed,
            ..ExperimentConfig::default()
        }
    }
}

/// Class-1 probabilities at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Toy2dPoint {
    pub kind: &'static str,
    pub x: [f64; 2],
    pub label: Option<usize>,
    pub primary: f64,
    pub aux: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Toy2dResult {
    pub model: Model,
    pub splits: Splits,
    pub points: Vec<Toy2dPoint>,
}

fn bounds(splits: &Splits) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in splits.source_test.samples.iter().chain(&splits.target_test.samples) {
        for k in 0..2 {
            lo[k] = lo[k].min(s.x[k]);
            hi[k] = hi[k].max(s.x[k]);
        }
    }
    for k in 0..2 {
        let pad = 0.1 * (hi[k] - lo[k]);
        lo[k] -= pad;
        hi[k] += pad;
    }
    (lo, hi)
}

/// Class-1 probability of the primary and each auxiliary classifier at
/// every row of `x` (`n x 2`).
pub fn decisions(model: &Model, x: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (probs, _) = model.predict(x)?;
    let aux = model.predict_aux(x)?;
    let n = x.shape()[0];
    let primary = (0..n).map(|i| probs.row(i)[1]).collect();
    let aux = (0..n).map(|i| aux.iter().map(|a| a.row(i)[1]).collect()).collect();
    Ok((primary, aux))
}

pub fn run_toy2d(cfg: &Toy2dConfig) -> Result<Toy2dResult> {
    if cfg.resolution < 2 {
        return Err(Error::Config("toy2d resolution must be at least 2".into()));
    }
    let splits = generate_dataset(&cfg.shift()?, cfg.seed)?;
    let model = run_experiment_on(&cfg.experiment(), &splits)?.model;

    let (lo, hi) = bounds(&splits);
    let r = cfg.resolution;
    let step = |k: usize, i: usize| lo[k] + (hi[k] - lo[k]) * i as f64 / (r - 1) as f64;
    let mut rows: Vec<([f64; 2], &'static str, Option<usize>)> = Vec::new();
    for i in 0..r {
        for j in 0..r {
            rows.push(([step(0, j), step(1, i)], "grid", None));
        }
    }
    for (kind, ds) in [("source", &splits.source_test), ("target", &splits.target_test)] {
        rows.extend(ds.samples.iter().map(|s| ([s.x[0], s.x[1]], kind, Some(s.y))));
    }
    let x = Tensor::new(vec![rows.len(), 2], rows.iter().flat_map(|(p, _, _)| *p).collect())?;
    let (primary, aux) = decisions(&model, &x)?;
    let points = rows
        .into_iter()
        .zip(primary)
        .zip(aux)
        .map(|(((x, kind, label), primary), aux)| Toy2dPoint {
            kind,
            x,
            label,
            primary,
            aux,
        })
        .collect();
    Ok(Toy2dResult { model, splits, points })
}

pub fn write_toy2d_csv(result: &Toy2dResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let n_aux = result.model.aux_classifiers.len();
    let mut header: Vec<String> = ["kind", "x0", "x1", "label", "p_primary"].iter().map(|s| s.to_string()).collect();
    header.extend((0..n_aux).map(|j| format!("p_aux_{j}")));
    w.write_record(&header)?;
    for p in &result.points {
        let mut rec = vec![
            p.kind.to_string(),
            fmt_f64(p.x[0]),
            fmt_f64(p.x[1]),
            p.label.map_or(String::new(), |y| y.to_string()),
            fmt_f64(p.primary),
        ];
        rec.extend(p.aux.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_samples() {
        let cfg = Toy2dConfig {
            iterations: 30,
            resolution: 5,
            samples_per_domain: 40,
            ..Toy2dConfig::default()
        };
        let r = run_toy2d(&cfg).unwrap();
        let grid = r.points.iter().filter(|p| p.kind == "grid").count();
        assert_eq!(grid, 25);
        assert_eq!(r.points.len(), 25 + 2 * 20);
        for p in &r.points {
            assert_eq!(p.aux.len(), 3);
            assert!((0.0..=1.0).contains(&p.primary));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        write_toy2d_csv(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("kind,x0,x1,label,p_primary,p_aux_0,p_aux_1,p_aux_2\n"));
        assert_eq!(text.lines().count(), 1 + r.points.len());
    }

    #[test]
    fn rejects_tiny_grid() {
        let cfg = Toy2dConfig {
            resolution: 1,
            ..Toy2dConfig::default()
        };
        assert!(run_toy2d(&cfg).is_err());
    }
}
