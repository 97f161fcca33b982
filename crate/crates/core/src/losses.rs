//! Loss functions.
//!
//! Bank measures operate on the *stacked* output of a predictor bank: an
//! `n_heads x (batch * width)` matrix whose row `j` is head `j`'s flattened
//! `batch x width` output. Reducing over axis 0 therefore reduces over heads
//! independently for every `(sample, coordinate)` pair.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;
/// Number of random directions used by the sliced Wasserstein measure.
pub const SWD_PROJECTIONS: usize = 128;
pub const SWD_SEED: u64 = 0x005E_ED5D;
/// Tolerance on row sums when validating probability inputs.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "cls")]
    Classification,
    #[serde(rename = "loc")]
    Localization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    /// Confidence-weighted entropy of the across-head softmax.
    SeWeighted,
    /// L2 dispersion of the localizers around their mean.
    Sd,
    L1,
    Kl,
    Swd,
    Mad,
    Variance,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 7] = [
        MeasureKind::SeWeighted,
        MeasureKind::Sd,
        MeasureKind::L1,
        MeasureKind::Kl,
        MeasureKind::Swd,
        MeasureKind::Mad,
        MeasureKind::Variance,
    ];

    pub fn supports(self, task: Task) -> bool {
        use MeasureKind::*;
        match self {
            SeWeighted | Kl => task == Task::Classification,
            Sd | Mad | Variance => task == Task::Localization,
            L1 | Swd => true,
        }
    }

    /// Pairwise measures compare exactly two predictors.
    pub fn is_pairwise(self) -> bool {
        matches!(self, MeasureKind::L1 | MeasureKind::Kl | MeasureKind::Swd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MeasureKind::SeWeighted => "se_weighted",
            MeasureKind::Sd => "sd",
            MeasureKind::L1 => "l1",
            MeasureKind::Kl => "kl",
            MeasureKind::Swd => "swd",
            MeasureKind::Mad => "mad",
            MeasureKind::Variance => "variance",
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeasureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown measure `{s}`")))
    }
}

fn stacked_dims(tape: &Tape, m: Var, width: usize, min_rows: usize, what: &str) -> Result<(usize, usize)> {
    let shape = tape.shape(m);
    let (rows, cols) = match shape {
        [r, c] => (*r, *c),
        _ => {
            return Err(Error::Shape {
                op: "bank measure",
                lhs: shape.to_vec(),
                rhs: vec![0, width],
            })
        }
    };
    if rows < min_rows {
        return Err(Error::invalid(format!("{what} needs at least {min_rows} predictors, got {rows}")));
    }
    if width == 0 || cols % width != 0 || cols == 0 {
        return Err(Error::Shape {
            op: "bank measure",
            lhs: shape.to_vec(),
            rhs: vec![rows, width],
        });
    }
    Ok((rows, cols / width))
}

/// Per-sample classification inconsistency of a stacked classifier bank
/// (`N x (batch * classes)`), returned as a `[batch]` vector.
///
/// For every class column `m` (one entry per classifier) the entropy of
/// `softmax(m)` is weighted by the column mean, and the weighted sum is
/// negated.
pub fn cls_inconsistency_stacked(tape: &mut Tape, stacked: Var, classes: usize) -> Result<Var> {
    let (_, batch) = stacked_dims(tape, stacked, classes, 2, "classification inconsistency")?;
    let soft = tape.softmax(stacked, 0)?;
    let log = tape.log(soft, LOG_FLOOR)?;
    let plogp = tape.mul(soft, log)?;
    // sum_j p log p = -entropy
    let neg_entropy = tape.sum(plogp, Some(0))?;
    let confidence = tape.mean(stacked, Some(0))?;
    let weighted = tape.mul(neg_entropy, confidence)?;
    let per_class = tape.reshape(weighted, vec![batch, classes])?;
    tape.sum(per_class, Some(1))
}

/// Per-sample localization inconsistency of a stacked localizer bank
/// (`M x (batch * 4)`): `(1 / (4 sqrt M)) * sum_i ||m_i - mean(m_i)||_2`.
pub fn loc_inconsistency_stacked(tape: &mut Tape, stacked: Var) -> Result<Var> {
    let (heads, batch) = stacked_dims(tape, stacked, 4, 2, "localization inconsistency")?;
    let centered = centered(tape, stacked)?;
    let norms = tape.l2_norm(centered, 0)?;
    let per_coord = tape.reshape(norms, vec![batch, 4])?;
    let summed = tape.sum(per_coord, Some(1))?;
    tape.scale(summed, 1.0 / (4.0 * (heads as f64).sqrt()))
}

fn centered(tape: &mut Tape, stacked: Var) -> Result<Var> {
    tape.center(stacked)
}

/// Mean-absolute-deviation or variance dispersion of a stacked localizer
/// bank, averaged over the four coordinates.
pub fn dispersion_stacked(tape: &mut Tape, stacked: Var, kind: MeasureKind) -> Result<Var> {
    let (_, batch) = stacked_dims(tape, stacked, 4, 2, "dispersion")?;
    let c = centered(tape, stacked)?;
    let dev = match kind {
        MeasureKind::Mad => tape.abs(c)?,
        MeasureKind::Variance => tape.mul(c, c)?,
        MeasureKind::Sd => return loc_inconsistency_stacked(tape, stacked),
        other => return Err(Error::invalid(format!("{other} is not a dispersion measure"))),
    };
    let per_coord = tape.mean(dev, Some(0))?;
    let per_coord = tape.reshape(per_coord, vec![batch, 4])?;
    let summed = tape.sum(per_coord, Some(1))?;
    tape.scale(summed, 0.25)
}

/// Per-sample mean absolute difference of two `batch x width` outputs.
pub fn pair_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d, Some(1))
}

/// Per-sample symmetrized KL divergence `(KL(a||b) + KL(b||a)) / 2`.
pub fn pair_kl(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let la = tape.log(a, LOG_FLOOR)?;
    let lb = tape.log(b, LOG_FLOOR)?;
    let d = tape.sub(a, b)?;
    let dl = tape.sub(la, lb)?;
    let prod = tape.mul(d, dl)?;
    let s = tape.sum(prod, Some(1))?;
    tape.scale(s, 0.5)
}

/// `width x SWD_PROJECTIONS` matrix of seeded random unit directions.
pub fn swd_directions(width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(SWD_PROJECTIONS);
    for _ in 0..SWD_PROJECTIONS {
        let mut v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        cols.push(v);
    }
    let mut data = vec![0.0; width * SWD_PROJECTIONS];
    for (r, col) in cols.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            data[k * SWD_PROJECTIONS + r] = *v;
        }
    }
    Tensor::new(vec![width, SWD_PROJECTIONS], data).expect("shape")
}

/// Batch-level sliced Wasserstein discrepancy between two `batch x width`
/// outputs: mean over projections and sorted positions of the squared gap.
pub fn pair_swd(tape: &mut Tape, a: Var, b: Var, seed: u64) -> Result<Var> {
    let width = match tape.shape(a) {
        [_, w] => *w,
        s => {
            return Err(Error::Shape {
                op: "swd",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let dirs = tape.constant(swd_directions(width, seed))?;
    let pa = tape.matmul(a, dirs)?;
    let pb = tape.matmul(b, dirs)?;
    let sa = tape.sort_columns(pa)?;
    let sb = tape.sort_columns(pb)?;
    let d = tape.sub(sa, sb)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq, None)
}

fn check_distribution_rows(t: &Tensor, what: &str) -> Result<()> {
    for (i, row) in t.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "{what}: row {i} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of a bank measure applied to `heads`
/// (each `batch x width`). Sliced Wasserstein is defined on the whole batch
/// and is returned as is.
pub fn bank_measure(tape: &mut Tape, kind: MeasureKind, task: Task, heads: &[Var]) -> Result<Var> {
    if !kind.supports(task) {
        return Err(Error::invalid(format!("measure {kind} does not apply to {task:?}")));
    }
    if kind.is_pairwise() && heads.len() != 2 {
        return Err(Error::invalid(format!(
            "measure {kind} compares exactly 2 predictors, got {}",
            heads.len()
        )));
    }
    if heads.len() < 2 {
        return Err(Error::invalid(format!("measure {kind} needs at least 2 predictors, got {}", heads.len())));
    }
    let width = match tape.shape(heads[0]) {
        [_, w] => *w,
        s => {
            return Err(Error::Shape {
                op: "bank_measure",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if kind == MeasureKind::Kl {
        for &h in heads {
            check_distribution_rows(tape.value(h), "kl")?;
        }
    }
    let per_sample = match kind {
        MeasureKind::SeWeighted => {
            let s = tape.stack(heads)?;
            cls_inconsistency_stacked(tape, s, width)?
        }
        MeasureKind::Sd => {
            let s = tape.stack(heads)?;
            loc_inconsistency_stacked(tape, s)?
        }
        MeasureKind::Mad | MeasureKind::Variance => {
            let s = tape.stack(heads)?;
            dispersion_stacked(tape, s, kind)?
        }
        MeasureKind::L1 => pair_l1(tape, heads[0], heads[1])?,
        MeasureKind::Kl => pair_kl(tape, heads[0], heads[1])?,
        MeasureKind::Swd => return pair_swd(tape, heads[0], heads[1], SWD_SEED),
    };
    tape.mean(per_sample, None)
}

/// Value of a bank measure on concrete predictor outputs (each
/// `batch x width`).
pub fn measure_value(kind: MeasureKind, task: Task, outputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let heads = outputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let v = bank_measure(&mut tape, kind, task, &heads)?;
    Ok(tape.value(v).item())
}

/// Alternative measures from the ablation: L1, KL, SWD, MAD and variance.
pub fn alt_measure(kind: MeasureKind, task: Task, outputs: &[Tensor]) -> Result<f64> {
    if matches!(kind, MeasureKind::SeWeighted | MeasureKind::Sd) {
        return Err(Error::invalid(format!("{kind} is a primary measure, not an alternative")));
    }
    measure_value(kind, task, outputs)
}

/// Classification inconsistency of one `N x C` probability matrix.
pub fn cls_inconsistency(probs: &Tensor) -> Result<f64> {
    let (n, c) = probs
        .dims2()
        .ok_or_else(|| Error::invalid("expected an N x C matrix"))?;
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 classifiers, got {n}")));
    }
    check_distribution_rows(probs, "cls_inconsistency")?;
    let mut tape = Tape::new();
    let m = tape.constant(probs.clone())?;
    let v = cls_inconsistency_stacked(&mut tape, m, c)?;
    Ok(tape.value(v).item())
}

/// Localization inconsistency of one `M x 4` prediction matrix.
pub fn loc_inconsistency(preds: &Tensor) -> Result<f64> {
    match preds.dims2() {
        Some((m, 4)) if m >= 2 => {}
        Some((m, 4)) => return Err(Error::invalid(format!("need at least 2 localizers, got {m}"))),
        _ => {
            return Err(Error::Shape {
                op: "loc_inconsistency",
                lhs: preds.shape().to_vec(),
                rhs: vec![0, 4],
            })
        }
    }
    if !preds.all_finite() {
        return Err(Error::invalid("non-finite box prediction"));
    }
    let mut tape = Tape::new();
    let m = tape.constant(preds.clone())?;
    let v = loc_inconsistency_stacked(&mut tape, m)?;
    Ok(tape.value(v).item())
}

/// Adaptation objective for one task: `-mean(target) + mean(source)`.
pub fn task_da_loss(source: &[f64], target: &[f64]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("task_da_loss needs nonempty source and target batches"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(-mean(target) + mean(source))
}

/// Tape form of [`task_da_loss`] on batch means (or per-sample vectors).
pub fn task_da(tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
    let s = tape.mean(source, None)?;
    let t = tape.mean(target, None)?;
    tape.sub(s, t)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// `-mean_i log p[i, y_i]`, with the log floored.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape
        .value(probs)
        .dims2()
        .ok_or_else(|| Error::invalid("cross_entropy expects batch x classes"))?;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    let target = tape.constant(one_hot(labels, c)?)?;
    let lp = tape.log(probs, LOG_FLOOR)?;
    let picked = tape.mul(lp, target)?;
    let per_sample = tape.sum(picked, Some(1))?;
    let m = tape.mean(per_sample, None)?;
    tape.neg(m)
}

/// Smooth-L1 (beta = 1) summed over the four coordinates, averaged over the batch.
pub fn smooth_l1_loss(tape: &mut Tape, boxes: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(boxes) != targets.shape() {
        return Err(Error::Shape {
            op: "smooth_l1_loss",
            lhs: tape.shape(boxes).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let t = tape.constant(targets.clone())?;
    let d = tape.sub(boxes, t)?;
    let s = tape.smooth_l1(d)?;
    let per_sample = tape.sum(s, Some(1))?;
    tape.mean(per_sample, None)
}

/// Domain-classification loss: for every domain label present, the mean
/// binary cross-entropy over its rows, summed across domains.
pub fn dann_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.iter().product::<usize>() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "dann_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if labels.iter().any(|&d| d != 0.0 && d != 1.0) {
        return Err(Error::invalid("domain labels must be 0 or 1"));
    }
    let flat = tape.reshape(probs, vec![labels.len()])?;
    let log_p = tape.log(flat, LOG_FLOOR)?;
    let one_minus = tape.neg(flat)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log_q = tape.log(one_minus, LOG_FLOOR)?;

    let mut total: Option<Var> = None;
    for domain in [1.0, 0.0] {
        let count = labels.iter().filter(|&&d| d == domain).count();
        if count == 0 {
            continue;
        }
        // rows of this domain get weight 1/count on the matching log term
        let w: Vec<f64> = labels
            .iter()
            .map(|&d| if d == domain { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let w = tape.constant(Tensor::vector(w))?;
        let term = if domain == 1.0 { log_p } else { log_q };
        let weighted = tape.mul(term, w)?;
        let s = tape.sum(weighted, None)?;
        let s = tape.neg(s)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("labels nonempty"))
}

/// Trade-off weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_da: f64,
    pub lambda_cls: f64,
    pub lambda_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_da: 1.0,
            lambda_cls: 1.0,
            lambda_loc: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_da", self.lambda_da),
            ("lambda_cls", self.lambda_cls),
            ("lambda_loc", self.lambda_loc),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components; absent terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub det: f64,
    pub da: Option<f64>,
    pub cls_da: Option<f64>,
    pub loc_da: Option<f64>,
}

/// `det + λ1 da + λ2 cls_da + λ3 loc_da`, absent terms contributing 0.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let mut total = c.det;
    for (term, lambda) in [(c.da, w.lambda_da), (c.cls_da, w.lambda_cls), (c.loc_da, w.lambda_loc)] {
        if let Some(v) = term {
            total += lambda * v;
        }
    }
    Ok(total)
}

/// Tape form of [`total_loss`].
pub fn total_loss_var(
    tape: &mut Tape,
    det: Var,
    da: Option<Var>,
    cls_da: Option<Var>,
    loc_da: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = det;
    for (term, lambda) in [(da, w.lambda_da), (cls_da, w.lambda_cls), (loc_da, w.lambda_loc)] {
        if let Some(v) = term {
            let s = tape.scale(v, lambda)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn identical_rows_give_minus_ln_n() {
        for n in [2usize, 4, 8, 16] {
            let row = [0.1, 0.6, 0.3];
            let m = Tensor::from_rows(&vec![row; n]).unwrap();
            let v = cls_inconsistency(&m).unwrap();
            assert!((v + (n as f64).ln()).abs() < 1e-9, "N={n}: {v}");
        }
        let m = Tensor::from_rows(&vec![[0.25; 4]; 8]).unwrap();
        assert!((cls_inconsistency(&m).unwrap() - -2.0794415416798357).abs() < 1e-12);
    }

    #[test]
    fn one_hot_pair_matches_scalar_oracle() {
        // softmax(1, 0) = (0.7311, 0.2689); entropy 0.5822...; q = (0.5, 0.5)
        let a = 1f64.exp() / (1f64.exp() + 1.0);
        let h = -(a * a.ln() + (1.0 - a) * (1.0 - a).ln());
        let v = cls_inconsistency(&rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((v - -h).abs() < 1e-12);
        assert!((v - -0.5823).abs() < 1e-3);
    }

    #[test]
    fn cls_inconsistency_rejects_bad_input() {
        assert!(cls_inconsistency(&rows(&[&[0.5, 0.5]])).is_err());
        assert!(cls_inconsistency(&rows(&[&[0.5, 0.6], &[0.5, 0.5]])).is_err());
    }

    #[test]
    fn loc_worked_case() {
        let v = loc_inconsistency(&rows(&[&[1.0, 0.0, 0.0, 0.0], &[-1.0, 0.0, 0.0, 0.0]])).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        let same = rows(&[&[0.3, 0.2, 0.1, 0.4], &[0.3, 0.2, 0.1, 0.4], &[0.3, 0.2, 0.1, 0.4]]);
        assert_eq!(loc_inconsistency(&same).unwrap(), 0.0);
        assert!(loc_inconsistency(&rows(&[&[0.0; 4]])).is_err());
    }

    #[test]
    fn alt_measures_worked_cases() {
        let a = rows(&[&[1.0, 0.0]]);
        let b = rows(&[&[0.0, 1.0]]);
        assert_eq!(alt_measure(MeasureKind::L1, Task::Classification, &[a, b]).unwrap(), 1.0);

        let p = rows(&[&[1.0, 0.0, 0.0, 0.0]]);
        let q = rows(&[&[-1.0, 0.0, 0.0, 0.0]]);
        let v = alt_measure(MeasureKind::Variance, Task::Localization, &[p.clone(), q.clone()]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        let v = alt_measure(MeasureKind::Mad, Task::Localization, &[p, q]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alt_measure_errors() {
        let a = rows(&[&[0.5, 0.5]]);
        let three = vec![a.clone(), a.clone(), a.clone()];
        assert!(alt_measure(MeasureKind::L1, Task::Classification, &three).is_err());
        assert!(alt_measure(MeasureKind::Kl, Task::Classification, &[a.clone(), rows(&[&[0.7, 0.7]])]).is_err());
        assert!(alt_measure(MeasureKind::Kl, Task::Localization, &[a.clone(), a.clone()]).is_err());
        assert!(alt_measure(MeasureKind::Mad, Task::Localization, &[rows(&[&[0.0; 4]])]).is_err());
        assert!(alt_measure(MeasureKind::SeWeighted, Task::Classification, &[a.clone(), a]).is_err());
    }

    #[test]
    fn swd_is_zero_on_identical_and_deterministic() {
        let a = rows(&[&[0.2, 0.8], &[0.6, 0.4], &[0.5, 0.5]]);
        let b = rows(&[&[0.9, 0.1], &[0.3, 0.7], &[0.1, 0.9]]);
        assert_eq!(alt_measure(MeasureKind::Swd, Task::Classification, &[a.clone(), a.clone()]).unwrap(), 0.0);
        let v1 = alt_measure(MeasureKind::Swd, Task::Classification, &[a.clone(), b.clone()]).unwrap();
        let v2 = alt_measure(MeasureKind::Swd, Task::Classification, &[a, b]).unwrap();
        assert!(v1 > 0.0);
        assert_eq!(v1, v2);
    }

    #[test]
    fn task_da_cases() {
        assert_eq!(task_da_loss(&[0.25, 0.75], &[0.5, 0.5]).unwrap(), 0.0);
        assert!(task_da_loss(&[0.2, 0.4], &[0.3, 0.3]).unwrap().abs() < 1e-15);
        assert!((task_da_loss(&[0.1], &[0.4]).unwrap() - -0.3).abs() < 1e-15);
        assert!(task_da_loss(&[], &[0.4]).is_err());
    }

    #[test]
    fn detection_loss_cases() {
        let mut t = Tape::new();
        let p = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let ce = cross_entropy(&mut t, p, &[0, 1]).unwrap();
        assert!(t.value(ce).item().abs() <= 1e-12);
        assert!(cross_entropy(&mut t, p, &[0, 2]).is_err());

        let b = t.constant(rows(&[&[0.5, 0.0, 0.0, 0.0]])).unwrap();
        let l = smooth_l1_loss(&mut t, b, &rows(&[&[0.0; 4]])).unwrap();
        assert_eq!(t.value(l).item(), 0.125);
        let b = t.constant(rows(&[&[0.0, 2.0, 0.0, 0.0]])).unwrap();
        let l = smooth_l1_loss(&mut t, b, &rows(&[&[0.0; 4]])).unwrap();
        assert_eq!(t.value(l).item(), 1.5);
    }

    #[test]
    fn dann_cases() {
        let mut t = Tape::new();
        let half = t.constant(Tensor::full(&[4, 1], 0.5)).unwrap();
        let one_domain = dann_loss(&mut t, half, &[1.0; 4]).unwrap();
        assert!((t.value(one_domain).item() - 2f64.ln()).abs() < 1e-15);
        let both = dann_loss(&mut t, half, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((t.value(both).item() - 2.0 * 2f64.ln()).abs() < 1e-15);

        let fitted = t.constant(Tensor::new(vec![4, 1], vec![0.99, 0.95, 0.02, 0.1]).unwrap()).unwrap();
        let good = dann_loss(&mut t, fitted, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let flipped = dann_loss(&mut t, fitted, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(t.value(good).item() < 0.2);
        assert!(t.value(flipped).item() > t.value(good).item());
    }

    #[test]
    fn total_loss_cases() {
        let ones = LossComponents {
            det: 1.0,
            da: Some(1.0),
            cls_da: Some(1.0),
            loc_da: Some(1.0),
        };
        assert!((total_loss(&ones, &LossWeights::default()).unwrap() - 3.01).abs() < 1e-15);
        let base = LossWeights {
            lambda_cls: 0.0,
            lambda_loc: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&ones, &base).unwrap(), 2.0);
        let src_only = LossComponents { det: 0.7, ..Default::default() };
        assert_eq!(total_loss(&src_only, &LossWeights::default()).unwrap(), 0.7);
        let neg = LossWeights {
            lambda_da: -1.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&ones, &neg).is_err());
    }

    fn prob_matrix(n: usize, c: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(proptest::collection::vec(0.01f64..10.0, c), n).prop_map(|raw| {
            let rows: Vec<Vec<f64>> = raw
                .into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        })
    }

    fn box_matrix() -> impl Strategy<Value = Tensor> {
        (2usize..8).prop_flat_map(|m| {
            proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), m)
                .prop_map(|r| Tensor::from_rows(&r).unwrap())
        })
    }

    proptest! {
        #[test]
        fn cls_bounds(m in (2usize..10, 2usize..6).prop_flat_map(|(n, c)| prob_matrix(n, c))) {
            let n = m.shape()[0] as f64;
            let v = cls_inconsistency(&m).unwrap();
            prop_assert!(v >= -n.ln() - 1e-12 && v <= 0.0);
        }

        #[test]
        fn loc_translation_and_scaling(m in box_matrix(), shift in -5.0f64..5.0, coord in 0usize..4, s in -4.0f64..4.0) {
            let base = loc_inconsistency(&m).unwrap();
            prop_assert!(base >= 0.0);
            let mut moved = m.clone();
            for r in 0..moved.shape()[0] {
                moved.data_mut()[r * 4 + coord] += shift;
            }
            prop_assert!((loc_inconsistency(&moved).unwrap() - base).abs() < 1e-12);
            let scaled = m.map(|v| v * s);
            prop_assert!((loc_inconsistency(&scaled).unwrap() - s.abs() * base).abs() < 1e-12);
        }

        #[test]
        fn task_da_antisymmetric(v in proptest::collection::vec(-2.0f64..2.0, 2..20)) {
            let (s, t) = v.split_at(v.len() / 2);
            let t = &t[..s.len()];
            prop_assert_eq!(task_da_loss(s, t).unwrap(), -task_da_loss(t, s).unwrap());
        }
    }
}
