//! Randomized gradient verification of every tape op and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_against, Tape, Tensor, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::losses::{self, bank_measure, LossWeights, MeasureKind, Task};
use crate::model::{Linear, Model, ModelConfig};
use crate::trainer::{build_objective, ActiveTerms, SourceBatch, SOURCE_DOMAIN_LABEL};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_INSTANCES: usize = 100;
/// Instances are resampled until every kink (ReLU at 0, a tie in a sort)
/// is at least this far away, so central differences are meaningful.
pub const KINK_MARGIN: f64 = 1e-3;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One randomized problem: parameters, the graph under test, and optionally
/// a reference graph whose finite differences times `factor` the tape
/// gradient must match.
struct Instance {
    params: Vec<Tensor>,
    graph: Builder,
    reference: Option<(Builder, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Op,
    Loss,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub kind: CaseKind,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub step: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Magnitudes in `[lo, hi)` with random signs, keeping clear of kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `x` to a scalar with fixed, non-uniform weights so every output
/// coordinate contributes a distinct amount.
fn probe(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (i as f64 * 0.754_877 + 0.3).sin() + 0.2).collect();
    let w = t.constant(Tensor::new(shape, w)?)?;
    let y = t.mul(x, w)?;
    t.sum(y, None)
}

fn unary(params: Vec<Tensor>, op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Instance {
    Instance {
        params,
        graph: Box::new(move |t, p| {
            let y = op(t, p[0])?;
            probe(t, y)
        }),
        reference: None,
    }
}

fn binary(params: Vec<Tensor>, op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static) -> Instance {
    Instance {
        params,
        graph: Box::new(move |t, p| {
            let y = op(t, p[0], p[1])?;
            probe(t, y)
        }),
        reference: None,
    }
}

fn loss(params: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        params,
        graph: Box::new(f),
        reference: None,
    }
}

/// Smallest distance between two entries of the same column.
fn min_column_gap(t: &Tensor) -> f64 {
    let (rows, cols) = t.dims2().expect("matrix");
    let mut gap = f64::INFINITY;
    for c in 0..cols {
        let mut col: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + c]).collect();
        col.sort_by(f64::total_cmp);
        for w in col.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}

fn matmul_plain(a: &Tensor, w: &Tensor) -> Tensor {
    let (n, k) = a.dims2().expect("matrix");
    let m = w.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * w.data()[p * m + j];
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("shape")
}

fn softmax_plain(x: &Tensor) -> Tensor {
    let (_, c) = x.dims2().expect("matrix");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn swd_margin(outputs: &[Tensor]) -> f64 {
    let dirs = losses::swd_directions(outputs[0].shape()[1], losses::SWD_SEED);
    outputs.iter().map(|o| min_column_gap(&matmul_plain(o, &dirs))).fold(f64::INFINITY, f64::min)
}

fn matrix(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.random_range(1..5), rng.random_range(1..5)]
}

fn softmax_heads(t: &mut Tape, p: &[Var]) -> Result<Vec<Var>> {
    p.iter().map(|&l| t.softmax(l, 1)).collect()
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Instance);
type LossCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Instance>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            binary(vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], |t, a, b| t.matmul(a, b))
        }),
        ("add", |r| {
            let s = matrix(r);
            binary(vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)], |t, a, b| t.add(a, b))
        }),
        ("add_broadcast", |r| {
            let s = matrix(r);
            binary(vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s[1..], -2.0, 2.0)], |t, a, b| t.add(a, b))
        }),
        ("sub", |r| {
            let s = matrix(r);
            binary(vec![uniform(r, &s, -2.0, 2.0), uniform(r, &[1, s[1]], -2.0, 2.0)], |t, a, b| t.sub(a, b))
        }),
        ("mul", |r| {
            let s = matrix(r);
            binary(vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)], |t, a, b| t.mul(a, b))
        }),
        ("mul_broadcast", |r| {
            let s = matrix(r);
            binary(vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s[1..], -2.0, 2.0)], |t, a, b| t.mul(a, b))
        }),
        ("scale", |r| {
            let s = matrix(r);
            let c = r.random_range(-3.0..3.0);
            unary(vec![uniform(r, &s, -2.0, 2.0)], move |t, x| t.scale(x, c))
        }),
        ("add_scalar", |r| {
            let s = matrix(r);
            let c = r.random_range(-3.0..3.0);
            // squared so the shift is visible in the gradient
            unary(vec![uniform(r, &s, -2.0, 2.0)], move |t, x| {
                let y = t.add_scalar(x, c)?;
                t.mul(y, y)
            })
        }),
        ("neg", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -2.0, 2.0)], |t, x| t.neg(x))
        }),
        ("relu", |r| {
            let s = matrix(r);
            unary(vec![away_from_zero(r, &s, 0.05, 2.0)], |t, x| t.relu(x))
        }),
        ("sigmoid", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -4.0, 4.0)], |t, x| t.sigmoid(x))
        }),
        ("exp", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -2.0, 2.0)], |t, x| t.exp(x))
        }),
        ("log", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, 0.1, 3.0)], |t, x| t.log(x, losses::LOG_FLOOR))
        }),
        ("abs", |r| {
            let s = matrix(r);
            unary(vec![away_from_zero(r, &s, 0.05, 2.0)], |t, x| t.abs(x))
        }),
        ("smooth_l1", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -3.0, 3.0)], |t, x| t.smooth_l1(x))
        }),
        ("softmax_rows", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -3.0, 3.0)], |t, x| t.softmax(x, 1))
        }),
        ("softmax_columns", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -3.0, 3.0)], |t, x| t.softmax(x, 0))
        }),
        ("sum_axis", |r| {
            let s = matrix(r);
            let axis = r.random_range(0..2);
            unary(vec![uniform(r, &s, -2.0, 2.0)], move |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y, Some(axis))
            })
        }),
        ("sum_all", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -2.0, 2.0)], |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y, None)
            })
        }),
        ("mean_axis", |r| {
            let s = matrix(r);
            let axis = r.random_range(0..2);
            unary(vec![uniform(r, &s, -2.0, 2.0)], move |t, x| {
                let y = t.mul(x, x)?;
                t.mean(y, Some(axis))
            })
        }),
        ("mean_all", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -2.0, 2.0)], |t, x| {
                let y = t.mul(x, x)?;
                t.mean(y, None)
            })
        }),
        ("l2_norm", |r| {
            let s = matrix(r);
            let axis = r.random_range(0..2);
            unary(vec![away_from_zero(r, &s, 0.2, 2.0)], move |t, x| t.l2_norm(x, axis))
        }),
        ("center", |r| {
            let s = [r.random_range(2..6), r.random_range(1..5)];
            unary(vec![uniform(r, &s, -2.0, 2.0)], |t, x| {
                let c = t.center(x)?;
                t.mul(c, c)
            })
        }),
        ("reshape", |r| {
            let s = matrix(r);
            unary(vec![uniform(r, &s, -2.0, 2.0)], move |t, x| {
                let y = t.reshape(x, vec![s[1], s[0]])?;
                t.mul(y, y)
            })
        }),
        ("stack", |r| {
            let s = matrix(r);
            binary(vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)], |t, a, b| {
                let ab = t.mul(a, b)?;
                t.stack(&[a, ab, b])
            })
        }),
        ("sort_columns", |r| {
            let s = [r.random_range(2..7), r.random_range(1..5)];
            let x = loop {
                let x = uniform(r, &s, -2.0, 2.0);
                if min_column_gap(&x) > KINK_MARGIN {
                    break x;
                }
            };
            unary(vec![x], |t, x| t.sort_columns(x))
        }),
        ("grl", |r| {
            let s = matrix(r);
            let scale = r.random_range(0.1..3.0);
            let x = uniform(r, &s, -2.0, 2.0);
            let body = |t: &mut Tape, x: Var| -> Result<Var> {
                let y = t.mul(x, x)?;
                probe(t, y)
            };
            Instance {
                params: vec![x],
                graph: Box::new(move |t, p| {
                    let g = t.grl(p[0], scale)?;
                    body(t, g)
                }),
                reference: Some((Box::new(move |t, p| body(t, p[0])), -scale)),
            }
        }),
        ("detach", |r| {
            let s = matrix(r);
            let x = uniform(r, &s, -2.0, 2.0);
            // the detached branch contributes a value but no gradient
            Instance {
                params: vec![x],
                graph: Box::new(|t, p| {
                    let d = t.detach(p[0])?;
                    let dd = t.exp(d)?;
                    let live = t.mul(p[0], p[0])?;
                    let y = t.add(dd, live)?;
                    probe(t, y)
                }),
                reference: Some((
                    Box::new(|t, p| {
                        let live = t.mul(p[0], p[0])?;
                        probe(t, live)
                    }),
                    1.0,
                )),
            }
        }),
    ]
}

fn heads(r: &mut ChaCha8Rng, count: usize, batch: usize, width: usize, lo: f64, hi: f64) -> Vec<Tensor> {
    (0..count).map(|_| uniform(r, &[batch, width], lo, hi)).collect()
}

fn measure_case(kind: MeasureKind, task: Task) -> impl Fn(&mut ChaCha8Rng) -> Instance {
    move |r| {
        let count = if kind.is_pairwise() { 2 } else { r.random_range(2..7) };
        let batch = r.random_range(if kind == MeasureKind::Swd { 2 } else { 1 }..5);
        let width = match task {
            Task::Classification => r.random_range(2..6),
            Task::Localization => 4,
        };
        let params = loop {
            let hs = heads(r, count, batch, width, -3.0, 3.0);
            if kind != MeasureKind::Swd {
                break hs;
            }
            let outputs: Vec<Tensor> = match task {
                Task::Classification => hs.iter().map(softmax_plain).collect(),
                Task::Localization => hs.clone(),
            };
            if swd_margin(&outputs) > KINK_MARGIN {
                break hs;
            }
        };
        match task {
            Task::Classification => loss(params, move |t, p| {
                let h = softmax_heads(t, p)?;
                bank_measure(t, kind, task, &h)
            }),
            Task::Localization => loss(params, move |t, p| bank_measure(t, kind, task, p)),
        }
    }
}

/// Smallest |pre-activation| over every ReLU the model applies to `xs`.
fn relu_margin(model: &Model, xs: &[&Tensor]) -> f64 {
    let pre = |x: &Tensor, l: &Linear| {
        let mut z = matmul_plain(x, &l.weight);
        let m = l.bias.len();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += l.bias.data()[i % m];
        }
        z
    };
    let relu = |z: &Tensor| z.map(|v| v.max(0.0));
    let smallest = |z: &Tensor| z.data().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let mut margin = f64::INFINITY;
    for x in xs {
        let mut h = (*x).clone();
        let depth = model.trunk.len();
        for l in &model.trunk[..depth - 1] {
            let z = pre(&h, l);
            margin = margin.min(smallest(&z));
            h = relu(&z);
        }
        let mut branches = vec![(&model.trunk[depth - 1], &model.discriminator)];
        if let (Some(t), Some(d)) = (&model.trunk_loc, &model.discriminator_loc) {
            branches.push((t, d));
        }
        for (last, disc) in branches {
            let z = pre(&h, last);
            margin = margin.min(smallest(&z));
            let mut f = relu(&z);
            for l in &disc[..disc.len() - 1] {
                let z = pre(&f, l);
                margin = margin.min(smallest(&z));
                f = relu(&z);
            }
        }
    }
    margin
}

fn tiny_model_case(r: &mut ChaCha8Rng) -> Instance {
    loop {
        let inst = tiny_model_draw(r);
        if let Some(inst) = inst {
            return inst;
        }
    }
}

fn tiny_model_draw(r: &mut ChaCha8Rng) -> Option<Instance> {
    let task_branches = r.random_bool(0.3);
    let config = ModelConfig {
        input_dim: 3,
        classes: 3,
        trunk_widths: vec![8],
        aux_classifiers: r.random_range(2..4),
        aux_localizers: r.random_range(2..4),
        disc_widths: vec![4],
        task_branches,
    };
    let model = Model::init(&config, r.random()).expect("valid tiny config");
    let bs = r.random_range(2..5);
    let bt = r.random_range(2..5);
    let source = SourceBatch {
        x: uniform(r, &[bs, 3], -2.0, 2.0),
        labels: (0..bs).map(|_| r.random_range(0..3)).collect(),
        boxes: uniform(r, &[bs, 4], 0.05, 0.95),
    };
    let target = uniform(r, &[bt, 3], -2.0, 2.0);
    if relu_margin(&model, &[&source.x, &target]) <= KINK_MARGIN {
        return None;
    }
    let weights = LossWeights {
        lambda_da: r.random_range(0.1..2.0),
        lambda_cls: r.random_range(0.1..2.0),
        lambda_loc: r.random_range(0.1..2.0),
    };
    let terms = ActiveTerms {
        dann: true,
        cls: Some(MeasureKind::SeWeighted),
        loc: Some(MeasureKind::Sd),
    };
    let params = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    Some(loss(params, move |t, p| {
        let vars = model.bind(t, p)?;
        let o = build_objective(t, &model, &vars, &source, &target, terms, &weights, 1.0, true)?;
        Ok(o.total)
    }))
}

fn loss_cases() -> Vec<LossCase> {
    use MeasureKind::*;
    use Task::*;
    vec![
        ("cls_inconsistency", Box::new(measure_case(SeWeighted, Classification))),
        ("loc_inconsistency", Box::new(measure_case(Sd, Localization))),
        (
            "task_da",
            Box::new(|r: &mut ChaCha8Rng| {
                let n = r.random_range(2..6);
                let c = r.random_range(2..5);
                let (bs, bt) = (r.random_range(1..4), r.random_range(1..4));
                let mut params = heads(r, n, bs, c, -3.0, 3.0);
                params.extend(heads(r, n, bt, c, -3.0, 3.0));
                loss(params, move |t, p| {
                    let hs = softmax_heads(t, &p[..n])?;
                    let ht = softmax_heads(t, &p[n..])?;
                    let s = bank_measure(t, SeWeighted, Classification, &hs)?;
                    let g = bank_measure(t, SeWeighted, Classification, &ht)?;
                    losses::task_da(t, s, g)
                })
            }),
        ),
        (
            "domain_bce",
            Box::new(|r: &mut ChaCha8Rng| {
                let b = r.random_range(1..7);
                let labels: Vec<f64> = (0..b).map(|_| if r.random_bool(0.5) { SOURCE_DOMAIN_LABEL } else { 0.0 }).collect();
                loss(vec![uniform(r, &[b, 1], -4.0, 4.0)], move |t, p| {
                    let probs = t.sigmoid(p[0])?;
                    losses::dann_loss(t, probs, &labels)
                })
            }),
        ),
        (
            "cross_entropy",
            Box::new(|r: &mut ChaCha8Rng| {
                let (b, c) = (r.random_range(1..6), r.random_range(2..6));
                let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
                loss(vec![uniform(r, &[b, c], -3.0, 3.0)], move |t, p| {
                    let probs = t.softmax(p[0], 1)?;
                    losses::cross_entropy(t, probs, &labels)
                })
            }),
        ),
        (
            "box_regression",
            Box::new(|r: &mut ChaCha8Rng| {
                let b = r.random_range(1..6);
                let targets = uniform(r, &[b, 4], -1.0, 1.0);
                loss(vec![uniform(r, &[b, 4], -3.0, 3.0)], move |t, p| {
                    losses::smooth_l1_loss(t, p[0], &targets)
                })
            }),
        ),
        ("l1_cls", Box::new(measure_case(L1, Classification))),
        ("l1_loc", Box::new(measure_case(L1, Localization))),
        ("kl_cls", Box::new(measure_case(Kl, Classification))),
        ("swd_cls", Box::new(measure_case(Swd, Classification))),
        ("swd_loc", Box::new(measure_case(Swd, Localization))),
        ("mad_loc", Box::new(measure_case(Mad, Localization))),
        ("variance_loc", Box::new(measure_case(Variance, Localization))),
        ("total_objective", Box::new(tiny_model_case)),
    ]
}

fn run_case(
    name: &'static str,
    kind: CaseKind,
    stream: u64,
    seed: u64,
    instances: usize,
    make: &dyn Fn(&mut ChaCha8Rng) -> Instance,
) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut report = CaseReport {
        name,
        kind,
        instances,
        failures: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..instances {
        let inst = make(&mut rng);
        let r = match &inst.reference {
            Some((reference, factor)) => grad_check_against(
                &inst.graph,
                reference,
                *factor,
                &inst.params,
                DEFAULT_STEP,
                SUITE_TOLERANCE,
            )?,
            None => grad_check_against(&inst.graph, &inst.graph, 1.0, &inst.params, DEFAULT_STEP, SUITE_TOLERANCE)?,
        };
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
        if !r.passed {
            report.failures += 1;
        }
    }
    Ok(report)
}

/// Runs `instances` random problems for every op kind and every loss.
pub fn run_gradient_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for (i, (name, make)) in op_cases().into_iter().enumerate() {
        cases.push(run_case(name, CaseKind::Op, i as u64, seed, instances, &make)?);
    }
    for (i, (name, make)) in loss_cases().into_iter().enumerate() {
        cases.push(run_case(name, CaseKind::Loss, 1000 + i as u64, seed, instances, make.as_ref())?);
    }
    Ok(SuiteReport {
        tolerance: SUITE_TOLERANCE,
        step: DEFAULT_STEP,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_gradient_suite(11, 5).unwrap();
        for c in &report.cases {
            assert!(c.passed(), "{c:?}");
        }
        assert!(report.cases.iter().any(|c| c.name == "total_objective"));
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_gradient_suite(2, 3).unwrap();
        let b = run_gradient_suite(2, 3).unwrap();
        let errs = |r: &SuiteReport| r.cases.iter().map(|c| c.max_rel_error).collect::<Vec<_>>();
        assert_eq!(errs(&a), errs(&b));
    }
}
