//! Detection-surrogate network.
//!
//! A shared MLP trunk produces the per-sample feature. The primary classifier
//! and localizer read it directly. Each auxiliary head is evaluated on up to
//! two paths over the same weights: a detached copy of the feature for its
//! supervised loss, and a gradient-reversed copy for the adaptation loss. The
//! domain discriminator also reads the reversed feature.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub trunk_widths: Vec<usize>,
    pub aux_classifiers: usize,
    pub aux_localizers: usize,
    pub disc_widths: Vec<usize>,
    /// Duplicate the last trunk layer into a classification and a
    /// localization branch, each with its own discriminator.
    pub task_branches: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 10,
            classes: 4,
            trunk_widths: vec![64, 64],
            aux_classifiers: 8,
            aux_localizers: 4,
            disc_widths: vec![32],
            task_branches: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.classes < 2 {
            return Err(Error::Config(format!(
                "input_dim and classes must be at least 2 (got {} and {})",
                self.input_dim, self.classes
            )));
        }
        match self.trunk_widths.last() {
            Some(&w) if w >= 8 => {}
            _ => return Err(Error::Config("trunk needs at least one layer with output width >= 8".into())),
        }
        if self.trunk_widths.iter().chain(&self.disc_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.trunk_widths.last().expect("validated")
    }
}

/// The six disjoint parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Trunk,
    PrimaryClassifier,
    PrimaryLocalizer,
    AuxClassifiers,
    AuxLocalizers,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Trunk,
        ParamGroup::PrimaryClassifier,
        ParamGroup::PrimaryLocalizer,
        ParamGroup::AuxClassifiers,
        ParamGroup::AuxLocalizers,
        ParamGroup::Discriminator,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ParamGroup::Trunk => "trunk",
            ParamGroup::PrimaryClassifier => "primary_classifier",
            ParamGroup::PrimaryLocalizer => "primary_localizer",
            ParamGroup::AuxClassifiers => "aux_classifiers",
            ParamGroup::AuxLocalizers => "aux_localizers",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

/// Dense layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = self.weight.shape()[0] as f64;
        let bound = 1.0 / fan_in.sqrt();
        for w in self.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub trunk: Vec<Linear>,
    /// Localization copy of the last trunk layer, present with task branches.
    pub trunk_loc: Option<Linear>,
    pub classifier: Linear,
    pub localizer: Linear,
    pub aux_classifiers: Vec<Linear>,
    pub aux_localizers: Vec<Linear>,
    pub discriminator: Vec<Linear>,
    pub discriminator_loc: Option<Vec<Linear>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every parameter of a [`Model`], mirroring its layout.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub trunk: Vec<LinearVars>,
    pub trunk_loc: Option<LinearVars>,
    pub classifier: LinearVars,
    pub localizer: LinearVars,
    pub aux_classifiers: Vec<LinearVars>,
    pub aux_localizers: Vec<LinearVars>,
    pub discriminator: Vec<LinearVars>,
    pub discriminator_loc: Option<Vec<LinearVars>>,
}

impl ModelVars {
    /// `(group, var)` for every parameter tensor, in [`Model::layers`] order.
    pub fn all(&self) -> Vec<(ParamGroup, Var)> {
        let mut out = Vec::new();
        let mut push = |g: ParamGroup, l: &LinearVars| {
            out.push((g, l.weight));
            out.push((g, l.bias));
        };
        self.trunk.iter().for_each(|l| push(ParamGroup::Trunk, l));
        self.trunk_loc.iter().for_each(|l| push(ParamGroup::Trunk, l));
        push(ParamGroup::PrimaryClassifier, &self.classifier);
        push(ParamGroup::PrimaryLocalizer, &self.localizer);
        self.aux_classifiers.iter().for_each(|l| push(ParamGroup::AuxClassifiers, l));
        self.aux_localizers.iter().for_each(|l| push(ParamGroup::AuxLocalizers, l));
        self.discriminator.iter().for_each(|l| push(ParamGroup::Discriminator, l));
        self.discriminator_loc
            .iter()
            .flatten()
            .for_each(|l| push(ParamGroup::Discriminator, l));
        out
    }

    pub fn group(&self, group: ParamGroup) -> Vec<Var> {
        self.all().into_iter().filter(|(g, _)| *g == group).map(|(_, v)| v).collect()
    }
}

/// Which optional branches a forward pass should build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Paths {
    /// Auxiliary heads on the detached feature (supervised path).
    pub aux_supervised: bool,
    /// Auxiliary heads on the reversed feature (adaptation path).
    pub aux_adapt: bool,
    pub discriminator: bool,
    pub cls_bank: bool,
    pub loc_bank: bool,
    /// Replace gradient reversal and detachment by the identity. Forward
    /// values are unchanged; only used to build reference graphs.
    pub plain: bool,
}

impl Paths {
    pub fn all() -> Self {
        Paths {
            aux_supervised: true,
            aux_adapt: true,
            discriminator: true,
            cls_bank: true,
            loc_bank: true,
            plain: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardBundle {
    pub features: Var,
    /// Localization-branch feature when the model has task branches.
    pub features_loc: Option<Var>,
    pub class_probs: Var,
    pub boxes: Var,
    pub aux_probs_detached: Vec<Var>,
    pub aux_probs_grl: Vec<Var>,
    pub aux_boxes_detached: Vec<Var>,
    pub aux_boxes_grl: Vec<Var>,
    pub domain_probs: Option<Var>,
    pub domain_probs_loc: Option<Var>,
}

fn layer_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mlp_zeros(input: usize, widths: &[usize], output: usize) -> Vec<Linear> {
    let mut dims = vec![input];
    dims.extend_from_slice(widths);
    dims.push(output);
    dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect()
}

impl Model {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let f = config.feature_dim();
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.trunk_widths);
        let trunk = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        let last_in = dims[dims.len() - 2];
        Ok(Model {
            config: config.clone(),
            trunk,
            trunk_loc: config.task_branches.then(|| Linear::zeros(last_in, f)),
            classifier: Linear::zeros(f, config.classes),
            localizer: Linear::zeros(f, 4),
            aux_classifiers: (0..config.aux_classifiers).map(|_| Linear::zeros(f, config.classes)).collect(),
            aux_localizers: (0..config.aux_localizers).map(|_| Linear::zeros(f, 4)).collect(),
            discriminator: mlp_zeros(f, &config.disc_widths, 1),
            discriminator_loc: config.task_branches.then(|| mlp_zeros(f, &config.disc_widths, 1)),
        })
    }

    /// Fan-in scaled uniform weights and zero biases. Every layer draws from
    /// its own stream of `seed`, so adding or removing auxiliary heads never
    /// changes the remaining layers.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        for (i, l) in model.trunk.iter_mut().enumerate() {
            l.init(&mut layer_stream(seed, 100 + i as u64));
        }
        if let Some(l) = &mut model.trunk_loc {
            l.init(&mut layer_stream(seed, 150));
        }
        model.classifier.init(&mut layer_stream(seed, 200));
        model.localizer.init(&mut layer_stream(seed, 300));
        for (i, l) in model.discriminator.iter_mut().enumerate() {
            l.init(&mut layer_stream(seed, 400 + i as u64));
        }
        for (i, l) in model.discriminator_loc.iter_mut().flatten().enumerate() {
            l.init(&mut layer_stream(seed, 500 + i as u64));
        }
        for (i, l) in model.aux_classifiers.iter_mut().enumerate() {
            l.init(&mut layer_stream(seed, 10_000 + i as u64));
        }
        for (i, l) in model.aux_localizers.iter_mut().enumerate() {
            l.init(&mut layer_stream(seed, 20_000 + i as u64));
        }
        Ok(model)
    }

    /// Every layer tagged with its group, in a fixed order.
    pub fn layers(&self) -> Vec<(ParamGroup, &Linear)> {
        let mut out: Vec<(ParamGroup, &Linear)> = Vec::new();
        out.extend(self.trunk.iter().map(|l| (ParamGroup::Trunk, l)));
        out.extend(self.trunk_loc.iter().map(|l| (ParamGroup::Trunk, l)));
        out.push((ParamGroup::PrimaryClassifier, &self.classifier));
        out.push((ParamGroup::PrimaryLocalizer, &self.localizer));
        out.extend(self.aux_classifiers.iter().map(|l| (ParamGroup::AuxClassifiers, l)));
        out.extend(self.aux_localizers.iter().map(|l| (ParamGroup::AuxLocalizers, l)));
        out.extend(self.discriminator.iter().map(|l| (ParamGroup::Discriminator, l)));
        out.extend(self.discriminator_loc.iter().flatten().map(|l| (ParamGroup::Discriminator, l)));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        out.extend(self.trunk.iter_mut());
        out.extend(self.trunk_loc.iter_mut());
        out.push(&mut self.classifier);
        out.push(&mut self.localizer);
        out.extend(self.aux_classifiers.iter_mut());
        out.extend(self.aux_localizers.iter_mut());
        out.extend(self.discriminator.iter_mut());
        out.extend(self.discriminator_loc.iter_mut().flatten());
        out
    }

    /// Parameter tensors in [`ModelVars::all`] order.
    pub fn params(&self) -> Vec<(ParamGroup, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(g, l)| [(g, &l.weight), (g, &l.bias)])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }

    /// Places every parameter on `tape`; `trainable = false` records them as
    /// constants so no gradient bookkeeping happens.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ModelVars> {
        self.build_vars(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Lays out vars already on `tape`, given in [`Model::params`] order.
    pub fn bind(&self, tape: &Tape, flat: &[Var]) -> Result<ModelVars> {
        let expected = self.params().len();
        if flat.len() != expected {
            return Err(Error::invalid(format!("expected {expected} parameter vars, got {}", flat.len())));
        }
        let mut it = flat.iter();
        self.build_vars(|t| {
            let v = *it.next().expect("length checked");
            if tape.shape(v) != t.shape() {
                return Err(Error::Shape {
                    op: "bind",
                    lhs: tape.shape(v).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(v)
        })
    }

    fn build_vars(&self, mut next: impl FnMut(&Tensor) -> Result<Var>) -> Result<ModelVars> {
        let mut reg = |l: &Linear| -> Result<LinearVars> {
            Ok(LinearVars {
                weight: next(&l.weight)?,
                bias: next(&l.bias)?,
            })
        };
        Ok(ModelVars {
            trunk: self.trunk.iter().map(&mut reg).collect::<Result<_>>()?,
            trunk_loc: self.trunk_loc.as_ref().map(&mut reg).transpose()?,
            classifier: reg(&self.classifier)?,
            localizer: reg(&self.localizer)?,
            aux_classifiers: self.aux_classifiers.iter().map(&mut reg).collect::<Result<_>>()?,
            aux_localizers: self.aux_localizers.iter().map(&mut reg).collect::<Result<_>>()?,
            discriminator: self.discriminator.iter().map(&mut reg).collect::<Result<_>>()?,
            discriminator_loc: self
                .discriminator_loc
                .as_ref()
                .map(|d| d.iter().map(&mut reg).collect::<Result<Vec<_>>>())
                .transpose()?,
        })
    }

    /// Builds the forward graph for a batch `x` (`batch x input_dim`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        paths: Paths,
        grl_scale: f64,
    ) -> Result<ForwardBundle> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim || shape[0] == 0 {
            return Err(Error::Shape {
                op: "forward",
                lhs: shape,
                rhs: vec![0, self.config.input_dim],
            });
        }

        let depth = vars.trunk.len();
        let mut h = x;
        for (i, l) in vars.trunk[..depth - 1].iter().enumerate() {
            h = dense(tape, h, l, &format!("trunk.{i}"))?;
            h = relu(tape, h, &format!("trunk.{i}"))?;
        }
        let pre_split = h;
        let last = format!("trunk.{}", depth - 1);
        let features = dense(tape, pre_split, &vars.trunk[depth - 1], &last)?;
        let features = relu(tape, features, &last)?;
        let features_loc = match &vars.trunk_loc {
            Some(l) => {
                let f = dense(tape, pre_split, l, "trunk_loc")?;
                Some(relu(tape, f, "trunk_loc")?)
            }
            None => None,
        };
        let loc_features = features_loc.unwrap_or(features);

        let logits = dense(tape, features, &vars.classifier, "classifier")?;
        let class_probs = softmax_rows(tape, logits, "classifier")?;
        let boxes = dense(tape, loc_features, &vars.localizer, "localizer")?;

        let mut bundle = ForwardBundle {
            features,
            features_loc,
            class_probs,
            boxes,
            aux_probs_detached: Vec::new(),
            aux_probs_grl: Vec::new(),
            aux_boxes_detached: Vec::new(),
            aux_boxes_grl: Vec::new(),
            domain_probs: None,
            domain_probs_loc: None,
        };

        if paths.aux_supervised {
            let (cls_in, loc_in) = if paths.plain {
                (features, loc_features)
            } else {
                let cls_in = tape.detach(features)?;
                let loc_in = if features_loc.is_some() { tape.detach(loc_features)? } else { cls_in };
                (cls_in, loc_in)
            };
            if paths.cls_bank {
                for (j, l) in vars.aux_classifiers.iter().enumerate() {
                    let name = format!("aux_classifier.{j}");
                    let z = dense(tape, cls_in, l, &name)?;
                    bundle.aux_probs_detached.push(softmax_rows(tape, z, &name)?);
                }
            }
            if paths.loc_bank {
                for (j, l) in vars.aux_localizers.iter().enumerate() {
                    bundle.aux_boxes_detached.push(dense(tape, loc_in, l, &format!("aux_localizer.{j}"))?);
                }
            }
        }

        let needs_grl = paths.aux_adapt || paths.discriminator;
        if needs_grl {
            let (rev, rev_loc) = if paths.plain {
                (features, loc_features)
            } else {
                let rev = tape.grl(features, grl_scale)?;
                let rev_loc = match features_loc {
                    Some(f) => tape.grl(f, grl_scale)?,
                    None => rev,
                };
                (rev, rev_loc)
            };
            if paths.aux_adapt {
                if paths.cls_bank {
                    for (j, l) in vars.aux_classifiers.iter().enumerate() {
                        let name = format!("aux_classifier.{j}");
                        let z = dense(tape, rev, l, &name)?;
                        bundle.aux_probs_grl.push(softmax_rows(tape, z, &name)?);
                    }
                }
                if paths.loc_bank {
                    for (j, l) in vars.aux_localizers.iter().enumerate() {
                        bundle.aux_boxes_grl.push(dense(tape, rev_loc, l, &format!("aux_localizer.{j}"))?);
                    }
                }
            }
            if paths.discriminator {
                bundle.domain_probs = Some(discriminate(tape, rev, &vars.discriminator, "discriminator")?);
                if let Some(d) = &vars.discriminator_loc {
                    bundle.domain_probs_loc = Some(discriminate(tape, rev_loc, d, "discriminator_loc")?);
                }
            }
        }
        Ok(bundle)
    }

    /// Primary class probabilities and boxes, without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let b = self.forward(&mut tape, &vars, xv, Paths::default(), 1.0)?;
        Ok((tape.value(b.class_probs).clone(), tape.value(b.boxes).clone()))
    }

    /// Class probabilities of every auxiliary classifier.
    pub fn predict_aux(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let paths = Paths {
            aux_supervised: true,
            cls_bank: true,
            ..Paths::default()
        };
        let b = self.forward(&mut tape, &vars, xv, paths, 1.0)?;
        Ok(b.aux_probs_detached.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn to_json(&self) -> String {
        let mut parameters = serde_json::Map::new();
        for group in ParamGroup::ALL {
            let arrays: Vec<serde_json::Value> = self
                .params()
                .into_iter()
                .filter(|(g, _)| *g == group)
                .map(|(_, t)| serde_json::Value::from(t.data().to_vec()))
                .collect();
            parameters.insert(group.key().to_string(), arrays.into());
        }
        let doc = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "parameters": parameters,
        });
        serde_json::to_string(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format_version: u32,
            config: ModelConfig,
            parameters: std::collections::BTreeMap<String, Vec<Vec<f64>>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format_version {} is not supported (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let mut model = Model::zeroed(&doc.config)?;
        for key in doc.parameters.keys() {
            if !ParamGroup::ALL.iter().any(|g| g.key() == key) {
                return Err(Error::Schema(format!("unknown parameter group `{key}`")));
            }
        }
        let groups: Vec<ParamGroup> = model.params().iter().map(|(g, _)| *g).collect();
        let mut cursors: std::collections::HashMap<ParamGroup, usize> = Default::default();
        for (group, tensor) in groups.into_iter().zip(model.params_mut()) {
            let arrays = doc
                .parameters
                .get(group.key())
                .ok_or_else(|| Error::Schema(format!("missing parameter group `{}`", group.key())))?;
            let idx = cursors.entry(group).or_insert(0);
            let src = arrays.get(*idx).ok_or_else(|| {
                Error::Schema(format!("parameter group `{}` has too few arrays", group.key()))
            })?;
            if src.len() != tensor.len() {
                return Err(Error::Shape {
                    op: "load_model",
                    lhs: tensor.shape().to_vec(),
                    rhs: vec![src.len()],
                });
            }
            tensor.data_mut().copy_from_slice(src);
            *idx += 1;
        }
        for group in ParamGroup::ALL {
            let have = doc.parameters.get(group.key()).map_or(0, Vec::len);
            if have != cursors.get(&group).copied().unwrap_or(0) {
                return Err(Error::Schema(format!(
                    "parameter group `{}` has {have} arrays, config implies {}",
                    group.key(),
                    cursors.get(&group).copied().unwrap_or(0)
                )));
            }
        }
        if !model.all_finite() {
            return Err(Error::Schema("model contains non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn annotate(e: Error, layer: &str) -> Error {
    match e {
        Error::NonFinite { op, index } => Error::NonFinite {
            op: format!("{layer}/{op}"),
            index,
        },
        other => other,
    }
}

fn dense(tape: &mut Tape, x: Var, l: &LinearVars, name: &str) -> Result<Var> {
    let z = tape.matmul(x, l.weight).map_err(|e| annotate(e, name))?;
    tape.add(z, l.bias).map_err(|e| annotate(e, name))
}

fn relu(tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
    tape.relu(x).map_err(|e| annotate(e, name))
}

fn softmax_rows(tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
    tape.softmax(x, 1).map_err(|e| annotate(e, name))
}

fn discriminate(tape: &mut Tape, x: Var, layers: &[LinearVars], name: &str) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = dense(tape, h, l, &format!("{name}.{i}"))?;
        if i + 1 < layers.len() {
            h = relu(tape, h, &format!("{name}.{i}"))?;
        }
    }
    tape.sigmoid(h).map_err(|e| annotate(e, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = layer_stream(seed, 1);
        Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_heads_differ() {
        let cfg = ModelConfig::default();
        let a = Model::init(&cfg, 3).unwrap();
        assert_eq!(a, Model::init(&cfg, 3).unwrap());
        assert_ne!(a, Model::init(&cfg, 4).unwrap());
        for i in 0..cfg.aux_classifiers {
            for j in i + 1..cfg.aux_classifiers {
                let d = a.aux_classifiers[i].weight.max_abs_diff(&a.aux_classifiers[j].weight);
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn bank_size_does_not_move_other_layers() {
        let cfg = ModelConfig::default();
        let small = ModelConfig {
            aux_classifiers: 0,
            aux_localizers: 0,
            ..cfg.clone()
        };
        let (a, b) = (Model::init(&cfg, 9).unwrap(), Model::init(&small, 9).unwrap());
        assert_eq!(a.trunk, b.trunk);
        assert_eq!(a.classifier, b.classifier);
        assert_eq!(a.discriminator, b.discriminator);
        assert_eq!(a.aux_classifiers[..0], b.aux_classifiers[..]);
    }

    #[test]
    fn rejects_narrow_trunk() {
        let cfg = ModelConfig {
            trunk_widths: vec![64, 4],
            ..ModelConfig::default()
        };
        assert!(Model::init(&cfg, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_identical_aux_paths() {
        let cfg = ModelConfig::default();
        let model = Model::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true).unwrap();
        let x = tape.constant(batch(5, cfg.input_dim, 2)).unwrap();
        let b = model.forward(&mut tape, &vars, x, Paths::all(), 1.0).unwrap();
        assert_eq!(tape.shape(b.class_probs), &[5, 4]);
        assert_eq!(tape.shape(b.boxes), &[5, 4]);
        assert_eq!(b.aux_probs_detached.len(), 8);
        assert_eq!(b.aux_boxes_grl.len(), 4);
        for (d, g) in b.aux_probs_detached.iter().zip(&b.aux_probs_grl) {
            assert_eq!(tape.value(*d), tape.value(*g));
        }
        for (d, g) in b.aux_boxes_detached.iter().zip(&b.aux_boxes_grl) {
            assert_eq!(tape.value(*d), tape.value(*g));
        }
        for p in std::iter::once(&b.class_probs).chain(&b.aux_probs_grl) {
            for row in tape.value(*p).rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let d = tape.value(b.domain_probs.unwrap());
        assert_eq!(d.shape(), &[5, 1]);
    }

    #[test]
    fn single_row_batch() {
        let model = Model::init(&ModelConfig::default(), 1).unwrap();
        let (p, bx) = model.predict(&batch(1, 10, 5)).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(bx.shape(), &[1, 4]);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut model = Model::init(&ModelConfig::default(), 1).unwrap();
        model.classifier = Linear::zeros(64, 4);
        let (p, _) = model.predict(&batch(3, 10, 5)).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = Model::init(&ModelConfig::default(), 1).unwrap();
        assert!(model.predict(&batch(3, 9, 5)).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        for task_branches in [false, true] {
            let cfg = ModelConfig {
                task_branches,
                ..ModelConfig::default()
            };
            let model = Model::init(&cfg, 8).unwrap();
            let back = Model::from_json(&model.to_json()).unwrap();
            assert_eq!(back, model);
            let x = batch(4, 10, 1);
            assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
        }
    }

    #[test]
    fn load_errors() {
        let model = Model::init(&ModelConfig::default(), 8).unwrap();
        let text = model.to_json();
        assert!(matches!(Model::from_json(&text[..text.len() / 2]), Err(Error::Json(_))));

        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["config"]["input_dim"] = 9.into();
        assert!(matches!(Model::from_json(&doc.to_string()), Err(Error::Shape { .. })));

        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["format_version"] = 99.into();
        let err = Model::from_json(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("format_version"));
    }
}
