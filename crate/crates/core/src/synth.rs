//! Synthetic detection-surrogate data with a controlled source -> target
//! covariate shift.
//!
//! Every sample has a latent `z` drawn around its class mean. Source features
//! are `z + noise`, target features are `A z + t + noise` with `A` orthogonal,
//! and the box is a squashed linear read-out of `z` in both domains. Labels
//! and boxes therefore follow the same function of `z` everywhere; only the
//! feature distribution moves.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Smallest and largest generated box side.
pub const MIN_SIDE: f64 = 0.05;
pub const MAX_SIDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Box as `(cx, cy, w, h)` in normalized image coordinates.
pub type BoxCoords = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub bbox: BoxCoords,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Features of the selected rows as a `rows x dim` matrix.
    pub fn features(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(&self.samples[r].x);
        }
        Tensor::new(vec![rows.len(), self.dim], data).expect("rows have dataset width")
    }

    pub fn all_features(&self) -> Tensor {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.features(&rows)
    }

    pub fn labels(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.samples[r].y).collect()
    }

    pub fn boxes(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * 4);
        for &r in rows {
            data.extend_from_slice(&self.samples[r].bbox);
        }
        Tensor::new(vec![rows.len(), 4], data).expect("4 coords per box")
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.y + 1).max().unwrap_or(0)
    }
}

/// The four splits produced by one call to [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl Splits {
    pub const FILES: [&'static str; 4] = [
        "source_train.csv",
        "source_test.csv",
        "target_train.csv",
        "target_test.csv",
    ];

    fn parts(&self) -> [&Dataset; 4] {
        [
            &self.source_train,
            &self.source_test,
            &self.target_train,
            &self.target_test,
        ]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ds) in Self::FILES.iter().zip(self.parts()) {
            write_dataset(ds, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut parts = Self::FILES
            .iter()
            .map(|name| read_dataset(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || parts.next().expect("four splits");
        Ok(Splits {
            source_train: next(),
            source_test: next(),
            target_train: next(),
            target_test: next(),
        })
    }
}

/// Knobs from which [`ShiftSpec::build`] derives a concrete spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub dim: usize,
    pub classes: usize,
    /// Distance of every class mean from the origin along its own axis.
    pub separation: f64,
    pub latent_scale: f64,
    /// Perturbation size fed to the QR step; 0 keeps `A = I`.
    pub rotation_strength: f64,
    pub translation_scale: f64,
    pub box_gain: f64,
    pub noise_sigma: f64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub construction_seed: u64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            dim: 10,
            classes: 4,
            separation: 4.0,
            latent_scale: 1.0,
            rotation_strength: 0.35,
            translation_scale: 1.0,
            box_gain: 1.0,
            noise_sigma: 0.3,
            train_per_domain: 2000,
            test_per_domain: 1000,
            construction_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub dim: usize,
    pub classes: usize,
    pub class_means: Vec<Vec<f64>>,
    pub latent_scale: f64,
    /// Orthogonal `dim x dim` matrix applied to target latents.
    pub transform: Vec<Vec<f64>>,
    pub translation: Vec<f64>,
    /// `4 x dim` map from latent to pre-squash box parameters.
    pub box_map: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::build(&ShiftParams::default()).expect("default parameters are valid")
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Orthogonal factor of `I + strength * G`, with column signs fixed so that
/// `strength = 0` yields the identity.
fn orthogonal_near_identity(dim: usize, strength: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let m = DMatrix::identity(dim, dim) + g * strength;
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ShiftSpec {
    pub fn build(p: &ShiftParams) -> Result<Self> {
        if p.classes < 2 || p.dim < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes and 2 dimensions, got C={} d={}",
                p.classes, p.dim
            )));
        }
        if p.classes > p.dim {
            return Err(Error::Config(format!(
                "class means are placed on coordinate axes, so C ({}) must not exceed d ({})",
                p.classes, p.dim
            )));
        }
        let mut rng = stream(p.construction_seed, 0);
        let class_means = (0..p.classes)
            .map(|c| {
                let mut m = vec![0.0; p.dim];
                m[c] = p.separation;
                m
            })
            .collect();
        let a = orthogonal_near_identity(p.dim, p.rotation_strength, &mut rng);
        let transform = (0..p.dim).map(|r| (0..p.dim).map(|c| a[(r, c)]).collect()).collect();
        let translation = (0..p.dim).map(|_| p.translation_scale * normal(&mut rng) / (p.dim as f64).sqrt()).collect();
        let box_map = (0..4)
            .map(|_| (0..p.dim).map(|_| p.box_gain * normal(&mut rng) / (p.dim as f64).sqrt()).collect())
            .collect();
        let spec = ShiftSpec {
            dim: p.dim,
            classes: p.classes,
            class_means,
            latent_scale: p.latent_scale,
            transform,
            translation,
            box_map,
            noise_sigma: p.noise_sigma,
            train_per_domain: p.train_per_domain,
            test_per_domain: p.test_per_domain,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same geometry with `A = I` and `t = 0`.
    pub fn without_shift(mut self) -> Self {
        for (r, row) in self.transform.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = if r == c { 1.0 } else { 0.0 };
            }
        }
        self.translation.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.classes < 2 || d < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes and 2 dimensions, got C={} d={d}",
                self.classes
            )));
        }
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.latent_scale >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("scales must be nonnegative".into()));
        }
        let square = |m: &Vec<Vec<f64>>, rows: usize| m.len() == rows && m.iter().all(|r| r.len() == d);
        if self.class_means.len() != self.classes || !square(&self.class_means, self.classes) {
            return Err(Error::Config(format!("class_means must be {} x {d}", self.classes)));
        }
        if !square(&self.transform, d) || self.translation.len() != d {
            return Err(Error::Config(format!("transform must be {d} x {d} and translation length {d}")));
        }
        if !square(&self.box_map, 4) {
            return Err(Error::Config(format!("box_map must be 4 x {d}")));
        }
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| self.transform[k][i] * self.transform[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(Error::Config(format!(
                        "transform is not orthogonal: (A^T A)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                let dist = self.class_means[a]
                    .iter()
                    .zip(&self.class_means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist < 3.0 * self.latent_scale {
                    return Err(Error::Config(format!(
                        "class means {a} and {b} are {dist:.3} apart, below 3x latent scale"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ShiftSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Squashed box for latent `z`.
    pub fn box_of(&self, z: &[f64]) -> BoxCoords {
        let raw: Vec<f64> = self
            .box_map
            .iter()
            .map(|row| row.iter().zip(z).map(|(g, v)| g * v).sum())
            .collect();
        let side = |v: f64| MIN_SIDE + (MAX_SIDE - MIN_SIDE) * sigmoid(v);
        [sigmoid(raw[0]), sigmoid(raw[1]), side(raw[2]), side(raw[3])]
    }

    fn draw(&self, domain: Domain, count: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let d = self.dim;
        let samples = (0..count)
            .map(|i| {
                let y = i % self.classes;
                let z: Vec<f64> = self.class_means[y]
                    .iter()
                    .map(|m| m + self.latent_scale * normal(rng))
                    .collect();
                let shifted: Vec<f64> = match domain {
                    Domain::Source => z.clone(),
                    Domain::Target => (0..d)
                        .map(|r| self.transform[r].iter().zip(&z).map(|(a, v)| a * v).sum::<f64>() + self.translation[r])
                        .collect(),
                };
                let x = shifted.iter().map(|v| v + self.noise_sigma * normal(rng)).collect();
                Sample {
                    x,
                    y,
                    bbox: self.box_of(&z),
                    domain,
                }
            })
            .collect();
        Dataset { dim: d, samples }
    }
}

/// Draws all four splits. Each split uses its own random stream of `seed`.
pub fn generate_dataset(spec: &ShiftSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let mk = |domain, count, id| spec.draw(domain, count, &mut stream(seed, id));
    Ok(Splits {
        source_train: mk(Domain::Source, spec.train_per_domain, 1),
        source_test: mk(Domain::Source, spec.test_per_domain, 2),
        target_train: mk(Domain::Target, spec.train_per_domain, 3),
        target_test: mk(Domain::Target, spec.test_per_domain, 4),
    })
}

pub fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["domain", "y", "b_cx", "b_cy", "b_w", "b_h"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..dim).map(|i| format!("x_{i}")));
    h
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header(ds.dim).join(",")).map_err(io)?;
    let mut line = String::new();
    for s in &ds.samples {
        line.clear();
        line.push_str(s.domain.as_str());
        line.push(',');
        line.push_str(&s.y.to_string());
        for v in s.bbox.iter().chain(&s.x) {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names.len() < 8 {
        return Err(Error::Header {
            path: path.into(),
            message: format!("expected at least 2 feature columns, found {} columns", names.len()),
        });
    }
    let dim = names.len() - 6;
    if names != header(dim) {
        return Err(Error::Header {
            path: path.into(),
            message: format!("expected `{}`, found `{}`", header(dim).join(","), names.join(",")),
        });
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(Error::Header {
                path: path.into(),
                message: format!(
                    "line {line} has {} columns but the header declares {} (d = {dim})",
                    record.len(),
                    names.len()
                ),
            });
        }
        let err = |col: usize, message: String| Error::Parse {
            path: path.into(),
            line,
            column: names[col].clone(),
            message,
        };
        let domain = match &record[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(err(0, format!("unknown domain `{other}`"))),
        };
        let y: usize = record[1]
            .parse()
            .map_err(|e| err(1, format!("bad label `{}`: {e}", &record[1])))?;
        let mut nums = Vec::with_capacity(4 + dim);
        for col in 2..names.len() {
            let v: f64 = record[col]
                .parse()
                .map_err(|e| err(col, format!("bad number `{}`: {e}", &record[col])))?;
            if !v.is_finite() {
                return Err(err(col, format!("non-finite value `{}`", &record[col])));
            }
            nums.push(v);
        }
        for (side, &v) in nums.iter().enumerate().take(4).skip(2) {
            if v <= 0.0 {
                return Err(err(side + 2, format!("box side must be positive, got {v}")));
            }
        }
        samples.push(Sample {
            x: nums[4..].to_vec(),
            y,
            bbox: [nums[0], nums[1], nums[2], nums[3]],
            domain,
        });
    }
    Ok(Dataset { dim, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ShiftParams {
        ShiftParams {
            train_per_domain: 200,
            test_per_domain: 100,
            ..ShiftParams::default()
        }
    }

    #[test]
    fn default_transform_is_orthogonal() {
        let spec = ShiftSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.dim, 10);
        assert_eq!(spec.classes, 4);
        assert_eq!(spec.train_per_domain, 2000);
    }

    #[test]
    fn zero_strength_gives_identity() {
        let spec = ShiftSpec::build(&ShiftParams {
            rotation_strength: 0.0,
            ..small_params()
        })
        .unwrap();
        for (r, row) in spec.transform.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        for p in [
            ShiftParams { classes: 1, ..small_params() },
            ShiftParams { dim: 1, classes: 1, ..small_params() },
        ] {
            assert!(ShiftSpec::build(&p).is_err());
        }
        let mut spec = ShiftSpec::build(&small_params()).unwrap();
        spec.train_per_domain = 0;
        assert!(generate_dataset(&spec, 0).is_err());
        let mut spec = ShiftSpec::build(&small_params()).unwrap();
        spec.transform[0][0] += 1e-3;
        assert!(spec.validate().is_err());
        let mut spec = ShiftSpec::build(&small_params()).unwrap();
        spec.latent_scale = 2.0;
        assert!(spec.validate().is_err(), "means 4*sqrt(2) apart < 3*2");
    }

    #[test]
    fn no_shift_no_noise_gives_equal_class_means() {
        let mut spec = ShiftSpec::build(&small_params()).unwrap().without_shift();
        spec.noise_sigma = 0.0;
        spec.latent_scale = 0.0;
        let splits = generate_dataset(&spec, 11).unwrap();
        for c in 0..spec.classes {
            let mean = |ds: &Dataset| {
                let rows: Vec<&Sample> = ds.samples.iter().filter(|s| s.y == c).collect();
                (0..spec.dim)
                    .map(|k| rows.iter().map(|s| s.x[k]).sum::<f64>() / rows.len() as f64)
                    .collect::<Vec<_>>()
            };
            let (a, b) = (mean(&splits.source_train), mean(&splits.target_train));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec::build(&small_params()).unwrap();
        assert_eq!(generate_dataset(&spec, 5).unwrap(), generate_dataset(&spec, 5).unwrap());
        assert_ne!(
            generate_dataset(&spec, 5).unwrap().source_train,
            generate_dataset(&spec, 6).unwrap().source_train
        );
    }

    #[test]
    fn boxes_respect_ranges() {
        let spec = ShiftSpec::build(&small_params()).unwrap();
        let splits = generate_dataset(&spec, 2).unwrap();
        for s in splits.source_train.samples.iter().chain(&splits.target_test.samples) {
            let [cx, cy, w, h] = s.bbox;
            assert!(cx > 0.0 && cx < 1.0 && cy > 0.0 && cy < 1.0);
            assert!(w > MIN_SIDE && w < MAX_SIDE && h > MIN_SIDE && h < MAX_SIDE);
            for corner in [cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy + h / 2.0] {
                assert!((-0.5..=1.5).contains(&corner));
            }
            assert!(s.y < spec.classes);
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShiftSpec::build(&small_params()).unwrap();
        let splits = generate_dataset(&spec, 9).unwrap();
        splits.write_dir(dir.path()).unwrap();
        assert_eq!(Splits::read_dir(dir.path()).unwrap(), splits);

        let text = std::fs::read_to_string(dir.path().join("source_test.csv")).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();

        // negative width on the third data row (file line 4)
        let mut bad = lines.clone();
        let mut fields: Vec<String> = bad[3].split(',').map(str::to_string).collect();
        fields[4] = "-0.1".into();
        bad[3] = fields.join(",");
        let p = dir.path().join("bad_w.csv");
        std::fs::write(&p, bad.join("\n")).unwrap();
        let err = read_dataset(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, ref column, .. } if column == "b_w"), "{err}");

        // header says d = 10 but the rows carry 9 features
        for l in lines.iter_mut().skip(1) {
            let cut = l.rfind(',').unwrap();
            l.truncate(cut);
        }
        let p = dir.path().join("short.csv");
        std::fs::write(&p, lines.join("\n")).unwrap();
        assert!(matches!(read_dataset(&p).unwrap_err(), Error::Header { .. }));
    }

    #[test]
    fn written_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShiftSpec::build(&small_params()).unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_dataset(&spec, 4).unwrap().write_dir(&a).unwrap();
        generate_dataset(&spec, 4).unwrap().write_dir(&b).unwrap();
        for f in Splits::FILES {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ShiftSpec::default();
        assert_eq!(ShiftSpec::from_json(&spec.to_json()).unwrap(), spec);
    }
}
