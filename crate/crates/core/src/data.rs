//! Datasets on disk and the synthetic multi-scale generator.
//!
//! A dataset directory holds `images.dft` (`[n, size, size, 3]` f32 in
//! [0, 1]), `labels.dft` (`[n]` i64) and `manifest.txt`. The manifest's
//! `train`, `val` and `test` counts cut the samples into contiguous splits
//! in that order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::FeaturePyramid;
use crate::error::{config_err, format_err, shape_err, Result};
use crate::format::Record;
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub const MIN_SIZE: usize = 32;
pub const NOISE_STD: f64 = 0.1;
pub const STRIPE_PERIODS: [usize; 2] = [2, 4];
pub const SHAPES: [&str; 3] = ["disk", "square", "diamond"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub seed: u64,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 256,
            size: 64,
            seed: 0,
            val: 32,
            test: 32,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(config_err!(
                "image size {} is below the minimum of {MIN_SIZE}",
                self.size
            ));
        }
        let textures = STRIPE_PERIODS.len();
        if self.classes == 0
            || self.classes % textures != 0
            || self.classes / textures > SHAPES.len()
        {
            return Err(config_err!(
                "classes must be shapes x textures with up to {} shapes and {textures} textures (2, 4 or 6), got {}",
                SHAPES.len(),
                self.classes
            ));
        }
        if self.val + self.test >= self.samples {
            return Err(config_err!(
                "val {} + test {} leaves no training samples out of {}",
                self.val,
                self.test,
                self.samples
            ));
        }
        Ok(())
    }

    pub fn train(&self) -> usize {
        self.samples - self.val - self.test
    }
}

/// (shape index, stripe period) encoded by a label.
pub fn class_factors(label: usize) -> (usize, usize) {
    let t = STRIPE_PERIODS.len();
    (label / t, STRIPE_PERIODS[label % t])
}

pub fn class_name(label: usize) -> String {
    let (s, p) = class_factors(label);
    format!("{}/period{p}", SHAPES[s])
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        _ => dx.abs() + dy.abs() <= r * 1.3,
    }
}

/// Renders one image, channel-last `[size, size, 3]`.
pub fn render(label: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let (shape, period) = class_factors(label);
    let s = size as f64;
    let jitter = s / 16.0;
    let cx = s / 2.0 + rng.uniform(-jitter, jitter);
    let cy = s / 2.0 + rng.uniform(-jitter, jitter);
    let r = 0.3 * s;
    let phase = rng.below(period);
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let base = if inside(shape, dx, dy, r) {
                let on = (x + phase) % period < period / 2;
                if on {
                    0.95
                } else {
                    0.35
                }
            } else {
                0.1
            };
            for _ in 0..3 {
                let v = (base + NOISE_STD * rng.normal()).clamp(0.0, 1.0);
                out.push(v as f32);
            }
        }
    }
    out
}

/// Generates the images and labels. Sample i has label i mod classes.
pub fn generate(spec: &SyntheticSpec) -> Result<(Tensor<f32>, Vec<usize>)> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut data = Vec::with_capacity(spec.samples * spec.size * spec.size * 3);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let mut r = root.fork(&format!("sample{i}"));
        data.extend(render(label, spec.size, &mut r));
        labels.push(label);
    }
    let images = Tensor::new(&[spec.samples, spec.size, spec.size, 3], data)?;
    Ok((images, labels))
}

pub fn manifest_text(spec: &SyntheticSpec) -> String {
    let mut m = format!(
        "generator=synthetic-stripes\nseed={}\nsize={}\nclasses={}\nsamples={}\ntrain={}\nval={}\ntest={}\n",
        spec.seed,
        spec.size,
        spec.classes,
        spec.samples,
        spec.train(),
        spec.val,
        spec.test
    );
    for c in 0..spec.classes {
        m.push_str(&format!("class{c}={}\n", class_name(c)));
    }
    m
}

/// Writes a synthetic dataset directory.
pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let (images, labels) = generate(spec)?;
    fs::create_dir_all(out)?;
    Record::from_float(&images).save(&out.join("images.dft"))?;
    let labels: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    Record::int(&[labels.len()], labels)?.save(&out.join("labels.dft"))?;
    fs::write(out.join("manifest.txt"), manifest_text(spec))?;
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err!("manifest line {}: expected key=value", i + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Per-sample model inputs.
#[derive(Clone, Debug)]
pub enum Inputs<T> {
    /// `[n, H, H, 3]`
    Images(Tensor<T>),
    /// Each stage `[n, Pᵢ, Pᵢ, Cᵢ]`.
    Pyramid(FeaturePyramid<T>),
}

fn take_rows<T: Float>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(&shape, data).expect("row gather keeps shape consistent")
}

impl<T: Float> Inputs<T> {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Images(t) => t.shape()[0],
            Inputs::Pyramid(p) => p.batch().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, rows: &[usize]) -> Self {
        match self {
            Inputs::Images(t) => Inputs::Images(take_rows(t, rows)),
            Inputs::Pyramid(p) => {
                let mut out = FeaturePyramid::new(p.input_size);
                for i in 0..4 {
                    out.stages[i] = p.stages[i].as_ref().map(|t| take_rows(t, rows));
                }
                Inputs::Pyramid(out)
            }
        }
    }

    pub fn as_input(&self) -> crate::model::Input<'_, T> {
        match self {
            Inputs::Images(t) => crate::model::Input::Images(t),
            Inputs::Pyramid(p) => crate::model::Input::Pyramid(p),
        }
    }

    /// Spatial side H the inputs were made for.
    pub fn input_size(&self) -> usize {
        match self {
            Inputs::Images(t) => t.shape()[1],
            Inputs::Pyramid(p) => p.input_size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub inputs: Inputs<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Float> Dataset<T> {
    pub fn new(inputs: Inputs<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(shape_err!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(format_err!("label {bad} is outside 0..{num_classes}"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    fn range(&self, start: usize, len: usize) -> Self {
        self.subset(&(start..start + len).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
    pub class_names: Vec<String>,
}

/// Loads a dataset directory. With `pyramid`, inputs come from that DFC1
/// container (stage tensors with one row per sample) instead of the images.
pub fn load_dir<T: Float>(dir: &Path, pyramid: Option<&Path>) -> Result<Splits<T>> {
    let manifest = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let get = |k: &str| -> Result<usize> {
        manifest
            .get(k)
            .ok_or_else(|| format_err!("manifest lacks `{k}`"))?
            .parse()
            .map_err(|_| format_err!("manifest `{k}` is not an integer"))
    };
    let classes = get("classes")?;
    let (n_train, n_val, n_test) = (get("train")?, get("val")?, get("test")?);
    let labels: Vec<usize> = Record::load(&dir.join("labels.dft"))?
        .as_ints()
        .ok_or_else(|| format_err!("labels.dft must hold i64 labels"))?
        .iter()
        .map(|&v| usize::try_from(v).map_err(|_| format_err!("negative label {v} in labels.dft")))
        .collect::<Result<_>>()?;
    if n_train + n_val + n_test != labels.len() {
        return Err(format_err!(
            "manifest splits {n_train}+{n_val}+{n_test} do not cover {} labels",
            labels.len()
        ));
    }
    let inputs = match pyramid {
        Some(p) => Inputs::Pyramid(FeaturePyramid::load(p)?),
        None => {
            let images: Tensor<T> = Record::load(&dir.join("images.dft"))?.to_float()?;
            let s = images.shape();
            if s.len() != 4 || s[1] != s[2] || s[3] != 3 {
                return Err(format_err!(
                    "images.dft must be [n, size, size, 3], got {s:?}"
                ));
            }
            Inputs::Images(images)
        }
    };
    let all = Dataset::new(inputs, labels, classes)?;
    let class_names = (0..classes)
        .map(|c| {
            manifest
                .get(&format!("class{c}"))
                .cloned()
                .unwrap_or_else(|| format!("class{c}"))
        })
        .collect();
    Ok(Splits {
        train: all.range(0, n_train),
        val: all.range(n_train, n_val),
        test: all.range(n_train + n_val, n_test),
        class_names,
    })
}
