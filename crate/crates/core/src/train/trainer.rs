use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::data::{augment, generate_image, AugmentParams, VtbContainer, VtbData, VtbTensor};
use crate::error::{Error, Result};
use crate::losses::{one_hot, segmentation_loss};
use crate::metrics::{evaluate, LabelMask, MetricReport};
use crate::nn::VitbisModel;
use crate::rng::{Purpose, Rng64};
use crate::tensor::Tensor;
use crate::train::config::RunConfig;
use crate::train::optim::{adam_step, AdamState};

/// Floor for the per-image standard deviation.
const MIN_STD: f64 = 1e-8;

/// Rescales a `[C, H, W]` image to zero mean and unit standard deviation
/// over all of its values.
pub fn normalize_image(image: &Tensor) -> Tensor {
    let n = image.numel() as f64;
    let mean = image.sum() / n;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(MIN_STD);
    image.map(|v| (v - mean) / std)
}

/// Per-pixel argmax over the class axis of `[B, J, H, W]` logits; ties go
/// to the lowest class.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<LabelMask>> {
    let d = logits.dims();
    if d.len() != 4 {
        return Err(Error::ShapeMismatch(format!("expected [B, J, H, W] logits, got {d:?}")));
    }
    let (b, j, h, w) = (d[0], d[1], d[2], d[3]);
    let plane = h * w;
    let data = logits.data();
    (0..b)
        .map(|i| {
            let labels = (0..plane)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..j {
                        if data[(i * j + c) * plane + px] > data[(i * j + best) * plane + px] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(h, w, labels)
        })
        .collect()
}

/// Stacks `[C, H, W]` images into `[B, C, H, W]`.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::ShapeMismatch("no images to stack".into()))?;
    let d = first.dims().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.dims() != d.as_slice() {
            return Err(Error::ShapeMismatch(format!("image {:?} vs {d:?}", im.dims())));
        }
        data.extend_from_slice(im.data());
    }
    let mut dims = vec![images.len()];
    dims.extend(d);
    Tensor::new(dims, data)
}

/// Predicted masks for normalized `[C, H, W]` images, `chunk` at a time.
pub fn predict_masks(model: &VitbisModel, images: &[Tensor], chunk: usize) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let logits = model.predict_logits(&stack_images(part)?)?;
        out.extend(argmax_masks(&logits)?);
    }
    Ok(out)
}

/// Normalized images with their masks.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Vec<Tensor>,
    pub masks: Vec<LabelMask>,
}

impl Split {
    fn generate(cfg: &RunConfig, indices: std::ops::Range<usize>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        for i in indices {
            let item = generate_image(&cfg.data, i)?;
            images.push(normalize_image(&item.image));
            masks.push(item.mask);
        }
        Ok(Split { images, masks })
    }

    /// Central `side x side` crop of every image, or the split itself when
    /// it already has that size.
    fn central(&self, side: usize) -> Result<Split> {
        let mut out = Split {
            images: Vec::with_capacity(self.images.len()),
            masks: Vec::with_capacity(self.masks.len()),
        };
        for (im, m) in self.images.iter().zip(&self.masks) {
            let params = AugmentParams {
                crop_top: (m.height - side) / 2,
                crop_left: (m.width - side) / 2,
                ..AugmentParams::identity(side)
            };
            let (i, m) = params.apply(im, m)?;
            out.images.push(i);
            out.masks.push(m);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Holdout,
}

impl SplitKind {
    pub fn label(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Holdout => "holdout",
        }
    }
}

/// Model, optimizer state and loss history of one run.
pub struct Trainer {
    config: RunConfig,
    model: VitbisModel,
    adam: AdamState,
    step: usize,
    trace: Vec<f64>,
    skipped: Vec<usize>,
    train: Split,
    holdout: Split,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = VitbisModel::new(config.model.clone(), config.optim.seed)?;
        let adam = AdamState::new(model.params.tensors());
        let n = config.data.num_images;
        let train = Split::generate(&config, 0..n)?;
        let holdout = Split::generate(&config, n..n + config.holdout_images)?;
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
            trace: Vec::new(),
            skipped: Vec::new(),
            train,
            holdout,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &VitbisModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut VitbisModel {
        &mut self.model
    }

    /// Changes the step budget, e.g. to continue a finished run.
    pub fn set_max_steps(&mut self, max_steps: usize) {
        self.config.optim.max_steps = max_steps;
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Loss of every completed step, in order.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// Steps whose update was skipped for a non-finite gradient.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Holdout => &self.holdout,
        }
    }

    /// Images `[B, 1, s, s]` and one-hot targets `[B, J, s, s]` for `step`.
    /// Depends only on the seed and the step index.
    pub fn batch(&self, step: usize) -> Result<(Tensor, Tensor)> {
        let mut rng = Rng64::for_purpose(self.config.optim.seed, Purpose::Augment, step as u64);
        let n = self.train.images.len();
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.optim.batch_size < n {
            rng.shuffle(&mut order);
            order.truncate(self.config.optim.batch_size);
        }
        let mut images = Vec::with_capacity(order.len());
        let mut labels = Vec::new();
        for &i in &order {
            let (im, m) = match &self.config.augment {
                Some(cfg) => augment(&self.train.images[i], &self.train.masks[i], cfg, &mut rng)?,
                None => (self.train.images[i].clone(), self.train.masks[i].clone()),
            };
            labels.extend_from_slice(&m.labels);
            images.push(im);
        }
        let x = stack_images(&images)?;
        let d = x.dims();
        let targets = one_hot(&labels, d[0], d[2], d[3], self.config.model.num_classes)?;
        Ok((x, targets))
    }

    /// Loss and parameter gradients (store order) on `step`'s batch.
    pub fn loss_and_gradients(&self, step: usize) -> Result<(f64, Vec<Tensor>)> {
        let (x, targets) = self.batch(step)?;
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let xv = g.constant(x);
        let tv = g.constant(targets);
        let logits = self.model.forward(&mut g, &p, xv)?;
        if !g.value(logits).is_finite() {
            return Err(Error::NonFiniteLoss { step, value: f64::NAN });
        }
        let loss = segmentation_loss(&mut g, logits, tv, &self.config.loss)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        let mut grads = g.backward(loss)?;
        Ok((value, p.collect(&mut grads, &self.model.params)))
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let (loss, grads) = self.loss_and_gradients(step)?;
        match adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam, &self.config.optim) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(index)) => {
                let name = index
                    .trim_start_matches('#')
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| self.model.params.iter().nth(i))
                    .map_or(index.clone(), |(n, _)| n.to_string());
                log::warn!("step {step}: non-finite gradient for `{name}`, update skipped");
                self.skipped.push(step);
            }
            Err(e) => return Err(e),
        }
        log::debug!("step {step}: loss {loss:.9}");
        self.trace.push(loss);
        self.step += 1;
        Ok(loss)
    }

    /// Metrics of the current model on one split. With cropping
    /// augmentation the central crop of each image is scored.
    pub fn evaluate(&self, kind: SplitKind) -> Result<MetricReport> {
        let split = self.split(kind);
        if split.images.is_empty() {
            return Err(Error::InvalidSpec(format!("{} split is empty", kind.label())));
        }
        let side = self.config.model.image_height;
        let cropped;
        let split = if split.masks[0].height == side {
            split
        } else {
            cropped = split.central(side)?;
            &cropped
        };
        let pred = predict_masks(&self.model, &split.images, self.config.optim.batch_size)?;
        evaluate(&pred, &split.masks, self.config.model.num_classes)
    }

    /// Parameters, Adam moments and the loss trace as a VTB1 container.
    pub fn checkpoint(&self) -> Result<VtbContainer> {
        let mut c = VtbContainer::new(json!({
            "kind": "checkpoint",
            "step": self.step,
            "adam_t": self.adam.t,
            "skipped_steps": self.skipped,
            "config": self.config,
        }));
        let params = &self.model.params;
        for (i, (name, t)) in params.iter().enumerate() {
            c.push(format!("param/{name}"), VtbTensor::from_tensor(t));
            c.push(format!("adam.m/{name}"), VtbTensor::from_tensor(&self.adam.m[i]));
            c.push(format!("adam.v/{name}"), VtbTensor::from_tensor(&self.adam.v[i]));
        }
        c.push(
            "loss_trace",
            VtbTensor::new(vec![self.trace.len()], VtbData::F64(self.trace.clone()))?,
        );
        Ok(c)
    }

    /// Writes the checkpoint and returns the SHA-256 of the file bytes.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.checkpoint()?.encode()?;
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn from_checkpoint(c: &VtbContainer) -> Result<Self> {
        let bad = |m: &str| Error::CorruptFile(format!("checkpoint: {m}"));
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
            return Err(bad("not a checkpoint"));
        }
        let config: RunConfig = serde_json::from_value(c.meta["config"].clone())?;
        let step = c.meta["step"].as_u64().ok_or_else(|| bad("missing step"))? as usize;
        let t = c.meta["adam_t"].as_u64().ok_or_else(|| bad("missing adam_t"))?;
        let skipped: Vec<usize> = serde_json::from_value(c.meta["skipped_steps"].clone())?;
        let mut trainer = Trainer::new(config)?;
        let fetch = |name: String| -> Result<Tensor> {
            c.get(&name).ok_or_else(|| bad(&format!("missing `{name}`")))?.to_tensor()
        };
        let names: Vec<String> = trainer.model.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut params = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            params.push(fetch(format!("param/{name}"))?);
            trainer.adam.m[i] = fetch(format!("adam.m/{name}"))?;
            trainer.adam.v[i] = fetch(format!("adam.v/{name}"))?;
            if trainer.adam.m[i].dims() != params[i].dims() || trainer.adam.v[i].dims() != params[i].dims() {
                return Err(bad(&format!("moment shapes of `{name}`")));
            }
        }
        trainer
            .model
            .params
            .load(names.iter().map(String::as_str).zip(params.iter()))?;
        let expected = 3 * names.len() + 1;
        if c.tensors.len() != expected {
            return Err(bad(&format!("{} tensors, expected {expected}", c.tensors.len())));
        }
        let trace = fetch("loss_trace".into())?.into_data();
        if trace.len() != step {
            return Err(bad(&format!("{} losses for step {step}", trace.len())));
        }
        trainer.adam.t = t;
        trainer.step = step;
        trainer.trace = trace;
        trainer.skipped = skipped;
        Ok(trainer)
    }

    /// Loads a checkpoint, first checking its SHA-256 when one is given.
    pub fn load_checkpoint(path: impl AsRef<Path>, expected_sha256: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        if let Some(want) = expected_sha256 {
            let got = sha256_hex(&bytes);
            if got != want {
                return Err(Error::CorruptFile(format!(
                    "{}: sha256 {got}, manifest records {want}",
                    path.as_ref().display()
                )));
            }
        }
        Trainer::from_checkpoint(&VtbContainer::decode(&bytes)?)
    }

    /// Trains until `config.optim.max_steps` and, when `out` is given,
    /// writes checkpoints, the loss CSV, metric CSVs and the manifest there.
    /// Checkpoint records of an earlier manifest in `out` are kept up to
    /// the current step, so a resumed run extends its original manifest.
    pub fn fit(&mut self, out: Option<&Path>) -> Result<RunManifest> {
        let mut checkpoints = Vec::new();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            if let Ok(prev) = RunManifest::load(dir) {
                checkpoints.extend(prev.checkpoints.into_iter().filter(|r| r.step <= self.step));
            }
        }
        let every = self.config.checkpoint_every;
        while self.step < self.config.optim.max_steps {
            self.train_step()?;
            if let Some(dir) = out {
                if every > 0 && self.step % every == 0 {
                    checkpoints.push(self.write_checkpoint(dir)?);
                }
            }
        }
        if let Some(dir) = out {
            if checkpoints.last().map(|r| r.step) != Some(self.step) {
                checkpoints.push(self.write_checkpoint(dir)?);
            }
        }
        let mut reports = BTreeMap::new();
        for kind in [SplitKind::Train, SplitKind::Holdout] {
            if !self.split(kind).images.is_empty() {
                reports.insert(kind.label().to_string(), self.evaluate(kind)?);
            }
        }
        let manifest = RunManifest {
            config: self.config.clone(),
            loss_trace: self.trace.clone(),
            skipped_steps: self.skipped.clone(),
            checkpoints,
            reports,
            notes: BTreeMap::new(),
        };
        if let Some(dir) = out {
            manifest.save(dir)?;
        }
        Ok(manifest)
    }

    fn write_checkpoint(&self, dir: &Path) -> Result<CheckpointRecord> {
        let file = checkpoint_file_name(self.step);
        let sha256 = self.save_checkpoint(dir.join(&file))?;
        log::info!("step {}: wrote {file}", self.step);
        Ok(CheckpointRecord {
            step: self.step,
            file,
            sha256,
        })
    }
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt_{step:06}.vtb")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    /// File name relative to the run directory.
    pub file: String,
    pub sha256: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "loss.csv";

/// Record of a run: configuration, loss trace, checkpoints and metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub loss_trace: Vec<f64>,
    pub skipped_steps: Vec<usize>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Keyed by split label.
    pub reports: BTreeMap<String, MetricReport>,
    /// Free-form annotations such as acceptance thresholds.
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    /// `step,loss` with one row per step and 9 decimals.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss_trace.iter().enumerate() {
            s.push_str(&format!("{i},{l:.9}\n"));
        }
        s
    }

    /// Writes `manifest.json`, `loss.csv` and `metrics_<split>.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(LOSS_FILE), self.loss_csv())?;
        for (split, report) in &self.reports {
            std::fs::write(dir.join(format!("metrics_{split}.csv")), report.to_csv())?;
        }
        Ok(())
    }

    /// Reads the manifest in `dir` and re-verifies every checkpoint hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        m.verify(dir)?;
        Ok(m)
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        for r in &self.checkpoints {
            let got = sha256_hex(&std::fs::read(dir.join(&r.file))?);
            if got != r.sha256 {
                return Err(Error::CorruptFile(format!(
                    "{}: sha256 {got}, manifest records {}",
                    r.file, r.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, dir: &Path, step: usize) -> Option<PathBuf> {
        self.checkpoints.iter().find(|r| r.step == step).map(|r| dir.join(&r.file))
    }
}
