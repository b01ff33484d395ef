//! The staged adapter training driver.
//!
//! Stage 1 reconstructs unpaired references at low resolution, stage 2
//! generates a different view of the reference character from its caption,
//! and stage 3 mixes both at high resolution. Only `adapter_trainable`
//! parameters are optimized; the frozen partition is compared bitwise after
//! every stage.
//!
//! Every random draw of global step `n` comes from the stream
//! `train/step/{n}` (and `train/mix/{n}` for the stage-3 subset draw), and
//! stage 1 and 2 visit their subset in per-epoch shuffles keyed by
//! `shuffle/{stage}/{epoch}`. A resumed run therefore replays exactly the
//! steps an uninterrupted run would take.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{save_checkpoint, CheckpointArchive};
use crate::config::StageConfig;
use crate::dataset::{null_caption, render, CharacterSpec, DatasetManifest, Record, Split, Subset, SUPPORTED_RESOLUTIONS};
use crate::dit::{gaussian, interpolate_batch, Injection};
use crate::encoders::ReferenceFeatures;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optimizer::{AdamW, Moments};
use crate::params::{ParamStore, Partition};
use crate::pipeline::InstantCharacter;
use crate::rng::seeded_rng;
use crate::tensor::{Float, Tensor};

/// Environment variable naming a directory for cached raw renders.
pub const CACHE_ENV: &str = "ICHAR_CACHE";

/// Rendered images and encoder features, memoized per `(spec, resolution)`.
/// Renders are additionally persisted as raw little-endian `f32` files when
/// a cache directory is configured.
#[derive(Debug, Default)]
pub struct DataCache<F> {
    dir: Option<PathBuf>,
    images: HashMap<(String, usize), ImageTensor>,
    features: HashMap<(String, usize), ReferenceFeatures<F>>,
}

impl<F: Float> DataCache<F> {
    pub fn new(dir: Option<PathBuf>) -> Self {
        DataCache { dir, images: HashMap::new(), features: HashMap::new() }
    }

    /// Uses `$ICHAR_CACHE` when set.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }

    pub fn image(&mut self, spec: &CharacterSpec, resolution: usize) -> Result<ImageTensor> {
        let key = (spec.key(), resolution);
        if let Some(img) = self.images.get(&key) {
            return Ok(img.clone());
        }
        let img = match &self.dir {
            Some(dir) => load_or_render(dir, spec, resolution)?,
            None => render(spec, resolution)?,
        };
        self.images.insert(key, img.clone());
        Ok(img)
    }

    /// Stacked reference features for `specs`, each rendered at `resolution`.
    pub fn features(
        &mut self,
        model: &InstantCharacter<F>,
        specs: &[CharacterSpec],
        resolution: usize,
    ) -> Result<ReferenceFeatures<F>> {
        let missing: Vec<CharacterSpec> = {
            let mut seen = std::collections::HashSet::new();
            specs
                .iter()
                .filter(|s| !self.features.contains_key(&(s.key(), resolution)) && seen.insert(s.key()))
                .copied()
                .collect()
        };
        if !missing.is_empty() {
            let images = missing.iter().map(|s| self.image(s, resolution)).collect::<Result<Vec<_>>>()?;
            let feats = model.reference_features(&images)?;
            for (i, s) in missing.iter().enumerate() {
                self.features.insert((s.key(), resolution), feats.sample(i));
            }
        }
        let items: Vec<&ReferenceFeatures<F>> = specs.iter().map(|s| &self.features[&(s.key(), resolution)]).collect();
        Ok(ReferenceFeatures::stack(&items))
    }
}

fn load_or_render(dir: &Path, spec: &CharacterSpec, resolution: usize) -> Result<ImageTensor> {
    let path = dir.join(format!("{}_{resolution}.f32", spec.key()));
    let n = resolution * resolution * 3;
    if let Ok(bytes) = std::fs::read(&path) {
        if bytes.len() == n * 4 {
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if let Ok(img) = ImageTensor::new(resolution, resolution, data) {
                return Ok(img);
            }
        }
    }
    let img = render(spec, resolution)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(img)
}

/// One training example: the reference view that conditions the adapter and
/// the target view whose caption is the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub sample_id: String,
    pub reference: CharacterSpec,
    pub target: CharacterSpec,
    pub caption: Vec<u32>,
    pub paired: bool,
}

impl From<&Record> for TrainSample {
    fn from(r: &Record) -> Self {
        TrainSample {
            sample_id: r.sample_id.clone(),
            reference: r.reference_spec(),
            target: r.target_spec(),
            caption: r.caption.clone(),
            paired: r.subset == Subset::Paired,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub paired_flag: bool,
}

/// Optimizer moments and progress counters. Parameters live in the model.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub optimizer: AdamW<F>,
    pub global_step: u64,
    /// Stage currently running (or last finished).
    pub stage: u8,
    /// Steps completed within `stage`.
    pub stage_step: usize,
    pub completed: Vec<u8>,
}

const STATE_FIRST: &str = "state/first/";
const STATE_SECOND: &str = "state/second/";

impl<F: Float> TrainState<F> {
    pub fn new(model: &InstantCharacter<F>) -> Self {
        TrainState { optimizer: AdamW::new(&model.config.optimizer), global_step: 0, stage: 0, stage_step: 0, completed: Vec::new() }
    }

    /// Model parameters plus optimizer moments (under `state/`) and counters.
    pub fn to_archive(&self, model: &InstantCharacter<F>) -> CheckpointArchive {
        let mut a = model.to_archive();
        for (name, m) in &self.optimizer.moments {
            a.insert(format!("{STATE_FIRST}{name}"), &m.first, Partition::AdapterTrainable);
            a.insert(format!("{STATE_SECOND}{name}"), &m.second, Partition::AdapterTrainable);
        }
        let attrs = &mut a.attributes;
        attrs.insert("train.global_step".into(), self.global_step.to_string());
        attrs.insert("train.optimizer_step".into(), self.optimizer.step.to_string());
        attrs.insert("train.stage".into(), self.stage.to_string());
        attrs.insert("train.stage_step".into(), self.stage_step.to_string());
        let done: Vec<String> = self.completed.iter().map(|s| s.to_string()).collect();
        attrs.insert("train.completed".into(), done.join(","));
        a
    }

    /// Restores the counters and moments written by [`TrainState::to_archive`];
    /// an archive without training attributes yields a fresh state.
    pub fn from_archive(model: &InstantCharacter<F>, archive: &CheckpointArchive) -> Result<Self> {
        let mut state = Self::new(model);
        let attr = |k: &str| archive.attributes.get(k);
        let parse = |k: &str| -> Result<Option<u64>> {
            attr(k).map(|v| v.parse::<u64>().map_err(|e| Error::Config(format!("attribute {k}: {e}")))).transpose()
        };
        state.global_step = parse("train.global_step")?.unwrap_or(0);
        state.optimizer.step = parse("train.optimizer_step")?.unwrap_or(0);
        state.stage = parse("train.stage")?.unwrap_or(0) as u8;
        state.stage_step = parse("train.stage_step")?.unwrap_or(0) as usize;
        if let Some(done) = attr("train.completed") {
            state.completed = done
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u8>().map_err(|e| Error::Config(format!("train.completed: {e}"))))
                .collect::<Result<_>>()?;
        }
        for (name, _) in archive.entries.iter().filter(|(n, _)| n.starts_with(STATE_FIRST)) {
            let param = &name[STATE_FIRST.len()..];
            let first = archive.tensor(name)?;
            let second = archive.tensor(&format!("{STATE_SECOND}{param}"))?;
            state.optimizer.moments.insert(param.to_string(), Moments { first, second });
        }
        Ok(state)
    }
}

/// Outcome of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub stage: u8,
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

/// Owns the model, its training state and the data caches.
pub struct Trainer<F: Float> {
    pub model: InstantCharacter<F>,
    pub state: TrainState<F>,
    pub cache: DataCache<F>,
    pub out_dir: Option<PathBuf>,
    pub log: Vec<MetricRecord>,
    pub warnings: Vec<String>,
    metrics: Option<BufWriter<File>>,
}

/// Draws of one training step, exposed for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws<F> {
    pub t: Vec<F>,
    pub keep_character: Vec<bool>,
    pub keep_text: Vec<bool>,
}

impl<F: Float> Trainer<F> {
    pub fn new(model: InstantCharacter<F>, state: TrainState<F>, cache: DataCache<F>) -> Self {
        Trainer { model, state, cache, out_dir: None, log: Vec::new(), warnings: Vec::new(), metrics: None }
    }

    /// Writes stage checkpoints and `metrics.jsonl` under `dir`.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        self.metrics = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn seed(&self) -> u64 {
        self.model.config.seed
    }

    /// One optimizer update on `batch`. Returns the loss before the update.
    pub fn training_step(&mut self, batch: &[TrainSample], stage: &StageConfig) -> Result<f64> {
        let (loss, _) = self.step_inner(batch, stage, stage.learning_rate)?;
        Ok(loss)
    }

    fn step_inner(&mut self, batch: &[TrainSample], stage: &StageConfig, lr: f64) -> Result<(f64, StepDraws<F>)> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty training batch".into()));
        }
        let res = stage.resolution;
        let mut rng = seeded_rng(self.seed(), &format!("train/step/{}", self.state.global_step));
        let mut draws = StepDraws { t: Vec::new(), keep_character: Vec::new(), keep_text: Vec::new() };
        for _ in batch {
            draws.t.push(F::lit(rng.random::<f64>()));
            draws.keep_character.push(rng.random::<f64>() >= stage.drop_character_prob);
            draws.keep_text.push(rng.random::<f64>() >= stage.drop_text_prob);
        }
        let dit = &self.model.dit;
        let targets = batch.iter().map(|s| self.cache.image(&s.target, res)).collect::<Result<Vec<_>>>()?;
        let x0: Tensor<F> = dit.patchify_batch(&targets.iter().collect::<Vec<_>>());
        let eps: Tensor<F> = gaussian(&x0.shape, &mut rng);
        let (x_t, v_target) = interpolate_batch(&x0, &eps, &draws.t)?;
        let mut text = Vec::new();
        for (s, keep) in batch.iter().zip(&draws.keep_text) {
            let ids = if *keep { s.caption.clone() } else { null_caption() };
            text.extend(ids.into_iter().map(|i| i as usize));
        }
        let any_context = draws.keep_character.iter().any(|k| *k);
        let feats = if any_context {
            let refs: Vec<CharacterSpec> = batch.iter().map(|s| s.reference).collect();
            Some(self.cache.features(&self.model, &refs, res)?)
        } else {
            None
        };
        let gains: Vec<F> = draws.keep_character.iter().map(|k| if *k { F::one() } else { F::zero() }).collect();
        let trainable = self.model.trainable_ids();
        let (loss, grads) = {
            let mut g = Graph::with_trainable(&self.model.store, &trainable);
            let injection = match &feats {
                Some(f) => {
                    let ctx = self.model.adapter.forward_graph(&mut g, f, &draws.t);
                    Some(Injection { context: ctx, gains: &gains })
                }
                None => None,
            };
            let xv = g.input(x_t);
            let pred = self.model.dit.forward_graph(&mut g, xv, &draws.t, &text, injection);
            let loss = g.mse(pred, &v_target);
            let value = g.value(loss).data[0].to_f64().unwrap_or(f64::NAN);
            (value, g.backward(loss))
        };
        if !loss.is_finite() || grads.grads.iter().any(|(_, t)| !t.is_finite()) {
            let ids: Vec<&str> = batch.iter().map(|s| s.sample_id.as_str()).collect();
            let ts: Vec<f64> = draws.t.iter().map(|t| t.to_f64().unwrap_or(f64::NAN)).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {} (t = {ts:?}, samples {ids:?})",
                self.state.global_step
            )));
        }
        self.state.optimizer.update(&mut self.model.store, &grads, lr);
        self.state.global_step += 1;
        Ok((loss, draws))
    }

    fn record(&mut self, rec: MetricRecord) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.out_dir.as_ref()) {
            let path = dir.join("metrics.jsonl");
            let line = serde_json::to_string(&rec).expect("metric record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn frozen_snapshot(&self) -> ParamStore<F> {
        self.model.store.clone()
    }

    fn check_frozen(&self, before: &ParamStore<F>) -> Result<()> {
        for ((_, a), (_, b)) in before.iter().zip(self.model.store.iter()) {
            if a.partition == Partition::BaseFrozen && !a.tensor.bit_eq(&b.tensor) {
                return Err(Error::Numerical(format!("frozen parameter {} changed during training", a.name)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.state.to_archive(&self.model), path)?;
        Ok(())
    }

    /// Runs (or resumes) one stage to completion.
    pub fn run_stage(&mut self, cfg: &StageConfig, manifest: &DatasetManifest) -> Result<StageReport> {
        let mc = &self.model.config;
        cfg.validate(mc.toy_low_resolution, mc.toy_high_resolution)?;
        if !SUPPORTED_RESOLUTIONS.contains(&cfg.resolution) {
            return Err(Error::Config(format!("stage {} resolution {} cannot be rendered", cfg.stage, cfg.resolution)));
        }
        let pool = |subset| -> Vec<TrainSample> {
            manifest.subset(subset, Split::Train).into_iter().map(TrainSample::from).collect()
        };
        let paired = pool(Subset::Paired);
        let unpaired = pool(Subset::Unpaired);
        let p_paired = cfg.paired_probability();
        if p_paired > 0.0 && paired.is_empty() {
            return Err(Error::Dataset(format!("stage {} needs paired training records", cfg.stage)));
        }
        if p_paired < 1.0 && unpaired.is_empty() {
            return Err(Error::Dataset(format!("stage {} needs unpaired training records", cfg.stage)));
        }
        let mut report = StageReport { stage: cfg.stage, ..Default::default() };
        if cfg.stage == 3 && !self.state.completed.contains(&1) {
            let w = "stage 3 started on a state that never completed stage 1".to_string();
            report.warnings.push(w.clone());
            self.warnings.push(w);
        }
        if self.state.stage != cfg.stage {
            self.state.stage = cfg.stage;
            self.state.stage_step = 0;
        }
        let before = self.frozen_snapshot();
        let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
        while self.state.stage_step < cfg.steps {
            let step_in_stage = self.state.stage_step;
            let (use_paired, batch) = if cfg.stage == 3 {
                let mut rng = seeded_rng(self.seed(), &format!("train/mix/{}", self.state.global_step));
                let use_paired = rng.random::<f64>() < p_paired;
                let src = if use_paired { &paired } else { &unpaired };
                let batch: Vec<TrainSample> =
                    (0..cfg.batch_size).map(|_| src[rng.random_range(0..src.len())].clone()).collect();
                (use_paired, batch)
            } else {
                let src = if cfg.stage == 2 { &paired } else { &unpaired };
                let n = src.len();
                let batch: Vec<TrainSample> = (0..cfg.batch_size)
                    .map(|i| {
                        let pos = step_in_stage * cfg.batch_size + i;
                        let epoch = pos / n;
                        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                            let mut perm: Vec<usize> = (0..n).collect();
                            perm.shuffle(&mut seeded_rng(self.seed(), &format!("shuffle/{}/{epoch}", cfg.stage)));
                            epoch_cache = Some((epoch, perm));
                        }
                        src[epoch_cache.as_ref().unwrap().1[pos % n]].clone()
                    })
                    .collect();
                (cfg.stage == 2, batch)
            };
            let step = self.state.global_step;
            let loss = self.training_step(&batch, cfg)?;
            self.state.stage_step += 1;
            report.losses.push(loss);
            self.record(MetricRecord { step, stage: cfg.stage, loss, lr: cfg.learning_rate, paired_flag: use_paired })?;
        }
        self.check_frozen(&before)?;
        if !self.state.completed.contains(&cfg.stage) {
            self.state.completed.push(cfg.stage);
        }
        if let Some(w) = self.metrics.as_mut() {
            w.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        if let Some(dir) = self.out_dir.clone() {
            let path = dir.join(format!("stage{}.icpt", cfg.stage));
            self.save(&path)?;
            report.checkpoint = Some(path);
        }
        Ok(report)
    }

    /// Runs every configured stage in order, skipping stages a resumed state
    /// has already completed, and writes `final.icpt`.
    pub fn run_curriculum(&mut self, manifest: &DatasetManifest) -> Result<Vec<StageReport>> {
        let stages = self.model.config.stages.clone();
        let ids: Vec<u8> = stages.iter().map(|s| s.stage).collect();
        if ids != [1, 2, 3] {
            return Err(Error::Config(format!("curriculum stages must be ordered 1, 2, 3; got {ids:?}")));
        }
        let mut reports = Vec::new();
        for stage in &stages {
            if self.state.completed.contains(&stage.stage) {
                continue;
            }
            reports.push(self.run_stage(stage, manifest)?);
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save(&dir.join("final.icpt"))?;
        }
        Ok(reports)
    }
}

/// Empirical fraction of stage-3 steps that draw from the paired subset,
/// using the same draw as [`Trainer::run_stage`].
pub fn stage3_paired_fraction(seed: u64, stage: &StageConfig, first_step: u64, draws: u64) -> f64 {
    let p = stage.paired_probability();
    let hits = (first_step..first_step + draws)
        .filter(|step| seeded_rng(seed, &format!("train/mix/{step}")).random::<f64>() < p)
        .count();
    hits as f64 / draws as f64
}
