//! Two-stage training: the counter is fit first on count labels with an l1
//! count loss, then frozen while the localizer learns full-resolution density
//! maps conditioned on the counter's coarse output. Both stages use Adam with
//! a cosine warm-restart schedule and produce reproducible run manifests.

pub mod optim;
pub mod schedule;

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counter::{count_loss, Counter, CounterConfig};
use crate::data::{augment, rasterize_density, AugmentOp, DensityMap, ImageSample, Split};
use crate::error::{Error, Result};
use crate::localizer::{condition_inputs, localizer_loss, Localizer, LocalizerConfig};
use crate::nn::ParamStore;
use optim::{Adam, AdamConfig};
use schedule::lr_at_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Counter,
    Localizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Length of the first cosine cycle, in optimizer steps.
    pub restart_period: u64,
    /// Cycle length multiplier at each warm restart.
    pub restart_mult: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 1e-6,
            batch_size: 8,
            epochs: 30,
            restart_period: 200,
            restart_mult: 2.0,
            clip_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub augment: bool,
    /// Gaussian sigma used to rasterize ground-truth density maps.
    pub sigma: f64,
    pub optim: OptimConfig,
    pub counter: CounterConfig,
    pub localizer: LocalizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            augment: true,
            sigma: 3.0,
            optim: OptimConfig::default(),
            counter: CounterConfig::default(),
            localizer: LocalizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.lr_min > 0.0 && o.lr_min <= o.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got lr_min={} lr_max={}",
                o.lr_min, o.lr_max
            )));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be nonzero".into()));
        }
        if o.restart_period < 1 || o.restart_mult < 1.0 {
            return Err(Error::Config(format!(
                "need restart_period >= 1 and restart_mult >= 1, got {} and {}",
                o.restart_period, o.restart_mult
            )));
        }
        if !(o.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", o.clip_norm)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        self.counter.validate()?;
        self.localizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation MAE (counter stage) or MSE (localizer stage); falls back to
    /// the train loss when the validation split is empty.
    pub val_metric: f64,
    pub lr_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub config: RunConfig,
    pub dataset_hash: String,
    /// Hash of the exact sample/augmentation order seen by the optimizer;
    /// paired ablation runs must agree on it.
    pub data_order_hash: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Hash of the saved (best-validation) weights.
    pub weights_hash: String,
    /// Hash of the frozen counter the localizer was conditioned on.
    pub frozen_counter_hash: Option<String>,
    /// Not part of the reproducibility fingerprint.
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// Content hash over everything that must reproduce bit-for-bit across
    /// identical runs; wall-clock time is excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        let bytes = serde_json::to_vec(&clone)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// splitmix64 over (seed, tag): decorrelated per-epoch RNG streams.
fn stream_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stacks samples into an `(N, C, H, W)` float tensor; shapes must agree.
pub fn images_to_tensor(samples: &[&ImageSample], device: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w, c) = first.image.dim();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.image.dim() != (h, w, c) {
            return Err(Error::Shape(format!(
                "batch mixes image shapes {:?} and {:?} ({})",
                s.image.dim(),
                (h, w, c),
                s.source_id
            )));
        }
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    data.push(s.image[[r, col, ch]]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), c, h, w), device)?)
}

/// Ground-truth counts as an `(N,)` tensor.
pub fn counts_to_tensor(samples: &[&ImageSample], device: &Device) -> Result<Tensor> {
    let counts: Vec<f32> = samples.iter().map(|s| s.dots.count() as f32).collect();
    Ok(Tensor::from_vec(counts, samples.len(), device)?)
}

/// Stacks density maps into an `(N, 1, H, W)` float tensor.
pub fn maps_to_tensor(maps: &[DensityMap], device: &Device) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.shape() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes density map shapes {:?} and {:?}",
                m.shape(),
                (h, w)
            )));
        }
        data.extend(m.values().iter().map(|v| *v as f32));
    }
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), device)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn save_store_atomic(store: &ParamStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    store.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_metrics_csv(path: &Path, epochs: &[EpochMetrics]) -> Result<()> {
    let mut csv = String::from("epoch,train_loss,val_metric,lr_end\n");
    for m in epochs {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_metric, m.lr_end));
    }
    write_atomic(path, csv.as_bytes())
}

fn split_samples(samples: &[ImageSample]) -> (Vec<&ImageSample>, Vec<&ImageSample>) {
    let train = samples.iter().filter(|s| s.split == Split::Train).collect();
    let val = samples.iter().filter(|s| s.split == Split::Val).collect();
    (train, val)
}

/// One shuffled, optionally augmented batch of owned samples with the density
/// map rasterized alongside (at `sigma`) when requested.
fn materialize_batch(
    chunk: &[&ImageSample],
    rng: &mut ChaCha8Rng,
    do_augment: bool,
    sigma: Option<f64>,
    order_hasher: &mut Sha256,
) -> Result<(Vec<ImageSample>, Vec<DensityMap>)> {
    let mut out = Vec::with_capacity(chunk.len());
    let mut maps = Vec::with_capacity(chunk.len());
    for s in chunk {
        order_hasher.update(s.source_id.as_bytes());
        let map = match sigma {
            Some(sigma) => rasterize_density(&s.dots, (s.height(), s.width()), sigma)?,
            None => DensityMap::zeros(s.height(), s.width()),
        };
        let (s, map) = if do_augment {
            let op = *AugmentOp::ALL.choose(rng).expect("ALL is nonempty");
            order_hasher.update([op as u8]);
            augment(s, &map, op)?
        } else {
            ((*s).clone(), map)
        };
        out.push(s);
        maps.push(map);
    }
    Ok((out, maps))
}

fn check_finite_loss(
    loss: f64,
    stage: Stage,
    epoch: usize,
    step: u64,
    lr: f64,
    batch: &[ImageSample],
) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let ids: Vec<&str> = batch.iter().map(|s| s.source_id.as_str()).collect();
    Err(Error::Training(format!(
        "{stage:?} run hit a non-finite loss at epoch {epoch}, step {step} (lr {lr:.3e}); batch: {ids:?}"
    )))
}

fn counter_val_mae(counter: &Counter, val: &[&ImageSample], batch_size: usize, device: &Device) -> Result<f64> {
    let mut abs = 0.0;
    for chunk in val.chunks(batch_size) {
        let images = images_to_tensor(chunk, device)?;
        let coarse = counter.forward(&images)?;
        for (s, pred) in chunk.iter().zip(coarse.count_values()?) {
            abs += (pred - s.dots.count() as f64).abs();
        }
    }
    Ok(abs / val.len() as f64)
}

fn localizer_val_mse(
    counter: &Counter,
    localizer: &Localizer,
    val: &[&ImageSample],
    sigma: f64,
    batch_size: usize,
    device: &Device,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in val.chunks(batch_size) {
        let images = images_to_tensor(chunk, device)?;
        let maps: Vec<DensityMap> = chunk
            .iter()
            .map(|s| rasterize_density(&s.dots, (s.height(), s.width()), sigma))
            .collect::<Result<_>>()?;
        let targets = maps_to_tensor(&maps, device)?;
        let coarse = counter.forward(&images)?.values.detach();
        let pred = localizer.forward(&condition_inputs(&images, &coarse)?)?;
        let mse = localizer_loss(&pred, &targets)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += mse * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// Stage one: fits the counter on count labels and writes
/// `counter.safetensors` (best validation epoch), `counter_config.json`,
/// `metrics.csv` and `manifest.json` into `out_dir`.
pub fn train_counter(
    cfg: &RunConfig,
    samples: &[ImageSample],
    dataset_hash: &str,
    out_dir: &Path,
) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let device = Device::Cpu;

    let mut store = ParamStore::new(cfg.seed, DType::F32, device.clone());
    let counter = Counter::new(&cfg.counter, &mut store)?;
    if let Some(path) = &cfg.counter.pretrained_path {
        store.load(path)?;
    }
    let mut adam = Adam::new(
        store.all_vars(),
        AdamConfig { clip_norm: Some(cfg.optim.clip_norm), ..Default::default() },
    );

    let (train, val) = split_samples(samples);
    if train.is_empty() {
        return Err(Error::Input("no samples in the train split".into()));
    }

    let ckpt = out_dir.join("counter.safetensors");
    let mut order_hasher = Sha256::new();
    let mut epochs = Vec::with_capacity(cfg.optim.epochs);
    let mut best = (0usize, f64::INFINITY);
    let mut step = 0u64;

    for epoch in 0..cfg.optim.epochs {
        order_hasher.update((epoch as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64));
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut rng);

        let (mut loss_sum, mut batches, mut lr_end) = (0.0, 0usize, cfg.optim.lr_max);
        for chunk_idx in indices.chunks(cfg.optim.batch_size) {
            let chunk: Vec<&ImageSample> = chunk_idx.iter().map(|&i| train[i]).collect();
            let (batch, _) = materialize_batch(&chunk, &mut rng, cfg.augment, None, &mut order_hasher)?;
            let refs: Vec<&ImageSample> = batch.iter().collect();
            let images = images_to_tensor(&refs, &device)?;
            let labels = counts_to_tensor(&refs, &device)?;

            let coarse = counter.forward(&images)?;
            let loss = count_loss(&coarse, &labels)?;
            let loss_v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let lr = lr_at_step(step, cfg.optim.lr_min, cfg.optim.lr_max, cfg.optim.restart_period, cfg.optim.restart_mult);
            check_finite_loss(loss_v, Stage::Counter, epoch, step, lr, &batch)?;
            adam.step(&loss.backward()?, lr)?;

            step += 1;
            loss_sum += loss_v;
            batches += 1;
            lr_end = lr;
        }

        let train_loss = loss_sum / batches as f64;
        let val_metric = if val.is_empty() {
            train_loss
        } else {
            counter_val_mae(&counter, &val, cfg.optim.batch_size, &device)?
        };
        log::info!("counter epoch {epoch}: train loss {train_loss:.4}, val mae {val_metric:.4}");
        if val_metric < best.1 {
            best = (epoch, val_metric);
            save_store_atomic(&store, &ckpt)?;
        }
        epochs.push(EpochMetrics { epoch, train_loss, val_metric, lr_end });
    }

    // The checkpoint holds the best epoch; align the in-memory weights with it.
    store.load(&ckpt)?;
    let manifest = RunManifest {
        stage: Stage::Counter,
        config: cfg.clone(),
        dataset_hash: dataset_hash.to_string(),
        data_order_hash: hex::encode(order_hasher.finalize()),
        epochs,
        best_epoch: best.0,
        best_val_metric: best.1,
        weights_hash: store.weights_hash()?,
        frozen_counter_hash: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&out_dir.join("counter_config.json"), &serde_json::to_vec_pretty(&cfg.counter)?)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &manifest.epochs)?;
    write_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Rebuilds a counter from a stage-one checkpoint directory.
pub fn load_counter(dir: &Path) -> Result<(Counter, ParamStore)> {
    let cfg_path = dir.join("counter_config.json");
    let cfg: CounterConfig = serde_json::from_slice(&std::fs::read(&cfg_path)?)?;
    let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
    let counter = Counter::new(&cfg, &mut store)?;
    store.load(&dir.join("counter.safetensors"))?;
    Ok((counter, store))
}

/// Rebuilds a localizer from a stage-two checkpoint directory.
pub fn load_localizer(dir: &Path) -> Result<(Localizer, ParamStore)> {
    let cfg_path = dir.join("localizer_config.json");
    let cfg: LocalizerConfig = serde_json::from_slice(&std::fs::read(&cfg_path)?)?;
    let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
    let localizer = Localizer::new(&cfg, &mut store)?;
    store.load(&dir.join("localizer.safetensors"))?;
    Ok((localizer, store))
}

/// Stage two: trains the localizer against rasterized density maps while the
/// counter from `counter_dir` stays frozen (its coarse maps are detached and
/// its parameters are never handed to the optimizer). Writes
/// `localizer.safetensors`, `localizer_config.json`, `metrics.csv` and
/// `manifest.json` into `out_dir`.
pub fn train_localizer(
    cfg: &RunConfig,
    samples: &[ImageSample],
    dataset_hash: &str,
    counter_dir: &Path,
    out_dir: &Path,
) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let device = Device::Cpu;

    let (counter, counter_store) = load_counter(counter_dir)?;
    let frozen_hash = counter_store.weights_hash()?;

    let mut store = ParamStore::new(cfg.seed, DType::F32, device.clone());
    let localizer = Localizer::new(&cfg.localizer, &mut store)?;
    let mut adam = Adam::new(
        store.all_vars(),
        AdamConfig { clip_norm: Some(cfg.optim.clip_norm), ..Default::default() },
    );

    let (train, val) = split_samples(samples);
    if train.is_empty() {
        return Err(Error::Input("no samples in the train split".into()));
    }

    let ckpt = out_dir.join("localizer.safetensors");
    let mut order_hasher = Sha256::new();
    let mut epochs = Vec::with_capacity(cfg.optim.epochs);
    let mut best = (0usize, f64::INFINITY);
    let mut step = 0u64;

    for epoch in 0..cfg.optim.epochs {
        order_hasher.update((epoch as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64));
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut rng);

        let (mut loss_sum, mut batches, mut lr_end) = (0.0, 0usize, cfg.optim.lr_max);
        for chunk_idx in indices.chunks(cfg.optim.batch_size) {
            let chunk: Vec<&ImageSample> = chunk_idx.iter().map(|&i| train[i]).collect();
            let (batch, maps) =
                materialize_batch(&chunk, &mut rng, cfg.augment, Some(cfg.sigma), &mut order_hasher)?;
            let refs: Vec<&ImageSample> = batch.iter().collect();
            let images = images_to_tensor(&refs, &device)?;
            let targets = maps_to_tensor(&maps, &device)?;

            let coarse = counter.forward(&images)?.values.detach();
            let pred = localizer.forward(&condition_inputs(&images, &coarse)?)?;
            let loss = localizer_loss(&pred, &targets)?;
            let loss_v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let lr = lr_at_step(step, cfg.optim.lr_min, cfg.optim.lr_max, cfg.optim.restart_period, cfg.optim.restart_mult);
            check_finite_loss(loss_v, Stage::Localizer, epoch, step, lr, &batch)?;
            adam.step(&loss.backward()?, lr)?;

            step += 1;
            loss_sum += loss_v;
            batches += 1;
            lr_end = lr;
        }

        let train_loss = loss_sum / batches as f64;
        let val_metric = if val.is_empty() {
            train_loss
        } else {
            localizer_val_mse(&counter, &localizer, &val, cfg.sigma, cfg.optim.batch_size, &device)?
        };
        log::info!("localizer epoch {epoch}: train loss {train_loss:.6}, val mse {val_metric:.6}");
        if val_metric < best.1 {
            best = (epoch, val_metric);
            save_store_atomic(&store, &ckpt)?;
        }
        epochs.push(EpochMetrics { epoch, train_loss, val_metric, lr_end });
    }

    if counter_store.weights_hash()? != frozen_hash {
        return Err(Error::Training(
            "frozen counter weights changed during localizer training".into(),
        ));
    }

    store.load(&ckpt)?;
    let manifest = RunManifest {
        stage: Stage::Localizer,
        config: cfg.clone(),
        dataset_hash: dataset_hash.to_string(),
        data_order_hash: hex::encode(order_hasher.finalize()),
        epochs,
        best_epoch: best.0,
        best_val_metric: best.1,
        weights_hash: store.weights_hash()?,
        frozen_counter_hash: Some(frozen_hash),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&out_dir.join("localizer_config.json"), &serde_json::to_vec_pretty(&cfg.localizer)?)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &manifest.epochs)?;
    write_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
