//! Deterministic training, evaluation and the ablation driver.

mod adam;
mod checkpoint;
mod eval;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::model::{Model, ModelConfig};
use crate::params::Binder;
use crate::rng;
use crate::synth::Manifest;
use crate::tensor::{Scalar, Tensor};

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION};
pub use eval::{evaluate, restore_image, run_ablation, AblationRow, AblationTable, ABLATION_VARIANTS};

/// Training settings. Every field has a `key=value` spelling (see [`TrainConfig::set`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub model: ModelConfig,
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamParams,
    /// Charbonnier ε.
    pub loss_eps: f64,
    pub seed: u64,
    /// Side of the square training crop.
    pub crop: usize,
    /// Write `ckpt_NNNNNN.sndf` every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: PathBuf::from("data/manifest.tsv"),
            model: ModelConfig::toy(),
            steps: 500,
            batch: 4,
            adam: AdamParams::default(),
            loss_eps: 1e-3,
            seed: 0,
            crop: 64,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut problems = Vec::new();
        let m = self.model.size_multiple();
        if self.crop == 0 || self.crop % m != 0 {
            problems.push(format!(
                "crop={} must be a positive multiple of {m} (2^stages)",
                self.crop
            ));
        }
        if self.batch == 0 {
            problems.push("batch must be >= 1".to_string());
        }
        if !(self.adam.lr > 0.0) {
            problems.push(format!("lr={} must be positive", self.adam.lr));
        }
        for (k, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{k}={b} must lie in [0,1)"));
            }
        }
        if !(self.adam.eps > 0.0) || !(self.loss_eps > 0.0) {
            problems.push("eps_adam and loss_eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Applies one `key=value` entry; model keys are forwarded to
    /// [`ModelConfig::set`]. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
        where
            V::Err: fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e: V::Err| Error::Config(format!("{key}={value}: {e}")))
        }
        match key {
            "manifest" => self.manifest = PathBuf::from(value.trim()),
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps_adam" => self.adam.eps = parse(key, value)?,
            "loss_eps" => self.loss_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("manifest".into(), self.manifest.display().to_string()),
            ("steps".into(), self.steps.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.adam.lr.to_string()),
            ("beta1".into(), self.adam.beta1.to_string()),
            ("beta2".into(), self.adam.beta2.to_string()),
            ("eps_adam".into(), self.adam.eps.to_string()),
            ("loss_eps".into(), self.loss_eps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("crop".into(), self.crop.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ];
        out.extend(self.model.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }
}

/// Mean Charbonnier penalty `mean(sqrt((pred − target)² + ε²))`.
pub fn charbonnier_loss<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    pred.charbonnier(target, T::from_f64(eps))
}

/// Aligned degraded/clean pairs held in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub degraded: Vec<ImageBuffer>,
    pub clean: Vec<ImageBuffer>,
}

impl TrainData {
    pub fn load(manifest: &Manifest) -> Result<TrainData> {
        let mut data = TrainData {
            ids: Vec::new(),
            degraded: Vec::new(),
            clean: Vec::new(),
        };
        for row in &manifest.rows {
            let read = |f: &str| {
                ImageBuffer::load(manifest.path_of(f)).map_err(|e| Error::Data(format!("sample `{}`: {e}", row.id)))
            };
            let (d, c) = (read(&row.degraded)?, read(&row.clean)?);
            if !d.same_shape(&c) {
                return Err(Error::Data(format!(
                    "sample `{}`: degraded and clean sizes differ",
                    row.id
                )));
            }
            data.ids.push(row.id.clone());
            data.degraded.push(d);
            data.clean.push(c);
        }
        if data.ids.is_empty() {
            return Err(Error::Data("manifest lists no samples".into()));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sample index and crop origin for batch slot `b` of `step`.
///
/// Samples cycle through the set in order; the crop origin comes from a
/// generator keyed by `(seed, step, b)`, so it does not depend on what other
/// slots or steps drew.
pub fn crop_plan(
    data: &TrainData,
    seed: u64,
    step: u64,
    b: usize,
    batch: usize,
    crop: usize,
) -> Result<(usize, usize, usize)> {
    let idx = ((step as u128 * batch as u128 + b as u128) % data.len() as u128) as usize;
    let img = &data.degraded[idx];
    if img.height() < crop || img.width() < crop {
        return Err(Error::Data(format!(
            "sample `{}` is {}x{}, smaller than crop {crop}",
            data.ids[idx],
            img.height(),
            img.width()
        )));
    }
    let mut r = rng::keyed(seed, "crop", &[&step.to_le_bytes(), &(b as u64).to_le_bytes()]);
    let top = r.gen_range(0..=img.height() - crop);
    let left = r.gen_range(0..=img.width() - crop);
    Ok((idx, top, left))
}

/// Loss and averaged gradients of one batch.
pub struct BatchResult {
    pub loss: f64,
    pub grads: indexmap::IndexMap<String, Tensor<f32>>,
}

/// Forward/backward over `pairs` one sample at a time; the loss and the
/// gradients are means over the batch, accumulated in slot order.
pub fn batch_gradients(model: &Model<f32>, pairs: &[(ImageBuffer, ImageBuffer)], loss_eps: f64) -> Result<BatchResult> {
    let mut total = 0.0f64;
    let mut acc: Option<indexmap::IndexMap<String, Tensor<f32>>> = None;
    for (input, target) in pairs {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.params, true);
        let x = tape.constant(input.to_tensor());
        let y = tape.constant(target.to_tensor());
        let out = model.forward(&binder, x)?;
        let loss = charbonnier_loss(out, y, loss_eps)?;
        total += loss.value().data()[0] as f64;
        let grads = tape.backward(loss)?.into_named();
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (k, g) in grads {
                    let dst = a.get_mut(&k).expect("same parameter set every sample");
                    dst.data_mut().iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
    let n = pairs.len() as f32;
    let mut grads = acc.ok_or_else(|| Error::invalid("empty batch"))?;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(BatchResult {
        loss: total / pairs.len() as f64,
        grads,
    })
}

/// Everything a training run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(step, loss)` for the steps run in this call.
    pub losses: Vec<(u64, f64)>,
    /// SHA-256 over every `(step, slot, sample, top, left)` of the full
    /// schedule `0..steps`: equal digests mean equal data order.
    pub data_digest: String,
}

pub const LOSS_LOG: &str = "loss.tsv";
pub const FINAL_CHECKPOINT: &str = "final.sndf";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.sndf")
}

fn digest_plan(cfg: &TrainConfig, data: &TrainData) -> Result<Vec<Vec<(usize, usize, usize)>>> {
    (0..cfg.steps)
        .map(|s| {
            (0..cfg.batch)
                .map(|b| crop_plan(data, cfg.seed, s, b, cfg.batch, cfg.crop))
                .collect()
        })
        .collect()
}

/// Trains from a fresh model (or from `resume`) to `cfg.steps`, writing the
/// loss log and checkpoints to `out_dir` when given.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let data = TrainData::load(&manifest)?;
    train_on(cfg, &data, out_dir, resume)
}

/// [`train`] on data already in memory.
pub fn train_on(
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut ckpt = match resume {
        Some(c) => {
            if let Some((field, ours, theirs)) = cfg.model.first_difference(&c.model.config) {
                return Err(Error::ConfigMismatch {
                    field,
                    expected: ours,
                    found: theirs,
                });
            }
            if c.rng.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config says {}",
                    c.rng.seed, cfg.seed
                )));
            }
            c
        }
        None => {
            let model = Model::<f32>::build(&cfg.model, cfg.seed)?;
            let adam = AdamState::new(&model.params);
            Checkpoint {
                model,
                adam,
                step: 0,
                rng: RngState {
                    seed: cfg.seed,
                    position: 0,
                },
            }
        }
    };
    if ckpt.step > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {}, beyond steps={}",
            ckpt.step, cfg.steps
        )));
    }
    // The digest covers the whole schedule, so a resumed run reports the
    // same value as an uninterrupted one.
    let plan = digest_plan(cfg, data)?;
    let mut hasher = Sha256::new();
    for (s, slots) in plan.iter().enumerate() {
        for (b, (i, t, l)) in slots.iter().enumerate() {
            for v in [s as u64, b as u64, *i as u64, *t as u64, *l as u64] {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let data_digest = format!("{:x}", hasher.finalize());

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let fresh = ckpt.step == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step\tloss").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let mut losses = Vec::new();
    let mut last_saved: Option<PathBuf> = None;
    for slots in plan.into_iter().skip(ckpt.step as usize) {
        let step = ckpt.step;
        let pairs: Vec<(ImageBuffer, ImageBuffer)> = slots
            .iter()
            .map(|&(i, top, left)| {
                Ok((
                    data.degraded[i].crop(top, left, cfg.crop, cfg.crop)?,
                    data.clean[i].crop(top, left, cfg.crop, cfg.crop)?,
                ))
            })
            .collect::<Result<_>>()?;
        let batch = batch_gradients(&ckpt.model, &pairs, cfg.loss_eps)?;
        if !batch.loss.is_finite() {
            let kept = last_saved
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into());
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}; last checkpoint: {kept}"
            )));
        }
        adam_step(&mut ckpt.model.params, &batch.grads, &mut ckpt.adam, &cfg.adam)?;
        ckpt.step += 1;
        ckpt.rng.position = ckpt.step;
        losses.push((step, batch.loss));
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{step}\t{:.9e}", batch.loss).map_err(|e| Error::io(&*path, e))?;
        }
        log::debug!("step {step} loss {:.6}", batch.loss);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && ckpt.step % cfg.checkpoint_every == 0 {
                let p = dir.join(checkpoint_name(ckpt.step));
                save_checkpoint(&p, &ckpt)?;
                last_saved = Some(p);
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), &ckpt)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses,
        data_digest,
    })
}
