//! The adaptation loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::cache::PreprocessCache;
use crate::pipeline::config::AdaptConfig;
use crate::pipeline::model::{AdapterModel, Losses, Sample, GROUP_LORA, GROUP_REGISTER};
use crate::plane::FeaturePlane;

pub const METRICS_HEADER: &str = "iter,lr_factor,l_feat,l_reg,l_register";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr_factor: f64,
    pub losses: Losses,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter, r.lr_factor, r.losses.l_feat, r.losses.l_reg, r.losses.l_register
        );
    }
    out
}

/// Mean of the last `window` values of `l_register` (fewer if the log is
/// shorter).
pub fn trailing_mean(rows: &[MetricsRow], window: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(window.max(1))..];
    tail.iter().map(|r| r.losses.l_register).sum::<f64>() / tail.len() as f64
}

/// Target planes for every cached frame, indexed like `cache.frames`.
pub struct TrainingData<'a> {
    pub cache: &'a PreprocessCache,
    pub targets: Vec<FeaturePlane<f64>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(cache: &'a PreprocessCache, targets: Vec<FeaturePlane<f64>>, dim_out: usize) -> Result<Self> {
        if targets.len() != cache.frames.len() {
            return Err(Error::Shape(format!(
                "{} target planes for {} cached frames",
                targets.len(),
                cache.frames.len()
            )));
        }
        for t in &targets {
            if t.shape() != (cache.height, cache.width, dim_out) {
                return Err(Error::Shape(format!(
                    "target plane {:?} does not match ({}, {}, {dim_out})",
                    t.shape(),
                    cache.height,
                    cache.width
                )));
            }
        }
        Ok(TrainingData { cache, targets })
    }

    /// Features of pose 0, the source frame.
    pub fn source(&self) -> Result<&FeaturePlane<f64>> {
        let i = self
            .cache
            .frames
            .iter()
            .position(|f| f.pose_index == 0)
            .ok_or_else(|| Error::InvalidArgument("pose 0 (the source) is not in the cache".into()))?;
        Ok(&self.targets[i])
    }
}

/// Runs `cfg.iterations` optimizer steps. Row `i` of the returned log holds
/// the batch losses before step `i`; the final row is evaluated after the
/// last step, so a run of zero iterations logs exactly one row.
pub fn adapt(model: &mut AdapterModel, data: &TrainingData<'_>, cfg: &AdaptConfig) -> Result<Vec<MetricsRow>> {
    let f_src = data.source()?;
    let weights = cfg.loss_weights();
    let schedule = cfg.schedule();
    let mut lrs = vec![0.0; 2];
    lrs[GROUP_LORA] = cfg.lr_lora;
    lrs[GROUP_REGISTER] = cfg.lr_register;
    let mut adam = Adam::new(AdamConfig::default(), lrs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let n = data.cache.frames.len();
    let mut log = Vec::with_capacity(cfg.iterations + 1);
    for iter in 0..=cfg.iterations {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let samples: Vec<Sample<'_>> = batch
            .iter()
            .map(|&i| Sample {
                frame: &data.cache.frames[i].frame,
                target: &data.targets[i],
            })
            .collect();
        let factor = schedule.factor(iter);
        if iter == cfg.iterations {
            let losses = model.losses(&samples, f_src, &weights)?;
            log.push(MetricsRow {
                iter,
                lr_factor: factor,
                losses,
            });
            break;
        }
        let (losses, grads) = model.objective(&samples, f_src, &weights)?;
        log.push(MetricsRow {
            iter,
            lr_factor: factor,
            losses,
        });
        model.apply(&mut adam, &grads, factor)?;
        if iter % 100 == 0 {
            log::info!("iter {iter}: L_register {:.6} (lr factor {factor:.3})", losses.l_register);
        }
    }
    Ok(log)
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}
