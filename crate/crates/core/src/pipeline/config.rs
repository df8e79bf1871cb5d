//! Run configuration and pose lists, both read from TOML.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::GeometryParams;
use crate::geometry::{make_intrinsics, CameraPose, Intrinsics};
use crate::optim::LinearSchedule;
use crate::registers::LossWeights;

/// Every field is optional in the file; omitted ones take the defaults
/// below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub height: usize,
    pub width: usize,
    /// Embedding dimension `D`.
    pub dim: usize,
    /// Feature dimension `D_out`.
    pub dim_out: usize,
    pub k: usize,
    pub alpha: f64,
    pub rank: usize,
    pub lambda_feat: f64,
    pub lambda_reg: f64,
    pub lr_lora: f64,
    pub lr_register: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fov_deg: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            height: 296,
            width: 296,
            dim: 512,
            dim_out: 256,
            k: 11,
            alpha: 0.065,
            rank: 32,
            lambda_feat: 2.0,
            lambda_reg: 20.0,
            lr_lora: 1e-4,
            lr_register: 1e-3,
            iterations: 1000,
            batch_size: 2,
            seed: 0,
            fov_deg: 30.0,
        }
    }
}

impl AdaptConfig {
    /// Small setting used by the tests and the convergence run.
    pub fn desk() -> Self {
        AdaptConfig {
            height: 64,
            width: 64,
            dim: 16,
            dim_out: 8,
            k: 5,
            rank: 2,
            seed: 1,
            ..AdaptConfig::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: AdaptConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        AdaptConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("dim", self.dim),
            ("dim_out", self.dim_out),
            ("k", self.k),
            ("rank", self.rank),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be a finite non-negative number", self.alpha)));
        }
        if self.rank > self.dim_out {
            return Err(Error::Config(format!(
                "rank {} exceeds the head size {}",
                self.rank, self.dim_out
            )));
        }
        if !(self.lr_lora > 0.0 && self.lr_register > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        LossWeights::new(self.lambda_feat, self.lambda_reg).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov_deg {} must lie in (0, 180)", self.fov_deg)));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        make_intrinsics(self.width, self.height, self.fov_deg)
    }

    pub fn geometry(&self) -> GeometryParams {
        GeometryParams {
            alpha: self.alpha,
            k: self.k,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_feat: self.lambda_feat,
            lambda_reg: self.lambda_reg,
        }
    }

    /// Decay from 1.0 to 0.1 over the configured iteration count.
    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            start_factor: 1.0,
            end_factor: 0.1,
            total_iters: self.iterations.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    #[serde(default)]
    pose: Vec<PoseRecord>,
}

pub fn parse_poses(text: &str) -> Result<Vec<CameraPose>> {
    let file: PoseFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if file.pose.is_empty() {
        return Err(Error::Config("pose file lists no [[pose]] entries".into()));
    }
    file.pose
        .iter()
        .enumerate()
        .map(|(i, p)| {
            CameraPose::new(
                Matrix3::from_row_slice(&p.rotation),
                Vector3::from_column_slice(&p.translation),
            )
            .map_err(|e| Error::Config(format!("pose {i}: {e}")))
        })
        .collect()
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<CameraPose>> {
    let path = path.as_ref();
    parse_poses(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn poses_to_toml(poses: &[CameraPose]) -> String {
    let file = PoseFile {
        pose: poses
            .iter()
            .map(|p| {
                let r = p.rotation();
                PoseRecord {
                    rotation: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    translation: [p.translation().x, p.translation().y, p.translation().z],
                }
            })
            .collect(),
    };
    toml::to_string(&file).expect("plain struct serializes")
}
