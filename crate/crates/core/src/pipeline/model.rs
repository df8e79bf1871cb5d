//! The trainable adaptation model: register parameters plus a LoRA-equipped
//! 1x1 head, and the inference path that bypasses the register.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::featuremap::assemble;
use crate::frame::FrameGeometry;
use crate::lora::{layers_from_checkpoints, read_dense, read_lora, save_with, write_dense, write_lora, LoraLayer};
use crate::optim::{Adam, ParamRef};
use crate::plane::FeaturePlane;
use crate::registers::{
    loss_feat, loss_feat_grad, loss_reg, loss_reg_grad, loss_register, register_forward_traced, LossWeights,
    RegisterGrads, RegisterParams,
};

pub const GROUP_LORA: usize = 0;
pub const GROUP_REGISTER: usize = 1;

/// Standard deviation of the noise added to the identity in the frozen head.
pub const HEAD_NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub l_feat: f64,
    pub l_reg: f64,
    pub l_register: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub register: RegisterGrads,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ModelGrads {
    /// Register gradients followed by `A` and `B`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.register.flatten();
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.b);
        out
    }
}

/// One driving frame and its target features.
pub struct Sample<'a> {
    pub frame: &'a FrameGeometry,
    pub target: &'a FeaturePlane<f64>,
}

#[derive(Debug, Clone)]
pub struct AdapterModel {
    pub register: RegisterParams,
    pub head: LoraLayer<f64>,
}

/// Frozen `d x d` head weight: identity plus small Gaussian noise.
pub fn frozen_head_weight(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, HEAD_NOISE_STD).expect("finite std");
    (0..dim * dim)
        .map(|i| {
            let base = if i / dim == i % dim { 1.0 } else { 0.0 };
            base + noise.sample(&mut rng)
        })
        .collect()
}

impl AdapterModel {
    pub fn init(vertex_count: usize, dim: usize, dim_out: usize, rank: usize, seed: u64) -> Result<Self> {
        let register = RegisterParams::init(vertex_count, dim, dim_out, seed)?;
        let w = frozen_head_weight(dim_out, seed.wrapping_add(1));
        let head = LoraLayer::init(w, dim_out, dim_out, Some(rank), seed.wrapping_add(2))?;
        Ok(AdapterModel { register, head })
    }

    /// Head output on `f_reg` along the training path (factored LoRA).
    pub fn training_forward(&self, frame: &FrameGeometry, f_src: &FeaturePlane<f64>) -> Result<FeaturePlane<f64>> {
        let f_s = assemble::<f64>(frame, self.register.emb())?;
        let trace = register_forward_traced(f_src, &f_s, &self.register)?;
        self.head.forward_plane(trace.f_reg())
    }

    /// Batch loss: `lambda_feat * mean_i L_feat_i + lambda_reg * L_reg`.
    pub fn losses(&self, samples: &[Sample<'_>], f_src: &FeaturePlane<f64>, w: &LossWeights) -> Result<Losses> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut l_feat = 0.0;
        for s in samples {
            l_feat += loss_feat(s.target, &self.training_forward(s.frame, f_src)?)?;
        }
        l_feat /= samples.len() as f64;
        let l_reg = loss_reg(self.register.emb())?;
        Ok(Losses {
            l_feat,
            l_reg,
            l_register: loss_register(l_feat, l_reg, w),
        })
    }

    /// Batch loss and its gradient with respect to every trainable
    /// parameter. Samples are reduced in order.
    pub fn objective(&self, samples: &[Sample<'_>], f_src: &FeaturePlane<f64>, w: &LossWeights) -> Result<(Losses, ModelGrads)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = w.lambda_feat / samples.len() as f64;
        let mut grads = ModelGrads {
            register: RegisterGrads::zeros_like(&self.register),
            a: vec![0.0; self.head.a().len()],
            b: vec![0.0; self.head.b().len()],
        };
        let mut l_feat = 0.0;
        for s in samples {
            let f_s = assemble::<f64>(s.frame, self.register.emb())?;
            let trace = register_forward_traced(f_src, &f_s, &self.register)?;
            let out = self.head.forward_plane(trace.f_reg())?;
            l_feat += loss_feat(s.target, &out)?;
            let mut g_out = loss_feat_grad(s.target, &out)?;
            g_out.data_mut().iter_mut().for_each(|g| *g *= scale);
            let (ga, gb, g_reg) = self.head.backward_plane(trace.f_reg(), &g_out)?;
            grads.a.iter_mut().zip(&ga).for_each(|(d, s)| *d += s);
            grads.b.iter_mut().zip(&gb).for_each(|(d, s)| *d += s);
            let rg = RegisterGrads::from_upstream(s.frame, &self.register, &trace, &g_reg)?;
            grads.register.accumulate(&rg, 1.0);
        }
        l_feat /= samples.len() as f64;
        let l_reg = loss_reg(self.register.emb())?;
        let reg_grad = loss_reg_grad(self.register.emb())?;
        grads
            .register
            .e
            .iter_mut()
            .zip(&reg_grad)
            .for_each(|(g, r)| *g += w.lambda_reg * r);
        Ok((
            Losses {
                l_feat,
                l_reg,
                l_register: loss_register(l_feat, l_reg, w),
            },
            grads,
        ))
    }

    /// Trainable parameters in the order of [`ModelGrads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.register.flatten();
        out.extend_from_slice(self.head.a());
        out.extend_from_slice(self.head.b());
        out
    }

    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        let n_reg = self.register.parameter_count();
        let (na, nb) = (self.head.a().len(), self.head.b().len());
        if values.len() != n_reg + na + nb {
            return Err(Error::Shape(format!(
                "{} values for {} trainable parameters",
                values.len(),
                n_reg + na + nb
            )));
        }
        self.register.unflatten(&values[..n_reg])?;
        self.head.a_mut().copy_from_slice(&values[n_reg..n_reg + na]);
        self.head.b_mut().copy_from_slice(&values[n_reg + na..]);
        Ok(())
    }

    /// One Adam update of both groups.
    pub fn apply(&mut self, adam: &mut Adam, grads: &ModelGrads, factor: f64) -> Result<()> {
        let (emb, e1, e2) = self.register.parts_mut();
        let (rows, background) = emb.parts_mut();
        let names: Vec<String> = (0..e1.layers.len())
            .map(|i| format!("eproc1.{i}"))
            .chain((0..e2.layers.len()).map(|i| format!("eproc2.{i}")))
            .collect();
        let mut refs = vec![
            ParamRef {
                name: "e",
                group: GROUP_REGISTER,
                value: rows,
                grad: &grads.register.e,
            },
            ParamRef {
                name: "e_b",
                group: GROUP_REGISTER,
                value: background,
                grad: &grads.register.e_b,
            },
        ];
        let layer_grads = grads.register.eproc1.iter().chain(&grads.register.eproc2);
        for ((layer, (gw, gb)), name) in e1.layers.iter_mut().chain(e2.layers.iter_mut()).zip(layer_grads).zip(&names) {
            refs.push(ParamRef {
                name: name.as_str(),
                group: GROUP_REGISTER,
                value: &mut layer.weights,
                grad: gw,
            });
            refs.push(ParamRef {
                name: name.as_str(),
                group: GROUP_REGISTER,
                value: &mut layer.bias,
                grad: gb,
            });
        }
        let (a, b) = self.head.factors_mut();
        refs.push(ParamRef {
            name: "lora.A",
            group: GROUP_LORA,
            value: a,
            grad: &grads.a,
        });
        refs.push(ParamRef {
            name: "lora.B",
            group: GROUP_LORA,
            value: b,
            grad: &grads.b,
        });
        adam.step(&mut refs, factor)
    }

    /// Writes `register.rgpm`, `head.lora` and the frozen `head_base.dnsw`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.register.save(dir.join("register.rgpm"))?;
        let layers = std::slice::from_ref(&self.head);
        save_with(dir.join("head.lora"), |w| write_lora(w, layers))?;
        save_with(dir.join("head_base.dnsw"), |w| write_dense(w, layers))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let register = RegisterParams::load(dir.join("register.rgpm"))?;
        let head = load_head(dir)?;
        Ok(AdapterModel { register, head })
    }
}

/// The unmerged head from a checkpoint directory.
pub fn load_head(dir: impl AsRef<Path>) -> Result<LoraLayer<f64>> {
    let dir = dir.as_ref();
    let open = |name: &str| -> Result<std::io::BufReader<std::fs::File>> {
        Ok(std::io::BufReader::new(std::fs::File::open(dir.join(name))?))
    };
    let dense = read_dense(&mut open("head_base.dnsw")?)?;
    let factors = read_lora(&mut open("head.lora")?)?;
    let mut layers = layers_from_checkpoints(dense, factors)?;
    if layers.len() != 1 {
        return Err(Error::Format(format!("expected one head layer, found {}", layers.len())));
    }
    Ok(layers.remove(0))
}

/// Inference output and bookkeeping.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub features: FeaturePlane<f64>,
    pub parameter_count: usize,
}

/// Merges the head and applies it to the source features. The register is
/// never consulted.
pub fn infer(head: &LoraLayer<f64>, f_src: &FeaturePlane<f64>) -> Result<InferenceOutput> {
    let merged = head.clone().merge()?;
    Ok(InferenceOutput {
        features: merged.forward_plane_merged(f_src)?,
        parameter_count: merged.parameter_count(),
    })
}
