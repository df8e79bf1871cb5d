//! The register networks and their losses.
//!
//! `E_proc-1` maps the constructed feature `f_S` (D channels) to `D_out`
//! channels; `E_proc-2` refines `f_src + f_proc1` into `f_reg`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::conv::{Activation, ConvLayer, ConvLayerSpec, Encoder, EncoderGrads, EncoderTrace};
use crate::error::{Error, Result};
use crate::featuremap::{assemble, VertexEmbeddings};
use crate::frame::FrameGeometry;
use crate::plane::FeaturePlane;

pub const RGPM_MAGIC: &[u8; 4] = b"RGPM";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_feat: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_feat: 2.0,
            lambda_reg: 20.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_feat: f64, lambda_reg: f64) -> Result<Self> {
        if !(lambda_feat >= 0.0 && lambda_reg >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got {lambda_feat} and {lambda_reg}"
            )));
        }
        Ok(LossWeights { lambda_feat, lambda_reg })
    }
}

/// Embeddings plus both encoders.
///
/// Every accessor bumps a counter so callers can prove a code path never
/// reads register state.
#[derive(Debug)]
pub struct RegisterParams {
    emb: VertexEmbeddings,
    eproc1: Encoder,
    eproc2: Encoder,
    accesses: AtomicUsize,
}

impl Clone for RegisterParams {
    fn clone(&self) -> Self {
        RegisterParams {
            emb: self.emb.clone(),
            eproc1: self.eproc1.clone(),
            eproc2: self.eproc2.clone(),
            accesses: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for RegisterParams {
    fn eq(&self, other: &Self) -> bool {
        self.emb == other.emb && self.eproc1 == other.eproc1 && self.eproc2 == other.eproc2
    }
}

impl RegisterParams {
    pub fn new(emb: VertexEmbeddings, eproc1: Encoder, eproc2: Encoder) -> Result<Self> {
        if eproc1.in_channels() != emb.dim() {
            return Err(Error::Shape(format!(
                "E_proc-1 takes {} channels but embeddings have {}",
                eproc1.in_channels(),
                emb.dim()
            )));
        }
        let d_out = eproc1.out_channels();
        if eproc2.in_channels() != d_out || eproc2.out_channels() != d_out {
            return Err(Error::Shape(format!(
                "E_proc-2 must map {d_out} to {d_out} channels, maps {} to {}",
                eproc2.in_channels(),
                eproc2.out_channels()
            )));
        }
        let p = RegisterParams {
            emb,
            eproc1,
            eproc2,
            accesses: AtomicUsize::new(0),
        };
        if !p.all_finite() {
            return Err(Error::InvalidArgument("register parameters contain non-finite values".into()));
        }
        Ok(p)
    }

    /// Seeded initialization: Xavier-normal `e`, zero `e_b`, Xavier conv
    /// kernels with zero bias. `E_proc-1` has channels `[D, D, D_out, D_out]`
    /// with 3x3 kernels, `E_proc-2` has `D_out` throughout with kernels
    /// `[3, 3, 3, 1]`.
    pub fn init(vertex_count: usize, dim: usize, dim_out: usize, seed: u64) -> Result<Self> {
        let emb = VertexEmbeddings::xavier(vertex_count, dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let eproc1 = Encoder::from_sizes(dim, &[dim, dim, dim_out, dim_out], &[3, 3, 3, 3], &mut rng)?;
        let eproc2 = Encoder::from_sizes(dim_out, &[dim_out; 4], &[3, 3, 3, 1], &mut rng)?;
        RegisterParams::new(emb, eproc1, eproc2)
    }

    fn touch(&self) {
        self.accesses.fetch_add(1, Ordering::Relaxed);
    }

    pub fn access_count(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    pub fn emb(&self) -> &VertexEmbeddings {
        self.touch();
        &self.emb
    }

    pub fn eproc1(&self) -> &Encoder {
        self.touch();
        &self.eproc1
    }

    pub fn eproc2(&self) -> &Encoder {
        self.touch();
        &self.eproc2
    }

    pub fn emb_mut(&mut self) -> &mut VertexEmbeddings {
        self.touch();
        &mut self.emb
    }

    pub fn eproc1_mut(&mut self) -> &mut Encoder {
        self.touch();
        &mut self.eproc1
    }

    pub fn eproc2_mut(&mut self) -> &mut Encoder {
        self.touch();
        &mut self.eproc2
    }

    /// Embeddings and both encoders borrowed mutably together.
    pub fn parts_mut(&mut self) -> (&mut VertexEmbeddings, &mut Encoder, &mut Encoder) {
        self.touch();
        (&mut self.emb, &mut self.eproc1, &mut self.eproc2)
    }

    pub fn dim(&self) -> usize {
        self.emb.dim()
    }

    pub fn dim_out(&self) -> usize {
        self.eproc1.out_channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.emb.rows().len() + self.emb.background().len() + self.eproc1.parameter_count() + self.eproc2.parameter_count()
    }

    pub fn all_finite(&self) -> bool {
        let convs = self
            .eproc1
            .layers
            .iter()
            .chain(&self.eproc2.layers)
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()));
        convs && self.emb.rows().iter().chain(self.emb.background()).all(|v| v.is_finite())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, RGPM_MAGIC, 1)?;
        self.emb.write(w)?;
        for enc in [&self.eproc1, &self.eproc2] {
            binio::write_len(w, enc.layers.len())?;
            for layer in &enc.layers {
                let s = layer.spec;
                for n in [s.kernel, s.kernel, s.in_channels, s.out_channels] {
                    binio::write_len(w, n)?;
                }
                binio::write_f32s(w, layer.weights.iter().copied())?;
                binio::write_len(w, s.out_channels)?;
                binio::write_f32s(w, layer.bias.iter().copied())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, RGPM_MAGIC, 1)?;
        let emb = VertexEmbeddings::read(r)?;
        let mut encoders = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = binio::read_len(r)?;
            let mut layers = Vec::with_capacity(count);
            for i in 0..count {
                let kh = binio::read_len(r)?;
                let kw = binio::read_len(r)?;
                let cin = binio::read_len(r)?;
                let cout = binio::read_len(r)?;
                if kh != kw {
                    return Err(Error::Format(format!("non-square {kh}x{kw} kernel in checkpoint")));
                }
                let act = if i + 1 == count {
                    Activation::Linear
                } else {
                    Activation::LeakyRelu
                };
                let spec = ConvLayerSpec::new(cin, cout, kh, act)?;
                let weights = binio::read_f32s(r, spec.weight_len())?.into_iter().map(f64::from).collect();
                let nb = binio::read_len(r)?;
                if nb != cout {
                    return Err(Error::Format(format!("bias block of {nb} for {cout} output channels")));
                }
                let bias = binio::read_f32s(r, nb)?.into_iter().map(f64::from).collect();
                layers.push(ConvLayer::new(spec, weights, bias)?);
            }
            encoders.push(Encoder { layers });
        }
        binio::expect_eof(r)?;
        let eproc2 = encoders.pop().expect("two encoders");
        let eproc1 = encoders.pop().expect("two encoders");
        RegisterParams::new(emb, eproc1, eproc2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        RegisterParams::read(&mut f)
    }
}

fn check_register_inputs(f_src: &FeaturePlane<f64>, f_s: &FeaturePlane<f64>, params: &RegisterParams) -> Result<()> {
    if f_s.channels() != params.dim() {
        return Err(Error::Shape(format!(
            "f_S has {} channels, E_proc-1 expects {}",
            f_s.channels(),
            params.dim()
        )));
    }
    if f_src.channels() != params.dim_out() {
        return Err(Error::Shape(format!(
            "f_src has {} channels, the register works at {}",
            f_src.channels(),
            params.dim_out()
        )));
    }
    if f_src.height() != f_s.height() || f_src.width() != f_s.width() {
        return Err(Error::Shape("f_src and f_S grids differ".into()));
    }
    Ok(())
}

/// `(f_proc1, f_reg)` with `f_proc1 = E_proc-1(f_S)` and
/// `f_reg = E_proc-2(f_src + f_proc1)`.
pub fn register_forward(
    f_src: &FeaturePlane<f64>,
    f_s: &FeaturePlane<f64>,
    params: &RegisterParams,
) -> Result<(FeaturePlane<f64>, FeaturePlane<f64>)> {
    check_register_inputs(f_src, f_s, params)?;
    let f_proc1 = params.eproc1().forward(f_s)?;
    let f_reg = params.eproc2().forward(&f_src.add(&f_proc1)?)?;
    Ok((f_proc1, f_reg))
}

/// Saved activations of both encoders.
#[derive(Debug, Clone)]
pub struct RegisterTrace {
    pub proc1: EncoderTrace,
    pub proc2: EncoderTrace,
}

impl RegisterTrace {
    pub fn f_proc1(&self) -> &FeaturePlane<f64> {
        self.proc1.output()
    }

    pub fn f_reg(&self) -> &FeaturePlane<f64> {
        self.proc2.output()
    }
}

pub fn register_forward_traced(
    f_src: &FeaturePlane<f64>,
    f_s: &FeaturePlane<f64>,
    params: &RegisterParams,
) -> Result<RegisterTrace> {
    check_register_inputs(f_src, f_s, params)?;
    let proc1 = params.eproc1().forward_traced(f_s)?;
    let proc2 = params.eproc2().forward_traced(&f_src.add(proc1.output())?)?;
    Ok(RegisterTrace { proc1, proc2 })
}

/// Encoder gradients and the gradient reaching `f_S`.
#[derive(Debug, Clone)]
pub struct RegisterBackward {
    pub f_s: FeaturePlane<f64>,
    pub eproc1: EncoderGrads,
    pub eproc2: EncoderGrads,
}

pub fn register_backward(
    trace: &RegisterTrace,
    params: &RegisterParams,
    grad_f_reg: &FeaturePlane<f64>,
) -> Result<RegisterBackward> {
    let eproc2 = params.eproc2().backward(&trace.proc2, grad_f_reg)?;
    // f_src + f_proc1 feeds E_proc-2, so f_proc1 receives its input gradient.
    let eproc1 = params.eproc1().backward(&trace.proc1, &eproc2.input)?;
    Ok(RegisterBackward {
        f_s: eproc1.input.clone(),
        eproc1,
        eproc2,
    })
}

/// Mean squared difference over all elements.
pub fn loss_feat(f_dri: &FeaturePlane<f64>, f_reg: &FeaturePlane<f64>) -> Result<f64> {
    f_dri.ensure_shape(f_reg, "feature loss")?;
    let n = f_dri.data().len();
    if n == 0 {
        return Err(Error::Shape("feature loss over an empty plane".into()));
    }
    let sum: f64 = f_dri.data().iter().zip(f_reg.data()).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok(sum / n as f64)
}

/// Gradient of [`loss_feat`] with respect to `f_reg`.
pub fn loss_feat_grad(f_dri: &FeaturePlane<f64>, f_reg: &FeaturePlane<f64>) -> Result<FeaturePlane<f64>> {
    f_dri.ensure_shape(f_reg, "feature loss")?;
    let scale = 2.0 / f_dri.data().len() as f64;
    let (h, w, c) = f_reg.shape();
    let data = f_reg.data().iter().zip(f_dri.data()).map(|(r, d)| scale * (r - d)).collect();
    FeaturePlane::from_vec(h, w, c, data)
}

fn normalized_rows(x: &[f64], n: usize, d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if x.len() != n * d {
        return Err(Error::Shape(format!("{} values for a {n}x{d} matrix", x.len())));
    }
    let mut norms = Vec::with_capacity(n);
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow(i));
        }
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = v / norm;
        }
        norms.push(norm);
    }
    Ok((m, norms))
}

/// Sum of the off-diagonal entries of the pairwise cosine matrix of the rows
/// of `x` (`n x d`, row-major).
pub fn pcos(x: &[f64], n: usize, d: usize) -> Result<f64> {
    let (m, _) = normalized_rows(x, n, d)?;
    let gram = &m * m.transpose();
    Ok(gram.sum() - gram.trace())
}

/// Gradient of [`pcos`]. With `u_i = x_i / |x_i|` and `s = sum_j u_j` it is
/// `2 (s - (u_i . s) u_i) / |x_i|` for row `i`.
pub fn pcos_grad(x: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    let (m, norms) = normalized_rows(x, n, d)?;
    let s = m.row_sum();
    let mut g = vec![0.0; n * d];
    for i in 0..n {
        let u = m.row(i);
        let dot = u.dot(&s);
        for j in 0..d {
            g[i * d + j] = 2.0 * (s[j] - dot * u[j]) / norms[i];
        }
    }
    Ok(g)
}

fn reg_scale(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "the embedding regularizer needs at least 2 vertices, got {n}"
        )));
    }
    Ok(1.0 / (n * (n - 1)) as f64)
}

/// `pcos(e) / (n (n - 1))`; the background feature is not included.
pub fn loss_reg(emb: &VertexEmbeddings) -> Result<f64> {
    let n = emb.vertex_count();
    let scale = reg_scale(n)?;
    Ok(pcos(emb.rows(), n, emb.dim())? * scale)
}

pub fn loss_reg_grad(emb: &VertexEmbeddings) -> Result<Vec<f64>> {
    let n = emb.vertex_count();
    let scale = reg_scale(n)?;
    let mut g = pcos_grad(emb.rows(), n, emb.dim())?;
    g.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

pub fn loss_register(l_feat: f64, l_reg: f64, w: &LossWeights) -> f64 {
    w.lambda_feat * l_feat + w.lambda_reg * l_reg
}

/// Gradients for every register parameter, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterGrads {
    pub e: Vec<f64>,
    pub e_b: Vec<f64>,
    pub eproc1: Vec<(Vec<f64>, Vec<f64>)>,
    pub eproc2: Vec<(Vec<f64>, Vec<f64>)>,
}

impl RegisterGrads {
    /// Gradients from an upstream gradient on `f_reg` plus the regularizer
    /// weight applied to `e`.
    pub fn from_upstream(
        frame: &FrameGeometry,
        params: &RegisterParams,
        trace: &RegisterTrace,
        grad_f_reg: &FeaturePlane<f64>,
    ) -> Result<Self> {
        let back = register_backward(trace, params, grad_f_reg)?;
        let (e, e_b) = frame.backward(&back.f_s, params.emb().vertex_count())?;
        Ok(RegisterGrads {
            e,
            e_b,
            eproc1: back.eproc1.layers,
            eproc2: back.eproc2.layers,
        })
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &RegisterGrads, scale: f64) {
        let axpy = |d: &mut [f64], s: &[f64]| d.iter_mut().zip(s).for_each(|(d, s)| *d += scale * s);
        axpy(&mut self.e, &other.e);
        axpy(&mut self.e_b, &other.e_b);
        for (dst, src) in self.eproc1.iter_mut().zip(&other.eproc1).chain(self.eproc2.iter_mut().zip(&other.eproc2)) {
            axpy(&mut dst.0, &src.0);
            axpy(&mut dst.1, &src.1);
        }
    }

    pub fn zeros_like(params: &RegisterParams) -> Self {
        let layers = |enc: &Encoder| {
            enc.layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect()
        };
        RegisterGrads {
            e: vec![0.0; params.emb.rows().len()],
            e_b: vec![0.0; params.emb.background().len()],
            eproc1: layers(&params.eproc1),
            eproc2: layers(&params.eproc2),
        }
    }

    /// All gradient entries in parameter order (`e`, `e_b`, then each layer's
    /// weights and bias for E_proc-1 and E_proc-2).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.e);
        out.extend_from_slice(&self.e_b);
        for (w, b) in self.eproc1.iter().chain(&self.eproc2) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl RegisterParams {
    /// All parameters in the order of [`RegisterGrads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend_from_slice(self.emb.rows());
        out.extend_from_slice(self.emb.background());
        for l in self.eproc1.layers.iter().chain(&self.eproc2.layers) {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`RegisterParams::flatten`].
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} values for {} register parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut rest = values;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(self.emb.rows_mut());
        take(self.emb.background_mut());
        for l in self.eproc1.layers.iter_mut().chain(self.eproc2.layers.iter_mut()) {
            take(&mut l.weights);
            take(&mut l.bias);
        }
        Ok(())
    }
}

/// `L_register` of `f_reg` against `f_dri` for one frame, and its gradient
/// with respect to every register parameter.
pub fn register_objective(
    frame: &FrameGeometry,
    params: &RegisterParams,
    f_src: &FeaturePlane<f64>,
    f_dri: &FeaturePlane<f64>,
    weights: &LossWeights,
) -> Result<(f64, RegisterGrads)> {
    let f_s = assemble::<f64>(frame, params.emb())?;
    let trace = register_forward_traced(f_src, &f_s, params)?;
    let l_feat = loss_feat(f_dri, trace.f_reg())?;
    let l_reg = loss_reg(params.emb())?;
    let mut upstream = loss_feat_grad(f_dri, trace.f_reg())?;
    upstream.data_mut().iter_mut().for_each(|g| *g *= weights.lambda_feat);
    let mut grads = RegisterGrads::from_upstream(frame, params, &trace, &upstream)?;
    let reg = loss_reg_grad(params.emb())?;
    grads.e.iter_mut().zip(&reg).for_each(|(g, r)| *g += weights.lambda_reg * r);
    Ok((loss_register(l_feat, l_reg, weights), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeaturePlane<f64> {
        FeaturePlane::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pcos_examples() {
        assert!((pcos(&[1.0, 2.0].repeat(4), 4, 2).unwrap() - 12.0).abs() < 1e-12);
        assert!(pcos(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0], 3, 3).unwrap().abs() < 1e-15);
        assert!((pcos(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 3, 2).unwrap() - 2.0).abs() < 1e-15);
        match pcos(&[1.0, 0.0, 0.0, 0.0], 2, 2) {
            Err(Error::ZeroRow(1)) => {}
            other => panic!("expected zero-row error, got {other:?}"),
        }
    }

    #[test]
    fn loss_reg_examples() {
        let same = VertexEmbeddings::new(5, 2, [0.3, -0.4].repeat(5), vec![0.0; 2]).unwrap();
        assert!((loss_reg(&same).unwrap() - 1.0).abs() < 1e-15);
        let three = VertexEmbeddings::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![9.0, 9.0]).unwrap();
        assert!((loss_reg(&three).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let one = VertexEmbeddings::new(1, 2, vec![1.0, 0.0], vec![0.0; 2]).unwrap();
        assert!(loss_reg(&one).is_err());
    }

    #[test]
    fn loss_feat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_plane(&mut rng, 3, 4, 2);
        assert_eq!(loss_feat(&a, &a).unwrap(), 0.0);
        let shifted = FeaturePlane::from_vec(3, 4, 2, a.data().iter().map(|v| v + 2.0).collect()).unwrap();
        assert!((loss_feat(&a, &shifted).unwrap() - 4.0).abs() < 1e-12);
        let b = random_plane(&mut rng, 3, 4, 2);
        let mut direct = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            direct += (x - y).powi(2);
        }
        assert!((loss_feat(&a, &b).unwrap() - direct / 24.0).abs() < 1e-12);
        assert!(loss_feat(&a, &random_plane(&mut rng, 3, 4, 3)).is_err());
    }

    #[test]
    fn loss_register_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_register(0.0, 0.0, &w), 0.0);
        assert_eq!(loss_register(1.0, 1.0, &w), 22.0);
        assert_eq!(loss_register(0.5, 0.1, &w), 3.0);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let mut p = RegisterParams::init(4, 6, 4, 1).unwrap();
        for l in p.eproc1_mut().layers.iter_mut() {
            *l = ConvLayer::zeros(l.spec);
        }
        for l in p.eproc2_mut().layers.iter_mut() {
            *l = ConvLayer::zeros(l.spec);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f1, fr) = register_forward(&random_plane(&mut rng, 5, 5, 4), &random_plane(&mut rng, 5, 5, 6), &p).unwrap();
        assert!(f1.data().iter().chain(fr.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_second_encoder_adds_inputs() {
        let mut p = RegisterParams::init(4, 6, 4, 3).unwrap();
        let layers = p
            .eproc2()
            .layers
            .iter()
            .map(|l| ConvLayer::identity(4, l.spec.kernel, Activation::Linear).unwrap())
            .collect();
        p.eproc2_mut().layers = layers;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f_src = random_plane(&mut rng, 6, 6, 4);
        let (f1, fr) = register_forward(&f_src, &random_plane(&mut rng, 6, 6, 6), &p).unwrap();
        assert!(fr.max_abs_diff(&f_src.add(&f1).unwrap()) < 1e-15);
    }

    #[test]
    fn forward_composes_encoders() {
        let p = RegisterParams::init(12, 6, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f_src = random_plane(&mut rng, 8, 8, 4);
        let f_s = random_plane(&mut rng, 8, 8, 6);
        let (f1, fr) = register_forward(&f_src, &f_s, &p).unwrap();
        let mut x = f_s.clone();
        for l in &p.eproc1().layers {
            x = l.forward(&x).unwrap();
        }
        assert_eq!(x, f1);
        let mut y = f_src.add(&x).unwrap();
        for l in &p.eproc2().layers {
            y = l.forward(&y).unwrap();
        }
        assert_eq!(y, fr);
        assert_eq!(fr.shape(), (8, 8, 4));
        assert!(register_forward(&f_s, &f_s, &p).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = RegisterParams::init(7, 5, 3, 8).unwrap();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RGPM");
        assert_eq!(&buf[8..12], b"VEMB");
        let q = RegisterParams::read(&mut buf.as_slice()).unwrap();
        // Stored as 32-bit floats.
        assert!(p.flatten().iter().zip(q.flatten()).all(|(a, b)| (a - b).abs() <= a.abs() * 1e-7));
        let again = {
            let mut b2 = Vec::new();
            q.write(&mut b2).unwrap();
            b2
        };
        assert_eq!(buf, again);
        buf.push(1);
        assert!(RegisterParams::read(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let p = RegisterParams::init(5, 4, 3, 9).unwrap();
        let mut q = RegisterParams::init(5, 4, 3, 10).unwrap();
        q.unflatten(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert_eq!(RegisterGrads::zeros_like(&p).flatten().len(), p.parameter_count());
    }

    #[test]
    fn pcos_grad_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (6, 3);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = pcos_grad(&x, n, d).unwrap();
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (pcos(&p, n, d).unwrap() - pcos(&m, n, d).unwrap()) / 2e-6;
            assert!((g[i] - num).abs() / g[i].abs().max(1e-6) < 1e-6, "{i}: {} vs {num}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn pcos_scale_invariant_and_bounded(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..8),
            scales in prop::collection::vec(0.01f64..100.0, 8),
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let n = rows.len();
            let flat: Vec<f64> = rows.concat();
            let scaled: Vec<f64> = rows.iter().zip(&scales).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect();
            let a = pcos(&flat, n, 3).unwrap();
            prop_assert!((a - pcos(&scaled, n, 3).unwrap()).abs() < 1e-9);
            let bound = (n * (n - 1)) as f64;
            prop_assert!(a >= -bound - 1e-9 && a <= bound + 1e-9);
        }
    }
}
