//! Stride-1, same-padded 2D convolutions with reverse-mode gradients.
//!
//! Kernels are stored `[kh][kw][in][out]` so the innermost loop runs over
//! output channels.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::xavier_normal;
use crate::plane::FeaturePlane;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::InvalidArgument(format!("kernel size {kernel} is not 1 or 3")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(ConvLayerSpec {
            in_channels,
            out_channels,
            kernel,
            activation,
        })
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    fn weight_index(&self, ky: usize, kx: usize, i: usize, o: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + i) * self.out_channels + o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of one layer's parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: FeaturePlane<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(spec: ConvLayerSpec, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != spec.weight_len() || bias.len() != spec.out_channels {
            return Err(Error::Shape(format!(
                "layer {spec:?} needs {} weights and {} biases, got {} and {}",
                spec.weight_len(),
                spec.out_channels,
                weights.len(),
                bias.len()
            )));
        }
        Ok(ConvLayer { spec, weights, bias })
    }

    pub fn zeros(spec: ConvLayerSpec) -> Self {
        ConvLayer {
            weights: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.out_channels],
            spec,
        }
    }

    /// Xavier-normal kernel (fans `in*k*k`, `out*k*k`), zero bias.
    pub fn xavier<R: Rng>(spec: ConvLayerSpec, rng: &mut R) -> Self {
        let field = spec.kernel * spec.kernel;
        ConvLayer {
            weights: xavier_normal(rng, spec.weight_len(), spec.in_channels * field, spec.out_channels * field),
            bias: vec![0.0; spec.out_channels],
            spec,
        }
    }

    /// 1x1 or centered-3x3 identity mapping (requires `in == out`).
    pub fn identity(channels: usize, kernel: usize, activation: Activation) -> Result<Self> {
        let spec = ConvLayerSpec::new(channels, channels, kernel, activation)?;
        let mut layer = ConvLayer::zeros(spec);
        let c = kernel / 2;
        for i in 0..channels {
            let idx = spec.weight_index(c, c, i, i);
            layer.weights[idx] = 1.0;
        }
        Ok(layer)
    }

    pub fn weight(&self, ky: usize, kx: usize, i: usize, o: usize) -> f64 {
        self.weights[self.spec.weight_index(ky, kx, i, o)]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check_input(&self, input: &FeaturePlane<f64>) -> Result<()> {
        if input.channels() != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.spec.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    /// Pre-activation response (correlation plus bias).
    pub fn linear_response(&self, input: &FeaturePlane<f64>) -> Result<FeaturePlane<f64>> {
        self.check_input(input)?;
        let (h, w, cin) = input.shape();
        let cout = self.spec.out_channels;
        let k = self.spec.kernel;
        let pad = self.spec.padding() as isize;
        let src = input.data();
        let mut out = vec![0.0; h * w * cout];
        out.par_chunks_mut(w * cout).enumerate().for_each(|(r, row)| {
            for c in 0..w {
                let acc = &mut row[c * cout..(c + 1) * cout];
                acc.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let y = r as isize + ky as isize - pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = c as isize + kx as isize - pad;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let px = &src[(y as usize * w + x as usize) * cin..][..cin];
                        let block = &self.weights[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (i, &a) in px.iter().enumerate() {
                            let wrow = &block[i * cout..(i + 1) * cout];
                            for (o, &wv) in acc.iter_mut().zip(wrow) {
                                *o += a * wv;
                            }
                        }
                    }
                }
            }
        });
        FeaturePlane::from_vec(h, w, cout, out)
    }

    /// Same-padded correlation, bias and activation.
    pub fn forward(&self, input: &FeaturePlane<f64>) -> Result<FeaturePlane<f64>> {
        let mut out = self.linear_response(input)?;
        if self.spec.activation != Activation::Linear {
            let act = self.spec.activation;
            out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(out)
    }

    /// Gradients given the layer input, its pre-activation response and the
    /// gradient with respect to the activated output.
    pub fn backward(
        &self,
        input: &FeaturePlane<f64>,
        pre_activation: &FeaturePlane<f64>,
        grad_out: &FeaturePlane<f64>,
    ) -> Result<ConvGrads> {
        self.check_input(input)?;
        let (h, w, cin) = input.shape();
        let cout = self.spec.out_channels;
        if pre_activation.shape() != (h, w, cout) || grad_out.shape() != (h, w, cout) {
            return Err(Error::Shape(format!(
                "conv backward: input {:?}, pre-activation {:?}, upstream {:?}",
                input.shape(),
                pre_activation.shape(),
                grad_out.shape()
            )));
        }
        let act = self.spec.activation;
        let g: Vec<f64> = grad_out
            .data()
            .iter()
            .zip(pre_activation.data())
            .map(|(&g, &z)| g * act.derivative(z))
            .collect();
        let k = self.spec.kernel;
        let pad = self.spec.padding() as isize;
        let src = input.data();

        // Input gradient: gather over the output pixels each input feeds.
        let mut grad_in = vec![0.0; h * w * cin];
        grad_in.par_chunks_mut(w * cin).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let acc = &mut row[x * cin..(x + 1) * cin];
                for ky in 0..k {
                    let r = y as isize - ky as isize + pad;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let c = x as isize - kx as isize + pad;
                        if c < 0 || c >= w as isize {
                            continue;
                        }
                        let gp = &g[(r as usize * w + c as usize) * cout..][..cout];
                        let block = &self.weights[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (i, a) in acc.iter_mut().enumerate() {
                            let wrow = &block[i * cout..(i + 1) * cout];
                            *a += wrow.iter().zip(gp).map(|(wv, gv)| wv * gv).sum::<f64>();
                        }
                    }
                }
            }
        });

        // Parameter gradients: per-row partials summed in row order so the
        // result does not depend on the thread count.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|r| {
                let mut gw = vec![0.0; self.weights.len()];
                let mut gb = vec![0.0; cout];
                for c in 0..w {
                    let gp = &g[(r * w + c) * cout..][..cout];
                    for (b, &gv) in gb.iter_mut().zip(gp) {
                        *b += gv;
                    }
                    for ky in 0..k {
                        let y = r as isize + ky as isize - pad;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = c as isize + kx as isize - pad;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let px = &src[(y as usize * w + x as usize) * cin..][..cin];
                            let block = &mut gw[(ky * k + kx) * cin * cout..][..cin * cout];
                            for (i, &a) in px.iter().enumerate() {
                                for (dst, &gv) in block[i * cout..(i + 1) * cout].iter_mut().zip(gp) {
                                    *dst += a * gv;
                                }
                            }
                        }
                    }
                }
                (gw, gb)
            })
            .collect();
        let mut grad_w = vec![0.0; self.weights.len()];
        let mut grad_b = vec![0.0; cout];
        for (gw, gb) in partials {
            grad_w.iter_mut().zip(&gw).for_each(|(d, s)| *d += s);
            grad_b.iter_mut().zip(&gb).for_each(|(d, s)| *d += s);
        }
        Ok(ConvGrads {
            input: FeaturePlane::from_vec(h, w, cin, grad_in)?,
            weights: grad_w,
            bias: grad_b,
        })
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Input of each layer; the last entry is the encoder output.
    pub inputs: Vec<FeaturePlane<f64>>,
    pub pre_activations: Vec<FeaturePlane<f64>>,
}

impl EncoderTrace {
    pub fn output(&self) -> &FeaturePlane<f64> {
        self.inputs.last().expect("trace holds the encoder input")
    }
}

/// A stack of convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

/// Parameter gradients of an encoder plus the gradient at its input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub input: FeaturePlane<f64>,
    /// `(weights, bias)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Encoder {
    /// Builds a stack from output channel sizes and kernel sizes; every layer
    /// but the last uses the leaky rectifier.
    pub fn from_sizes<R: Rng>(in_channels: usize, outs: &[usize], kernels: &[usize], rng: &mut R) -> Result<Self> {
        if outs.len() != kernels.len() || outs.is_empty() {
            return Err(Error::InvalidArgument("channel and kernel lists must match and be non-empty".into()));
        }
        let mut layers = Vec::with_capacity(outs.len());
        let mut cin = in_channels;
        for (i, (&cout, &k)) in outs.iter().zip(kernels).enumerate() {
            let act = if i + 1 == outs.len() {
                Activation::Linear
            } else {
                Activation::LeakyRelu
            };
            layers.push(ConvLayer::xavier(ConvLayerSpec::new(cin, cout, k, act)?, rng));
            cin = cout;
        }
        Ok(Encoder { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_channels)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::parameter_count).sum()
    }

    pub fn forward(&self, input: &FeaturePlane<f64>) -> Result<FeaturePlane<f64>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_traced(&self, input: &FeaturePlane<f64>) -> Result<EncoderTrace> {
        let mut inputs = vec![input.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = layer.linear_response(inputs.last().expect("non-empty"))?;
            let act = layer.spec.activation;
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            pre_activations.push(z);
            inputs.push(a);
        }
        Ok(EncoderTrace { inputs, pre_activations })
    }

    pub fn backward(&self, trace: &EncoderTrace, grad_out: &FeaturePlane<f64>) -> Result<EncoderGrads> {
        let mut grad = grad_out.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = layer.backward(&trace.inputs[i], &trace.pre_activations[i], &grad)?;
            layers.push((g.weights, g.bias));
            grad = g.input;
        }
        layers.reverse();
        Ok(EncoderGrads { input: grad, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeaturePlane<f64> {
        FeaturePlane::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop evaluation of the same-padded correlation.
    fn naive(layer: &ConvLayer, input: &FeaturePlane<f64>) -> FeaturePlane<f64> {
        let (h, w, cin) = input.shape();
        let s = layer.spec;
        let p = s.padding() as isize;
        FeaturePlane::from_fn(h, w, s.out_channels, |r, c, o| {
            let mut acc = layer.bias[o];
            for ky in 0..s.kernel {
                for kx in 0..s.kernel {
                    for i in 0..cin {
                        let y = r as isize + ky as isize - p;
                        let x = c as isize + kx as isize - p;
                        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                            acc += layer.weight(ky, kx, i, o) * input.at(y as usize, x as usize)[i];
                        }
                    }
                }
            }
            s.activation.apply(acc)
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 4, 5, 3);
        let layer = ConvLayer::identity(3, 1, Activation::Linear).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn averaging_kernel_keeps_constant_interior() {
        let spec = ConvLayerSpec::new(1, 1, 3, Activation::Linear).unwrap();
        let layer = ConvLayer::new(spec, vec![1.0 / 9.0; 9], vec![0.0]).unwrap();
        let x = FeaturePlane::from_fn(6, 6, 1, |_, _, _| 2.5);
        let y = layer.forward(&x).unwrap();
        // Zero padding dilutes the border, the interior keeps the constant.
        for r in 1..5 {
            for c in 1..5 {
                assert!((y.at(r, c)[0] - 2.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_plane(&mut rng, 5, 5, 2);
        for act in [Activation::Linear, Activation::LeakyRelu] {
            let spec = ConvLayerSpec::new(2, 3, 3, act).unwrap();
            let mut layer = ConvLayer::xavier(spec, &mut rng);
            layer.bias = vec![0.1, -0.2, 0.3];
            let fast = layer.forward(&x).unwrap();
            assert!(fast.max_abs_diff(&naive(&layer, &x)) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let layer = ConvLayer::zeros(ConvLayerSpec::new(2, 2, 3, Activation::Linear).unwrap());
        assert!(layer.forward(&FeaturePlane::zeros(3, 3, 3)).is_err());
        assert!(ConvLayerSpec::new(2, 2, 5, Activation::Linear).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_plane(&mut rng, 4, 4, 2);
        let layer = ConvLayer::xavier(ConvLayerSpec::new(2, 3, 3, Activation::LeakyRelu).unwrap(), &mut rng);
        let z = layer.linear_response(&x).unwrap();
        let g = layer.backward(&x, &z, &FeaturePlane::zeros(4, 4, 3)).unwrap();
        assert!(g.input.data().iter().chain(&g.weights).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn delta_upstream_recovers_input_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_plane(&mut rng, 5, 5, 2);
        let layer = ConvLayer::xavier(ConvLayerSpec::new(2, 1, 3, Activation::Linear).unwrap(), &mut rng);
        let z = layer.linear_response(&x).unwrap();
        let mut up = FeaturePlane::zeros(5, 5, 1);
        up.pixel_mut(crate::geometry::PixelCoord::new(2, 3))[0] = 1.0;
        let g = layer.backward(&x, &z, &up).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                for i in 0..2 {
                    let want = x.at(2 + ky - 1, 3 + kx - 1)[i];
                    assert_eq!(g.weights[layer.spec.weight_index(ky, kx, i, 0)], want);
                }
            }
        }
        assert_eq!(g.bias, vec![1.0]);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w, cin, cout, k) in [(4, 5, 2, 3, 3), (3, 3, 3, 2, 1), (6, 4, 1, 2, 3)] {
            let x = random_plane(&mut rng, h, w, cin);
            let mut layer = ConvLayer::xavier(ConvLayerSpec::new(cin, cout, k, Activation::LeakyRelu).unwrap(), &mut rng);
            layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            let probe = random_plane(&mut rng, h, w, cout);
            let loss = |l: &ConvLayer, x: &FeaturePlane<f64>| -> f64 {
                l.forward(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let z = layer.linear_response(&x).unwrap();
            let g = layer.backward(&x, &z, &probe).unwrap();
            let step = 1e-6;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            for i in 0..layer.weights.len() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.weights[i] += step;
                m.weights[i] -= step;
                let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * step);
                assert!(rel(g.weights[i], num) < 1e-6, "weight {i}: {} vs {num}", g.weights[i]);
            }
            for o in 0..cout {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.bias[o] += step;
                m.bias[o] -= step;
                let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * step);
                assert!(rel(g.bias[o], num) < 1e-6);
            }
            for i in 0..x.data().len() {
                let (mut p, mut m) = (x.clone(), x.clone());
                p.data_mut()[i] += step;
                m.data_mut()[i] -= step;
                let num = (loss(&layer, &p) - loss(&layer, &m)) / (2.0 * step);
                assert!(rel(g.input.data()[i], num) < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_backward_chains_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::from_sizes(2, &[3, 2], &[3, 1], &mut rng).unwrap();
        let x = random_plane(&mut rng, 4, 4, 2);
        let trace = enc.forward_traced(&x).unwrap();
        assert_eq!(trace.output(), &enc.forward(&x).unwrap());
        let probe = random_plane(&mut rng, 4, 4, 2);
        let g = enc.backward(&trace, &probe).unwrap();
        let loss = |x: &FeaturePlane<f64>| -> f64 { enc.forward(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };
        for i in 0..x.data().len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += 1e-6;
            m.data_mut()[i] -= 1e-6;
            let num = (loss(&p) - loss(&m)) / 2e-6;
            assert!((g.input.data()[i] - num).abs() < 1e-7);
        }
    }
}
