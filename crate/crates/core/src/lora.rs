//! Low-rank adapters around frozen dense weights.
//!
//! A layer computes `W x + B (A x)` while training and `(W + B A) x` after
//! merging. There is no `alpha / r` scaling.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio;
use crate::error::{Error, Result};
use crate::plane::{FeaturePlane, Real};

pub const DEFAULT_RANK: usize = 32;
pub const LORA_MAGIC: &[u8; 4] = b"LORA";
pub const DENSE_MAGIC: &[u8; 4] = b"DNSW";

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T: Real = f64> {
    m: usize,
    n: usize,
    r: usize,
    /// `m x n`, row-major.
    w: Vec<T>,
    /// `r x n`, row-major; empty once merged.
    a: Vec<T>,
    /// `m x r`, row-major; empty once merged.
    b: Vec<T>,
    merged: bool,
}

fn matvec<T: Real>(mat: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    (0..rows)
        .map(|i| {
            let mut acc = T::zero();
            for (&m, &v) in mat[i * cols..(i + 1) * cols].iter().zip(x) {
                acc += m * v;
            }
            acc
        })
        .collect()
}

/// Row-major product accumulated in 64-bit.
fn matvec_wide<T: Real>(mat: &[T], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            mat[i * cols..(i + 1) * cols]
                .iter()
                .zip(x)
                .map(|(m, v)| m.as_f64() * v)
                .sum()
        })
        .collect()
}

fn narrow<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

fn matvec_t<T: Real>(mat: &[T], rows: usize, cols: usize, y: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (i, &yi) in y.iter().enumerate().take(rows) {
        for (o, &m) in out.iter_mut().zip(&mat[i * cols..(i + 1) * cols]) {
            *o += m * yi;
        }
    }
    out
}

impl<T: Real> LoraLayer<T> {
    /// Wraps the frozen `m x n` matrix `w` with `B = 0` and
    /// `A ~ N(0, 1/r^2)`; `rank` defaults to [`DEFAULT_RANK`].
    pub fn init(w: Vec<T>, m: usize, n: usize, rank: Option<usize>, seed: u64) -> Result<Self> {
        let r = rank.unwrap_or(DEFAULT_RANK);
        if w.len() != m * n {
            return Err(Error::Shape(format!("{} weights for a {m}x{n} layer", w.len())));
        }
        if r == 0 || r > m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} is outside 1..={} for a {m}x{n} layer",
                m.min(n)
            )));
        }
        if 4 * r > m.min(n) {
            log::warn!("rank {r} is above a quarter of min({m}, {n}); the update is barely low-rank");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / r as f64).expect("finite std");
        let a = (0..r * n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect();
        Ok(LoraLayer {
            m,
            n,
            r,
            w,
            a,
            b: vec![T::zero(); m * r],
            merged: false,
        })
    }

    /// Layer with explicit factors, used when loading checkpoints.
    pub fn from_parts(w: Vec<T>, a: Vec<T>, b: Vec<T>, m: usize, n: usize, r: usize) -> Result<Self> {
        if w.len() != m * n || a.len() != r * n || b.len() != m * r {
            return Err(Error::Shape(format!(
                "factor sizes {}, {}, {} do not fit m={m}, n={n}, r={r}",
                w.len(),
                a.len(),
                b.len()
            )));
        }
        if r == 0 || r > m.min(n) {
            return Err(Error::InvalidArgument(format!("rank {r} is invalid for a {m}x{n} layer")));
        }
        Ok(LoraLayer {
            m,
            n,
            r,
            w,
            a,
            b,
            merged: false,
        })
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn w(&self) -> &[T] {
        &self.w
    }

    pub fn a(&self) -> &[T] {
        &self.a
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut [T] {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut [T] {
        &mut self.b
    }

    pub fn factors_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.a, &mut self.b)
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.a.len() + self.b.len()
    }

    fn ensure_unmerged(&self) -> Result<()> {
        if self.merged {
            return Err(Error::LoraState("layer is already merged".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Shape(format!("input of length {} for {} columns", x.len(), self.n)));
        }
        Ok(())
    }

    /// `W x + B (A x)` without forming `B A`, accumulated in 64-bit and
    /// rounded once.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.ensure_unmerged()?;
        self.check_input(x)?;
        let x: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        let ax = matvec_wide(&self.a, self.r, self.n, &x);
        let bax = matvec_wide(&self.b, self.m, self.r, &ax);
        let mut y = matvec_wide(&self.w, self.m, self.n, &x);
        y.iter_mut().zip(bax).for_each(|(y, d)| *y += d);
        Ok(narrow(&y))
    }

    /// Plain `W x`; after a merge this is the adapted layer.
    pub fn forward_merged(&self, x: &[T]) -> Result<Vec<T>> {
        if !self.merged {
            return Err(Error::LoraState("layer is not merged".into()));
        }
        self.check_input(x)?;
        let x: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        Ok(narrow(&matvec_wide(&self.w, self.m, self.n, &x)))
    }

    /// `(grad_A, grad_B)` for the upstream gradient `g` at input `x`.
    pub fn grads(&self, g: &[T], x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.ensure_unmerged()?;
        self.check_input(x)?;
        if g.len() != self.m {
            return Err(Error::Shape(format!("upstream of length {} for {} rows", g.len(), self.m)));
        }
        let mut grad_a = vec![T::zero(); self.r * self.n];
        let mut grad_b = vec![T::zero(); self.m * self.r];
        self.accumulate_grads(g, x, &mut grad_a, &mut grad_b);
        Ok((grad_a, grad_b))
    }

    fn accumulate_grads(&self, g: &[T], x: &[T], grad_a: &mut [T], grad_b: &mut [T]) {
        let ax = matvec(&self.a, self.r, self.n, x);
        let btg = matvec_t(&self.b, self.m, self.r, g);
        for i in 0..self.m {
            for k in 0..self.r {
                grad_b[i * self.r + k] += g[i] * ax[k];
            }
        }
        for k in 0..self.r {
            for j in 0..self.n {
                grad_a[k * self.n + j] += btg[k] * x[j];
            }
        }
    }

    /// Gradient with respect to the layer input: `W^T g + A^T (B^T g)`.
    pub fn input_grad(&self, g: &[T]) -> Result<Vec<T>> {
        self.ensure_unmerged()?;
        let btg = matvec_t(&self.b, self.m, self.r, g);
        let mut out = matvec_t(&self.w, self.m, self.n, g);
        out.iter_mut().zip(matvec_t(&self.a, self.r, self.n, &btg)).for_each(|(o, d)| *o += d);
        Ok(out)
    }

    /// `B A` as an `m x n` matrix.
    pub fn delta(&self) -> Vec<T> {
        narrow(&self.delta_wide())
    }

    fn delta_wide(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.m * self.n];
        if self.merged {
            return d;
        }
        for i in 0..self.m {
            for k in 0..self.r {
                let bik = self.b[i * self.r + k].as_f64();
                if bik == 0.0 {
                    continue;
                }
                for j in 0..self.n {
                    d[i * self.n + j] += bik * self.a[k * self.n + j].as_f64();
                }
            }
        }
        d
    }

    /// Folds `B A` into `W` and drops the factors.
    pub fn merge(mut self) -> Result<Self> {
        self.ensure_unmerged()?;
        if self.b.iter().any(|&v| v != T::zero()) {
            let d = self.delta_wide();
            self.w
                .iter_mut()
                .zip(d)
                .for_each(|(w, d)| *w = T::from_f64_lossy(w.as_f64() + d));
        }
        self.a = Vec::new();
        self.b = Vec::new();
        self.merged = true;
        Ok(self)
    }

    /// Per-pixel application to a plane with `n` channels (factored form).
    pub fn forward_plane(&self, x: &FeaturePlane<T>) -> Result<FeaturePlane<T>> {
        self.apply_plane(x, |px| self.forward(px))
    }

    pub fn forward_plane_merged(&self, x: &FeaturePlane<T>) -> Result<FeaturePlane<T>> {
        self.apply_plane(x, |px| self.forward_merged(px))
    }

    fn apply_plane(&self, x: &FeaturePlane<T>, f: impl Fn(&[T]) -> Result<Vec<T>>) -> Result<FeaturePlane<T>> {
        if x.channels() != self.n {
            return Err(Error::Shape(format!("plane has {} channels, layer takes {}", x.channels(), self.n)));
        }
        let mut out = Vec::with_capacity(x.pixel_count() * self.m);
        for px in x.data().chunks(self.n) {
            out.extend(f(px)?);
        }
        FeaturePlane::from_vec(x.height(), x.width(), self.m, out)
    }

    /// Factor gradients summed over pixels and the gradient at the input
    /// plane, for an upstream gradient plane `g`.
    pub fn backward_plane(&self, x: &FeaturePlane<T>, g: &FeaturePlane<T>) -> Result<(Vec<T>, Vec<T>, FeaturePlane<T>)> {
        self.ensure_unmerged()?;
        if x.channels() != self.n || g.channels() != self.m || x.pixel_count() != g.pixel_count() {
            return Err(Error::Shape("head backward: plane shapes do not match the layer".into()));
        }
        let mut grad_a = vec![T::zero(); self.r * self.n];
        let mut grad_b = vec![T::zero(); self.m * self.r];
        let mut grad_x = Vec::with_capacity(x.data().len());
        for (px, gp) in x.data().chunks(self.n).zip(g.data().chunks(self.m)) {
            self.accumulate_grads(gp, px, &mut grad_a, &mut grad_b);
            grad_x.extend(self.input_grad(gp)?);
        }
        Ok((grad_a, grad_b, FeaturePlane::from_vec(x.height(), x.width(), self.n, grad_x)?))
    }

    pub fn cast<U: Real>(&self) -> LoraLayer<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        LoraLayer {
            m: self.m,
            n: self.n,
            r: self.r,
            w: c(&self.w),
            a: c(&self.a),
            b: c(&self.b),
            merged: self.merged,
        }
    }
}

/// Writes the adapter factors of unmerged layers.
pub fn write_lora<T: Real, W: Write>(w: &mut W, layers: &[LoraLayer<T>]) -> Result<()> {
    binio::write_header(w, LORA_MAGIC, 1)?;
    binio::write_len(w, layers.len())?;
    for l in layers {
        l.ensure_unmerged()?;
        binio::write_len(w, l.m)?;
        binio::write_len(w, l.n)?;
        binio::write_len(w, l.r)?;
        binio::write_f32s(w, l.a.iter().map(|v| v.as_f64()))?;
        binio::write_f32s(w, l.b.iter().map(|v| v.as_f64()))?;
    }
    Ok(())
}

/// Adapter factors `(m, n, r, A, B)` per layer.
pub type LoraFactors = (usize, usize, usize, Vec<f64>, Vec<f64>);

pub fn read_lora<R: Read>(r: &mut R) -> Result<Vec<LoraFactors>> {
    binio::read_header(r, LORA_MAGIC, 1)?;
    let count = binio::read_len(r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let m = binio::read_len(r)?;
        let n = binio::read_len(r)?;
        let rank = binio::read_len(r)?;
        let a = binio::read_f32s(r, rank * n)?.into_iter().map(f64::from).collect();
        let b = binio::read_f32s(r, m * rank)?.into_iter().map(f64::from).collect();
        out.push((m, n, rank, a, b));
    }
    binio::expect_eof(r)?;
    Ok(out)
}

/// Dense weight matrices `(m, n, W)`.
pub type DenseWeights = (usize, usize, Vec<f64>);

/// Writes the `W` matrices of each layer (the adapted weights once merged).
pub fn write_dense<T: Real, W: Write>(w: &mut W, layers: &[LoraLayer<T>]) -> Result<()> {
    binio::write_header(w, DENSE_MAGIC, 1)?;
    binio::write_len(w, layers.len())?;
    for l in layers {
        binio::write_len(w, l.m)?;
        binio::write_len(w, l.n)?;
        binio::write_f32s(w, l.w.iter().map(|v| v.as_f64()))?;
    }
    Ok(())
}

pub fn read_dense<R: Read>(r: &mut R) -> Result<Vec<DenseWeights>> {
    binio::read_header(r, DENSE_MAGIC, 1)?;
    let count = binio::read_len(r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let m = binio::read_len(r)?;
        let n = binio::read_len(r)?;
        let w = binio::read_f32s(r, m * n)?.into_iter().map(f64::from).collect();
        out.push((m, n, w));
    }
    binio::expect_eof(r)?;
    Ok(out)
}

pub fn save_with<F>(path: impl AsRef<Path>, f: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>,
{
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut file)?;
    file.flush()?;
    Ok(())
}

/// Rebuilds unmerged layers from a dense checkpoint of the frozen weights
/// and a LoRA checkpoint.
pub fn layers_from_checkpoints(dense: Vec<DenseWeights>, factors: Vec<LoraFactors>) -> Result<Vec<LoraLayer<f64>>> {
    if dense.len() != factors.len() {
        return Err(Error::Format(format!(
            "{} dense layers but {} adapter layers",
            dense.len(),
            factors.len()
        )));
    }
    dense
        .into_iter()
        .zip(factors)
        .map(|((m, n, w), (fm, fn_, r, a, b))| {
            if (m, n) != (fm, fn_) {
                return Err(Error::Format(format!("dense {m}x{n} paired with adapter {fm}x{fn_}")));
            }
            LoraLayer::from_parts(w, a, b, m, n, r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_layer(m: usize, n: usize, r: usize, seed: u64) -> LoraLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut l = LoraLayer::init(w, m, n, Some(r), seed).unwrap();
        l.b_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        l
    }

    fn dense_apply(l: &LoraLayer<f64>, x: &[f64]) -> Vec<f64> {
        let total: Vec<f64> = l.w().iter().zip(l.delta()).map(|(w, d)| w + d).collect();
        matvec(&total, l.rows(), l.cols(), x)
    }

    #[test]
    fn init_has_zero_update_and_default_rank() {
        let l = LoraLayer::init(vec![0.5; 64 * 40], 64, 40, None, 1).unwrap();
        assert_eq!(l.rank(), 32);
        assert!(l.delta().iter().all(|&v| v == 0.0));
        assert_eq!(l.a(), LoraLayer::init(vec![0.5; 64 * 40], 64, 40, None, 1).unwrap().a());
        assert!(LoraLayer::init(vec![0.0; 6], 2, 3, Some(3), 1).is_err());
        assert!(LoraLayer::init(vec![0.0; 6], 2, 3, Some(0), 1).is_err());
    }

    #[test]
    fn factor_std_is_one_over_rank() {
        let l = LoraLayer::init(vec![0.0; 400 * 400], 400, 400, Some(16), 3).unwrap();
        let a = l.a();
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var.sqrt() - 1.0 / 16.0).abs() < 0.002);
    }

    #[test]
    fn forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = LoraLayer::init((0..12).map(|i| i as f64).collect(), 3, 4, Some(2), 5).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(l.forward(&x).unwrap(), matvec(l.w(), 3, 4, &x));

        let ones = LoraLayer::from_parts(vec![0.0; 12], vec![1.0; 4], vec![1.0; 3], 3, 4, 1).unwrap();
        let y = ones.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![10.0; 3]);

        let l = random_layer(6, 5, 3, 7);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (l.forward(&x).unwrap(), dense_apply(&l, &x));
        assert!(a.iter().zip(&b).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn grads_match_differences() {
        let l = random_layer(5, 4, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |l: &LoraLayer<f64>| l.forward(&x).unwrap().iter().zip(&g).map(|(y, g)| y * g).sum::<f64>();
        let (ga, gb) = l.grads(&g, &x).unwrap();
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..ga.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.a_mut()[i] += 1e-6;
            m.a_mut()[i] -= 1e-6;
            assert!(rel(ga[i], (loss(&p) - loss(&m)) / 2e-6) < 1e-6);
        }
        for i in 0..gb.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.b_mut()[i] += 1e-6;
            m.b_mut()[i] -= 1e-6;
            assert!(rel(gb[i], (loss(&p) - loss(&m)) / 2e-6) < 1e-6);
        }
        let (za, zb) = l.grads(&[0.0; 5], &x).unwrap();
        assert!(za.iter().chain(&zb).all(|&v| v == 0.0));
    }

    #[test]
    fn grads_do_not_depend_on_w() {
        let l = random_layer(5, 4, 2, 13);
        let mut other = LoraLayer::from_parts(vec![3.0; 20], l.a().to_vec(), l.b().to_vec(), 5, 4, 2).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4];
        let g = [1.0, -1.0, 0.5, 0.25, 2.0];
        assert_eq!(l.grads(&g, &x).unwrap(), other.grads(&g, &x).unwrap());
        other.a_mut()[0] += 1.0;
        assert_ne!(l.grads(&g, &x).unwrap(), other.grads(&g, &x).unwrap());
    }

    #[test]
    fn merge_matches_unmerged_in_both_precisions() {
        let l = random_layer(16, 12, 4, 17);
        let merged = l.clone().merge().unwrap();
        let l32 = l.cast::<f32>();
        let merged32 = l32.clone().merge().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = l.forward(&x).unwrap();
            let b = merged.forward_merged(&x).unwrap();
            worst64 = a.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(worst64, f64::max);
            let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let a = l32.forward(&x32).unwrap();
            let b = merged32.forward_merged(&x32).unwrap();
            worst32 = a.iter().zip(&b).map(|(a, b)| (a - b).abs() as f64).fold(worst32, f64::max);
        }
        assert!(worst64 < 1e-12, "{worst64}");
        assert!(worst32 < 1e-6, "{worst32}");
    }

    #[test]
    fn merge_bookkeeping() {
        let l = LoraLayer::init(vec![0.25; 20], 5, 4, Some(2), 1).unwrap();
        let m = l.clone().merge().unwrap();
        assert_eq!(m.w(), l.w());
        assert_eq!(m.parameter_count(), 20);
        assert!(m.clone().merge().is_err());
        assert!(m.forward(&[0.0; 4]).is_err());
        assert!(l.forward_merged(&[0.0; 4]).is_err());
    }

    #[test]
    fn update_rank_is_bounded() {
        let l = random_layer(9, 7, 2, 21);
        let d = DMatrix::from_row_slice(9, 7, &l.delta());
        let sv = d.singular_values();
        assert!(sv.iter().filter(|&&s| s > 1e-9).count() <= 2);
    }

    #[test]
    fn plane_backward_matches_vector_form() {
        let l = random_layer(3, 4, 2, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = FeaturePlane::from_fn(2, 2, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let g = FeaturePlane::from_fn(2, 2, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let (ga, gb, gx) = l.backward_plane(&x, &g).unwrap();
        let mut sa = vec![0.0; ga.len()];
        let mut sb = vec![0.0; gb.len()];
        for p in 0..4 {
            let (a, b) = l.grads(&g.data()[p * 3..p * 3 + 3], &x.data()[p * 4..p * 4 + 4]).unwrap();
            sa.iter_mut().zip(a).for_each(|(s, v)| *s += v);
            sb.iter_mut().zip(b).for_each(|(s, v)| *s += v);
            let ix = l.input_grad(&g.data()[p * 3..p * 3 + 3]).unwrap();
            assert_eq!(&gx.data()[p * 4..p * 4 + 4], ix.as_slice());
        }
        assert!(sa.iter().zip(&ga).chain(sb.iter().zip(&gb)).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn checkpoints_round_trip() {
        let layers = vec![random_layer(4, 3, 2, 31), random_layer(2, 2, 1, 32)];
        let mut lbuf = Vec::new();
        write_lora(&mut lbuf, &layers).unwrap();
        assert_eq!(&lbuf[..4], b"LORA");
        assert_eq!(&lbuf[8..12], &2u32.to_le_bytes());
        assert_eq!(&lbuf[12..24], &[4u32.to_le_bytes(), 3u32.to_le_bytes(), 2u32.to_le_bytes()].concat());
        assert_eq!(lbuf.len(), 12 + 12 + 4 * (6 + 8) + 12 + 4 * (2 + 2));
        let mut dbuf = Vec::new();
        write_dense(&mut dbuf, &layers).unwrap();
        let rebuilt = layers_from_checkpoints(read_dense(&mut dbuf.as_slice()).unwrap(), read_lora(&mut lbuf.as_slice()).unwrap()).unwrap();
        for (a, b) in layers.iter().zip(&rebuilt) {
            assert!(a.w().iter().zip(b.w()).all(|(x, y)| (x - y).abs() < 1e-6));
            assert!(a.b().iter().zip(b.b()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        let merged = vec![layers[0].clone().merge().unwrap()];
        assert!(write_lora(&mut Vec::new(), &merged).is_err());
    }
}
