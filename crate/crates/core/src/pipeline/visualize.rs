//! Channel-wise PCA renderings of feature planes as binary PPM images.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::plane::{FeaturePlane, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisMode {
    /// Clip at three standard deviations.
    Dino,
    /// Clip at one standard deviation.
    Register,
}

impl VisMode {
    pub fn clip(self) -> f64 {
        match self {
            VisMode::Dino => 3.0,
            VisMode::Register => 1.0,
        }
    }
}

impl FromStr for VisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dino" => Ok(VisMode::Dino),
            "register" => Ok(VisMode::Register),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?} (expected dino or register)"))),
        }
    }
}

/// Projection of every pixel onto principal component `component`
/// (0 = largest variance), standardized to zero mean and unit variance.
/// The component's sign is fixed so its largest-magnitude loading is
/// positive.
pub fn pca_projection<T: Real>(plane: &FeaturePlane<T>, component: usize) -> Result<Vec<f64>> {
    let (h, w, c) = plane.shape();
    if component >= c {
        return Err(Error::InvalidArgument(format!(
            "component {component} requested from a {c}-channel plane"
        )));
    }
    let n = h * w;
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two pixels".into()));
    }
    let x = DMatrix::from_fn(n, c, |i, j| plane.data()[i * c + j].as_f64());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut v = eig.eigenvectors.column(order[component]).into_owned();
    let lead = (0..c)
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
        .expect("non-empty");
    if v[lead] < 0.0 {
        v = -v;
    }
    let proj: Vec<f64> = (centered * v).iter().copied().collect();
    let mu = proj.iter().sum::<f64>() / n as f64;
    let var = proj.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n as f64;
    // Rounding in the mean leaves residue around 1e-16 of the data size.
    let magnitude = x.amax();
    if !(var > (1e-12 * magnitude).powi(2)) {
        return Err(Error::Degenerate("feature plane has zero variance along the requested component".into()));
    }
    let sd = var.sqrt();
    Ok(proj.iter().map(|p| (p - mu) / sd).collect())
}

/// 256-level diverging map: level 0 is blue, 255 is red, the middle is
/// white.
pub fn colormap(level: u8) -> [u8; 3] {
    let s = level as f64 / 255.0;
    if s < 0.5 {
        let u = s / 0.5;
        let c = (255.0 * u).round() as u8;
        [c, c, 255]
    } else {
        let u = (s - 0.5) / 0.5;
        let c = (255.0 * (1.0 - u)).round() as u8;
        [255, c, c]
    }
}

/// Colormap level of a standardized value clipped to `[-clip, clip]`.
pub fn level(value: f64, clip: f64) -> u8 {
    let t = (value.clamp(-clip, clip) + clip) / (2.0 * clip);
    (t * 255.0).round() as u8
}

/// RGB image with row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_ppm())?;
        f.flush()?;
        Ok(())
    }

    /// Parses a binary PPM with a max value of 255 and no comments.
    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s:?}")));
        if fields[0] != "P6" || num(&fields[3])? != 255 {
            return Err(Error::Format("not an 8-bit P6 image".into()));
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let rgb = bytes.get(pos..).unwrap_or_default().to_vec();
        if rgb.len() != width * height * 3 {
            return Err(Error::Format(format!("PPM payload of {} bytes for {width}x{height}", rgb.len())));
        }
        Ok(Image { width, height, rgb })
    }
}

pub fn render<T: Real>(plane: &FeaturePlane<T>, component: usize, mode: VisMode) -> Result<Image> {
    let proj = pca_projection(plane, component)?;
    let clip = mode.clip();
    let rgb = proj.iter().flat_map(|&v| colormap(level(v, clip))).collect();
    Ok(Image {
        width: plane.width(),
        height: plane.height(),
        rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_plane_is_rejected() {
        let p = FeaturePlane::<f64>::from_fn(4, 4, 3, |_, _, c| c as f64);
        assert!(pca_projection(&p, 0).is_err());
        assert!(pca_projection(&p, 3).is_err());
    }

    #[test]
    fn leading_component_follows_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FeaturePlane::<f64>::from_fn(6, 10, 2, |_, c, ch| {
            if ch == 0 {
                c as f64
            } else {
                rng.gen_range(-0.1..0.1)
            }
        });
        let proj = pca_projection(&p, 0).unwrap();
        for r in 0..6 {
            let row = &proj[r * 10..(r + 1) * 10];
            assert!(row.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn projection_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FeaturePlane::<f32>::from_fn(7, 5, 4, |_, _, _| rng.gen_range(-2.0..2.0));
        for comp in 0..4 {
            let v = pca_projection(&p, comp).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0), [0, 0, 255]);
        assert_eq!(colormap(255), [255, 0, 0]);
        assert_eq!(level(-10.0, 3.0), 0);
        assert_eq!(level(10.0, 1.0), 255);
        assert_eq!(level(1.0, 1.0), level(5.0, 1.0));
        assert_ne!(level(1.0, 3.0), level(3.0, 3.0));
        assert_eq!("dino".parse::<VisMode>().unwrap(), VisMode::Dino);
        assert!("rgb".parse::<VisMode>().is_err());
    }

    #[test]
    fn ppm_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FeaturePlane::<f64>::from_fn(3, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let img = render(&p, 1, VisMode::Register).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(Image::from_ppm(&bytes).unwrap(), img);
    }
}
