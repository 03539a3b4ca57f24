//! Image container and quality metrics (PSNR, SSIM).

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = 3 * (j * self.width + i);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, rgb: [f64; 3]) {
        let o = 3 * (j * self.width + i);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Saves as 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::shape(
            "image metric",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

pub fn mse(pred: &Image, truth: &Image) -> Result<f64> {
    same_shape(pred, truth)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10·log10(1/MSE)`; identical images give `+∞`.
pub fn psnr(pred: &Image, truth: &Image) -> Result<f64> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for j in 0..h {
        for i in 0..ow {
            rows[j * ow + i] = (0..n).map(|t| k[t] * img[j * w + i + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for j in 0..oh {
        for i in 0..ow {
            out[j * ow + i] = (0..n).map(|t| k[t] * rows[(j + t) * ow + i]).sum();
        }
    }
    out
}

/// Mean SSIM on the Rec. 601 luma with an 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and dynamic range 1.
pub fn ssim(pred: &Image, truth: &Image) -> Result<f64> {
    same_shape(pred, truth)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let x = pred.luma();
    let y = truth.luma();
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, w, h, &k);
    let mu_y = filter_valid(&y, w, h, &k);
    let e_xx = filter_valid(&prod(&x, &x), w, h, &k);
    let e_yy = filter_valid(&prod(&y, &y), w, h, &k);
    let e_xy = filter_valid(&prod(&x, &y), w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = Image::filled(4, 4, [0.0; 3]);
        let p = Image::filled(4, 4, [0.1; 3]);
        assert!((psnr(&p, &z).unwrap() - 20.0).abs() < 1e-4);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Image::new(4, 5)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(2, 20, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let neg = Image {
            data: a.data.iter().map(|v| 1.0 - v).collect(),
            ..a.clone()
        };
        assert!(ssim(&a, &neg).unwrap() < 0.0);

        let dark = Image::filled(16, 16, [0.2; 3]);
        let light = Image::filled(16, 16, [0.8; 3]);
        let v = ssim(&dark, &light).unwrap();
        let hand = (2.0 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((v - hand).abs() < 1e-12);
        assert!((v - 0.4706).abs() < 1e-4);

        assert!(ssim(&Image::new(10, 30), &Image::new(10, 30)).is_err());
    }

    #[test]
    fn metrics_are_symmetric() {
        for s in 0..5 {
            let a = random_image(10 + s, 24, 18);
            let b = random_image(20 + s, 24, 18);
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }
    }
}
