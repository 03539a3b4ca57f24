//! Held-out evaluation of both branches.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, Image};
use crate::model::{render_image, Branch, Model, SamplingConfig};
use crate::scene::{SceneDataset, Split};

/// PSNR may be `+∞`; JSON has no infinity, so it is written as `"inf"`.
fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value '{t}'"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchMetrics {
    /// Mean of per-image PSNR (dB).
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    /// Mean of per-image SSIM.
    pub ssim: f64,
}

/// Metrics JSON: `{"split", "images", "grid_branch": {psnr, ssim},
/// "nerf_branch": {psnr, ssim} | null}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub images: usize,
    pub grid_branch: BranchMetrics,
    pub nerf_branch: Option<BranchMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Mean PSNR/SSIM of paired images.
pub fn compare_images(preds: &[Image], truths: &[Image]) -> Result<BranchMetrics> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} reference images",
            preds.len(),
            truths.len()
        )));
    }
    let n = preds.len() as f64;
    let mut p = 0.0;
    let mut s = 0.0;
    for (a, b) in preds.iter().zip(truths) {
        p += psnr(a, b)?;
        s += ssim(a, b)?;
    }
    Ok(BranchMetrics {
        psnr: p / n,
        ssim: s / n,
    })
}

/// Renders every `split` frame through one branch.
pub fn render_split<T: Real>(
    model: &Model<T>,
    ds: &SceneDataset,
    split: Split,
    branch: Branch,
    sampling: &SamplingConfig,
    seed: u64,
    chunk: usize,
) -> Result<Vec<Image>> {
    ds.split(split)
        .map(|f| render_image(model, &f.camera, branch, sampling, seed, chunk))
        .collect()
}

/// Renders the `split` views through the grid branch and, if present, the
/// NeRF branch, and scores them against the dataset images.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    ds: &SceneDataset,
    split: Split,
    sampling: &SamplingConfig,
    seed: u64,
    chunk: usize,
) -> Result<EvalReport> {
    let truths: Vec<Image> = ds.split(split).map(|f| f.image.clone()).collect();
    if truths.is_empty() {
        return Err(Error::Dataset(format!("dataset has no {split:?} views")));
    }
    let grid = render_split(model, ds, split, Branch::Grid, sampling, seed, chunk)?;
    let nerf = match model.nerf {
        Some(_) => Some(compare_images(
            &render_split(model, ds, split, Branch::Nerf, sampling, seed, chunk)?,
            &truths,
        )?),
        None => None,
    };
    Ok(EvalReport {
        split,
        images: truths.len(),
        grid_branch: compare_images(&grid, &truths)?,
        nerf_branch: nerf,
    })
}
