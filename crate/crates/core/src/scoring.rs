//! Reconstruction and perceptual error, combined anomaly scores, pixel maps
//! and ROC-AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Weight of the reconstruction term, `0 ≤ λ ≤ 1`.
    pub lambda: f64,
    /// Z-normalize both error channels over the evaluated set before mixing.
    pub normalize: bool,
    /// Box-blur radius of the pixel anomaly map.
    pub map_radius: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { lambda: 0.5, normalize: false, map_radius: 1 }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("score.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AnomalyReport {
    pub sample_id: String,
    pub e_recon: f64,
    pub e_feat: f64,
    pub score: f64,
    pub pixel_map: Option<Tensor>,
}

/// Mean squared difference over all elements.
pub fn recon_error(x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    x.expect_same_shape(x_rec)?;
    let s: f64 = x.data().iter().zip(x_rec.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    Ok(s / x.numel() as f64)
}

/// Per-sample [`recon_error`] over the leading axis.
pub fn recon_errors(x: &Tensor, x_rec: &Tensor) -> Result<Vec<f64>> {
    x.expect_same_shape(x_rec)?;
    let n = x.shape()[0];
    let per = x.numel() / n;
    Ok(x.data()
        .chunks(per)
        .zip(x_rec.data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / per as f64)
        .collect())
}

/// `λ·E_recon + (1 − λ)·E_feat`.
pub fn anomaly_score(e_recon: f64, e_feat: f64, cfg: &ScoreConfig) -> Result<f64> {
    let lambda = cfg.lambda;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(e_recon);
    }
    if lambda == 0.0 {
        return Ok(e_feat);
    }
    if !e_recon.is_finite() || !e_feat.is_finite() {
        return Err(Error::NonFinite(format!("anomaly score inputs {e_recon}, {e_feat}")));
    }
    Ok(lambda * e_recon + (1.0 - lambda) * e_feat)
}

/// Channel-summed squared error of `[C, H, W]` inputs, box-blurred with
/// radius `radius`. The blur treats out-of-image pixels as zero and always
/// divides by the full window area.
pub fn anomaly_map(x: &Tensor, x_rec: &Tensor, radius: usize) -> Result<Tensor> {
    x.expect_same_shape(x_rec)?;
    let &[c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("anomaly map expects [C, H, W], got {:?}", x.shape())));
    };
    let mut err = vec![0.0f64; h * w];
    for ch in 0..c {
        for (p, e) in err.iter_mut().enumerate() {
            let i = ch * h * w + p;
            *e += ((x.data()[i] - x_rec.data()[i]) as f64).powi(2);
        }
    }
    let r = radius as isize;
    let area = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let out = Tensor::from_fn([h, w], |p| {
        let (y, xx) = ((p / w) as isize, (p % w) as isize);
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xq) = (y + dy, xx + dx);
                if yy >= 0 && xq >= 0 && (yy as usize) < h && (xq as usize) < w {
                    acc += err[yy as usize * w + xq as usize];
                }
            }
        }
        (acc / area) as f32
    });
    Ok(out)
}

/// Z-scores over the set; a constant channel maps to zeros.
pub fn z_normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Combines per-sample error channels into scores under `cfg`.
pub fn combine_scores(e_recon: &[f64], e_feat: &[f64], cfg: &ScoreConfig) -> Result<Vec<f64>> {
    if e_recon.len() != e_feat.len() {
        return Err(Error::Shape(format!("{} recon errors vs {} feature errors", e_recon.len(), e_feat.len())));
    }
    let (r, f) = if cfg.normalize {
        (z_normalize(e_recon), z_normalize(e_feat))
    } else {
        (e_recon.to_vec(), e_feat.to_vec())
    };
    r.iter().zip(&f).map(|(&a, &b)| anomaly_score(a, b, cfg)).collect()
}

/// Builds one report per sample.
pub fn build_reports(
    ids: &[String],
    e_recon: &[f64],
    e_feat: &[f64],
    cfg: &ScoreConfig,
    maps: Option<Vec<Tensor>>,
) -> Result<Vec<AnomalyReport>> {
    let scores = combine_scores(e_recon, e_feat, cfg)?;
    if ids.len() != scores.len() {
        return Err(Error::Shape(format!("{} ids for {} scores", ids.len(), scores.len())));
    }
    let mut maps = maps.map(|m| m.into_iter());
    Ok(ids
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (id, score))| AnomalyReport {
            sample_id: id.clone(),
            e_recon: e_recon[i],
            e_feat: e_feat[i],
            score,
            pixel_map: maps.as_mut().and_then(|m| m.next()),
        })
        .collect())
}

/// Area under the ROC curve with label 1 as positive; ties get midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("labels must be 0 or 1, found {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
