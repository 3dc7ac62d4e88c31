//! Dataset ingestion, sliding windows and seeded synthetic datasets.

mod images;
mod synth;
mod timeseries;

use serde::{Deserialize, Serialize};

pub use images::{
    convert_channels, image_tensor_to_png, load_image_dir, load_png, resize_image, resize_image_to, save_png, save_png_grid,
};
pub use synth::{
    synth_anomaly_pair, synth_image_dataset, synth_normal_image, synth_timeseries_dataset, synth_window, synth_window_of,
    AnomalyKind, SeriesAnomaly, SYNTH_SAMPLING_RATE,
};
pub use timeseries::{load_timeseries_csv, sliding_windows, z_normalize_window};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Timeseries,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Timeseries => "timeseries",
        })
    }
}

/// One labelled example: an image `[C, H, W]` or a raw window `[w]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub tensor: Tensor,
    /// 0 normal, 1 anomaly.
    pub label: u8,
    pub modality: Modality,
}

impl Sample {
    pub fn image(id: impl Into<String>, tensor: Tensor, label: u8) -> Self {
        Self { id: id.into(), tensor, label, modality: Modality::Image }
    }

    pub fn window(id: impl Into<String>, tensor: Tensor, label: u8) -> Self {
        Self { id: id.into(), tensor, label, modality: Modality::Timeseries }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub width: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(width: usize, stride: usize) -> crate::Result<Self> {
        if width < 2 || stride < 1 {
            return Err(crate::Error::InvalidArgument(format!(
                "window needs width >= 2 and stride >= 1, got {width}/{stride}"
            )));
        }
        Ok(Self { width, stride })
    }

    /// `floor((n − w)/s) + 1` for `n ≥ w`, else 0.
    pub fn count(&self, n: usize) -> usize {
        if n < self.width {
            0
        } else {
            (n - self.width) / self.stride + 1
        }
    }
}
