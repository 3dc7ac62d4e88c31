//! Glue between configuration, data, model and scoring: dataset loading,
//! model-input preparation and batched evaluation.

use std::path::Path;

use crate::config::{DataConfig, DataKind, PerceptionConfig, RunConfig};
use crate::data::{
    convert_channels, load_image_dir, load_timeseries_csv, resize_image, sliding_windows, synth_image_dataset,
    synth_timeseries_dataset, Modality, Sample, WindowSpec,
};
use crate::denoiser::Denoiser;
use crate::diffusion::{reconstruct_indexed, NoiseSchedule, ReconstructionConfig};
use crate::error::{Error, Result};
use crate::perception::FeatureExtractor;
use crate::scoring::{anomaly_map, build_reports, recon_errors, roc_auc, AnomalyReport, ScoreConfig};
use crate::tensor::Tensor;
use crate::training::{read_container, Checkpoint, StepRecord};
use crate::wavelets::{cwt, default_scales};

/// Scalogram of a 1-D window as a one-channel image `[1, scales, w]`. Each
/// row is rescaled by `1/√(s·sr)` so a unit sinusoid at the matching scale
/// has coefficients of order one at every scale.
pub fn scalogram_input(window: &Tensor, sampling_rate: f64) -> Result<Tensor> {
    let scales = default_scales(sampling_rate);
    let s = cwt(window, &scales, sampling_rate)?;
    let n = s.len();
    let coeffs = s.coefficients.data();
    Tensor::new(
        [1, scales.len(), n],
        (0..scales.len() * n).map(|i| (coeffs[i] as f64 / (scales[i / n] * sampling_rate).sqrt()) as f32).collect(),
    )
}

/// Model input `[C, H, W]` of `channels` channels for one raw sample.
pub fn prepare_input(sample: &Sample, data: &DataConfig, channels: usize) -> Result<Tensor> {
    match sample.modality {
        Modality::Image => convert_channels(&resize_image(&sample.tensor, data.image_size)?, channels),
        Modality::Timeseries => scalogram_input(&sample.tensor, data.sampling_rate),
    }
}

/// Spatial shape the configured data produces, `[C, H, W]`.
pub fn input_shape(cfg: &RunConfig) -> [usize; 3] {
    if cfg.data.kind.is_timeseries() {
        [1, default_scales(cfg.data.sampling_rate).len(), cfg.data.window]
    } else {
        [cfg.model.input_channels, cfg.data.image_size, cfg.data.image_size]
    }
}

fn require_path(data: &DataConfig) -> Result<&Path> {
    let p = data.path.as_deref().ok_or_else(|| Error::Data(format!("data.kind = {:?} needs data.path", data.kind)))?;
    if !p.exists() {
        return Err(Error::file(p, "dataset path does not exist"));
    }
    Ok(p)
}

fn csv_split(data: &DataConfig, path: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (values, labels) = load_timeseries_csv(path, &data.value_column, Some(&data.label_column))?;
    let spec = WindowSpec::new(data.window, data.stride)?;
    let cut = (values.len() as f64 * data.train_fraction).floor() as usize;
    if cut < data.window || values.len() - cut < data.window {
        return Err(Error::file(
            path,
            format!("{} points cannot hold a {}-point window on both sides of the train/test cut", values.len(), data.window),
        ));
    }
    let all_train = sliding_windows(&values[..cut], &labels[..cut], spec)?;
    let dropped = all_train.iter().filter(|s| s.label != 0).count();
    if dropped > 0 {
        log::warn!("dropped {dropped} training windows containing labelled anomalies");
    }
    let train = all_train.into_iter().filter(|s| s.label == 0).collect();
    let mut test = sliding_windows(&values[cut..], &labels[cut..], spec)?;
    for (k, s) in test.iter_mut().enumerate() {
        s.id = format!("w{:06}", cut + k * spec.stride);
    }
    Ok((train, test))
}

/// Raw train and test samples of the configured dataset.
pub fn load_raw_dataset(data: &DataConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match data.kind {
        DataKind::ImageDir => load_image_dir(require_path(data)?, data.image_size),
        DataKind::TimeseriesCsv => csv_split(data, require_path(data)?),
        DataKind::SyntheticImage => synth_image_dataset(data.seed, data.synth_train, data.synth_test, data.image_size),
        DataKind::SyntheticTimeseries => {
            let (train, mut test) = synth_timeseries_dataset(data.seed, data.synth_train, data.window)?;
            // the generator's test split is sized from n_windows; trim to synth_test per class
            let half = test.len() / 2;
            let keep = data.synth_test.min(half);
            let anomalies = test.split_off(half);
            test.truncate(keep);
            test.extend(anomalies.into_iter().take(keep));
            Ok((train, test))
        }
    }
}

/// Train and test samples with tensors replaced by model inputs.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, test) = load_raw_dataset(&cfg.data)?;
    let prep = |v: Vec<Sample>| -> Result<Vec<Sample>> {
        v.into_iter()
            .map(|mut s| {
                s.tensor = prepare_input(&s, &cfg.data, cfg.model.input_channels)?;
                Ok(s)
            })
            .collect()
    };
    Ok((prep(train)?, prep(test)?))
}

/// The frozen extractor: external weights when configured, else seeded.
pub fn build_perception(cfg: &PerceptionConfig, seed: u64, channels: usize) -> Result<FeatureExtractor> {
    match &cfg.external_weights_path {
        Some(p) => {
            let (_, weights) = read_container(p)?;
            FeatureExtractor::from_weights(seed, channels, weights).map_err(|e| Error::file(p, e.to_string()))
        }
        None => FeatureExtractor::new(seed, channels),
    }
}

/// Per-sample outputs of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reports: Vec<AnomalyReport>,
    pub labels: Vec<u8>,
}

impl Evaluation {
    pub fn scores(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.score).collect()
    }

    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores(), &self.labels)
    }
}

struct ItemResult {
    e_recon: f64,
    e_feat: f64,
    map: Option<Tensor>,
}

/// A trained noise predictor with everything needed to score inputs.
#[derive(Clone, Debug)]
pub struct Detector {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub extractor: FeatureExtractor,
    pub recon: ReconstructionConfig,
    pub score: ScoreConfig,
}

impl Detector {
    /// Schedule and perception seed come from the checkpoint; reconstruction
    /// depth and scoring from `cfg`.
    pub fn from_checkpoint(ck: Checkpoint, cfg: &RunConfig) -> Result<Self> {
        if cfg.perception.seed != ck.perception_seed && cfg.perception.external_weights_path.is_none() {
            log::warn!(
                "perception.seed {} differs from the checkpoint's {}; using the checkpoint's",
                cfg.perception.seed,
                ck.perception_seed
            );
        }
        let schedule = ck.schedule.build()?;
        let extractor = build_perception(&cfg.perception, ck.perception_seed, ck.model.input_channels)?;
        let recon = cfg.diffusion.reconstruction(&schedule, cfg.eval.seed);
        let model = Denoiser::from_weights(ck.model, ck.weights)?;
        Ok(Self { model, schedule, extractor, recon, score: cfg.score.clone() })
    }

    /// Partial-noising reconstruction of a batch whose first item has global
    /// index `first_index`.
    pub fn reconstruct(&self, x: &Tensor, first_index: u64) -> Result<Tensor> {
        reconstruct_indexed(x, &self.model, &self.schedule, &self.recon, first_index)
    }

    fn process(&self, items: &[Tensor], first_index: usize, batch_size: usize, maps: bool) -> Result<Vec<ItemResult>> {
        let mut out = Vec::with_capacity(items.len());
        for (b, chunk) in items.chunks(batch_size).enumerate() {
            let start = first_index + b * batch_size;
            let x = Tensor::stack(chunk)?;
            let rec = self.reconstruct(&x, start as u64)?;
            let e_recon = recon_errors(&x, &rec)?;
            let e_feat = self.extractor.distances(&x, &rec)?;
            for (i, item) in chunk.iter().enumerate() {
                let map = if maps { Some(anomaly_map(item, &rec.select_outer(i)?, self.score.map_radius)?) } else { None };
                if !(e_recon[i].is_finite() && e_feat[i].is_finite()) {
                    return Err(Error::Numeric(format!("non-finite error for item {}", start + i)));
                }
                out.push(ItemResult { e_recon: e_recon[i], e_feat: e_feat[i], map });
            }
        }
        Ok(out)
    }

    /// Scores `samples` (prepared model inputs). Reconstruction noise is drawn
    /// per global sample index, so results do not depend on `threads` or
    /// `batch_size`.
    pub fn evaluate(&self, samples: &[Sample], batch_size: usize, threads: usize, maps: bool) -> Result<Evaluation> {
        if samples.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let items: Vec<Tensor> = samples.iter().map(|s| s.tensor.clone()).collect();
        let batch_size = batch_size.max(1);
        let per_thread = items.len().div_ceil(threads.max(1));
        let results: Vec<ItemResult> = if threads <= 1 {
            self.process(&items, 0, batch_size, maps)?
        } else {
            let parts = std::thread::scope(|scope| {
                let handles: Vec<_> = items
                    .chunks(per_thread)
                    .enumerate()
                    .map(|(k, part)| scope.spawn(move || self.process(part, k * per_thread, batch_size, maps)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Vec<_>>()
            });
            let mut all = Vec::with_capacity(items.len());
            for p in parts {
                all.extend(p?);
            }
            all
        };
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let e_recon: Vec<f64> = results.iter().map(|r| r.e_recon).collect();
        let e_feat: Vec<f64> = results.iter().map(|r| r.e_feat).collect();
        let maps = maps.then(|| results.into_iter().map(|r| r.map.expect("map requested")).collect());
        let reports = build_reports(&ids, &e_recon, &e_feat, &self.score, maps)?;
        Ok(Evaluation { reports, labels: samples.iter().map(|s| s.label).collect() })
    }

    /// Single-input report `[C, H, W]`, with a pixel map when asked.
    pub fn score_one(&self, id: &str, x: &Tensor, map: bool) -> Result<AnomalyReport> {
        let s = Sample { id: id.to_string(), tensor: x.clone(), label: 0, modality: Modality::Image };
        let mut e = self.evaluate(std::slice::from_ref(&s), 1, 1, map)?;
        Ok(e.reports.remove(0))
    }
}

/// Scores CSV `sample_id,e_recon,e_feat,score,label`, plus `AUC,<value>`
/// when given.
pub fn scores_csv(eval: &Evaluation, auc: Option<f64>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["sample_id", "e_recon", "e_feat", "score", "label"]).map_err(err)?;
    for (r, l) in eval.reports.iter().zip(&eval.labels) {
        w.write_record([r.sample_id.clone(), r.e_recon.to_string(), r.e_feat.to_string(), r.score.to_string(), l.to_string()])
            .map_err(err)?;
    }
    if let Some(a) = auc {
        w.write_record(["AUC".to_string(), a.to_string()]).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Training log CSV `step,L_MSE,L_feat,L`.
pub fn loss_log_csv(records: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["step", "L_MSE", "L_feat", "L"]).map_err(err)?;
    for r in records {
        let l = &r.losses;
        w.write_record([r.step.to_string(), l.l_mse.to_string(), l.l_feat.to_string(), l.l.to_string()]).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleParams;

    fn tiny_cfg() -> RunConfig {
        RunConfig::from_toml(
            "[diffusion]\nT = 20\nbeta_start = 0.001\nbeta_end = 0.2\n\
             [model]\nbase_channels = 4\ndepth = 1\nheads = 1\nhead_dim = 4\ntime_embed_dim = 8\nwavelet_levels = 1\n\
             [data]\nimage_size = 16\nsynth_train = 4\nsynth_test = 3\nwindow = 32\n",
            &[],
            None,
        )
        .unwrap()
    }

    fn detector(cfg: &RunConfig) -> Detector {
        let m = Denoiser::new(cfg.model.clone(), 1).unwrap();
        let ck = Checkpoint {
            model: cfg.model.clone(),
            weights: m.into_weights(),
            schedule: ScheduleParams { steps: 20, beta_start: 0.001, beta_end: 0.2 },
            perception_seed: 7,
            step: 0,
        };
        Detector::from_checkpoint(ck, cfg).unwrap()
    }

    #[test]
    fn scalogram_shape_and_scale() {
        let w = Tensor::from_fn([64], |i| (2.0 * std::f64::consts::PI * 8.0 * i as f64 / 64.0).sin() as f32);
        let s = scalogram_input(&w, 64.0).unwrap();
        assert_eq!(s.shape(), &[1, 32, 64]);
        let peak = s.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        assert!(peak > 0.3 && peak < 3.0, "{peak}");
    }

    #[test]
    fn synthetic_datasets_prepare_to_model_shapes() {
        let cfg = tiny_cfg();
        let (train, test) = load_dataset(&cfg).unwrap();
        assert_eq!((train.len(), test.len()), (4, 6));
        assert_eq!(train[0].tensor.shape(), &input_shape(&cfg));
        let mut ts = cfg.clone();
        ts.data.kind = DataKind::SyntheticTimeseries;
        let (train, test) = load_dataset(&ts).unwrap();
        assert_eq!(train[0].tensor.shape(), &input_shape(&ts));
        assert_eq!(test.iter().filter(|s| s.label == 1).count(), 2);
    }

    #[test]
    fn missing_path_is_a_data_error_naming_it() {
        let mut cfg = tiny_cfg();
        cfg.data.kind = DataKind::ImageDir;
        cfg.data.path = Some("/no/such/dir".into());
        let err = load_dataset(&cfg).unwrap_err();
        assert!(matches!(err, Error::File { .. }) && err.to_string().contains("/no/such/dir"), "{err}");
    }

    #[test]
    fn evaluation_is_independent_of_batching_and_threads() {
        let cfg = tiny_cfg();
        let d = detector(&cfg);
        let (_, test) = load_dataset(&cfg).unwrap();
        let a = d.evaluate(&test, 4, 1, false).unwrap();
        let b = d.evaluate(&test, 1, 3, true).unwrap();
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.e_recon.to_bits(), y.e_recon.to_bits());
            assert_eq!(x.score.to_bits(), y.score.to_bits());
        }
        assert_eq!(b.reports[0].pixel_map.as_ref().unwrap().shape(), &[16, 16]);
        assert!(a.auc().unwrap().is_finite());
        let text = String::from_utf8(scores_csv(&a, Some(0.5)).unwrap()).unwrap();
        assert_eq!(text.lines().count(), test.len() + 2);
        assert!(text.starts_with("sample_id,e_recon,e_feat,score,label\n"));
        assert!(text.ends_with("AUC,0.5\n"));
    }

    #[test]
    fn csv_split_keeps_anomalies_out_of_training() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut body = String::from("timestamp,value,label\n");
        for i in 0..200 {
            body += &format!("{i},{},{}\n", (i as f32 * 0.3).sin(), u8::from(i == 20 || i == 150));
        }
        std::fs::write(&p, body).unwrap();
        let data = DataConfig { kind: DataKind::TimeseriesCsv, path: Some(p), window: 32, stride: 8, ..Default::default() };
        let (train, test) = load_raw_dataset(&data).unwrap();
        assert!(train.iter().all(|s| s.label == 0));
        assert!(test.iter().any(|s| s.label == 1));
        assert_eq!(test[0].id, "w000100");
    }
}
