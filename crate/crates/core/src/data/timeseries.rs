use std::path::Path;

use super::{Sample, WindowSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads `value_column` (and `label_column` when present in the header) from
/// a headed CSV file. A missing label column yields all-zero labels.
pub fn load_timeseries_csv(
    path: impl AsRef<Path>,
    value_column: &str,
    label_column: Option<&str>,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::file(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::file(path, e.to_string()))?.clone();
    let vi = headers
        .iter()
        .position(|h| h == value_column)
        .ok_or_else(|| Error::file(path, format!("no `{value_column}` column in header")))?;
    let li = label_column.and_then(|l| headers.iter().position(|h| h == l));
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| Error::file(path, format!("row {line}: {e}")))?;
        let raw = rec.get(vi).unwrap_or("");
        let v: f32 = raw
            .parse()
            .ok()
            .filter(|v: &f32| v.is_finite())
            .ok_or_else(|| Error::file(path, format!("row {line}: non-numeric value `{raw}`")))?;
        values.push(v);
        let label = match li {
            None => 0,
            Some(li) => match rec.get(li).unwrap_or("") {
                "0" | "" => 0,
                "1" => 1,
                other => return Err(Error::file(path, format!("row {line}: label `{other}` is not 0 or 1"))),
            },
        };
        labels.push(label);
    }
    Ok((values, labels))
}

/// Zero mean, unit variance; a constant window maps to zeros.
pub fn z_normalize_window(values: &[f32]) -> Vec<f32> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
}

/// Z-normalized windows; a window is anomalous iff any of its points is.
pub fn sliding_windows(values: &[f32], labels: &[u8], spec: WindowSpec) -> Result<Vec<Sample>> {
    if values.len() != labels.len() {
        return Err(Error::Data(format!("{} values but {} labels", values.len(), labels.len())));
    }
    if values.len() < spec.width {
        return Err(Error::Data(format!("series of length {} shorter than window {}", values.len(), spec.width)));
    }
    (0..spec.count(values.len()))
        .map(|k| {
            let start = k * spec.stride;
            let range = start..start + spec.width;
            let label = u8::from(labels[range.clone()].iter().any(|&l| l == 1));
            let t = Tensor::new([spec.width], z_normalize_window(&values[range]))?;
            Ok(Sample::window(format!("w{start:06}"), t, label))
        })
        .collect()
}
