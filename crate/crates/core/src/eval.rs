//! Sliding-window inference, error metrics and embedding export.
//!
//! Windows tile the image left to right and top to bottom. When the window
//! does not divide an extent, one extra window is placed flush against the far
//! border; any pixel it shares with an interior window is zeroed in the
//! interior window so that every pixel contributes through exactly one pass.

use std::io::Write;
use std::path::Path;

use cmlp_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{crop_image, read_image, ManifestRecord, ResizePolicy};
use crate::error::{io_err, Error, Result};
use crate::model::CrowdMlp;

/// Windows evaluated per forward batch.
const WINDOW_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowCell {
    pub row: usize,
    pub col: usize,
    /// Pixel offsets of the window's top-left corner.
    pub top: usize,
    pub left: usize,
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub window: usize,
    pub cells: Vec<WindowCell>,
    pub total: f64,
}

/// Window start offsets along one axis of length `extent`.
pub fn window_starts(extent: usize, window: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..extent / window).map(|i| i * window).collect();
    if !extent.is_multiple_of(window) {
        starts.push(extent - window);
    }
    starts
}

/// Index of the window that owns coordinate `p`.
fn owner(p: usize, extent: usize, window: usize) -> usize {
    let full = extent / window;
    if !extent.is_multiple_of(window) && p >= extent - window {
        full
    } else {
        p / window
    }
}

/// The `[3, w, w]` input of window `(r, c)` with pixels owned elsewhere zeroed.
fn window_input(image: &Tensor, window: usize, r: usize, c: usize, top: usize, left: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut x = crop_image(image, top, left, window, window)?;
    let exact = h % window == 0 && w % window == 0;
    if !exact {
        let plane = window * window;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let (y, xx) = ((i % plane) / window, i % window);
            if owner(top + y, h, window) != r || owner(left + xx, w, window) != c {
                *v = 0.0;
            }
        }
    }
    Ok(x)
}

/// Runs every window of the grid in eval mode; also returns the per-window
/// mean-pooled embeddings `[windows, D]`.
pub fn sliding_window_detail(
    model: &CrowdMlp,
    image: &Tensor,
    window: usize,
) -> Result<(WindowGrid, Vec<Vec<f64>>)> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Parameter(format!(
            "expected a [3, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if window > h || window > w {
        return Err(Error::Parameter(format!(
            "window {window} exceeds image {h}x{w}"
        )));
    }
    if window != model.config().input_size {
        return Err(Error::Config(format!(
            "window {window} differs from the model input size {}",
            model.config().input_size
        )));
    }
    let mut cells = Vec::new();
    let mut inputs = Vec::new();
    for (r, &top) in window_starts(h, window).iter().enumerate() {
        for (c, &left) in window_starts(w, window).iter().enumerate() {
            inputs.push(window_input(image, window, r, c, top, left)?);
            cells.push(WindowCell {
                row: r,
                col: c,
                top,
                left,
                count: 0.0,
            });
        }
    }
    let mut embeddings = Vec::with_capacity(cells.len());
    let mut k = 0;
    for chunk in inputs.chunks(WINDOW_BATCH) {
        let batch = crate::train::stack_images(&chunk.iter().collect::<Vec<_>>())?;
        let (counts, pooled) = model.predict(&batch)?;
        let d = pooled.shape()[1];
        for (b, count) in counts.into_iter().enumerate() {
            cells[k].count = count;
            embeddings.push(pooled.data()[b * d..(b + 1) * d].to_vec());
            k += 1;
        }
    }
    let total = cells.iter().map(|c| c.count).sum();
    Ok((
        WindowGrid {
            window,
            cells,
            total,
        },
        embeddings,
    ))
}

pub fn sliding_window_count(model: &CrowdMlp, image: &Tensor, window: usize) -> Result<WindowGrid> {
    Ok(sliding_window_detail(model, image, window)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    /// Mean of squared errors, without a square root.
    pub mse: f64,
    pub rmse: f64,
    /// `pred − gt` per image.
    pub residuals: Vec<f64>,
}

impl MetricsReport {
    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        format!(
            "{:<6}{:>14}\n{:<6}{:>14.6}\n{:<6}{:>14.6}\n{:<6}{:>14.6}\n",
            "N", self.n, "MAE", self.mae, "MSE", self.mse, "RMSE", self.rmse
        )
    }
}

pub fn compute_metrics(pred: &[f64], gt: &[f64]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Parameter(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("metrics need at least one image".into()));
    }
    let n = pred.len();
    let residuals: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        n,
        mae,
        mse,
        rmse: mse.sqrt(),
        residuals,
    })
}

/// Reads and resizes one manifest image for inference.
pub fn prepare_image(path: &Path, policy: &ResizePolicy) -> Result<Tensor> {
    policy.apply(&read_image(path)?)
}

/// Sliding-window totals for every record, then metrics against the labels.
pub fn evaluate_records(
    model: &CrowdMlp,
    records: &[ManifestRecord],
    policy: &ResizePolicy,
) -> Result<(Vec<f64>, MetricsReport)> {
    let window = model.config().input_size;
    let preds = records
        .iter()
        .map(|r| Ok(sliding_window_count(model, &prepare_image(&r.image, policy)?, window)?.total))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<f64> = records.iter().map(|r| r.count).collect();
    let report = compute_metrics(&preds, &gt)?;
    Ok((preds, report))
}

/// One CSV row per record: path, sliding-window count, then the window mean
/// of the token-pooled joined embeddings (`D` values).
pub fn export_embeddings(
    model: &CrowdMlp,
    records: &[ManifestRecord],
    policy: &ResizePolicy,
    out_path: &Path,
) -> Result<()> {
    let window = model.config().input_size;
    let d = model.config().token_dim;
    let mut out = std::fs::File::create(out_path).map_err(io_err(out_path))?;
    let mut header = String::from("path,count_pred");
    for i in 0..d {
        header.push_str(&format!(",e{i}"));
    }
    writeln!(out, "{header}").map_err(io_err(out_path))?;
    for r in records {
        let image = prepare_image(&r.image, policy)?;
        let (grid, emb) = sliding_window_detail(model, &image, window)?;
        let mut mean = vec![0.0; d];
        for e in &emb {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        let mut row = format!("{},{}", r.image.display(), grid.total);
        for m in mean {
            row.push_str(&format!(",{}", m / emb.len() as f64));
        }
        writeln!(out, "{row}").map_err(io_err(out_path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_and_flush_windows() {
        assert_eq!(window_starts(1024, 256), vec![0, 256, 512, 768]);
        assert_eq!(window_starts(768, 256), vec![0, 256, 512]);
        assert_eq!(window_starts(1000, 256), vec![0, 256, 512, 744]);
        assert_eq!(window_starts(256, 256), vec![0]);
    }

    #[test]
    fn ownership_partitions_axis() {
        for p in 0..1000 {
            let o = owner(p, 1000, 256);
            let s = window_starts(1000, 256)[o];
            assert!(p >= s && p < s + 256);
        }
        assert_eq!(owner(743, 1000, 256), 2);
        assert_eq!(owner(744, 1000, 256), 3);
    }

    #[test]
    fn metric_example() {
        let m = compute_metrics(&[10.0, 20.0], &[12.0, 18.0]).unwrap();
        assert_eq!((m.mae, m.mse, m.rmse), (2.0, 4.0, 2.0));
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[]).is_err());
    }
}
