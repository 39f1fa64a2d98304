//! Per-class dice scores with pooled (micro) aggregation, and CSV/markdown
//! report tables.
//!
//! Dice for class k is `2|P∩G| / (|P| + |G|)`, where P and G are the pixels
//! predicted as k and labeled k. When both sets are empty the score is 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{argmax_channels, predict, ModelParams};
use crate::phantom::{Tissue, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::{Image, LabelMap};

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.batch(), pred.height(), pred.width()) != (gt.batch(), gt.height(), gt.width()) {
        return shape_err(format!(
            "prediction ({}, {}, {}) and ground truth ({}, {}, {}) differ",
            pred.batch(),
            pred.height(),
            pred.width(),
            gt.batch(),
            gt.height(),
            gt.width()
        ));
    }
    Ok(())
}

fn dice_from(inter: u64, pred: u64, gt: u64) -> f64 {
    if pred + gt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (pred + gt) as f64
    }
}

pub fn dice_per_class(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64> {
    if class >= NUM_CLASSES {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: NUM_CLASSES,
        });
    }
    check_pair(pred, gt)?;
    let k = class as u8;
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        np += (p == k) as u64;
        ng += (g == k) as u64;
        inter += (p == k && g == k) as u64;
    }
    Ok(dice_from(inter, np, ng))
}

/// Pixel counts pooled over any number of label-map pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: [u64; NUM_CLASSES],
    pub predicted: [u64; NUM_CLASSES],
    pub truth: [u64; NUM_CLASSES],
    pub correct: u64,
    pub pixels: u64,
    pub samples: usize,
}

impl DiceCounts {
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_pair(pred, gt)?;
        pred.check_range(NUM_CLASSES)?;
        gt.check_range(NUM_CLASSES)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.predicted[p as usize] += 1;
            self.truth[g as usize] += 1;
            if p == g {
                self.intersection[p as usize] += 1;
                self.correct += 1;
            }
        }
        self.pixels += pred.len() as u64;
        self.samples += pred.batch();
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let mut dice = [0.0; NUM_CLASSES];
        for (k, d) in dice.iter_mut().enumerate() {
            *d = dice_from(self.intersection[k], self.predicted[k], self.truth[k]);
        }
        let mean = dice.iter().sum::<f64>() / NUM_CLASSES as f64;
        let foreground_mean = dice[1..].iter().sum::<f64>() / (NUM_CLASSES - 1) as f64;
        let pixel_accuracy = if self.pixels == 0 {
            1.0
        } else {
            self.correct as f64 / self.pixels as f64
        };
        MetricsReport {
            dice,
            mean,
            foreground_mean,
            pixel_accuracy,
            samples: self.samples,
        }
    }
}

/// Dice per class in class-code order, plus summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: [f64; NUM_CLASSES],
    /// Mean over all nine classes.
    pub mean: f64,
    /// Mean over classes 1..9.
    pub foreground_mean: f64,
    pub pixel_accuracy: f64,
    pub samples: usize,
}

/// Pooled metrics of `pred` against `gt` (maps are paired by index).
pub fn score(pred: &[LabelMap], gt: &[&LabelMap]) -> Result<MetricsReport> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = DiceCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        counts.add(p, g)?;
    }
    Ok(counts.report())
}

/// Argmax predictions of the model for each image.
pub fn predict_labels<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let logits = predict(params, &Image::stack::<T>(chunk)?)?;
        let labels = argmax_channels(&logits);
        let (h, w) = (labels.height(), labels.width());
        for item in labels.data().chunks_exact(h * w) {
            out.push(LabelMap::new(1, h, w, item.to_vec())?);
        }
    }
    Ok(out)
}

/// Runs the model over a test set and pools dice counts across it.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
    labels: &[&LabelMap],
) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != labels.len() {
        return shape_err(format!(
            "{} images but {} label maps",
            images.len(),
            labels.len()
        ));
    }
    score(&predict_labels(params, images)?, labels)
}

pub const CSV_HEADER: &str = "model,background,wm,gm,csf,bones,skin,cavities,eyes,ventricles,mean";

pub fn csv_row(model: &str, report: &MetricsReport) -> String {
    let mut row = model.to_string();
    for d in report.dice.iter().chain([&report.mean]) {
        let _ = write!(row, ",{d:.3}");
    }
    row
}

/// Header line plus one row per named report, newline-terminated.
pub fn to_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (name, r) in rows {
        out.push_str(&csv_row(name, r));
        out.push('\n');
    }
    out
}

pub fn to_markdown(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("| model |");
    for t in Tissue::ALL {
        let _ = write!(out, " {} |", t.column());
    }
    out.push_str(" mean |\n|---|");
    out.push_str(&"---:|".repeat(NUM_CLASSES + 1));
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "| {name} |");
        for d in r.dice.iter().chain([&r.mean]) {
            let _ = write!(out, " {d:.3} |");
        }
        out.push('\n');
    }
    out
}
