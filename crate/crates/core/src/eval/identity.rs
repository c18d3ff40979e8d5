//! Identity-loss increment: how much identity a cartoonisation step costs.

use std::path::Path;

use serde::Serialize;

use crate::backbone::Backbones;
use crate::domain::{IdentityEmbedding, ImageTensor};
use crate::error::{Error, Result};
use crate::losses::identity_loss;
use crate::mapper::Mapper;
use crate::pipeline::synthesize;

/// A published before/after/increment row, kept for report rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub method: &'static str,
    pub before: f64,
    pub after: f64,
    pub increment: f64,
}

#[allow(clippy::approx_constant)]
pub const PUBLISHED: [PublishedRow; 5] = [
    PublishedRow { method: "pSp", before: 0.1548, after: 0.5092, increment: 0.3544 },
    PublishedRow { method: "R&R", before: 0.3010, after: 0.5797, increment: 0.2787 },
    PublishedRow { method: "OSTeC", before: 0.2326, after: 0.5710, increment: 0.3384 },
    PublishedRow { method: "FaceID", before: 0.3441, after: 0.7046, increment: 0.3605 },
    PublishedRow { method: "Ours", before: 0.4903, after: 0.6117, increment: 0.1213 },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub mean_before: f64,
    pub mean_after: f64,
    pub increment: f64,
}

/// Means of paired losses and their difference (after minus before).
pub fn identity_increment(before: &[f64], after: &[f64]) -> Result<Increment> {
    if before.is_empty() || before.len() != after.len() {
        return Err(Error::Length(format!(
            "need equal non-empty lists, got {} and {}",
            before.len(),
            after.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_before, mean_after) = (mean(before), mean(after));
    Ok(Increment {
        mean_before,
        mean_after,
        increment: mean_after - mean_before,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityRow {
    pub index: usize,
    /// `L_id(I_x, G(w))`.
    pub before: f64,
    /// `L_id(I_x, C(G(w)))`.
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub rows: Vec<IdentityRow>,
    pub aggregate: Increment,
}

/// Self-driven evaluation: each image is both identity and pose input.
pub fn identity_increment_pipeline(images: &[ImageTensor], b: &Backbones, mapper: &Mapper) -> Result<IdentityReport> {
    let mut rows = Vec::with_capacity(images.len());
    for (index, img) in images.iter().enumerate() {
        let img = ImageTensor::new(img.tensor().to_dtype(b.dtype())?)?;
        let s = synthesize(b, mapper, &img, &img)?;
        let e_x: IdentityEmbedding = b.identity.encode(&img)?;
        let before = identity_loss(&e_x, &b.identity.encode(&s.raw)?)?;
        let after = identity_loss(&e_x, &b.identity.encode(&s.out)?)?;
        rows.push(IdentityRow { index, before, after });
    }
    let before: Vec<f64> = rows.iter().map(|r| r.before).collect();
    let after: Vec<f64> = rows.iter().map(|r| r.after).collect();
    let aggregate = identity_increment(&before, &after)?;
    Ok(IdentityReport { rows, aggregate })
}

/// Per-image rows, then a `mean` row with the aggregate increment.
pub fn write_identity_csv(path: &Path, report: &IdentityReport) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(["index", "l_id_before", "l_id_after", "increment"]).map_err(fmt)?;
    for r in &report.rows {
        w.write_record([r.index.to_string(), r.before.to_string(), r.after.to_string(), (r.after - r.before).to_string()])
            .map_err(fmt)?;
    }
    let a = report.aggregate;
    w.write_record(["mean".to_string(), a.mean_before.to_string(), a.mean_after.to_string(), a.increment.to_string()])
        .map_err(fmt)?;
    w.flush().map_err(|e| Error::io(path, e))
}
