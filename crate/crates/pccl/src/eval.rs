//! Batching between samples and tensors, inference and metric reports.

use std::path::Path;

use candle_core::{Device, Tensor};
use pccl_core::data::Sample;
use pccl_core::maps::Shape;
use pccl_core::metrics::{ImageMetrics, MetricReport};
use pccl_core::{ops, LogitMap, MaskMap};

use crate::error::{Error, Result};
use crate::models::Segmenter;

/// Images processed per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Stacks sample images into a `(B, C, H, W)` tensor.
pub fn images_tensor(samples: &[&Sample], device: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (c, h, w) = (first.image.channels(), first.image.height(), first.image.width());
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.image.channels(), s.image.height(), s.image.width()) != (c, h, w) {
            return Err(Error::Usage(format!("sample {} differs in size from {}", s.id, first.id)));
        }
        data.extend_from_slice(s.image.as_slice());
    }
    Ok(Tensor::from_vec(data, (samples.len(), c, h, w), device)?)
}

/// Masks of labelled samples stacked into one map.
pub fn stack_masks(samples: &[&Sample]) -> Result<MaskMap> {
    let masks = samples
        .iter()
        .map(|s| s.mask.clone().ok_or_else(|| Error::Dataset(format!("sample {} has no mask", s.id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskMap::stack(&masks)?)
}

/// Copies a `(B, C, H, W)` logit tensor to the host.
pub fn logit_map(t: &Tensor) -> Result<LogitMap> {
    let (b, c, h, w) = t.dims4()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    Ok(LogitMap::from_f32(Shape::new(b, c, h, w), &data)?)
}

/// A host gradient as a constant tensor of `shape`.
pub fn grad_tensor(g: &[f64], shape: Shape, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = g.iter().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(data, (shape.batch, shape.classes, shape.height, shape.width), device)?)
}

/// Hard predictions of `model` in evaluation mode.
pub fn predict(model: &Segmenter, samples: &[Sample]) -> Result<Vec<MaskMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = logit_map(&model.forward(&images_tensor(&refs, model.device())?, false)?)?;
        let labels = ops::argmax_logits(&logits);
        for i in 0..chunk.len() {
            out.push(labels.slice_batch(i, 1)?);
        }
    }
    Ok(out)
}

/// Per-image DSC/HD95/ASD of `model` over labelled `samples`.
pub fn evaluate(model: &Segmenter, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(model, samples)?;
    let per_image = samples
        .iter()
        .zip(&preds)
        .map(|(s, pred)| {
            let gt = s.mask.as_ref().ok_or_else(|| Error::Dataset(format!("sample {} has no mask", s.id)))?;
            Ok(ImageMetrics::compute(s.id.clone(), pred, gt)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image)?)
}

/// Per-image rows `id,dsc,hd95,asd,empty_pred_flag`.
pub fn write_report_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "dsc", "hd95", "asd", "empty_pred_flag"]).map_err(csv_err)?;
    for m in &report.per_image {
        w.write_record([
            m.id.clone(),
            m.dsc.to_string(),
            m.hd95.to_string(),
            m.asd.to_string(),
            (m.empty_pred as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}

/// One-line summary of a report.
pub fn summary_line(report: &MetricReport) -> String {
    format!(
        "images={} dsc={:.2} hd95={:.2} asd={:.2} empty_predictions={}",
        report.per_image.len(),
        report.dsc,
        report.hd95,
        report.asd,
        report.empty_predictions()
    )
}
