//! CSV tables for plotting: per-class accuracy, modality attention and
//! temporal attention quantiles.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Decimal notation with 9 significant digits; parsing the text as `f32`
/// recovers `x as f32` exactly.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    // the exponent of the correctly rounded 9-digit form
    let sci = format!("{x:.8e}");
    let exp: i32 = sci.rsplit_once('e').and_then(|(_, e)| e.parse().ok()).expect("exponent");
    let decimals = (8 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Linear-interpolation quantile (`q·(n−1)` positions) via selection.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("quantile {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut a, upper) = v.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Ok(a);
    }
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(a + frac * (b - a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassRow {
    pub class: usize,
    pub verb: u32,
    pub noun: u32,
    pub support: usize,
    pub top1: f64,
    pub top5: f64,
}

pub fn write_per_class_csv(path: &Path, rows: &[PerClassRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "verb", "noun", "support", "top1_recall", "top5_recall"])?;
    for r in rows {
        w.write_record([
            r.class.to_string(),
            r.verb.to_string(),
            r.noun.to_string(),
            r.support.to_string(),
            format_sig9(r.top1),
            format_sig9(r.top5),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rollout distribution of one sample at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAttentionRow {
    pub sample_id: String,
    pub timestep: usize,
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

pub fn write_modality_attention_csv(path: &Path, modalities: &[String], rows: &[ModalityAttentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "timestep".to_string()];
    header.extend(modalities.iter().cloned());
    header.push("degenerate".into());
    w.write_record(&header)?;
    for r in rows {
        if r.weights.len() != modalities.len() {
            return Err(Error::Invalid(format!(
                "{} attention weights for {} modalities",
                r.weights.len(),
                modalities.len()
            )));
        }
        let mut rec = vec![r.sample_id.clone(), r.timestep.to_string()];
        rec.extend(r.weights.iter().map(|&v| format_sig9(v)));
        rec.push((r.degenerate as u8).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// For every causal `(query, key)` cell, quantiles of its weight across the
/// given `T × T` maps.
pub fn write_temporal_quantiles_csv(path: &Path, maps: &[Tensor<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["query".to_string(), "key".to_string(), "count".to_string(), "mean".to_string()];
    header.extend(QUANTILES.iter().map(|q| format!("q{:02}", (q * 100.0).round() as u32)));
    w.write_record(&header)?;
    if let Some(first) = maps.first() {
        let (t, _) = first.dims2()?;
        if maps.iter().any(|m| m.shape() != first.shape()) {
            return Err(Error::Invalid("temporal attention maps differ in size".into()));
        }
        for i in 0..t {
            for j in 0..=i {
                let vals: Vec<f64> = maps.iter().map(|m| m.get2(i, j)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let mut rec = vec![i.to_string(), j.to_string(), vals.len().to_string(), format_sig9(mean)];
                for &q in &QUANTILES {
                    rec.push(format_sig9(quantile(&vals, q)?));
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
