//! Gland-referenced intensity normalization.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizeError {
    #[error("gland mask is empty")]
    EmptyGland,
    #[error("degenerate contrast: {0}")]
    DegenerateContrast(String),
    #[error("channel has {channel} voxels, mask has {mask}")]
    SizeMismatch { channel: usize, mask: usize },
}

fn gland_values(channel: &[f32], gland: &[u8]) -> Result<Vec<f64>, NormalizeError> {
    if channel.len() != gland.len() {
        return Err(NormalizeError::SizeMismatch {
            channel: channel.len(),
            mask: gland.len(),
        });
    }
    let v: Vec<f64> = channel
        .iter()
        .zip(gland)
        .filter_map(|(&c, &m)| (m != 0).then_some(c as f64))
        .collect();
    if v.is_empty() {
        return Err(NormalizeError::EmptyGland);
    }
    Ok(v)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(I − p1) / (p99 − p1)` with percentiles taken over gland voxels and the
/// map applied to the whole channel. No clipping.
pub fn iqr_normalize(channel: &[f32], gland: &[u8]) -> Result<Vec<f32>, NormalizeError> {
    let mut v = gland_values(channel, gland)?;
    v.sort_by(f64::total_cmp);
    let (p1, p99) = (percentile(&v, 1.0), percentile(&v, 99.0));
    if p99 <= p1 {
        return Err(NormalizeError::DegenerateContrast(format!(
            "99th percentile {p99} equals 1st percentile {p1}"
        )));
    }
    let scale = p99 - p1;
    Ok(channel.iter().map(|&c| ((c as f64 - p1) / scale) as f32).collect())
}

/// Zero mean, unit population variance over the gland.
pub fn zscore_normalize(channel: &[f32], gland: &[u8]) -> Result<Vec<f32>, NormalizeError> {
    let v = gland_values(channel, gland)?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(NormalizeError::DegenerateContrast("gland variance is zero".into()));
    }
    let sd = var.sqrt();
    Ok(channel.iter().map(|&c| ((c as f64 - mean) / sd) as f32).collect())
}

/// IQR then z-score, the order used for every generated channel.
pub fn normalize_channel(channel: &[f32], gland: &[u8]) -> Result<Vec<f32>, NormalizeError> {
    zscore_normalize(&iqr_normalize(channel, gland)?, gland)
}
