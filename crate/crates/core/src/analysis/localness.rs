use crate::error::{Result, SateError};
use crate::nn::LayerAttention;

/// Recorded in every CSV row so results state the window they used.
pub const WINDOW_RULE: &str = "two-sided self-inclusive |i-j|<=max(1,round(0.05*L))";

/// Half-width for a sequence of `len` valid positions, so the whole window
/// spans about a tenth of the sequence.
pub fn window(len: usize) -> usize {
    ((0.05 * len as f64).round() as usize).max(1)
}

/// Per-query localness of an attention matrix `[queries × keys]` over the
/// first `len` positions, using [`window`]. `None` when `len < 2`.
pub fn localness(rows: &[f32], keys: usize, len: usize) -> Result<Option<Vec<f64>>> {
    localness_with_window(rows, keys, len, window(len))
}

/// As [`localness`] with an explicit half-width `w`.
///
/// Keys at or beyond `len` are padding and ignored; the valid part of each
/// row must sum to 1 within 1e-5.
pub fn localness_with_window(rows: &[f32], keys: usize, len: usize, w: usize) -> Result<Option<Vec<f64>>> {
    if len < 2 {
        return Ok(None);
    }
    if keys < len || rows.len() < len * keys || rows.len() % keys != 0 {
        return Err(SateError::dim(
            "localness",
            format!("{} weights with {keys} keys for length {len}", rows.len()),
        ));
    }
    let mut scores = Vec::with_capacity(len);
    for i in 0..len {
        let row = &rows[i * keys..i * keys + len];
        let total: f64 = row.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(SateError::Contract(format!(
                "attention row {i} sums to {total}, not 1"
            )));
        }
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(len - 1);
        scores.push(row[lo..=hi].iter().map(|&p| p as f64).sum());
    }
    Ok(Some(scores))
}

/// Mean localness over heads and query positions of one layer.
pub fn layer_localness(layer: &LayerAttention, len: usize) -> Result<Option<f64>> {
    if len < 2 {
        return Ok(None);
    }
    if layer.queries < len {
        return Err(SateError::dim(
            "localness",
            format!("{} queries for length {len}", layer.queries),
        ));
    }
    let mut sum = 0.0;
    for h in 0..layer.heads {
        let scores = localness(layer.head(h), layer.keys, len)?.unwrap_or_default();
        sum += scores.iter().sum::<f64>();
    }
    Ok(Some(sum / (layer.heads * len) as f64))
}
