use ndarray::{s, Array2};

use super::episode::{ChannelStats, DatasetManifest, Split, PAD_VALUE};
use crate::error::{ClanError, Result};

/// Standard deviations below this are treated as a constant channel.
pub const MIN_STD: f64 = 1e-8;

/// Per-channel mean and population std over the unpadded train values.
pub fn train_channel_stats(manifest: &DatasetManifest) -> Result<ChannelStats> {
    let train = manifest.episodes_in(Split::Train);
    if train.is_empty() {
        return Err(ClanError::Config(
            "z-score normalization needs a non-empty train split".into(),
        ));
    }
    let d = manifest.channels;
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for e in &train {
        for (c, row) in e.prefix().rows().into_iter().enumerate() {
            sum[c] += row.sum();
        }
        count += e.raw_len;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; d];
    for e in &train {
        for (c, row) in e.prefix().rows().into_iter().enumerate() {
            sq[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < MIN_STD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Z-scores every channel with statistics taken from the train split only.
pub fn zscore_normalize(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let stats = train_channel_stats(manifest)?;
    let mut out = manifest.clone();
    for e in &mut out.episodes {
        let raw_len = e.raw_len;
        for (c, mut row) in e.values.rows_mut().into_iter().enumerate() {
            row.slice_mut(s![..raw_len])
                .mapv_inplace(|v| (v - stats.mean[c]) / stats.std[c]);
        }
    }
    out.normalization = Some(stats);
    Ok(out)
}

/// Right-pads every episode with [`PAD_VALUE`] to `l_max` timesteps.
pub fn pad_and_mask(manifest: &DatasetManifest, l_max: usize) -> Result<DatasetManifest> {
    if let Some(e) = manifest.episodes.iter().find(|e| e.raw_len > l_max) {
        return Err(ClanError::Length(format!(
            "episode {} has raw length {} > l_max {l_max}",
            e.id, e.raw_len
        )));
    }
    let mut out = manifest.clone();
    for e in &mut out.episodes {
        let mut values = Array2::from_elem((e.channels(), l_max), PAD_VALUE);
        values
            .slice_mut(s![.., ..e.raw_len])
            .assign(&e.values.slice(s![.., ..e.raw_len]));
        e.values = values;
        e.mask = (0..l_max).map(|t| t < e.raw_len).collect();
    }
    out.l_max = l_max;
    Ok(out)
}

/// Centered moving average over the unpadded prefix; windows shrink at the edges.
pub fn smooth_moving_average(manifest: &DatasetManifest, width: usize) -> Result<DatasetManifest> {
    if width == 0 {
        return Err(ClanError::Parameter("smoothing width must be positive".into()));
    }
    let half = width / 2;
    let mut out = manifest.clone();
    for e in &mut out.episodes {
        let n = e.raw_len;
        for mut row in e.values.rows_mut() {
            let src: Vec<f64> = row.iter().take(n).copied().collect();
            for t in 0..n {
                let lo = t.saturating_sub(half);
                let hi = (t + width - half).min(n);
                row[t] = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
    }
    Ok(out)
}

/// Snaps each channel onto `levels` uniform levels spanning its range over the
/// whole dataset.
pub fn quantize_sensor_levels(manifest: &DatasetManifest, levels: usize) -> Result<DatasetManifest> {
    if levels < 2 {
        return Err(ClanError::Parameter("sensor quantization needs >= 2 levels".into()));
    }
    let d = manifest.channels;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for e in &manifest.episodes {
        for (c, row) in e.prefix().rows().into_iter().enumerate() {
            for v in row {
                lo[c] = lo[c].min(*v);
                hi[c] = hi[c].max(*v);
            }
        }
    }
    let mut out = manifest.clone();
    for e in &mut out.episodes {
        let n = e.raw_len;
        for (c, mut row) in e.values.rows_mut().into_iter().enumerate() {
            let step = (hi[c] - lo[c]) / (levels - 1) as f64;
            if step <= 0.0 {
                continue;
            }
            row.slice_mut(s![..n])
                .mapv_inplace(|v| lo[c] + ((v - lo[c]) / step).round() * step);
        }
    }
    Ok(out)
}
