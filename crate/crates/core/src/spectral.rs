//! Frequency-domain view of an episode: one-sided DFT amplitudes per channel.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Episode, Split};
use crate::error::{ClanError, Result};

/// A frequency-domain episode: `D × (n_fft/2 + 1)` amplitudes, mask all true.
pub type SpectralEpisode = Episode;

/// Number of one-sided bins for a transform of length `n_fft`.
pub fn one_sided_len(n_fft: usize) -> usize {
    n_fft / 2 + 1
}

/// Full complex DFT of `signal` zero-padded to `n_fft` points.
pub fn complex_spectrum(signal: &[f64], n_fft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = signal
        .iter()
        .map(|v| Complex64::new(*v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    buf
}

/// Amplitude spectrum over the full padded length of the episode.
pub fn fft_magnitude(episode: &Episode) -> SpectralEpisode {
    fft_magnitude_with_len(episode, episode.len()).expect("n_fft equals episode length")
}

/// Like [`fft_magnitude`] with an explicit transform length `n_fft >= L`.
pub fn fft_magnitude_with_len(episode: &Episode, n_fft: usize) -> Result<SpectralEpisode> {
    if n_fft < episode.len() {
        return Err(ClanError::Length(format!(
            "fft length {n_fft} shorter than episode length {}",
            episode.len()
        )));
    }
    let bins = one_sided_len(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut values = Array2::zeros((episode.channels(), bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for (row, mut out) in episode.values.rows().into_iter().zip(values.rows_mut()) {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            b.re = *v;
        }
        fft.process(&mut buf);
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o = b.norm();
        }
    }
    let mut spectral = Episode::new(episode.id, episode.label, values);
    spectral.subject = episode.subject.clone();
    Ok(spectral)
}

/// `sum |X[k]|^2` over all `n_fft` bins, rebuilt from one-sided amplitudes.
pub fn full_spectrum_energy(one_sided: &[f64], n_fft: usize) -> f64 {
    one_sided
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let mirrored = k != 0 && !(n_fft % 2 == 0 && k == n_fft / 2);
            if mirrored {
                2.0 * a * a
            } else {
                a * a
            }
        })
        .sum()
}

/// Per-(channel, bin) statistics for spectral z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

/// Converts every episode to its amplitude spectrum and z-scores each
/// (channel, bin) with train-split statistics.
pub fn frequency_manifest(manifest: &DatasetManifest, n_fft: Option<usize>) -> Result<DatasetManifest> {
    let n_fft = n_fft.unwrap_or(manifest.l_max);
    let spectra = manifest
        .episodes
        .iter()
        .map(|e| fft_magnitude_with_len(e, n_fft))
        .collect::<Result<Vec<_>>>()?;
    let mut out = DatasetManifest::from_episodes(spectra)?;
    out.known_labels = manifest.known_labels.clone();
    out.split = manifest.split.clone();
    let stats = bin_stats(&out)?;
    for e in &mut out.episodes {
        e.values = (&e.values - &stats.mean) / &stats.std;
    }
    Ok(out)
}

fn bin_stats(spectral: &DatasetManifest) -> Result<BinStats> {
    let train = spectral.episodes_in(Split::Train);
    if train.is_empty() {
        return Err(ClanError::Config("spectral z-scoring needs a non-empty train split".into()));
    }
    let n = train.len() as f64;
    let shape = train[0].values.dim();
    let mut mean = Array2::<f64>::zeros(shape);
    for e in &train {
        mean += &e.values;
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros(shape);
    for e in &train {
        var += &(&e.values - &mean).mapv(|v| v * v);
    }
    let std = (var / n).mapv(|v| {
        let s = v.sqrt();
        if s < crate::data::MIN_STD {
            1.0
        } else {
            s
        }
    });
    Ok(BinStats { mean, std })
}
