//! Acoustic preprocessing: sliding windows, STFT, dB spectrograms, band
//! features, plus a synthetic hierarchical signal generator and label-noise
//! injection.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{LabelTree, NodeId, TreeError};

pub const DB_FLOOR: f64 = -120.0;
pub const DEFAULT_STFT_WINDOW: usize = 2048;
pub const DEFAULT_STFT_HOP: usize = 512;
pub const SYNTH_SAMPLE_RATE: f64 = 16_000.0;
pub const CACHE_MAGIC: &[u8; 4] = b"DHKS";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("window of {window} samples does not fit a stream of {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("step must be at least 1")]
    NonPositiveStep,
    #[error("signal of {len} samples is shorter than the {window}-sample STFT window")]
    SignalTooShort { len: usize, window: usize },
    #[error("STFT window length must be at least 2, got {0}")]
    InvalidWindowLength(usize),
    #[error("spectrum has no positive entry")]
    AllZeroSpectrum,
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corrupt spectrogram cache: {0}")]
    CacheCorrupt(String),
}

impl From<TreeError> for SignalError {
    fn from(e: TreeError) -> Self {
        SignalError::InvalidTree(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalStream {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub leaf: NodeId,
}

impl SignalStream {
    pub fn new(samples: Vec<f64>, sample_rate: f64, leaf: NodeId) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::InvalidArgument("stream has no samples".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(SignalError::InvalidArgument("stream has non-finite samples".into()));
        }
        if !(sample_rate > 0.0) {
            return Err(SignalError::InvalidArgument(format!("sample rate {sample_rate}")));
        }
        Ok(Self { samples, sample_rate, leaf })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `floor((m - w) / s) + 1`, or 0 when the window does not fit.
pub fn window_count(m: usize, w: usize, s: usize) -> usize {
    if w == 0 || s == 0 || w > m {
        0
    } else {
        (m - w) / s + 1
    }
}

pub fn sliding_window(stream: &SignalStream, w: usize, s: usize) -> Result<Vec<SignalStream>, SignalError> {
    if s == 0 {
        return Err(SignalError::NonPositiveStep);
    }
    if w == 0 || w > stream.len() {
        return Err(SignalError::WindowTooLarge { window: w, len: stream.len() });
    }
    Ok((0..window_count(stream.len(), w, s))
        .map(|k| SignalStream {
            samples: stream.samples[k * s..k * s + w].to_vec(),
            sample_rate: stream.sample_rate,
            leaf: stream.leaf,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowFn {
    Hann,
    Rect,
}

impl WindowFn {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFn::Rect => vec![1.0; n],
            WindowFn::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// One-sided STFT: `T` frames of `window_len / 2 + 1` bins.
pub fn stft(
    signal: &[f64],
    window_len: usize,
    hop: usize,
    window_fn: WindowFn,
) -> Result<Vec<Vec<Complex<f64>>>, SignalError> {
    if window_len < 2 {
        return Err(SignalError::InvalidWindowLength(window_len));
    }
    if hop == 0 {
        return Err(SignalError::NonPositiveStep);
    }
    if signal.len() < window_len {
        return Err(SignalError::SignalTooShort { len: signal.len(), window: window_len });
    }
    let coeffs = window_fn.coefficients(window_len);
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let bins = window_len / 2 + 1;
    let frames = window_count(signal.len(), window_len, hop);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = &signal[t * hop..t * hop + window_len];
        for ((b, &x), &c) in buf.iter_mut().zip(frame).zip(&coeffs) {
            *b = Complex::new(x * c, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    Ok(out)
}

pub fn magnitude(frames: &[Vec<Complex<f64>>]) -> Vec<Vec<f64>> {
    frames.iter().map(|f| f.iter().map(|c| c.norm()).collect()).collect()
}

/// A dB-scaled `frames × bins` matrix whose largest entry is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<Vec<f64>>,
    pub window_len: usize,
    pub hop: usize,
    pub leaf: Option<NodeId>,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.len()
    }

    pub fn bins(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

pub fn log_spectrogram(mag: &[Vec<f64>], window_len: usize, hop: usize) -> Result<Spectrogram, SignalError> {
    let bins = mag.first().map_or(0, Vec::len);
    if bins == 0 || mag.iter().any(|row| row.len() != bins) {
        return Err(SignalError::InvalidArgument("spectrum must be a nonempty rectangular matrix".into()));
    }
    let max = mag.iter().flatten().copied().fold(0.0_f64, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(SignalError::AllZeroSpectrum);
    }
    let values = mag
        .iter()
        .map(|row| {
            row.iter()
                .map(|&x| {
                    if x <= 0.0 {
                        DB_FLOOR
                    } else {
                        (10.0 * (x / max).log10()).clamp(DB_FLOOR, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(Spectrogram { values, window_len, hop, leaf: None })
}

/// Serializes a spectrogram as `DHKS`, T and F (u32 LE), 4 zero bytes, then
/// T·F little-endian f32 values in row-major order.
pub fn encode_cache(spec: &Spectrogram) -> Vec<u8> {
    let (t, f) = (spec.frames(), spec.bins());
    let mut out = Vec::with_capacity(16 + 4 * t * f);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for &v in spec.values.iter().flatten() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<Vec<f32>>, SignalError> {
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(SignalError::CacheCorrupt("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (t, f) = (word(4), word(8));
    let body = &bytes[16..];
    if t.checked_mul(f).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(SignalError::CacheCorrupt(format!("{t}x{f} header, {} payload bytes", body.len())));
    }
    Ok(body
        .chunks_exact(4 * f.max(1))
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
        .collect())
}

/// Frequency interval of every node: the root spans `[0.05, 0.45]·fs` and each
/// node's interval is split evenly among its children in canonical order.
fn node_bands(tree: &LabelTree, fs: f64) -> Result<Vec<(f64, f64)>, TreeError> {
    let mut band = vec![(0.0, 0.0); tree.len()];
    band[0] = (0.05 * fs, 0.45 * fs);
    for v in std::iter::once(tree.root()).chain(tree.scored_nodes()) {
        let (lo, hi) = band[v.0];
        let kids = tree.children(v)?;
        let width = (hi - lo) / kids.len().max(1) as f64;
        for (k, &c) in kids.iter().enumerate() {
            band[c.0] = (lo + k as f64 * width, lo + (k + 1) as f64 * width);
        }
    }
    Ok(band)
}

/// Synthetic streams, `per_leaf` per leaf, grouped by leaf in canonical order.
///
/// Every non-root node on a leaf's path contributes one tone near the centre
/// of that node's frequency interval, so the depth-1 ancestor fixes the coarse
/// band and the leaf fixes the finest tone. Tones get a random phase, a small
/// amplitude and frequency jitter, and white Gaussian noise is added at
/// `snr_db` relative to the clean signal power.
pub fn synth_dataset(
    tree: &LabelTree,
    per_leaf: usize,
    length: usize,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<SignalStream>, SignalError> {
    if per_leaf == 0 {
        return Err(SignalError::InvalidArgument("per_leaf must be at least 1".into()));
    }
    if length < 256 {
        return Err(SignalError::InvalidArgument(format!("length must be at least 256, got {length}")));
    }
    if !snr_db.is_finite() {
        return Err(SignalError::InvalidArgument(format!("snr {snr_db}")));
    }
    if tree.leaves().len() < 2 {
        return Err(SignalError::InvalidTree("need at least two leaves".into()));
    }
    let fs = SYNTH_SAMPLE_RATE;
    let band = node_bands(tree, fs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_leaf * tree.leaves().len());
    for &leaf in tree.leaves() {
        let path = tree.path_to(leaf)?;
        for _ in 0..per_leaf {
            let mut x = vec![0.0; length];
            for &v in &path[1..] {
                let (lo, hi) = band[v.0];
                let f = 0.5 * (lo + hi) + rng.random_range(-0.05..=0.05) * (hi - lo);
                let phase = rng.random_range(0.0..2.0 * PI);
                let depth = tree.depth(v)? as f64;
                let amp = rng.random_range(0.8..=1.2) * 0.7_f64.powf(depth - 1.0);
                let w = 2.0 * PI * f / fs;
                for (n, xn) in x.iter_mut().enumerate() {
                    *xn += amp * (w * n as f64 + phase).sin();
                }
            }
            let power = x.iter().map(|v| v * v).sum::<f64>() / length as f64;
            let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
            let noise = Normal::new(0.0, sigma).map_err(|e| SignalError::InvalidArgument(e.to_string()))?;
            for xn in &mut x {
                *xn += noise.sample(&mut rng);
            }
            out.push(SignalStream { samples: x, sample_rate: fs, leaf });
        }
    }
    Ok(out)
}

/// Relabels `floor(ratio·N)` seeded-uniformly chosen streams with a different
/// leaf drawn uniformly from `leaves`.
pub fn flip_labels(
    streams: &[SignalStream],
    ratio: f64,
    leaves: &[NodeId],
    seed: u64,
) -> Result<Vec<SignalStream>, SignalError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SignalError::InvalidArgument(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let mut out = streams.to_vec();
    let n = streams.len();
    let count = ((ratio * n as f64 + 1e-9).floor() as usize).min(n);
    if count == 0 || leaves.len() < 2 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let others: Vec<NodeId> = leaves.iter().copied().filter(|&l| l != out[i].leaf).collect();
        out[i].leaf = others[rng.random_range(0..others.len())];
    }
    Ok(out)
}

/// Writes `id<TAB>leaf<TAB>comma-separated samples` lines.
pub fn format_dataset(tree: &LabelTree, streams: &[SignalStream]) -> Result<String, SignalError> {
    let mut out = String::new();
    for (i, s) in streams.iter().enumerate() {
        let _ = write!(out, "{i}\t{}\t", tree.name(s.leaf)?);
        for (k, v) in s.samples.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub stream: SignalStream,
}

pub fn parse_dataset(tree: &LabelTree, text: &str, sample_rate: f64) -> Result<Vec<Record>, SignalError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(tree, line, k + 1, sample_rate)?);
    }
    Ok(out)
}

pub fn parse_record(tree: &LabelTree, line: &str, line_no: usize, sample_rate: f64) -> Result<Record, SignalError> {
    let err = |reason: String| SignalError::Parse { line: line_no, reason };
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 3 {
        return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
    }
    let leaf = tree.id(fields[1]).map_err(|_| err(format!("unknown label {:?}", fields[1])))?;
    if !tree.is_leaf(leaf) {
        return Err(err(format!("label {:?} is not a leaf", fields[1])));
    }
    let samples = fields[2]
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| err(format!("sample {v:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let stream = SignalStream::new(samples, sample_rate, leaf).map_err(|e| err(e.to_string()))?;
    Ok(Record { id: fields[0].to_string(), stream })
}

/// Stream-to-feature pipeline: sliding windows, STFT, dB spectrogram, then the
/// time-averaged spectrum pooled into `bands` equal-width frequency bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub window: usize,
    pub step: usize,
    pub stft_window: usize,
    pub stft_hop: usize,
    pub window_fn: WindowFn,
    pub bands: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            window: 4096,
            step: 4096,
            stft_window: 256,
            stft_hop: 64,
            window_fn: WindowFn::Hann,
            bands: 32,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.step == 0 || self.stft_hop == 0 {
            return Err(SignalError::NonPositiveStep);
        }
        if self.stft_window < 2 {
            return Err(SignalError::InvalidWindowLength(self.stft_window));
        }
        if self.window < self.stft_window {
            return Err(SignalError::SignalTooShort { len: self.window, window: self.stft_window });
        }
        if self.bands == 0 || self.bands > self.stft_window / 2 + 1 {
            return Err(SignalError::InvalidArgument(format!(
                "bands must be in 1..={}, got {}",
                self.stft_window / 2 + 1,
                self.bands
            )));
        }
        Ok(())
    }
}

/// Spectrogram of one window with the label attached.
pub fn spectrogram(stream: &SignalStream, spec: &FeatureSpec) -> Result<Spectrogram, SignalError> {
    let frames = stft(&stream.samples, spec.stft_window, spec.stft_hop, spec.window_fn)?;
    let mut s = log_spectrogram(&magnitude(&frames), spec.stft_window, spec.stft_hop)?;
    s.leaf = Some(stream.leaf);
    Ok(s)
}

/// Mean dB per band, standardized across the bands of the vector (zero mean,
/// unit variance; all zeros for a flat spectrum).
pub fn band_features(spec: &Spectrogram, bands: usize) -> Vec<f64> {
    let f = spec.bins();
    let mut out = vec![0.0; bands];
    for (b, slot) in out.iter_mut().enumerate() {
        let (lo, hi) = (b * f / bands, ((b + 1) * f / bands).max(b * f / bands + 1));
        let mut sum = 0.0;
        for row in &spec.values {
            sum += row[lo..hi].iter().sum::<f64>();
        }
        *slot = sum / ((hi - lo) * spec.frames()) as f64;
    }
    let mean = out.iter().sum::<f64>() / bands as f64;
    let sd = (out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / bands as f64).sqrt();
    for x in &mut out {
        *x = if sd > 1e-12 { (*x - mean) / sd } else { 0.0 };
    }
    out
}

/// One feature vector per sliding window of the stream.
pub fn featurize(stream: &SignalStream, spec: &FeatureSpec) -> Result<Vec<Vec<f64>>, SignalError> {
    spec.validate()?;
    sliding_window(stream, spec.window, spec.step)?
        .iter()
        .map(|w| spectrogram(w, spec).map(|s| band_features(&s, spec.bands)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::cavitation_tree;

    fn stream(samples: Vec<f64>) -> SignalStream {
        SignalStream::new(samples, 1000.0, NodeId(1)).unwrap()
    }

    #[test]
    fn window_offsets() {
        let s = stream((0..100).map(f64::from).collect());
        let w = sliding_window(&s, 40, 20).unwrap();
        assert_eq!(w.len(), 4);
        let starts: Vec<f64> = w.iter().map(|x| x.samples[0]).collect();
        assert_eq!(starts, vec![0.0, 20.0, 40.0, 60.0]);
        assert_eq!(sliding_window(&s, 100, 7).unwrap().len(), 1);
        assert_eq!(sliding_window(&s, 101, 1), Err(SignalError::WindowTooLarge { window: 101, len: 100 }));
        assert_eq!(sliding_window(&s, 10, 0), Err(SignalError::NonPositiveStep));
    }

    #[test]
    fn long_recording_window_count() {
        assert_eq!(window_count(4_687_500, 466_944, 466_944), 10);
    }

    #[test]
    fn dc_goes_to_bin_zero() {
        let frames = stft(&[3.0; 128], 64, 32, WindowFn::Rect).unwrap();
        assert_eq!(frames.len(), 3);
        for f in magnitude(&frames) {
            assert_eq!(f.len(), 33);
            assert!((f[0] - 192.0).abs() < 1e-9);
            assert!(f[1..].iter().all(|&m| m < 1e-9));
        }
    }

    #[test]
    fn tone_peaks_at_its_bin() {
        let k = 5.0;
        let x: Vec<f64> = (0..64).map(|n| (2.0 * PI * k * n as f64 / 64.0).cos()).collect();
        let mag = magnitude(&stft(&x, 64, 64, WindowFn::Rect).unwrap());
        let peak = (0..33).max_by(|&a, &b| mag[0][a].total_cmp(&mag[0][b])).unwrap();
        assert_eq!(peak, 5);
    }

    #[test]
    fn stft_errors() {
        assert_eq!(stft(&[1.0; 10], 16, 4, WindowFn::Hann), Err(SignalError::SignalTooShort { len: 10, window: 16 }));
        assert_eq!(stft(&[1.0; 10], 1, 4, WindowFn::Hann), Err(SignalError::InvalidWindowLength(1)));
    }

    #[test]
    fn default_hop_is_quarter_window() {
        assert_eq!(DEFAULT_STFT_WINDOW, 4 * DEFAULT_STFT_HOP);
    }

    #[test]
    fn db_scaling() {
        let s = log_spectrogram(&[vec![2.0, 2.0], vec![2.0, 2.0]], 2, 1).unwrap();
        assert!(s.values.iter().flatten().all(|&v| v == 0.0));
        let s = log_spectrogram(&[vec![1.0, 0.1, 0.0]], 4, 1).unwrap();
        assert_eq!(s.values[0][0], 0.0);
        assert!((s.values[0][1] + 10.0).abs() < 1e-12);
        assert_eq!(s.values[0][2], DB_FLOOR);
        assert_eq!(log_spectrogram(&[vec![0.0; 3]], 4, 1), Err(SignalError::AllZeroSpectrum));
    }

    #[test]
    fn cache_round_trip() {
        let s = log_spectrogram(&[vec![1.0, 0.5, 0.25], vec![0.1, 0.2, 0.3]], 4, 2).unwrap();
        let bytes = encode_cache(&s);
        assert_eq!(bytes.len(), 16 + 4 * 6);
        assert_eq!(&bytes[..4], b"DHKS");
        let back = decode_cache(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (r, row) in back.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(v, s.values[r][c] as f32);
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cache(&bad), Err(SignalError::CacheCorrupt(_))));
        assert!(decode_cache(&bytes[..20]).is_err());
    }

    #[test]
    fn synth_counts_and_determinism() {
        let t = cavitation_tree();
        let a = synth_dataset(&t, 40, 512, 20.0, 7).unwrap();
        assert_eq!(a.len(), 200);
        for &leaf in t.leaves() {
            assert_eq!(a.iter().filter(|s| s.leaf == leaf).count(), 40);
        }
        let b = synth_dataset(&t, 40, 512, 20.0, 7).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.samples.iter().zip(&y.samples).all(|(p, q)| p.to_bits() == q.to_bits())));
        assert!(synth_dataset(&t, 0, 512, 20.0, 7).is_err());
        assert!(synth_dataset(&t, 1, 255, 20.0, 7).is_err());
    }

    #[test]
    fn bands_nest_inside_parents() {
        let t = cavitation_tree();
        let band = node_bands(&t, SYNTH_SAMPLE_RATE).unwrap();
        for v in t.scored_nodes() {
            let (lo, hi) = band[v.0];
            let (plo, phi) = band[t.parent(v).unwrap().0];
            assert!(plo <= lo && hi <= phi && lo < hi);
        }
    }

    #[test]
    fn flip_counts() {
        let t = cavitation_tree();
        let data = synth_dataset(&t, 40, 256, 20.0, 1).unwrap();
        assert_eq!(flip_labels(&data, 0.0, t.leaves(), 3).unwrap(), data);
        let flipped = flip_labels(&data, 0.05, t.leaves(), 3).unwrap();
        assert_eq!(flipped.iter().zip(&data).filter(|(a, b)| a.leaf != b.leaf).count(), 10);
        let all = flip_labels(&data, 1.0, t.leaves(), 3).unwrap();
        assert!(all.iter().zip(&data).all(|(a, b)| a.leaf != b.leaf));
        assert!(flip_labels(&data, 1.5, t.leaves(), 3).is_err());
    }

    #[test]
    fn dataset_text_round_trip() {
        let t = cavitation_tree();
        let data = synth_dataset(&t, 2, 256, 30.0, 4).unwrap();
        let text = format_dataset(&t, &data).unwrap();
        let back = parse_dataset(&t, &text, SYNTH_SAMPLE_RATE).unwrap();
        assert_eq!(back.len(), data.len());
        for (r, s) in back.iter().zip(&data) {
            assert_eq!(&r.stream, s);
        }
        let err = parse_dataset(&t, "0\tturbulent\t1,2\n1\tturbulent\n", 1.0).unwrap_err();
        assert!(matches!(err, SignalError::Parse { line: 2, .. }));
        let err = parse_dataset(&t, "0\tcavitation\t1,2\n", 1.0).unwrap_err();
        assert!(matches!(err, SignalError::Parse { line: 1, .. }));
    }

    #[test]
    fn feature_shape() {
        let t = cavitation_tree();
        let data = synth_dataset(&t, 1, 8192, 30.0, 2).unwrap();
        let spec = FeatureSpec::default();
        let f = featurize(&data[0], &spec).unwrap();
        assert_eq!(f.len(), 2);
        assert!(f.iter().all(|v| v.len() == 32 && v.iter().all(|x| x.is_finite())));
        let bad = FeatureSpec { bands: 0, ..spec };
        assert!(featurize(&data[0], &bad).is_err());
    }
}
