//! Per-frame-pair 5x5x8 histograms and their time series.
//!
//! Both descriptors split the frame into a 5x5 grid of cells and eight
//! orientation bins. Bin index is `(cell_row * 5 + cell_col) * 8 + orientation`.
//!
//! * HoF accumulates optical-flow magnitude into the hard orientation bin
//!   `floor(θ / (π/4))` of `θ = atan2(v, u)`.
//! * HoG binarizes the temporal difference `next - prev` to `{0, 255}` and
//!   splits each surviving pixel linearly between the two nearest of the
//!   eight orientations `k·π/4`, taking orientation from the spatial gradient
//!   of the difference image.

use std::f64::consts::{FRAC_PI_4, TAU};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{flow_between, FarnebackParams, FlowField, FlowPyramid};
use crate::frame::{Frame, FrameSequence};

pub const GRID: usize = 5;
pub const ORIENTATIONS: usize = 8;
pub const HISTOGRAM_BINS: usize = GRID * GRID * ORIENTATIONS;

/// Default HoG binarization threshold in luminance units.
pub const DEFAULT_HOG_THRESHOLD: f64 = 40.0;

/// Value assigned to a difference pixel that passes the threshold.
const BINARIZED: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameHistogram {
    bins: Vec<f64>,
}

impl FrameHistogram {
    pub fn zeros() -> Self {
        FrameHistogram {
            bins: vec![0.0; HISTOGRAM_BINS],
        }
    }

    pub fn from_bins(bins: Vec<f64>) -> Result<Self> {
        if bins.len() != HISTOGRAM_BINS {
            return Err(Error::DimensionMismatch(format!(
                "histogram needs {HISTOGRAM_BINS} bins, got {}",
                bins.len()
            )));
        }
        if bins.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidParameter(
                "histogram bins must be finite and nonnegative".into(),
            ));
        }
        Ok(FrameHistogram { bins })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn bin(&self, cell_row: usize, cell_col: usize, orientation: usize) -> f64 {
        self.bins[bin_index(cell_row, cell_col, orientation)]
    }
}

#[inline]
pub fn bin_index(cell_row: usize, cell_col: usize, orientation: usize) -> usize {
    (cell_row * GRID + cell_col) * ORIENTATIONS + orientation
}

#[inline]
fn cell_of(pos: usize, len: usize) -> usize {
    ((GRID * pos) / len).min(GRID - 1)
}

/// Angle of `(x, y)` normalized to `[0, 2π)`.
#[inline]
fn orientation(x: f64, y: f64) -> f64 {
    let t = y.atan2(x);
    if t < 0.0 {
        // Tiny negative angles can round up to exactly 2π.
        let t = t + TAU;
        if t >= TAU {
            0.0
        } else {
            t
        }
    } else {
        t
    }
}

/// Histogram of optical flow for one frame pair.
pub fn hof_frame(flow: &FlowField) -> FrameHistogram {
    let (w, h) = (flow.width(), flow.height());
    let mut hist = FrameHistogram::zeros();
    for y in 0..h {
        let row = cell_of(y, h);
        for x in 0..w {
            let i = y * w + x;
            let (u, v) = (flow.u()[i], flow.v()[i]);
            let m = u.hypot(v);
            if m == 0.0 {
                continue;
            }
            let bin = ((orientation(u, v) / FRAC_PI_4) as usize).min(ORIENTATIONS - 1);
            hist.bins[bin_index(row, cell_of(x, w), bin)] += m;
        }
    }
    hist
}

/// Histogram of binarized temporal-difference gradients for one frame pair.
pub fn hog_frame(prev: &Frame, next: &Frame, threshold: f64) -> Result<FrameHistogram> {
    let (w, h) = (prev.width(), prev.height());
    if (w, h) != (next.width(), next.height()) {
        return Err(Error::DimensionMismatch(format!(
            "hog frames differ: {w}x{h} vs {}x{}",
            next.width(),
            next.height()
        )));
    }
    let diff: Vec<f64> = next
        .pixels()
        .iter()
        .zip(prev.pixels())
        .map(|(n, p)| n - p)
        .collect();
    let at = |x: usize, y: usize| diff[y * w + x];
    let mut hist = FrameHistogram::zeros();
    for y in 0..h {
        let row = cell_of(y, h);
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            if at(x, y).abs() < threshold {
                continue;
            }
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = (at(xp, y) - at(xm, y)) / 2.0;
            let gy = (at(x, yp) - at(x, ym)) / 2.0;
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let pos = orientation(gx, gy) / FRAC_PI_4;
            let lo = (pos.floor() as usize).min(ORIENTATIONS - 1);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            let hi = (lo + 1) % ORIENTATIONS;
            let col = cell_of(x, w);
            hist.bins[bin_index(row, col, lo)] += BINARIZED * (1.0 - frac);
            hist.bins[bin_index(row, col, hi)] += BINARIZED * frac;
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeriesKind {
    Hof,
    Hog,
}

impl SeriesKind {
    /// File suffix of the text dump.
    pub fn dump_suffix(self) -> &'static str {
        match self {
            SeriesKind::Hof => "of.txt",
            SeriesKind::Hog => "hog.txt",
        }
    }
}

/// One histogram per consecutive frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSeries {
    kind: SeriesKind,
    histograms: Vec<FrameHistogram>,
}

impl HistogramSeries {
    pub fn new(kind: SeriesKind, histograms: Vec<FrameHistogram>) -> Self {
        HistogramSeries { kind, histograms }
    }

    pub fn kind(&self) -> SeriesKind {
        self.kind
    }

    pub fn histograms(&self) -> &[FrameHistogram] {
        &self.histograms
    }

    pub fn len(&self) -> usize {
        self.histograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }

    /// The series played backwards.
    pub fn reversed(&self) -> Self {
        HistogramSeries {
            kind: self.kind,
            histograms: self.histograms.iter().rev().cloned().collect(),
        }
    }
}

/// HoF and HoG series of a video, each of length `frame_count - 1`.
pub fn compute_series(
    seq: &FrameSequence,
    fb: &FarnebackParams,
    threshold: f64,
) -> Result<(HistogramSeries, HistogramSeries)> {
    let frames = seq.frames();
    let mut hof = Vec::with_capacity(frames.len() - 1);
    let mut hog = Vec::with_capacity(frames.len() - 1);
    let mut prev_pyr = FlowPyramid::build(&frames[0], fb)?;
    for pair in frames.windows(2) {
        let next_pyr = FlowPyramid::build(&pair[1], fb)?;
        hof.push(hof_frame(&flow_between(&prev_pyr, &next_pyr, fb)?));
        hog.push(hog_frame(&pair[0], &pair[1], threshold)?);
        prev_pyr = next_pyr;
    }
    Ok((
        HistogramSeries::new(SeriesKind::Hof, hof),
        HistogramSeries::new(SeriesKind::Hog, hog),
    ))
}

/// Writes `<key>.of.txt` or `<key>.hog.txt`: one line per frame pair with
/// 200 space-separated values in shortest round-trip form.
pub fn dump_series_text(series: &HistogramSeries, key: &str, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join(format!("{key}.{}", series.kind.dump_suffix()));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for hist in &series.histograms {
            let mut first = true;
            for b in &hist.bins {
                if !first {
                    out.write_all(b" ")?;
                }
                first = false;
                write!(out, "{b}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a series written by [`dump_series_text`].
pub fn read_series_text(path: &Path, kind: SeriesKind) -> Result<HistogramSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let histograms = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let bins = line
                .split(' ')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Csv {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            FrameHistogram::from_bins(bins)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HistogramSeries::new(kind, histograms))
}
