//! Temporal pyramid pooling of histogram series.
//!
//! A temporal pyramid with levels `[1, 2, 4]` splits the series into 1, 2 and
//! 4 contiguous intervals (K = 7 in total). Each interval is pooled three
//! ways: sum, gradient (positive and negative variation) and max. The pooled
//! vectors of all intervals are concatenated per (series, operator) slot.

use crate::descriptors::{HistogramSeries, HISTOGRAM_BINS};
use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: [usize; 3] = [1, 2, 4];

/// Half-open range `[start, end)` of frame-pair indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalInterval {
    pub start: usize,
    pub end: usize,
}

impl TemporalInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Partitions `[0, series_len)` at every pyramid level. Within a level the
/// lengths differ by at most one, longer intervals first.
pub fn build_intervals(series_len: usize, levels: &[usize]) -> Result<Vec<TemporalInterval>> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "pyramid levels must be non-empty and positive, got {levels:?}"
        )));
    }
    let deepest = *levels.iter().max().expect("non-empty");
    if series_len < deepest {
        return Err(Error::VideoTooShort {
            len: series_len,
            needed: deepest,
        });
    }
    let mut out = Vec::with_capacity(levels.iter().sum());
    for &parts in levels {
        let (base, extra) = (series_len / parts, series_len % parts);
        let mut start = 0;
        for k in 0..parts {
            let len = base + usize::from(k < extra);
            out.push(TemporalInterval {
                start,
                end: start + len,
            });
            start += len;
        }
    }
    Ok(out)
}

fn check(series: &HistogramSeries, iv: TemporalInterval) {
    assert!(
        !iv.is_empty() && iv.end <= series.len(),
        "interval {iv:?} outside series of length {}",
        series.len()
    );
}

pub fn sum_pool(series: &HistogramSeries, iv: TemporalInterval) -> Vec<f64> {
    check(series, iv);
    let mut out = vec![0.0; HISTOGRAM_BINS];
    for hist in &series.histograms()[iv.start..iv.end] {
        for (o, b) in out.iter_mut().zip(hist.bins()) {
            *o += b;
        }
    }
    out
}

/// Positive variation block followed by negative variation block.
pub fn gradient_pool(series: &HistogramSeries, iv: TemporalInterval) -> Vec<f64> {
    check(series, iv);
    let mut out = vec![0.0; 2 * HISTOGRAM_BINS];
    let (pos, neg) = out.split_at_mut(HISTOGRAM_BINS);
    for pair in series.histograms()[iv.start..iv.end].windows(2) {
        for (d, (a, b)) in pair[0].bins().iter().zip(pair[1].bins()).enumerate() {
            let delta = b - a;
            if delta > 0.0 {
                pos[d] += delta;
            } else if delta < 0.0 {
                neg[d] -= delta;
            }
        }
    }
    out
}

pub fn max_pool(series: &HistogramSeries, iv: TemporalInterval) -> Vec<f64> {
    check(series, iv);
    let mut out = series.histograms()[iv.start].bins().to_vec();
    for hist in &series.histograms()[iv.start + 1..iv.end] {
        for (o, &b) in out.iter_mut().zip(hist.bins()) {
            *o = o.max(b);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Series {
    Hof,
    Hog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pooling {
    Sum,
    Gradient,
    Max,
}

/// One of the six (series, pooling operator) feature slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub series: Series,
    pub pooling: Pooling,
}

impl Slot {
    /// All slots in canonical order: hof/sum, hof/gradient, hof/max,
    /// hog/sum, hog/gradient, hog/max.
    pub const ALL: [Slot; 6] = [
        Slot::new(Series::Hof, Pooling::Sum),
        Slot::new(Series::Hof, Pooling::Gradient),
        Slot::new(Series::Hof, Pooling::Max),
        Slot::new(Series::Hog, Pooling::Sum),
        Slot::new(Series::Hog, Pooling::Gradient),
        Slot::new(Series::Hog, Pooling::Max),
    ];

    pub const fn new(series: Series, pooling: Pooling) -> Self {
        Slot { series, pooling }
    }

    pub fn index(self) -> usize {
        let s = match self.series {
            Series::Hof => 0,
            Series::Hog => 1,
        };
        let p = match self.pooling {
            Pooling::Sum => 0,
            Pooling::Gradient => 1,
            Pooling::Max => 2,
        };
        s * 3 + p
    }

    pub fn series_name(self) -> &'static str {
        match self.series {
            Series::Hof => "hof",
            Series::Hog => "hog",
        }
    }

    pub fn pooling_name(self) -> &'static str {
        match self.pooling {
            Pooling::Sum => "sum",
            Pooling::Gradient => "gradient",
            Pooling::Max => "max",
        }
    }

    pub fn from_names(series: &str, pooling: &str) -> Option<Slot> {
        Slot::ALL
            .into_iter()
            .find(|s| s.series_name() == series && s.pooling_name() == pooling)
    }

    /// Dimensionality of this slot for `k` pyramid intervals.
    pub fn dim(self, k: usize) -> usize {
        match self.pooling {
            Pooling::Gradient => 2 * HISTOGRAM_BINS * k,
            Pooling::Sum | Pooling::Max => HISTOGRAM_BINS * k,
        }
    }
}

/// The six pooled vectors of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PoTFeature {
    slots: [Vec<f64>; 6],
}

impl PoTFeature {
    /// Builds a feature from slot vectors in canonical order, validating the
    /// dimensional contract and nonnegativity.
    pub fn from_slots(slots: [Vec<f64>; 6]) -> Result<Self> {
        let k = slots[0].len() / HISTOGRAM_BINS;
        for slot in Slot::ALL {
            let v = &slots[slot.index()];
            if k == 0 || v.len() != slot.dim(k) {
                return Err(Error::DimensionMismatch(format!(
                    "slot {}/{} has {} entries, expected {}",
                    slot.series_name(),
                    slot.pooling_name(),
                    v.len(),
                    slot.dim(k.max(1))
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "slot {}/{} has negative or non-finite entries",
                    slot.series_name(),
                    slot.pooling_name()
                )));
            }
        }
        Ok(PoTFeature { slots })
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.slots[slot.index()]
    }

    pub fn slots(&self) -> &[Vec<f64>; 6] {
        &self.slots
    }

    /// Number of temporal intervals the feature was pooled over.
    pub fn interval_count(&self) -> usize {
        self.slots[0].len() / HISTOGRAM_BINS
    }

    /// Every entry multiplied by `c` (must be positive).
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0, "scale factor must be positive");
        PoTFeature {
            slots: self
                .slots
                .clone()
                .map(|v| v.into_iter().map(|x| x * c).collect()),
        }
    }
}

/// Pools both series over the temporal pyramid.
pub fn pot_vector(
    hof: &HistogramSeries,
    hog: &HistogramSeries,
    levels: &[usize],
) -> Result<PoTFeature> {
    if hof.len() != hog.len() {
        return Err(Error::DimensionMismatch(format!(
            "hof series has {} entries, hog {}",
            hof.len(),
            hog.len()
        )));
    }
    let intervals = build_intervals(hof.len(), levels)?;
    let pool = |series: &HistogramSeries,
                op: fn(&HistogramSeries, TemporalInterval) -> Vec<f64>| {
        intervals
            .iter()
            .flat_map(|&iv| op(series, iv))
            .collect::<Vec<f64>>()
    };
    PoTFeature::from_slots([
        pool(hof, sum_pool),
        pool(hof, gradient_pool),
        pool(hof, max_pool),
        pool(hog, sum_pool),
        pool(hog, gradient_pool),
        pool(hog, max_pool),
    ])
}
