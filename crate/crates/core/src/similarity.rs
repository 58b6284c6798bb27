//! Chi-square distances between PoT features and the similarity score.
//!
//! For a pair of videos the chi-square distance is computed in each of the
//! six slots, divided by the corpus mean distance of that slot, summed into a
//! kernel distance `kd`, and mapped to `exp(-kd / 10)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pooling::{PoTFeature, Slot};

pub const MEAN_CSV_HEADER: &str = "series,pooling,mean_csd,pair_count";
pub const SIMILARITY_CSV_HEADER: &str = "video_a,video_b,similarity";

/// `½ Σ (a-b)² / (a+b)`, skipping terms with `a + b = 0`, summed in index
/// order.
pub fn chi_square(fa: &[f64], fb: &[f64]) -> Result<f64> {
    if fa.len() != fb.len() {
        return Err(Error::DimensionMismatch(format!(
            "chi-square over vectors of length {} and {}",
            fa.len(),
            fb.len()
        )));
    }
    let mut acc = 0.0;
    for (&a, &b) in fa.iter().zip(fb) {
        let s = a + b;
        if s != 0.0 {
            let d = a - b;
            acc += d * d / s;
        }
    }
    Ok(0.5 * acc)
}

/// Per-slot values indexed in [`Slot::ALL`] order.
pub type SlotValues = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CsdSixtuple(pub SlotValues);

impl CsdSixtuple {
    pub fn get(&self, slot: Slot) -> f64 {
        self.0[slot.index()]
    }
}

pub fn csd_sixtuple(a: &PoTFeature, b: &PoTFeature) -> Result<CsdSixtuple> {
    let mut out = [0.0; 6];
    for slot in Slot::ALL {
        out[slot.index()] = chi_square(a.get(slot), b.get(slot))?;
    }
    Ok(CsdSixtuple(out))
}

/// Corpus mean chi-square distance per slot over unordered pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCsd {
    pub mean: SlotValues,
    pub pair_count: u64,
}

impl MeanCsd {
    pub fn get(&self, slot: Slot) -> f64 {
        self.mean[slot.index()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{MEAN_CSV_HEADER}\n");
        for slot in Slot::ALL {
            writeln!(
                out,
                "{},{},{},{}",
                slot.series_name(),
                slot.pooling_name(),
                self.mean[slot.index()],
                self.pair_count
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<MeanCsd> {
        let bad = |line: usize, msg: &str| Error::Csv {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(MEAN_CSV_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let mut mean = [f64::NAN; 6];
        let mut count = None;
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [series, pooling, value, pairs] = fields[..] else {
                return Err(bad(n, "expected 4 fields"));
            };
            let slot = Slot::from_names(series, pooling).ok_or_else(|| bad(n, "unknown slot"))?;
            let value: f64 = value.parse().map_err(|_| bad(n, "bad mean_csd"))?;
            let pairs: u64 = pairs.parse().map_err(|_| bad(n, "bad pair_count"))?;
            if !(value.is_finite() && value >= 0.0) {
                return Err(bad(n, "mean_csd must be finite and nonnegative"));
            }
            if !mean[slot.index()].is_nan() {
                return Err(bad(n, "duplicate slot"));
            }
            if count.is_some_and(|c| c != pairs) {
                return Err(bad(n, "inconsistent pair_count"));
            }
            mean[slot.index()] = value;
            count = Some(pairs);
            rows += 1;
        }
        match count {
            Some(pair_count) if rows == 6 && pair_count >= 1 => Ok(MeanCsd { mean, pair_count }),
            _ => Err(bad(rows + 1, "expected 6 data rows with pair_count >= 1")),
        }
    }

    pub fn read_csv(path: &Path) -> Result<MeanCsd> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MeanCsd::parse_csv(&text, path)
    }
}

/// Divides per-slot distance sums by the number of unordered pairs.
pub fn mean_csd(partial_sums: &SlotValues, pair_count: u64) -> Result<MeanCsd> {
    if pair_count == 0 {
        return Err(Error::TooFewVideos);
    }
    Ok(MeanCsd {
        mean: partial_sums.map(|s| s / pair_count as f64),
        pair_count,
    })
}

/// `Σ csd / mean` over slots; slots with zero mean contribute nothing.
pub fn kernel_distance(csd: &CsdSixtuple, mean: &MeanCsd) -> f64 {
    csd.0
        .iter()
        .zip(&mean.mean)
        .map(|(&c, &m)| if m == 0.0 { 0.0 } else { c / m })
        .sum()
}

/// Maps a kernel distance in `[0, ∞)` to a score in `(0, 1]`.
pub fn similarity_score(kd: f64) -> Result<f64> {
    if kd.is_nan() || kd < 0.0 {
        return Err(Error::NegativeDistance(kd));
    }
    Ok((-kd / 10.0).exp())
}

/// Number of unordered pairs of `n` items.
pub fn pair_count(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Lazily enumerates unordered key pairs `(a, b)` with `a < b` in
/// lexicographic order.
#[derive(Debug, Clone)]
pub struct Pairs<'a> {
    keys: Vec<&'a str>,
    i: usize,
    j: usize,
    remaining: usize,
}

impl<'a> Iterator for Pairs<'a> {
    type Item = (&'a str, &'a str);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let item = (self.keys[self.i], self.keys[self.j]);
        self.j += 1;
        if self.j == self.keys.len() {
            self.i += 1;
            self.j = self.i + 1;
        }
        self.remaining -= 1;
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for Pairs<'_> {}

pub fn generate_pairs<S: AsRef<str>>(keys: &[S]) -> Result<Pairs<'_>> {
    let mut sorted: Vec<&str> = keys.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateKey(w[0].to_string()));
    }
    let remaining = pair_count(sorted.len() as u64) as usize;
    Ok(Pairs {
        keys: sorted,
        i: 0,
        j: 1,
        remaining,
    })
}

/// Score of one unordered pair, keys in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRecord {
    pub key_a: String,
    pub key_b: String,
    pub score: f64,
}

impl SimilarityRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.key_a, self.key_b, self.score)
    }

    pub fn parse_csv_row(line: &str) -> Option<SimilarityRecord> {
        let mut it = line.split(',');
        let (a, b, s) = (it.next()?, it.next()?, it.next()?);
        if it.next().is_some() || a.is_empty() || b.is_empty() {
            return None;
        }
        Some(SimilarityRecord {
            key_a: a.to_string(),
            key_b: b.to_string(),
            score: s.parse().ok()?,
        })
    }
}

/// Reads `similarity.csv`, checking the header, canonical key order, score
/// range and row ordering.
pub fn read_similarity_csv(path: &Path) -> Result<Vec<SimilarityRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(SIMILARITY_CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut out: Vec<SimilarityRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let rec = SimilarityRecord::parse_csv_row(line).ok_or_else(|| bad(n, "malformed row"))?;
        if rec.key_a >= rec.key_b {
            return Err(bad(n, "keys not in canonical order"));
        }
        if !(rec.score > 0.0 && rec.score <= 1.0) {
            return Err(bad(n, "score outside (0, 1]"));
        }
        if let Some(prev) = out.last() {
            if (prev.key_a.as_str(), prev.key_b.as_str())
                >= (rec.key_a.as_str(), rec.key_b.as_str())
            {
                return Err(bad(n, "rows not sorted by (video_a, video_b)"));
            }
        }
        out.push(rec);
    }
    Ok(out)
}
