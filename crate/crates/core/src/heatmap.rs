//! Renders a similarity table as an N×N grayscale matrix.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::engine::atomic_write;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::similarity::{read_similarity_csv, SimilarityRecord};

/// Square similarity matrix over sorted keys, diagonal 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    keys: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds the matrix from unordered pair records. Every pair over the
    /// keys that occur must be present exactly once.
    pub fn from_records(records: &[SimilarityRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::MissingInput("similarity table has no rows".into()));
        }
        let mut keys: Vec<String> = records
            .iter()
            .flat_map(|r| [r.key_a.clone(), r.key_b.clone()])
            .collect();
        keys.sort();
        keys.dedup();
        let index: HashMap<&str, usize> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();

        let n = keys.len();
        let mut values = vec![f64::NAN; n * n];
        for r in records {
            let (a, b) = (index[r.key_a.as_str()], index[r.key_b.as_str()]);
            if !values[a * n + b].is_nan() {
                return Err(Error::DuplicateKey(format!("{},{}", r.key_a, r.key_b)));
            }
            values[a * n + b] = r.score;
            values[b * n + a] = r.score;
        }
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        if let Some(pos) = values.iter().position(|v| v.is_nan()) {
            let (a, b) = (pos / n, pos % n);
            let (a, b) = (a.min(b), a.max(b));
            return Err(Error::MissingPair(keys[a].clone(), keys[b].clone()));
        }
        Ok(SimilarityMatrix { keys, values })
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.keys.len() + j]
    }

    /// Pixel `(i, j)` is `round(255 · s(i, j))`.
    pub fn to_frame(&self) -> Frame {
        let n = self.keys.len();
        let pixels = self.values.iter().map(|s| (255.0 * s).round()).collect();
        Frame::new(n, n, pixels).expect("n*n pixels")
    }
}

/// Reads `similarity_csv` and writes `<out>.pgm` plus `<out>.keys.txt`
/// (one key per line, row order). Returns both paths.
pub fn render_heatmap(similarity_csv: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let records = read_similarity_csv(similarity_csv)?;
    let matrix = SimilarityMatrix::from_records(&records)?;
    let with_ext = |ext: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let (pgm, keys) = (with_ext(".pgm"), with_ext(".keys.txt"));
    if let Some(parent) = pgm.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    atomic_write(&pgm, &matrix.to_frame().encode_pgm())?;
    let mut listing = matrix.keys().join("\n");
    listing.push('\n');
    atomic_write(&keys, listing.as_bytes())?;
    Ok((pgm, keys))
}
