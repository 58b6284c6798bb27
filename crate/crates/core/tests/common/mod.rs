#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pot_core::archive::read_archive;
use pot_core::frame::Frame;
use pot_core::similarity::read_similarity_csv;
use pot_core::synth::{write_clip, write_manifest};
use pot_core::{Manifest, Pipeline, PipelineConfig, SimilarityRecord};

/// Writes each `(key, frames)` clip under `root/clips/<key>` plus a manifest.
pub fn corpus(root: &Path, clips: &[(&str, Vec<Frame>)]) -> Manifest {
    let mut entries = Vec::new();
    for (key, frames) in clips {
        let dir = root.join("clips").join(key);
        write_clip(&dir, frames).unwrap();
        entries.push((key.to_string(), dir));
    }
    write_manifest(&root.join("manifest.csv"), &entries).unwrap()
}

pub fn pipeline(
    manifest: &Manifest,
    out: &Path,
    workers: usize,
    config: PipelineConfig,
) -> Pipeline {
    Pipeline::open(config, manifest.clone(), out, &out.join("state"), workers).unwrap()
}

pub fn scores(out: &Path) -> Vec<SimilarityRecord> {
    read_similarity_csv(&out.join("similarity.csv")).unwrap()
}

pub fn score(records: &[SimilarityRecord], a: &str, b: &str) -> f64 {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    records
        .iter()
        .find(|r| r.key_a == a && r.key_b == b)
        .unwrap_or_else(|| panic!("no score for {a},{b}"))
        .score
}

/// Final output files of a run, by name, for byte comparison.
pub fn outputs(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out)
        .unwrap()
        .flatten()
        .filter(|e| e.path().is_file())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

pub fn shard_paths(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "potf"))
        .collect();
    v.sort();
    v
}

pub fn record_count(out: &Path) -> usize {
    shard_paths(out)
        .iter()
        .map(|p| read_archive(p).unwrap().len())
        .sum()
}
