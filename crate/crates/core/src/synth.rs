//! Deterministic synthetic videos for tests, benchmarks and demos.
//!
//! Scenes are described in unit coordinates (`0..=1` on both axes, aligned
//! with pixel centres at the corners), so the same scene can be rendered at
//! any resolution and the renderings agree under corner-aligned resizing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{Frame, Manifest, ManifestEntry};

/// A Gaussian spot with constant velocity, reflected at the frame edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    /// Unit coordinates per frame.
    pub vx: f64,
    pub vy: f64,
    pub sigma: f64,
    pub peak: f64,
}

impl Blob {
    fn position(&self, t: usize) -> (f64, f64) {
        (
            reflect(self.x + self.vx * t as f64),
            reflect(self.y + self.vy * t as f64),
        )
    }
}

/// Folds `v` into `[0, 1]` as if bouncing between the edges.
fn reflect(v: f64) -> f64 {
    let m = v.rem_euclid(2.0);
    if m > 1.0 {
        2.0 - m
    } else {
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: f64,
    pub blobs: Vec<Blob>,
}

impl Scene {
    /// Two to four blobs with seeded positions, sizes and velocities.
    pub fn random(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(2..=4);
        let blobs = (0..count)
            .map(|_| {
                let speed = rng.gen_range(0.008..0.03);
                let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                Blob {
                    x: rng.gen_range(0.15..0.85),
                    y: rng.gen_range(0.15..0.85),
                    vx: speed * heading.cos(),
                    vy: speed * heading.sin(),
                    sigma: rng.gen_range(0.04..0.10),
                    peak: rng.gen_range(120.0..220.0),
                }
            })
            .collect();
        Scene {
            background: rng.gen_range(10.0..40.0),
            blobs,
        }
    }

    pub fn render(&self, t: usize, width: usize, height: usize) -> Frame {
        let sx = (width.max(2) - 1) as f64;
        let sy = (height.max(2) - 1) as f64;
        let centres: Vec<(f64, f64)> = self.blobs.iter().map(|b| b.position(t)).collect();
        let mut pixels = Vec::with_capacity(width * height);
        for py in 0..height {
            let uy = py as f64 / sy;
            for px in 0..width {
                let ux = px as f64 / sx;
                let mut v = self.background;
                for (b, &(cx, cy)) in self.blobs.iter().zip(&centres) {
                    let d2 = (ux - cx).powi(2) + (uy - cy).powi(2);
                    v += b.peak * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                pixels.push(v);
            }
        }
        Frame::new(width, height, pixels).expect("pixel count matches")
    }

    /// Frames `0..frames` rendered at `width × height`.
    pub fn clip(&self, frames: usize, width: usize, height: usize) -> Vec<Frame> {
        (0..frames).map(|t| self.render(t, width, height)).collect()
    }
}

/// Independent uniform noise frames.
pub fn noise_clip(frames: usize, width: usize, height: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let pixels = (0..width * height)
                .map(|_| rng.gen_range(0.0..=255.0f64).round())
                .collect();
            Frame::new(width, height, pixels).expect("pixel count matches")
        })
        .collect()
}

/// Smooth band-limited texture, translated by `(dx, dy)` pixels.
///
/// Frame `t+1 = textured_frame(.., dx, dy, seed)` against
/// `t = textured_frame(.., 0, 0, seed)` is pure translation with flow
/// `(dx, dy)` everywhere.
pub fn textured_frame(width: usize, height: usize, dx: f64, dy: f64, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let wavelength = rng.gen_range(12.0..32.0);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let k = std::f64::consts::TAU / wavelength;
            (
                k * angle.cos(),
                k * angle.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(10.0..20.0),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (xs, ys) = (x as f64 - dx, y as f64 - dy);
            let v: f64 = waves
                .iter()
                .map(|(kx, ky, phase, amp)| amp * (kx * xs + ky * ys + phase).sin())
                .sum();
            pixels.push(128.0 + v);
        }
    }
    Frame::new(width, height, pixels).expect("pixel count matches")
}

/// Writes frames as `frame-00000.pgm`, `frame-00001.pgm`, ... into `dir`.
pub fn write_clip(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(format!("frame-{i:05}.pgm"));
        fs::write(&path, f.encode_pgm()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes `key,dir` lines for `clips` and returns the parsed manifest.
pub fn write_manifest(path: &Path, clips: &[(String, PathBuf)]) -> Result<Manifest> {
    let manifest = Manifest::from_entries(
        clips
            .iter()
            .map(|(key, dir)| ManifestEntry {
                key: key.clone(),
                dir: dir.clone(),
            })
            .collect(),
    )?;
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Renders `count` random scenes of `frames` frames into `root/<key>/` and
/// writes `root/manifest.csv`. Keys are `clip-000`, `clip-001`, ...
pub fn write_corpus(
    root: &Path,
    count: usize,
    frames: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Manifest> {
    let mut clips = Vec::with_capacity(count);
    for i in 0..count {
        let key = format!("clip-{i:03}");
        let dir = root.join(&key);
        let scene = Scene::random(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        write_clip(&dir, &scene.clip(frames, width, height))?;
        clips.push((key, dir));
    }
    write_manifest(&root.join("manifest.csv"), &clips)
}
