//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p pot-core --test acceptance`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use pot_core::archive::{cartesian_pairs, read_archive, shard_sizes, write_archive, LoadedShard};
use pot_core::flow::farneback_flow;
use pot_core::similarity::{chi_square, csd_sixtuple, kernel_distance, mean_csd, similarity_score};
use pot_core::synth::{noise_clip, textured_frame, write_clip, Blob, Scene};
use pot_core::{
    ArchiveRecord, Error, FarnebackParams, Manifest, MeanCsd, PipelineConfig, PoTFeature,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{corpus, outputs, pipeline, score, scores};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn c1_chi_square_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.gen_range(1..=32);
        let mut gen = || -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        0.0
                    } else {
                        rng.gen_range(0.0..10.0)
                    }
                })
                .collect()
        };
        let (a, b) = (gen(), gen());
        // Direct summation in the expanded form (a+b) - 4ab/(a+b).
        let mut oracle = 0.0;
        for i in 0..dim {
            let s = a[i] + b[i];
            if s != 0.0 {
                oracle += s - 4.0 * a[i] * b[i] / s;
            }
        }
        oracle *= 0.5;
        let got = chi_square(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs());
    }
    check(
        worst <= 1e-12,
        format!("max abs error {worst:.3e} over 1000 pairs"),
    )
}

/// A feature whose every slot is `v · e₀` for K = 1.
fn spike_feature(v: f64) -> PoTFeature {
    let slot = |dim: usize| {
        let mut x = vec![0.0; dim];
        x[0] = v;
        x
    };
    PoTFeature::from_slots([
        slot(200),
        slot(400),
        slot(200),
        slot(200),
        slot(400),
        slot(200),
    ])
    .unwrap()
}

fn c2_mean_kernel_score_chain() -> Outcome {
    // Features A = 1·e₀, B = 3·e₀, C = 0 in every slot. By hand:
    //   csd(A,B) = ½·(1-3)²/4 = 0.5, csd(A,C) = ½·1/1 = 0.5, csd(B,C) = ½·9/3 = 1.5
    //   mean = 2.5/3 per slot
    //   KD(A,B) = 6·0.5/(2.5/3) = 3.6, KD(A,C) = 3.6, KD(B,C) = 6·1.5/(2.5/3) = 10.8
    let feats = [spike_feature(1.0), spike_feature(3.0), spike_feature(0.0)];
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let csds: Vec<_> = pairs
        .iter()
        .map(|&(i, j)| csd_sixtuple(&feats[i], &feats[j]).unwrap())
        .collect();
    let mut sums = [0.0; 6];
    for c in &csds {
        for (s, v) in sums.iter_mut().zip(&c.0) {
            *s += v;
        }
    }
    let mean = mean_csd(&sums, 3).map_err(|e| e.to_string())?;
    let expected_kd = [3.6, 3.6, 10.8];
    let mut err = mean
        .mean
        .iter()
        .map(|m| (m - 2.5 / 3.0).abs())
        .fold(0.0, f64::max);
    for (c, kd) in csds.iter().zip(expected_kd) {
        let got = kernel_distance(c, &mean);
        err = err.max((got - kd).abs());
        err = err.max((similarity_score(got).unwrap() - (-kd / 10.0).exp()).abs());
    }
    let e1 = (similarity_score(10.0).unwrap() - 0.36787944117144233).abs();
    let e2 = (similarity_score(0.0).unwrap() - 1.0).abs();
    let worst = err.max(e1).max(e2);
    check(
        worst <= 1e-12 && mean.pair_count == 3,
        format!(
            "max abs error {worst:.3e}; kd=10 -> {}",
            similarity_score(10.0).unwrap()
        ),
    )
}

fn c3_duplicate_detection() -> Outcome {
    let dir = scratch();
    let frames = Scene::random(31).clip(20, 96, 96);
    let m = corpus(
        dir.path(),
        &[
            ("original", frames.clone()),
            ("other-a", Scene::random(32).clip(20, 96, 96)),
            ("other-b", Scene::random(33).clip(20, 96, 96)),
        ],
    );
    // Byte-identical copy of the original's frame files.
    let copy = dir.path().join("clips/copy");
    fs::create_dir_all(&copy).unwrap();
    for e in fs::read_dir(dir.path().join("clips/original"))
        .unwrap()
        .flatten()
    {
        fs::copy(e.path(), copy.join(e.file_name())).unwrap();
    }
    let mut text = m.to_text();
    text.push_str(&format!("copy,{}\n", copy.display()));
    let m = Manifest::parse(&text, dir.path()).unwrap();
    let out = dir.path().join("out");
    pipeline(&m, &out, 4, PipelineConfig::default())
        .run()
        .map_err(|e| e.to_string())?;
    let s = score(&scores(&out), "copy", "original");
    check(
        (s - 1.0).abs() <= 1e-12,
        format!("score(original, copy) = {s}"),
    )
}

fn c4_resolution_invariance() -> Outcome {
    let dir = scratch();
    let scene = Scene {
        background: 20.0,
        blobs: vec![
            Blob {
                x: 0.3,
                y: 0.4,
                vx: 0.015,
                vy: 0.006,
                sigma: 0.08,
                peak: 190.0,
            },
            Blob {
                x: 0.7,
                y: 0.65,
                vx: -0.01,
                vy: -0.012,
                sigma: 0.06,
                peak: 150.0,
            },
        ],
    };
    let mut clips = vec![
        ("blob-64", scene.clip(30, 64, 64)),
        ("blob-128", scene.clip(30, 128, 128)),
    ];
    let others: Vec<(String, _)> = (0..4)
        .map(|i| {
            (
                format!("other-{i}"),
                Scene::random(400 + i).clip(30, 128, 128),
            )
        })
        .collect();
    clips.extend(others.iter().map(|(k, f)| (k.as_str(), f.clone())));
    let m = corpus(dir.path(), &clips);
    let out = dir.path().join("out");
    pipeline(&m, &out, 4, PipelineConfig::default())
        .run()
        .map_err(|e| e.to_string())?;
    let s = score(&scores(&out), "blob-64", "blob-128");
    check(s >= 0.95, format!("score(64x64, 128x128) = {s:.4}"))
}

fn c5_subset_clip_ordering() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let dir = scratch();
        let full = Scene::random(500 + seed).clip(60, 128, 128);
        let m = corpus(
            dir.path(),
            &[
                ("full", full.clone()),
                ("prefix", full[..30].to_vec()),
                ("noise", noise_clip(30, 128, 128, 900 + seed)),
            ],
        );
        let out = dir.path().join("out");
        pipeline(&m, &out, 4, PipelineConfig::default())
            .run()
            .map_err(|e| e.to_string())?;
        let rows = scores(&out);
        let (sp, sn) = (
            score(&rows, "full", "prefix"),
            score(&rows, "full", "noise"),
        );
        ok &= sp > sn;
        details.push(format!("{sp:.3}>{sn:.3}"));
    }
    check(
        ok,
        format!("prefix vs noise per seed: {}", details.join(", ")),
    )
}

fn c6_flow_accuracy() -> Outcome {
    let params = FarnebackParams::default();
    let (w, h) = (128, 128);
    // One pixel of border for the central-difference texture test.
    let margin = 1;
    let mut worst: f64 = 0.0;
    for d in 1..=4 {
        let d = d as f64;
        for (dx, dy) in [(d, 0.0), (0.0, -d), (0.6 * d, 0.8 * d)] {
            let prev = textured_frame(w, h, 0.0, 0.0, 7);
            let next = textured_frame(w, h, dx, dy, 7);
            let flow = farneback_flow(&prev, &next, &params).map_err(|e| e.to_string())?;
            let (mut err, mut n) = (0.0, 0usize);
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let gx = prev.get(x + 1, y) - prev.get(x - 1, y);
                    let gy = prev.get(x, y + 1) - prev.get(x, y - 1);
                    if gx.hypot(gy) < 2.0 {
                        continue;
                    }
                    let i = y * w + x;
                    err += (flow.u()[i] - dx).hypot(flow.v()[i] - dy);
                    n += 1;
                }
            }
            worst = worst.max(err / n as f64);
        }
    }
    let still = textured_frame(w, h, 0.0, 0.0, 11);
    let zero = farneback_flow(&still, &still, &params)
        .map_err(|e| e.to_string())?
        .max_abs();
    check(
        worst <= 0.5 && zero <= 1e-3,
        format!("worst mean endpoint error {worst:.3} px; zero-motion L-inf {zero:.1e}"),
    )
}

fn c7_pair_accounting() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for n in [1usize, 2, 3, 10] {
        let dir = scratch();
        let clips: Vec<(String, _)> = (0..n)
            .map(|i| {
                (
                    format!("v{i:02}"),
                    Scene::random(700 + i as u64).clip(8, 48, 48),
                )
            })
            .collect();
        let clips: Vec<(&str, _)> = clips.iter().map(|(k, f)| (k.as_str(), f.clone())).collect();
        let m = corpus(dir.path(), &clips);
        let out = dir.path().join("out");
        let config = PipelineConfig {
            shards: Some(if n == 10 { 3 } else { 1 }),
            ..PipelineConfig::default()
        };
        let result = pipeline(&m, &out, 4, config).run();
        let rows = match result {
            Ok(_) => scores(&out).len(),
            Err(Error::TooFewVideos) if n == 1 => 0,
            Err(e) => return Err(format!("N={n}: {e}")),
        };
        ok &= rows == n * (n - 1) / 2;
        if n == 3 {
            let mean = MeanCsd::read_csv(&out.join("mean_csd.csv")).unwrap();
            ok &= mean.pair_count == 3;
        }
        details.push(format!("N={n}:{rows}"));
    }

    // Shard-pair decomposition against brute force.
    let feature = spike_feature(1.0);
    for n in [1usize, 2, 7, 13] {
        let keys: Vec<String> = (0..n).map(|i| format!("k{i:03}")).collect();
        for s in 1..=5 {
            let sizes = shard_sizes(n, s);
            let mut shards = Vec::new();
            let mut start = 0;
            for (idx, size) in sizes.iter().enumerate() {
                let records = keys[start..start + size]
                    .iter()
                    .map(|k| ArchiveRecord {
                        key: k.clone(),
                        frame_count: 2,
                        feature: feature.clone(),
                    })
                    .collect();
                shards.push(LoadedShard {
                    shard_index: idx,
                    records,
                });
                start += size;
            }
            let mut seen = HashSet::new();
            let mut emitted = 0;
            for i in 0..shards.len() {
                for j in i..shards.len() {
                    for (a, b) in cartesian_pairs(&shards[i], &shards[j]) {
                        seen.insert((a.key.clone(), b.key.clone()));
                        emitted += 1;
                    }
                }
            }
            let brute: HashSet<_> = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .map(|(i, j)| (keys[i].clone(), keys[j].clone()))
                .collect();
            ok &= emitted == brute.len() && seen == brute;
        }
    }
    check(
        ok,
        format!(
            "rows {}; shard decomposition S=1..5 exact",
            details.join(" ")
        ),
    )
}

fn twelve_video_corpus(root: &Path) -> Manifest {
    let clips: Vec<(String, _)> = (0..12)
        .map(|i| {
            (
                format!("video-{i:02}"),
                Scene::random(800 + i).clip(12, 64, 64),
            )
        })
        .collect();
    let clips: Vec<(&str, _)> = clips.iter().map(|(k, f)| (k.as_str(), f.clone())).collect();
    corpus(root, &clips)
}

fn c8_determinism() -> Outcome {
    let dir = scratch();
    let m = twelve_video_corpus(dir.path());
    let config = PipelineConfig {
        shards: Some(3),
        ..PipelineConfig::default()
    };
    let run = |name: &str, workers: usize| {
        let out = dir.path().join(name);
        pipeline(&m, &out, workers, config.clone()).run().unwrap();
        outputs(&out)
    };
    let one = run("w1", 1);
    let eight = run("w8", 8);
    let mut ok = one == eight;

    // Interrupt after each stage, and mid-stage by dropping half the done
    // markers, then resume with a fresh pipeline.
    let mut resumed = 0;
    for cut in 0..3 {
        let out = dir.path().join(format!("resume-{cut}"));
        let p = pipeline(&m, &out, 2, config.clone());
        p.extract().unwrap();
        if cut >= 1 {
            p.mean().unwrap();
        }
        if cut >= 2 {
            p.similarity().unwrap();
        }
        let stage_dir = p.state().stage_dir(match cut {
            0 => pot_core::engine::Stage::Extract,
            1 => pot_core::engine::Stage::Mean,
            _ => pot_core::engine::Stage::Similarity,
        });
        drop(p);
        fs::remove_file(stage_dir.join("stage.done")).unwrap();
        for e in fs::read_dir(&stage_dir).unwrap().flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.ends_with(".done")
                && name
                    .trim_start_matches("task-")
                    .starts_with(['0', '2', '4', '6', '8'])
            {
                fs::remove_file(e.path()).unwrap();
            }
        }
        let report = pipeline(&m, &out, 8, config.clone()).run().unwrap();
        resumed += report.tasks_executed();
        ok &= outputs(&out) == one;
    }
    let again = pipeline(&m, &dir.path().join("w1"), 3, config.clone())
        .run()
        .unwrap();
    ok &= again.tasks_executed() == 0;
    check(
        ok,
        format!("workers 1 vs 8 identical; 3 resumes ({resumed} tasks rerun) identical; rerun executed {}", again.tasks_executed()),
    )
}

fn c9_scaling_invariance() -> Outcome {
    let dir = scratch();
    let m = twelve_video_corpus(dir.path());
    let base = dir.path().join("base");
    let config = PipelineConfig {
        shards: Some(2),
        ..PipelineConfig::default()
    };
    pipeline(&m, &base, 4, config.clone())
        .run()
        .map_err(|e| e.to_string())?;

    let scaled = dir.path().join("scaled");
    fs::create_dir_all(&scaled).unwrap();
    for (idx, path) in common::shard_paths(&base).iter().enumerate() {
        let records: Vec<ArchiveRecord> = read_archive(path)
            .unwrap()
            .into_iter()
            .map(|r| ArchiveRecord {
                feature: r.feature.scaled(7.3),
                ..r
            })
            .collect();
        write_archive(&records, &scaled.join(path.file_name().unwrap()), idx).unwrap();
    }
    let p = pipeline(&m, &scaled, 4, config);
    p.mean().map_err(|e| e.to_string())?;
    p.similarity().map_err(|e| e.to_string())?;
    let (a, b) = (scores(&base), scores(&scaled));
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            assert_eq!((&x.key_a, &x.key_b), (&y.key_a, &y.key_b));
            (x.score - y.score).abs()
        })
        .fold(0.0, f64::max);
    check(
        worst <= 1e-9 && a.len() == 66,
        format!("max score change {worst:.3e} over {} pairs", a.len()),
    )
}

fn c10_desk_runtime() -> Outcome {
    let dir = scratch();
    let mut entries = Vec::new();
    for i in 0..20 {
        let key = format!("desk-{i:02}");
        let clip_dir = dir.path().join("clips").join(&key);
        write_clip(&clip_dir, &Scene::random(1000 + i).clip(30, 128, 128)).unwrap();
        entries.push((key, clip_dir));
    }
    let m = pot_core::synth::write_manifest(&dir.path().join("manifest.csv"), &entries).unwrap();
    let out = dir.path().join("out");
    let t0 = Instant::now();
    let report = pipeline(&m, &out, 4, PipelineConfig::default())
        .run()
        .map_err(|e| e.to_string())?;
    let total = t0.elapsed();
    let per_pair = report.similarity.per_pair_time().unwrap_or_default();
    check(
        total.as_secs_f64() < 300.0 && per_pair.as_secs_f64() < 5e-3,
        format!(
            "total {:.1}s; similarity {:.3} ms/pair over {} pairs",
            total.as_secs_f64(),
            per_pair.as_secs_f64() * 1e3,
            report.similarity.pairs
        ),
    )
}

/// Written straight to stderr so the lines show up without `--nocapture`.
fn report(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1 chi-square oracle equivalence", c1_chi_square_oracle),
        ("2 mean / kernel / score chain", c2_mean_kernel_score_chain),
        ("3 duplicate detection", c3_duplicate_detection),
        ("4 resolution invariance", c4_resolution_invariance),
        ("5 subset-clip ordering", c5_subset_clip_ordering),
        ("6 flow accuracy", c6_flow_accuracy),
        ("7 pair accounting", c7_pair_accounting),
        ("8 determinism and resume", c8_determinism),
        ("9 scaling invariance", c9_scaling_invariance),
        ("10 desk-scale runtime", c10_desk_runtime),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        match run() {
            Ok(detail) => report(&format!("[PASS] {name}: {detail}")),
            Err(detail) => {
                report(&format!("[FAIL] {name}: {detail}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
