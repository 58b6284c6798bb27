mod common;

use std::fs;

use pot_core::engine::Stage;
use pot_core::synth::Scene;
use pot_core::{Error, Manifest, MeanCsd, Pipeline, PipelineConfig};

use common::{corpus, outputs, pipeline, score, scores};

fn small_corpus(root: &std::path::Path, n: usize, frames: usize) -> Manifest {
    let clips: Vec<(String, _)> = (0..n)
        .map(|i| {
            (
                format!("c{i}"),
                Scene::random(50 + i as u64).clip(frames, 40, 40),
            )
        })
        .collect();
    let clips: Vec<(&str, _)> = clips.iter().map(|(k, f)| (k.as_str(), f.clone())).collect();
    corpus(root, &clips)
}

fn config() -> PipelineConfig {
    PipelineConfig {
        working_width: 40,
        working_height: 40,
        ..PipelineConfig::default()
    }
}

#[test]
fn rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 4, 8);
    let out = dir.path().join("out");
    let first = pipeline(&m, &out, 2, config()).run().unwrap();
    assert_eq!(first.extract.exec.executed, 4);
    assert_eq!(first.mean.exec.executed, 1);
    let before = outputs(&out);
    let second = pipeline(&m, &out, 2, config()).run().unwrap();
    assert_eq!(second.tasks_executed(), 0);
    assert!(second.extract.up_to_date && second.similarity.up_to_date);
    assert_eq!(outputs(&out), before);
    assert_eq!(scores(&out).len(), 6);
}

#[test]
fn unreadable_video_fails_extract_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 3, 6);
    fs::write(
        dir.path().join("clips/c1/frame-00002.pgm"),
        b"P5\n4 4\n255\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let p = pipeline(&m, &out, 3, config());
    match p.extract().unwrap_err() {
        Error::TaskFailures { stage, failures } => {
            assert_eq!(stage, "extract");
            assert_eq!(failures.len(), 1);
            assert!(failures[0].contains("video=c1"), "{}", failures[0]);
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(!out.join("features-00000.potf").exists());

    // Fixing the frame lets the resumed run redo only that video.
    fs::write(
        dir.path().join("clips/c1/frame-00002.pgm"),
        Scene::random(51).clip(6, 40, 40)[2].encode_pgm(),
    )
    .unwrap();
    let r = p.extract().unwrap();
    assert_eq!((r.exec.executed, r.exec.skipped), (1, 2));
}

#[test]
fn changed_configuration_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 2, 5);
    let out = dir.path().join("out");
    pipeline(&m, &out, 1, config()).extract().unwrap();
    let changed = PipelineConfig {
        hog_threshold: 30.0,
        ..config()
    };
    let err = Pipeline::open(changed, m, &out, &out.join("state"), 1).unwrap_err();
    assert!(err.is_usage());
    assert!(err.to_string().contains("hog_threshold: 40 -> 30"), "{err}");
}

#[test]
fn invalid_configuration_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 2, 5);
    let out = dir.path().join("out");
    let bad = PipelineConfig {
        levels: vec![1, 0],
        ..config()
    };
    assert!(Pipeline::open(bad, m, &out, &out.join("state"), 1)
        .unwrap_err()
        .is_usage());
    assert!(!out.exists());
}

#[test]
fn series_dump_has_one_line_per_frame_pair() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 2, 30);
    let out = dir.path().join("out");
    pipeline(&m, &out, 2, config())
        .with_series_dump(true)
        .extract()
        .unwrap();
    for suffix in ["of.txt", "hog.txt"] {
        let text = fs::read_to_string(out.join(format!("c0.{suffix}"))).unwrap();
        assert_eq!(text.lines().count(), 29);
        assert_eq!(text.lines().next().unwrap().split(' ').count(), 200);
    }
}

#[test]
fn identical_videos_have_zero_means_and_unit_scores() {
    let dir = tempfile::tempdir().unwrap();
    let frames = Scene::random(3).clip(8, 40, 40);
    let m = corpus(
        dir.path(),
        &[("a", frames.clone()), ("b", frames.clone()), ("c", frames)],
    );
    let out = dir.path().join("out");
    pipeline(&m, &out, 2, config()).run().unwrap();
    let mean = MeanCsd::read_csv(&out.join("mean_csd.csv")).unwrap();
    assert_eq!(mean.mean, [0.0; 6]);
    assert_eq!(mean.pair_count, 3);
    let rows = scores(&out);
    assert!(rows.iter().all(|r| r.score == 1.0));
    assert_eq!(score(&rows, "a", "c"), 1.0);
}

#[test]
fn similarity_stage_ignores_extract_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 5, 6);
    let out = dir.path().join("out");
    let cfg = PipelineConfig {
        shards: Some(2),
        ..config()
    };
    let p = pipeline(&m, &out, 2, cfg);
    p.run().unwrap();
    let expected = fs::read(out.join("similarity.csv")).unwrap();
    fs::remove_dir_all(p.state().stage_dir(Stage::Extract)).unwrap();
    fs::remove_dir_all(p.state().stage_dir(Stage::Similarity)).unwrap();
    fs::create_dir_all(p.state().stage_dir(Stage::Similarity)).unwrap();
    fs::remove_file(out.join("similarity.csv")).unwrap();
    let r = p.similarity().unwrap();
    assert_eq!(r.exec.executed, 3);
    assert_eq!(fs::read(out.join("similarity.csv")).unwrap(), expected);
}

#[test]
fn pair_stages_need_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 2, 5);
    let out = dir.path().join("out");
    let p = pipeline(&m, &out, 1, config());
    assert!(matches!(p.mean(), Err(Error::MissingInput(_))));
    p.extract().unwrap();
    assert!(matches!(p.similarity(), Err(Error::MissingInput(_))));

    let one = small_corpus(&dir.path().join("single"), 1, 5);
    let single_out = dir.path().join("single-out");
    let p = pipeline(&one, &single_out, 1, config());
    p.extract().unwrap();
    assert!(matches!(p.mean(), Err(Error::TooFewVideos)));
    assert!(matches!(p.similarity(), Err(Error::TooFewVideos)));
}
