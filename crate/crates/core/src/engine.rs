//! Staged, checkpointed execution of the similarity pipeline.
//!
//! Three stages run strictly in order, each as a set of independent tasks on
//! a fixed-size worker pool:
//!
//! 1. **extract**: one task per video (frames → HoF/HoG series → PoT
//!    feature). A finalization step sorts the records by key and writes
//!    range-partitioned `features-NNNNN.potf` shards. Work is O(N).
//! 2. **mean**: one task per shard pair `(i, j)`, `i ≤ j`, emitting per-slot
//!    chi-square sums and a pair count. Partials are reduced in ascending task
//!    id order into `mean_csd.csv`.
//! 3. **similarity**: the same shard-pair tasks recompute the distances,
//!    normalize by the means and emit sorted partial CSVs, merge-sorted into
//!    `similarity.csv`. Work is O(N²) pairs spread over S(S+1)/2 tasks.
//!
//! Every task writes its output to a temporary file, renames it into place
//! and then drops a `.done` marker. A task counts as complete when its marker
//! exists and its output parses, so an interrupted stage resumes by running
//! only the missing tasks. Reductions run single-threaded after the stage
//! barrier in a fixed order, which makes every output byte-identical for any
//! worker count.
//!
//! State layout under the state root:
//!
//! ```text
//! run.conf                      canonical configuration of this state root
//! <fingerprint>/extract/task-<id>.out, task-<id>.done, stage.done
//! <fingerprint>/mean/...
//! <fingerprint>/sim/...
//! ```

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::archive::{
    cartesian_pair_count, cartesian_pairs, decode_archive, discover_shards, encode_archive,
    parse_shard_file_name, shard_file_name, shard_sizes, slot_dims, ArchiveRecord, ArchiveShard,
    LoadedShard,
};
use crate::descriptors::{compute_series, dump_series_text, SeriesKind, DEFAULT_HOG_THRESHOLD};
use crate::error::{Error, Result};
use crate::flow::FarnebackParams;
use crate::frame::{load_frame_sequence, Manifest, ManifestEntry, DEFAULT_WORKING_SIZE};
use crate::pooling::{pot_vector, DEFAULT_LEVELS};
use crate::similarity::{
    csd_sixtuple, kernel_distance, mean_csd, similarity_score, MeanCsd, SimilarityRecord,
    SlotValues, SIMILARITY_CSV_HEADER,
};

pub const MEAN_CSV: &str = "mean_csd.csv";
pub const SIMILARITY_CSV: &str = "similarity.csv";
const RUN_CONF: &str = "run.conf";
const STAGE_DONE: &str = "stage.done";

/// Videos per shard used to derive the default shard count.
pub const VIDEOS_PER_SHARD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Extract,
    Mean,
    Similarity,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Mean => "mean",
            Stage::Similarity => "similarity",
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Mean => "mean",
            Stage::Similarity => "sim",
        }
    }
}

/// Everything that affects pipeline output.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub working_width: usize,
    pub working_height: usize,
    pub farneback: FarnebackParams,
    pub hog_threshold: f64,
    pub levels: Vec<usize>,
    /// Shard count; `None` derives `max(1, ceil(N / 64))` from the corpus.
    pub shards: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            working_width: DEFAULT_WORKING_SIZE,
            working_height: DEFAULT_WORKING_SIZE,
            farneback: FarnebackParams::default(),
            hog_threshold: DEFAULT_HOG_THRESHOLD,
            levels: DEFAULT_LEVELS.to_vec(),
            shards: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.working_width == 0 || self.working_height == 0 {
            return Err(Error::InvalidParameter(
                "working resolution must be positive".into(),
            ));
        }
        self.farneback.validate()?;
        if !(self.hog_threshold >= 0.0 && self.hog_threshold.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "hog threshold must be finite and nonnegative, got {}",
                self.hog_threshold
            )));
        }
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "pyramid levels must be non-empty and positive, got {:?}",
                self.levels
            )));
        }
        if self.shards == Some(0) {
            return Err(Error::InvalidParameter(
                "shard count must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn shard_count(&self, videos: usize) -> usize {
        self.shards
            .unwrap_or_else(|| videos.div_ceil(VIDEOS_PER_SHARD).max(1))
    }

    pub fn interval_count(&self) -> usize {
        self.levels.iter().sum()
    }

    /// Canonical `name=value` lines hashed into the run fingerprint.
    pub fn canonical(&self, manifest: &Manifest) -> String {
        let fb = &self.farneback;
        let mut manifest_hash = Sha256::new();
        for e in manifest.entries() {
            manifest_hash.update(e.key.as_bytes());
            manifest_hash.update(b"\0");
            manifest_hash.update(e.dir.to_string_lossy().as_bytes());
            manifest_hash.update(b"\n");
        }
        let levels: Vec<String> = self.levels.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k}={v}").expect("writing to a String");
        line("format", "1".into());
        line(
            "resize",
            format!("{}x{}", self.working_width, self.working_height),
        );
        line("pyr_scale", fb.pyr_scale.to_string());
        line("flow_levels", fb.levels.to_string());
        line("winsize", fb.winsize.to_string());
        line("iterations", fb.iterations.to_string());
        line("poly_n", fb.poly_n.to_string());
        line("poly_sigma", fb.poly_sigma.to_string());
        line("hog_threshold", self.hog_threshold.to_string());
        line("levels", levels.join(","));
        line("shards", self.shard_count(manifest.len()).to_string());
        line("manifest", hex::encode(manifest_hash.finalize()));
        out
    }
}

/// A state root bound to one configuration.
#[derive(Debug, Clone)]
pub struct RunState {
    root: PathBuf,
    fingerprint: String,
}

impl RunState {
    /// Opens or initializes `root` for the given canonical configuration.
    /// Refuses a root that already holds a different configuration.
    pub fn open(root: &Path, canonical: &str) -> Result<Self> {
        let fingerprint = hex::encode(&Sha256::digest(canonical.as_bytes())[..8]);
        let conf = root.join(RUN_CONF);
        match fs::read_to_string(&conf) {
            Ok(existing) if existing == canonical => {}
            Ok(existing) => {
                return Err(Error::FingerprintMismatch {
                    state_dir: root.to_path_buf(),
                    changed: changed_keys(&existing, canonical),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
                atomic_write(&conf, canonical.as_bytes())?;
            }
            Err(e) => return Err(Error::io(&conf, e)),
        }
        let state = RunState {
            root: root.to_path_buf(),
            fingerprint,
        };
        for stage in [Stage::Extract, Stage::Mean, Stage::Similarity] {
            let dir = state.stage_dir(stage);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(state)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(&self.fingerprint).join(stage.dir_name())
    }
}

fn changed_keys(old: &str, new: &str) -> String {
    let parse = |s: &str| -> Vec<(String, String)> {
        s.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let (old, new) = (parse(old), parse(new));
    let mut changed = Vec::new();
    for (k, v) in &new {
        match old.iter().find(|(ok, _)| ok == k) {
            Some((_, ov)) if ov == v => {}
            Some((_, ov)) => changed.push(format!("{k}: {ov} -> {v}")),
            None => changed.push(format!("{k}: unset -> {v}")),
        }
    }
    if changed.is_empty() {
        "configuration format changed".into()
    } else {
        changed.join(", ")
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskPayload {
    Extract(ManifestEntry),
    /// Shard indices `(i, j)` with `i ≤ j`.
    ShardPair(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: usize,
    pub payload: TaskPayload,
    pub output_path: PathBuf,
    pub done_marker: PathBuf,
}

impl Task {
    fn new(id: usize, payload: TaskPayload, dir: &Path) -> Self {
        Task {
            id,
            payload,
            output_path: dir.join(format!("task-{id}.out")),
            done_marker: dir.join(format!("task-{id}.done")),
        }
    }

    /// Short label for logs and error reports.
    pub fn label(&self) -> String {
        match &self.payload {
            TaskPayload::Extract(e) => format!("video={}", e.key),
            TaskPayload::ShardPair(i, j) => format!("shards=({i},{j})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: Stage,
    pub tasks: Vec<Task>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// One extract task per video, in key order.
pub fn plan_extract(
    manifest: &Manifest,
    state: &RunState,
    out_dir: &Path,
    shard_count: usize,
) -> Result<StagePlan> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let dir = state.stage_dir(Stage::Extract);
    let tasks = manifest
        .entries()
        .iter()
        .enumerate()
        .map(|(id, e)| Task::new(id, TaskPayload::Extract(e.clone()), &dir))
        .collect();
    let outputs = (0..shard_sizes(manifest.len(), shard_count).len())
        .map(|i| out_dir.join(shard_file_name(i)))
        .collect();
    Ok(StagePlan {
        stage: Stage::Extract,
        tasks,
        inputs: manifest.entries().iter().map(|e| e.dir.clone()).collect(),
        outputs,
    })
}

/// One task per shard pair `(i, j)`, `i ≤ j`: S(S+1)/2 tasks for S shards.
pub fn plan_pair_stage(
    stage: Stage,
    shards: &[ArchiveShard],
    state: &RunState,
    out_dir: &Path,
) -> Result<StagePlan> {
    assert!(stage != Stage::Extract, "extract is not a pair stage");
    if shards.is_empty() {
        return Err(Error::MissingInput("no feature shards".into()));
    }
    for (i, s) in shards.iter().enumerate() {
        if s.shard_index != i || !s.path.is_file() {
            return Err(Error::MissingInput(format!(
                "shard {} missing",
                shard_file_name(i)
            )));
        }
    }
    let dir = state.stage_dir(stage);
    let mut tasks = Vec::new();
    for i in 0..shards.len() {
        for j in i..shards.len() {
            tasks.push(Task::new(tasks.len(), TaskPayload::ShardPair(i, j), &dir));
        }
    }
    let mut inputs: Vec<PathBuf> = shards.iter().map(|s| s.path.clone()).collect();
    let output = match stage {
        Stage::Mean => out_dir.join(MEAN_CSV),
        _ => {
            inputs.push(out_dir.join(MEAN_CSV));
            out_dir.join(SIMILARITY_CSV)
        }
    };
    Ok(StagePlan {
        stage,
        tasks,
        inputs,
        outputs: vec![output],
    })
}

/// Outcome of one [`execute`] call.
#[derive(Debug, Clone, Default)]
pub struct ExecReport {
    pub executed: usize,
    pub skipped: usize,
    /// Sum of per-task run times (excludes skipped tasks).
    pub task_time: Duration,
    pub wall_time: Duration,
}

fn task_complete(task: &Task, validate: &(dyn Fn(&Task, &[u8]) -> bool + Sync)) -> bool {
    task.done_marker.is_file()
        && fs::read(&task.output_path)
            .map(|bytes| validate(task, &bytes))
            .unwrap_or(false)
}

/// Runs every incomplete task of `plan` on `workers` threads.
///
/// `run` produces a task's output bytes; `validate` decides whether an
/// existing output is usable. All pending tasks run to completion even when
/// some fail; failures are then reported together and logged to
/// `errors.log` in the stage directory.
pub fn execute<R, V>(plan: &StagePlan, workers: usize, run: R, validate: V) -> Result<ExecReport>
where
    R: Fn(&Task) -> Result<Vec<u8>> + Sync,
    V: Fn(&Task, &[u8]) -> bool + Sync,
{
    if workers == 0 {
        return Err(Error::InvalidParameter("workers must be at least 1".into()));
    }
    let started = Instant::now();
    let stage = plan.stage.name();
    let pending: Vec<&Task> = plan
        .tasks
        .iter()
        .filter(|t| !task_complete(t, &validate))
        .collect();
    let skipped = plan.tasks.len() - pending.len();
    if skipped > 0 {
        log::info!(
            "stage={stage} resumed skipped={skipped} pending={}",
            pending.len()
        );
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    let results: Vec<(usize, Duration, Result<()>)> = pool.install(|| {
        pending
            .par_iter()
            .map(|task| {
                let t0 = Instant::now();
                let outcome = run(task).and_then(|bytes| {
                    // A stale marker must not vouch for the new output.
                    let _ = fs::remove_file(&task.done_marker);
                    atomic_write(&task.output_path, &bytes)?;
                    atomic_write(&task.done_marker, b"")
                });
                let elapsed = t0.elapsed();
                let status = if outcome.is_ok() { "ok" } else { "failed" };
                log::info!(
                    "stage={stage} task={} {} duration_ms={} outcome={status}",
                    task.id,
                    task.label(),
                    elapsed.as_millis()
                );
                (task.id, elapsed, outcome)
            })
            .collect()
    });

    let mut report = ExecReport {
        executed: results.len(),
        skipped,
        ..Default::default()
    };
    let mut failures = Vec::new();
    for (id, elapsed, outcome) in results {
        report.task_time += elapsed;
        if let Err(e) = outcome {
            failures.push(format!("task {id} ({}): {e}", plan.tasks[id].label()));
        }
    }
    report.wall_time = started.elapsed();
    if !failures.is_empty() {
        if let Some(dir) = plan.tasks.first().and_then(|t| t.output_path.parent()) {
            let _ = fs::write(dir.join("errors.log"), failures.join("\n") + "\n");
        }
        return Err(Error::TaskFailures { stage, failures });
    }
    Ok(report)
}

/// Per-slot distance sums and the number of pairs they cover.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanPartial {
    pub sums: SlotValues,
    pub pair_count: u64,
}

impl MeanPartial {
    fn encode(&self) -> Vec<u8> {
        let mut s = self.pair_count.to_string();
        for v in &self.sums {
            write!(s, " {v}").expect("writing to a String");
        }
        s.push('\n');
        s.into_bytes()
    }

    fn decode(bytes: &[u8]) -> Option<MeanPartial> {
        let text = std::str::from_utf8(bytes).ok()?.strip_suffix('\n')?;
        let mut it = text.split(' ');
        let pair_count = it.next()?.parse().ok()?;
        let mut sums = [0.0; 6];
        for s in &mut sums {
            *s = it.next()?.parse().ok()?;
        }
        it.next()
            .is_none()
            .then_some(MeanPartial { sums, pair_count })
    }
}

/// Sums partials slotwise in the given order and divides by the pair count.
pub fn reduce_mean(partials: &[MeanPartial]) -> Result<MeanCsd> {
    let mut total = MeanPartial::default();
    for p in partials {
        for (t, s) in total.sums.iter_mut().zip(&p.sums) {
            *t += s;
        }
        total.pair_count += p.pair_count;
    }
    mean_csd(&total.sums, total.pair_count)
}

/// Counters reported for a finished stage.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub exec: ExecReport,
    /// Whole stage was already complete and skipped.
    pub up_to_date: bool,
    /// Video pairs covered by a pair stage.
    pub pairs: u64,
}

impl StageReport {
    /// Mean task time per covered pair.
    pub fn per_pair_time(&self) -> Option<Duration> {
        (self.pairs > 0).then(|| self.exec.task_time.div_f64(self.pairs as f64))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub extract: StageReport,
    pub mean: StageReport,
    pub similarity: StageReport,
}

impl RunReport {
    pub fn tasks_executed(&self) -> usize {
        self.extract.exec.executed + self.mean.exec.executed + self.similarity.exec.executed
    }
}

/// A corpus, its configuration, an output directory and a state root.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    manifest: Manifest,
    out_dir: PathBuf,
    state: RunState,
    workers: usize,
    dump_series: bool,
}

impl Pipeline {
    /// Validates the configuration and binds the state root. Nothing is
    /// written until validation has passed.
    pub fn open(
        config: PipelineConfig,
        manifest: Manifest,
        out_dir: &Path,
        state_root: &Path,
        workers: usize,
    ) -> Result<Self> {
        config.validate()?;
        if workers == 0 {
            return Err(Error::InvalidParameter("workers must be at least 1".into()));
        }
        if manifest.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let canonical = config.canonical(&manifest);
        let state = RunState::open(state_root, &canonical)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Pipeline {
            config,
            manifest,
            out_dir: out_dir.to_path_buf(),
            state,
            workers,
            dump_series: false,
        })
    }

    /// Also write `<key>.of.txt` / `<key>.hog.txt` series dumps into the
    /// output directory during extraction.
    pub fn with_series_dump(mut self, on: bool) -> Self {
        self.dump_series = on;
        self
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn shard_count(&self) -> usize {
        self.config.shard_count(self.manifest.len())
    }

    fn extract_record(&self, entry: &ManifestEntry) -> Result<Vec<u8>> {
        let c = &self.config;
        let seq = load_frame_sequence(&entry.dir, &entry.key, c.working_width, c.working_height)?;
        let (hof, hog) = compute_series(&seq, &c.farneback, c.hog_threshold)?;
        if self.dump_series {
            dump_series_text(&hof, &entry.key, &self.out_dir)?;
            dump_series_text(&hog, &entry.key, &self.out_dir)?;
        }
        let feature = pot_vector(&hof, &hog, &c.levels)?;
        let frame_count = u32::try_from(seq.frame_count()).map_err(|_| {
            Error::InvalidParameter(format!("video {} has too many frames", entry.key))
        })?;
        encode_archive(&[ArchiveRecord {
            key: entry.key.clone(),
            frame_count,
            feature,
        }])
    }

    fn extract_output_ok(&self, task: &Task, bytes: &[u8]) -> bool {
        let TaskPayload::Extract(entry) = &task.payload else {
            return false;
        };
        if self.dump_series {
            let dumped = [SeriesKind::Hof, SeriesKind::Hog].iter().all(|k| {
                self.out_dir
                    .join(format!("{}.{}", entry.key, k.dump_suffix()))
                    .is_file()
            });
            if !dumped {
                return false;
            }
        }
        let dims = slot_dims(self.config.interval_count());
        matches!(
            decode_archive(bytes, &task.output_path).as_deref(),
            Ok([rec]) if rec.key == entry.key && rec.feature.slots().each_ref().map(Vec::len) == dims
        )
    }

    /// Stage marker content: the list of outputs, so a missing output
    /// invalidates the marker.
    fn stage_complete(&self, stage: Stage, outputs: &[PathBuf]) -> bool {
        let marker = self.state.stage_dir(stage).join(STAGE_DONE);
        !self.dump_series_pending(stage) && marker.is_file() && outputs.iter().all(|p| p.is_file())
    }

    fn dump_series_pending(&self, stage: Stage) -> bool {
        stage == Stage::Extract
            && self.dump_series
            && self.manifest.entries().iter().any(|e| {
                !self
                    .out_dir
                    .join(format!("{}.{}", e.key, SeriesKind::Hof.dump_suffix()))
                    .is_file()
            })
    }

    fn mark_stage(&self, stage: Stage) -> Result<()> {
        atomic_write(&self.state.stage_dir(stage).join(STAGE_DONE), b"")
    }

    fn clear_stage_marker(&self, stage: Stage) {
        let _ = fs::remove_file(self.state.stage_dir(stage).join(STAGE_DONE));
    }

    pub fn extract(&self) -> Result<StageReport> {
        let plan = plan_extract(
            &self.manifest,
            &self.state,
            &self.out_dir,
            self.shard_count(),
        )?;
        if self.stage_complete(Stage::Extract, &plan.outputs) {
            return Ok(up_to_date(plan.tasks.len(), 0));
        }
        self.clear_stage_marker(Stage::Extract);
        let exec = execute(
            &plan,
            self.workers,
            |task| match &task.payload {
                TaskPayload::Extract(entry) => self.extract_record(entry),
                TaskPayload::ShardPair(..) => unreachable!("extract plan holds extract tasks"),
            },
            |task, bytes| self.extract_output_ok(task, bytes),
        )?;

        let mut records = Vec::with_capacity(plan.tasks.len());
        for task in &plan.tasks {
            let bytes = fs::read(&task.output_path).map_err(|e| Error::io(&task.output_path, e))?;
            records.extend(decode_archive(&bytes, &task.output_path)?);
        }
        records.sort_by(|a, b| a.key.cmp(&b.key));
        self.write_shards(&records)?;
        self.mark_stage(Stage::Extract)?;
        Ok(StageReport {
            exec,
            up_to_date: false,
            pairs: 0,
        })
    }

    fn write_shards(&self, records: &[ArchiveRecord]) -> Result<()> {
        let sizes = shard_sizes(records.len(), self.shard_count());
        let mut start = 0;
        for (index, size) in sizes.iter().enumerate() {
            let bytes = encode_archive(&records[start..start + size])?;
            atomic_write(&self.out_dir.join(shard_file_name(index)), &bytes)?;
            start += size;
        }
        // Shards beyond the current set belong to an older layout.
        let entries = fs::read_dir(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        for entry in entries.flatten() {
            let stale = entry
                .file_name()
                .to_str()
                .and_then(parse_shard_file_name)
                .is_some_and(|i| i >= sizes.len());
            if stale {
                fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
            }
        }
        Ok(())
    }

    fn pair_inputs(&self) -> Result<(Vec<ArchiveShard>, u64)> {
        let shards = discover_shards(&self.out_dir)?;
        let videos: usize = shards.iter().map(|s| s.record_count).sum();
        if videos < 2 {
            return Err(Error::TooFewVideos);
        }
        Ok((shards, crate::similarity::pair_count(videos as u64)))
    }

    fn load_pair(
        &self,
        shards: &[ArchiveShard],
        i: usize,
        j: usize,
    ) -> Result<(LoadedShard, Option<LoadedShard>)> {
        let a = shards[i].load()?;
        let b = if i == j {
            None
        } else {
            Some(shards[j].load()?)
        };
        Ok((a, b))
    }

    pub fn mean(&self) -> Result<StageReport> {
        let (shards, pairs) = self.pair_inputs()?;
        let plan = plan_pair_stage(Stage::Mean, &shards, &self.state, &self.out_dir)?;
        if self.stage_complete(Stage::Mean, &plan.outputs) {
            return Ok(up_to_date(plan.tasks.len(), pairs));
        }
        self.clear_stage_marker(Stage::Mean);
        let exec = execute(
            &plan,
            self.workers,
            |task| {
                let TaskPayload::ShardPair(i, j) = task.payload else {
                    unreachable!("pair plan holds shard-pair tasks")
                };
                let (a, b) = self.load_pair(&shards, i, j)?;
                let b = b.as_ref().unwrap_or(&a);
                let mut partial = MeanPartial::default();
                for (ra, rb) in cartesian_pairs(&a, b) {
                    let csd = csd_sixtuple(&ra.feature, &rb.feature)?;
                    for (s, c) in partial.sums.iter_mut().zip(&csd.0) {
                        *s += c;
                    }
                    partial.pair_count += 1;
                }
                debug_assert_eq!(
                    partial.pair_count,
                    cartesian_pair_count(a.records.len(), b.records.len(), i == j)
                );
                Ok(partial.encode())
            },
            |_, bytes| MeanPartial::decode(bytes).is_some(),
        )?;

        let partials = plan
            .tasks
            .iter()
            .map(|t| {
                let bytes = fs::read(&t.output_path).map_err(|e| Error::io(&t.output_path, e))?;
                MeanPartial::decode(&bytes).ok_or_else(|| Error::BadRecord {
                    path: t.output_path.clone(),
                    index: 0,
                    msg: "unparseable mean partial".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = reduce_mean(&partials)?;
        atomic_write(&plan.outputs[0], mean.to_csv().as_bytes())?;
        self.mark_stage(Stage::Mean)?;
        Ok(StageReport {
            exec,
            up_to_date: false,
            pairs,
        })
    }

    pub fn similarity(&self) -> Result<StageReport> {
        let (shards, pairs) = self.pair_inputs()?;
        let mean_path = self.out_dir.join(MEAN_CSV);
        if !mean_path.is_file() {
            return Err(Error::MissingInput(format!(
                "{} not found; run the mean stage first",
                mean_path.display()
            )));
        }
        let mean = MeanCsd::read_csv(&mean_path)?;
        let plan = plan_pair_stage(Stage::Similarity, &shards, &self.state, &self.out_dir)?;
        if self.stage_complete(Stage::Similarity, &plan.outputs) {
            return Ok(up_to_date(plan.tasks.len(), pairs));
        }
        self.clear_stage_marker(Stage::Similarity);
        let exec = execute(
            &plan,
            self.workers,
            |task| {
                let TaskPayload::ShardPair(i, j) = task.payload else {
                    unreachable!("pair plan holds shard-pair tasks")
                };
                let (a, b) = self.load_pair(&shards, i, j)?;
                let b = b.as_ref().unwrap_or(&a);
                let mut out = String::new();
                for (ra, rb) in cartesian_pairs(&a, b) {
                    let csd = csd_sixtuple(&ra.feature, &rb.feature)?;
                    let rec = SimilarityRecord {
                        key_a: ra.key.clone(),
                        key_b: rb.key.clone(),
                        score: similarity_score(kernel_distance(&csd, &mean))?,
                    };
                    out.push_str(&rec.csv_row());
                    out.push('\n');
                }
                Ok(out.into_bytes())
            },
            |_, bytes| {
                std::str::from_utf8(bytes)
                    .map(|t| {
                        t.lines()
                            .all(|l| SimilarityRecord::parse_csv_row(l).is_some())
                    })
                    .unwrap_or(false)
            },
        )?;

        let partials: Vec<&Path> = plan.tasks.iter().map(|t| t.output_path.as_path()).collect();
        let mut merged = format!("{SIMILARITY_CSV_HEADER}\n").into_bytes();
        let rows = merge_sorted_rows(&partials, &mut merged)?;
        if rows != pairs {
            return Err(Error::BadRecord {
                path: plan.outputs[0].clone(),
                index: rows as usize,
                msg: format!("merged {rows} rows, expected {pairs}"),
            });
        }
        atomic_write(&plan.outputs[0], &merged)?;
        self.mark_stage(Stage::Similarity)?;
        Ok(StageReport {
            exec,
            up_to_date: false,
            pairs,
        })
    }

    /// Runs extract, mean and similarity, resuming from any checkpoint.
    pub fn run(&self) -> Result<RunReport> {
        Ok(RunReport {
            extract: self.extract()?,
            mean: self.mean()?,
            similarity: self.similarity()?,
        })
    }
}

fn up_to_date(tasks: usize, pairs: u64) -> StageReport {
    StageReport {
        exec: ExecReport {
            skipped: tasks,
            ..Default::default()
        },
        up_to_date: true,
        pairs,
    }
}

/// K-way merge of sorted `key_a,key_b,score` partial files by key pair.
fn merge_sorted_rows(partials: &[&Path], out: &mut Vec<u8>) -> Result<u64> {
    let mut readers = Vec::with_capacity(partials.len());
    for p in partials {
        let f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
        readers.push(BufReader::new(f).lines());
    }
    let mut heap = BinaryHeap::new();
    let next_row = |idx: usize,
                    readers: &mut Vec<std::io::Lines<BufReader<fs::File>>>|
     -> Result<Option<(String, String, String)>> {
        match readers[idx].next() {
            None => Ok(None),
            Some(line) => {
                let line = line.map_err(|e| Error::io(partials[idx], e))?;
                let (a, rest) = line.split_once(',').ok_or_else(|| Error::Csv {
                    path: partials[idx].to_path_buf(),
                    line: 0,
                    msg: "malformed partial row".into(),
                })?;
                let (b, _) = rest.split_once(',').unwrap_or((rest, ""));
                Ok(Some((a.to_string(), b.to_string(), line)))
            }
        }
    };
    for idx in 0..readers.len() {
        if let Some((a, b, line)) = next_row(idx, &mut readers)? {
            heap.push(Reverse((a, b, idx, line)));
        }
    }
    let mut rows = 0;
    let mut w = BufWriter::new(out);
    while let Some(Reverse((_, _, idx, line))) = heap.pop() {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .expect("writing to memory");
        rows += 1;
        if let Some((a, b, line)) = next_row(idx, &mut readers)? {
            heap.push(Reverse((a, b, idx, line)));
        }
    }
    w.flush().expect("writing to memory");
    Ok(rows)
}
