//! Offline workflows over the `touchhand` library: dataset synthesis,
//! training, tracking, evaluation, triangulation and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{debug, info};
use serde::{Deserialize, Serialize};
use touchhand::decode::{decode, load_jsonl, to_json_line, touching_fingertips, JointSet};
use touchhand::estimator::{load_checkpoint, save_checkpoint, write_loss_csv, Estimator, TrainConfig, TrainedModel};
use touchhand::evalkit::{build_protocol_splits, evaluate, EvalStream, MetricsReport, Protocol};
use touchhand::frames::{preprocess, read_capv, ScreenGeometry};
use touchhand::gradsuite::{gradient_suite, GradCheck};
use touchhand::handmodel::HandTemplate;
use touchhand::iksolver::{solutions_to_joints, IkConfig, IkSolution, TrackerSession};
use touchhand::mvs::{align_streams, by_frame, load_observations, reconstruct_frame, CameraRig, FilterConfig};
use touchhand::synth::{
    camera_time_ms, cap_timestamp_ms, generate_dataset, load_index, load_sequence, DatasetIndex, SequenceEntry,
    SynthConfig, RIG_FILE,
};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

/// A protocol fold. Training uses its train set, tracking its test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub protocol: Protocol,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub tta: bool,
    pub split: Option<Split>,
    pub ik: IkConfig,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { tta: true, split: None, ik: IkConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub split: Option<Split>,
    /// Use only the first this-many selected sequences.
    pub limit: Option<usize>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub network_seeds: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seeds: 100, network_seeds: 100 }
    }
}

/// Everything a run reads from its config file, after flag overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Every code path is single-threaded, so runs are bit-reproducible
    /// either way; the flag is recorded with the outputs.
    pub deterministic: bool,
    /// Hand template file; the built-in one when unset.
    pub template: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainRun,
    pub track: TrackConfig,
    pub triangulate: FilterConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies command-line overrides; the global seed reaches every
    /// seeded stage.
    pub fn with_overrides(mut self, seed: Option<u64>, deterministic: bool) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.train.train.seed = s;
        }
        self.deterministic |= deterministic;
        self
    }

    pub fn template(&self) -> Result<HandTemplate> {
        match &self.template {
            Some(p) => Ok(HandTemplate::load(p)?),
            None => Ok(HandTemplate::builtin()),
        }
    }

    pub fn write_snapshot(&self, out: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing resolved config")?;
        let path = out.join(SNAPSHOT_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn select(index: &DatasetIndex, split: Option<Split>, train_side: bool) -> Result<Vec<SequenceEntry>> {
    let ids: Vec<usize> = match split {
        None => (0..index.sequences.len()).collect(),
        Some(s) => {
            let (train, test) = build_protocol_splits(index, s.protocol, s.fold)?;
            if train_side {
                train
            } else {
                test
            }
        }
    };
    Ok(ids.into_iter().map(|i| index.sequences[i].clone()).collect())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<DatasetIndex> {
    create_out(out)?;
    let tmpl = cfg.template()?;
    let index = generate_dataset(&cfg.synth, &tmpl, &ScreenGeometry::default(), &CameraRig::desk_default(), out)?;
    info!("wrote {} sequences to {}", index.sequences.len(), out.display());
    cfg.write_snapshot(out)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub sequences: usize,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    create_out(out)?;
    let geom = ScreenGeometry::default();
    let index = load_index(data)?;
    let mut entries = select(&index, cfg.train.split, true)?;
    if let Some(n) = cfg.train.limit {
        entries.truncate(n);
    }
    let seqs = entries
        .iter()
        .map(|e| load_sequence(data, e, &geom))
        .collect::<touchhand::Result<Vec<_>>>()?;
    let tc = &cfg.train.train;
    let start = Instant::now();
    let mut model = TrainedModel::<f32>::new(tc)?;
    info!("training on {} sequences, {} parameters", seqs.len(), model.network.parameters());
    model.train_epochs(&seqs, tc.epochs, &geom, |e| {
        debug!("epoch {} window {} loss {:.4}", e.epoch, e.window, e.loss.total);
        if e.epoch % 50 == 0 {
            info!("epoch {} loss {:.4}", e.epoch, e.loss.total);
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    save_checkpoint(&mut model, out)?;
    write_loss_csv(&out.join("loss.csv"), &model.losses)?;
    cfg.write_snapshot(out)?;
    let summary = TrainSummary {
        sequences: seqs.len(),
        epochs: model.losses.len(),
        initial_loss: model.losses.first().map_or(f64::NAN, |l| l.loss.total),
        final_loss: model.losses.last().map_or(f64::NAN, |l| l.loss.total),
        seconds,
    };
    info!("trained in {seconds:.1} s, loss {:.4} -> {:.4}", summary.initial_loss, summary.final_loss);
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTiming {
    /// Preprocessing, network and decoding.
    pub estimator_ms: f64,
    pub ik_ms: f64,
}

#[derive(Serialize)]
struct TrackRecord<'a> {
    ik: &'a [Option<IkSolution>; 2],
    timing: FrameTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub sequence: String,
    pub frames: usize,
    pub mean_estimator_ms: f64,
    pub mean_ik_ms: f64,
    /// Published per-frame figures on a GPU workstation, for context.
    pub reference_estimator_ms: f64,
    pub reference_ik_ms: f64,
}

pub const TRACK_SUFFIX: &str = ".track.jsonl";
pub const TRIANGULATED_SUFFIX: &str = ".tri.jsonl";

/// Tracks one capacitive sequence, writing one line per frame.
pub fn track_sequence(
    est: &mut Estimator<f32>,
    capv: &Path,
    ik: &IkConfig,
    tmpl: &HandTemplate,
    out_file: &Path,
) -> Result<(Vec<JointSet>, Vec<FrameTiming>)> {
    let geom = ScreenGeometry::default();
    let seq = read_capv(capv)?;
    let mut state = est.start_stream();
    let mut session = TrackerSession::new(ik.clone());
    let mut text = String::new();
    let mut poses = Vec::with_capacity(seq.frames.len());
    let mut timings = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let t0 = Instant::now();
        let norm = preprocess(frame)?;
        let output = est.infer(&norm, &mut state)?;
        let decoded = decode(&output, &geom, frame.timestamp_ms);
        let t1 = Instant::now();
        let touching = touching_fingertips(&decoded, &norm, &geom);
        let sols = session.track_frame(&decoded, &touching, tmpl)?;
        let t2 = Instant::now();
        let timing = FrameTiming {
            estimator_ms: (t1 - t0).as_secs_f64() * 1e3,
            ik_ms: (t2 - t1).as_secs_f64() * 1e3,
        };
        let js = solutions_to_joints(&sols, tmpl, frame.timestamp_ms);
        let mut line = to_json_line(&js);
        let extra = serde_json::to_string(&TrackRecord { ik: &sols, timing })?;
        line.pop();
        line.push(',');
        line.push_str(&extra[1..]);
        text.push_str(&line);
        text.push('\n');
        poses.push(js);
        timings.push(timing);
    }
    fs::write(out_file, text).with_context(|| format!("writing {}", out_file.display()))?;
    Ok((poses, timings))
}

pub fn cmd_track(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<Vec<TrackSummary>> {
    create_out(out)?;
    cfg.track.ik.validate()?;
    let tmpl = cfg.template()?;
    let model = load_checkpoint::<f32>(checkpoint)?;
    let mut est = Estimator::new(model.network, cfg.track.tta);
    let index = load_index(data)?;
    let mut summaries = Vec::new();
    for e in select(&index, cfg.track.split, false)? {
        let file = out.join(format!("{}{TRACK_SUFFIX}", e.name));
        let (_, timings) = track_sequence(&mut est, &data.join(&e.capv), &cfg.track.ik, &tmpl, &file)?;
        let n = timings.len().max(1) as f64;
        let s = TrackSummary {
            sequence: e.name.clone(),
            frames: timings.len(),
            mean_estimator_ms: timings.iter().map(|t| t.estimator_ms).sum::<f64>() / n,
            mean_ik_ms: timings.iter().map(|t| t.ik_ms).sum::<f64>() / n,
            reference_estimator_ms: 13.0,
            reference_ik_ms: 18.0,
        };
        info!(
            "{}: {} frames, estimator {:.1} ms, IK {:.1} ms per frame",
            s.sequence, s.frames, s.mean_estimator_ms, s.mean_ik_ms
        );
        summaries.push(s);
    }
    fs::write(out.join("timing.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    cfg.write_snapshot(out)?;
    Ok(summaries)
}

/// Compares every `<name>.track.jsonl` in `pred` with the dataset's
/// ground truth. With `triangulated`, ground truth comes from
/// `<name>.tri.jsonl` files in that directory instead.
pub fn cmd_eval(
    cfg: &RunConfig,
    pred: &Path,
    data: &Path,
    triangulated: Option<&Path>,
    out: &Path,
) -> Result<MetricsReport> {
    create_out(out)?;
    let index = load_index(data)?;
    let mut loaded = Vec::new();
    for e in &index.sequences {
        let p = pred.join(format!("{}{TRACK_SUFFIX}", e.name));
        if !p.exists() {
            continue;
        }
        let truth_path = match triangulated {
            Some(dir) => dir.join(format!("{}{TRIANGULATED_SUFFIX}", e.name)),
            None => data.join(&e.truth),
        };
        let predicted = load_jsonl(&p)?;
        let truth = load_jsonl(&truth_path)?;
        if predicted.len() != truth.len() {
            bail!(
                "{} has {} frames but {} has {}",
                p.display(),
                predicted.len(),
                truth_path.display(),
                truth.len()
            );
        }
        loaded.push((e.gesture.as_str().to_string(), predicted, truth));
    }
    if loaded.is_empty() {
        bail!("no *{TRACK_SUFFIX} files in {} match the dataset index", pred.display());
    }
    let streams: Vec<EvalStream> = loaded
        .iter()
        .map(|(g, p, t)| EvalStream { gesture: Some(g.clone()), pred: p, truth: t })
        .collect();
    let report = evaluate(&streams, &ScreenGeometry::default())?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    cfg.write_snapshot(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationSummary {
    pub sequence: String,
    pub camera_frames: usize,
    /// Hand-frames with a reconstruction.
    pub hands: usize,
    pub mean_residual_mm: f64,
}

pub fn cmd_triangulate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<TriangulationSummary>> {
    create_out(out)?;
    let index = load_index(data)?;
    let rig = CameraRig::load(&data.join(index.rig.as_deref().unwrap_or(RIG_FILE)))?;
    let mut summaries = Vec::new();
    for e in &index.sequences {
        let Some(obs_file) = &e.observations else { continue };
        let obs = load_observations(&data.join(obs_file), &rig)?;
        let frames = by_frame(&obs);
        let mut track = Vec::with_capacity(frames.len());
        let (mut hands, mut residual) = (0usize, 0.0);
        for (&f, o) in &frames {
            let t = camera_time_ms(f);
            let mut js = JointSet::empty(t.round() as u64);
            for (h, tri) in reconstruct_frame(o, &rig, &cfg.triangulate).into_iter().enumerate() {
                if let Some(tri) = tri {
                    hands += 1;
                    residual += tri.residual;
                    js.hands[h] = Some(touchhand::decode::HandJoints::from_joints(tri.joints));
                }
            }
            track.push((t, js));
        }
        let times: Vec<u64> = (0..e.frames).map(cap_timestamp_ms).collect();
        let aligned = align_streams(&track, &times);
        let mut text = String::new();
        for (js, &t) in aligned.iter().zip(&times) {
            text.push_str(&to_json_line(js.as_ref().unwrap_or(&JointSet::empty(t))));
            text.push('\n');
        }
        let file = out.join(format!("{}{TRIANGULATED_SUFFIX}", e.name));
        fs::write(&file, text).with_context(|| format!("writing {}", file.display()))?;
        let s = TriangulationSummary {
            sequence: e.name.clone(),
            camera_frames: frames.len(),
            hands,
            mean_residual_mm: if hands > 0 { residual / hands as f64 } else { 0.0 },
        };
        info!("{}: {} hand reconstructions, mean residual {:.3} mm", s.sequence, s.hands, s.mean_residual_mm);
        summaries.push(s);
    }
    if summaries.is_empty() {
        bail!("no sequence in {} has camera observations", data.display());
    }
    cfg.write_snapshot(out)?;
    Ok(summaries)
}

/// Runs the gradient checks and writes them as a table. Failed checks are
/// reported in the result, not as an error.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<Vec<GradCheck>> {
    create_out(out)?;
    let checks = gradient_suite(cfg.gradcheck.seeds, cfg.gradcheck.network_seeds)?;
    let mut csv = String::from("op,seeds,worst_relative_error,tolerance,redrawn_probes,passed\n");
    for c in &checks {
        csv.push_str(&format!(
            "{},{},{:e},{:e},{},{}\n",
            c.op,
            c.seeds,
            c.worst,
            c.tolerance,
            c.redrawn,
            c.passed()
        ));
    }
    fs::write(out.join("gradcheck.csv"), &csv)?;
    cfg.write_snapshot(out)?;
    Ok(checks)
}
