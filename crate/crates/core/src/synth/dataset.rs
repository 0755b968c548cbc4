//! Writing and reading synthetic datasets: one `.capv`, one ground-truth
//! file and one 2D observation file per sequence, plus `index.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    cap_timestamp_ms, generate_trajectory, simulate_cameras, simulate_capacitance, Gesture, HandsInvolved,
    SynthScenario, CAMERA_SUBSTEPS, CAP_FPS,
};
use crate::decode::{load_jsonl, to_json_line, JointSet};
use crate::estimator::{GroundTruthFrame, TrainSequence};
use crate::frames::{preprocess, read_capv, write_capv, CapSequence, ScreenGeometry, SENSOR_COLS, SENSOR_ROWS};
use crate::handmodel::{HandPose, HandTemplate, SHAPE_DOF};
use crate::mvs::{save_observations, CameraRig};
use crate::skeleton::HANDS;
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const RIG_FILE: &str = "rig.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub sequences: usize,
    /// Capacitive frames per sequence.
    pub frames: usize,
    pub participants: usize,
    pub sessions: usize,
    pub gestures: Vec<Gesture>,
    /// Fixed hands for every sequence; unset rotates right, left, both.
    pub hands: Option<HandsInvolved>,
    pub cap_noise: f64,
    pub pixel_noise: f64,
    /// Write 2D camera detections (the largest files by far).
    pub observations: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            sequences: 16,
            frames: 450,
            participants: 4,
            sessions: 4,
            gestures: Gesture::ALL.to_vec(),
            hands: None,
            cap_noise: 1.5,
            pixel_noise: 0.5,
            observations: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth config: {m}")));
        if self.sequences == 0 || self.frames == 0 {
            return bad("sequences and frames must be positive");
        }
        if self.participants == 0 || self.sessions == 0 || self.gestures.is_empty() {
            return bad("participants, sessions and gestures must be non-empty");
        }
        if !(self.cap_noise >= 0.0 && self.pixel_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub participant: usize,
    pub session: usize,
    pub gesture: Gesture,
    pub hands: HandsInvolved,
    pub frames: usize,
    pub seed: u64,
    pub beta: [f64; SHAPE_DOF],
    pub capv: String,
    pub truth: String,
    pub observations: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub fps: f64,
    pub camera_fps: f64,
    pub rig: Option<String>,
    pub sequences: Vec<SequenceEntry>,
}

fn participant_beta(seed: u64, participant: usize) -> [f64; SHAPE_DOF] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | participant as u64);
    std::array::from_fn(|i| match i {
        0 => rng.random_range(-1.0..=1.0),
        1..=5 => rng.random_range(-0.8..=0.8),
        _ => rng.random_range(-0.5..=0.5),
    })
}

fn sequence_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng.random()
}

/// Ground-truth record: a joint-set line extended with the generating poses.
fn truth_line(js: &JointSet, poses: &[Option<HandPose>; HANDS]) -> String {
    let mut line = to_json_line(js);
    line.pop();
    line.push_str(",\"poses\":");
    line.push_str(&serde_json::to_string(poses).expect("poses serialize"));
    line.push('}');
    line
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn generate_dataset(
    cfg: &SynthConfig,
    tmpl: &HandTemplate,
    geom: &ScreenGeometry,
    rig: &CameraRig,
    out: &Path,
) -> Result<DatasetIndex> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::new();
    for i in 0..cfg.sequences {
        let name = format!("seq_{i:03}");
        let session = i % cfg.sessions;
        let participant = (i / cfg.sessions) % cfg.participants;
        let gesture = cfg.gestures[i % cfg.gestures.len()];
        let hands = cfg.hands.unwrap_or([HandsInvolved::Right, HandsInvolved::Left, HandsInvolved::Both][i % 3]);
        let seed = sequence_seed(cfg.seed, i);
        let mut sc = SynthScenario::new(seed, gesture, hands, cfg.frames);
        sc.cap_noise = cfg.cap_noise;
        sc.pixel_noise = cfg.pixel_noise;
        sc.beta = participant_beta(cfg.seed, participant);
        let traj = generate_trajectory(&sc, tmpl);

        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(1);
        let mut caps = Vec::with_capacity(cfg.frames);
        let mut truth = String::new();
        for k in 0..cfg.frames {
            let t = &traj[k * CAMERA_SUBSTEPS];
            let ts = cap_timestamp_ms(k);
            caps.push(simulate_capacitance(&t.poses, tmpl, geom, sc.cap_noise, ts, &mut noise));
            let mut js = t.joints.clone();
            js.timestamp_ms = ts;
            truth.push_str(&truth_line(&js, &t.poses));
            truth.push('\n');
        }
        let capv = format!("{name}.capv");
        write_capv(&out.join(&capv), &CapSequence::new(SENSOR_COLS, SENSOR_ROWS, CAP_FPS as f32, caps)?)?;
        let truth_file = format!("{name}.truth.jsonl");
        write_text(&out.join(&truth_file), &truth)?;

        let observations = if cfg.observations {
            let mut cam_rng = ChaCha8Rng::seed_from_u64(seed);
            cam_rng.set_stream(2);
            let obs: Vec<_> = traj
                .iter()
                .enumerate()
                .flat_map(|(f, t)| simulate_cameras(&t.joints, f, rig, sc.pixel_noise, &[], &mut cam_rng))
                .collect();
            let file = format!("{name}.obs.jsonl");
            save_observations(&obs, &out.join(&file))?;
            Some(file)
        } else {
            None
        };
        entries.push(SequenceEntry {
            name,
            participant,
            session,
            gesture,
            hands,
            frames: cfg.frames,
            seed,
            beta: sc.beta,
            capv,
            truth: truth_file,
            observations,
        });
    }
    rig.save(&out.join(RIG_FILE))?;
    let index = DatasetIndex {
        fps: CAP_FPS,
        camera_fps: CAP_FPS * CAMERA_SUBSTEPS as f64,
        rig: Some(RIG_FILE.into()),
        sequences: entries,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    write_text(&out.join(INDEX_FILE), &(text + "\n"))?;
    Ok(index)
}

/// Reads `index.json` from a dataset directory.
pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn resolve(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

/// Preprocessed frames and training targets of one sequence.
pub fn load_sequence(dir: &Path, entry: &SequenceEntry, geom: &ScreenGeometry) -> Result<TrainSequence> {
    let caps = read_capv(&resolve(dir, &entry.capv))?;
    let truth_path = resolve(dir, &entry.truth);
    let truth = load_jsonl(&truth_path)?;
    if truth.len() != caps.frames.len() {
        return Err(Error::format(
            &truth_path,
            format!("{} truth frames for {} capacitive frames", truth.len(), caps.frames.len()),
        ));
    }
    Ok(TrainSequence {
        frames: caps.frames.iter().map(preprocess).collect::<Result<_>>()?,
        truth: truth.iter().map(|js| GroundTruthFrame::from_joint_set(js, geom)).collect(),
    })
}

#[derive(Deserialize)]
struct PoseRecord {
    poses: [Option<HandPose>; HANDS],
}

/// The generating poses stored alongside the ground-truth joints.
pub fn load_truth_poses(path: &Path) -> Result<Vec<[Option<HandPose>; HANDS]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<PoseRecord>(l)
                .map(|r| r.poses)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}
