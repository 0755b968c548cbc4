//! Error metrics over tracked and ground-truth joint streams, and the
//! cross-validation splits of the three evaluation protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::JointSet;
use crate::frames::ScreenGeometry;
use crate::skeleton::{finger_joints, Hand, FINGERS, HANDS, JOINTS};
use crate::synth::DatasetIndex;
use crate::{Error, Result};

/// A ground-truth joint counts as visible at or below this height (mm).
pub const VISIBLE_HEIGHT_MM: f64 = 5.0;

/// Per-joint error split into its in-plane and normal parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointError {
    pub epe: f64,
    pub xy: f64,
    pub z: f64,
}

pub fn joint_error(pred: &[f64; 3], gt: &[f64; 3]) -> JointError {
    let dx = pred[0] - gt[0];
    let dy = pred[1] - gt[1];
    let dz = pred[2] - gt[2];
    JointError { epe: (dx * dx + dy * dy + dz * dz).sqrt(), xy: (dx * dx + dy * dy).sqrt(), z: dz.abs() }
}

/// Joints of fingers with at least one visible joint.
pub fn visible_joints(gt: &[[f64; 3]; JOINTS], geom: &ScreenGeometry) -> Vec<usize> {
    let visible = |k: usize| gt[k][2] <= VISIBLE_HEIGHT_MM && geom.on_screen(gt[k][0], gt[k][1]);
    (0..FINGERS)
        .map(finger_joints)
        .filter(|js| js.iter().any(|&k| visible(k)))
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    epe: f64,
    xy: f64,
    z: f64,
    n: usize,
}

impl Sums {
    fn add(&mut self, e: &JointError) {
        self.epe += e.epe;
        self.xy += e.xy;
        self.z += e.z;
        self.n += 1;
    }

    fn merge(&mut self, o: &Sums) {
        self.epe += o.epe;
        self.xy += o.xy;
        self.z += o.z;
        self.n += o.n;
    }

    fn means(&self) -> Option<[f64; 3]> {
        (self.n > 0).then(|| [self.epe, self.xy, self.z].map(|s| s / self.n as f64))
    }
}

/// Accumulated errors of one stream (or a merge of several).
#[derive(Debug, Clone, Default)]
struct Tally {
    all: Sums,
    visible: Sums,
    existence_hits: usize,
    slots: usize,
    frames: usize,
    hand_frames: usize,
    per_hand: [Sums; HANDS],
}

impl Tally {
    fn merge(&mut self, o: &Tally) {
        self.all.merge(&o.all);
        self.visible.merge(&o.visible);
        self.existence_hits += o.existence_hits;
        self.slots += o.slots;
        self.frames += o.frames;
        self.hand_frames += o.hand_frames;
        for h in 0..HANDS {
            self.per_hand[h].merge(&o.per_hand[h]);
        }
    }
}

fn tally(pred: &[JointSet], gt: &[JointSet], geom: &ScreenGeometry) -> Result<Tally> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut t = Tally::default();
    for (p, g) in pred.iter().zip(gt) {
        t.frames += 1;
        for h in 0..HANDS {
            t.slots += 1;
            if p.hands[h].is_some() == g.hands[h].is_some() {
                t.existence_hits += 1;
            }
            let (Some(ph), Some(gh)) = (&p.hands[h], &g.hands[h]) else { continue };
            t.hand_frames += 1;
            let errors: Vec<JointError> = (0..JOINTS).map(|k| joint_error(&ph.joints[k], &gh.joints[k])).collect();
            for e in &errors {
                t.all.add(e);
                t.per_hand[h].add(e);
            }
            for k in visible_joints(&gh.joints, geom) {
                t.visible.add(&errors[k]);
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Across sequences; zero for a single stream.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub epe: Option<f64>,
    pub epe_xy: Option<f64>,
    pub epe_z: Option<f64>,
    pub joints: usize,
}

impl Breakdown {
    fn of(s: &Sums) -> Self {
        let m = s.means();
        Breakdown { epe: m.map(|m| m[0]), epe_xy: m.map(|m| m[1]), epe_z: m.map(|m| m[2]), joints: s.n }
    }
}

/// Published full-model figures, kept only as context for the numbers here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub epe_mm: f64,
    pub hea: f64,
    pub estimator_ms: f64,
    pub ik_ms: f64,
    pub note: String,
}

impl Default for Reference {
    fn default() -> Self {
        Reference {
            epe_mm: 11.8,
            hea: 0.997,
            estimator_ms: 13.0,
            ik_ms: 18.0,
            note: "captured-dataset figures; not comparable to synthetic desk-scale runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe: Option<Stat>,
    pub epe_xy: Option<Stat>,
    pub epe_z: Option<Stat>,
    pub epe_v: Option<Stat>,
    pub epe_v_xy: Option<Stat>,
    pub epe_v_z: Option<Stat>,
    pub hea: f64,
    pub frames: usize,
    pub hand_frames: usize,
    pub sequences: usize,
    pub per_hand: BTreeMap<String, Breakdown>,
    pub per_gesture: BTreeMap<String, Breakdown>,
    pub reference: Reference,
}

/// One aligned pair of streams to evaluate.
pub struct EvalStream<'a> {
    pub gesture: Option<String>,
    pub pred: &'a [JointSet],
    pub truth: &'a [JointSet],
}

fn mean_std(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

/// Means pool every joint of every stream; standard deviations are over
/// per-sequence means.
pub fn evaluate(streams: &[EvalStream], geom: &ScreenGeometry) -> Result<MetricsReport> {
    let tallies: Vec<Tally> = streams.iter().map(|s| tally(s.pred, s.truth, geom)).collect::<Result<_>>()?;
    let mut total = Tally::default();
    tallies.iter().for_each(|t| total.merge(t));
    let stat = |pick: &dyn Fn(&Tally) -> &Sums, c: usize| -> Option<Stat> {
        let pooled = pick(&total).means()?[c];
        let per: Vec<f64> = tallies.iter().filter_map(|t| pick(t).means().map(|m| m[c])).collect();
        Some(Stat { mean: pooled, std: mean_std(&per).std })
    };
    let mut per_gesture: BTreeMap<String, Sums> = BTreeMap::new();
    for (s, t) in streams.iter().zip(&tallies) {
        if let Some(g) = &s.gesture {
            per_gesture.entry(g.clone()).or_default().merge(&t.all);
        }
    }
    Ok(MetricsReport {
        epe: stat(&|t| &t.all, 0),
        epe_xy: stat(&|t| &t.all, 1),
        epe_z: stat(&|t| &t.all, 2),
        epe_v: stat(&|t| &t.visible, 0),
        epe_v_xy: stat(&|t| &t.visible, 1),
        epe_v_z: stat(&|t| &t.visible, 2),
        hea: if total.slots == 0 { 1.0 } else { total.existence_hits as f64 / total.slots as f64 },
        frames: total.frames,
        hand_frames: total.hand_frames,
        sequences: streams.len(),
        per_hand: Hand::BOTH
            .iter()
            .map(|h| (h.as_str().to_string(), Breakdown::of(&total.per_hand[h.index()])))
            .collect(),
        per_gesture: per_gesture.iter().map(|(g, s)| (g.clone(), Breakdown::of(s))).collect(),
        reference: Reference::default(),
    })
}

pub fn compute_metrics(pred: &[JointSet], truth: &[JointSet], geom: &ScreenGeometry) -> Result<MetricsReport> {
    evaluate(&[EvalStream { gesture: None, pred, truth }], geom)
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std\n");
        let rows = [
            ("epe", self.epe),
            ("epe_xy", self.epe_xy),
            ("epe_z", self.epe_z),
            ("epe_v", self.epe_v),
            ("epe_v_xy", self.epe_v_xy),
            ("epe_v_z", self.epe_v_z),
        ];
        for (name, v) in rows {
            match v {
                Some(v) => writeln!(s, "{name},{:.6},{:.6}", v.mean, v.std).unwrap(),
                None => writeln!(s, "{name},,").unwrap(),
            }
        }
        writeln!(s, "hea,{:.6},", self.hea).unwrap();
        let groups = self.per_hand.iter().map(|(k, v)| (format!("hand:{k}"), v));
        let groups = groups.chain(self.per_gesture.iter().map(|(k, v)| (format!("gesture:{k}"), v)));
        for (name, b) in groups {
            if let Some(e) = b.epe {
                writeln!(s, "{name}:epe,{e:.6},").unwrap();
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Leave one recording session out.
    P1,
    /// Leave one of three participant groups out.
    P2,
    /// Leave one gesture class out.
    P3,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Protocol::P1),
            "P2" => Ok(Protocol::P2),
            "P3" => Ok(Protocol::P3),
            _ => Err(Error::InvalidInput(format!("unknown protocol {s:?}, expected P1, P2 or P3"))),
        }
    }
}

pub const PARTICIPANT_GROUPS: usize = 3;

/// Sequence indices of the training and test sets of one fold.
pub fn build_protocol_splits(index: &DatasetIndex, protocol: Protocol, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let seqs = &index.sequences;
    let key: Vec<usize> = match protocol {
        Protocol::P1 => seqs.iter().map(|s| s.session).collect(),
        Protocol::P2 => {
            let people: Vec<usize> = seqs.iter().map(|s| s.participant).collect::<BTreeSet<_>>().into_iter().collect();
            let groups = PARTICIPANT_GROUPS.min(people.len());
            seqs.iter()
                .map(|s| {
                    let rank = people.binary_search(&s.participant).unwrap();
                    rank * groups / people.len()
                })
                .collect()
        }
        Protocol::P3 => {
            let classes: Vec<_> = seqs.iter().map(|s| s.gesture).collect::<BTreeSet<_>>().into_iter().collect();
            seqs.iter().map(|s| classes.binary_search(&s.gesture).unwrap()).collect()
        }
    };
    let values: Vec<usize> = key.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let Some(&held) = values.get(fold) else {
        return Err(Error::FoldOutOfRange { fold, folds: values.len() });
    };
    let (test, train): (Vec<usize>, Vec<usize>) = (0..seqs.len()).partition(|&i| key[i] == held);
    Ok((train, test))
}

/// Number of folds a protocol has on this dataset.
pub fn fold_count(index: &DatasetIndex, protocol: Protocol) -> usize {
    (0..)
        .take_while(|&f| build_protocol_splits(index, protocol, f).is_ok())
        .count()
}
