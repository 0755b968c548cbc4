//! Turns estimator output into 3D joints: heatmap argmax for xy, expected
//! depth over the bin centres for z, a 0.5 threshold for hand presence.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::estimator::{bin_center, EstimatorOutput, DEPTH_BINS};
use crate::frames::{NormFrame, ScreenGeometry, GRID_COLS};
use crate::skeleton::{Hand, FINGERS, FINGERTIPS, HANDS, JOINTS};
use crate::{Error, Result};

/// Fingertips whose depth is at most this count as touching (given contact
/// evidence under them).
pub const TOUCH_DEPTH_MM: f64 = 5.0;
pub const PRESENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct HandJoints {
    /// Screen millimetres.
    pub joints: [[f64; 3]; JOINTS],
    /// Heatmap peak value per joint.
    pub confidence: [f64; JOINTS],
    /// Padded-grid `(col, row)` of each heatmap peak, when decoded.
    pub pixels: Option<[[usize; 2]; JOINTS]>,
}

impl HandJoints {
    pub fn from_joints(joints: [[f64; 3]; JOINTS]) -> Self {
        HandJoints { joints, confidence: [1.0; JOINTS], pixels: None }
    }
}

/// Joints of both hands for one frame. An absent hand is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    pub timestamp_ms: u64,
    pub hands: [Option<HandJoints>; HANDS],
}

impl JointSet {
    pub fn empty(timestamp_ms: u64) -> Self {
        JointSet { timestamp_ms, hands: [None, None] }
    }

    pub fn present(&self) -> [bool; HANDS] {
        [self.hands[0].is_some(), self.hands[1].is_some()]
    }

    pub fn hand(&self, h: Hand) -> Option<&HandJoints> {
        self.hands[h.index()].as_ref()
    }

    /// Left-right flip with hands swapped. Joints decoded from a pixel are
    /// re-derived from the mirrored pixel so the result matches decoding a
    /// mirrored output bit for bit.
    pub fn mirrored(&self, geom: &ScreenGeometry) -> JointSet {
        let flip = |hj: &HandJoints| {
            let mut out = hj.clone();
            for j in 0..JOINTS {
                out.joints[j][0] = match &mut out.pixels {
                    Some(px) => {
                        px[j][0] = geom.mirror_col(px[j][0]);
                        geom.pixel_to_mm(px[j][0] as f64, px[j][1] as f64).0
                    }
                    None => geom.mirror_x(hj.joints[j][0]),
                };
            }
            out
        };
        JointSet {
            timestamp_ms: self.timestamp_ms,
            hands: [self.hands[1].as_ref().map(flip), self.hands[0].as_ref().map(flip)],
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Expected depth of a normalized bin distribution.
pub fn expected_depth(row: &[f64]) -> f64 {
    debug_assert_eq!(row.len(), DEPTH_BINS);
    row.iter().enumerate().map(|(k, &w)| w * bin_center(k)).sum()
}

pub fn decode(output: &EstimatorOutput, geom: &ScreenGeometry, timestamp_ms: u64) -> JointSet {
    let mut set = JointSet::empty(timestamp_ms);
    for h in Hand::BOTH {
        if output.existence[h.index()] <= PRESENCE_THRESHOLD {
            continue;
        }
        let mut hj = HandJoints {
            joints: [[0.0; 3]; JOINTS],
            confidence: [0.0; JOINTS],
            pixels: Some([[0; 2]; JOINTS]),
        };
        let px = hj.pixels.as_mut().unwrap();
        for j in 0..JOINTS {
            let c = h.channel_offset() + j;
            let (i, peak) = argmax(output.heatmap(c));
            let (col, row) = (i % GRID_COLS, i / GRID_COLS);
            let (x, y) = geom.pixel_to_mm(col as f64, row as f64);
            hj.joints[j] = [x, y, expected_depth(output.depth_row(c))];
            hj.confidence[j] = peak;
            px[j] = [col, row];
        }
        set.hands[h.index()] = Some(hj);
    }
    set
}

/// Fingertips that are both shallow and over a nonzero capacitance reading.
pub fn touching_fingertips(js: &JointSet, norm: &NormFrame, geom: &ScreenGeometry) -> BTreeSet<(Hand, usize)> {
    let mut out = BTreeSet::new();
    for h in Hand::BOTH {
        let Some(hj) = js.hand(h) else { continue };
        for f in 0..FINGERS {
            let tip = FINGERTIPS[f];
            let p = hj.joints[tip];
            if p[2] > TOUCH_DEPTH_MM {
                continue;
            }
            let [col, row] = match hj.pixels {
                Some(px) => px[tip],
                None => {
                    let (c, r) = geom.mm_to_pixel(p[0], p[1]);
                    if c < -0.5 || r < -0.5 {
                        continue;
                    }
                    [c.round() as usize, r.round() as usize]
                }
            };
            if col < geom.padded_cols && row < geom.padded_rows && norm.active_near(col, row) {
                out.insert((h, f));
            }
        }
    }
    out
}

// ---- line-delimited serialization ----

fn push_f6(s: &mut String, v: f64) {
    // avoid "-0.000000" so golden files do not depend on the sign of zero
    let r = format!("{v:.6}");
    if r.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
        s.push_str("0.000000");
    } else {
        s.push_str(&r);
    }
}

/// One JSON record with every coordinate fixed to six decimals.
pub fn to_json_line(js: &JointSet) -> String {
    let mut s = format!("{{\"timestamp_ms\":{},\"hands\":[", js.timestamp_ms);
    for (h, slot) in js.hands.iter().enumerate() {
        if h > 0 {
            s.push(',');
        }
        let Some(hj) = slot else {
            s.push_str("{\"present\":false}");
            continue;
        };
        s.push_str("{\"present\":true,\"joints\":[");
        for (j, p) in hj.joints.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            s.push('[');
            for (k, &v) in p.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                push_f6(&mut s, v);
            }
            s.push(']');
        }
        s.push_str("],\"confidence\":[");
        for (j, &c) in hj.confidence.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            push_f6(&mut s, c);
        }
        s.push_str("]}");
    }
    s.push_str("]}");
    s
}

#[derive(Deserialize)]
struct HandRecord {
    present: bool,
    #[serde(default)]
    joints: Vec<[f64; 3]>,
    #[serde(default)]
    confidence: Vec<f64>,
}

#[derive(Deserialize)]
struct FrameRecord {
    timestamp_ms: u64,
    hands: [HandRecord; HANDS],
}

pub fn from_json_line(line: &str) -> Result<JointSet> {
    let rec: FrameRecord = serde_json::from_str(line).map_err(|e| Error::InvalidInput(format!("joint record: {e}")))?;
    let mut set = JointSet::empty(rec.timestamp_ms);
    for (h, hr) in rec.hands.into_iter().enumerate() {
        if !hr.present {
            continue;
        }
        let joints: [[f64; 3]; JOINTS] = hr
            .joints
            .try_into()
            .map_err(|v: Vec<_>| Error::InvalidInput(format!("hand {h}: {} joints, expected {JOINTS}", v.len())))?;
        let confidence: [f64; JOINTS] = if hr.confidence.is_empty() {
            [1.0; JOINTS]
        } else {
            hr.confidence
                .try_into()
                .map_err(|_| Error::InvalidInput(format!("hand {h}: confidence length mismatch")))?
        };
        set.hands[h] = Some(HandJoints { joints, confidence, pixels: None });
    }
    Ok(set)
}

pub fn write_jsonl(sets: &[JointSet], out: &mut impl Write) -> std::io::Result<()> {
    for js in sets {
        writeln!(out, "{}", to_json_line(js))?;
    }
    Ok(())
}

pub fn save_jsonl(sets: &[JointSet], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_jsonl(sets, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<JointSet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            sets.push(from_json_line(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
        }
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::CHANNELS;

    fn one_hot(k: usize) -> Vec<f64> {
        (0..DEPTH_BINS).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn depth_examples() {
        assert_eq!(expected_depth(&one_hot(0)), -8.75);
        assert!((expected_depth(&vec![1.0 / 48.0; 48]) - 50.0).abs() < 1e-12);
        assert_eq!(expected_depth(&one_hot(47)), 108.75);
    }

    #[test]
    fn presence_threshold() {
        let mut out = EstimatorOutput::zeros();
        out.existence = [0.7, 0.3];
        let js = decode(&out, &ScreenGeometry::default(), 0);
        assert_eq!(js.present(), [true, false]);
        out.existence = [0.5, 0.5000001];
        assert_eq!(decode(&out, &ScreenGeometry::default(), 0).present(), [false, true]);
    }

    #[test]
    fn zero_heatmap_takes_first_pixel() {
        let geom = ScreenGeometry::default();
        let mut out = EstimatorOutput::zeros();
        out.existence = [1.0, 1.0];
        let js = decode(&out, &geom, 0);
        let hj = js.hand(Hand::Left).unwrap();
        assert_eq!(hj.pixels.unwrap()[0], [0, 0]);
        assert_eq!(hj.confidence[0], 0.0);
        assert_eq!(hj.joints[0][0], geom.pixel_to_mm(0.0, 0.0).0);
    }

    #[test]
    fn touching_rule() {
        let geom = ScreenGeometry::default();
        let mut norm = NormFrame { values: vec![0.0; 96 * 128], validity: vec![1.0; 96 * 128] };
        let mut out = EstimatorOutput::zeros();
        out.existence = [0.0, 1.0];
        let c = Hand::Right.channel_offset() + FINGERTIPS[1];
        out.heatmaps[c * 96 * 128 + 40 * 128 + 60] = 1.0;
        // bin 4 has centre 1.25 mm
        out.depth[c * DEPTH_BINS..][..DEPTH_BINS].copy_from_slice(&one_hot(4));
        let js = decode(&out, &geom, 0);
        assert!(touching_fingertips(&js, &norm, &geom).is_empty());
        norm.values[41 * 128 + 61] = 0.8;
        let t = touching_fingertips(&js, &norm, &geom);
        assert_eq!(t.into_iter().collect::<Vec<_>>(), vec![(Hand::Right, 1)]);
        out.depth[c * DEPTH_BINS..][..DEPTH_BINS].copy_from_slice(&one_hot(20));
        let js = decode(&out, &geom, 0);
        assert!(touching_fingertips(&js, &norm, &geom).is_empty());
    }

    #[test]
    fn jsonl_round_trip_at_six_decimals() {
        let mut js = JointSet::empty(1234);
        js.hands[1] = Some(HandJoints::from_joints(std::array::from_fn(|j| [j as f64 / 3.0, -0.0, 1e-9])));
        let line = to_json_line(&js);
        assert!(line.starts_with("{\"timestamp_ms\":1234,\"hands\":[{\"present\":false},{\"present\":true,\"joints\":[[0.000000,0.000000,0.000000],[0.333333,"));
        let back = from_json_line(&line).unwrap();
        assert_eq!(back.present(), [false, true]);
        let a = back.hand(Hand::Right).unwrap().joints;
        for j in 0..JOINTS {
            assert!((a[j][0] - j as f64 / 3.0).abs() <= 5e-7);
        }
        assert_eq!(to_json_line(&back), line);
        assert_eq!(CHANNELS, 42);
    }
}
