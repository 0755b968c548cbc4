//! Joint ordering and bone topology shared by every module.
//!
//! Joints follow the common 21-point layout: wrist, then thumb CMC, MCP,
//! IP, tip, then MCP, PIP, DIP, tip for index, middle, ring and pinky.

use serde::{Deserialize, Serialize};

pub const JOINTS: usize = 21;
pub const BONES: usize = 20;
pub const HANDS: usize = 2;
pub const FINGERS: usize = 5;
/// Heatmap channels / depth rows: left hand first, then right.
pub const CHANNELS: usize = HANDS * JOINTS;

pub const WRIST: usize = 0;
pub const FINGERTIPS: [usize; FINGERS] = [4, 8, 12, 16, 20];

pub const FINGER_NAMES: [&str; FINGERS] = ["thumb", "index", "middle", "ring", "pinky"];

pub const JOINT_NAMES: [&str; JOINTS] = [
    "wrist",
    "thumb_cmc",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "pinky_mcp",
    "pinky_pip",
    "pinky_dip",
    "pinky_tip",
];

/// Parent of every joint; the wrist is its own root (`usize::MAX`).
pub const PARENT: [usize; JOINTS] = [
    usize::MAX,
    0,
    1,
    2,
    3,
    0,
    5,
    6,
    7,
    0,
    9,
    10,
    11,
    0,
    13,
    14,
    15,
    0,
    17,
    18,
    19,
];

/// Bone `b` runs from `PARENT[b + 1]` to joint `b + 1`.
pub fn bone(b: usize) -> (usize, usize) {
    (PARENT[b + 1], b + 1)
}

/// Finger (0 = thumb .. 4 = pinky) a non-wrist joint belongs to.
pub fn finger_of(joint: usize) -> Option<usize> {
    (joint != WRIST).then(|| (joint - 1) / 4)
}

/// The four joints of finger `f`, proximal to distal.
pub fn finger_joints(f: usize) -> [usize; 4] {
    let base = 1 + 4 * f;
    [base, base + 1, base + 2, base + 3]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub const BOTH: [Hand; HANDS] = [Hand::Left, Hand::Right];

    pub fn index(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => 1,
        }
    }

    pub fn from_index(i: usize) -> Hand {
        if i == 0 {
            Hand::Left
        } else {
            Hand::Right
        }
    }

    pub fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }

    /// First heatmap channel / depth row of this hand.
    pub fn channel_offset(self) -> usize {
        self.index() * JOINTS
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

/// Channel `c` after a left/right swap.
pub fn swap_channel(c: usize) -> usize {
    (c + JOINTS) % CHANNELS
}
