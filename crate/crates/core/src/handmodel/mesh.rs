use std::io::Write;

use nalgebra::{Matrix3, Vector3};

use super::{kinematics, HandPose, HandTemplate, Kinematics, SHAPE_DOF};
use crate::skeleton::{bone, Hand, BONES, PARENT, WRIST};

const RING: usize = 8;
const RING_STATIONS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct HandMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

/// Rest mesh of a (right-hand) shape with skinning weights over joint frames.
struct Rig {
    rest: Kinematics,
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    /// Up to two `(joint frame, weight)` influences per vertex.
    weights: Vec<[(usize, f64); 2]>,
}

/// Tube of rings around every bone, capped at the fingertips.
fn build_rig(tmpl: &HandTemplate, beta: &[f64; SHAPE_DOF]) -> Rig {
    let rest = kinematics(&HandPose { beta: *beta, ..HandPose::neutral(Hand::Right) }, tmpl);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut weights = Vec::new();
    let is_tip = |c: usize| !PARENT.contains(&c);
    for b in 0..BONES {
        let (a, c) = bone(b);
        let (pa, pc) = (rest.joints[a], rest.joints[c]);
        let d = (pc - pa).normalize();
        let u = Vector3::z().cross(&d).normalize();
        let w = d.cross(&u);
        let r = tmpl.bone_radii[b];
        let first = vertices.len();
        for (s, &t) in RING_STATIONS.iter().enumerate() {
            let centre = pa + (pc - pa) * t;
            for i in 0..RING {
                let phi = i as f64 * std::f64::consts::TAU / RING as f64;
                vertices.push(centre + (u * phi.cos() + w * phi.sin()) * r);
                weights.push(if s == 0 && a != WRIST {
                    [(a, 0.5), (PARENT[a], 0.5)]
                } else {
                    [(a, 1.0), (a, 0.0)]
                });
            }
        }
        for s in 0..RING_STATIONS.len() - 1 {
            for i in 0..RING {
                let i2 = (i + 1) % RING;
                let (v00, v01) = (first + s * RING + i, first + s * RING + i2);
                let (v10, v11) = (v00 + RING, v01 + RING);
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        if is_tip(c) {
            let cap = vertices.len();
            vertices.push(pc + d * r);
            weights.push([(a, 1.0), (a, 0.0)]);
            let last = first + (RING_STATIONS.len() - 1) * RING;
            for i in 0..RING {
                triangles.push([last + i, cap, last + (i + 1) % RING]);
            }
        }
    }
    Rig {
        rest,
        vertices,
        triangles,
        weights,
    }
}

fn skin_rig(rig: &Rig, kin: &Kinematics) -> Vec<Vector3<f64>> {
    rig.vertices
        .iter()
        .zip(&rig.weights)
        .map(|(v, infl)| {
            let mut out = *v;
            for &(j, w) in infl {
                if w == 0.0 {
                    continue;
                }
                let q: Matrix3<f64> = kin.frames[j];
                let offset = v - rig.rest.joints[j];
                let moved = (q - Matrix3::identity()) * offset + (kin.joints[j] - rig.rest.joints[j]);
                out += moved * w;
            }
            out
        })
        .collect()
}

impl HandTemplate {
    /// Undeformed mesh for a shape, in the hand's own handedness.
    pub fn rest_mesh(&self, beta: &[f64; SHAPE_DOF], hand: Hand) -> HandMesh {
        self.skin(&HandPose {
            beta: *beta,
            ..HandPose::neutral(hand)
        })
    }

    /// Linear blend skinning of the template mesh to `pose`.
    pub fn skin(&self, pose: &HandPose) -> HandMesh {
        let rig = build_rig(self, &pose.beta);
        match pose.hand {
            Hand::Right => HandMesh {
                vertices: skin_rig(&rig, &kinematics(pose, self)),
                triangles: rig.triangles,
            },
            Hand::Left => {
                let right = kinematics(&pose.mirrored(), self);
                HandMesh {
                    vertices: skin_rig(&rig, &right)
                        .into_iter()
                        .map(|v| Vector3::new(-v.x, v.y, v.z))
                        .collect(),
                    triangles: rig.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
                }
            }
        }
    }
}

/// Projects every vertex below the screen onto it.
pub fn flatten_contact(mesh: &HandMesh) -> HandMesh {
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        if v.z < 0.0 {
            v.z = 0.0;
        }
    }
    out
}

/// Wavefront OBJ vertex/face listing (1-based indices).
pub fn write_obj(mesh: &HandMesh, out: &mut impl Write) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}
