//! Constrained IK: fits a [`HandPose`] to decoded joints under joint limits
//! and a minimum joint height above the screen.
//!
//! Each iteration linearizes the forward kinematics and solves a damped
//! Gauss-Newton QP with linearized constraints. Accepted steps are lifted
//! back above the height bound along the root translation, so every iterate
//! is feasible and the objective never increases.

mod qp;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decode::{HandJoints, JointSet};
use crate::handmodel::{fk_flat, fk_jacobian, HandPose, HandTemplate, BETA_LIMIT, JAC_COLS, POSE_DOF, SHAPE_DOF};
use crate::skeleton::{Hand, FINGERS, FINGERTIPS, HANDS, JOINTS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    /// Minimum height of every joint (mm).
    pub z0: f64,
    pub touch_weight: f64,
    pub max_iterations: usize,
    /// Converged once an accepted step moves no joint further than this (mm).
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// Largest change of any shape coefficient within one frame.
    pub beta_trust: f64,
    /// Frames with all five fingertips touching before the shape is locked.
    pub beta_frames: usize,
    /// Frames a hand may be missing before its warm start is dropped.
    pub grace_frames: usize,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            z0: 5.0,
            touch_weight: 2.0,
            max_iterations: 50,
            step_tolerance: 1e-3,
            initial_damping: 1e-3,
            beta_trust: 0.1,
            beta_frames: 20,
            grace_frames: 5,
        }
    }
}

impl IkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("ik config: {m}")));
        if !(self.z0 > 0.0) {
            return bad("z0 must be positive");
        }
        if !(self.touch_weight > 0.0) || !(self.initial_damping > 0.0) || !(self.beta_trust > 0.0) {
            return bad("weights, damping and beta trust must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkProblem {
    pub targets: [[f64; 3]; JOINTS],
    pub weights: [f64; JOINTS],
    pub beta_locked: bool,
    pub init: HandPose,
}

impl IkProblem {
    /// Unit weights, raised to `touch_weight` at touching fingertips.
    pub fn new(targets: [[f64; 3]; JOINTS], init: HandPose, touching: &[usize], cfg: &IkConfig) -> Self {
        let mut weights = [1.0; JOINTS];
        for &f in touching {
            weights[FINGERTIPS[f]] = cfg.touch_weight;
        }
        IkProblem { targets, weights, beta_locked: true, init }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Constraint {
    /// Joint at the minimum height.
    Height(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub pose: HandPose,
    /// ‖ω∘(J − f)‖ over √21, in mm.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active: Vec<Constraint>,
}

impl IkSolution {
    pub fn joints(&self, tmpl: &HandTemplate) -> [[f64; 3]; JOINTS] {
        let f = fk_flat(&self.pose, tmpl);
        std::array::from_fn(|k| [f[3 * k], f[3 * k + 1], f[3 * k + 2]])
    }
}

fn objective(f: &[f64; JOINTS * 3], p: &IkProblem) -> f64 {
    (0..JOINTS)
        .map(|k| {
            let w2 = p.weights[k] * p.weights[k];
            (0..3).map(|a| (p.targets[k][a] - f[3 * k + a]).powi(2)).sum::<f64>() * w2
        })
        .sum()
}

fn min_height(f: &[f64; JOINTS * 3]) -> f64 {
    (0..JOINTS).map(|k| f[3 * k + 2]).fold(f64::INFINITY, f64::min)
}

/// Clamps into the box and raises the hand until no joint is below `z0`.
fn make_feasible(pose: &mut HandPose, tmpl: &HandTemplate, z0: f64) -> [f64; JOINTS * 3] {
    tmpl.clamp(pose);
    let mut f = fk_flat(pose, tmpl);
    let low = min_height(&f);
    if low < z0 {
        pose.theta[2] += z0 - low;
        f = fk_flat(pose, tmpl);
    }
    f
}

fn active_set(pose: &HandPose, f: &[f64; JOINTS * 3], tmpl: &HandTemplate, z0: f64) -> Vec<Constraint> {
    let mut out = Vec::new();
    for k in 0..JOINTS {
        if f[3 * k + 2] <= z0 + 1e-6 {
            out.push(Constraint::Height(k));
        }
    }
    for i in 0..POSE_DOF {
        if pose.theta[i] <= tmpl.theta_min[i] + 1e-9 {
            out.push(Constraint::Lower(i));
        } else if pose.theta[i] >= tmpl.theta_max[i] - 1e-9 {
            out.push(Constraint::Upper(i));
        }
    }
    out
}

/// Weighted least-squares fit of `fk(θ, β)` to the targets.
pub fn solve(problem: &IkProblem, tmpl: &HandTemplate, cfg: &IkConfig) -> Result<IkSolution> {
    if problem.targets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ik targets".into()));
    }
    if problem.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidInput("ik weights must be positive".into()));
    }
    let z0 = cfg.z0;
    let mut pose = problem.init;
    let mut f = make_feasible(&mut pose, tmpl, z0);
    let beta0 = pose.beta;

    let n = if problem.beta_locked { POSE_DOF } else { JAC_COLS };
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    lower[..POSE_DOF].copy_from_slice(&tmpl.theta_min);
    upper[..POSE_DOF].copy_from_slice(&tmpl.theta_max);
    for i in POSE_DOF..n {
        let b = beta0[i - POSE_DOF];
        lower[i] = (b - cfg.beta_trust).max(-BETA_LIMIT);
        upper[i] = (b + cfg.beta_trust).min(BETA_LIMIT);
    }
    let bounded: Vec<usize> = (0..n).filter(|&i| lower[i].is_finite()).collect();
    let m = JOINTS + 2 * bounded.len();

    let mut cost = objective(&f, problem);
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        let jac = fk_jacobian(&pose, tmpl);
        let a = DMatrix::from_fn(JOINTS * 3, n, |r, c| jac[r * JAC_COLS + c]);
        let w2 = DVector::from_fn(JOINTS * 3, |r, _| problem.weights[r / 3].powi(2));
        let e = DVector::from_fn(JOINTS * 3, |r, _| problem.targets[r / 3][r % 3] - f[r]);
        let aw = DMatrix::from_fn(JOINTS * 3, n, |r, c| a[(r, c)] * w2[r]);
        let h = aw.transpose() * &a;
        let g = aw.transpose() * &e;

        let x: Vec<f64> = (0..n)
            .map(|i| if i < POSE_DOF { pose.theta[i] } else { pose.beta[i - POSE_DOF] })
            .collect();
        let mut c = DMatrix::zeros(m, n);
        let mut d = DVector::zeros(m);
        for k in 0..JOINTS {
            c.row_mut(k).copy_from(&a.row(3 * k + 2));
            d[k] = z0 - f[3 * k + 2];
        }
        for (r, &i) in bounded.iter().enumerate() {
            c[(JOINTS + 2 * r, i)] = 1.0;
            d[JOINTS + 2 * r] = lower[i] - x[i];
            c[(JOINTS + 2 * r + 1, i)] = -1.0;
            d[JOINTS + 2 * r + 1] = x[i] - upper[i];
        }
        // both sides are zero when x sits on a bound; keep the start feasible
        d.iter_mut().for_each(|v| *v = v.min(0.0));

        loop {
            iterations += 1;
            let mut hd = h.clone();
            for i in 0..n {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-6);
            }
            let step = qp::solve(&hd, &g, &c, &d, DVector::zeros(n)).x;
            let mut trial = pose;
            for i in 0..n {
                if i < POSE_DOF {
                    trial.theta[i] += step[i];
                } else {
                    trial.beta[i - POSE_DOF] += step[i];
                }
            }
            for i in POSE_DOF..n {
                let b = &mut trial.beta[i - POSE_DOF];
                *b = b.clamp(lower[i], upper[i]);
            }
            let f_new = make_feasible(&mut trial, tmpl, z0);
            let cost_new = objective(&f_new, problem);
            if cost_new <= cost {
                let moved = (0..JOINTS)
                    .map(|k| (0..3).map(|a| (f_new[3 * k + a] - f[3 * k + a]).powi(2)).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                pose = trial;
                f = f_new;
                cost = cost_new;
                lambda = (lambda / 10.0).max(1e-12);
                converged = moved < cfg.step_tolerance;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // no descent left at any damping: a constrained stationary point
                converged = true;
                break;
            }
            if iterations >= cfg.max_iterations {
                break;
            }
        }
        if converged {
            break;
        }
    }
    Ok(IkSolution {
        residual: cost.sqrt() / (JOINTS as f64).sqrt(),
        iterations,
        converged,
        active: active_set(&pose, &f, tmpl, z0),
        pose,
    })
}

#[derive(Debug, Clone, Default)]
struct HandTrack {
    previous: Option<IkSolution>,
    missing: usize,
}

/// Sequential tracking state for one input stream.
#[derive(Debug, Clone)]
pub struct TrackerSession {
    pub config: IkConfig,
    pub frame: usize,
    /// Shape shared by both hands of the tracked user.
    pub beta: [f64; SHAPE_DOF],
    pub calibration_frames: usize,
    pub beta_locked: bool,
    hands: [HandTrack; HANDS],
}

impl TrackerSession {
    pub fn new(config: IkConfig) -> Self {
        TrackerSession {
            config,
            frame: 0,
            beta: [0.0; SHAPE_DOF],
            calibration_frames: 0,
            beta_locked: false,
            hands: Default::default(),
        }
    }

    /// Warm start of hand `h`, if one is kept.
    pub fn previous(&self, h: Hand) -> Option<&IkSolution> {
        self.hands[h.index()].previous.as_ref()
    }

    /// Fits every present hand, warm-started from its last solution.
    pub fn track_frame(
        &mut self,
        js: &JointSet,
        touching: &BTreeSet<(Hand, usize)>,
        tmpl: &HandTemplate,
    ) -> Result<[Option<IkSolution>; HANDS]> {
        let mut out = [None, None];
        let mut calibrated = false;
        for h in Hand::BOTH {
            let slot = &mut self.hands[h.index()];
            let Some(hj) = js.hand(h) else {
                slot.missing += 1;
                if slot.missing > self.config.grace_frames {
                    slot.previous = None;
                }
                continue;
            };
            slot.missing = 0;
            let tips: Vec<usize> = (0..FINGERS).filter(|f| touching.contains(&(h, *f))).collect();
            let mut init = match &slot.previous {
                Some(s) => s.pose,
                None => neutral_at(h, hj.joints[0]),
            };
            init.beta = self.beta;
            let mut problem = IkProblem::new(hj.joints, init, &tips, &self.config);
            let calibrate = !self.beta_locked && tips.len() == FINGERS;
            problem.beta_locked = !calibrate;
            let sol = solve(&problem, tmpl, &self.config)?;
            if calibrate {
                self.beta = sol.pose.beta;
                calibrated = true;
            }
            slot.previous = Some(sol.clone());
            out[h.index()] = Some(sol);
        }
        if calibrated {
            self.calibration_frames += 1;
            if self.calibration_frames >= self.config.beta_frames {
                self.beta_locked = true;
            }
        }
        self.frame += 1;
        Ok(out)
    }
}

/// Rest pose with the wrist placed at `wrist`.
pub fn neutral_at(hand: Hand, wrist: [f64; 3]) -> HandPose {
    let mut p = HandPose::neutral(hand);
    p.theta[..3].copy_from_slice(&wrist);
    p
}

/// Joint set of fitted hands, confidence 1.
pub fn solutions_to_joints(
    sols: &[Option<IkSolution>; HANDS],
    tmpl: &HandTemplate,
    timestamp_ms: u64,
) -> JointSet {
    let mut js = JointSet::empty(timestamp_ms);
    for (h, s) in sols.iter().enumerate() {
        js.hands[h] = s.as_ref().map(|s| HandJoints::from_joints(s.joints(tmpl)));
    }
    js
}
