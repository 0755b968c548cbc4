//! Primal active-set method for small strictly convex QPs:
//! minimize ½ xᵀHx − gᵀx subject to C x ≥ d, from a feasible start.

use nalgebra::{DMatrix, DVector};

pub(crate) struct QpResult {
    pub x: DVector<f64>,
    /// Constraint rows active at the solution.
    #[cfg_attr(not(test), allow(dead_code))]
    pub active: Vec<usize>,
}

pub(crate) fn solve(h: &DMatrix<f64>, g: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>, x0: DVector<f64>) -> QpResult {
    let n = h.nrows();
    let m = c.nrows();
    let mut x = x0;
    let mut work: Vec<usize> = Vec::new();
    for _ in 0..10 * (n + m) + 10 {
        let k = work.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (r, &i) in work.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = c[(i, j)];
                kkt[(j, n + r)] = c[(i, j)];
            }
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(g - h * &x));
        let Some(sol) = kkt.lu().solve(&rhs) else {
            // dependent working set; the current point is feasible and no worse
            break;
        };
        let p = sol.rows(0, n).into_owned();
        let scale = 1.0 + x.amax();
        if p.amax() <= 1e-12 * scale {
            // multipliers of C x ≥ d are the negated KKT ones
            let worst = (0..k)
                .map(|r| (r, -sol[n + r]))
                .filter(|&(_, mu)| mu < -1e-12)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((r, _)) => {
                    work.remove(r);
                    continue;
                }
                None => break,
            }
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in (0..m).filter(|i| !work.contains(i)) {
            let cp = c.row(i).dot(&p.transpose());
            if cp < -1e-14 {
                let slack = c.row(i).dot(&x.transpose()) - d[i];
                let a = (slack / -cp).max(0.0);
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * p;
        if let Some(i) = blocking {
            work.push(i);
        }
    }
    work.sort_unstable();
    QpResult { x, active: work }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum_when_inactive() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_vec(vec![2.0, 4.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let d = DVector::from_vec(vec![-10.0]);
        let r = solve(&h, &g, &c, &d, DVector::zeros(2));
        assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] - 1.0).abs() < 1e-12);
        assert!(r.active.is_empty());
    }

    #[test]
    fn projects_onto_active_halfplane() {
        // min |x - (2, 2)|² s.t. x + y ≤ 2  →  (1, 1)
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![2.0, 2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 0.0]);
        let d = DVector::from_vec(vec![-2.0, -5.0]);
        let r = solve(&h, &g, &c, &d, DVector::zeros(2));
        assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] - 1.0).abs() < 1e-12);
        assert_eq!(r.active, vec![0]);
    }

    #[test]
    fn releases_constraint_with_negative_multiplier() {
        // start on x ≥ 0 with the optimum inside
        let h = DMatrix::identity(1, 1);
        let g = DVector::from_vec(vec![3.0]);
        let c = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let d = DVector::from_vec(vec![0.0, -5.0]);
        let r = solve(&h, &g, &c, &d, DVector::zeros(1));
        assert!((r.x[0] - 3.0).abs() < 1e-12);
        let g = DVector::from_vec(vec![-3.0]);
        let r = solve(&h, &g, &c, &d, DVector::from_vec(vec![1.0]));
        assert!(r.x[0].abs() < 1e-12);
        assert_eq!(r.active, vec![0]);
    }
}
