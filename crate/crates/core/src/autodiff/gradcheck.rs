//! Central finite-difference gradient checking.
//!
//! The function under test builds a scalar on a fresh [`Graph`] from a
//! [`ParamStore`]; every stored tensor (weights and any inputs registered
//! in the store) is perturbed entry by entry and compared with the
//! analytic adjoint.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_abs_fd: f64,
    /// Entries with a kink or max tie within `eps`, judged at `eps / 10`.
    pub near_ties: usize,
}

/// Tensors whose gradients are tiny compared with the largest gradient in
/// the check are judged against this fraction of that largest gradient, so
/// exactly-zero true gradients (for example key biases under softmax shift
/// invariance) are not compared against pure finite-difference roundoff.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Disagreement above which an entry is re-measured with a ten times
/// smaller step. A smooth entry agrees at both steps; one whose step
/// crosses a kink or max tie only agrees at the smaller one.
const TIE_SUSPECT: f64 = 1e-6;

impl GroupCheck {
    /// `max |analytic − fd| / max(max |fd|, floor)` over the checked entries.
    pub fn rel_err(&self, floor: f64) -> f64 {
        self.max_abs_err / self.max_abs_fd.max(floor).max(1e-12)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    /// `SCALE_FLOOR` times the largest finite-difference gradient magnitude.
    pub fn floor(&self) -> f64 {
        SCALE_FLOOR * self.groups.iter().map(|g| g.max_abs_fd).fold(0.0, f64::max)
    }

    pub fn max_rel_err(&self) -> f64 {
        let floor = self.floor();
        self.groups.iter().map(|g| g.rel_err(floor)).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        let floor = self.floor();
        self.groups.iter().max_by(|a, b| a.rel_err(floor).total_cmp(&b.rel_err(floor)))
    }

    pub fn near_ties(&self) -> usize {
        self.groups.iter().map(|g| g.near_ties).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Checks every tensor in `store`, visiting at most `max_per_group`
/// evenly spaced entries per tensor when given.
pub fn check_gradients<F>(store: &ParamStore, eps: f64, max_per_group: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut groups = Vec::new();
    for (name, tensor) in store.iter() {
        let n = tensor.len();
        let picks: Vec<usize> = match max_per_group {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let zero = vec![0.0; n];
        let a = analytic.get(name).unwrap_or(&zero);
        let mut check = GroupCheck { name: name.clone(), checked: picks.len(), max_abs_err: 0.0, max_abs_fd: 0.0, near_ties: 0 };
        for &i in &picks {
            let mut central = |h: f64| -> Result<f64> {
                let orig = tensor.data()[i];
                work.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let up = eval(&work)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let down = eval(&work)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let mut fd = central(eps)?;
            if (a[i] - fd).abs() > TIE_SUSPECT * fd.abs().max(1.0) {
                let fine = central(eps / 10.0)?;
                if (a[i] - fine).abs() < (a[i] - fd).abs() / 10.0 {
                    check.near_ties += 1;
                    fd = fine;
                }
            }
            check.max_abs_err = check.max_abs_err.max((a[i] - fd).abs());
            check.max_abs_fd = check.max_abs_fd.max(fd.abs());
        }
        groups.push(check);
    }
    Ok(GradCheckReport { groups })
}
