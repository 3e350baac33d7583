//! In-house LP / strongly-convex QP / MILP kernel.
//!
//! One `ProblemSpec` feeds three solvers sharing a `Solution` contract:
//! a bounded-variable revised simplex for exact basic duals, a primal-dual
//! interior point for smooth QP duals, and best-first branch and bound on
//! LP relaxations for mixed-binary problems. The master/worst-case loop
//! and the differentiable surrogate both consume these duals, so the
//! KKT quality targets here are load-bearing.

pub mod dense;
mod ipm;
mod simplex;

pub use dense::Dense;

use thiserror::Error;

/// Feasibility / complementarity target promised on optimal exits.
pub const FEAS_TOL: f64 = 1e-6;
/// Integrality tolerance for binaries.
pub const INT_TOL: f64 = 1e-6;
/// Absolute optimality gap for branch and bound.
pub const MILP_GAP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimension(String),
    #[error("invalid problem data: {0}")]
    BadData(String),
    #[error("binary variable count {0} exceeds cap {1}")]
    BinaryCap(usize, usize),
}

pub type SolveResult<T> = Result<T, SolveError>;

/// Linear (optionally diagonally-quadratic) problem in the form
///
/// ```text
/// min  c'z + (rho/2)·||z||²  (+ obj_const)
/// s.t. G z <= h
///      A z  = b
///      lo <= z <= up,   z_i in {0,1} for marked binaries
/// ```
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub c: Vec<f64>,
    pub rho: f64,
    pub g: Dense,
    pub h: Vec<f64>,
    pub a_eq: Dense,
    pub b_eq: Vec<f64>,
    pub lo: Vec<f64>,
    pub up: Vec<f64>,
    pub binary: Vec<bool>,
    pub obj_const: f64,
}

impl ProblemSpec {
    /// Fully free continuous problem over `n` variables with no rows.
    pub fn new(n: usize) -> Self {
        ProblemSpec {
            c: vec![0.0; n],
            rho: 0.0,
            g: Dense::with_cols(n),
            h: Vec::new(),
            a_eq: Dense::with_cols(n),
            b_eq: Vec::new(),
            lo: vec![f64::NEG_INFINITY; n],
            up: vec![f64::INFINITY; n],
            binary: vec![false; n],
            obj_const: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> SolveResult<()> {
        let n = self.n();
        if self.g.cols() != n || self.a_eq.cols() != n {
            return Err(SolveError::Dimension(format!(
                "rows have {} / {} columns, objective has {}",
                self.g.cols(),
                self.a_eq.cols(),
                n
            )));
        }
        if self.g.rows() != self.h.len() || self.a_eq.rows() != self.b_eq.len() {
            return Err(SolveError::Dimension("row count vs rhs length".into()));
        }
        if self.lo.len() != n || self.up.len() != n || self.binary.len() != n {
            return Err(SolveError::Dimension("bounds / integrality length".into()));
        }
        if self.rho < 0.0 || !self.rho.is_finite() {
            return Err(SolveError::BadData(format!("rho = {}", self.rho)));
        }
        for i in 0..n {
            if self.lo[i] > self.up[i] + 1e-12 {
                return Err(SolveError::BadData(format!(
                    "variable {} has lo {} > up {}",
                    i, self.lo[i], self.up[i]
                )));
            }
            if !self.c[i].is_finite() {
                return Err(SolveError::BadData(format!("c[{i}] not finite")));
            }
        }
        for (name, m, rhs) in [("G", &self.g, &self.h), ("A", &self.a_eq, &self.b_eq)] {
            for r in 0..m.rows() {
                if !rhs[r].is_finite() || m.row(r).iter().any(|v| !v.is_finite()) {
                    return Err(SolveError::BadData(format!("{name} row {r} not finite")));
                }
            }
        }
        Ok(())
    }

    /// Deterministic plain-text dump in standard form, for debugging.
    pub fn dump_standard_form(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "vars {}", self.n());
        let _ = write!(s, "min");
        for (i, ci) in self.c.iter().enumerate() {
            let _ = write!(s, " {ci:+.12e} z{i}");
        }
        if self.rho > 0.0 {
            let _ = write!(s, " + ({:.12e}/2)||z||^2", self.rho);
        }
        let _ = writeln!(s, " {:+.12e}", self.obj_const);
        for r in 0..self.g.rows() {
            let _ = write!(s, "ineq {r}:");
            for (i, v) in self.g.row(r).iter().enumerate() {
                if *v != 0.0 {
                    let _ = write!(s, " {v:+.12e} z{i}");
                }
            }
            let _ = writeln!(s, " <= {:+.12e}", self.h[r]);
        }
        for r in 0..self.a_eq.rows() {
            let _ = write!(s, "eq {r}:");
            for (i, v) in self.a_eq.row(r).iter().enumerate() {
                if *v != 0.0 {
                    let _ = write!(s, " {v:+.12e} z{i}");
                }
            }
            let _ = writeln!(s, " = {:+.12e}", self.b_eq[r]);
        }
        for i in 0..self.n() {
            let _ = writeln!(
                s,
                "bound z{i}: [{:+.12e}, {:+.12e}]{}",
                self.lo[i],
                self.up[i],
                if self.binary[i] { " binary" } else { "" }
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

/// Primal/dual result shared by all three solvers.
///
/// `mu` are the inequality-row multipliers (>= 0), `nu` the equality-row
/// multipliers, and `reduced` the variable bound multipliers (the sign
/// convention is `c + rho·z + G'mu + A'nu = reduced`).
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub reduced: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub diagnostics: String,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Worst KKT residuals against `spec`; used by tests and audits.
    pub fn kkt_report(&self, spec: &ProblemSpec) -> KktReport {
        let n = spec.n();
        let mut primal: f64 = 0.0;
        let gz = spec.g.matvec(&self.z);
        for r in 0..spec.g.rows() {
            primal = primal.max(gz[r] - spec.h[r]);
        }
        let az = spec.a_eq.matvec(&self.z);
        for r in 0..spec.a_eq.rows() {
            primal = primal.max((az[r] - spec.b_eq[r]).abs());
        }
        for i in 0..n {
            primal = primal.max(spec.lo[i] - self.z[i]).max(self.z[i] - spec.up[i]);
        }
        // Stationarity: c + rho z + G'mu + A'nu - reduced = 0.
        let mut stat = vec![0.0; n];
        for i in 0..n {
            stat[i] = spec.c[i] + spec.rho * self.z[i] - self.reduced[i];
        }
        let gt = spec.g.t_matvec(&self.mu);
        let at = spec.a_eq.t_matvec(&self.nu);
        let mut dual: f64 = 0.0;
        for i in 0..n {
            dual = dual.max((stat[i] + gt[i] + at[i]).abs());
        }
        for &m in &self.mu {
            dual = dual.max(-m);
        }
        let mut compl: f64 = 0.0;
        for r in 0..spec.g.rows() {
            compl = compl.max((self.mu[r] * (spec.h[r] - gz[r])).abs());
        }
        for i in 0..n {
            let r = self.reduced[i];
            if r > 0.0 && spec.lo[i].is_finite() {
                compl = compl.max((r * (self.z[i] - spec.lo[i])).abs());
            }
            if r < 0.0 && spec.up[i].is_finite() {
                compl = compl.max((r * (spec.up[i] - self.z[i])).abs());
            }
        }
        KktReport { primal, dual, complementarity: compl }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

/// Linear program: `rho` must be zero and no binaries marked.
pub fn solve_lp(spec: &ProblemSpec) -> SolveResult<Solution> {
    spec.validate()?;
    if spec.rho != 0.0 {
        return Err(SolveError::BadData("solve_lp requires rho = 0".into()));
    }
    if spec.binary.iter().any(|&b| b) {
        return Err(SolveError::BadData("solve_lp cannot handle binaries".into()));
    }
    Ok(simplex::solve(spec))
}

/// Strongly convex QP: `rho > 0`, no binaries.
pub fn solve_qp(spec: &ProblemSpec) -> SolveResult<Solution> {
    spec.validate()?;
    if spec.rho <= 0.0 {
        return Err(SolveError::BadData("solve_qp requires rho > 0".into()));
    }
    if spec.binary.iter().any(|&b| b) {
        return Err(SolveError::BadData("solve_qp cannot handle binaries".into()));
    }
    Ok(ipm::solve(spec))
}

#[derive(Debug, Clone)]
pub struct MilpOptions {
    /// Hard cap on the number of binary variables accepted.
    pub binary_cap: usize,
    /// Node budget before giving up with the incumbent.
    pub node_cap: usize,
}

impl Default for MilpOptions {
    fn default() -> Self {
        MilpOptions { binary_cap: 2048, node_cap: 200_000 }
    }
}

/// Mixed-binary LP via best-first branch and bound on LP relaxations.
/// Branches on the most fractional binary, ties by lowest index.
pub fn solve_milp(spec: &ProblemSpec, opts: &MilpOptions) -> SolveResult<Solution> {
    spec.validate()?;
    if spec.rho != 0.0 {
        return Err(SolveError::BadData("solve_milp requires rho = 0".into()));
    }
    let nbin = spec.binary.iter().filter(|&&b| b).count();
    if nbin > opts.binary_cap {
        return Err(SolveError::BinaryCap(nbin, opts.binary_cap));
    }
    for i in 0..spec.n() {
        if spec.binary[i] && (spec.lo[i] < -1e-9 || spec.up[i] > 1.0 + 1e-9) {
            return Err(SolveError::BadData(format!(
                "binary variable {i} must have bounds within [0,1]"
            )));
        }
    }
    Ok(branch_and_bound(spec, opts))
}

fn branch_and_bound(spec: &ProblemSpec, opts: &MilpOptions) -> Solution {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    struct Node {
        bound: f64,
        seq: usize,
        fixes: Vec<(usize, f64)>,
    }
    impl PartialEq for Node {
        fn eq(&self, other: &Self) -> bool {
            self.bound == other.bound && self.seq == other.seq
        }
    }
    impl Eq for Node {}
    impl Ord for Node {
        fn cmp(&self, other: &Self) -> Ordering {
            // BinaryHeap is a max-heap: order so the smallest bound pops
            // first, FIFO on ties for determinism.
            other
                .bound
                .partial_cmp(&self.bound)
                .unwrap_or(Ordering::Equal)
                .then(other.seq.cmp(&self.seq))
        }
    }
    impl PartialOrd for Node {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }

    let binaries: Vec<usize> =
        (0..spec.n()).filter(|&i| spec.binary[i]).collect();

    let solve_node = |fixes: &[(usize, f64)]| -> Solution {
        let mut relax = spec.clone();
        relax.binary = vec![false; spec.n()];
        for &(i, v) in fixes {
            relax.lo[i] = v;
            relax.up[i] = v;
        }
        simplex::solve(&relax)
    };

    let most_fractional = |z: &[f64]| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for &i in &binaries {
            let frac = (z[i] - z[i].round()).abs();
            if frac > INT_TOL {
                let score = (z[i] - z[i].floor() - 0.5).abs();
                match best {
                    Some((s, _)) if s <= score => {}
                    _ => best = Some((score, i)),
                }
            }
        }
        best.map(|(_, i)| i)
    };

    let root = solve_node(&[]);
    match root.status {
        SolveStatus::Infeasible => return root,
        SolveStatus::Unbounded => return root,
        _ => {}
    }

    let mut incumbent: Option<(f64, Vec<(usize, f64)>)> = None;
    let mut nodes_used = 1usize;

    // Rounding dive from the root for an early incumbent.
    if most_fractional(&root.z).is_some() {
        let fixes: Vec<(usize, f64)> =
            binaries.iter().map(|&i| (i, root.z[i].round().clamp(0.0, 1.0))).collect();
        let dive = solve_node(&fixes);
        nodes_used += 1;
        if dive.is_optimal() {
            incumbent = Some((dive.objective, fixes));
        }
    } else if root.is_optimal() {
        // Relaxation already integral: solved at the root.
        let mut out = root;
        out.diagnostics = format!("nodes=1 {}", out.diagnostics);
        return out;
    }

    let mut heap = BinaryHeap::new();
    heap.push(Node { bound: root.objective, seq: 0, fixes: Vec::new() });
    let mut seq = 1usize;
    let mut hit_cap = false;

    while let Some(node) = heap.pop() {
        if let Some((best, _)) = &incumbent {
            if node.bound >= best - MILP_GAP {
                continue;
            }
        }
        if nodes_used >= opts.node_cap {
            hit_cap = true;
            break;
        }
        let sol = solve_node(&node.fixes);
        nodes_used += 1;
        if !sol.is_optimal() {
            continue;
        }
        if let Some((best, _)) = &incumbent {
            if sol.objective >= best - MILP_GAP {
                continue;
            }
        }
        match most_fractional(&sol.z) {
            None => {
                incumbent = Some((sol.objective, node.fixes.clone()));
            }
            Some(i) => {
                for v in [0.0, 1.0] {
                    let mut fixes = node.fixes.clone();
                    fixes.push((i, v));
                    heap.push(Node { bound: sol.objective, seq, fixes });
                    seq += 1;
                }
            }
        }
    }

    match incumbent {
        Some((_, fixes)) => {
            // Re-solve with the incumbent fixing for exact duals.
            let mut out = solve_node(&fixes);
            out.diagnostics = format!("nodes={nodes_used} {}", out.diagnostics);
            if hit_cap {
                out.status = SolveStatus::IterationLimit;
            }
            out
        }
        None => {
            let status = if hit_cap { SolveStatus::IterationLimit } else { SolveStatus::Infeasible };
            Solution {
                status,
                z: vec![0.0; spec.n()],
                mu: vec![0.0; spec.g.rows()],
                nu: vec![0.0; spec.a_eq.rows()],
                reduced: vec![0.0; spec.n()],
                objective: f64::INFINITY,
                iterations: nodes_used,
                diagnostics: format!("nodes={nodes_used}"),
            }
        }
    }
}
