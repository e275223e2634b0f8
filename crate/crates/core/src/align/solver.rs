//! Gauss-Newton minimization of the alignment energy over per-node 6-dof
//! twist increments.
//!
//! The depth term is point-to-plane through the full dual-quaternion blend;
//! its Jacobian is exact at the linearization point (increments parameterized
//! as rotate-then-translate twists composed onto the current node
//! transforms). The regularizer pulls neighboring node transforms toward
//! agreement at the shared node position, which keeps each connected
//! component as rigid as the depth term allows.
//!
//! Normal equations are solved with preconditioned conjugate gradient on the
//! block-sparse system (block-diagonal preconditioner).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix6, Quaternion, SMatrix, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::dq::DualQuat;
use crate::model::{
    blend_reference_index, normalized_blend_weights, surfel_neighbors, DeformationGraph, NodeId,
    Surfel, WarpField,
};

use super::{CorrespondencePair, SolverConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("normal equations remained singular after damping retries")]
    SolverDiverged,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Total energy before iterating and after every accepted step.
    pub energies: Vec<f64>,
    /// Accepted Gauss-Newton iterations.
    pub iterations: usize,
    pub converged: bool,
}

/// One point-to-plane term; node references are slots into the problem's
/// node arrays, weights are normalized blend weights frozen for the solve.
struct PairTerm {
    v: Vector3<f64>,
    v_m: Vector3<f64>,
    n_m: Vector3<f64>,
    slots: Vec<u32>,
    weights: Vec<f64>,
}

/// Directed regularizer edge j -> i: residual (T_j - T_i) applied to p_j.
struct EdgeTerm {
    j: u32,
    i: u32,
}

/// Alignment energy frozen at one frame: terms, node layout and lambda.
/// Node positions and blend weights do not change during the solve; the
/// unknowns are the per-node transforms.
pub struct AlignmentProblem {
    node_ids: Vec<NodeId>,
    positions: Vec<Vector3<f64>>,
    pairs: Vec<PairTerm>,
    edges: Vec<EdgeTerm>,
    lambda: f64,
}

/// (w, xyz) split of a quaternion accumulator.
#[derive(Clone, Copy, Default)]
struct Quat4 {
    w: f64,
    v: Vector3<f64>,
}

impl Quat4 {
    fn from_quaternion(q: &Quaternion<f64>) -> Self {
        Self { w: q.w, v: q.imag() }
    }

    fn scaled_add(&mut self, q: &Quat4, s: f64) {
        self.w += q.w * s;
        self.v += q.v * s;
    }
}

/// Pure-axis quaternion product e_i * q for axis i in {0,1,2}.
fn axis_mul(axis: usize, q: &Quat4) -> Quat4 {
    let mut e = Vector3::zeros();
    e[axis] = 1.0;
    Quat4 { w: -q.v[axis], v: q.w * e + e.cross(&q.v) }
}

/// Rigid action of a (not necessarily unit) dual quaternion on a point,
/// with derivatives with respect to the eight components. Column order is
/// (w, x, y, z) for each part.
struct ActDerivs {
    value: Vector3<f64>,
    d_real: SMatrix<f64, 3, 4>,
    d_dual: SMatrix<f64, 3, 4>,
}

fn act_point(real: &Quat4, dual: &Quat4, p: &Vector3<f64>) -> Vector3<f64> {
    let s2 = real.w * real.w + real.v.norm_squared();
    let s = s2.sqrt();
    let (w, u) = (real.w / s, real.v / s);
    let rotated = p + 2.0 * w * u.cross(p) + 2.0 * u.cross(&u.cross(p));
    let g = -dual.w * real.v + real.w * dual.v - dual.v.cross(&real.v);
    rotated + 2.0 * g / s2
}

fn act_with_derivs(real: &Quat4, dual: &Quat4, p: &Vector3<f64>) -> ActDerivs {
    let s2 = real.w * real.w + real.v.norm_squared();
    let s = s2.sqrt();
    let w = real.w / s;
    let u = real.v / s;

    // Rotation part at the unit quaternion (w, u).
    let uxp = u.cross(p);
    let rotated = p + 2.0 * w * uxp + 2.0 * u.cross(&uxp);

    // d(R(q)p)/dq at unit q, columns (w, x, y, z).
    let mut d_rot_unit = SMatrix::<f64, 3, 4>::zeros();
    d_rot_unit.set_column(0, &(2.0 * uxp));
    let du = 2.0 * (-w * p.cross_matrix() + u.dot(p) * nalgebra::Matrix3::identity()
        + u * p.transpose()
        - 2.0 * p * u.transpose());
    d_rot_unit.fixed_view_mut::<3, 3>(0, 1).copy_from(&du);

    // Chain through normalization: d(q/|q|)/dq = (I - qq^T)/|q|.
    let mut qhat = nalgebra::Vector4::zeros();
    qhat[0] = w;
    qhat.fixed_rows_mut::<3>(1).copy_from(&u);
    let proj = (nalgebra::Matrix4::identity() - qhat * qhat.transpose()) / s;
    let d_rot = d_rot_unit * proj;

    // Translation part: 2 vec(dual * conj(real)) / s^2.
    let g = -dual.w * real.v + real.w * dual.v - dual.v.cross(&real.v);
    let trans = 2.0 * g / s2;

    // dg/d(real) columns (w, x, y, z).
    let mut dg_real = SMatrix::<f64, 3, 4>::zeros();
    dg_real.set_column(0, &dual.v);
    dg_real
        .fixed_view_mut::<3, 3>(0, 1)
        .copy_from(&(-dual.w * nalgebra::Matrix3::identity() - dual.v.cross_matrix()));
    // dg/d(dual).
    let mut dg_dual = SMatrix::<f64, 3, 4>::zeros();
    dg_dual.set_column(0, &(-real.v));
    dg_dual
        .fixed_view_mut::<3, 3>(0, 1)
        .copy_from(&(real.w * nalgebra::Matrix3::identity() + real.v.cross_matrix()));

    let mut breal = nalgebra::Vector4::zeros();
    breal[0] = real.w;
    breal.fixed_rows_mut::<3>(1).copy_from(&real.v);
    let d_trans_real = dg_real * (2.0 / s2) - (4.0 / (s2 * s2)) * g * breal.transpose();
    let d_trans_dual = dg_dual * (2.0 / s2);

    ActDerivs {
        value: rotated + trans,
        d_real: d_rot + d_trans_real,
        d_dual: d_trans_dual,
    }
}

/// Derivative rows of (T(xi) * Q) with respect to the twist at xi = 0,
/// contracted against a left row (lr | ld) over the 8 dq components:
/// returns the 1x6 gradient (omega, t).
fn contract_twist(
    left_real: &nalgebra::RowVector4<f64>,
    left_dual: &nalgebra::RowVector4<f64>,
    q: &DualQuat,
) -> Vector6<f64> {
    let qr = Quat4::from_quaternion(&q.real);
    let qd = Quat4::from_quaternion(&q.dual);
    let dot4 = |row: &nalgebra::RowVector4<f64>, q: &Quat4| {
        row[0] * q.w + row[1] * q.v.x + row[2] * q.v.y + row[3] * q.v.z
    };
    let mut g = Vector6::zeros();
    for axis in 0..3 {
        let er = axis_mul(axis, &qr);
        let ed = axis_mul(axis, &qd);
        // omega_axis: (0.5 e x Q_r, 0.5 e x Q_d)
        g[axis] = 0.5 * (dot4(left_real, &er) + dot4(left_dual, &ed));
        // t_axis: (0, 0.5 e x Q_r)
        g[3 + axis] = 0.5 * dot4(left_dual, &er);
    }
    g
}

struct PairEval {
    residual: f64,
    grads: Vec<Vector6<f64>>,
}

struct EdgeEval {
    residual: Vector3<f64>,
    /// 3x6 jacobians for the two incident nodes (j then i).
    jac_j: SMatrix<f64, 3, 6>,
    jac_i: SMatrix<f64, 3, 6>,
}

impl AlignmentProblem {
    /// Freeze the energy terms for one frame. Blend weights come from the
    /// same neighbor rule the warp application uses.
    pub fn new(
        surfels: &[Surfel],
        graph: &DeformationGraph,
        pairs: &[CorrespondencePair],
        lambda: f64,
    ) -> Self {
        let node_ids: Vec<NodeId> = graph.nodes().iter().map(|n| n.id).collect();
        let positions: Vec<Vector3<f64>> = graph.nodes().iter().map(|n| n.position).collect();

        // Neighbor sets and weights per distinct surfel in the pair list.
        let mut cache: HashMap<usize, (Vec<u32>, Vec<f64>)> = HashMap::new();
        let mut terms = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (slots, weights) = cache
                .entry(p.surfel)
                .or_insert_with(|| {
                    let s = &surfels[p.surfel];
                    let ids = surfel_neighbors(s, graph)
                        .expect("pair surfel must have a live support node");
                    let sites: Vec<(Vector3<f64>, f64)> = ids
                        .iter()
                        .map(|id| {
                            let n = graph.node(*id).unwrap();
                            (n.position, n.delta)
                        })
                        .collect();
                    let weights = normalized_blend_weights(&s.position, &sites);
                    let slots = ids
                        .iter()
                        .map(|id| graph.slot_of(*id).unwrap() as u32)
                        .collect();
                    (slots, weights)
                })
                .clone();
            terms.push(PairTerm {
                v: surfels[p.surfel].position,
                v_m: p.measured_point,
                n_m: p.measured_normal,
                slots,
                weights,
            });
        }

        let mut edges = Vec::new();
        for n in graph.nodes() {
            let j = graph.slot_of(n.id).unwrap() as u32;
            for other in graph.neighbors(n.id) {
                let i = graph.slot_of(*other).expect("knn lists must be live") as u32;
                edges.push(EdgeTerm { j, i });
            }
        }

        Self { node_ids, positions, pairs: terms, edges, lambda }
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Directed regularizer edges as (node j, node i) ids.
    pub fn edge_ids(&self) -> Vec<(NodeId, NodeId)> {
        self.edges
            .iter()
            .map(|e| (self.node_ids[e.j as usize], self.node_ids[e.i as usize]))
            .collect()
    }

    /// Blended (sign-aligned, weighted) dual quaternion for one pair term.
    fn pair_blend(&self, term: &PairTerm, transforms: &[DualQuat]) -> (Quat4, Quat4, Vec<f64>) {
        let reference = transforms[term.slots[blend_reference_index(&term.weights)] as usize];
        let mut real = Quat4::default();
        let mut dual = Quat4::default();
        let mut coeffs = Vec::with_capacity(term.slots.len());
        for (&slot, &w) in term.slots.iter().zip(&term.weights) {
            let q = &transforms[slot as usize];
            let sign = if reference.real_dot(q) < 0.0 { -1.0 } else { 1.0 };
            let c = w * sign;
            real.scaled_add(&Quat4::from_quaternion(&q.real), c);
            dual.scaled_add(&Quat4::from_quaternion(&q.dual), c);
            coeffs.push(c);
        }
        (real, dual, coeffs)
    }

    fn eval_pair(&self, term: &PairTerm, transforms: &[DualQuat]) -> PairEval {
        let (real, dual, coeffs) = self.pair_blend(term, transforms);
        let act = act_with_derivs(&real, &dual, &term.v);
        let residual = term.n_m.dot(&(act.value - term.v_m));
        let left_real = term.n_m.transpose() * act.d_real;
        let left_dual = term.n_m.transpose() * act.d_dual;
        let grads = term
            .slots
            .iter()
            .zip(&coeffs)
            .map(|(&slot, &c)| contract_twist(&left_real, &left_dual, &transforms[slot as usize]) * c)
            .collect();
        PairEval { residual, grads }
    }

    fn eval_edge(&self, term: &EdgeTerm, transforms: &[DualQuat]) -> EdgeEval {
        let p = self.positions[term.j as usize];
        let qj = &transforms[term.j as usize];
        let qi = &transforms[term.i as usize];
        let yj = act_point(
            &Quat4::from_quaternion(&qj.real),
            &Quat4::from_quaternion(&qj.dual),
            &p,
        );
        let yi = act_point(
            &Quat4::from_quaternion(&qi.real),
            &Quat4::from_quaternion(&qi.dual),
            &p,
        );
        let mut jac_j = SMatrix::<f64, 3, 6>::zeros();
        jac_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-yj.cross_matrix()));
        jac_j
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&nalgebra::Matrix3::identity());
        let mut jac_i = SMatrix::<f64, 3, 6>::zeros();
        jac_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&yi.cross_matrix());
        jac_i
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-nalgebra::Matrix3::identity()));
        EdgeEval { residual: yj - yi, jac_j, jac_i }
    }

    /// Total energy E_depth + lambda * E_reg at the given transforms.
    pub fn energy(&self, transforms: &[DualQuat]) -> f64 {
        let depth: Vec<f64> = self
            .pairs
            .par_iter()
            .map(|t| {
                let (real, dual, _) = self.pair_blend(t, transforms);
                let v = act_point(&real, &dual, &t.v);
                let r = t.n_m.dot(&(v - t.v_m));
                r * r
            })
            .collect();
        let reg: Vec<f64> = self
            .edges
            .par_iter()
            .map(|e| self.eval_edge(e, transforms).residual.norm_squared())
            .collect();
        depth.iter().sum::<f64>() + self.lambda * reg.iter().sum::<f64>()
    }

    /// Stacked residual vector [depth; sqrt(lambda) * reg] for testing the
    /// Jacobian against finite differences on small problems.
    pub fn residual_vector(&self, transforms: &[DualQuat]) -> DVector<f64> {
        let mut r = DVector::zeros(self.pairs.len() + 3 * self.edges.len());
        for (i, t) in self.pairs.iter().enumerate() {
            let (real, dual, _) = self.pair_blend(t, transforms);
            let v = act_point(&real, &dual, &t.v);
            r[i] = t.n_m.dot(&(v - t.v_m));
        }
        let sqrt_l = self.lambda.sqrt();
        for (e, term) in self.edges.iter().enumerate() {
            let ev = self.eval_edge(term, transforms);
            for a in 0..3 {
                r[self.pairs.len() + 3 * e + a] = sqrt_l * ev.residual[a];
            }
        }
        r
    }

    /// Dense Jacobian of `residual_vector` with respect to the stacked
    /// per-node twists at the linearization point. For small problems only.
    pub fn jacobian_dense(&self, transforms: &[DualQuat]) -> DMatrix<f64> {
        let n = self.node_count();
        let mut jac = DMatrix::zeros(self.pairs.len() + 3 * self.edges.len(), 6 * n);
        for (row, t) in self.pairs.iter().enumerate() {
            let ev = self.eval_pair(t, transforms);
            for (k, &slot) in t.slots.iter().enumerate() {
                for c in 0..6 {
                    jac[(row, 6 * slot as usize + c)] += ev.grads[k][c];
                }
            }
        }
        let sqrt_l = self.lambda.sqrt();
        for (e, term) in self.edges.iter().enumerate() {
            let ev = self.eval_edge(term, transforms);
            let base = self.pairs.len() + 3 * e;
            for a in 0..3 {
                for c in 0..6 {
                    jac[(base + a, 6 * term.j as usize + c)] += sqrt_l * ev.jac_j[(a, c)];
                    jac[(base + a, 6 * term.i as usize + c)] += sqrt_l * ev.jac_i[(a, c)];
                }
            }
        }
        jac
    }

    /// Per-edge regularizer energies (unscaled by lambda).
    pub fn reg_edge_energies(&self, transforms: &[DualQuat]) -> Vec<f64> {
        self.edges
            .iter()
            .map(|e| self.eval_edge(e, transforms).residual.norm_squared())
            .collect()
    }
}

/// Block-sparse symmetric system with per-node 6x6 blocks.
struct BlockSystem {
    n: usize,
    /// Sorted (row, col) -> dense block index.
    pattern: HashMap<(u32, u32), u32>,
    /// Per row: (col, block index), sorted by col.
    rows: Vec<Vec<(u32, u32)>>,
    blocks: Vec<Matrix6<f64>>,
    rhs: Vec<Vector6<f64>>,
}

impl BlockSystem {
    fn new(problem: &AlignmentProblem) -> Self {
        let n = problem.node_count();
        let mut pattern: HashMap<(u32, u32), u32> = HashMap::new();
        let add = |pattern: &mut HashMap<(u32, u32), u32>, a: u32, b: u32| {
            let next = pattern.len() as u32;
            pattern.entry((a, b)).or_insert(next);
        };
        for t in &problem.pairs {
            for &a in &t.slots {
                for &b in &t.slots {
                    add(&mut pattern, a, b);
                }
            }
        }
        for e in &problem.edges {
            for (a, b) in [(e.j, e.j), (e.i, e.i), (e.j, e.i), (e.i, e.j)] {
                add(&mut pattern, a, b);
            }
        }
        for i in 0..n as u32 {
            add(&mut pattern, i, i);
        }
        let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
        for (&(a, b), &idx) in &pattern {
            rows[a as usize].push((b, idx));
        }
        for row in &mut rows {
            row.sort_unstable();
        }
        Self {
            n,
            blocks: vec![Matrix6::zeros(); pattern.len()],
            pattern,
            rows,
            rhs: vec![Vector6::zeros(); n],
        }
    }

    fn clear(&mut self) {
        for b in &mut self.blocks {
            b.fill(0.0);
        }
        for r in &mut self.rhs {
            r.fill(0.0);
        }
    }

    #[inline]
    fn block_mut(&mut self, a: u32, b: u32) -> &mut Matrix6<f64> {
        let idx = self.pattern[&(a, b)];
        &mut self.blocks[idx as usize]
    }

    /// Accumulate J^T J and -J^T r from evaluated terms (deterministic
    /// sequential order).
    fn assemble(&mut self, problem: &AlignmentProblem, pair_evals: &[PairEval], edge_evals: &[EdgeEval]) {
        self.clear();
        for (t, ev) in problem.pairs.iter().zip(pair_evals) {
            for (ka, &a) in t.slots.iter().enumerate() {
                let ga = &ev.grads[ka];
                for (kb, &b) in t.slots.iter().enumerate() {
                    let gb = &ev.grads[kb];
                    *self.block_mut(a, b) += ga * gb.transpose();
                }
                self.rhs[a as usize] -= ga * ev.residual;
            }
        }
        let l = problem.lambda;
        for (term, ev) in problem.edges.iter().zip(edge_evals) {
            let (j, i) = (term.j, term.i);
            *self.block_mut(j, j) += l * ev.jac_j.transpose() * ev.jac_j;
            *self.block_mut(i, i) += l * ev.jac_i.transpose() * ev.jac_i;
            *self.block_mut(j, i) += l * ev.jac_j.transpose() * ev.jac_i;
            *self.block_mut(i, j) += l * ev.jac_i.transpose() * ev.jac_j;
            self.rhs[j as usize] -= l * ev.jac_j.transpose() * ev.residual;
            self.rhs[i as usize] -= l * ev.jac_i.transpose() * ev.residual;
        }
    }

    fn matvec(&self, x: &[Vector6<f64>], mu: f64, out: &mut [Vector6<f64>]) {
        out.par_iter_mut().enumerate().for_each(|(a, acc)| {
            let mut sum = x[a] * mu;
            for &(b, idx) in &self.rows[a] {
                sum += self.blocks[idx as usize] * x[b as usize];
            }
            *acc = sum;
        });
    }

    /// PCG with a block-Jacobi preconditioner. Returns None on numerical
    /// breakdown (singular preconditioner blocks or non-finite values).
    fn solve_pcg(&self, mu: f64, max_iters: usize, tol: f64) -> Option<Vec<Vector6<f64>>> {
        let n = self.n;
        let mut precond = Vec::with_capacity(n);
        for a in 0..n as u32 {
            let idx = self.pattern.get(&(a, a))?;
            let block = self.blocks[*idx as usize] + Matrix6::identity() * mu;
            precond.push(block.try_inverse()?);
        }
        let dot = |x: &[Vector6<f64>], y: &[Vector6<f64>]| -> f64 {
            x.iter().zip(y).map(|(a, b)| a.dot(b)).sum()
        };

        let mut x = vec![Vector6::zeros(); n];
        let mut r = self.rhs.clone();
        let rhs_norm2 = dot(&r, &r);
        if rhs_norm2 == 0.0 {
            return Some(x);
        }
        let mut z: Vec<Vector6<f64>> = r.iter().zip(&precond).map(|(ri, m)| m * ri).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![Vector6::zeros(); n];
        let tol2 = tol * tol * rhs_norm2;
        for _ in 0..max_iters {
            self.matvec(&p, mu, &mut ap);
            let pap = dot(&p, &ap);
            if !pap.is_finite() || pap <= 0.0 {
                return None;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += p[i] * alpha;
                r[i] -= ap[i] * alpha;
            }
            if dot(&r, &r) <= tol2 {
                break;
            }
            for i in 0..n {
                z[i] = precond[i] * r[i];
            }
            let rz_new = dot(&r, &z);
            if !rz_new.is_finite() {
                return None;
            }
            let beta = rz_new / rz;
            for i in 0..n {
                p[i] = z[i] + p[i] * beta;
            }
            rz = rz_new;
        }
        x.iter().all(|v| v.iter().all(|c| c.is_finite())).then_some(x)
    }
}

/// Estimate the frame warp field: per-node twist increments minimizing the
/// linearized energy, converted to dual quaternions and composed after each
/// iteration, until the relative energy decrease drops below tolerance.
pub fn solve_warp(
    surfels: &[Surfel],
    graph: &DeformationGraph,
    pairs: &[CorrespondencePair],
    cfg: &SolverConfig,
) -> Result<(WarpField, SolveReport), SolverError> {
    let n = graph.len();
    if n == 0 {
        return Ok((
            WarpField::identity(graph),
            SolveReport { energies: vec![0.0], iterations: 0, converged: true },
        ));
    }
    let problem = AlignmentProblem::new(surfels, graph, pairs, cfg.lambda);
    let mut transforms = vec![DualQuat::IDENTITY; n];
    let mut mu = cfg.damping;
    let mut energies = vec![problem.energy(&transforms)];
    let mut converged = false;

    let mut system = BlockSystem::new(&problem);
    let pcg_cap = (cfg.pcg_iteration_factor * n).max(8);

    'outer: for _ in 0..cfg.max_iterations {
        let pair_evals: Vec<PairEval> = problem
            .pairs
            .par_iter()
            .map(|t| problem.eval_pair(t, &transforms))
            .collect();
        let edge_evals: Vec<EdgeEval> = problem
            .edges
            .par_iter()
            .map(|e| problem.eval_edge(e, &transforms))
            .collect();
        system.assemble(&problem, &pair_evals, &edge_evals);

        let e_old = *energies.last().unwrap();
        let mut singular_exhausted = true;
        for _attempt in 0..=3 {
            let Some(delta) = system.solve_pcg(mu, pcg_cap, cfg.pcg_tolerance) else {
                mu *= 10.0;
                continue;
            };
            singular_exhausted = false;
            let candidate: Vec<DualQuat> = transforms
                .iter()
                .enumerate()
                .map(|(k, q)| {
                    let d = &delta[k];
                    let omega = Vector3::new(d[0], d[1], d[2]);
                    let t = Vector3::new(d[3], d[4], d[5]);
                    DualQuat::from_twist(omega, t)
                        .mul_dq(q)
                        .normalized()
                        .expect("twist composition keeps a unit real part")
                })
                .collect();
            let e_new = problem.energy(&candidate);
            if e_new.is_finite() && e_new <= e_old * (1.0 + 1e-12) {
                transforms = candidate;
                energies.push(e_new);
                mu = (mu * 0.5).max(cfg.damping);
                let rel = if e_old > 0.0 { (e_old - e_new) / e_old } else { 0.0 };
                if rel < cfg.tolerance {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            mu *= 10.0;
        }
        if singular_exhausted {
            return Err(SolverError::SolverDiverged);
        }
        // Damped steps kept increasing the energy: accept the current state
        // as converged rather than forcing a worse iterate.
        converged = true;
        break;
    }

    let field = WarpField::from_transforms(graph, |id| {
        let slot = problem.node_ids.iter().position(|&n| n == id).unwrap();
        transforms[slot]
    });
    let iterations = energies.len() - 1;
    Ok((field, SolveReport { energies, iterations, converged }))
}
