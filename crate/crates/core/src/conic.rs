//! A small consensus-ADMM solver for
//!
//! ```text
//! minimize    sum_i w_i ||X_{b_i} - anchor_i||
//! subject to  linear equalities over all blocks
//!             X_b >= shift_b * I  for designated symmetric blocks
//! ```
//!
//! Symmetric blocks are stored as scaled half-vectorizations (off-diagonals
//! times sqrt 2), so Euclidean norms of the stored vector are Frobenius norms
//! of the matrix. Every distance term and every cone constraint owns a copy of
//! its block; blocks touched by neither get a free copy. The x-update is an
//! exact weighted projection onto the affine set, computed once from an SVD.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{mat, vector};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    Symmetric { n: usize },
    Matrix { rows: usize, cols: usize },
    Vector { n: usize },
    Scalar,
}

impl BlockKind {
    pub fn len(self) -> usize {
        match self {
            BlockKind::Symmetric { n } => n * (n + 1) / 2,
            BlockKind::Matrix { rows, cols } => rows * cols,
            BlockKind::Vector { n } => n,
            BlockKind::Scalar => 1,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
}

/// Handle returned when a block is declared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId(pub usize);

/// A concrete value for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockValue {
    Symmetric {
        #[serde(with = "mat")]
        value: DMatrix<f64>,
    },
    Matrix {
        #[serde(with = "mat")]
        value: DMatrix<f64>,
    },
    Vector {
        #[serde(with = "vector")]
        value: DVector<f64>,
    },
    Scalar {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTerm {
    pub block: BlockId,
    #[serde(with = "vector")]
    pub anchor: DVector<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdConstraint {
    pub block: BlockId,
    pub shift: f64,
}

/// Scaled half-vectorization: `[m11, sqrt2 m12, ..., m22, ...]`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(if i == j { m[(i, j)] } else { SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]) });
        }
    }
    DVector::from_vec(out)
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let s = if i == j { v[k] } else { v[k] / SQRT_2 };
            m[(i, j)] = s;
            m[(j, i)] = s;
            k += 1;
        }
    }
    m
}

/// Upper-triangular entries of a square matrix, row-major; one equality row each.
pub fn upper(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Read-only view of a stacked variable vector, decoded block by block.
pub struct Values<'a> {
    blocks: &'a [Block],
    x: &'a DVector<f64>,
}

impl Values<'_> {
    fn slice(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.x.as_slice()[b.offset..b.offset + b.kind.len()]
    }

    /// Symmetric or general matrix block.
    pub fn matrix(&self, id: BlockId) -> DMatrix<f64> {
        match self.blocks[id.0].kind {
            BlockKind::Symmetric { n } => smat(self.slice(id), n),
            BlockKind::Matrix { rows, cols } => DMatrix::from_column_slice(rows, cols, self.slice(id)),
            other => panic!("block {} is {other:?}, not a matrix", self.blocks[id.0].name),
        }
    }

    pub fn vector(&self, id: BlockId) -> DVector<f64> {
        DVector::from_column_slice(self.slice(id))
    }

    pub fn scalar(&self, id: BlockId) -> f64 {
        self.slice(id)[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProblem {
    pub blocks: Vec<Block>,
    pub terms: Vec<DistanceTerm>,
    pub psd: Vec<PsdConstraint>,
    #[serde(with = "mat")]
    pub eq_matrix: DMatrix<f64>,
    #[serde(with = "vector")]
    pub eq_rhs: DVector<f64>,
}

impl ConicProblem {
    pub fn new() -> Self {
        ConicProblem { eq_matrix: DMatrix::zeros(0, 0), eq_rhs: DVector::zeros(0), ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.kind.len())
    }

    pub fn add_block(&mut self, name: &str, kind: BlockKind) -> BlockId {
        let offset = self.dim();
        self.blocks.push(Block { name: name.to_string(), kind, offset });
        // Existing equality rows do not touch the new variables.
        let n = self.dim();
        self.eq_matrix = self.eq_matrix.clone().resize_horizontally(n, 0.0);
        BlockId(self.blocks.len() - 1)
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    /// Internal coordinates of a value for the given block.
    pub fn encode(&self, id: BlockId, value: &BlockValue) -> Result<DVector<f64>> {
        let b = &self.blocks[id.0];
        let v = match (b.kind, value) {
            (BlockKind::Symmetric { n }, BlockValue::Symmetric { value }) if value.shape() == (n, n) => {
                linalg::ensure_symmetric(value, &b.name)?;
                svec(value)
            }
            (BlockKind::Matrix { rows, cols }, BlockValue::Matrix { value }) if value.shape() == (rows, cols) => {
                DVector::from_column_slice(value.as_slice())
            }
            (BlockKind::Vector { n }, BlockValue::Vector { value }) if value.len() == n => value.clone(),
            (BlockKind::Scalar, BlockValue::Scalar { value }) => DVector::from_element(1, *value),
            _ => return Err(Error::Dimension(format!("value does not fit block {} ({:?})", b.name, b.kind))),
        };
        Ok(v)
    }

    /// Writes `value` into the slot of block `id` inside a stacked vector.
    pub fn set(&self, x: &mut DVector<f64>, id: BlockId, value: &BlockValue) -> Result<()> {
        let v = self.encode(id, value)?;
        x.rows_mut(self.blocks[id.0].offset, v.len()).copy_from(&v);
        Ok(())
    }

    pub fn decode(&self, id: BlockId, x: &DVector<f64>) -> BlockValue {
        let vals = Values { blocks: &self.blocks, x };
        match self.blocks[id.0].kind {
            BlockKind::Symmetric { .. } => BlockValue::Symmetric { value: vals.matrix(id) },
            BlockKind::Matrix { .. } => BlockValue::Matrix { value: vals.matrix(id) },
            BlockKind::Vector { .. } => BlockValue::Vector { value: vals.vector(id) },
            BlockKind::Scalar => BlockValue::Scalar { value: vals.scalar(id) },
        }
    }

    /// Adds `weight * ||X_block - anchor||` to the objective.
    pub fn add_distance(&mut self, id: BlockId, anchor: &BlockValue, weight: f64) -> Result<()> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Parameter(format!("distance weight must be positive, got {weight}")));
        }
        let anchor = self.encode(id, anchor)?;
        self.terms.push(DistanceTerm { block: id, anchor, weight });
        Ok(())
    }

    /// Constrains a symmetric block to `X >= shift * I`.
    pub fn add_psd(&mut self, id: BlockId, shift: f64) -> Result<()> {
        if !matches!(self.blocks[id.0].kind, BlockKind::Symmetric { .. }) {
            return Err(Error::Parameter(format!("PSD constraint on non-symmetric block {}", self.blocks[id.0].name)));
        }
        self.psd.push(PsdConstraint { block: id, shift });
        Ok(())
    }

    /// Adds the rows `f(X) = 0` for an affine map `f`, recovered by probing `f`
    /// at zero and at every unit vector.
    pub fn add_equalities<F>(&mut self, f: F) -> Result<usize>
    where
        F: Fn(&Values) -> DVector<f64>,
    {
        let n = self.dim();
        let zero = DVector::zeros(n);
        let base = f(&Values { blocks: &self.blocks, x: &zero });
        let rows = base.len();
        let mut a = DMatrix::zeros(rows, n);
        let mut probe = DVector::zeros(n);
        for j in 0..n {
            probe[j] = 1.0;
            let r = f(&Values { blocks: &self.blocks, x: &probe });
            if r.len() != rows {
                return Err(Error::Dimension("equality map changed its output length".into()));
            }
            a.set_column(j, &(r - &base));
            probe[j] = 0.0;
        }
        let old = self.eq_matrix.nrows();
        self.eq_matrix = self.eq_matrix.clone().resize_vertically(old + rows, 0.0);
        self.eq_matrix.view_mut((old, 0), (rows, n)).copy_from(&a);
        self.eq_rhs = self.eq_rhs.clone().resize_vertically(old + rows, 0.0);
        self.eq_rhs.rows_mut(old, rows).copy_from(&(-base));
        Ok(rows)
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let b = &self.blocks[t.block.0];
                t.weight * (x.rows(b.offset, b.kind.len()) - &t.anchor).norm()
            })
            .sum()
    }

    pub fn equality_residual(&self, x: &DVector<f64>) -> f64 {
        if self.eq_matrix.nrows() == 0 {
            return 0.0;
        }
        (&self.eq_matrix * x - &self.eq_rhs).amax()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.eq_matrix.ncols() != n && self.eq_matrix.nrows() > 0 {
            return Err(Error::Dimension(format!("equality matrix has {} columns, problem has {n} variables", self.eq_matrix.ncols())));
        }
        if self.eq_matrix.nrows() != self.eq_rhs.len() {
            return Err(Error::Dimension("equality rows and right-hand side differ in length".into()));
        }
        for t in &self.terms {
            if t.block.0 >= self.blocks.len() || t.anchor.len() != self.blocks[t.block.0].kind.len() {
                return Err(Error::Dimension("distance term does not match its block".into()));
            }
        }
        if self.psd.iter().any(|c| c.block.0 >= self.blocks.len()) {
            return Err(Error::Dimension("PSD constraint references a missing block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iters: usize,
    pub rho: f64,
    pub relaxation: f64,
    /// Residual balancing of the penalty parameter.
    pub adaptive_rho: bool,
    /// Iterations between infeasibility checks.
    pub infeasibility_window: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            max_iters: 200_000,
            rho: 1.0,
            relaxation: 1.7,
            adaptive_rho: true,
            infeasibility_window: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    InfeasibleDetected,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Largest violation of an equality row.
    pub equality_residual: f64,
    pub values: BTreeMap<String, BlockValue>,
    /// Smallest eigenvalue of every cone-constrained block.
    pub psd_min_eigenvalues: BTreeMap<String, f64>,
    #[serde(with = "vector")]
    pub x: DVector<f64>,
}

impl ConicSolution {
    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self.values.get(name) {
            Some(BlockValue::Symmetric { value }) | Some(BlockValue::Matrix { value }) => Ok(value.clone()),
            _ => Err(Error::Parameter(format!("no matrix block named {name}"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        match self.values.get(name) {
            Some(BlockValue::Vector { value }) => Ok(value.clone()),
            _ => Err(Error::Parameter(format!("no vector block named {name}"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.values.get(name) {
            Some(BlockValue::Scalar { value }) => Ok(*value),
            _ => Err(Error::Parameter(format!("no scalar block named {name}"))),
        }
    }
}

enum Prox {
    Distance { anchor: DVector<f64>, weight: f64 },
    Psd { n: usize, shift: f64 },
    Free,
}

struct Copy {
    offset: usize,
    len: usize,
    prox: Prox,
}

impl Copy {
    fn apply(&self, v: &DVector<f64>, rho: f64) -> DVector<f64> {
        match &self.prox {
            Prox::Distance { anchor, weight } => {
                let delta = v - anchor;
                let norm = delta.norm();
                let t = weight / rho;
                if norm <= t {
                    anchor.clone()
                } else {
                    anchor + delta * (1.0 - t / norm)
                }
            }
            Prox::Psd { n, shift } => {
                let m = linalg::sym_eig_map(&smat(v.as_slice(), *n), |l| l.max(*shift));
                svec(&m)
            }
            Prox::Free => v.clone(),
        }
    }
}

/// Weighted projection onto `{x : A x = b}` in the metric `diag(w)`.
struct AffineProjector {
    w_sqrt: DVector<f64>,
    null_proj: DMatrix<f64>,
    offset: DVector<f64>,
    unconstrained: bool,
}

impl AffineProjector {
    fn new(a: &DMatrix<f64>, b: &DVector<f64>, weights: &DVector<f64>) -> std::result::Result<Self, f64> {
        let n = weights.len();
        let w_sqrt = weights.map(f64::sqrt);
        if a.nrows() == 0 {
            return Ok(AffineProjector { w_sqrt, null_proj: DMatrix::identity(n, n), offset: DVector::zeros(n), unconstrained: true });
        }
        let mut a_t = a.clone();
        for j in 0..n {
            a_t.column_mut(j).scale_mut(1.0 / w_sqrt[j]);
        }
        let pinv = linalg::pinv(&a_t);
        let q = &pinv * b;
        let gap = (&a_t * &q - b).norm();
        if gap > 1e-9 * (1.0 + b.norm()) {
            return Err(gap);
        }
        let null_proj = DMatrix::identity(n, n) - &pinv * &a_t;
        Ok(AffineProjector { w_sqrt, null_proj, offset: q, unconstrained: false })
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.unconstrained {
            return v.clone();
        }
        let xi = v.component_mul(&self.w_sqrt);
        (&self.null_proj * xi + &self.offset).component_div(&self.w_sqrt)
    }
}

pub fn solve(p: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution> {
    solve_from(p, opts, None)
}

/// Like [`solve`], but starts from the projection of `start` instead of the anchors.
pub fn solve_from(p: &ConicProblem, opts: &SolverOptions, start: Option<&DVector<f64>>) -> Result<ConicSolution> {
    p.validate()?;
    if start.is_some_and(|s| s.len() != p.dim()) {
        return Err(Error::Dimension("starting point does not match the problem".into()));
    }
    let n = p.dim();

    let mut copies = Vec::new();
    let mut covered = vec![false; p.blocks.len()];
    for t in &p.terms {
        let b = &p.blocks[t.block.0];
        covered[t.block.0] = true;
        copies.push(Copy { offset: b.offset, len: b.kind.len(), prox: Prox::Distance { anchor: t.anchor.clone(), weight: t.weight } });
    }
    for c in &p.psd {
        let b = &p.blocks[c.block.0];
        let BlockKind::Symmetric { n: dim } = b.kind else { unreachable!("checked in add_psd") };
        covered[c.block.0] = true;
        copies.push(Copy { offset: b.offset, len: b.kind.len(), prox: Prox::Psd { n: dim, shift: c.shift } });
    }
    for (i, b) in p.blocks.iter().enumerate() {
        if !covered[i] {
            copies.push(Copy { offset: b.offset, len: b.kind.len(), prox: Prox::Free });
        }
    }
    let mut counts = DVector::zeros(n);
    for c in &copies {
        counts.rows_mut(c.offset, c.len).add_scalar_mut(1.0);
    }

    let finish = |x: DVector<f64>, status, rp, rd, iters| build_solution(p, x, status, rp, rd, iters);

    let projector = match AffineProjector::new(&p.eq_matrix, &p.eq_rhs, &counts) {
        Ok(proj) => proj,
        Err(gap) => {
            log::info!("equality constraints are inconsistent (gap {gap:e})");
            return Ok(finish(DVector::zeros(n), SolveStatus::InfeasibleDetected, gap, 0.0, 0));
        }
    };

    // Start from the anchors (or the caller's point), projected onto the equalities.
    let start = match start {
        Some(s) => s.clone(),
        None => anchor_average(p),
    };
    let mut x = projector.project(&start);
    let mut ys: Vec<DVector<f64>> = copies.iter().map(|c| x.rows(c.offset, c.len).into_owned()).collect();
    let mut us: Vec<DVector<f64>> = copies.iter().map(|c| DVector::zeros(c.len)).collect();

    let mut rho = opts.rho;
    let alpha = opts.relaxation;
    let mut lambda_mark: Option<DVector<f64>> = None;
    let mut delta_prev: Option<DVector<f64>> = None;
    let (mut rp, mut rd) = (f64::INFINITY, f64::INFINITY);

    for iter in 1..=opts.max_iters {
        let mut v = DVector::zeros(n);
        for ((c, y), u) in copies.iter().zip(&ys).zip(&us) {
            let mut seg = v.rows_mut(c.offset, c.len);
            seg += y - u;
        }
        v.component_div_assign(&counts);
        x = projector.project(&v);

        let (mut rp2, mut rd2) = (0.0, 0.0);
        for ((c, y), u) in copies.iter().zip(ys.iter_mut()).zip(us.iter_mut()) {
            let xs = x.rows(c.offset, c.len);
            let xh = xs * alpha + &*y * (1.0 - alpha);
            let y_new = c.apply(&(&xh + &*u), rho);
            *u += &xh - &y_new;
            rd2 += (&y_new - &*y).norm_squared();
            rp2 += (xs - &y_new).norm_squared();
            *y = y_new;
        }
        rp = rp2.sqrt();
        rd = rho * rd2.sqrt();
        if !rp.is_finite() || !rd.is_finite() {
            return Err(Error::Parameter("conic iteration produced non-finite values".into()));
        }
        if rp <= opts.tol_primal && rd <= opts.tol_dual {
            return Ok(finish(x, SolveStatus::Optimal, rp, rd, iter));
        }

        if opts.infeasibility_window > 0 && iter % opts.infeasibility_window == 0 {
            let lambda = stack(&us) * rho;
            if let Some(mark) = &lambda_mark {
                let delta = &lambda - mark;
                if let Some(prev) = &delta_prev {
                    let dn = delta.norm();
                    if dn > 1e-6 && (&delta - prev).norm() <= 1e-8 * dn {
                        log::info!("dual iterates drift steadily; declaring infeasible after {iter} iterations");
                        return Ok(finish(x, SolveStatus::InfeasibleDetected, rp, rd, iter));
                    }
                }
                delta_prev = Some(delta);
            }
            lambda_mark = Some(lambda);
        }

        if opts.adaptive_rho && iter % 50 == 0 {
            let scale = if rp > 10.0 * rd {
                2.0
            } else if rd > 10.0 * rp {
                0.5
            } else {
                1.0
            };
            if scale != 1.0 && (rho * scale) >= 1e-6 && (rho * scale) <= 1e6 {
                rho *= scale;
                for u in us.iter_mut() {
                    *u /= scale;
                }
                // Scaling rho invalidates the drift baseline.
                lambda_mark = None;
                delta_prev = None;
            }
        }
    }
    log::info!("conic solver hit the iteration cap (primal {rp:e}, dual {rd:e})");
    Ok(finish(x, SolveStatus::MaxIters, rp, rd, opts.max_iters))
}

fn anchor_average(p: &ConicProblem) -> DVector<f64> {
    let n = p.dim();
    let mut start = DVector::zeros(n);
    let mut hits = DVector::<f64>::zeros(n);
    for t in &p.terms {
        let b = &p.blocks[t.block.0];
        let mut seg = start.rows_mut(b.offset, t.anchor.len());
        seg += &t.anchor;
        hits.rows_mut(b.offset, t.anchor.len()).add_scalar_mut(1.0);
    }
    for i in 0..n {
        if hits[i] > 0.0 {
            start[i] /= hits[i];
        }
    }
    start
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

fn build_solution(p: &ConicProblem, x: DVector<f64>, status: SolveStatus, rp: f64, rd: f64, iterations: usize) -> ConicSolution {
    let values = (0..p.blocks.len()).map(|i| (p.blocks[i].name.clone(), p.decode(BlockId(i), &x))).collect();
    let vals = Values { blocks: &p.blocks, x: &x };
    let psd_min_eigenvalues =
        p.psd.iter().map(|c| (p.blocks[c.block.0].name.clone(), linalg::min_eigenvalue(&vals.matrix(c.block)))).collect();
    ConicSolution {
        status,
        objective: p.objective(&x),
        primal_residual: rp,
        dual_residual: rd,
        iterations,
        equality_residual: p.equality_residual(&x),
        values,
        psd_min_eigenvalues,
        x,
    }
}
