//! Exact computations over discrete structural causal models.
//!
//! The graph is `E -> Z`, `Y -> Z`, `Y -> X`, `Z -> X`: the label `Y` has a
//! fixed prior, the spurious attribute `Z` has an environment-specific
//! mechanism `P(z | y)`, and the observation `X` has a shared mechanism
//! `P(x | y, z)`. Everything here is computed by enumeration; the tables are
//! small enough that brute force doubles as the oracle for the closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};

/// Identity tolerance for exact table equalities.
pub const EXACT_TOL: f64 = 1e-12;
/// Slack for inequality checks.
pub const INEQ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
    Z,
}

/// Discrete SCM with one `P(z | y)` table per environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmSpec {
    ny: usize,
    nz: usize,
    nx: usize,
    p_y: Vec<f64>,
    /// Per environment, row-major `(ny, nz)`.
    p_z_given_y: Vec<Vec<f64>>,
    /// Row-major `(ny * nz, nx)`, row index `y * nz + z`.
    p_x_given_yz: Vec<f64>,
}

fn check_distribution(what: impl Fn() -> String, row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::invalid(format!("{} has a negative or non-finite entry", what())));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > EXACT_TOL {
        return Err(Error::NotNormalized { what: what(), sum });
    }
    Ok(())
}

impl ScmSpec {
    /// Validates every mechanism row, including rows for `(y, z)` cells
    /// that have zero probability under some environment.
    pub fn new(
        ny: usize,
        nz: usize,
        nx: usize,
        p_y: Vec<f64>,
        p_z_given_y: Vec<Vec<f64>>,
        p_x_given_yz: Vec<f64>,
    ) -> Result<Self> {
        if ny == 0 || nz == 0 || nx == 0 {
            return Err(Error::invalid("support sizes must be positive"));
        }
        if p_y.len() != ny {
            return Err(Error::Shape {
                expected: ny,
                got: p_y.len(),
            });
        }
        check_distribution(|| "P(Y)".into(), &p_y)?;
        if p_z_given_y.is_empty() {
            return Err(Error::invalid("need at least one environment"));
        }
        for (e, table) in p_z_given_y.iter().enumerate() {
            if table.len() != ny * nz {
                return Err(Error::Shape {
                    expected: ny * nz,
                    got: table.len(),
                });
            }
            for (y, row) in table.chunks(nz).enumerate() {
                check_distribution(|| format!("P(Z | Y={y}) in env {e}"), row)?;
            }
        }
        if p_x_given_yz.len() != ny * nz * nx {
            return Err(Error::Shape {
                expected: ny * nz * nx,
                got: p_x_given_yz.len(),
            });
        }
        for (r, row) in p_x_given_yz.chunks(nx).enumerate() {
            check_distribution(|| format!("P(X | Y={}, Z={})", r / nz, r % nz), row)?;
        }
        Ok(Self {
            ny,
            nz,
            nx,
            p_y,
            p_z_given_y,
            p_x_given_yz,
        })
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn n_envs(&self) -> usize {
        self.p_z_given_y.len()
    }

    pub fn p_y(&self) -> &[f64] {
        &self.p_y
    }

    pub fn p_z_given_y(&self, env: usize) -> Result<&[f64]> {
        self.p_z_given_y
            .get(env)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownEnvironment(env))
    }

    pub fn p_x_given_yz(&self, y: usize, z: usize) -> &[f64] {
        let row = (y * self.nz + z) * self.nx;
        &self.p_x_given_yz[row..row + self.nx]
    }

    /// Copy with a subset of environments, in the given order.
    pub fn select_envs(&self, envs: &[usize]) -> Result<ScmSpec> {
        let tables = envs
            .iter()
            .map(|&e| self.p_z_given_y(e).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScmSpec {
            p_z_given_y: tables,
            ..self.clone()
        })
    }

    /// `P_env(z) = sum_y P(z | y) P(y)`.
    pub fn p_z(&self, env: usize) -> Result<Vec<f64>> {
        let table = self.p_z_given_y(env)?;
        let mut pz = vec![0.0; self.nz];
        for y in 0..self.ny {
            for z in 0..self.nz {
                pz[z] += self.p_y[y] * table[y * self.nz + z];
            }
        }
        Ok(pz)
    }
}

/// Dense probability table over an ordered subset of `{X, Y, Z}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    axes: Vec<Var>,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl ProbTable {
    pub fn new(axes: Vec<Var>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if axes.len() != dims.len() {
            return Err(Error::invalid("one dim per axis"));
        }
        let size: usize = dims.iter().product();
        if data.len() != size {
            return Err(Error::Shape {
                expected: size,
                got: data.len(),
            });
        }
        check_distribution(|| format!("table over {axes:?}"), &data)?;
        Ok(Self { axes, dims, data })
    }

    /// One-axis table over `X`.
    pub fn over_x(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![Var::X], vec![n], data)
    }

    pub fn axes(&self) -> &[Var] {
        &self.axes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    fn offset(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Sums out every axis not listed in `keep`; the result follows the
    /// order of `keep`.
    pub fn marginal(&self, keep: &[Var]) -> Result<ProbTable> {
        let positions = keep
            .iter()
            .map(|v| {
                self.axes
                    .iter()
                    .position(|a| a == v)
                    .ok_or_else(|| Error::invalid(format!("axis {v:?} not in table")))
            })
            .collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = positions.iter().map(|&p| self.dims[p]).collect();
        let mut data = vec![0.0; dims.iter().product()];
        let mut index = vec![0usize; self.dims.len()];
        for &value in &self.data {
            let target = positions
                .iter()
                .zip(&dims)
                .fold(0, |acc, (&p, &d)| acc * d + index[p]);
            data[target] += value;
            for k in (0..index.len()).rev() {
                index[k] += 1;
                if index[k] < self.dims[k] {
                    break;
                }
                index[k] = 0;
            }
        }
        Ok(ProbTable {
            axes: keep.to_vec(),
            dims,
            data,
        })
    }
}

fn xyz_table(scm: &ScmSpec, weight: impl Fn(usize, usize) -> f64) -> ProbTable {
    let (nx, ny, nz) = (scm.nx, scm.ny, scm.nz);
    let mut data = vec![0.0; nx * ny * nz];
    for y in 0..ny {
        for z in 0..nz {
            let w = weight(y, z);
            for (x, &px) in scm.p_x_given_yz(y, z).iter().enumerate() {
                data[(x * ny + y) * nz + z] = px * w;
            }
        }
    }
    ProbTable {
        axes: vec![Var::X, Var::Y, Var::Z],
        dims: vec![nx, ny, nz],
        data,
    }
}

/// Observational joint `P(x, y, z) = P(y) P(z | y, env) P(x | y, z)`.
pub fn joint(scm: &ScmSpec, env: usize) -> Result<ProbTable> {
    let table = scm.p_z_given_y(env)?;
    Ok(xyz_table(scm, |y, z| scm.p_y[y] * table[y * scm.nz + z]))
}

/// Balanced distribution `P(x | y, z) P_env(z) P(y)`, computed from the
/// mechanisms so that `(y, z)` cells absent from the joint are still
/// defined. `Y` and `Z` are independent under it.
pub fn balance(scm: &ScmSpec, env: usize) -> Result<ProbTable> {
    let pz = scm.p_z(env)?;
    Ok(xyz_table(scm, |y, z| scm.p_y[y] * pz[z]))
}

/// `sum_y sum_z |P_S(z | y) - P_T(z | y)|` over the `z` values with
/// positive probability in both environments. Zero iff there is no
/// correlation shift.
pub fn correlation_shift_measure(scm: &ScmSpec, source: usize, target: usize) -> Result<f64> {
    let (ps, pt) = (scm.p_z_given_y(source)?, scm.p_z_given_y(target)?);
    let (zs, zt) = (scm.p_z(source)?, scm.p_z(target)?);
    let mut total = 0.0;
    for z in (0..scm.nz).filter(|&z| zs[z] * zt[z] != 0.0) {
        for y in 0..scm.ny {
            let i = y * scm.nz + z;
            total += (ps[i] - pt[i]).abs();
        }
    }
    Ok(total)
}

/// Outcome of the support condition check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assumption1 {
    pub holds: bool,
    /// First `x` where the balanced source marginal exceeds both observed
    /// marginals.
    pub witness: Option<usize>,
}

/// Checks `P_B^S(x) <= max(P^S(x), P^T(x))` for every `x`. This is the
/// form consumed by the divergence comparison between a balanced source
/// and the target; as printed, the condition names the balanced target,
/// which the downstream argument never uses.
pub fn check_assumption1(scm: &ScmSpec, source: usize, target: usize) -> Result<Assumption1> {
    let pb = x_marginal(&balance(scm, source)?);
    let ps = x_marginal(&joint(scm, source)?);
    let pt = x_marginal(&joint(scm, target)?);
    let witness = (0..scm.nx).find(|&x| pb[x] > ps[x].max(pt[x]) + EXACT_TOL);
    Ok(Assumption1 {
        holds: witness.is_none(),
        witness,
    })
}

/// Marginal over `X` of an `(X, Y, Z)` table.
pub fn x_marginal(table: &ProbTable) -> Vec<f64> {
    table
        .marginal(&[Var::X])
        .expect("table has an X axis")
        .data
}

fn same_support(p: &ProbTable, q: &ProbTable) -> Result<()> {
    if p.axes != [Var::X] || q.axes != [Var::X] {
        return Err(Error::invalid("divergences take tables over X only"));
    }
    if p.dims != q.dims {
        return Err(Error::Shape {
            expected: p.data.len(),
            got: q.data.len(),
        });
    }
    Ok(())
}

/// H-divergence for the class of all subsets of the support:
/// `2 (sum_x max(P(x), Q(x)) - 1)`.
pub fn h_divergence_complete(p: &ProbTable, q: &ProbTable) -> Result<f64> {
    same_support(p, q)?;
    Ok(complete_divergence(&p.data, &q.data))
}

pub(crate) fn complete_divergence(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(q).map(|(a, b)| a.max(*b)).sum();
    (2.0 * (s - 1.0)).clamp(0.0, 2.0)
}

/// Finite hypothesis class over an `X` support of size `support`. Each
/// hypothesis is a lookup table `x -> class`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisClass {
    hypotheses: Vec<Vec<usize>>,
    support: usize,
    declared_vc: Option<usize>,
}

impl HypothesisClass {
    pub fn new(support: usize, hypotheses: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = hypotheses.iter().position(|h| h.len() != support) {
            return Err(Error::invalid(format!(
                "hypothesis {bad} is not total on a support of size {support}"
            )));
        }
        Ok(Self {
            hypotheses,
            support,
            declared_vc: None,
        })
    }

    /// Every binary labeling of the support (`2^support` hypotheses).
    pub fn all_binary(support: usize) -> Result<Self> {
        if support > 16 {
            return Err(Error::invalid("complete binary class limited to 16 points"));
        }
        let hs = (0..1usize << support)
            .map(|mask| (0..support).map(|x| (mask >> x) & 1).collect())
            .collect();
        Self::new(support, hs)
    }

    pub fn with_declared_vc(mut self, d: usize) -> Self {
        self.declared_vc = Some(d);
        self
    }

    pub fn declared_vc(&self) -> Option<usize> {
        self.declared_vc
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.hypotheses[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.hypotheses.iter().map(Vec::as_slice)
    }

    /// Support points where hypothesis `i` outputs `positive_class`, as a
    /// bitmask (support must fit in 64 bits).
    fn positive_mask(&self, i: usize, positive_class: usize) -> u64 {
        self.hypotheses[i]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == positive_class)
            .fold(0u64, |m, (x, _)| m | (1 << x))
    }
}

/// `2 max_eta |P(eta = 1) - Q(eta = 1)|` with `eta(x) = [h(x) = positive_class]`.
pub fn h_divergence_finite(
    p: &ProbTable,
    q: &ProbTable,
    class: &HypothesisClass,
    positive_class: usize,
) -> Result<f64> {
    same_support(p, q)?;
    finite_divergence(&p.data, &q.data, class, positive_class)
}

pub(crate) fn finite_divergence(
    p: &[f64],
    q: &[f64],
    class: &HypothesisClass,
    positive_class: usize,
) -> Result<f64> {
    if class.is_empty() {
        return Err(Error::EmptyHypothesisClass);
    }
    if class.support != p.len() {
        return Err(Error::Shape {
            expected: p.len(),
            got: class.support,
        });
    }
    let best = class
        .iter()
        .map(|h| {
            h.iter()
                .zip(p.iter().zip(q))
                .filter(|(&c, _)| c == positive_class)
                .map(|(_, (a, b))| a - b)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max);
    Ok(2.0 * best)
}

fn zero_one_risk(h: &[usize], table: &ProbTable) -> Result<f64> {
    let xy = table.marginal(&[Var::X, Var::Y])?;
    let ny = xy.dims[1];
    if h.len() != xy.dims[0] {
        return Err(Error::Shape {
            expected: xy.dims[0],
            got: h.len(),
        });
    }
    Ok(xy
        .data
        .iter()
        .enumerate()
        .filter(|(i, _)| h[i / ny] != i % ny)
        .map(|(_, p)| p)
        .sum())
}

/// 0-1 risk of `h` under the environment's observational joint.
pub fn risk(h: &[usize], scm: &ScmSpec, env: usize) -> Result<f64> {
    zero_one_risk(h, &joint(scm, env)?)
}

/// 0-1 risk of `h` under the environment's balanced distribution.
pub fn risk_balanced(h: &[usize], scm: &ScmSpec, env: usize) -> Result<f64> {
    zero_one_risk(h, &balance(scm, env)?)
}

/// `sqrt((4 / m) (d ln(2 e m / d) + ln(4 / delta)))`.
pub fn vc_bound_term(d: usize, m: usize, delta: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::invalid("VC dimension must be at least 1"));
    }
    if m < d {
        return Err(Error::invalid(format!("sample size {m} smaller than VC dimension {d}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} not in (0, 1)")));
    }
    let (d, m) = (d as f64, m as f64);
    let inner = d * (2.0 * std::f64::consts::E * m / d).ln() + (4.0 / delta).ln();
    Ok((4.0 / m * inner).sqrt())
}

/// `min_h [R^T(h) + mean_i balanced_risks[h][i]]`.
///
/// `balanced_risks[h]` holds one (empirical or population) balanced risk
/// per training environment.
pub fn lambda_term(
    class: &HypothesisClass,
    scm: &ScmSpec,
    test_env: usize,
    balanced_risks: &[Vec<f64>],
) -> Result<f64> {
    if class.is_empty() {
        return Err(Error::EmptyHypothesisClass);
    }
    let mut best = f64::INFINITY;
    for (i, h) in class.iter().enumerate() {
        let risks = balanced_risks
            .get(i)
            .filter(|r| !r.is_empty())
            .ok_or(Error::MissingHypothesis(i))?;
        let mean = risks.iter().sum::<f64>() / risks.len() as f64;
        best = best.min(risk(h, scm, test_env)? + mean);
    }
    Ok(best)
}

/// Population balanced risks `[h][i]` for each training environment.
pub fn population_balanced_risks(
    class: &HypothesisClass,
    scm: &ScmSpec,
    train_envs: &[usize],
) -> Result<Vec<Vec<f64>>> {
    class
        .iter()
        .map(|h| {
            train_envs
                .iter()
                .map(|&e| risk_balanced(h, scm, e))
                .collect()
        })
        .collect()
}

/// Size of the largest subset of the support shattered by
/// `{x -> [h(x) = positive_class]}`. Brute force up to 12 points; a
/// declared dimension is returned as-is.
pub fn vc_dimension(class: &HypothesisClass, positive_class: usize) -> Result<usize> {
    if let Some(d) = class.declared_vc {
        return Ok(d);
    }
    let n = class.support;
    if n > 12 {
        return Err(Error::invalid(format!(
            "support of {n} points too large for brute-force VC dimension"
        )));
    }
    let masks: Vec<u64> = (0..class.len())
        .map(|i| class.positive_mask(i, positive_class))
        .collect();
    let mut best = 0;
    // Shattering is hereditary, so sizes can be tried in increasing order.
    for size in 1..=n {
        let shattered = (0u64..1 << n)
            .filter(|s| s.count_ones() as usize == size)
            .any(|subset| {
                let mut seen = std::collections::HashSet::new();
                for &m in &masks {
                    seen.insert(m & subset);
                }
                seen.len() == 1 << size
            });
        if !shattered {
            break;
        }
        best = size;
    }
    Ok(best)
}

/// Components of the generalization bound for one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Hypothesis index within the class.
    pub hypothesis: usize,
    /// Target risk `R^T(h)`.
    pub lhs: f64,
    pub mean_empirical_balanced_risk: f64,
    pub vc_term: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub rhs: f64,
    pub m: usize,
    pub delta: f64,
    pub vc_dimension: usize,
    /// False when the support condition fails for some training
    /// environment; the bound is then not applicable.
    pub assumption1_holds: bool,
    pub violated: bool,
}

impl BoundReport {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Cumulative sampler over the `(x, y)` cells of a table.
struct CellSampler {
    cumulative: Vec<f64>,
    ny: usize,
}

impl CellSampler {
    fn new(table: &ProbTable) -> Self {
        let xy = table.marginal(&[Var::X, Var::Y]).expect("table has X and Y");
        let mut acc = 0.0;
        let cumulative = xy
            .data
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            cumulative,
            ny: xy.dims[1],
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        let cell = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1);
        (cell / self.ny, cell % self.ny)
    }
}

/// Bound reports for every hypothesis in the class, sharing one sample of
/// size `m` drawn uniformly over the balanced training environments.
///
/// `epsilon` is `max_i d_H(P^{S_i}, P^T)` over the supplied class and
/// `lambda` uses the empirical balanced risks.
pub fn theorem1_reports(
    class: &HypothesisClass,
    scm: &ScmSpec,
    train_envs: &[usize],
    test_env: usize,
    m: usize,
    delta: f64,
    seed: u64,
) -> Result<Vec<BoundReport>> {
    if class.is_empty() {
        return Err(Error::EmptyHypothesisClass);
    }
    if train_envs.is_empty() {
        return Err(Error::invalid("need at least one training environment"));
    }
    let positive = 1;
    let d = vc_dimension(class, positive)?.max(1);
    let vc_term = vc_bound_term(d, m, delta)?;

    let mut holds = true;
    for &s in train_envs {
        holds &= check_assumption1(scm, s, test_env)?.holds;
    }

    let target = x_marginal(&joint(scm, test_env)?);
    let mut epsilon = 0.0_f64;
    for &s in train_envs {
        let source = x_marginal(&joint(scm, s)?);
        epsilon = epsilon.max(finite_divergence(&source, &target, class, positive)?);
    }

    let samplers: Vec<CellSampler> = train_envs
        .iter()
        .map(|&e| balance(scm, e).map(|t| CellSampler::new(&t)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_envs = train_envs.len();
    // errors[h][i], counts[i]
    let mut errors = vec![vec![0usize; n_envs]; class.len()];
    let mut counts = vec![0usize; n_envs];
    for _ in 0..m {
        let i = rng.random_range(0..n_envs);
        let (x, y) = samplers[i].sample(&mut rng);
        counts[i] += 1;
        for (h, errs) in class.iter().zip(errors.iter_mut()) {
            if h[x] != y {
                errs[i] += 1;
            }
        }
    }
    // An environment that drew no samples contributes zero empirical risk.
    let empirical: Vec<Vec<f64>> = errors
        .iter()
        .map(|errs| {
            errs.iter()
                .zip(&counts)
                .map(|(&e, &c)| if c == 0 { 0.0 } else { e as f64 / c as f64 })
                .collect()
        })
        .collect();
    let lambda = lambda_term(class, scm, test_env, &empirical)?;

    class
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let lhs = risk(h, scm, test_env)?;
            let mean_rb = empirical[i].iter().sum::<f64>() / n_envs as f64;
            let rhs = mean_rb + vc_term + epsilon + lambda;
            Ok(BoundReport {
                hypothesis: i,
                lhs,
                mean_empirical_balanced_risk: mean_rb,
                vc_term,
                epsilon,
                lambda,
                rhs,
                m,
                delta,
                vc_dimension: d,
                assumption1_holds: holds,
                violated: lhs > rhs,
            })
        })
        .collect()
}

/// Bound report for hypothesis `h` of `class`.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_check(
    h: usize,
    class: &HypothesisClass,
    scm: &ScmSpec,
    train_envs: &[usize],
    test_env: usize,
    m: usize,
    delta: f64,
    seed: u64,
) -> Result<BoundReport> {
    if h >= class.len() {
        return Err(Error::MissingHypothesis(h));
    }
    let mut reports = theorem1_reports(class, scm, train_envs, test_env, m, delta, seed)?;
    Ok(reports.swap_remove(h))
}

/// Accuracy of the best classifier of the environment label from `(X, Y)`
/// when environments are mixed with `weights`.
pub fn domain_bayes_accuracy(scm: &ScmSpec, envs: &[usize], weights: &[f64]) -> Result<f64> {
    if envs.len() != weights.len() || envs.is_empty() {
        return Err(Error::invalid("need one weight per environment"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > EXACT_TOL {
        return Err(Error::NotNormalized {
            what: "environment weights".into(),
            sum: total,
        });
    }
    let tables = envs
        .iter()
        .map(|&e| joint(scm, e)?.marginal(&[Var::X, Var::Y]))
        .collect::<Result<Vec<_>>>()?;
    let cells = tables[0].data.len();
    Ok((0..cells)
        .map(|c| {
            tables
                .iter()
                .zip(weights)
                .map(|(t, w)| w * t.data[c])
                .fold(0.0, f64::max)
        })
        .sum())
}

/// Parameters for [`random_scm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomScmParams {
    pub ny: usize,
    pub nz: usize,
    pub nx: usize,
    pub n_envs: usize,
}

fn dirichlet_row<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1) + 1e-300).collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    // Push the rounding residue into the largest entry so rows sum to 1.
    let residue = 1.0 - row.iter().sum::<f64>();
    let big = (0..k)
        .max_by(|&a, &b| row[a].total_cmp(&row[b]))
        .unwrap();
    row[big] += residue;
    row
}

/// SCM with flat-Dirichlet mechanism rows, a shared `P(Y)` and
/// `P(X | Y, Z)`, and one `P(Z | Y)` per environment.
pub fn random_scm(params: RandomScmParams, seed: u64) -> Result<ScmSpec> {
    let RandomScmParams { ny, nz, nx, n_envs } = params;
    for (name, v) in [("ny", ny), ("nz", nz), ("nx", nx)] {
        if !(2..=8).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} not in [2, 8]")));
        }
    }
    if n_envs == 0 {
        return Err(Error::invalid("need at least one environment"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_y = dirichlet_row(&mut rng, ny);
    let p_x: Vec<f64> = (0..ny * nz).flat_map(|_| dirichlet_row(&mut rng, nx)).collect();
    let p_z = (0..n_envs)
        .map(|_| (0..ny).flat_map(|_| dirichlet_row(&mut rng, nz)).collect())
        .collect();
    ScmSpec::new(ny, nz, nx, p_y, p_z, p_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{latent_scm, EnvSpec};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= EXACT_TOL
    }

    #[test]
    fn domain_bayes_examples() {
        let scm = canonical();
        let acc = domain_bayes_accuracy(&scm, &[0, 1], &[0.5, 0.5]).unwrap();
        assert!((acc - 0.55).abs() < 1e-9, "{acc}");
        let same = domain_bayes_accuracy(&scm, &[0, 0], &[0.5, 0.5]).unwrap();
        assert!((same - 0.5).abs() < 1e-12);
        assert!(domain_bayes_accuracy(&scm, &[0, 1], &[0.5, 0.6]).is_err());
    }

    /// Canonical latent model: envs 0, 1, 2 = rho 0.9, 0.8, 0.1.
    fn canonical() -> ScmSpec {
        let specs: Vec<EnvSpec> = [0.9, 0.8, 0.1]
            .iter()
            .map(|&rho| EnvSpec::new(rho, 0.25, 1, 0))
            .collect();
        latent_scm(&specs).unwrap()
    }

    // X = (s, z) encoded s * 2 + z.
    const COLOR: [usize; 4] = [0, 1, 0, 1];
    const SHAPE: [usize; 4] = [0, 0, 1, 1];

    fn canonical_class() -> HypothesisClass {
        HypothesisClass::new(4, vec![COLOR.to_vec(), SHAPE.to_vec(), vec![0; 4], vec![1; 4]])
            .unwrap()
    }

    /// Brute-force oracle: 2 max over all subsets A of |P(A) - Q(A)|.
    fn subset_divergence(p: &[f64], q: &[f64]) -> f64 {
        let n = p.len();
        (0u32..1 << n)
            .map(|mask| {
                (0..n)
                    .filter(|x| mask >> x & 1 == 1)
                    .map(|x| p[x] - q[x])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
            * 2.0
    }

    #[test]
    fn unnormalized_mechanisms_rejected() {
        let err = ScmSpec::new(2, 1, 1, vec![0.5, 0.6], vec![vec![1.0, 1.0]], vec![1.0, 1.0]);
        assert!(matches!(err, Err(Error::NotNormalized { .. })));
        let err = ScmSpec::new(2, 2, 1, vec![0.5, 0.5], vec![vec![1.0, 0.0, 0.5, 0.4]], vec![1.0; 4]);
        assert!(err.is_err());
    }

    #[test]
    fn joint_marginal_over_x() {
        let p = joint(&canonical(), 0).unwrap();
        assert!(close(p.total(), 1.0));
        assert!(close(x_marginal(&p)[1], 0.15));
    }

    #[test]
    fn independent_z_factorizes_and_is_its_own_balance() {
        let scm = ScmSpec::new(
            2,
            2,
            3,
            vec![0.3, 0.7],
            vec![vec![0.4, 0.6, 0.4, 0.6]],
            vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2, 0.3, 0.3, 0.4],
        )
        .unwrap();
        let p = joint(&scm, 0).unwrap();
        let yz = p.marginal(&[Var::Y, Var::Z]).unwrap();
        let y = p.marginal(&[Var::Y]).unwrap();
        let z = p.marginal(&[Var::Z]).unwrap();
        let mut mutual_info = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let pab = yz.get(&[a, b]);
                mutual_info += pab * (pab / (y.get(&[a]) * z.get(&[b]))).ln();
            }
        }
        assert!(mutual_info.abs() < 1e-12);
        let b = balance(&scm, 0).unwrap();
        for (u, v) in p.values().iter().zip(b.values()) {
            assert!(close(*u, *v));
        }
        let h = [0, 1, 1];
        assert!(close(risk(&h, &scm, 0).unwrap(), risk_balanced(&h, &scm, 0).unwrap()));
        assert!(check_assumption1(&scm, 0, 0).unwrap().holds);
    }

    #[test]
    fn deterministic_mechanisms_give_one_hot_joint() {
        let scm = ScmSpec::new(
            2,
            2,
            2,
            vec![1.0, 0.0],
            vec![vec![0.0, 1.0, 1.0, 0.0]],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let p = joint(&scm, 0).unwrap();
        let nonzero: Vec<_> = p.values().iter().filter(|&&v| v > 0.0).collect();
        assert_eq!(nonzero, vec![&1.0]);
        assert_eq!(p.get(&[1, 0, 1]), 1.0);
    }

    #[test]
    fn balanced_canonical_values() {
        let b = balance(&canonical(), 0).unwrap();
        assert!(close(b.marginal(&[Var::Y, Var::Z]).unwrap().get(&[1, 1]), 0.25));
        for px in x_marginal(&b) {
            assert!(close(px, 0.25));
        }
        let p = joint(&canonical(), 0).unwrap();
        assert!(close(p.marginal(&[Var::Y, Var::Z]).unwrap().get(&[1, 1]), 0.45));
    }

    #[test]
    fn correlation_shift_examples() {
        let scm = canonical();
        assert_eq!(correlation_shift_measure(&scm, 0, 0).unwrap(), 0.0);
        assert!(close(correlation_shift_measure(&scm, 0, 2).unwrap(), 3.2));
        assert!(close(correlation_shift_measure(&scm, 0, 1).unwrap(), 0.4));
    }

    #[test]
    fn correlation_shift_skips_unsupported_z() {
        // z = 2 never occurs in env 1, so its mass in env 0 is ignored.
        let scm = ScmSpec::new(
            1,
            3,
            1,
            vec![1.0],
            vec![vec![0.5, 0.3, 0.2], vec![0.5, 0.5, 0.0]],
            vec![1.0; 3],
        )
        .unwrap();
        assert!(close(correlation_shift_measure(&scm, 0, 1).unwrap(), 0.2));
    }

    #[test]
    fn assumption1_examples() {
        let scm = canonical();
        assert_eq!(
            check_assumption1(&scm, 0, 2).unwrap(),
            Assumption1 {
                holds: true,
                witness: None
            }
        );
        assert_eq!(
            check_assumption1(&scm, 0, 0).unwrap(),
            Assumption1 {
                holds: false,
                witness: Some(1)
            }
        );
        assert!(matches!(check_assumption1(&scm, 0, 7), Err(Error::UnknownEnvironment(7))));
    }

    #[test]
    fn complete_divergence_examples() {
        let p = ProbTable::over_x(vec![0.9, 0.1]).unwrap();
        let q = ProbTable::over_x(vec![0.1, 0.9]).unwrap();
        assert!(close(h_divergence_complete(&p, &p).unwrap(), 0.0));
        assert!(close(h_divergence_complete(&p, &q).unwrap(), 1.6));
        assert!(close(subset_divergence(p.values(), q.values()), 1.6));
        let a = ProbTable::over_x(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let b = ProbTable::over_x(vec![0.0, 0.0, 0.3, 0.7]).unwrap();
        assert!(close(h_divergence_complete(&a, &b).unwrap(), 2.0));
        assert!(h_divergence_complete(&p, &a).is_err());
    }

    #[test]
    fn finite_divergence_examples() {
        let p = ProbTable::over_x(vec![0.9, 0.1]).unwrap();
        let q = ProbTable::over_x(vec![0.1, 0.9]).unwrap();
        let constants = HypothesisClass::new(2, vec![vec![0, 0], vec![1, 1]]).unwrap();
        assert!(close(h_divergence_finite(&p, &q, &constants, 1).unwrap(), 0.0));
        let all = HypothesisClass::all_binary(2).unwrap();
        assert!(close(h_divergence_finite(&p, &q, &all, 1).unwrap(), 1.6));
        let first = HypothesisClass::new(2, vec![vec![1, 0]]).unwrap();
        assert!(close(h_divergence_finite(&p, &q, &first, 1).unwrap(), 1.6));
        let empty = HypothesisClass::new(2, vec![]).unwrap();
        assert!(matches!(
            h_divergence_finite(&p, &q, &empty, 1),
            Err(Error::EmptyHypothesisClass)
        ));
    }

    #[test]
    fn risk_examples() {
        let scm = canonical();
        assert!(close(risk(&COLOR, &scm, 0).unwrap(), 0.10));
        for env in 0..3 {
            assert!(close(risk(&SHAPE, &scm, env).unwrap(), 0.25));
            assert!(close(risk_balanced(&SHAPE, &scm, env).unwrap(), 0.25));
            assert!(close(risk(&[1; 4], &scm, env).unwrap(), 0.5));
        }
        assert!(close(risk_balanced(&COLOR, &scm, 0).unwrap(), 0.5));
    }

    #[test]
    fn vc_term_examples() {
        // sqrt(4e-4 * (5 ln(2e * 2000) + ln 40)), evaluated independently.
        assert!((vc_bound_term(5, 10_000, 0.1).unwrap() - 0.141_646_217_958_156_7).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for m in [10, 100, 1_000, 10_000, 100_000] {
            let t = vc_bound_term(3, m, 0.05).unwrap();
            assert!(t < prev);
            prev = t;
        }
        assert!(vc_bound_term(1, 10, 0.999_999).unwrap() > 0.0);
        assert!(vc_bound_term(5, 4, 0.1).is_err());
    }

    #[test]
    fn lambda_examples() {
        let scm = canonical();
        let class = canonical_class();
        let pop = population_balanced_risks(&class, &scm, &[0, 1]).unwrap();
        assert!(close(lambda_term(&class, &scm, 2, &pop).unwrap(), 0.5));

        let single = HypothesisClass::new(4, vec![COLOR.to_vec()]).unwrap();
        let pop = population_balanced_risks(&single, &scm, &[0, 1]).unwrap();
        assert!(close(lambda_term(&single, &scm, 2, &pop).unwrap(), 0.9 + 0.5));

        // y = x on a noiseless model is perfect everywhere.
        let perfect = ScmSpec::new(2, 1, 2, vec![0.5, 0.5], vec![vec![1.0, 1.0]], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let id = HypothesisClass::new(2, vec![vec![0, 1], vec![1, 1]]).unwrap();
        let pop = population_balanced_risks(&id, &perfect, &[0]).unwrap();
        assert!(close(lambda_term(&id, &perfect, 0, &pop).unwrap(), 0.0));

        assert!(matches!(
            lambda_term(&class, &scm, 2, &pop[..1]),
            Err(Error::MissingHypothesis(1))
        ));
    }

    #[test]
    fn vc_dimension_examples() {
        assert_eq!(vc_dimension(&HypothesisClass::all_binary(2).unwrap(), 1).unwrap(), 2);
        let constants = HypothesisClass::new(3, vec![vec![0; 3], vec![1; 3]]).unwrap();
        assert_eq!(vc_dimension(&constants, 1).unwrap(), 1);
        let single = HypothesisClass::new(3, vec![vec![0, 1, 0]]).unwrap();
        assert_eq!(vc_dimension(&single, 1).unwrap(), 0);
        assert_eq!(vc_dimension(&canonical_class(), 1).unwrap(), 2);
        let big = HypothesisClass::new(13, vec![vec![0; 13]]).unwrap();
        assert!(vc_dimension(&big, 1).is_err());
        assert_eq!(vc_dimension(&big.with_declared_vc(4), 1).unwrap(), 4);
    }

    #[test]
    fn theorem_canonical_shape_classifier() {
        let scm = canonical();
        let report = theorem1_check(1, &canonical_class(), &scm, &[0, 1], 2, 10_000, 0.1, 0).unwrap();
        assert!(report.assumption1_holds);
        assert!(close(report.lhs, 0.25));
        assert!(close(report.epsilon, 0.0));
        assert!(!report.violated);
        assert!(report.rhs >= 0.25 + 0.45);
        let sum = report.mean_empirical_balanced_risk + report.vc_term + report.epsilon + report.lambda;
        assert!((report.rhs - sum).abs() <= 1e-12);
    }

    #[test]
    fn theorem_inapplicable_when_condition_fails() {
        let scm = canonical();
        let report = theorem1_check(0, &canonical_class(), &scm, &[0], 0, 100, 0.1, 0).unwrap();
        assert!(!report.assumption1_holds);
    }

    #[test]
    fn theorem_zero_target_risk_never_violates() {
        let perfect = ScmSpec::new(2, 2, 2, vec![0.5, 0.5], vec![vec![0.9, 0.1, 0.1, 0.9], vec![0.2, 0.8, 0.8, 0.2]], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
            .unwrap();
        let class = HypothesisClass::all_binary(2).unwrap();
        for seed in 0..20 {
            let r = theorem1_check(2, &class, &perfect, &[0], 1, 50, 0.1, seed).unwrap();
            assert_eq!(r.lhs, 0.0);
            assert!(!r.violated);
        }
    }

    #[test]
    fn random_scm_is_seeded_and_normalized() {
        let params = RandomScmParams {
            ny: 3,
            nz: 4,
            nx: 5,
            n_envs: 2,
        };
        let a = random_scm(params, 9).unwrap();
        assert_eq!(a, random_scm(params, 9).unwrap());
        assert_ne!(a, random_scm(params, 10).unwrap());
        assert!(close(a.p_y().iter().sum(), 1.0));
        assert!(random_scm(RandomScmParams { ny: 1, ..params }, 0).is_err());
        assert!(random_scm(RandomScmParams { nx: 9, ..params }, 0).is_err());
    }

    #[test]
    fn assumption1_holds_for_some_random_pairs() {
        let params = RandomScmParams {
            ny: 2,
            nz: 2,
            nx: 3,
            n_envs: 2,
        };
        let holds = (0..1000)
            .filter(|&seed| {
                let scm = random_scm(params, seed).unwrap();
                check_assumption1(&scm, 0, 1).unwrap().holds
            })
            .count();
        assert!(holds > 0);
    }

    fn arb_params() -> impl Strategy<Value = RandomScmParams> {
        (2usize..=4, 2usize..=4, 2usize..=8).prop_map(|(ny, nz, nx)| RandomScmParams {
            ny,
            nz,
            nx,
            n_envs: 2,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn balanced_distribution_laws(params in arb_params(), seed in any::<u64>()) {
            let scm = random_scm(params, seed).unwrap();
            let p = joint(&scm, 0).unwrap();
            let b = balance(&scm, 0).unwrap();
            prop_assert!((b.total() - 1.0).abs() <= EXACT_TOL);
            for axis in [Var::Y, Var::Z] {
                let (mp, mb) = (p.marginal(&[axis]).unwrap(), b.marginal(&[axis]).unwrap());
                for (u, v) in mp.values().iter().zip(mb.values()) {
                    prop_assert!((u - v).abs() <= EXACT_TOL);
                }
            }
            let yz = b.marginal(&[Var::Y, Var::Z]).unwrap();
            let y = b.marginal(&[Var::Y]).unwrap();
            let z = b.marginal(&[Var::Z]).unwrap();
            for a in 0..scm.ny() {
                for c in 0..scm.nz() {
                    prop_assert!((yz.get(&[a, c]) - y.get(&[a]) * z.get(&[c])).abs() <= EXACT_TOL);
                }
            }
        }

        #[test]
        fn closed_form_matches_subset_enumeration(params in arb_params(), seed in any::<u64>()) {
            let scm = random_scm(params, seed).unwrap();
            let p = x_marginal(&joint(&scm, 0).unwrap());
            let q = x_marginal(&joint(&scm, 1).unwrap());
            prop_assert!((complete_divergence(&p, &q) - subset_divergence(&p, &q)).abs() <= EXACT_TOL);
        }

        #[test]
        fn finite_never_exceeds_complete(params in arb_params(), seed in any::<u64>(), picks in proptest::collection::vec(any::<u16>(), 1..12)) {
            let scm = random_scm(params, seed).unwrap();
            let nx = scm.nx();
            let class = HypothesisClass::new(
                nx,
                picks.iter().map(|&m| (0..nx).map(|x| (m as usize >> x) & 1).collect()).collect(),
            ).unwrap();
            let p = ProbTable::over_x(x_marginal(&joint(&scm, 0).unwrap())).unwrap();
            let q = ProbTable::over_x(x_marginal(&balance(&scm, 1).unwrap())).unwrap();
            let finite = h_divergence_finite(&p, &q, &class, 1).unwrap();
            prop_assert!(finite <= h_divergence_complete(&p, &q).unwrap() + EXACT_TOL);
        }

        #[test]
        fn lemma1_on_random_pairs(params in arb_params(), seed in any::<u64>()) {
            let scm = random_scm(params, seed).unwrap();
            if check_assumption1(&scm, 0, 1).unwrap().holds {
                let pb = x_marginal(&balance(&scm, 0).unwrap());
                let ps = x_marginal(&joint(&scm, 0).unwrap());
                let pt = x_marginal(&joint(&scm, 1).unwrap());
                prop_assert!(complete_divergence(&pb, &pt) <= complete_divergence(&ps, &pt) + INEQ_TOL);
            }
        }
    }
}
