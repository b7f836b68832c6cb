//! Integer least-squares ambiguity resolution: LᵀDL factorization, integer
//! decorrelation, depth-first ellipsoid search and ratio-test validation.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::types::{ReceiverState, SatId};

pub const MAX_DIMENSION: usize = 64;
pub const DEFAULT_RATIO_THRESHOLD: f64 = 3.0;
const LOOP_MAX: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct IlsProblem {
    pub a_float: DVector<f64>,
    pub q: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlsSolution {
    /// Best integer vectors, ascending by squared norm.
    pub candidates: Vec<DVector<f64>>,
    /// `‖a − z‖²` in the metric `Q⁻¹`, matching `candidates`.
    pub norms: Vec<f64>,
    /// Second-best over best squared norm.
    pub ratio: f64,
    pub fixed: bool,
    /// Search-tree iterations, for diagnostics.
    pub nodes_visited: usize,
}

impl IlsSolution {
    pub fn best(&self) -> &DVector<f64> {
        &self.candidates[0]
    }
}

/// `Q = Lᵀ·diag(D)·L` with `L` unit lower triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct LtdlFactor {
    pub l: DMatrix<f64>,
    pub d: DVector<f64>,
}

pub fn ltdl(q: &DMatrix<f64>) -> Result<LtdlFactor> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::NotPositiveDefinite);
    }
    let mut a = q.clone();
    let mut l = DMatrix::zeros(n, n);
    let mut d = DVector::zeros(n);
    for i in (0..n).rev() {
        d[i] = a[(i, i)];
        if !(d[i] > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let s = d[i].sqrt();
        for j in 0..=i {
            l[(i, j)] = a[(i, j)] / s;
        }
        for j in 0..i {
            for k in 0..=j {
                a[(j, k)] -= l[(i, k)] * l[(i, j)];
            }
        }
        let lii = l[(i, i)];
        for j in 0..=i {
            l[(i, j)] /= lii;
        }
    }
    Ok(LtdlFactor { l, d })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decorrelation {
    /// Unimodular integer matrix; transformed ambiguities are `Zᵀ·a`.
    pub z: DMatrix<f64>,
    /// `Zᵀ·Q·Z`.
    pub q_z: DMatrix<f64>,
    pub factor: LtdlFactor,
}

fn round(x: f64) -> f64 {
    (x + 0.5).floor()
}

fn gauss(l: &mut DMatrix<f64>, z: &mut DMatrix<f64>, i: usize, j: usize) {
    let mu = round(l[(i, j)]);
    if mu != 0.0 {
        let n = l.nrows();
        for k in i..n {
            l[(k, j)] -= mu * l[(k, i)];
        }
        for k in 0..n {
            z[(k, j)] -= mu * z[(k, i)];
        }
    }
}

fn permute(l: &mut DMatrix<f64>, d: &mut DVector<f64>, z: &mut DMatrix<f64>, j: usize, del: f64) {
    let n = l.nrows();
    let eta = d[j] / del;
    let lam = d[j + 1] * l[(j + 1, j)] / del;
    d[j] = eta * d[j + 1];
    d[j + 1] = del;
    for k in 0..j {
        let a0 = l[(j, k)];
        let a1 = l[(j + 1, k)];
        l[(j, k)] = -l[(j + 1, j)] * a0 + a1;
        l[(j + 1, k)] = eta * a0 + lam * a1;
    }
    l[(j + 1, j)] = lam;
    for k in j + 2..n {
        l.swap((k, j), (k, j + 1));
    }
    z.swap_columns(j, j + 1);
}

/// Integer Gauss transformations and permutations until `D` is ordered and
/// every `|L_ij| ≤ 0.5`.
pub fn decorrelate(q: &DMatrix<f64>) -> Result<Decorrelation> {
    let LtdlFactor { mut l, mut d } = ltdl(q)?;
    let n = q.nrows();
    let mut z = DMatrix::identity(n, n);
    if n >= 2 {
        let mut j = n as isize - 2;
        let mut k = n as isize - 2;
        while j >= 0 {
            let ju = j as usize;
            if j <= k {
                for i in ju + 1..n {
                    gauss(&mut l, &mut z, i, ju);
                }
            }
            let del = d[ju] + l[(ju + 1, ju)] * l[(ju + 1, ju)] * d[ju + 1];
            if del + 1e-6 < d[ju + 1] {
                permute(&mut l, &mut d, &mut z, ju, del);
                k = j;
                j = n as isize - 2;
            } else {
                j -= 1;
            }
        }
        for j in (0..n - 1).rev() {
            for i in j + 1..n {
                gauss(&mut l, &mut z, i, j);
            }
        }
    }
    let q_z = z.transpose() * q * &z;
    let q_z = 0.5 * (&q_z + q_z.transpose());
    Ok(Decorrelation {
        z,
        q_z,
        factor: LtdlFactor { l, d },
    })
}

fn sgn(x: f64) -> f64 {
    if x <= 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Depth-first search for the `m` integer vectors closest to `zs` in the metric
/// defined by `Q = Lᵀ·diag(D)·L`. The radius is unbounded until `m` candidates
/// are held and then shrinks to the worst of them; the first descent is the
/// sequential-rounding point, so the tree is finite.
fn ellipsoid_search(f: &LtdlFactor, zs: &DVector<f64>, m: usize) -> Result<(Vec<DVector<f64>>, Vec<f64>, usize)> {
    let n = zs.len();
    let (l, d) = (&f.l, &f.d);
    let mut s_mat = DMatrix::<f64>::zeros(n, n);
    let mut dist = vec![0.0; n];
    let mut zb = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut cands: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut norms: Vec<f64> = Vec::with_capacity(m);
    let mut imax = 0;
    let mut maxdist = f64::INFINITY;
    let mut k = n - 1;
    zb[k] = zs[k];
    z[k] = round(zb[k]);
    let mut y = zb[k] - z[k];
    step[k] = sgn(y);
    let mut visited = 0;
    loop {
        visited += 1;
        if visited > LOOP_MAX {
            return Err(Error::NoConvergence(LOOP_MAX));
        }
        let newdist = dist[k] + y * y / d[k];
        if newdist < maxdist {
            if k != 0 {
                k -= 1;
                dist[k] = newdist;
                for i in 0..=k {
                    s_mat[(k, i)] = s_mat[(k + 1, i)] + (z[k + 1] - zb[k + 1]) * l[(k + 1, i)];
                }
                zb[k] = zs[k] + s_mat[(k, k)];
                z[k] = round(zb[k]);
                y = zb[k] - z[k];
                step[k] = sgn(y);
            } else {
                if cands.len() < m {
                    if cands.is_empty() || newdist > norms[imax] {
                        imax = cands.len();
                    }
                    cands.push(DVector::from_column_slice(&z));
                    norms.push(newdist);
                    if cands.len() == m {
                        maxdist = norms[imax];
                    }
                } else if newdist < norms[imax] {
                    cands[imax] = DVector::from_column_slice(&z);
                    norms[imax] = newdist;
                    imax = (0..m).fold(0, |a, i| if norms[a] < norms[i] { i } else { a });
                    maxdist = norms[imax];
                }
                z[0] += step[0];
                y = zb[0] - z[0];
                step[0] = -step[0] - sgn(step[0]);
            }
        } else {
            if k == n - 1 {
                break;
            }
            k += 1;
            z[k] += step[k];
            y = zb[k] - z[k];
            step[k] = -step[k] - sgn(step[k]);
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    Ok((
        order.iter().map(|&i| cands[i].clone()).collect(),
        order.iter().map(|&i| norms[i]).collect(),
        visited,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub n_candidates: usize,
    pub ratio_threshold: f64,
    /// Apply the Z-transform before searching.
    pub decorrelate: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            n_candidates: 2,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            decorrelate: true,
        }
    }
}

fn ratio_of(norms: &[f64]) -> f64 {
    match norms {
        [s1, s2, ..] if *s1 > 0.0 => s2 / s1,
        [_, s2, ..] if *s2 > 0.0 => f64::INFINITY,
        _ => 1.0,
    }
}

/// Best `n_candidates` integer vectors for `a_float` with covariance `q`.
pub fn search(a_float: &DVector<f64>, q: &DMatrix<f64>, n_candidates: usize) -> Result<IlsSolution> {
    search_with(
        a_float,
        q,
        &SearchOptions {
            n_candidates,
            ..SearchOptions::default()
        },
    )
}

pub fn search_with(a_float: &DVector<f64>, q: &DMatrix<f64>, opts: &SearchOptions) -> Result<IlsSolution> {
    let n = a_float.len();
    if n > MAX_DIMENSION {
        return Err(Error::DimensionTooLarge(n));
    }
    if n == 0 || q.shape() != (n, n) || opts.n_candidates == 0 {
        return Err(Error::EmptyInput);
    }
    if a_float.iter().any(|v| !v.is_finite()) {
        return Err(Error::FieldOutOfRange {
            field: "a_float",
            value: f64::NAN,
        });
    }
    let (z, factor) = if opts.decorrelate {
        let dec = decorrelate(q)?;
        (dec.z, dec.factor)
    } else {
        (DMatrix::identity(n, n), ltdl(q)?)
    };
    // Fractional parts are searched; the integer offset is added back exactly.
    let offset = a_float.map(round);
    let frac = a_float - &offset;
    let zs = z.transpose() * &frac;
    let (cands, norms, nodes_visited) = ellipsoid_search(&factor, &zs, opts.n_candidates)?;
    let zt_inv = z
        .transpose()
        .try_inverse()
        .ok_or(Error::SingularSystem)?;
    let candidates: Vec<DVector<f64>> = cands
        .iter()
        .map(|c| (&zt_inv * c).map(round) + &offset)
        .collect();
    let ratio = ratio_of(&norms);
    Ok(IlsSolution {
        candidates,
        norms,
        ratio,
        fixed: ratio >= opts.ratio_threshold,
        nodes_visited,
    })
}

/// Fix validation: second-best/best ratio at or above `threshold`.
pub fn ratio_test(sol: &IlsSolution, threshold: f64) -> bool {
    sol.candidates.len() >= 2 && sol.ratio >= threshold
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixOutcome {
    pub state: ReceiverState,
    pub fixed: bool,
    pub ratio: f64,
}

/// Resolves the ambiguities in `state` (ordered as `sats`) with covariance `cov`
/// over (position, ambiguities). On a validated fix the position is conditioned
/// on the integers: `p − Q_pa·Q_aa⁻¹·(a − z)`. Otherwise the float state is
/// returned unchanged.
pub fn fix_solution(state: &ReceiverState, sats: &[SatId], cov: &DMatrix<f64>, threshold: f64) -> Result<FixOutcome> {
    let n = sats.len();
    if cov.shape() != (3 + n, 3 + n) {
        return Err(Error::InvalidConfig("covariance does not match position and ambiguities".into()));
    }
    let float = FixOutcome {
        state: state.clone(),
        fixed: false,
        ratio: 0.0,
    };
    if n == 0 {
        return Ok(float);
    }
    let a = DVector::from_iterator(
        n,
        sats.iter()
            .map(|s| state.dd_ambiguities_cycles.get(s).copied().ok_or(Error::MissingAmbiguity(*s)))
            .collect::<Result<Vec<f64>>>()?,
    );
    let q_aa = cov.view((3, 3), (n, n)).into_owned();
    let q_aa = 0.5 * (&q_aa + q_aa.transpose());
    let sol = search_with(
        &a,
        &q_aa,
        &SearchOptions {
            ratio_threshold: threshold,
            ..SearchOptions::default()
        },
    )?;
    if !ratio_test(&sol, threshold) {
        return Ok(FixOutcome {
            ratio: sol.ratio,
            ..float
        });
    }
    let zi = sol.best();
    let chol = q_aa.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let q_pa = cov.view((0, 3), (3, n)).into_owned();
    let corr = q_pa * chol.solve(&(&a - zi));
    let mut out = state.clone();
    out.pos_m -= Vector3::new(corr[0], corr[1], corr[2]);
    for (s, v) in sats.iter().zip(zi.iter()) {
        out.dd_ambiguities_cycles.insert(*s, *v);
    }
    Ok(FixOutcome {
        state: out,
        fixed: true,
        ratio: sol.ratio,
    })
}
