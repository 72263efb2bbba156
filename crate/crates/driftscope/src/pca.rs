//! Uncentered trajectory PCA via the T x T Gram trick, variance fractions,
//! rolling-window backbones and phase-backbone comparison.
//!
//! Mean centering is deliberately omitted: centering would remove the
//! monotonic drift component and smear it across all principal directions.

use rayon::prelude::*;

use crate::checkpoint::{build_drift_matrix, Checkpoint, DriftMatrix, TrunkSelector};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm};

/// Relative singular-value cutoff below which components are dropped.
const SIGMA_CUTOFF: f64 = 1e-12;
/// Relative sigma gap under which PC1 is flagged unstable.
const DEGENERACY_TOL: f64 = 1e-9;

/// Spectrum of a drift matrix: singular values, kept right singular
/// vectors, variance fractions and the k95/k99 compression indices.
#[derive(Debug, Clone)]
pub struct TrajectorySpectrum {
    /// All T singular values, non-increasing.
    pub sigma: Vec<f64>,
    /// Right singular vectors v_1..v_p (unit, p <= top_k), sign-fixed so
    /// the last drift row has non-negative projection onto each.
    pub vectors: Vec<Vec<f64>>,
    /// Variance fractions rho_k = sigma_k^2 / sum sigma_j^2, length T.
    pub rho: Vec<f64>,
    /// Smallest k with cumulative rho >= 0.95 (1-based).
    pub k95: usize,
    /// Smallest k with cumulative rho >= 0.99 (1-based).
    pub k99: usize,
    /// True when sigma_1 and sigma_2 coincide within 1e-9 relative, making
    /// the PC1 direction ill-determined.
    pub pc1_unstable: bool,
}

impl TrajectorySpectrum {
    pub fn pc1(&self) -> &[f64] {
        &self.vectors[0]
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
/// Returns (eigenvalues, eigenvectors as rows), sorted descending.
/// Deterministic; intended for the small T x T Gram matrices (T <= ~64).
fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let idx = |r: usize, c: usize| r * n + c;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[idx(i, j)] * m[idx(i, j)];
            }
        }
        let scale: f64 = (0..n).map(|i| m[idx(i, i)].abs()).sum::<f64>().max(1e-300);
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[idx(k, p)];
                    let mkq = m[idx(k, q)];
                    m[idx(k, p)] = c * mkp - s * mkq;
                    m[idx(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[idx(p, k)];
                    let mqk = m[idx(q, k)];
                    m[idx(p, k)] = c * mpk - s * mqk;
                    m[idx(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = v[idx(p, k)];
                    let vqk = v[idx(q, k)];
                    v[idx(p, k)] = c * vpk - s * vqk;
                    v[idx(q, k)] = s * vpk + c * vqk;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[idx(j, j)].partial_cmp(&m[idx(i, i)]).unwrap());
    let evals = order.iter().map(|&i| m[idx(i, i)]).collect();
    let evecs = order
        .iter()
        .map(|&i| (0..n).map(|k| v[idx(i, k)]).collect())
        .collect();
    (evals, evecs)
}

/// SVD of the drift matrix through the T x T Gram matrix X X^T: eigenvectors
/// u_k of the Gram matrix give v_k = X^T u_k / sigma_k. Exact for T << D.
pub fn uncentered_svd(x: &DriftMatrix, top_k: usize) -> Result<TrajectorySpectrum> {
    let t = x.t();
    if t < 2 {
        return Err(Error::TooFewCheckpoints { need: 2, got: t });
    }
    let gram: Vec<f64> = (0..t)
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &x.rows;
            (0..t).map(move |j| dot(&rows[i], &rows[j]))
        })
        .collect();
    let total: f64 = (0..t).map(|i| gram[i * t + i]).sum();
    if total <= 0.0 {
        return Err(Error::ZeroDrift);
    }
    let (evals, evecs) = jacobi_eigh(&gram, t);
    let sigma: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let rho: Vec<f64> = evals.iter().map(|&l| l.max(0.0) / total).collect();

    let mut cum = 0.0;
    let mut k95 = t;
    let mut k99 = t;
    for (k, r) in rho.iter().enumerate() {
        cum += r;
        if k95 == t && cum >= 0.95 {
            k95 = k + 1;
        }
        if k99 == t && cum >= 0.99 {
            k99 = k + 1;
        }
    }

    let keep = top_k.min(t);
    let last = &x.rows[t - 1];
    let mut vectors = Vec::new();
    for k in 0..keep {
        if sigma[k] / sigma[0] < SIGMA_CUTOFF {
            break;
        }
        let u = &evecs[k];
        let d = x.d();
        let mut v = vec![0.0f64; d];
        for (row, &uk) in x.rows.iter().zip(u.iter()) {
            for (vi, &ri) in v.iter_mut().zip(row.iter()) {
                *vi += uk * ri;
            }
        }
        let nv = norm(&v);
        v.iter_mut().for_each(|e| *e /= nv);
        // sign convention: non-negative projection of the final drift row
        if dot(last, &v) < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        vectors.push(v);
    }

    let pc1_unstable = sigma.len() > 1 && (sigma[0] - sigma[1]).abs() <= DEGENERACY_TOL * sigma[0];
    Ok(TrajectorySpectrum {
        sigma,
        vectors,
        rho,
        k95,
        k99,
        pc1_unstable,
    })
}

/// rho_k per Eq. of the variance-explained definition, 1-based k.
pub fn variance_fraction(sigma: &[f64], k: usize) -> Result<f64> {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::ZeroDrift);
    }
    Ok(sigma[k - 1] * sigma[k - 1] / total)
}

/// Local PC1 directions over a sliding window of W checkpoints, each window
/// re-anchored at its first checkpoint. `adjacent[i]` is the |cosine|
/// between consecutive window backbones; `global_alignment` is c(w) against
/// a supplied global backbone.
#[derive(Debug, Clone)]
pub struct RollingBackboneSeries {
    pub window: usize,
    pub stride: usize,
    /// Step of each window's center checkpoint.
    pub centers: Vec<u64>,
    /// Step of each window's anchor (first) checkpoint.
    pub anchors: Vec<u64>,
    pub directions: Vec<Vec<f64>>,
    pub adjacent: Vec<f64>,
    pub global_alignment: Option<Vec<f64>>,
}

pub fn rolling_backbones(
    ckpts: &[&Checkpoint],
    sel: &TrunkSelector,
    window: usize,
    stride: usize,
    row_normalize: bool,
    global_backbone: Option<&[f64]>,
) -> Result<RollingBackboneSeries> {
    if window < 3 {
        return Err(Error::InvalidConfig("window width must be >= 3".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    let mut sorted: Vec<&Checkpoint> = ckpts.to_vec();
    sorted.sort_by_key(|c| c.step);
    let n = sorted.len();
    if n < window + 1 {
        return Err(Error::TooFewCheckpoints {
            need: window + 1,
            got: n,
        });
    }
    let mut centers = Vec::new();
    let mut anchors = Vec::new();
    let mut directions = Vec::new();
    let mut start = 0;
    while start + window <= n {
        let slice = &sorted[start..start + window];
        let x = build_drift_matrix(slice, slice[0].step, sel, row_normalize)?;
        let spec = uncentered_svd(&x, 1)?;
        anchors.push(slice[0].step);
        centers.push(slice[window / 2].step);
        directions.push(spec.vectors[0].clone());
        start += stride;
    }
    let adjacent: Vec<f64> = directions
        .windows(2)
        .map(|w| dot(&w[0], &w[1]).abs().min(1.0))
        .collect();
    let global_alignment =
        global_backbone.map(|g| directions.iter().map(|v| dot(v, g).abs().min(1.0)).collect());
    Ok(RollingBackboneSeries {
        window,
        stride,
        centers,
        anchors,
        directions,
        adjacent,
        global_alignment,
    })
}

/// Early/late phase backbones with interval-local anchors, their overlap,
/// and the alignment of each rolling window direction to each phase.
#[derive(Debug, Clone)]
pub struct PhaseBackbones {
    pub v_early: Vec<f64>,
    pub v_late: Vec<f64>,
    pub early_interval: (u64, u64),
    pub late_interval: (u64, u64),
    pub early_anchor: u64,
    pub late_anchor: u64,
    pub overlap: f64,
    /// (center step, A_E, A_L) per rolling window, when a rolling series
    /// was supplied.
    pub alignment: Vec<(u64, f64, f64)>,
}

fn phase_pc1(
    ckpts: &[&Checkpoint],
    sel: &TrunkSelector,
    interval: (u64, u64),
    row_normalize: bool,
) -> Result<(Vec<f64>, u64)> {
    let in_range: Vec<&Checkpoint> = ckpts
        .iter()
        .filter(|c| c.step >= interval.0 && c.step <= interval.1)
        .copied()
        .collect();
    if in_range.len() < 3 {
        return Err(Error::WindowOutOfRange {
            lo: interval.0,
            hi: interval.1,
        });
    }
    let anchor = in_range.iter().map(|c| c.step).min().unwrap();
    let x = build_drift_matrix(&in_range, anchor, sel, row_normalize)?;
    let spec = uncentered_svd(&x, 1)?;
    Ok((spec.vectors[0].clone(), anchor))
}

pub fn phase_backbones(
    ckpts: &[&Checkpoint],
    sel: &TrunkSelector,
    early: (u64, u64),
    late: (u64, u64),
    row_normalize: bool,
    rolling: Option<&RollingBackboneSeries>,
) -> Result<PhaseBackbones> {
    let (v_early, early_anchor) = phase_pc1(ckpts, sel, early, row_normalize)?;
    let (v_late, late_anchor) = phase_pc1(ckpts, sel, late, row_normalize)?;
    let overlap = dot(&v_early, &v_late).abs().min(1.0);
    let alignment = rolling
        .map(|r| {
            r.centers
                .iter()
                .zip(&r.directions)
                .map(|(&c, v)| {
                    (
                        c,
                        dot(v, &v_early).abs().min(1.0),
                        dot(v, &v_late).abs().min(1.0),
                    )
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(PhaseBackbones {
        v_early,
        v_late,
        early_interval: early,
        late_interval: late,
        early_anchor,
        late_anchor,
        overlap,
        alignment,
    })
}
