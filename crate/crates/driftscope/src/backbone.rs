//! Backbone-residual decomposition, power-law regime fits, performance
//! correlations, update/gradient alignment and switching-direction analysis.

use crate::checkpoint::{Checkpoint, DriftMatrix, TrunkSelector};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm};
use crate::pca::TrajectorySpectrum;

/// Signed backbone coordinate a(t), residual norms and backbone fractions
/// of each drift row against a fixed unit backbone direction.
#[derive(Debug, Clone)]
pub struct BackboneDecomposition {
    pub steps: Vec<u64>,
    pub coordinate: Vec<f64>,
    pub residual_norm: Vec<f64>,
    pub backbone_fraction: Vec<f64>,
    pub drift_norm: Vec<f64>,
}

/// Decomposes each raw drift row as a(t) v_b + r(t) with r(t) orthogonal to
/// the backbone. f_b(t) = a^2 / (a^2 + |r|^2).
pub fn decompose(drifts: &DriftMatrix, v_b: &[f64]) -> Result<BackboneDecomposition> {
    check_unit(v_b)?;
    if drifts.d() != v_b.len() {
        return Err(Error::DimensionMismatch {
            expected: drifts.d(),
            got: v_b.len(),
        });
    }
    let mut coordinate = Vec::with_capacity(drifts.t());
    let mut residual_norm = Vec::with_capacity(drifts.t());
    let mut backbone_fraction = Vec::with_capacity(drifts.t());
    let mut drift_norm = Vec::with_capacity(drifts.t());
    for row in &drifts.rows {
        let a = dot(row, v_b);
        let r2 = row
            .iter()
            .zip(v_b)
            .map(|(x, v)| {
                let r = x - a * v;
                r * r
            })
            .sum::<f64>();
        let total = a * a + r2;
        coordinate.push(a);
        residual_norm.push(r2.sqrt());
        backbone_fraction.push(if total > 0.0 { a * a / total } else { 0.0 });
        drift_norm.push(norm(row));
    }
    Ok(BackboneDecomposition {
        steps: drifts.steps.clone(),
        coordinate,
        residual_norm,
        backbone_fraction,
        drift_norm,
    })
}

fn check_unit(v: &[f64]) -> Result<()> {
    let dev = (norm(v) - 1.0).abs();
    if dev > 1e-8 {
        return Err(Error::NotUnit(dev));
    }
    Ok(())
}

/// Least-squares fit of value = C * t^gamma over a step window, in log-log
/// coordinates. Only strictly positive samples participate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PowerLawFit {
    pub window: (u64, u64),
    pub gamma: f64,
    pub coefficient: f64,
    pub r_squared: f64,
    pub samples: usize,
}

pub fn fit_power_law(steps: &[u64], values: &[f64], window: (u64, u64)) -> Result<PowerLawFit> {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(values)
        .filter(|(&t, &v)| t >= window.0 && t <= window.1 && t > 0 && v > 0.0)
        .map(|(&t, &v)| ((t as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::TooFewSamples {
            need: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("log t".into()));
    }
    let gamma = sxy / sxx;
    let intercept = my - gamma * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (gamma * p.0 + intercept);
            e * e
        })
        .sum();
    // exact fits with zero total variance count as R^2 = 1
    let r_squared = if syy == 0.0 {
        if ss_res <= 1e-24 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(PowerLawFit {
        window,
        gamma,
        coefficient: intercept.exp(),
        r_squared,
        samples: pts.len(),
    })
}

/// Signed and absolute cosines of a series of update (or gradient) vectors
/// against a backbone direction, with the 1/sqrt(D) isotropic noise floor.
#[derive(Debug, Clone)]
pub struct AlignmentSeries {
    pub steps: Vec<u64>,
    pub signed_cos: Vec<f64>,
    pub abs_cos: Vec<f64>,
    pub noise_floor: f64,
}

/// Alignment of multi-checkpoint updates u(t) = theta(t) - theta(t-interval)
/// with a backbone direction.
pub fn update_alignment(
    ckpts: &[&Checkpoint],
    sel: &TrunkSelector,
    v_b: &[f64],
    interval: u64,
) -> Result<AlignmentSeries> {
    check_unit(v_b)?;
    let mut sorted: Vec<&Checkpoint> = ckpts.to_vec();
    sorted.sort_by_key(|c| c.step);
    if sorted.len() < 2 {
        return Err(Error::TooFewCheckpoints {
            need: 2,
            got: sorted.len(),
        });
    }
    let flats: Vec<Vec<f64>> = sorted
        .iter()
        .map(|c| crate::checkpoint::flatten_trunk(c, sel))
        .collect::<Result<_>>()?;
    if flats[0].len() != v_b.len() {
        return Err(Error::DimensionMismatch {
            expected: flats[0].len(),
            got: v_b.len(),
        });
    }
    let noise_floor = 1.0 / (v_b.len() as f64).sqrt();
    let mut steps = Vec::new();
    let mut signed_cos = Vec::new();
    let mut abs_cos = Vec::new();
    for i in 1..sorted.len() {
        if sorted[i].step - sorted[i - 1].step != interval {
            return Err(Error::BadSpacing(sorted[i - 1].step, sorted[i].step));
        }
        let u: Vec<f64> = flats[i]
            .iter()
            .zip(&flats[i - 1])
            .map(|(a, b)| a - b)
            .collect();
        let nu = norm(&u);
        if nu == 0.0 {
            return Err(Error::ZeroUpdate(sorted[i].step));
        }
        let c = dot(&u, v_b) / nu;
        steps.push(sorted[i].step);
        signed_cos.push(c);
        abs_cos.push(c.abs());
    }
    Ok(AlignmentSeries {
        steps,
        signed_cos,
        abs_cos,
        noise_floor,
    })
}

/// Per-sample |cosine| of flattened per-batch gradients against a backbone.
pub fn gradient_alignment(grad_samples: &[Vec<f64>], v_b: &[f64]) -> Result<AlignmentSeries> {
    check_unit(v_b)?;
    let mut signed_cos = Vec::with_capacity(grad_samples.len());
    for (i, g) in grad_samples.iter().enumerate() {
        if g.len() != v_b.len() {
            return Err(Error::DimensionMismatch {
                expected: v_b.len(),
                got: g.len(),
            });
        }
        let ng = norm(g);
        if ng == 0.0 {
            return Err(Error::ZeroGradient(i));
        }
        signed_cos.push(dot(g, v_b) / ng);
    }
    let abs_cos = signed_cos.iter().map(|c| c.abs()).collect();
    Ok(AlignmentSeries {
        steps: (0..grad_samples.len() as u64).collect(),
        signed_cos,
        abs_cos,
        noise_floor: 1.0 / (v_b.len() as f64).sqrt(),
    })
}

/// Unit displacement between a probe-accuracy peak and an adjacent trough,
/// decomposed against the backbone and the leading residual PCs.
#[derive(Debug, Clone)]
pub struct SwitchAnalysis {
    pub peak_step: u64,
    pub trough_step: u64,
    pub switch_direction: Vec<f64>,
    pub backbone_overlap: f64,
    /// Renormalized transverse component; None when the displacement is
    /// (numerically) parallel to the backbone.
    pub transverse: Option<Vec<f64>>,
    /// Energy fraction of the transverse direction captured by PCs 2..=6
    /// (or as many as the spectrum provides).
    pub residual_capture: f64,
    /// Number of PCs actually used for the capture sum (2..=used).
    pub capture_components: usize,
}

pub fn switch_direction(
    peak: &Checkpoint,
    trough: &Checkpoint,
    sel: &TrunkSelector,
    v_b: &[f64],
    spectrum: &TrajectorySpectrum,
) -> Result<SwitchAnalysis> {
    check_unit(v_b)?;
    let fp = crate::checkpoint::flatten_trunk(peak, sel)?;
    let ft = crate::checkpoint::flatten_trunk(trough, sel)?;
    if fp.len() != v_b.len() {
        return Err(Error::DimensionMismatch {
            expected: fp.len(),
            got: v_b.len(),
        });
    }
    let mut v_sw: Vec<f64> = fp.iter().zip(&ft).map(|(a, b)| a - b).collect();
    let n = norm(&v_sw);
    if n == 0.0 {
        return Err(Error::ZeroDisplacement);
    }
    v_sw.iter_mut().for_each(|x| *x /= n);
    let proj = dot(&v_sw, v_b);
    let backbone_overlap = proj.abs().min(1.0);
    let mut trans: Vec<f64> = v_sw.iter().zip(v_b).map(|(s, b)| s - proj * b).collect();
    let nt = norm(&trans);
    let (transverse, residual_capture, capture_components) = if nt < 1e-12 {
        (None, 0.0, 0)
    } else {
        trans.iter_mut().for_each(|x| *x /= nt);
        let hi = spectrum.vectors.len().min(6);
        let mut e = 0.0;
        for v_k in spectrum.vectors.iter().take(hi).skip(1) {
            let c = dot(&trans, v_k);
            e += c * c;
        }
        (Some(trans), e.min(1.0), hi.saturating_sub(1))
    };
    Ok(SwitchAnalysis {
        peak_step: peak.step,
        trough_step: trough.step,
        switch_direction: v_sw,
        backbone_overlap,
        transverse,
        residual_capture,
        capture_components,
    })
}

/// Pairwise |cosines| between switch directions of different events.
pub fn pairwise_cosines(dirs: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            out.push((i, j, dot(&dirs[i], &dirs[j])));
        }
    }
    out
}

/// Standard Pearson correlation in f64; errors on fewer than 3 samples or
/// zero variance in either series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::TooFewSamples {
            need: 3,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x series".into()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y series".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Local extrema of an evaluation series: an extremum must differ from every
/// neighbor within +-radius evaluations by at least `prominence`.
/// Returns (peak indices, trough indices).
pub fn find_extrema(
    values: &[f64],
    radius: usize,
    prominence: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut peaks = Vec::new();
    let mut troughs = Vec::new();
    for i in 0..values.len() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(values.len());
        let mut is_peak = true;
        let mut is_trough = true;
        let mut max_gap_up = 0.0f64;
        let mut max_gap_down = 0.0f64;
        for j in lo..hi {
            if j == i {
                continue;
            }
            if values[j] >= values[i] {
                is_peak = false;
            }
            if values[j] <= values[i] {
                is_trough = false;
            }
            max_gap_up = max_gap_up.max(values[i] - values[j]);
            max_gap_down = max_gap_down.max(values[j] - values[i]);
        }
        if is_peak && max_gap_up >= prominence {
            peaks.push(i);
        }
        if is_trough && max_gap_down >= prominence {
            troughs.push(i);
        }
    }
    (peaks, troughs)
}
