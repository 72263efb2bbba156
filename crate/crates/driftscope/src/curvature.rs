//! Matrix-free empirical-Fisher curvature probes: Rayleigh quotients along
//! chosen directions and anisotropy against random orthogonal directions.
//!
//! The quotient is the empirical gradient second moment q(v) = |G v|^2 / M,
//! computed without materializing any D x D matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{dot, gaussian, norm};

/// Per-batch trunk-flattened gradients, one row per batch.
#[derive(Debug, Clone)]
pub struct GradientMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl GradientMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidConfig("gradient matrix needs M >= 1".into()));
        }
        let d = rows[0].len();
        for r in &rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    step: 0,
                });
            }
        }
        Ok(GradientMatrix { rows })
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows[0].len()
    }
}

/// q(v) = (1/M) sum_i <g_i, v>^2 for unit v.
pub fn rayleigh(g: &GradientMatrix, v: &[f64]) -> Result<f64> {
    if v.len() != g.d() {
        return Err(Error::DimensionMismatch {
            expected: g.d(),
            got: v.len(),
        });
    }
    let dev = (norm(v) - 1.0).abs();
    if dev > 1e-8 {
        return Err(Error::NotUnit(dev));
    }
    let q = g
        .rows
        .iter()
        .map(|gi| {
            let p = dot(gi, v);
            p * p
        })
        .sum::<f64>()
        / g.m() as f64;
    Ok(q)
}

/// Rayleigh quotient along a labeled direction together with K random
/// orthogonal reference quotients and the anisotropy ratio.
#[derive(Debug, Clone)]
pub struct RayleighResult {
    pub label: String,
    pub quotient: f64,
    pub random_quotients: Vec<f64>,
    pub anisotropy: f64,
    /// Set when the mean random quotient is below 1e-15 and the ratio is
    /// numerically meaningless.
    pub degenerate_divisor: bool,
}

const GS_MAX_RETRIES: usize = 100;

/// Draws K Gaussian directions, Gram-Schmidt-orthogonalizes each against
/// v_b and previously accepted directions, and compares q(v_b) to the mean
/// random quotient. Deterministic given the seed.
pub fn anisotropy(
    g: &GradientMatrix,
    v_b: &[f64],
    k: usize,
    seed: u64,
    label: &str,
) -> Result<RayleighResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    if k >= g.d() {
        return Err(Error::InvalidConfig(format!(
            "K = {k} must be smaller than the dimension {}",
            g.d()
        )));
    }
    let quotient = rayleigh(g, v_b)?;
    let d = g.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(k);
    while accepted.len() < k {
        let mut ok = false;
        for _retry in 0..GS_MAX_RETRIES {
            let mut w: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let p = dot(&w, v_b);
            w.iter_mut().zip(v_b).for_each(|(x, b)| *x -= p * b);
            for a in &accepted {
                let p = dot(&w, a);
                w.iter_mut().zip(a).for_each(|(x, b)| *x -= p * b);
            }
            let n = norm(&w);
            if n > 1e-10 * (d as f64).sqrt() {
                w.iter_mut().for_each(|x| *x /= n);
                accepted.push(w);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::GramSchmidtBreakdown(GS_MAX_RETRIES));
        }
    }
    let random_quotients: Vec<f64> = accepted
        .iter()
        .map(|w| rayleigh(g, w))
        .collect::<Result<_>>()?;
    let mean_rand = random_quotients.iter().sum::<f64>() / k as f64;
    let degenerate_divisor = mean_rand < 1e-15;
    let anisotropy = if degenerate_divisor {
        f64::INFINITY
    } else {
        quotient / mean_rand
    };
    Ok(RayleighResult {
        label: label.to_string(),
        quotient,
        random_quotients,
        anisotropy,
        degenerate_divisor,
    })
}
