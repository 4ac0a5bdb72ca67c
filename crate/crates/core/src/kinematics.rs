//! Monochromator kinematics for a variable-included-angle plane grating.
//!
//! Positions follow from two constraints at every photon energy:
//!
//! * the grating equation `N·k·λ = sin α + sin β`, with `α > 0` the incidence
//!   angle and `β < 0` the diffraction angle (inside order), both measured from
//!   the grating normal;
//! * the fixed-focus condition `cos β / cos α = c`.
//!
//! Eliminating `α` leaves a quadratic in `sin β` with a closed-form root, so a
//! position solve is a handful of transcendental calls. The plane pre-mirror
//! keeps the exit beam horizontal, which puts the mirror at a grazing angle of
//! `90° − (α − β)/2` and the grating surface at `90° + β` to the exit beam.
//!
//! For scanning without a live solve, [`build_fit_table`] samples the closed
//! form and fits one cubic per axis against a normalized energy abscissa.
//! Angles are degrees at every public boundary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Photon energy to wavelength conversion, eV·nm.
pub const DEFAULT_HC_EV_NM: f64 = 1239.8420;

/// `|c − 1|` below this is rejected: the closed form divides by `c² − 1`.
pub const SINGULAR_CFF_THRESHOLD: f64 = 1e-6;

/// Upper bound on fit samples and on fit-report probes.
pub const MAX_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("photon energy must be positive, got {0} eV")]
    NonPositiveEnergy(f64),
    #[error("energy {energy} eV outside configured range [{min}, {max}] eV")]
    OutOfRange { energy: f64, min: f64, max: f64 },
    #[error("no physical solution: {0}")]
    Unsolvable(String),
    #[error("fixed-focus ratio {0} is singular (|c - 1| < 1e-6)")]
    SingularConfig(f64),
    #[error("derived wavelength is not positive ({0} mm)")]
    NonPositive(f64),
    #[error("invalid monochromator config: {0}")]
    InvalidConfig(String),
    #[error("cubic fit needs at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{0} samples exceeds the limit of 1000000")]
    TooManySamples(usize),
    #[error("cubic fit needs at least 4 distinct energies, got {0}")]
    DegenerateAbscissae(usize),
    #[error("energy {energy} eV outside fit domain [{lo}, {hi}] eV")]
    OutOfDomain { energy: f64, lo: f64, hi: f64 },
}

/// Tunable parameters of the monochromator solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonoConfig {
    /// Grating line density, lines/mm.
    pub line_density: f64,
    /// Diffraction order.
    pub order: i32,
    /// Fixed-focus ratio `cos β / cos α`.
    pub fixed_focus_ratio: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    /// eV·nm
    #[serde(default = "default_hc")]
    pub hc: f64,
}

fn default_hc() -> f64 {
    DEFAULT_HC_EV_NM
}

impl MonoConfig {
    pub fn new(line_density: f64, order: i32, fixed_focus_ratio: f64) -> Self {
        Self {
            line_density,
            order,
            fixed_focus_ratio,
            energy_min: 20.0,
            energy_max: 2000.0,
            hc: DEFAULT_HC_EV_NM,
        }
    }

    pub fn with_range(mut self, energy_min: f64, energy_max: f64) -> Self {
        self.energy_min = energy_min;
        self.energy_max = energy_max;
        self
    }

    /// Checks every invariant. A singular `c` is reported as
    /// [`KinematicsError::SingularConfig`], everything else as `InvalidConfig`.
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.line_density.is_finite() && self.line_density > 0.0) {
            return Err(KinematicsError::InvalidConfig(format!(
                "line_density must be > 0, got {}",
                self.line_density
            )));
        }
        if self.order == 0 {
            return Err(KinematicsError::InvalidConfig(
                "order must be non-zero".into(),
            ));
        }
        if !(self.fixed_focus_ratio.is_finite() && self.fixed_focus_ratio > 0.0) {
            return Err(KinematicsError::InvalidConfig(format!(
                "fixed_focus_ratio must be > 0, got {}",
                self.fixed_focus_ratio
            )));
        }
        if (self.fixed_focus_ratio - 1.0).abs() < SINGULAR_CFF_THRESHOLD {
            return Err(KinematicsError::SingularConfig(self.fixed_focus_ratio));
        }
        if !(self.energy_min.is_finite()
            && self.energy_max.is_finite()
            && self.energy_min > 0.0
            && self.energy_min < self.energy_max)
        {
            return Err(KinematicsError::InvalidConfig(format!(
                "energy range must satisfy 0 < min < max, got [{}, {}]",
                self.energy_min, self.energy_max
            )));
        }
        if !(self.hc.is_finite() && self.hc > 0.0) {
            return Err(KinematicsError::InvalidConfig(format!(
                "hc must be > 0, got {}",
                self.hc
            )));
        }
        Ok(())
    }

    pub fn contains(&self, energy: f64) -> bool {
        energy >= self.energy_min && energy <= self.energy_max
    }
}

/// Optics positions for one photon energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsSolution {
    pub energy: f64,
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub mirror_grazing_deg: f64,
    pub grating_exit_grazing_deg: f64,
}

impl OpticsSolution {
    /// `|N·k·λ − (sin α + sin β)|` with λ in mm.
    pub fn grating_residual(&self, cfg: &MonoConfig) -> f64 {
        let s = diffraction_term(cfg, self.energy);
        (s - (self.alpha_deg.to_radians().sin() + self.beta_deg.to_radians().sin())).abs()
    }

    /// `|cos β / cos α − c|`
    pub fn focus_residual(&self, cfg: &MonoConfig) -> f64 {
        (self.beta_deg.to_radians().cos() / self.alpha_deg.to_radians().cos()
            - cfg.fixed_focus_ratio)
            .abs()
    }

    pub fn axis_deg(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Mirror => self.mirror_grazing_deg,
            Axis::Grating => self.grating_exit_grazing_deg,
        }
    }
}

/// The two monochromator axes positioned against energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Mirror,
    Grating,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::Mirror, Axis::Grating];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Mirror => "mirror",
            Axis::Grating => "grating",
        }
    }
}

pub fn wavelength_nm(energy: f64, cfg: &MonoConfig) -> Result<f64, KinematicsError> {
    if !(energy > 0.0) {
        return Err(KinematicsError::NonPositiveEnergy(energy));
    }
    Ok(cfg.hc / energy)
}

// N·k·λ with λ in mm; the right-hand side of the grating equation.
fn diffraction_term(cfg: &MonoConfig, energy: f64) -> f64 {
    cfg.line_density * f64::from(cfg.order) * (cfg.hc / energy) * 1e-6
}

/// Closed-form real-time solve for the optics at `energy`.
pub fn solve_diffraction(cfg: &MonoConfig, energy: f64) -> Result<OpticsSolution, KinematicsError> {
    if (cfg.fixed_focus_ratio - 1.0).abs() < SINGULAR_CFF_THRESHOLD {
        return Err(KinematicsError::SingularConfig(cfg.fixed_focus_ratio));
    }
    if !(energy > 0.0) {
        return Err(KinematicsError::NonPositiveEnergy(energy));
    }
    if !cfg.contains(energy) {
        return Err(KinematicsError::OutOfRange {
            energy,
            min: cfg.energy_min,
            max: cfg.energy_max,
        });
    }
    let c2 = cfg.fixed_focus_ratio * cfg.fixed_focus_ratio;
    let s = diffraction_term(cfg, energy);
    let sin_beta = (c2 * s - (c2 * s * s + (c2 - 1.0) * (c2 - 1.0)).sqrt()) / (c2 - 1.0);
    let sin_alpha = s - sin_beta;
    if !(sin_beta.abs() < 1.0 && sin_alpha.abs() < 1.0) {
        return Err(KinematicsError::Unsolvable(format!(
            "sin(alpha)={sin_alpha}, sin(beta)={sin_beta} at {energy} eV"
        )));
    }
    let alpha_deg = sin_alpha.asin().to_degrees();
    let beta_deg = sin_beta.asin().to_degrees();
    if !(alpha_deg > 0.0 && beta_deg < 0.0) {
        return Err(KinematicsError::Unsolvable(format!(
            "alpha={alpha_deg}°, beta={beta_deg}° violate the inside-order convention"
        )));
    }
    // Focus condition picks the root; reject the spurious one when c < 1.
    let focus = sin_beta.acos_cos() / sin_alpha.acos_cos();
    if (focus - cfg.fixed_focus_ratio).abs() > 1e-6 * cfg.fixed_focus_ratio.max(1.0) {
        return Err(KinematicsError::Unsolvable(format!(
            "fixed-focus ratio {} not reachable at {energy} eV",
            cfg.fixed_focus_ratio
        )));
    }
    let mirror_grazing_deg = 90.0 - (alpha_deg - beta_deg) / 2.0;
    let grating_exit_grazing_deg = 90.0 + beta_deg;
    if !(mirror_grazing_deg > 0.0 && mirror_grazing_deg < 90.0 && grating_exit_grazing_deg > 0.0) {
        return Err(KinematicsError::Unsolvable(format!(
            "grazing angles out of (0°, 90°) at {energy} eV"
        )));
    }
    Ok(OpticsSolution {
        energy,
        alpha_deg,
        beta_deg,
        mirror_grazing_deg,
        grating_exit_grazing_deg,
    })
}

trait CosFromSin {
    fn acos_cos(self) -> f64;
}

impl CosFromSin for f64 {
    // cos of an angle in (-90°, 90°) given its sine.
    fn acos_cos(self) -> f64 {
        (1.0 - self * self).sqrt()
    }
}

/// Inverse of [`solve_diffraction`]: photon energy selected by a diffraction angle.
pub fn energy_from_beta(cfg: &MonoConfig, beta_deg: f64) -> Result<f64, KinematicsError> {
    if !(beta_deg > -90.0 && beta_deg < 0.0) {
        return Err(KinematicsError::Unsolvable(format!(
            "beta={beta_deg}° outside (-90°, 0°)"
        )));
    }
    let beta = beta_deg.to_radians();
    let cos_alpha = beta.cos() / cfg.fixed_focus_ratio;
    if cos_alpha > 1.0 {
        return Err(KinematicsError::Unsolvable(format!(
            "cos(beta)/c = {cos_alpha} > 1"
        )));
    }
    let alpha = cos_alpha.acos();
    let lambda_mm = (alpha.sin() + beta.sin()) / (cfg.line_density * f64::from(cfg.order));
    if !(lambda_mm > 0.0) {
        return Err(KinematicsError::NonPositive(lambda_mm));
    }
    Ok(cfg.hc / (lambda_mm * 1e6))
}

/// A least-squares cubic of one axis angle against energy.
///
/// The abscissa is `u = (2E − E_lo − E_hi)/(E_hi − E_lo)`, so `u ∈ [−1, 1]`
/// over the domain and `coefficients[i]` multiplies `u^i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub axis: Option<Axis>,
    pub coefficients: [f64; 4],
    pub domain: (f64, f64),
    pub rms_residual_deg: f64,
    pub max_residual_deg: f64,
    pub sample_count: usize,
}

impl CubicFit {
    pub fn normalize(&self, energy: f64) -> f64 {
        let (lo, hi) = self.domain;
        (2.0 * energy - lo - hi) / (hi - lo)
    }

    fn poly(&self, u: f64) -> f64 {
        let [a0, a1, a2, a3] = self.coefficients;
        a0 + u * (a1 + u * (a2 + u * a3))
    }
}

/// Fits `y = a0 + a1·u + a2·u² + a3·u³` over the sample energies' span.
pub fn fit_cubic(samples: &[(f64, f64)]) -> Result<CubicFit, KinematicsError> {
    if samples.len() < 4 {
        return Err(KinematicsError::TooFewSamples(samples.len()));
    }
    let mut distinct: Vec<f64> = samples.iter().map(|&(e, _)| e).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(KinematicsError::DegenerateAbscissae(distinct.len()));
    }
    let lo = distinct[0];
    let hi = distinct[distinct.len() - 1];

    let mut fit = CubicFit {
        axis: None,
        coefficients: [0.0; 4],
        domain: (lo, hi),
        rms_residual_deg: 0.0,
        max_residual_deg: 0.0,
        sample_count: samples.len(),
    };
    let vandermonde = DMatrix::from_fn(samples.len(), 4, |row, col| {
        fit.normalize(samples[row].0).powi(col as i32)
    });
    let rhs = DVector::from_iterator(samples.len(), samples.iter().map(|&(_, y)| y));
    let qr = vandermonde.qr();
    let qty = qr.q().transpose() * rhs;
    let coeffs = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(KinematicsError::DegenerateAbscissae(distinct.len()))?;
    fit.coefficients = [coeffs[0], coeffs[1], coeffs[2], coeffs[3]];

    let mut sum_sq = 0.0;
    let mut max_abs: f64 = 0.0;
    for &(e, y) in samples {
        let r = (fit.poly(fit.normalize(e)) - y).abs();
        sum_sq += r * r;
        max_abs = max_abs.max(r);
    }
    fit.rms_residual_deg = (sum_sq / samples.len() as f64).sqrt();
    fit.max_residual_deg = max_abs;
    Ok(fit)
}

pub fn eval_fit(fit: &CubicFit, energy: f64) -> Result<f64, KinematicsError> {
    let (lo, hi) = fit.domain;
    if !(energy >= lo && energy <= hi) {
        return Err(KinematicsError::OutOfDomain { energy, lo, hi });
    }
    Ok(fit.poly(fit.normalize(energy)))
}

/// Mirror and grating fits built from the same sample grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTable {
    pub mirror: CubicFit,
    pub grating: CubicFit,
}

impl FitTable {
    pub fn axis(&self, axis: Axis) -> &CubicFit {
        match axis {
            Axis::Mirror => &self.mirror,
            Axis::Grating => &self.grating,
        }
    }
}

/// Samples the real-time solve at `n` equally spaced energies and fits both axes.
pub fn build_fit_table(
    cfg: &MonoConfig,
    e_lo: f64,
    e_hi: f64,
    n: usize,
) -> Result<FitTable, KinematicsError> {
    if n < 4 {
        return Err(KinematicsError::TooFewSamples(n));
    }
    if n > MAX_SAMPLES {
        return Err(KinematicsError::TooManySamples(n));
    }
    if !(e_lo < e_hi) {
        return Err(KinematicsError::DegenerateAbscissae(1));
    }
    for e in [e_lo, e_hi] {
        if !cfg.contains(e) {
            return Err(KinematicsError::OutOfRange {
                energy: e,
                min: cfg.energy_min,
                max: cfg.energy_max,
            });
        }
    }
    let step = (e_hi - e_lo) / (n - 1) as f64;
    let mut mirror = Vec::with_capacity(n);
    let mut grating = Vec::with_capacity(n);
    for i in 0..n {
        let e = if i == n - 1 {
            e_hi
        } else {
            e_lo + step * i as f64
        };
        let sol = solve_diffraction(cfg, e)?;
        mirror.push((e, sol.mirror_grazing_deg));
        grating.push((e, sol.grating_exit_grazing_deg));
    }
    let mut mirror = fit_cubic(&mirror)?;
    mirror.axis = Some(Axis::Mirror);
    let mut grating = fit_cubic(&grating)?;
    grating.axis = Some(Axis::Grating);
    Ok(FitTable { mirror, grating })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisDeviation {
    pub max_dev_deg: f64,
    pub rms_dev_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitErrorReport {
    pub mirror: AxisDeviation,
    pub grating: AxisDeviation,
    pub n_probe: usize,
}

/// Compares the fits against the live solve for `cfg` on `n_probe` uniform
/// energies in the fit domain (a single probe sits at the midpoint).
pub fn fit_error_report(
    cfg: &MonoConfig,
    fits: &FitTable,
    n_probe: usize,
) -> Result<FitErrorReport, KinematicsError> {
    if n_probe == 0 {
        return Err(KinematicsError::TooFewSamples(0));
    }
    if n_probe > MAX_SAMPLES {
        return Err(KinematicsError::TooManySamples(n_probe));
    }
    let lo = fits.mirror.domain.0.max(fits.grating.domain.0);
    let hi = fits.mirror.domain.1.min(fits.grating.domain.1);
    let probes: Vec<f64> = if n_probe == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        let step = (hi - lo) / (n_probe - 1) as f64;
        (0..n_probe)
            .map(|i| {
                if i == n_probe - 1 {
                    hi
                } else {
                    lo + step * i as f64
                }
            })
            .collect()
    };
    let mut stats = [(0.0_f64, 0.0_f64); 2];
    for &e in &probes {
        let sol = solve_diffraction(cfg, e)?;
        for (slot, axis) in stats.iter_mut().zip(Axis::ALL) {
            let dev = (eval_fit(fits.axis(axis), e)? - sol.axis_deg(axis)).abs();
            slot.0 = slot.0.max(dev);
            slot.1 += dev * dev;
        }
    }
    let n = probes.len() as f64;
    let dev = |(max, sum_sq): (f64, f64)| AxisDeviation {
        max_dev_deg: max,
        rms_dev_deg: (sum_sq / n).sqrt(),
    };
    Ok(FitErrorReport {
        mirror: dev(stats[0]),
        grating: dev(stats[1]),
        n_probe,
    })
}
