//! Slot-level state parametrization and measurement transition kernels.
//!
//! Each PPM slot carries one of two pure states: the ground state (no pulse)
//! or a coherent pulse with mean photon number |α|². Their overlap is
//! γ = e^{−|α|²}, and the pair spans a two-dimensional space where they can be
//! written |γ_j⟩ = cosθ|X⟩ + (−1)^j sinθ|Y⟩ with γ = cos²2θ, θ ∈ [0, π/4].
//! A binary measurement of a slot is summarized by its transition kernel
//! p[i][j] = P(outcome i | slot qubit j), which is all downstream code needs.

use crate::error::{Error, Result};

/// Problem instance: cardinality plus the slot-state geometry derived from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulationConfig {
    m: u32,
    mean_photons: f64,
    gamma: f64,
    theta: f64,
}

impl ModulationConfig {
    /// Number of PPM slots (symbol alphabet size), M ≥ 2.
    pub fn m(&self) -> u32 {
        self.m
    }

    /// Mean photon number |α|² of the pulse.
    pub fn mean_photons(&self) -> f64 {
        self.mean_photons
    }

    /// Overlap γ = e^{−|α|²} = cos²2θ between pulse and ground slot states.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Half-angle θ ∈ [0, π/4] between the two slot states and the symmetry axis.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Real pulse amplitude α = √(mean_photons).
    pub fn alpha(&self) -> f64 {
        self.mean_photons.sqrt()
    }
}

/// Builds a config from the cardinality and the pulse mean photon number.
pub fn config_from_mean_photons(m: u32, mean_photons: f64) -> Result<ModulationConfig> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("cardinality {m} < 2")));
    }
    if mean_photons.is_nan() || mean_photons < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mean photon number {mean_photons} must be >= 0"
        )));
    }
    let gamma = (-mean_photons).exp();
    Ok(ModulationConfig {
        m,
        mean_photons,
        gamma,
        theta: theta_from_gamma(gamma),
    })
}

/// Builds a config from the cardinality and the state overlap γ ∈ [0, 1].
pub fn config_from_gamma(m: u32, gamma: f64) -> Result<ModulationConfig> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("cardinality {m} < 2")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "overlap {gamma} outside [0, 1]"
        )));
    }
    // -ln 0 = +inf is the orthogonal-state limit and keeps gamma = exp(-mean_photons).
    Ok(ModulationConfig {
        m,
        mean_photons: -gamma.ln(),
        gamma,
        theta: theta_from_gamma(gamma),
    })
}

fn theta_from_gamma(gamma: f64) -> f64 {
    // cos2θ = √γ with θ ∈ [0, π/4]; clamp guards √γ rounding above 1.
    0.5 * gamma.sqrt().clamp(0.0, 1.0).acos()
}

/// Outcome association of a generalized-Kennedy measurement: which outcome is
/// tied to which slot state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Association {
    /// Outcome 0 keeps its ground-state meaning: p(0|ground) = q_{0|0}(β).
    Direct,
    /// Roles swapped by a pre-displacement: p(0|ground) = q_{1|pulse}(β).
    Inverted,
}

impl Association {
    pub fn name(self) -> &'static str {
        match self {
            Association::Direct => "direct",
            Association::Inverted => "inverted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Association::Direct),
            "inverted" => Ok(Association::Inverted),
            other => Err(Error::InvalidArgument(format!(
                "unknown association {other:?} (expected direct or inverted)"
            ))),
        }
    }
}

/// One slot's measurement, tagged by family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalMeasurement {
    /// Rank-1 orthogonal projector pair at angle φ ∈ [−π/2, π/2] (π-periodic).
    Projective { phi: f64 },
    /// General binary POVM ½(I ± (a σ_z + b σ_x)) with a² + b² ≤ 1.
    Povm { a: f64, b: f64 },
    /// Displacement by real β followed by on/off photon detection.
    GeneralizedKennedy { beta: f64, association: Association },
}

impl LocalMeasurement {
    /// Projective measurement with the angle reduced to [−π/2, π/2].
    pub fn projective(phi: f64) -> Self {
        LocalMeasurement::Projective {
            phi: normalize_phi(phi),
        }
    }

    pub fn povm(a: f64, b: f64) -> Result<Self> {
        check_povm(a, b)?;
        Ok(LocalMeasurement::Povm { a, b })
    }

    pub fn generalized_kennedy(beta: f64, association: Association) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "displacement {beta} must be finite"
            )));
        }
        Ok(LocalMeasurement::GeneralizedKennedy { beta, association })
    }

    /// Transition kernel of this measurement for the given problem instance.
    pub fn kernel(&self, cfg: &ModulationConfig) -> Result<TransitionKernel> {
        match *self {
            LocalMeasurement::Projective { phi } => Ok(projector_kernel(cfg.theta(), phi)),
            LocalMeasurement::Povm { a, b } => povm_kernel(cfg.theta(), a, b),
            LocalMeasurement::GeneralizedKennedy { beta, association } => {
                gk_kernel(cfg.mean_photons(), beta, association)
            }
        }
    }
}

/// Reduces a projector angle to [−π/2, π/2] (projector pairs are π-periodic).
pub fn normalize_phi(phi: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut x = phi % PI;
    if x > FRAC_PI_2 {
        x -= PI;
    } else if x < -FRAC_PI_2 {
        x += PI;
    }
    x
}

fn check_povm(a: f64, b: f64) -> Result<()> {
    let r2 = a * a + b * b;
    if r2 > 1.0 + 1e-12 {
        return Err(Error::InvalidPovm(r2));
    }
    Ok(())
}

/// Conditional probabilities p[i][j] = P(outcome i | slot qubit j).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionKernel {
    p: [[f64; 2]; 2],
}

impl TransitionKernel {
    /// Builds from explicit outcome-0 probabilities per qubit; columns are
    /// completed to sum to 1.
    pub fn from_outcome0(p00: f64, p01: f64) -> Self {
        TransitionKernel {
            p: [[p00, p01], [1.0 - p00, 1.0 - p01]],
        }
    }

    /// P(outcome i | qubit j).
    #[inline]
    pub fn prob(&self, outcome: u8, qubit: u8) -> f64 {
        self.p[outcome as usize][qubit as usize]
    }

    /// All four entries as [outcome][qubit].
    pub fn entries(&self) -> [[f64; 2]; 2] {
        self.p
    }
}

/// Kernel of the projector pair at angle φ:
/// p̌[i][j] = |⟨m_i|γ_j⟩|² = cos²(θ − (−1)^j φ + iπ/2).
pub fn projector_kernel(theta: f64, phi: f64) -> TransitionKernel {
    let c0 = (theta - phi).cos();
    let c1 = (theta + phi).cos();
    TransitionKernel::from_outcome0(c0 * c0, c1 * c1)
}

/// Kernel of the POVM pair ½(I ± (a σ_z + b σ_x)) by the Born rule:
/// p[i][j] = [1 + (−1)^i a cos2θ + (−1)^{i+j} b sin2θ]/2.
pub fn povm_kernel(theta: f64, a: f64, b: f64) -> Result<TransitionKernel> {
    check_povm(a, b)?;
    let (s2t, c2t) = (2.0 * theta).sin_cos();
    let p00 = 0.5 * (1.0 + a * c2t + b * s2t);
    let p01 = 0.5 * (1.0 + a * c2t - b * s2t);
    Ok(TransitionKernel::from_outcome0(
        p00.clamp(0.0, 1.0),
        p01.clamp(0.0, 1.0),
    ))
}

/// Spectral form of a binary POVM pair: a projector pair at `projector_angle`
/// whose outcomes are probabilistically relabeled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralDecomposition {
    /// Eigenbasis angle φ̂ = ½·atan2(b, a).
    pub projector_angle: f64,
    /// λ_0̂ = (1 + √(a²+b²))/2: probability that a raw outcome keeps its label.
    pub relabel_lambda0: f64,
    /// λ_1̂ = (1 − √(a²+b²))/2: probability that a raw outcome is flipped.
    pub relabel_lambda1: f64,
}

impl SpectralDecomposition {
    /// Applies the relabeling to the eigenbasis projector kernel, recovering
    /// the POVM kernel: p[i][j] = Σ_î P(i | î) p̌[î][j].
    pub fn relabeled_kernel(&self, theta: f64) -> TransitionKernel {
        let base = projector_kernel(theta, self.projector_angle);
        let (l0, l1) = (self.relabel_lambda0, self.relabel_lambda1);
        let p00 = l0 * base.prob(0, 0) + l1 * base.prob(1, 0);
        let p01 = l0 * base.prob(0, 1) + l1 * base.prob(1, 1);
        TransitionKernel::from_outcome0(p00, p01)
    }
}

/// Eigen-decomposes the POVM pair into a projector pair plus outcome relabeling.
pub fn povm_decompose(a: f64, b: f64) -> Result<SpectralDecomposition> {
    check_povm(a, b)?;
    let r = (a * a + b * b).sqrt().min(1.0);
    Ok(SpectralDecomposition {
        projector_angle: 0.5 * b.atan2(a),
        relabel_lambda0: 0.5 * (1.0 + r),
        relabel_lambda1: 0.5 * (1.0 - r),
    })
}

/// Kernel of a generalized-Kennedy measurement: displace by real β, then
/// on/off photon detection. With unit gain the click statistics are
/// q_{0|ground} = e^{−β²} and q_{1|pulse} = 1 − e^{−(α−β)²}.
pub fn gk_kernel(mean_photons: f64, beta: f64, association: Association) -> Result<TransitionKernel> {
    if mean_photons.is_nan() || mean_photons < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mean photon number {mean_photons} must be >= 0"
        )));
    }
    if !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "displacement {beta} must be finite"
        )));
    }
    let alpha = mean_photons.sqrt();
    let q00 = (-beta * beta).exp();
    let q1a = 1.0 - (-(alpha - beta) * (alpha - beta)).exp();
    Ok(match association {
        Association::Direct => TransitionKernel::from_outcome0(q00, 1.0 - q1a),
        Association::Inverted => TransitionKernel::from_outcome0(q1a, 1.0 - q00),
    })
}
