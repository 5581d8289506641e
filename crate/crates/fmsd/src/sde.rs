//! Registry of the supported SDE families.
//!
//! Each system provides drift `b(x,t)`, diffusion `sigma(x,t)`, uniform
//! parameter and initial-condition sampling, and per-system simulation
//! defaults (fine step, coarse stride, horizon). Drift and diffusion are pure
//! functions; all sampling goes through caller-owned [`RngStream`]s.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

// ── Mueller potential ────────────────────────────────────────────────────────

const MUELLER_A: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MUELLER_B: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MUELLER_C: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MUELLER_D: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MUELLER_X: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MUELLER_Y: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

/// Four-well 2D potential with per-family scale and shift knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct MuellerShape {
    pub a: [f64; 4],
    pub b: [f64; 4],
    pub c: [f64; 4],
    pub d: [f64; 4],
    pub xs: [f64; 4],
    pub ys: [f64; 4],
    pub beta: f64,
}

impl MuellerShape {
    /// Base constants, unit scales, zero shifts.
    pub fn base(beta: f64) -> Self {
        MuellerShape {
            a: MUELLER_A,
            b: MUELLER_B,
            c: MUELLER_C,
            d: MUELLER_D,
            xs: MUELLER_X,
            ys: MUELLER_Y,
            beta,
        }
    }

    pub fn scaled(
        a_scale: f64,
        b_scale: f64,
        c_scale: f64,
        d_scale: f64,
        x_shift: f64,
        y_shift: f64,
        beta: f64,
    ) -> Self {
        let mut s = MuellerShape::base(beta);
        for i in 0..4 {
            s.a[i] *= a_scale;
            s.b[i] *= b_scale;
            s.c[i] *= c_scale;
            s.d[i] *= d_scale;
            s.xs[i] += x_shift;
            s.ys[i] += y_shift;
        }
        s
    }
}

/// Potential value and analytic gradient at `(x1, x2)`.
pub fn mueller_potential(x1: f64, x2: f64, shape: &MuellerShape) -> Result<(f64, [f64; 2])> {
    if !x1.is_finite() || !x2.is_finite() {
        return Err(Error::NonFinite(format!("mueller_potential({x1}, {x2})")));
    }
    let mut v = 0.0;
    let mut g = [0.0, 0.0];
    for i in 0..4 {
        let dx = x1 - shape.xs[i];
        let dy = x2 - shape.ys[i];
        let e = shape.d[i] * (shape.a[i] * dx * dx + shape.b[i] * dx * dy + shape.c[i] * dy * dy).exp();
        v += e;
        g[0] += e * (2.0 * shape.a[i] * dx + shape.b[i] * dy);
        g[1] += e * (shape.b[i] * dx + 2.0 * shape.c[i] * dy);
    }
    Ok((v, g))
}

// ── System identifiers ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    Gbm,
    Mueller,
    PeriodicOscillator,
    StochasticLorenz,
    Ou,
    InhomogeneousOu,
    DoubleWell,
    CoupledDoubleWell,
    Duffing,
    PerturbedLimitCycle,
    PredatorPrey,
    PredatorPreyVariant,
    Fluxgate,
}

pub const ALL_SYSTEMS: [SystemId; 13] = [
    SystemId::Gbm,
    SystemId::Mueller,
    SystemId::PeriodicOscillator,
    SystemId::StochasticLorenz,
    SystemId::Ou,
    SystemId::InhomogeneousOu,
    SystemId::DoubleWell,
    SystemId::CoupledDoubleWell,
    SystemId::Duffing,
    SystemId::PerturbedLimitCycle,
    SystemId::PredatorPrey,
    SystemId::PredatorPreyVariant,
    SystemId::Fluxgate,
];

impl SystemId {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::Gbm => "gbm",
            SystemId::Mueller => "mueller",
            SystemId::PeriodicOscillator => "periodic_oscillator",
            SystemId::StochasticLorenz => "stochastic_lorenz",
            SystemId::Ou => "ou",
            SystemId::InhomogeneousOu => "inhomogeneous_ou",
            SystemId::DoubleWell => "double_well",
            SystemId::CoupledDoubleWell => "coupled_double_well",
            SystemId::Duffing => "duffing",
            SystemId::PerturbedLimitCycle => "perturbed_limit_cycle",
            SystemId::PredatorPrey => "predator_prey",
            SystemId::PredatorPreyVariant => "predator_prey_variant",
            SystemId::Fluxgate => "fluxgate",
        }
    }

    pub fn parse(s: &str) -> Result<SystemId> {
        ALL_SYSTEMS
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownSystem(s.to_string()))
    }

    /// Stable integer used in substream keys.
    pub fn tag(self) -> u64 {
        ALL_SYSTEMS.iter().position(|&s| s == self).unwrap() as u64 + 1
    }
}

impl std::fmt::Display for SystemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── Parameters ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    fn new(name: &str, lo: f64, hi: f64) -> Self {
        ParamRange {
            name: name.to_string(),
            lo,
            hi,
        }
    }
}

/// Named coefficient values for one system instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub BTreeMap<String, f64>);

impl ParamVector {
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        ParamVector(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    pub fn get(&self, system: SystemId, name: &str) -> Result<f64> {
        self.0.get(name).copied().ok_or_else(|| Error::MissingParam {
            system: system.as_str().to_string(),
            name: name.to_string(),
        })
    }

    /// Values in sorted-name order, for compact binary storage.
    pub fn values_sorted(&self) -> Vec<f64> {
        self.0.values().copied().collect()
    }
}

// ── System descriptor ────────────────────────────────────────────────────────

/// Static description of one SDE family: dimensions, coefficient ranges, and
/// simulation defaults.
#[derive(Clone, Debug)]
pub struct SdeSystem {
    pub id: SystemId,
    /// Observed dimensions (at most 3).
    pub state_dim: usize,
    /// Independent Wiener channels.
    pub noise_dim: usize,
    /// Simulated dimensions. Equals `state_dim` except for the fluxgate,
    /// whose three colored-noise components evolve internally and are not
    /// part of the observed state.
    pub internal_dim: usize,
    pub param_spec: Vec<ParamRange>,
    pub dt_fine: f64,
    pub stride_k: usize,
    pub horizon_steps_coarse: usize,
    /// Per observed dimension (lower, upper) uniform box for X0.
    pub ic_box: Vec<(f64, f64)>,
}

fn build_registry() -> Vec<SdeSystem> {
    let mut v = Vec::new();

    v.push(SdeSystem {
        id: SystemId::Gbm,
        state_dim: 1,
        noise_dim: 1,
        internal_dim: 1,
        param_spec: vec![
            ParamRange::new("mu", 0.01, 0.15),
            ParamRange::new("sigma", 0.01, 0.2),
        ],
        dt_fine: 5e-4,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(50.0, 100.0)],
    });

    v.push(SdeSystem {
        id: SystemId::Mueller,
        state_dim: 2,
        noise_dim: 2,
        internal_dim: 2,
        param_spec: vec![
            ParamRange::new("a_scale", 0.8, 1.2),
            ParamRange::new("b_scale", 0.8, 1.2),
            ParamRange::new("c_scale", 0.8, 1.2),
            ParamRange::new("d_scale", 0.7, 1.3),
            ParamRange::new("x_shift", -0.1, 0.1),
            ParamRange::new("y_shift", -0.1, 0.1),
            ParamRange::new("beta", 0.05, 2.0),
        ],
        dt_fine: 1e-5,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-0.5, 0.5), (-0.5, 1.5)],
    });

    v.push(SdeSystem {
        id: SystemId::PeriodicOscillator,
        state_dim: 2,
        // Both components are driven by the same Wiener process.
        noise_dim: 1,
        internal_dim: 2,
        param_spec: vec![
            ParamRange::new("omega", PI, 2.0 * PI),
            ParamRange::new("big_omega", 0.1, PI),
            ParamRange::new("sigma", 0.01, 1.0),
        ],
        dt_fine: 1e-5,
        stride_k: 10,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    });

    v.push(SdeSystem {
        id: SystemId::StochasticLorenz,
        state_dim: 3,
        noise_dim: 3,
        internal_dim: 3,
        param_spec: vec![
            ParamRange::new("sigma", 5.0, 15.0),
            ParamRange::new("rho", 20.0, 40.0),
            ParamRange::new("beta", 1.0, 3.0),
            ParamRange::new("eta1", 0.1, 2.0),
            ParamRange::new("eta2", 0.1, 2.0),
            ParamRange::new("eta3", 0.1, 2.0),
        ],
        dt_fine: 1e-4,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
    });

    v.push(SdeSystem {
        id: SystemId::Ou,
        state_dim: 1,
        noise_dim: 1,
        internal_dim: 1,
        param_spec: vec![
            ParamRange::new("theta", 0.1, 0.5),
            ParamRange::new("mu", 1.0, 5.0),
            ParamRange::new("sigma", 0.1, 0.5),
        ],
        dt_fine: 1e-3,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(50.0, 100.0)],
    });

    v.push(SdeSystem {
        id: SystemId::InhomogeneousOu,
        state_dim: 1,
        noise_dim: 1,
        internal_dim: 1,
        param_spec: vec![
            ParamRange::new("a", 0.5, 2.0),
            ParamRange::new("omega", PI, 4.0 * PI),
            ParamRange::new("theta", 0.5, 2.0),
            ParamRange::new("sigma", 0.1, 0.5),
        ],
        dt_fine: 1e-3,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(50.0, 100.0)],
    });

    v.push(SdeSystem {
        id: SystemId::DoubleWell,
        state_dim: 2,
        noise_dim: 2,
        internal_dim: 2,
        param_spec: vec![
            ParamRange::new("alpha", 0.1, 0.5),
            ParamRange::new("beta", 5.0, 20.0),
        ],
        dt_fine: 1e-5,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    });

    v.push(SdeSystem {
        id: SystemId::CoupledDoubleWell,
        state_dim: 2,
        noise_dim: 2,
        internal_dim: 2,
        param_spec: vec![
            ParamRange::new("alpha", 0.1, 0.5),
            ParamRange::new("beta", 5.0, 20.0),
        ],
        dt_fine: 1e-5,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    });

    v.push(SdeSystem {
        id: SystemId::Duffing,
        state_dim: 2,
        // Noise enters the momentum equation only.
        noise_dim: 1,
        internal_dim: 2,
        param_spec: vec![
            ParamRange::new("delta", 0.05, 0.5),
            ParamRange::new("alpha", -1.0, 1.0),
            ParamRange::new("beta", 1.0, 10.0),
            ParamRange::new("gamma", 0.1, 1.0),
            ParamRange::new("omega", 0.5, 6.0),
            ParamRange::new("epsilon", 0.01, 0.1),
        ],
        dt_fine: 1e-4,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    });

    v.push(SdeSystem {
        id: SystemId::PerturbedLimitCycle,
        state_dim: 2,
        // Diffusion matrix is diag(x1*x2, x2^2), one channel per row.
        noise_dim: 2,
        internal_dim: 2,
        param_spec: vec![
            ParamRange::new("period", 0.01, 2.0 * PI),
            ParamRange::new("sigma", 0.01, 1.0),
        ],
        dt_fine: 1e-5,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    });

    // Predator-prey coefficients are published as fixed values per regime, not
    // ranges; the spec ranges below put +/-20% around them (and span the
    // published (s, g) regimes) so that parameter sampling stays meaningful.
    let predator_common = vec![
        ParamRange::new("r", 0.32, 0.48),
        ParamRange::new("a", 0.016, 0.024),
        ParamRange::new("b", 0.32, 0.48),
        ParamRange::new("k", 0.32, 0.48),
        ParamRange::new("s", 0.0, 0.42),
        ParamRange::new("g", 0.32, 0.72),
        ParamRange::new("d_mat", 0.32, 0.48),
        ParamRange::new("v1", 0.2, 0.3),
        ParamRange::new("v2", 0.2, 0.3),
        ParamRange::new("sigma1", 0.12, 0.18),
        ParamRange::new("sigma2", 0.096, 0.144),
        ParamRange::new("sigma3", 0.08, 0.12),
    ];

    v.push(SdeSystem {
        id: SystemId::PredatorPrey,
        state_dim: 3,
        noise_dim: 3,
        internal_dim: 3,
        param_spec: predator_common.clone(),
        dt_fine: 0.05,
        stride_k: 10,
        horizon_steps_coarse: 50,
        ic_box: vec![(0.8, 1.2), (0.48, 0.72), (0.32, 0.48)],
    });

    let mut variant_spec = predator_common;
    variant_spec.push(ParamRange::new("sigma4", 0.004, 0.006));
    v.push(SdeSystem {
        id: SystemId::PredatorPreyVariant,
        state_dim: 3,
        // Extra channel for the stochastic reproduction term.
        noise_dim: 4,
        internal_dim: 3,
        param_spec: variant_spec,
        dt_fine: 0.05,
        stride_k: 10,
        horizon_steps_coarse: 50,
        ic_box: vec![(0.8, 1.2), (0.48, 0.72), (0.32, 0.48)],
    });

    v.push(SdeSystem {
        id: SystemId::Fluxgate,
        state_dim: 3,
        noise_dim: 3,
        internal_dim: 6,
        param_spec: vec![
            ParamRange::new("c", 3.0, 5.0),
            ParamRange::new("lambda", 0.1, 1.0),
            ParamRange::new("epsilon", 0.1, 0.5),
            ParamRange::new("omega", 3.0, 3.0),
        ],
        dt_fine: 1e-3,
        stride_k: 100,
        horizon_steps_coarse: 50,
        ic_box: vec![(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
    });

    v
}

static REGISTRY: OnceLock<Vec<SdeSystem>> = OnceLock::new();

pub fn registry() -> &'static [SdeSystem] {
    REGISTRY.get_or_init(build_registry)
}

pub fn get(id: SystemId) -> &'static SdeSystem {
    registry().iter().find(|s| s.id == id).unwrap()
}

pub fn find(name: &str) -> Result<&'static SdeSystem> {
    Ok(get(SystemId::parse(name)?))
}

// ── Resolved coefficients ────────────────────────────────────────────────────

/// Per-trajectory coefficient struct so the stepping loop avoids map lookups.
#[derive(Clone, Debug)]
pub(crate) enum Coeffs {
    Gbm { mu: f64, sigma: f64 },
    Mueller { shape: MuellerShape },
    Periodic { omega: f64, big_omega: f64, sigma: f64 },
    Lorenz { sigma: f64, rho: f64, beta: f64, eta: [f64; 3] },
    Ou { theta: f64, mu: f64, sigma: f64 },
    InhOu { a: f64, omega: f64, theta: f64, sigma: f64 },
    DoubleWell { alpha: f64, beta: f64 },
    CoupledDoubleWell { alpha: f64, beta: f64 },
    Duffing { delta: f64, alpha: f64, beta: f64, gamma: f64, omega: f64, epsilon: f64 },
    PerturbedCycle { period: f64, sigma: f64 },
    PredatorPrey { r: f64, a: f64, b: f64, k: f64, s: f64, g: f64, d_mat: f64, v1: f64, v2: f64, sig: [f64; 3], sigma4: Option<f64> },
    Fluxgate { c: f64, lambda: f64, epsilon: f64, omega: f64 },
}

impl SdeSystem {
    pub(crate) fn resolve(&self, p: &ParamVector) -> Result<Coeffs> {
        let id = self.id;
        let g = |name: &str| p.get(id, name);
        Ok(match id {
            SystemId::Gbm => Coeffs::Gbm {
                mu: g("mu")?,
                sigma: g("sigma")?,
            },
            SystemId::Mueller => Coeffs::Mueller {
                shape: MuellerShape::scaled(
                    g("a_scale")?,
                    g("b_scale")?,
                    g("c_scale")?,
                    g("d_scale")?,
                    g("x_shift")?,
                    g("y_shift")?,
                    g("beta")?,
                ),
            },
            SystemId::PeriodicOscillator => Coeffs::Periodic {
                omega: g("omega")?,
                big_omega: g("big_omega")?,
                sigma: g("sigma")?,
            },
            SystemId::StochasticLorenz => Coeffs::Lorenz {
                sigma: g("sigma")?,
                rho: g("rho")?,
                beta: g("beta")?,
                eta: [g("eta1")?, g("eta2")?, g("eta3")?],
            },
            SystemId::Ou => Coeffs::Ou {
                theta: g("theta")?,
                mu: g("mu")?,
                sigma: g("sigma")?,
            },
            SystemId::InhomogeneousOu => Coeffs::InhOu {
                a: g("a")?,
                omega: g("omega")?,
                theta: g("theta")?,
                sigma: g("sigma")?,
            },
            SystemId::DoubleWell => Coeffs::DoubleWell {
                alpha: g("alpha")?,
                beta: g("beta")?,
            },
            SystemId::CoupledDoubleWell => Coeffs::CoupledDoubleWell {
                alpha: g("alpha")?,
                beta: g("beta")?,
            },
            SystemId::Duffing => Coeffs::Duffing {
                delta: g("delta")?,
                alpha: g("alpha")?,
                beta: g("beta")?,
                gamma: g("gamma")?,
                omega: g("omega")?,
                epsilon: g("epsilon")?,
            },
            SystemId::PerturbedLimitCycle => Coeffs::PerturbedCycle {
                period: g("period")?,
                sigma: g("sigma")?,
            },
            SystemId::PredatorPrey | SystemId::PredatorPreyVariant => Coeffs::PredatorPrey {
                r: g("r")?,
                a: g("a")?,
                b: g("b")?,
                k: g("k")?,
                s: g("s")?,
                g: g("g")?,
                d_mat: g("d_mat")?,
                v1: g("v1")?,
                v2: g("v2")?,
                sig: [g("sigma1")?, g("sigma2")?, g("sigma3")?],
                sigma4: if id == SystemId::PredatorPreyVariant {
                    Some(g("sigma4")?)
                } else {
                    None
                },
            },
            SystemId::Fluxgate => Coeffs::Fluxgate {
                c: g("c")?,
                lambda: g("lambda")?,
                epsilon: g("epsilon")?,
                omega: g("omega")?,
            },
        })
    }

    /// Drift `b(x, t)` in internal coordinates (`x.len() == internal_dim`).
    pub fn drift(&self, params: &ParamVector, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let coeffs = self.resolve(params)?;
        let mut out = vec![0.0; self.internal_dim];
        drift_into(&coeffs, x, t, &mut out);
        Ok(out)
    }

    /// Diffusion matrix (`internal_dim x noise_dim`, row-major).
    pub fn diffusion(&self, params: &ParamVector, x: &[f64], t: f64) -> Result<Matrix> {
        self.check_input(x, t)?;
        let coeffs = self.resolve(params)?;
        let mut m = Matrix::zeros(self.internal_dim, self.noise_dim);
        diffusion_into(&coeffs, x, t, &mut m.data, self.noise_dim);
        Ok(m)
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.internal_dim {
            return Err(Error::Dim(format!(
                "{}: state length {} != internal dim {}",
                self.id,
                x.len(),
                self.internal_dim
            )));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: state/time input", self.id)));
        }
        Ok(())
    }

    /// Uniform draw of every coefficient in its declared range.
    pub fn sample_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut map = BTreeMap::new();
        for r in &self.param_spec {
            map.insert(r.name.clone(), rng.uniform(r.lo, r.hi));
        }
        ParamVector(map)
    }

    /// Uniform draw of the observed initial state from the IC box.
    pub fn sample_initial(&self, rng: &mut RngStream) -> Vec<f64> {
        self.ic_box.iter().map(|&(lo, hi)| rng.uniform(lo, hi)).collect()
    }

    /// Extend an observed initial state to internal coordinates. The fluxgate
    /// colored-noise components start at zero.
    pub fn extend_initial(&self, observed: &[f64]) -> Result<Vec<f64>> {
        if observed.len() != self.state_dim {
            return Err(Error::Dim(format!(
                "{}: initial state length {} != state dim {}",
                self.id,
                observed.len(),
                self.state_dim
            )));
        }
        let mut x = observed.to_vec();
        x.resize(self.internal_dim, 0.0);
        Ok(x)
    }

    /// Published parameter regimes for case studies (bifurcations, resonance,
    /// noise levels). Empty for systems without named regimes.
    pub fn presets(&self) -> Vec<(String, ParamVector)> {
        match self.id {
            SystemId::Duffing => vec![
                (
                    "chaotic".to_string(),
                    ParamVector::from_pairs(&[
                        ("delta", 1.0),
                        ("alpha", -1.0),
                        ("beta", 1.0),
                        ("gamma", 1.0),
                        ("omega", 1.4),
                        ("epsilon", 0.2),
                    ]),
                ),
                (
                    "overdamped_single_well".to_string(),
                    ParamVector::from_pairs(&[
                        ("delta", 1.5),
                        ("alpha", -1.0),
                        ("beta", 1.0),
                        ("gamma", 0.1),
                        ("omega", 1.0),
                        ("epsilon", 0.1),
                    ]),
                ),
                (
                    "stochastic_resonance".to_string(),
                    ParamVector::from_pairs(&[
                        ("delta", 0.5),
                        ("alpha", -1.0),
                        ("beta", 1.0),
                        ("gamma", 0.5),
                        ("omega", 1.0),
                        ("epsilon", 0.05),
                    ]),
                ),
            ],
            SystemId::PredatorPrey | SystemId::PredatorPreyVariant => {
                let base = |s: f64, g: f64| {
                    let mut pairs = vec![
                        ("r", 0.4),
                        ("a", 0.02),
                        ("b", 0.4),
                        ("k", 0.4),
                        ("s", s),
                        ("g", g),
                        ("d_mat", 0.4),
                        ("v1", 0.25),
                        ("v2", 0.25),
                        ("sigma1", 0.15),
                        ("sigma2", 0.12),
                        ("sigma3", 0.1),
                    ];
                    if self.id == SystemId::PredatorPreyVariant {
                        pairs.push(("sigma4", 0.005));
                    }
                    ParamVector::from_pairs(&pairs)
                };
                vec![
                    ("coexistence_oscillations".to_string(), base(0.0, 0.4)),
                    ("large_cycles_bistable".to_string(), base(0.2, 0.4)),
                    ("prey_dominated_collapse".to_string(), base(0.2, 0.6)),
                ]
            }
            SystemId::StochasticLorenz => {
                let mk = |rho: f64, eta: f64| {
                    ParamVector::from_pairs(&[
                        ("sigma", 10.0),
                        ("rho", rho),
                        ("beta", 8.0 / 3.0),
                        ("eta1", eta),
                        ("eta2", eta),
                        ("eta3", eta),
                    ])
                };
                let mut out: Vec<(String, ParamVector)> = [0.5, 1.0, 13.926, 20.0, 24.06, 24.5, 24.76, 100.0]
                    .iter()
                    .map(|&rho| (format!("rho_{rho}"), mk(rho, 0.8)))
                    .collect();
                out.push(("rho_28_high_noise".to_string(), mk(28.0, 2.0)));
                out
            }
            _ => Vec::new(),
        }
    }
}

// ── Small dense matrix for diffusion output ─────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

// ── Drift / diffusion kernels ────────────────────────────────────────────────

pub(crate) fn drift_into(coeffs: &Coeffs, x: &[f64], t: f64, out: &mut [f64]) {
    match coeffs {
        Coeffs::Gbm { mu, .. } => {
            out[0] = mu * x[0];
        }
        Coeffs::Mueller { shape } => {
            let (_, g) = mueller_potential(x[0], x[1], shape).expect("finite state");
            out[0] = -g[0];
            out[1] = -g[1];
        }
        Coeffs::Periodic { omega, big_omega, sigma: _ } => {
            let scale = 2.0 * PI / omega;
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let g = 1.0 + r * ((2.0 * PI * t).cos() - 1.0);
            out[0] = scale * (-big_omega * x[1] + x[0] * g);
            out[1] = scale * (big_omega * x[0] + x[1] * g);
        }
        Coeffs::Lorenz { sigma, rho, beta, .. } => {
            out[0] = sigma * (x[1] - x[0]);
            out[1] = x[0] * (rho - x[2]) - x[1];
            out[2] = x[0] * x[1] - beta * x[2];
        }
        Coeffs::Ou { theta, mu, .. } => {
            out[0] = theta * (mu - x[0]);
        }
        Coeffs::InhOu { a, omega, theta, .. } => {
            out[0] = a * (omega * t).cos() - theta * x[0];
        }
        Coeffs::DoubleWell { alpha, .. } => {
            out[0] = -4.0 * x[0] * (x[0] * x[0] - 1.0);
            out[1] = -2.0 * alpha * x[1];
        }
        Coeffs::CoupledDoubleWell { alpha, .. } => {
            out[0] = -4.0 * x[0] * (x[0] * x[0] - 1.0) - alpha * x[1];
            out[1] = -x[1] - alpha * x[0];
        }
        Coeffs::Duffing { delta, alpha, beta, gamma, omega, .. } => {
            out[0] = x[1];
            out[1] = -delta * x[1] - alpha * x[0] - beta * x[0] * x[0] * x[0] + gamma * (omega * t).cos();
        }
        Coeffs::PerturbedCycle { period, .. } => {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = period * (x[0] - x[1] - x[0] * r2);
            out[1] = period * (x[0] + x[1] - x[1] * r2);
        }
        Coeffs::PredatorPrey { r, a, b, k, s, g, d_mat, v1, v2, .. } => {
            let (px, y1, y2) = (x[0], x[1], x[2]);
            out[0] = px * (r - a * px + s * y1 - b * y2);
            out[1] = k * px * y2 - y1 * (g * px + d_mat + v1);
            out[2] = d_mat * y1 - v2 * y2;
        }
        Coeffs::Fluxgate { c, lambda, omega, .. } => {
            // x = [x1, x2, x3, y1, y2, y3]; each core is driven by the next
            // core's field plus its own colored-noise component.
            for j in 0..3 {
                let next = (j + 1) % 3;
                out[j] = -x[j] + (c * (x[j] + lambda * x[next] + x[3 + j])).tanh();
                out[3 + j] = -omega * x[3 + j];
            }
        }
    }
}

pub(crate) fn diffusion_into(coeffs: &Coeffs, x: &[f64], t: f64, out: &mut [f64], cols: usize) {
    let _ = t;
    out.fill(0.0);
    match coeffs {
        Coeffs::Gbm { sigma, .. } => {
            out[0] = sigma * x[0];
        }
        Coeffs::Mueller { shape } => {
            let s = (2.0 / shape.beta).sqrt();
            out[0] = s;
            out[cols + 1] = s;
        }
        Coeffs::Periodic { omega, sigma, .. } => {
            let s = sigma * (2.0 * PI / omega).sqrt();
            out[0] = s * x[0] * x[1];
            out[cols] = s * x[1] * x[1];
        }
        Coeffs::Lorenz { eta, .. } => {
            for j in 0..3 {
                out[j * cols + j] = eta[j];
            }
        }
        Coeffs::Ou { sigma, .. } => {
            out[0] = *sigma;
        }
        Coeffs::InhOu { sigma, .. } => {
            out[0] = *sigma;
        }
        Coeffs::DoubleWell { beta, .. } | Coeffs::CoupledDoubleWell { beta, .. } => {
            let s = (2.0 / beta).sqrt();
            out[0] = s;
            out[cols + 1] = s;
        }
        Coeffs::Duffing { epsilon, .. } => {
            out[cols] = epsilon.sqrt();
        }
        Coeffs::PerturbedCycle { period, sigma } => {
            let s = sigma * period.sqrt();
            out[0] = s * x[0] * x[1];
            out[cols + 1] = s * x[1] * x[1];
        }
        Coeffs::PredatorPrey { sig, sigma4, .. } => {
            out[0] = sig[0] * x[0];
            out[cols + 1] = sig[1] * x[1];
            match sigma4 {
                // Channels: [B1, B2, B3(reproduction), B4].
                Some(s4) => {
                    out[cols + 2] = s4 * x[0] * x[2];
                    out[2 * cols + 3] = sig[2] * x[2];
                }
                None => {
                    out[2 * cols + 2] = sig[2] * x[2];
                }
            }
        }
        Coeffs::Fluxgate { epsilon, omega, .. } => {
            let s = omega * epsilon.sqrt();
            for j in 0..3 {
                out[(3 + j) * cols + j] = s;
            }
        }
    }
}

// ── Registry JSON interface ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemRecord {
    pub id: SystemId,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub dt_fine: f64,
    pub stride_k: usize,
    pub horizon_steps_coarse: usize,
    pub param_spec: Vec<ParamRange>,
    pub ic_box: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryDoc {
    pub systems: Vec<SystemRecord>,
}

pub fn registry_to_json() -> String {
    let doc = RegistryDoc {
        systems: registry()
            .iter()
            .map(|s| SystemRecord {
                id: s.id,
                state_dim: s.state_dim,
                noise_dim: s.noise_dim,
                dt_fine: s.dt_fine,
                stride_k: s.stride_k,
                horizon_steps_coarse: s.horizon_steps_coarse,
                param_spec: s.param_spec.clone(),
                ic_box: s.ic_box.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("registry serializes")
}

pub fn registry_from_json(text: &str) -> Result<RegistryDoc> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, StreamRole};

    fn params(id: SystemId, pairs: &[(&str, f64)]) -> ParamVector {
        let _ = id;
        ParamVector::from_pairs(pairs)
    }

    #[test]
    fn registry_has_thirteen_systems_with_valid_defaults() {
        let reg = registry();
        assert_eq!(reg.len(), 13);
        for s in reg {
            assert!(s.state_dim >= 1 && s.state_dim <= 3);
            assert!(s.stride_k >= 2);
            assert!(s.dt_fine > 0.0);
            assert_eq!(s.ic_box.len(), s.state_dim);
            for r in &s.param_spec {
                assert!(r.lo <= r.hi, "{}: {}", s.id, r.name);
            }
        }
        assert_eq!(get(SystemId::Fluxgate).internal_dim, 6);
        assert_eq!(get(SystemId::Fluxgate).state_dim, 3);
        assert_eq!(get(SystemId::PredatorPreyVariant).noise_dim, 4);
    }

    #[test]
    fn gbm_drift_matches_hand_value() {
        let sys = get(SystemId::Gbm);
        let p = params(sys.id, &[("mu", 0.1), ("sigma", 0.2)]);
        let b = sys.drift(&p, &[2.0], 0.0).unwrap();
        assert!((b[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ou_drift_vanishes_at_mean() {
        let sys = get(SystemId::Ou);
        let p = params(sys.id, &[("theta", 0.5), ("mu", 3.0), ("sigma", 0.1)]);
        let b = sys.drift(&p, &[3.0], 0.0).unwrap();
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn lorenz_drift_matches_hand_value() {
        let sys = get(SystemId::StochasticLorenz);
        let p = params(
            sys.id,
            &[
                ("sigma", 10.0),
                ("rho", 28.0),
                ("beta", 8.0 / 3.0),
                ("eta1", 0.5),
                ("eta2", 0.5),
                ("eta3", 0.5),
            ],
        );
        let b = sys.drift(&p, &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert!((b[0] - 0.0).abs() < 1e-15);
        assert!((b[1] - 26.0).abs() < 1e-15);
        assert!((b[2] - (1.0 - 8.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn gbm_diffusion_matches_hand_value() {
        let sys = get(SystemId::Gbm);
        let p = params(sys.id, &[("mu", 0.1), ("sigma", 0.2)]);
        let m = sys.diffusion(&p, &[5.0], 0.0).unwrap();
        assert_eq!((m.rows, m.cols), (1, 1));
        assert!((m.at(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mueller_diffusion_is_isotropic() {
        let sys = get(SystemId::Mueller);
        let p = params(
            sys.id,
            &[
                ("a_scale", 1.0),
                ("b_scale", 1.0),
                ("c_scale", 1.0),
                ("d_scale", 1.0),
                ("x_shift", 0.0),
                ("y_shift", 0.0),
                ("beta", 2.0),
            ],
        );
        let m = sys.diffusion(&p, &[0.3, -0.4], 0.0).unwrap();
        assert!((m.at(0, 0) - 1.0).abs() < 1e-15);
        assert!((m.at(1, 1) - 1.0).abs() < 1e-15);
        assert_eq!(m.at(0, 1), 0.0);
        assert_eq!(m.at(1, 0), 0.0);
    }

    #[test]
    fn periodic_oscillator_diffusion_is_a_column() {
        let sys = get(SystemId::PeriodicOscillator);
        let p = params(
            sys.id,
            &[("omega", 2.0 * PI), ("big_omega", 1.0), ("sigma", 1.0)],
        );
        let m = sys.diffusion(&p, &[1.0, 2.0], 0.0).unwrap();
        assert_eq!((m.rows, m.cols), (2, 1));
        assert!((m.at(0, 0) - 2.0).abs() < 1e-12);
        assert!((m.at(1, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mueller_value_dominated_by_first_term_near_first_minimum() {
        let shape = MuellerShape::base(1.0);
        let (v, _) = mueller_potential(1.0, 0.0, &shape).unwrap();
        // Independent four-term sum.
        let mut expect = 0.0;
        for i in 0..4 {
            let dx = 1.0 - MUELLER_X[i];
            let dy = 0.0 - MUELLER_Y[i];
            expect += MUELLER_D[i]
                * (MUELLER_A[i] * dx * dx + MUELLER_B[i] * dx * dy + MUELLER_C[i] * dy * dy).exp();
        }
        assert!((v - expect).abs() < 1e-12 * expect.abs());
        // The first exponential is at its peak here and has the largest weight.
        let term0 = MUELLER_D[0];
        assert!(term0.abs() >= 170.0);
    }

    #[test]
    fn mueller_gradient_matches_finite_differences() {
        let shape = MuellerShape::scaled(1.1, 0.9, 1.05, 1.2, 0.05, -0.03, 1.0);
        let mut rng = substream(42, 0, StreamRole::Generic, 0, 0, 0);
        let step = 1e-5;
        for _ in 0..20 {
            let x1 = rng.uniform(-1.2, 1.2);
            let x2 = rng.uniform(-0.5, 1.8);
            let (_, g) = mueller_potential(x1, x2, &shape).unwrap();
            let (vp, _) = mueller_potential(x1 + step, x2, &shape).unwrap();
            let (vm, _) = mueller_potential(x1 - step, x2, &shape).unwrap();
            let fd0 = (vp - vm) / (2.0 * step);
            let (vp, _) = mueller_potential(x1, x2 + step, &shape).unwrap();
            let (vm, _) = mueller_potential(x1, x2 - step, &shape).unwrap();
            let fd1 = (vp - vm) / (2.0 * step);
            let denom0 = g[0].abs().max(1e-8);
            let denom1 = g[1].abs().max(1e-8);
            assert!((g[0] - fd0).abs() / denom0 < 1e-6, "{x1} {x2}");
            assert!((g[1] - fd1).abs() / denom1 < 1e-6, "{x1} {x2}");
        }
    }

    #[test]
    fn mueller_unit_scaling_equals_base() {
        let base = MuellerShape::base(0.7);
        let scaled = MuellerShape::scaled(1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.7);
        assert_eq!(base, scaled);
        let (v0, g0) = mueller_potential(0.2, 0.9, &base).unwrap();
        let (v1, g1) = mueller_potential(0.2, 0.9, &scaled).unwrap();
        assert_eq!(v0, v1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn sample_params_is_deterministic_and_in_range() {
        let sys = get(SystemId::Gbm);
        let mut r1 = substream(9, sys.id.tag(), StreamRole::Params, 0, 0, 0);
        let mut r2 = substream(9, sys.id.tag(), StreamRole::Params, 0, 0, 0);
        let p1 = sys.sample_params(&mut r1);
        let p2 = sys.sample_params(&mut r2);
        assert_eq!(p1, p2);

        let mut rng = substream(10, sys.id.tag(), StreamRole::Params, 0, 0, 0);
        let mut min_mu = f64::INFINITY;
        let mut max_mu = f64::NEG_INFINITY;
        for _ in 0..10_000 {
            let p = sys.sample_params(&mut rng);
            let mu = p.get(sys.id, "mu").unwrap();
            min_mu = min_mu.min(mu);
            max_mu = max_mu.max(mu);
        }
        assert!(min_mu >= 0.01, "{min_mu}");
        assert!(max_mu <= 0.15, "{max_mu}");
    }

    #[test]
    fn degenerate_range_yields_constant() {
        let sys = get(SystemId::Fluxgate);
        let mut rng = substream(1, sys.id.tag(), StreamRole::Params, 0, 0, 0);
        for _ in 0..50 {
            let p = sys.sample_params(&mut rng);
            assert_eq!(p.get(sys.id, "omega").unwrap(), 3.0);
        }
    }

    #[test]
    fn sample_initial_respects_boxes() {
        let gbm = get(SystemId::Gbm);
        let lorenz = get(SystemId::StochasticLorenz);
        let mut rng = substream(2, 0, StreamRole::InitialCondition, 0, 0, 0);
        for _ in 0..1000 {
            let x = gbm.sample_initial(&mut rng);
            assert!(x[0] >= 50.0 && x[0] <= 100.0);
            let y = lorenz.sample_initial(&mut rng);
            assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let mut a = substream(3, 1, StreamRole::InitialCondition, 4, 5, 0);
        let mut b = substream(3, 1, StreamRole::InitialCondition, 4, 5, 0);
        assert_eq!(gbm.sample_initial(&mut a), gbm.sample_initial(&mut b));
    }

    #[test]
    fn drift_and_diffusion_stay_finite_on_random_inputs() {
        let mut rng = substream(77, 0, StreamRole::Generic, 0, 0, 0);
        for sys in registry() {
            for _ in 0..1000 {
                let p = sys.sample_params(&mut rng);
                let x: Vec<f64> = (0..sys.internal_dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let t = rng.uniform(0.0, 10.0);
                let b = sys.drift(&p, &x, t).unwrap();
                assert!(b.iter().all(|v| v.is_finite()), "{}", sys.id);
                let m = sys.diffusion(&p, &x, t).unwrap();
                assert!(m.data.iter().all(|v| v.is_finite()), "{}", sys.id);
            }
        }
    }

    #[test]
    fn drift_is_pure() {
        let sys = get(SystemId::Duffing);
        let p = sys.presets()[0].1.clone();
        let x = [0.3, -0.7];
        let a = sys.drift(&p, &x, 1.5).unwrap();
        let b = sys.drift(&p, &x, 1.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_system_and_bad_inputs_are_rejected() {
        assert!(matches!(find("heat_equation"), Err(Error::UnknownSystem(_))));
        let sys = get(SystemId::Gbm);
        let p = ParamVector::from_pairs(&[("mu", 0.1), ("sigma", 0.2)]);
        assert!(sys.drift(&p, &[f64::NAN], 0.0).is_err());
        assert!(sys.drift(&p, &[1.0, 2.0], 0.0).is_err());
        let missing = ParamVector::from_pairs(&[("mu", 0.1)]);
        assert!(matches!(
            sys.drift(&missing, &[1.0], 0.0),
            Err(Error::MissingParam { .. })
        ));
    }

    #[test]
    fn registry_json_round_trips() {
        let text = registry_to_json();
        let doc = registry_from_json(&text).unwrap();
        assert_eq!(doc.systems.len(), 13);
        let again = serde_json::to_string_pretty(&doc).unwrap();
        assert_eq!(text, again);
        assert_eq!(doc.systems[0].id, SystemId::Gbm);
    }

    #[test]
    fn presets_cover_case_studies() {
        assert_eq!(get(SystemId::Duffing).presets().len(), 3);
        assert_eq!(get(SystemId::PredatorPrey).presets().len(), 3);
        assert_eq!(get(SystemId::StochasticLorenz).presets().len(), 9);
        for (_, p) in get(SystemId::PredatorPreyVariant).presets() {
            assert_eq!(p.get(SystemId::PredatorPreyVariant, "sigma4").unwrap(), 0.005);
        }
    }
}
