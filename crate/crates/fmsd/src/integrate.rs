//! Euler-Maruyama and Milstein stepping, paired fine/coarse simulation over
//! shared Brownian increments, and empirical convergence probes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{substream, RngStream, StreamRole};
use crate::sde::{Coeffs, ParamVector, SdeSystem, SystemId};

// ── Noise ────────────────────────────────────────────────────────────────────

/// Per-trajectory Gaussian increment source: each call to [`NoiseStream::fill`]
/// yields one fine step of `N(0, dt * I)` draws, one per channel.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    stream: RngStream,
    pub dt: f64,
    pub channels: usize,
}

impl NoiseStream {
    pub fn new(stream: RngStream, dt: f64, channels: usize) -> Self {
        NoiseStream { stream, dt, channels }
    }

    /// Substream for trajectory `(param_idx, ic_idx, noise_idx)` of a system.
    pub fn for_trajectory(
        base_seed: u64,
        system: SystemId,
        dt: f64,
        channels: usize,
        param_idx: u64,
        ic_idx: u64,
        noise_idx: u64,
    ) -> Self {
        let stream = substream(base_seed, system.tag(), StreamRole::Noise, param_idx, ic_idx, noise_idx);
        NoiseStream::new(stream, dt, channels)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let scale = self.dt.sqrt();
        for v in out.iter_mut() {
            *v = self.stream.gauss() * scale;
        }
    }
}

// ── Single steps ─────────────────────────────────────────────────────────────

/// Scratch buffers for repeated stepping without per-step allocation.
struct Stepper<'a> {
    sys: &'a SdeSystem,
    coeffs: Coeffs,
    b: Vec<f64>,
    s: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a SdeSystem, params: &ParamVector) -> Result<Self> {
        Ok(Stepper {
            sys,
            coeffs: sys.resolve(params)?,
            b: vec![0.0; sys.internal_dim],
            s: vec![0.0; sys.internal_dim * sys.noise_dim],
        })
    }

    /// In-place Euler-Maruyama update `x += b(x,t) dt + sigma(x,t) dw`.
    fn em(&mut self, x: &mut [f64], t: f64, dt: f64, dw: &[f64]) {
        crate::sde::drift_into(&self.coeffs, x, t, &mut self.b);
        crate::sde::diffusion_into(&self.coeffs, x, t, &mut self.s, self.sys.noise_dim);
        let q = self.sys.noise_dim;
        for i in 0..self.sys.internal_dim {
            let mut dx = self.b[i] * dt;
            let row = &self.s[i * q..(i + 1) * q];
            for j in 0..q {
                dx += row[j] * dw[j];
            }
            x[i] += dx;
        }
    }
}

/// One explicit Euler-Maruyama step in internal coordinates.
pub fn em_step(
    sys: &SdeSystem,
    params: &ParamVector,
    x: &[f64],
    t: f64,
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(Error::InvalidArg(format!("dt must be positive, got {dt}")));
    }
    if dw.len() != sys.noise_dim {
        return Err(Error::Dim(format!(
            "{}: noise length {} != noise dim {}",
            sys.id,
            dw.len(),
            sys.noise_dim
        )));
    }
    let b = sys.drift(params, x, t)?;
    let s = sys.diffusion(params, x, t)?;
    let mut out = x.to_vec();
    for i in 0..sys.internal_dim {
        let mut dx = b[i] * dt;
        for j in 0..sys.noise_dim {
            dx += s.at(i, j) * dw[j];
        }
        out[i] += dx;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: em_step output", sys.id)));
    }
    Ok(out)
}

/// Spatial derivative of the (scalar) diffusion coefficient. Analytic where
/// registered, central difference with step `1e-6 * (1 + |x|)` otherwise.
fn sigma_prime(sys: &SdeSystem, params: &ParamVector, x: f64, t: f64) -> Result<f64> {
    match sys.id {
        SystemId::Gbm => params.get(sys.id, "sigma"),
        SystemId::Ou => Ok(0.0),
        _ => {
            let e = 1e-6 * (1.0 + x.abs());
            let sp = sys.diffusion(params, &[x + e], t)?.at(0, 0);
            let sm = sys.diffusion(params, &[x - e], t)?.at(0, 0);
            Ok((sp - sm) / (2.0 * e))
        }
    }
}

/// One Milstein step for a one-dimensional system: the Euler-Maruyama update
/// plus the `0.5 sigma sigma' (dw^2 - dt)` correction.
pub fn milstein_step(
    sys: &SdeSystem,
    params: &ParamVector,
    x: f64,
    t: f64,
    dt: f64,
    dw: f64,
) -> Result<f64> {
    if sys.state_dim != 1 {
        return Err(Error::Dim(format!(
            "milstein_step requires a 1-dimensional system, {} has state dim {}",
            sys.id, sys.state_dim
        )));
    }
    let base = em_step(sys, params, &[x], t, dt, &[dw])?[0];
    let sigma = sys.diffusion(params, &[x], t)?.at(0, 0);
    let sp = sigma_prime(sys, params, x, t)?;
    Ok(base + 0.5 * sigma * sp * (dw * dw - dt))
}

// ── Paired fine/coarse simulation ────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// Any |state component| beyond this aborts the trajectory as rejected.
    pub blowup_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { blowup_bound: 1e8 }
    }
}

/// A fine path at step `dt`, the coarse path at `k * dt` driven by aggregated
/// increments of the same Brownian motion, and the error series at coarse
/// timestamps. All states are in observed coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub system: SystemId,
    pub dt_fine: f64,
    pub stride_k: usize,
    /// States at `m * dt`, `m = 0..=k*n`.
    pub fine: Vec<Vec<f64>>,
    /// States at `n * k * dt`, `n = 0..=n_coarse`.
    pub coarse: Vec<Vec<f64>>,
    /// Aggregated increments per coarse window, `n = 0..n_coarse`, each of
    /// length `noise_dim`.
    pub agg_noise: Vec<Vec<f64>>,
    /// `fine(n k dt) - coarse(n k dt)` per coarse timestamp.
    pub err: Vec<Vec<f64>>,
}

impl TrajectoryPair {
    pub fn n_coarse(&self) -> usize {
        self.coarse.len() - 1
    }

    pub fn coarse_dt(&self) -> f64 {
        self.stride_k as f64 * self.dt_fine
    }
}

fn check_blowup(x: &[f64], bound: f64, step: usize) -> Result<()> {
    let mut mag: f64 = 0.0;
    for v in x {
        if !v.is_finite() {
            return Err(Error::BlowUp {
                step,
                magnitude: f64::INFINITY,
                bound,
            });
        }
        mag = mag.max(v.abs());
    }
    if mag > bound {
        return Err(Error::BlowUp {
            step,
            magnitude: mag,
            bound,
        });
    }
    Ok(())
}

/// Simulate the fine and coarse paths of one trajectory over shared noise.
///
/// The fine path takes `n_coarse * stride_k` Euler-Maruyama steps of `noise.dt`;
/// the coarse path takes `n_coarse` steps of `stride_k * noise.dt` driven by the
/// per-window sums of the fine increments. Both start from the same `x0`.
pub fn simulate_pair(
    sys: &SdeSystem,
    params: &ParamVector,
    x0_observed: &[f64],
    noise: &mut NoiseStream,
    n_coarse: usize,
    stride_k: usize,
    opts: &SimOptions,
) -> Result<TrajectoryPair> {
    if noise.channels != sys.noise_dim {
        return Err(Error::Dim(format!(
            "{}: noise stream has {} channels, system needs {}",
            sys.id, noise.channels, sys.noise_dim
        )));
    }
    if stride_k == 0 || n_coarse == 0 {
        return Err(Error::InvalidArg("n_coarse and stride_k must be positive".into()));
    }
    let dt = noise.dt;
    let q = sys.noise_dim;
    let mut stepper = Stepper::new(sys, params)?;

    let x0 = sys.extend_initial(x0_observed)?;
    let observe = |x: &[f64]| x[..sys.state_dim].to_vec();

    // Fine path, accumulating per-window sums as we go.
    let mut fine = Vec::with_capacity(n_coarse * stride_k + 1);
    let mut agg_noise = Vec::with_capacity(n_coarse);
    let mut fine_at_coarse = Vec::with_capacity(n_coarse + 1);
    let mut x = x0.clone();
    fine.push(observe(&x));
    fine_at_coarse.push(x.clone());
    let mut dw = vec![0.0; q];
    let mut window = vec![0.0; q];
    for n in 0..n_coarse {
        window.fill(0.0);
        for i in 0..stride_k {
            let m = n * stride_k + i;
            let t = m as f64 * dt;
            noise.fill(&mut dw);
            stepper.em(&mut x, t, dt, &dw);
            check_blowup(&x, opts.blowup_bound, m + 1)?;
            fine.push(observe(&x));
            for c in 0..q {
                window[c] += dw[c];
            }
        }
        agg_noise.push(window.clone());
        fine_at_coarse.push(x.clone());
    }

    // Coarse path over the aggregated increments.
    let h = stride_k as f64 * dt;
    let mut coarse = Vec::with_capacity(n_coarse + 1);
    let mut y = x0;
    coarse.push(observe(&y));
    for n in 0..n_coarse {
        let t = n as f64 * h;
        stepper.em(&mut y, t, h, &agg_noise[n]);
        check_blowup(&y, opts.blowup_bound, n + 1)?;
        coarse.push(observe(&y));
    }

    let err: Vec<Vec<f64>> = fine_at_coarse
        .iter()
        .zip(coarse.iter())
        .map(|(f, c)| (0..sys.state_dim).map(|d| f[d] - c[d]).collect())
        .collect();

    Ok(TrajectoryPair {
        system: sys.id,
        dt_fine: dt,
        stride_k,
        fine,
        coarse,
        agg_noise,
        err,
    })
}

/// Plain Euler-Maruyama run at the stream's own step size, drawing fresh
/// increments. Returns the observed path and the increments that drove it.
pub fn simulate_path(
    sys: &SdeSystem,
    params: &ParamVector,
    x0_observed: &[f64],
    noise: &mut NoiseStream,
    steps: usize,
    opts: &SimOptions,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if noise.channels != sys.noise_dim {
        return Err(Error::Dim(format!(
            "{}: noise stream has {} channels, system needs {}",
            sys.id, noise.channels, sys.noise_dim
        )));
    }
    let dt = noise.dt;
    let mut stepper = Stepper::new(sys, params)?;
    let mut x = sys.extend_initial(x0_observed)?;
    let mut path = Vec::with_capacity(steps + 1);
    let mut incr = Vec::with_capacity(steps);
    path.push(x[..sys.state_dim].to_vec());
    let mut dw = vec![0.0; sys.noise_dim];
    for m in 0..steps {
        noise.fill(&mut dw);
        stepper.em(&mut x, m as f64 * dt, dt, &dw);
        check_blowup(&x, opts.blowup_bound, m + 1)?;
        path.push(x[..sys.state_dim].to_vec());
        incr.push(dw.clone());
    }
    Ok((path, incr))
}

// ── Strong-order probe ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    EulerMaruyama,
    Milstein,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "em" | "euler_maruyama" | "euler-maruyama" => Ok(Method::EulerMaruyama),
            "milstein" => Ok(Method::Milstein),
            other => Err(Error::InvalidArg(format!("unknown method `{other}`"))),
        }
    }
}

/// Setup for the geometric-Brownian-motion strong-order probe. The analytic
/// solution `X_t = X0 exp((mu - sigma^2/2) t + sigma W_t)` is the reference.
#[derive(Clone, Debug)]
pub struct StrongOrderConfig {
    pub mu: f64,
    pub sigma: f64,
    pub x0: f64,
    pub h_min: f64,
    pub t_end: f64,
    /// Step sizes as multiples of `h_min`; every entry must divide the largest.
    pub k_list: Vec<usize>,
    pub m: usize,
    pub seed: u64,
}

impl Default for StrongOrderConfig {
    fn default() -> Self {
        StrongOrderConfig {
            mu: 0.05,
            sigma: 0.5,
            x0: 1.0,
            h_min: 1e-4,
            t_end: 1.0,
            k_list: vec![1, 2, 5, 10, 100],
            m: 2000,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OrderProbeResult {
    pub h: Vec<f64>,
    pub mean_err: Vec<f64>,
    pub ci95: Vec<f64>,
    pub slope: f64,
}

impl OrderProbeResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,mean_strong_error,ci95\n");
        for i in 0..self.h.len() {
            out.push_str(&format!("{:e},{:e},{:e}\n", self.h[i], self.mean_err[i], self.ci95[i]));
        }
        out
    }
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Expected maximal path-wise error of the chosen integrator on GBM against
/// the analytic solution, over a list of step sizes sharing one Brownian path.
/// The sup runs over the coarsest grid so every step size is compared at the
/// same timestamps.
pub fn strong_order_probe(method: Method, cfg: &StrongOrderConfig) -> Result<OrderProbeResult> {
    if cfg.k_list.len() < 2 {
        return Err(Error::InvalidArg(
            "strong_order_probe needs at least 2 step sizes".into(),
        ));
    }
    let k_max = *cfg.k_list.iter().max().unwrap();
    let n_fine = (cfg.t_end / cfg.h_min).round() as usize;
    for &k in &cfg.k_list {
        if k == 0 || k_max % k != 0 || n_fine % k != 0 {
            return Err(Error::InvalidArg(format!(
                "stride {k} must be positive and divide both {k_max} and {n_fine}"
            )));
        }
    }

    let per_real: Vec<Vec<f64>> = (0..cfg.m)
        .into_par_iter()
        .map(|real| {
            let mut stream = substream(cfg.seed, SystemId::Gbm.tag(), StreamRole::Noise, real as u64, 0, 0);
            let sqrt_h = cfg.h_min.sqrt();
            let mut dw_fine = vec![0.0; n_fine];
            for v in dw_fine.iter_mut() {
                *v = stream.gauss() * sqrt_h;
            }
            // Brownian path at fine resolution.
            let mut w = vec![0.0; n_fine + 1];
            for i in 0..n_fine {
                w[i + 1] = w[i] + dw_fine[i];
            }
            cfg.k_list
                .iter()
                .map(|&k| {
                    let h = k as f64 * cfg.h_min;
                    let n = n_fine / k;
                    let mut x = cfg.x0;
                    let mut sup = 0.0f64;
                    // Compare on the coarsest grid: every (k_max / k) steps.
                    let cmp_every = k_max / k;
                    for j in 0..n {
                        let mut dwj = 0.0;
                        for i in 0..k {
                            dwj += dw_fine[j * k + i];
                        }
                        let mut next = x + cfg.mu * x * h + cfg.sigma * x * dwj;
                        if method == Method::Milstein {
                            next += 0.5 * cfg.sigma * x * cfg.sigma * (dwj * dwj - h);
                        }
                        x = next;
                        if (j + 1) % cmp_every == 0 {
                            let t = (j + 1) as f64 * h;
                            let exact = cfg.x0
                                * ((cfg.mu - 0.5 * cfg.sigma * cfg.sigma) * t
                                    + cfg.sigma * w[(j + 1) * k])
                                    .exp();
                            sup = sup.max((x - exact).abs());
                        }
                    }
                    sup
                })
                .collect()
        })
        .collect();

    let mut mean_err = Vec::new();
    let mut ci95 = Vec::new();
    for ki in 0..cfg.k_list.len() {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for row in &per_real {
            sum += row[ki];
            sum2 += row[ki] * row[ki];
        }
        let mean = sum / cfg.m as f64;
        let var = (sum2 / cfg.m as f64 - mean * mean).max(0.0);
        mean_err.push(mean);
        ci95.push(1.96 * (var / cfg.m as f64).sqrt());
    }
    let h: Vec<f64> = cfg.k_list.iter().map(|&k| k as f64 * cfg.h_min).collect();
    let slope = fit_slope(
        &h.iter().map(|v| v.ln()).collect::<Vec<_>>(),
        &mean_err.iter().map(|v| v.ln()).collect::<Vec<_>>(),
    );
    Ok(OrderProbeResult { h, mean_err, ci95, slope })
}

// ── Coarse-error scaling probe ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ScalingProbeConfig {
    pub k_list: Vec<usize>,
    pub n_coarse: usize,
    pub m: usize,
    pub seed: u64,
}

impl Default for ScalingProbeConfig {
    fn default() -> Self {
        ScalingProbeConfig {
            k_list: vec![2, 5, 10, 20, 50],
            n_coarse: 50,
            m: 2000,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingProbeResult {
    pub k: Vec<usize>,
    pub h: Vec<f64>,
    pub mean_final_err: Vec<f64>,
    pub slope: f64,
}

impl ScalingProbeResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,h,mean_final_err\n");
        for i in 0..self.k.len() {
            out.push_str(&format!("{},{:e},{:e}\n", self.k[i], self.h[i], self.mean_final_err[i]));
        }
        out
    }
}

/// Reference coefficients for the scaling probe on the two analytic families.
/// The OU initial state sits at the mean so the h^{3/2} stochastic term is not
/// swamped by the h^2 deterministic relaxation error.
pub fn scaling_probe_defaults(id: SystemId) -> Option<(ParamVector, Vec<f64>)> {
    match id {
        SystemId::Gbm => Some((
            ParamVector::from_pairs(&[("mu", 0.05), ("sigma", 0.5)]),
            vec![1.0],
        )),
        SystemId::Ou => Some((
            ParamVector::from_pairs(&[("theta", 0.5), ("mu", 2.0), ("sigma", 0.5)]),
            vec![2.0],
        )),
        _ => None,
    }
}

/// Mean magnitude of the final-step coarse error over a fixed number of coarse
/// steps, as a function of the coarse step `k * dt`. The same fine increments
/// drive every stride.
pub fn coarse_error_scaling_probe(
    sys: &SdeSystem,
    params: &ParamVector,
    x0_observed: &[f64],
    cfg: &ScalingProbeConfig,
) -> Result<ScalingProbeResult> {
    if cfg.k_list.is_empty() {
        return Err(Error::InvalidArg("empty stride list".into()));
    }
    let k_max = *cfg.k_list.iter().max().unwrap();
    let dt = sys.dt_fine;
    let q = sys.noise_dim;
    let steps_max = cfg.n_coarse * k_max;
    let coeffs = sys.resolve(params)?;
    let x0 = sys.extend_initial(x0_observed)?;
    let opts = SimOptions::default();

    let per_real: Vec<Vec<f64>> = (0..cfg.m)
        .into_par_iter()
        .map(|real| {
            let mut stream =
                substream(cfg.seed, sys.id.tag(), StreamRole::Noise, real as u64, 0, 0);
            let sqrt_dt = dt.sqrt();
            let mut incr = vec![0.0; steps_max * q];
            for v in incr.iter_mut() {
                *v = stream.gauss() * sqrt_dt;
            }
            let mut stepper = Stepper {
                sys,
                coeffs: coeffs.clone(),
                b: vec![0.0; sys.internal_dim],
                s: vec![0.0; sys.internal_dim * q],
            };
            cfg.k_list
                .iter()
                .map(|&k| {
                    let n = cfg.n_coarse;
                    // Fine path over the shared increment prefix.
                    let mut x = x0.clone();
                    for m in 0..n * k {
                        let t = m as f64 * dt;
                        stepper.em(&mut x, t, dt, &incr[m * q..(m + 1) * q]);
                        if check_blowup(&x, opts.blowup_bound, m).is_err() {
                            return f64::NAN;
                        }
                    }
                    // Coarse path over aggregated windows.
                    let h = k as f64 * dt;
                    let mut y = x0.clone();
                    let mut window = vec![0.0; q];
                    for nn in 0..n {
                        window.fill(0.0);
                        for i in 0..k {
                            let m = nn * k + i;
                            for c in 0..q {
                                window[c] += incr[m * q + c];
                            }
                        }
                        let t = nn as f64 * h;
                        stepper.em(&mut y, t, h, &window);
                        if check_blowup(&y, opts.blowup_bound, nn).is_err() {
                            return f64::NAN;
                        }
                    }
                    let mut norm2 = 0.0;
                    for d in 0..sys.state_dim {
                        let e = x[d] - y[d];
                        norm2 += e * e;
                    }
                    norm2.sqrt()
                })
                .collect()
        })
        .collect();

    let mut mean_final_err = Vec::new();
    for ki in 0..cfg.k_list.len() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in &per_real {
            if row[ki].is_finite() {
                sum += row[ki];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArg("all realizations blew up".into()));
        }
        mean_final_err.push(sum / count as f64);
    }
    let h: Vec<f64> = cfg.k_list.iter().map(|&k| k as f64 * dt).collect();
    let slope = if cfg.k_list.len() >= 2 {
        fit_slope(
            &h.iter().map(|v| v.ln()).collect::<Vec<_>>(),
            &mean_final_err.iter().map(|v| v.ln()).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    Ok(ScalingProbeResult {
        k: cfg.k_list.clone(),
        h,
        mean_final_err,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{self, SystemId};

    #[test]
    fn noise_increment_variance_matches_dt() {
        let dt = 1e-3;
        let mut ns = NoiseStream::for_trajectory(5, SystemId::Ou, dt, 1, 0, 0, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut buf = [0.0];
        for _ in 0..n {
            ns.fill(&mut buf);
            sum += buf[0];
            sum2 += buf[0] * buf[0];
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!((var - dt).abs() / dt < 0.02, "var {var}");
    }

    #[test]
    fn em_step_hand_values() {
        let gbm = sde::get(SystemId::Gbm);
        let p = ParamVector::from_pairs(&[("mu", 0.1), ("sigma", 0.2)]);
        let out = em_step(gbm, &p, &[1.0], 0.0, 0.01, &[0.05]).unwrap();
        assert!((out[0] - 1.011).abs() < 1e-15);

        let ou = sde::get(SystemId::Ou);
        let p = ParamVector::from_pairs(&[("theta", 1.0), ("mu", 2.0), ("sigma", 0.3)]);
        let out = em_step(ou, &p, &[0.0], 0.0, 0.1, &[0.0]).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn em_step_zero_field_is_identity() {
        // OU with theta = 0 and sigma = 0 has b = 0 and sigma = 0.
        let ou = sde::get(SystemId::Ou);
        let p = ParamVector::from_pairs(&[("theta", 0.0), ("mu", 2.0), ("sigma", 0.0)]);
        let out = em_step(ou, &p, &[1.25], 3.0, 0.1, &[0.7]).unwrap();
        assert_eq!(out[0], 1.25);
    }

    #[test]
    fn milstein_step_hand_value_and_degenerate_cases() {
        let gbm = sde::get(SystemId::Gbm);
        let p = ParamVector::from_pairs(&[("mu", 0.1), ("sigma", 0.2)]);
        let out = milstein_step(gbm, &p, 1.0, 0.0, 0.01, 0.05).unwrap();
        assert!((out - 1.01085).abs() < 1e-12, "{out}");

        // Additive noise: correction vanishes.
        let ou = sde::get(SystemId::Ou);
        let p_ou = ParamVector::from_pairs(&[("theta", 0.4), ("mu", 2.0), ("sigma", 0.3)]);
        let m = milstein_step(ou, &p_ou, 1.0, 0.0, 0.01, 0.07).unwrap();
        let e = em_step(ou, &p_ou, &[1.0], 0.0, 0.01, &[0.07]).unwrap()[0];
        assert_eq!(m, e);

        // dw^2 == dt exactly: correction vanishes.
        let dt: f64 = 0.01;
        let dw = dt.sqrt();
        let m = milstein_step(gbm, &p, 1.0, 0.0, dt, dw).unwrap();
        let e = em_step(gbm, &p, &[1.0], 0.0, dt, &[dw]).unwrap()[0];
        assert!((m - e).abs() < 1e-15);

        // Multi-dimensional systems are rejected.
        let lorenz = sde::get(SystemId::StochasticLorenz);
        let lp = lorenz.presets()[0].1.clone();
        assert!(milstein_step(lorenz, &lp, 1.0, 0.0, 0.01, 0.0).is_err());
    }

    #[test]
    fn simulate_pair_is_deterministic_and_consistent() {
        let sys = sde::get(SystemId::Gbm);
        let p = ParamVector::from_pairs(&[("mu", 0.1), ("sigma", 0.2)]);
        let mk = || NoiseStream::for_trajectory(11, sys.id, sys.dt_fine, 1, 0, 0, 0);
        let a = simulate_pair(sys, &p, &[60.0], &mut mk(), 5, 10, &SimOptions::default()).unwrap();
        let b = simulate_pair(sys, &p, &[60.0], &mut mk(), 5, 10, &SimOptions::default()).unwrap();
        assert_eq!(a, b);

        assert_eq!(a.fine.len(), 51);
        assert_eq!(a.coarse.len(), 6);
        assert_eq!(a.err.len(), 6);
        assert_eq!(a.agg_noise.len(), 5);
        assert_eq!(a.err[0], vec![0.0]);

        // Aggregated noise equals the sum of its constituent fine increments.
        let mut ns = mk();
        let mut buf = [0.0];
        for n in 0..5 {
            let mut sum = 0.0;
            for _ in 0..10 {
                ns.fill(&mut buf);
                sum += buf[0];
            }
            assert_eq!(sum, a.agg_noise[n][0]);
        }

        // First coarse state equals one public EM step over the window sum.
        let manual = em_step(sys, &p, &[60.0], 0.0, 10.0 * sys.dt_fine, &a.agg_noise[0]).unwrap();
        assert!((manual[0] - a.coarse[1][0]).abs() < 1e-12);
    }

    #[test]
    fn constant_coefficients_give_roundoff_error_only() {
        // theta = 0 makes the OU drift vanish; sigma is constant. The fine and
        // coarse paths then differ only by floating-point grouping.
        let sys = sde::get(SystemId::Ou);
        let p = ParamVector::from_pairs(&[("theta", 0.0), ("mu", 2.0), ("sigma", 0.3)]);
        let mut ns = NoiseStream::for_trajectory(3, sys.id, sys.dt_fine, 1, 0, 0, 0);
        let pair = simulate_pair(sys, &p, &[2.0], &mut ns, 20, 50, &SimOptions::default()).unwrap();
        for e in &pair.err {
            assert!(e[0].abs() < 1e-10, "{}", e[0]);
        }
    }

    #[test]
    fn stride_one_gives_exactly_zero_error() {
        let sys = sde::get(SystemId::Gbm);
        let p = ParamVector::from_pairs(&[("mu", 0.12), ("sigma", 0.15)]);
        let mut ns = NoiseStream::for_trajectory(4, sys.id, sys.dt_fine, 1, 0, 0, 0);
        let pair = simulate_pair(sys, &p, &[75.0], &mut ns, 30, 1, &SimOptions::default()).unwrap();
        for e in &pair.err {
            assert_eq!(e[0], 0.0);
        }
    }

    #[test]
    fn blowup_is_reported() {
        let sys = sde::get(SystemId::Gbm);
        // Huge drift at a tiny bound forces rejection.
        let p = ParamVector::from_pairs(&[("mu", 10.0), ("sigma", 0.0)]);
        let mut ns = NoiseStream::for_trajectory(5, sys.id, 1.0, 1, 0, 0, 0);
        let res = simulate_pair(sys, &p, &[100.0], &mut ns, 10, 2, &SimOptions { blowup_bound: 500.0 });
        assert!(matches!(res, Err(Error::BlowUp { .. })));
    }

    #[test]
    fn fluxgate_pair_has_observed_dims_only() {
        let sys = sde::get(SystemId::Fluxgate);
        let p = sys.sample_params(&mut substream(6, sys.id.tag(), StreamRole::Params, 0, 0, 0));
        let mut ns = NoiseStream::for_trajectory(6, sys.id, sys.dt_fine, 3, 0, 0, 0);
        let pair = simulate_pair(sys, &p, &[0.2, -0.1, 0.4], &mut ns, 10, 20, &SimOptions::default()).unwrap();
        assert_eq!(pair.fine[0].len(), 3);
        assert_eq!(pair.coarse[0].len(), 3);
        assert_eq!(pair.agg_noise[0].len(), 3);
    }

    #[test]
    fn strong_order_probe_rejects_short_lists() {
        let cfg = StrongOrderConfig {
            k_list: vec![10],
            m: 10,
            ..Default::default()
        };
        assert!(strong_order_probe(Method::EulerMaruyama, &cfg).is_err());
    }

    #[test]
    fn strong_order_quick_smoke() {
        // Reduced realization count; the acceptance suite runs the full probe.
        let cfg = StrongOrderConfig {
            m: 200,
            ..Default::default()
        };
        let em = strong_order_probe(Method::EulerMaruyama, &cfg).unwrap();
        assert!(em.slope > 0.3 && em.slope < 0.7, "EM slope {}", em.slope);
        let mil = strong_order_probe(Method::Milstein, &cfg).unwrap();
        assert!(mil.slope > 0.8 && mil.slope < 1.2, "Milstein slope {}", mil.slope);
        for i in 1..em.h.len() {
            assert!(em.mean_err[i] > em.mean_err[i - 1] * 0.5, "roughly increasing in h");
        }
    }

    #[test]
    fn deterministic_limit_has_order_one() {
        let cfg = StrongOrderConfig {
            sigma: 0.0,
            m: 8,
            ..Default::default()
        };
        let r = strong_order_probe(Method::EulerMaruyama, &cfg).unwrap();
        assert!(r.slope > 0.9 && r.slope < 1.1, "slope {}", r.slope);
    }

    #[test]
    fn scaling_probe_quick_smoke() {
        let (p, x0) = scaling_probe_defaults(SystemId::Gbm).unwrap();
        let cfg = ScalingProbeConfig {
            m: 200,
            ..Default::default()
        };
        let r = coarse_error_scaling_probe(sde::get(SystemId::Gbm), &p, &x0, &cfg).unwrap();
        assert!(r.slope > 0.7 && r.slope < 1.3, "gbm slope {}", r.slope);

        let (p, x0) = scaling_probe_defaults(SystemId::Ou).unwrap();
        let r = coarse_error_scaling_probe(sde::get(SystemId::Ou), &p, &x0, &cfg).unwrap();
        assert!(r.slope > 1.1 && r.slope < 1.9, "ou slope {}", r.slope);
    }

    #[test]
    fn scaling_probe_stride_one_is_exact() {
        let (p, x0) = scaling_probe_defaults(SystemId::Gbm).unwrap();
        let cfg = ScalingProbeConfig {
            k_list: vec![1, 2],
            n_coarse: 10,
            m: 20,
            seed: 9,
        };
        let r = coarse_error_scaling_probe(sde::get(SystemId::Gbm), &p, &x0, &cfg).unwrap();
        assert_eq!(r.mean_final_err[0], 0.0);
    }
}
