use serde::{Deserialize, Serialize};

use super::{check_label, deepfool, AttackResult, CountingClassifier, DeepFoolConfig, Run};
use crate::error::{Error, Result};
use crate::snn::Classifier;
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeFoolConfig {
    pub eta: f64,
    pub lambda: f64,
    pub l: f64,
    pub u: f64,
    pub max_outer_iters: usize,
    pub max_deepfool_iters: usize,
}

impl Default for SpikeFoolConfig {
    fn default() -> Self {
        SpikeFoolConfig { eta: 0.1, lambda: 2.0, l: 0.0, u: 1.0, max_outer_iters: 20, max_deepfool_iters: 50 }
    }
}

impl SpikeFoolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be non-negative".into()));
        }
        if !(self.lambda >= 1.0) {
            return Err(Error::Config("lambda must be at least 1".into()));
        }
        if !(self.l < self.u) {
            return Err(Error::Config("bounds need l < u".into()));
        }
        for b in [self.l, self.u] {
            if b.is_finite() && b.fract() != 0.0 {
                return Err(Error::Config(format!("bound {b} is not an integer")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput {
    pub x: Tensor,
    /// Every usable coordinate was spent without reaching the hyperplane.
    pub saturated: bool,
}

/// Moves `x` across the hyperplane `<w, z - target> = 0` one coordinate at
/// a time, largest `|w_i|` first, keeping every coordinate in `[l, u]`.
/// Each move aims slightly past the hyperplane.
pub fn linear_solver(x: &Tensor, target: &Tensor, w: &Tensor, l: f64, u: f64) -> Result<SolverOutput> {
    x.ensure_shape(w.shape())?;
    target.ensure_shape(w.shape())?;
    if w.max_abs() == 0.0 {
        return Err(Error::Validation("linear solver needs a nonzero normal".into()));
    }
    let mut xi = x.clone();
    let mut f: f64 = w.data().iter().zip(x.data().iter().zip(target.data())).map(|(wi, (a, b))| wi * (a - b)).sum();
    let sign_true = sign(f);
    if f == 0.0 {
        return Ok(SolverOutput { x: xi, saturated: false });
    }
    let beta = 0.001 * sign_true;
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| w.data()[i] != 0.0).collect();
    order.sort_by(|&a, &b| w.data()[b].abs().total_cmp(&w.data()[a].abs()));
    for i in order {
        let wi = w.data()[i];
        let pert = ((f + beta).abs() / wi.abs()).max(1e-4);
        let old = xi.data()[i];
        let new = (old - sign_true * wi.signum() * pert).clamp(l, u);
        xi.data_mut()[i] = new;
        f += wi * (new - old);
        if sign(f) != sign_true {
            return Ok(SolverOutput { x: xi, saturated: false });
        }
    }
    Ok(SolverOutput { x: xi, saturated: true })
}

/// Diagnostics for one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    /// `x_B - x_i` found by DeepFool from the current iterate.
    pub boundary_perturbation: Tensor,
    pub deepfool_success: bool,
    pub solver_saturated: bool,
    /// Label of the rounded iterate.
    pub label: usize,
}

/// Sparse boundary-walking attack on integer rasters. Each outer iteration
/// linearises the boundary with DeepFool, solves the sparse linear problem
/// and rounds the box-clipped result, which becomes the next start.
/// Stops early when rounding undoes the solver step.
pub fn spikefool<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    label: usize,
    cfg: &SpikeFoolConfig,
) -> Result<AttackResult> {
    spikefool_traced(net, x, label, cfg).map(|(r, _)| r)
}

pub fn spikefool_traced<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    label: usize,
    cfg: &SpikeFoolConfig,
) -> Result<(AttackResult, Vec<OuterStep>)> {
    cfg.validate()?;
    check_label(net, label)?;
    if x.data().iter().any(|&v| v.fract() != 0.0 || v < cfg.l || v > cfg.u) {
        return Err(Error::Validation("attack input must be integer-valued within [l, u]".into()));
    }
    // DeepFool queries are counted through the wrapper.
    let net = CountingClassifier::new(net);
    let mut run = Run::new(&net);
    let mut trace = Vec::new();
    let entry = run.label(x)?;
    if entry != label {
        return Ok((run.finish(x, x.clone(), label, entry, None), trace));
    }
    let df_cfg = DeepFoolConfig { eta: cfg.eta, max_iters: cfg.max_deepfool_iters, ..DeepFoolConfig::default() };
    let round = |t: &Tensor| t.map(|v| v.clamp(cfg.l, cfg.u).round());
    let mut xi = x.clone();
    let mut x_adv = x.clone();
    let mut adv_label = label;
    let mut diagnostic = None;
    for _ in 0..cfg.max_outer_iters {
        let df = match deepfool(&net, &xi, label, &df_cfg) {
            Ok(df) => df,
            Err(Error::DegenerateGradient(msg)) => {
                diagnostic = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        if df.normal.max_abs() == 0.0 {
            diagnostic = Some("boundary normal vanished".into());
            break;
        }
        let shift = df.x_boundary.zip_map(&xi, |b, a| b - a);
        let mut target = xi.clone();
        target.add_scaled(&shift, cfg.lambda);
        let solved = linear_solver(&xi, &target, &df.normal, cfg.l, cfg.u)?;
        let next = round(&solved.x);
        let stalled = next == xi;
        if !stalled {
            x_adv = next;
            xi = x_adv.clone();
            adv_label = run.label(&x_adv)?;
        }
        trace.push(OuterStep {
            boundary_perturbation: shift,
            deepfool_success: df.success,
            solver_saturated: solved.saturated,
            label: adv_label,
        });
        if stalled {
            // Deterministic from here on: every later iteration repeats this one.
            diagnostic = Some("stalled: rounding undid the solver step".into());
            break;
        }
        if adv_label != label {
            break;
        }
    }
    run.queries = net.count();
    Ok((run.finish(x, x_adv, label, adv_label, diagnostic), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn point_on_hyperplane_is_unchanged() {
        let x = t(&[1.0, 2.0]);
        let out = linear_solver(&x, &x, &t(&[1.0, -1.0]), f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(out.x, x);
        assert!(!out.saturated);
    }

    #[test]
    fn single_axis_normal_moves_one_coordinate() {
        let x = t(&[0.0, 0.0]);
        let target = t(&[3.0, 5.0]);
        let out = linear_solver(&x, &target, &t(&[1.0, 0.0]), f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(out.x.data()[1], 0.0);
        assert!(out.x.data()[0] > 3.0 && out.x.data()[0] < 3.01);
    }

    #[test]
    fn saturated_coordinate_hands_over_to_next() {
        let x = t(&[0.0, 0.0, 0.0]);
        let target = t(&[0.75, 0.75, 0.75]);
        // <w, target> = 2.625: coordinate 0 saturates at 1, coordinate 1 finishes.
        let w = t(&[2.0, 1.0, 0.5]);
        let out = linear_solver(&x, &target, &w, 0.0, 1.0).unwrap();
        assert_eq!(out.x.data()[0], 1.0);
        assert_eq!(out.x.data()[2], 0.0);
        assert!(!out.saturated);
        assert!((out.x.data()[1] - 0.626).abs() < 1e-12);
        let target = t(&[1.0, 1.0, 1.0]);
        let w = t(&[2.0, 0.2, 0.1]);
        let out = linear_solver(&x, &target, &w, 0.0, 1.0).unwrap();
        assert!(out.saturated);
        assert_eq!(out.x.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_normal_is_rejected() {
        let x = t(&[0.0]);
        assert!(linear_solver(&x, &x, &t(&[0.0]), 0.0, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SpikeFoolConfig::default().validate().is_ok());
        let bad = [
            SpikeFoolConfig { lambda: 0.5, ..Default::default() },
            SpikeFoolConfig { eta: -1.0, ..Default::default() },
            SpikeFoolConfig { l: 1.0, u: 1.0, ..Default::default() },
            SpikeFoolConfig { u: 1.5, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
