//! Non-leaky integrate-and-fire dynamics and the triangular surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IafParams {
    pub threshold: f64,
    /// Clamp the post-reset membrane at 0.
    #[serde(default)]
    pub clamp_at_zero: bool,
}

impl Default for IafParams {
    fn default() -> Self {
        IafParams { threshold: DEFAULT_THRESHOLD, clamp_at_zero: false }
    }
}

/// How the forward pass turns a membrane value into a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Binary spike `v >= threshold`.
    #[default]
    Heaviside,
    /// The surrogate's primitive: a smooth ramp from 0 to `threshold` over
    /// `[0, 2 * threshold]`. Its exact derivative is the surrogate, which
    /// makes BPTT checkable by finite differences.
    Relaxed,
}

/// Surrogate derivative `max(0, 1 - |v - θ| / θ)`.
#[inline]
pub fn surrogate(v: f64, threshold: f64) -> f64 {
    (1.0 - (v - threshold).abs() / threshold).max(0.0)
}

/// Primitive of [`surrogate`], zero for `v <= 0`.
#[inline]
pub fn relaxed_spike(v: f64, threshold: f64) -> f64 {
    let th = threshold;
    if v <= 0.0 {
        0.0
    } else if v <= th {
        v * v / (2.0 * th)
    } else if v <= 2.0 * th {
        let r = 2.0 * th - v;
        th - r * r / (2.0 * th)
    } else {
        th
    }
}

/// One neuron update. Returns `(pre_reset_membrane, spike)` and leaves the
/// post-reset membrane in `v`.
#[inline]
pub(crate) fn integrate(v: &mut f64, input: f64, params: &IafParams, spike_fn: SpikeFn) -> (f64, f64) {
    let pre = *v + input;
    let s = match spike_fn {
        SpikeFn::Heaviside => {
            if pre >= params.threshold {
                1.0
            } else {
                0.0
            }
        }
        SpikeFn::Relaxed => relaxed_spike(pre, params.threshold),
    };
    let mut post = pre - params.threshold * s;
    if params.clamp_at_zero && post < 0.0 {
        post = 0.0;
    }
    *v = post;
    (pre, s)
}

/// Membrane state of a population of IAF neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct IafState {
    pub v: Vec<f64>,
    pub params: IafParams,
}

impl IafState {
    pub fn new(n: usize, params: IafParams) -> Self {
        IafState { v: vec![0.0; n], params }
    }

    /// Integrates `input` for one time step and returns the binary spikes.
    /// At most one spike per neuron per step; the reset subtracts the
    /// threshold so any surplus carries over.
    pub fn step(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.v.len() {
            return Err(Error::Shape { expected: vec![self.v.len()], actual: vec![input.len()] });
        }
        if let Some(bad) = input.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input current {bad}")));
        }
        Ok(self.v.iter_mut().zip(input).map(|(v, &i)| integrate(v, i, &self.params, SpikeFn::Heaviside).1).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn integrates_to_threshold() {
        let mut s = IafState::new(1, IafParams::default());
        assert_eq!(s.step(&[0.6]).unwrap(), vec![0.0]);
        assert_eq!(s.step(&[0.6]).unwrap(), vec![1.0]);
        assert!(approx(s.v[0], 0.2));
    }

    #[test]
    fn zero_input_is_silent() {
        let mut s = IafState::new(3, IafParams::default());
        s.v = vec![0.3, -0.2, 0.9];
        for _ in 0..10 {
            assert_eq!(s.step(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        }
        assert_eq!(s.v, vec![0.3, -0.2, 0.9]);
    }

    #[test]
    fn single_spike_per_step_with_carry() {
        let mut s = IafState::new(1, IafParams::default());
        assert_eq!(s.step(&[2.5]).unwrap(), vec![1.0]);
        assert!(approx(s.v[0], 1.5));
        assert_eq!(s.step(&[0.0]).unwrap(), vec![1.0]);
        assert!(approx(s.v[0], 0.5));
        assert_eq!(s.step(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut s = IafState::new(1, IafParams::default());
        assert!(matches!(s.step(&[f64::NAN]), Err(Error::Numeric(_))));
        assert!(s.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn optional_clamp() {
        let params = IafParams { clamp_at_zero: true, ..IafParams::default() };
        let mut s = IafState::new(1, params);
        s.step(&[-3.0]).unwrap();
        assert_eq!(s.v[0], 0.0);
    }

    #[test]
    fn relaxed_spike_is_primitive_of_surrogate() {
        for th in [0.5, 1.0, 2.0] {
            for i in -20..60 {
                let v = i as f64 * 0.05 * th;
                let h = 1e-6;
                let fd = (relaxed_spike(v + h, th) - relaxed_spike(v - h, th)) / (2.0 * h);
                assert!((fd - surrogate(v, th)).abs() < 1e-6, "v={v} th={th}");
            }
            assert_eq!(relaxed_spike(3.0 * th, th), th);
        }
    }
}
