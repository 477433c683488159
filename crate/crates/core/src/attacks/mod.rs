//! White-box attacks on event rasters.
//!
//! Every attack takes the raster as a `[T, P, H, W]` tensor of integer
//! values and returns an [`AttackResult`]. A query is one forward pass of
//! the attacked network; a gradient evaluation counts the forward pass it
//! needs once, however many backward passes follow.

mod deepfool;
mod patch;
mod pgd;
mod spikefool;

pub use deepfool::{deepfool, DeepFoolConfig, DeepFoolOutput};
pub use patch::{
    active_bounding_box, apply_patch, random_patch, sample_position, train_patch, Patch, PatchConfig, Region,
};
pub use pgd::{
    cd_pgd, greedy_flip, prob_pgd, prob_pgd_gradient, sample_binary_concrete, CdPgdConfig, ProbPgdConfig,
    DEFAULT_MAX_FLIPS,
};
pub use spikefool::{linear_solver, spikefool, spikefool_traced, OuterStep, SolverOutput, SpikeFoolConfig};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{argmax, Classifier};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub success: bool,
    pub queries: usize,
    pub l0: usize,
    pub elapsed_s: f64,
    pub original_label: usize,
    pub adversarial_label: usize,
    /// Why the attack gave up, when it did so early.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Tracks queries and wall time for one attack run.
pub(crate) struct Run<'a, C: Classifier + ?Sized> {
    net: &'a C,
    started: Instant,
    pub(crate) queries: usize,
}

impl<'a, C: Classifier + ?Sized> Run<'a, C> {
    pub(crate) fn new(net: &'a C) -> Self {
        Run { net, started: Instant::now(), queries: 0 }
    }

    pub(crate) fn label(&mut self, x: &Tensor) -> Result<usize> {
        self.queries += 1;
        Ok(argmax(&self.net.logits(x)?))
    }

    pub(crate) fn gradients(
        &mut self,
        x: &Tensor,
        upstreams: &mut dyn FnMut(&[f64]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<Tensor>)> {
        self.queries += 1;
        self.net.input_gradients(x, upstreams)
    }

    pub(crate) fn finish(
        self,
        x: &Tensor,
        x_adv: Tensor,
        original_label: usize,
        adversarial_label: usize,
        diagnostic: Option<String>,
    ) -> AttackResult {
        AttackResult {
            l0: x.count_diff(&x_adv),
            x_adv,
            success: adversarial_label != original_label,
            queries: self.queries,
            elapsed_s: self.started.elapsed().as_secs_f64(),
            original_label,
            adversarial_label,
            diagnostic,
        }
    }
}

/// Classifier wrapper that counts forward passes.
pub struct CountingClassifier<'a, C: Classifier + ?Sized> {
    inner: &'a C,
    count: AtomicUsize,
}

impl<'a, C: Classifier + ?Sized> CountingClassifier<'a, C> {
    pub fn new(inner: &'a C) -> Self {
        CountingClassifier { inner, count: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<C: Classifier + ?Sized> Classifier for CountingClassifier<'_, C> {
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(x)
    }

    fn input_gradients(
        &self,
        x: &Tensor,
        upstreams: &mut dyn FnMut(&[f64]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<Tensor>)> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.input_gradients(x, upstreams)
    }
}

/// One attack with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    SpikeFool(SpikeFoolConfig),
    CdPgd(CdPgdConfig),
    ProbPgd(ProbPgdConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::SpikeFool(_) => "spikefool",
            AttackSpec::CdPgd(_) => "cd_pgd",
            AttackSpec::ProbPgd(_) => "prob_pgd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::SpikeFool(c) => c.validate(),
            AttackSpec::CdPgd(c) => c.validate(),
            AttackSpec::ProbPgd(c) => c.validate(),
        }
    }

    /// `seed` feeds the attacks that sample.
    pub fn run<C: Classifier + ?Sized>(&self, net: &C, x: &Tensor, label: usize, seed: u64) -> Result<AttackResult> {
        match self {
            AttackSpec::SpikeFool(c) => spikefool(net, x, label, c),
            AttackSpec::CdPgd(c) => cd_pgd(net, x, label, c),
            AttackSpec::ProbPgd(c) => prob_pgd(net, x, label, c, seed),
        }
    }
}

fn check_label<C: Classifier + ?Sized>(net: &C, label: usize) -> Result<()> {
    if label >= net.n_classes() {
        return Err(Error::Validation(format!("label {label} out of range for {} classes", net.n_classes())));
    }
    Ok(())
}

/// Gradient-ascent step normalised by the largest absolute entry, so the
/// coordinate with the steepest slope moves by exactly `step_size`.
pub(crate) fn normalized_step(x: &mut Tensor, g: &Tensor, step_size: f64, lo: f64, hi: f64) {
    let m = g.max_abs();
    if m == 0.0 {
        return;
    }
    for (v, &gi) in x.data_mut().iter_mut().zip(g.data()) {
        *v = (*v + step_size * gi / m).clamp(lo, hi);
    }
}
