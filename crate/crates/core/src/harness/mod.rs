//! Attack campaigns over datasets and the metrics reported on them.
//!
//! Samples are attacked in parallel but collected by sample index, and
//! every sample draws from its own random stream, so a report depends only
//! on `(net, data, attack, seed)`. Wall-clock times are the one exception;
//! turn them off with [`CampaignOptions::record_timing`] for byte-identical
//! reruns.

mod report;

pub use report::{export_report, load_records_csv, load_report_json, ReportFormat, REPORT_SCHEMA_VERSION};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_patch, sample_position, AttackSpec, Patch};
use crate::error::{Error, Result};
use crate::snn::{argmax, Classifier};
use crate::tensor::Tensor;
use crate::training::Example;

/// Independent random stream for sample `index` of a run seeded by `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Position of the sample in the attacked dataset.
    pub index: usize,
    pub label: usize,
    pub adversarial_label: usize,
    pub success: bool,
    pub l0: usize,
    pub queries: usize,
    pub elapsed_s: f64,
    /// Voxel increments summed over the raster.
    pub added: usize,
    /// Voxel decrements summed over the raster.
    pub removed: usize,
    pub added_per_bin: Vec<usize>,
    pub removed_per_bin: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Per-bin additions and removals over `[T, ...]` rasters.
pub fn perturbation_counts(x: &Tensor, x_adv: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let t = x.shape().first().copied().unwrap_or(0);
    let per = x.len().checked_div(t).unwrap_or(0);
    let mut added = vec![0; t];
    let mut removed = vec![0; t];
    for (i, (&a, &b)) in x.data().iter().zip(x_adv.data()).enumerate() {
        let d = (b - a).round();
        if d > 0.0 {
            added[i / per] += d as usize;
        } else if d < 0.0 {
            removed[i / per] += (-d) as usize;
        }
    }
    (added, removed)
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Linearly interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProfile {
    pub bin: usize,
    pub added: usize,
    pub removed: usize,
    pub added_q10: f64,
    pub added_q90: f64,
    pub removed_q10: f64,
    pub removed_q90: f64,
}

/// Spikes added and removed per time bin, summed over the successful
/// records, with 0.1 and 0.9 quantiles of the per-sample counts.
pub fn perturbation_time_profile(records: &[SampleRecord], n_bins: usize) -> Vec<BinProfile> {
    let succeeded: Vec<&SampleRecord> = records.iter().filter(|r| r.success).collect();
    (0..n_bins)
        .map(|b| {
            let at = |v: &Vec<usize>| v.get(b).copied().unwrap_or(0);
            let mut a: Vec<f64> = succeeded.iter().map(|r| at(&r.added_per_bin) as f64).collect();
            let mut d: Vec<f64> = succeeded.iter().map(|r| at(&r.removed_per_bin) as f64).collect();
            a.sort_by(f64::total_cmp);
            d.sort_by(f64::total_cmp);
            BinProfile {
                bin: b,
                added: succeeded.iter().map(|r| at(&r.added_per_bin)).sum(),
                removed: succeeded.iter().map(|r| at(&r.removed_per_bin)).sum(),
                added_q10: quantile(&a, 0.1),
                added_q90: quantile(&a, 0.9),
                removed_q10: quantile(&d, 0.1),
                removed_q90: quantile(&d, 0.9),
            }
        })
        .collect()
}

/// Counts of `(original, adversarial)` label pairs over successful attacks.
pub fn confusion_matrix(records: &[SampleRecord], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for r in records.iter().filter(|r| r.success) {
        m[r.label][r.adversarial_label] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub attack: AttackSpec,
    pub seed: u64,
    pub n_classes: usize,
    pub n_bins: usize,
    pub n_samples: usize,
    pub n_initially_correct: usize,
    pub n_successes: usize,
    /// Percentage of initially correct samples that were misclassified.
    pub success_rate: Option<f64>,
    /// Over successful attacks only.
    pub median_l0: Option<f64>,
    pub median_queries: Option<f64>,
    pub median_elapsed_s: Option<f64>,
    pub total_added: usize,
    pub total_removed: usize,
    pub confusion: Vec<Vec<usize>>,
    pub time_profile: Vec<BinProfile>,
    pub records: Vec<SampleRecord>,
}

impl CampaignReport {
    /// Derives every aggregate from the per-sample records, one per
    /// initially correct sample.
    pub fn from_records(
        attack: AttackSpec,
        seed: u64,
        n_classes: usize,
        n_bins: usize,
        n_samples: usize,
        records: Vec<SampleRecord>,
    ) -> Self {
        let n = records.len();
        let successes: Vec<&SampleRecord> = records.iter().filter(|r| r.success).collect();
        let l0: Vec<f64> = successes.iter().map(|r| r.l0 as f64).collect();
        let queries: Vec<f64> = records.iter().map(|r| r.queries as f64).collect();
        let elapsed: Vec<f64> = records.iter().map(|r| r.elapsed_s).collect();
        CampaignReport {
            schema_version: REPORT_SCHEMA_VERSION,
            attack,
            seed,
            n_classes,
            n_bins,
            n_samples,
            n_initially_correct: n,
            n_successes: successes.len(),
            success_rate: (n > 0).then(|| 100.0 * successes.len() as f64 / n as f64),
            median_l0: median(&l0),
            median_queries: median(&queries),
            median_elapsed_s: median(&elapsed),
            total_added: successes.iter().map(|r| r.added).sum(),
            total_removed: successes.iter().map(|r| r.removed).sum(),
            confusion: confusion_matrix(&records, n_classes),
            time_profile: perturbation_time_profile(&records, n_bins),
            records,
        }
    }

    /// Checks that every aggregate matches a recomputation from the records.
    pub fn check_consistency(&self) -> Result<()> {
        for r in &self.records {
            if r.label >= self.n_classes || r.adversarial_label >= self.n_classes {
                return Err(Error::Inconsistent(format!("record {} has a label out of range", r.index)));
            }
            if r.success != (r.label != r.adversarial_label) {
                return Err(Error::Inconsistent(format!("record {} success flag disagrees with labels", r.index)));
            }
        }
        let rebuilt = CampaignReport::from_records(
            self.attack.clone(),
            self.seed,
            self.n_classes,
            self.n_bins,
            self.n_samples,
            self.records.clone(),
        );
        if rebuilt.schema_version != self.schema_version {
            return Err(Error::Inconsistent(format!(
                "schema version {} (expected {})",
                self.schema_version, rebuilt.schema_version
            )));
        }
        let fields = [
            ("n_initially_correct", rebuilt.n_initially_correct == self.n_initially_correct),
            ("n_successes", rebuilt.n_successes == self.n_successes),
            ("success_rate", rebuilt.success_rate == self.success_rate),
            ("median_l0", rebuilt.median_l0 == self.median_l0),
            ("median_queries", rebuilt.median_queries == self.median_queries),
            ("median_elapsed_s", rebuilt.median_elapsed_s == self.median_elapsed_s),
            ("total_added", rebuilt.total_added == self.total_added),
            ("total_removed", rebuilt.total_removed == self.total_removed),
            ("confusion", rebuilt.confusion == self.confusion),
            ("time_profile", rebuilt.time_profile == self.time_profile),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, ok)| !ok) {
            return Err(Error::Inconsistent(format!("{name} does not match the records")));
        }
        if self.n_initially_correct > self.n_samples {
            return Err(Error::Inconsistent("more correct samples than samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CampaignOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Record per-sample wall time; when off every time is zero.
    pub record_timing: bool,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions { threads: None, record_timing: true }
    }
}

/// A report together with the adversarial rasters behind its records.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub report: CampaignReport,
    pub adversarial: Vec<Tensor>,
}

fn correct_indices<C: Classifier + ?Sized>(net: &C, data: &[Example]) -> Result<Vec<usize>> {
    let flags =
        data.par_iter().map(|e| net.logits(&e.input).map(|l| argmax(&l) == e.label)).collect::<Result<Vec<_>>>()?;
    Ok(flags.iter().enumerate().filter_map(|(i, &ok)| ok.then_some(i)).collect())
}

/// Attacks every sample the network initially classifies correctly.
/// Attacks that stop on a degenerate gradient count as failures.
pub fn run_campaign<C: Classifier + ?Sized>(
    net: &C,
    data: &[Example],
    attack: &AttackSpec,
    seed: u64,
    opts: &CampaignOptions,
) -> Result<Campaign> {
    attack.validate()?;
    let n_bins = data.first().map_or(0, |e| e.input.shape()[0]);
    let outcomes = with_threads(opts.threads, || -> Result<Vec<(SampleRecord, Tensor)>> {
        let correct = correct_indices(net, data)?;
        correct
            .par_iter()
            .map(|&i| {
                let ex = &data[i];
                let r = attack.run(net, &ex.input, ex.label, sample_seed(seed, i))?;
                let (added_per_bin, removed_per_bin) = perturbation_counts(&ex.input, &r.x_adv);
                let l0 = ex.input.count_diff(&r.x_adv);
                if l0 != r.l0 {
                    return Err(Error::Inconsistent(format!(
                        "sample {i}: reported L0 {} but {l0} voxels differ",
                        r.l0
                    )));
                }
                let record = SampleRecord {
                    index: i,
                    label: ex.label,
                    adversarial_label: r.adversarial_label,
                    success: r.success,
                    l0: r.l0,
                    queries: r.queries,
                    elapsed_s: if opts.record_timing { r.elapsed_s } else { 0.0 },
                    added: added_per_bin.iter().sum(),
                    removed: removed_per_bin.iter().sum(),
                    added_per_bin,
                    removed_per_bin,
                    diagnostic: r.diagnostic,
                };
                Ok((record, r.x_adv))
            })
            .collect()
    })??;
    let (records, adversarial): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let report = CampaignReport::from_records(attack.clone(), seed, net.n_classes(), n_bins, data.len(), records);
    Ok(Campaign { report, adversarial })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCampaignReport {
    pub schema_version: u32,
    pub target_label: usize,
    pub seed: u64,
    /// Samples whose label is not the target.
    pub n_eligible: usize,
    pub n_success: usize,
    /// Percentage of eligible samples predicted as the target after
    /// patching; `None` without eligible samples.
    pub success_rate: Option<f64>,
}

/// Targeted success of `patch` placed at a random position inside each
/// sample's placement region. Positions depend only on `seed` and the
/// sample index, so patches of equal size see the same placements.
pub fn patch_campaign<C: Classifier + ?Sized>(
    net: &C,
    data: &[Example],
    patch: &Patch,
    seed: u64,
    threads: Option<usize>,
) -> Result<PatchCampaignReport> {
    let hits = with_threads(threads, || {
        data.par_iter()
            .enumerate()
            .filter(|(_, e)| e.label != patch.target_label)
            .map(|(i, e)| {
                let shape = e.input.shape();
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
                let pos = sample_position(
                    patch.region_for(&e.input),
                    patch.height(),
                    patch.width(),
                    shape[2],
                    shape[3],
                    &mut rng,
                )?;
                let patched = apply_patch(&e.input, patch, pos)?;
                Ok(argmax(&net.logits(&patched)?) == patch.target_label)
            })
            .collect::<Result<Vec<bool>>>()
    })??;
    let n_eligible = hits.len();
    let n_success = hits.iter().filter(|&&h| h).count();
    Ok(PatchCampaignReport {
        schema_version: REPORT_SCHEMA_VERSION,
        target_label: patch.target_label,
        seed,
        n_eligible,
        n_success,
        success_rate: (n_eligible > 0).then(|| 100.0 * n_success as f64 / n_eligible as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::SpikeFoolConfig;

    fn record(index: usize, success: bool, l0: usize, label: usize, adv: usize) -> SampleRecord {
        SampleRecord {
            index,
            label,
            adversarial_label: adv,
            success,
            l0,
            queries: 3,
            elapsed_s: 0.0,
            added: l0,
            removed: 0,
            added_per_bin: vec![l0, 0],
            removed_per_bin: vec![0, 0],
            diagnostic: None,
        }
    }

    fn report(records: Vec<SampleRecord>) -> CampaignReport {
        CampaignReport::from_records(AttackSpec::SpikeFool(SpikeFoolConfig::default()), 0, 6, 2, 10, records)
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[4.0, 10.0]), Some(7.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
    }

    #[test]
    fn failed_attacks_have_no_l0_median() {
        let r = report(vec![record(0, false, 0, 1, 1), record(1, false, 0, 2, 2)]);
        assert_eq!(r.success_rate, Some(0.0));
        assert_eq!(r.median_l0, None);
        assert_eq!(r.median_queries, Some(3.0));
        assert!(r.confusion.iter().flatten().all(|&c| c == 0));
        let r = report(vec![record(0, true, 4, 1, 0), record(1, true, 10, 2, 5), record(2, false, 0, 3, 3)]);
        assert_eq!(r.median_l0, Some(7.0));
        assert_eq!(r.confusion[2][5], 1);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), r.n_successes);
        r.check_consistency().unwrap();
    }

    #[test]
    fn empty_campaign_has_null_metrics() {
        let r = report(Vec::new());
        assert_eq!(r.n_initially_correct, 0);
        assert_eq!(r.success_rate, None);
        assert_eq!(r.median_queries, None);
        r.check_consistency().unwrap();
    }

    #[test]
    fn tampered_report_is_inconsistent() {
        let mut r = report(vec![record(0, true, 4, 1, 0)]);
        r.median_l0 = Some(5.0);
        assert!(matches!(r.check_consistency(), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn time_profile_counts() {
        let zero = report(vec![record(0, true, 0, 1, 0)]);
        assert!(zero.time_profile.iter().all(|b| b.added == 0 && b.removed == 0));
        let mut x = Tensor::zeros(&[2, 1, 2, 2]);
        x.data_mut()[7] = 1.0;
        let mut adv = x.clone();
        for i in 0..3 {
            adv.data_mut()[i] = 1.0;
        }
        adv.data_mut()[7] = 0.0;
        assert_eq!(perturbation_counts(&x, &adv), (vec![3, 0], vec![0, 1]));
    }

    #[test]
    fn seeds_are_independent_of_order() {
        assert_eq!(sample_seed(3, 7), sample_seed(3, 7));
        assert_ne!(sample_seed(3, 7), sample_seed(3, 8));
        assert_ne!(sample_seed(3, 7), sample_seed(4, 7));
    }
}
