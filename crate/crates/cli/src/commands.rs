use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spikefool::attacks::{random_patch, train_patch, AttackSpec, Patch};
use spikefool::event_data::{
    load_binarized_mnist, load_dataset, load_events, rasterize, save_dataset, synth_dataset, Dataset, Raster, Sample,
};
use spikefool::harness::{
    export_report, patch_campaign, run_campaign, sample_seed, CampaignOptions, CampaignReport, PatchCampaignReport,
    ReportFormat,
};
use spikefool::snn::{bmnist_network, desk_network, lenet5, load_model, save_model, IafParams, Mode, Network};
use spikefool::training::{
    evaluate, quantize_weights, raster_examples, rate_frame_examples, train_bptt, train_trades, transfer_weights,
    Example, TrainReport, TransferReport,
};

use crate::config::{DataSpec, ExperimentConfig, ModelSpec, Pipeline, MNIST_FILES};
use crate::error::{CliError, Result};

/// Name of the resolved-config echo written into every output directory.
pub const CONFIG_ECHO: &str = "config.json";

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

struct Splits {
    train: Dataset,
    test: Dataset,
}

fn load_data(spec: &DataSpec, seed: u64) -> Result<Splits> {
    Ok(match spec {
        DataSpec::Dir { path } => {
            Splits { train: load_dataset(path.join("train"))?, test: load_dataset(path.join("test"))? }
        }
        DataSpec::Synth { spec } => {
            let d = synth_dataset(spec, seed)?;
            Splits { train: d.train, test: d.test }
        }
        DataSpec::Events { n_classes, format, sensor, raster, t_start, train, test } => {
            let load = |files: &[crate::config::LabelledFile]| -> Result<Dataset> {
                let samples = files
                    .iter()
                    .map(|f| {
                        let events = load_events(&f.path, *format, *sensor)?;
                        Ok(Sample { raster: rasterize(&events, raster, *t_start)?, label: f.label })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Dataset { n_classes: *n_classes, samples })
            };
            Splits { train: load(train)?, test: load(test)? }
        }
        DataSpec::Mnist { dir, stride } => {
            let [tri, trl, tei, tel] = MNIST_FILES.map(|f| dir.join(f));
            Splits { train: load_binarized_mnist(tri, trl, *stride)?, test: load_binarized_mnist(tei, tel, *stride)? }
        }
    })
}

fn examples(net_mode: Mode, data: &Dataset) -> Vec<Example> {
    match net_mode {
        Mode::Spiking => raster_examples(data),
        Mode::Analog => rate_frame_examples(data),
    }
}

fn input_shape(data: &Dataset) -> Result<[usize; 3]> {
    let s = data.samples.first().ok_or_else(|| CliError::config("data", "training split is empty"))?;
    let [_, p, h, w] = s.raster.shape();
    Ok([p, h, w])
}

fn build_model(spec: &ModelSpec, mode: Mode, shape: [usize; 3], n_classes: usize) -> Result<Network> {
    let net = match spec {
        ModelSpec::Desk { widths } => desk_network(mode, shape, n_classes, *widths)?,
        ModelSpec::Lenet5 { channels, batchnorm } => {
            if channels[4] != n_classes {
                return Err(CliError::config(
                    "model.channels",
                    format!("last entry must equal the {n_classes} classes"),
                ));
            }
            lenet5(mode, shape, *channels, *batchnorm, false)?
        }
        ModelSpec::Bmnist => {
            if mode != Mode::Analog {
                return Err(CliError::config("train.pipeline", "the bmnist architecture is analog only"));
            }
            bmnist_network(shape)?
        }
    };
    Ok(net)
}

/// Untrained network with weights drawn from the experiment seed.
fn initial_model(cfg: &ExperimentConfig, mode: Mode, data: &Dataset) -> Result<Network> {
    let spec = ExperimentConfig::require("model", &cfg.model)?;
    let mut net = build_model(spec, mode, input_shape(data)?, data.n_classes)?;
    net.init_weights(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed()?, 0)), cfg.train.init_gain);
    Ok(net)
}

fn test_subset<'a>(cfg: &ExperimentConfig, test: &'a [Example]) -> &'a [Example] {
    &test[..cfg.max_samples.unwrap_or(test.len()).min(test.len())]
}

pub fn synth(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out()?;
    let spec = ExperimentConfig::require("synth", &cfg.synth)?;
    let data = synth_dataset(spec, cfg.seed()?)?;
    save_dataset(out.join("train"), &data.train)?;
    save_dataset(out.join("test"), &data.test)?;
    info!("wrote {} train and {} test samples to {}", data.train.len(), data.test.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct QuantizationSummary {
    bits: u32,
    accuracy_before: f64,
    accuracy_after: f64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    pipeline: Pipeline,
    training: TrainReport,
    transfer: Option<TransferReport>,
    /// Accuracy of the saved model on the test split.
    test_accuracy: f64,
    quantization: Option<QuantizationSummary>,
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out()?;
    let data = load_data(ExperimentConfig::require("data", &cfg.data)?, cfg.seed()?)?;
    let pipeline = cfg.train.pipeline;
    let train_mode = if pipeline == Pipeline::Bptt { Mode::Spiking } else { Mode::Analog };
    let init = initial_model(cfg, train_mode, &data.train)?;
    let train_ex = examples(train_mode, &data.train);
    let test_ex = examples(train_mode, &data.test);
    let (trained, report) = train_bptt(&init, &train_ex, Some(&test_ex), &cfg.train.config)?;
    let (mut net, transfer) = if pipeline == Pipeline::Transfer {
        let calibration: Vec<_> = train_ex.iter().map(|e| e.input.clone()).collect();
        let (spiking, rep) = transfer_weights(&trained, &calibration, IafParams::default())?;
        (spiking, Some(rep))
    } else {
        (trained.fold_batchnorm()?, None)
    };
    let eval_ex = examples(net.mode(), &data.test);
    let mut accuracy = evaluate(&net, &eval_ex)?;
    let quantization = match cfg.train.quantize_bits {
        Some(bits) => {
            let q = quantize_weights(&net, bits)?;
            let after = evaluate(&q, &eval_ex)?;
            let summary = QuantizationSummary { bits, accuracy_before: accuracy, accuracy_after: after };
            net = q;
            accuracy = after;
            Some(summary)
        }
        None => None,
    };
    save_model(out.join("model.bin"), &net)?;
    write_json(
        &out.join("train_report.json"),
        &TrainSummary { pipeline, training: report, transfer, test_accuracy: accuracy, quantization },
    )?;
    info!("test accuracy {accuracy:.4}");
    Ok(())
}

/// Runs `attack` on the test split and writes `report.json`, `records.csv`
/// and, optionally, one `RAS0` file per attacked sample.
fn attack_and_export(
    cfg: &ExperimentConfig,
    net: &Network,
    test: &[Example],
    attack: &AttackSpec,
    out: &Path,
) -> Result<CampaignReport> {
    prepare_out(out)?;
    let opts = CampaignOptions { threads: cfg.threads, record_timing: cfg.record_timing };
    let campaign = run_campaign(net, test_subset(cfg, test), attack, cfg.seed()?, &opts)?;
    export_report(&campaign.report, out.join("report.json"), ReportFormat::Json)?;
    export_report(&campaign.report, out.join("records.csv"), ReportFormat::Csv)?;
    if cfg.save_adversarial {
        let dir = out.join("adversarial");
        prepare_out(&dir)?;
        for (record, x_adv) in campaign.report.records.iter().zip(&campaign.adversarial) {
            let raster = Raster::from_tensor(x_adv)?;
            spikefool::event_data::write_raster(dir.join(format!("{:06}.ras", record.index)), &raster)?;
        }
    }
    let r = &campaign.report;
    info!(
        "{}: success {:?}% over {} samples, median L0 {:?}",
        attack.name(),
        r.success_rate,
        r.n_initially_correct,
        r.median_l0
    );
    Ok(campaign.report)
}

fn load_trained(cfg: &ExperimentConfig) -> Result<Network> {
    Ok(load_model(ExperimentConfig::require("model_path", &cfg.model_path)?)?)
}

pub fn attack(cfg: &ExperimentConfig) -> Result<()> {
    let net = load_trained(cfg)?;
    let data = load_data(ExperimentConfig::require("data", &cfg.data)?, cfg.seed()?)?;
    let test = examples(net.mode(), &data.test);
    attack_and_export(cfg, &net, &test, ExperimentConfig::require("attack", &cfg.attack)?, cfg.out()?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PatchSummary {
    trained: PatchCampaignReport,
    random: PatchCampaignReport,
    /// Trained minus random success rate, in percentage points.
    advantage_pp: Option<f64>,
}

pub fn patch(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    let net = load_trained(cfg)?;
    let data = load_data(ExperimentConfig::require("data", &cfg.data)?, seed)?;
    let pcfg = ExperimentConfig::require("patch", &cfg.patch)?;
    let train = examples(net.mode(), &data.train);
    let test = examples(net.mode(), &data.test);
    let trained = train_patch(&net, &train, pcfg, sample_seed(seed, 0))?;
    let shape: [usize; 4] = trained.data.shape().try_into().expect("4-D patch");
    let random: Patch = random_patch(shape, pcfg.target_label, pcfg.region, sample_seed(seed, 1));
    let test = test_subset(cfg, &test);
    let a = patch_campaign(&net, test, &trained, sample_seed(seed, 2), cfg.threads)?;
    let b = patch_campaign(&net, test, &random, sample_seed(seed, 2), cfg.threads)?;
    let advantage_pp = a.success_rate.zip(b.success_rate).map(|(x, y)| x - y);
    write_json(&out.join("patch.json"), &trained)?;
    write_json(&out.join("random_patch.json"), &random)?;
    info!("patch success {:?}% vs random {:?}%", a.success_rate, b.success_rate);
    write_json(&out.join("patch_report.json"), &PatchSummary { trained: a, random: b, advantage_pp })
}

#[derive(Debug, Serialize)]
struct ModelSummary {
    test_accuracy: f64,
    success_rate: Option<f64>,
    median_l0: Option<f64>,
    median_queries: Option<f64>,
    total_added: usize,
    total_removed: usize,
}

impl ModelSummary {
    fn new(test_accuracy: f64, r: &CampaignReport) -> Self {
        ModelSummary {
            test_accuracy,
            success_rate: r.success_rate,
            median_l0: r.median_l0,
            median_queries: r.median_queries,
            total_added: r.total_added,
            total_removed: r.total_removed,
        }
    }
}

#[derive(Debug, Serialize)]
struct DefenseSummary {
    beta_rob: f64,
    identical_weights: bool,
    baseline: ModelSummary,
    defended: ModelSummary,
}

pub fn defend(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    let data = load_data(ExperimentConfig::require("data", &cfg.data)?, seed)?;
    let trades = ExperimentConfig::require("trades", &cfg.trades)?;
    let attack = ExperimentConfig::require("attack", &cfg.attack)?;
    let init = initial_model(cfg, Mode::Spiking, &data.train)?;
    let train = raster_examples(&data.train);
    let test = raster_examples(&data.test);
    let baseline = match &cfg.model_path {
        Some(p) => load_model(p)?,
        None => {
            let (net, _) = train_bptt(&init, &train, None, &cfg.train.config)?;
            let net = net.fold_batchnorm()?;
            save_model(out.join("baseline_model.bin"), &net)?;
            net
        }
    };
    let (defended, _) = train_trades(&init, &train, None, &cfg.train.config, trades)?;
    let defended = defended.fold_batchnorm()?;
    save_model(out.join("defended_model.bin"), &defended)?;
    let base_report = attack_and_export(cfg, &baseline, &test, attack, &out.join("baseline"))?;
    let def_report = attack_and_export(cfg, &defended, &test, attack, &out.join("defended"))?;
    let summary = DefenseSummary {
        beta_rob: trades.beta_rob,
        identical_weights: baseline.params() == defended.params(),
        baseline: ModelSummary::new(evaluate(&baseline, &test)?, &base_report),
        defended: ModelSummary::new(evaluate(&defended, &test)?, &def_report),
    };
    write_json(&out.join("comparison.json"), &summary)
}

/// `report.json` files under each input, which may be a file or a directory.
pub fn find_reports(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, found)?;
            } else if p.file_name().is_some_and(|n| n == "report.json") {
                found.push(p);
            }
        }
        Ok(())
    }
    let mut found = Vec::new();
    for input in inputs {
        if input.is_dir() {
            walk(input, &mut found)?;
        } else if input.is_file() {
            found.push(input.clone());
        } else {
            return Err(CliError::config("inputs", format!("{} does not exist", input.display())));
        }
    }
    Ok(found)
}
