use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use uhpnet::baselines::{train_baseline_with, BaselineConfig, BaselineKind, BaselineNet};
use uhpnet::data::{
    assign_split, load_manifest, read_f32_grid, save_manifest, write_f32_grid, DatasetManifest,
    Patch, Split,
};
use uhpnet::infer::{predict, PredictionRequest, SegmentationSampler, DEFAULT_K};
use uhpnet::metrics::{evaluate, EvalOptions, GroundTruthMode, GrowthDecision};
use uhpnet::net::{load_checkpoint, save_checkpoint, Activation, Checkpoint, ModelSpec};
use uhpnet::phantom::{generate_cohort_with, CohortSpec};
use uhpnet::train::{
    hpu_weights, train_with, Ablation, DiameterProxy, EpochLoss, ReconMode, TrainConfig,
};

use crate::config::Settings;
use crate::error::CliError;
use crate::plot;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRUTHS_FILE: &str = "truths.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const STRATA_CSV: &str = "strata.csv";

fn out_dir(s: &Settings) -> Result<PathBuf, CliError> {
    let dir = s.required_path("out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn unit_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn parse_unit<T: serde::de::DeserializeOwned>(s: &Settings, key: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(s.raw(key).to_ascii_lowercase()))
        .map_err(|_| CliError::Usage(format!("{key}={:?} is not a recognized value", s.raw(key))))
}

fn usage(e: uhpnet::Error) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn phantom_gen_settings() -> Settings {
    let c = CohortSpec::default();
    let owned = [
        ("spacing_mm", c.spacing_mm.to_string()),
        ("d0_min_mm", c.d0_range_mm.0.to_string()),
        ("d0_max_mm", c.d0_range_mm.1.to_string()),
        ("axis_ratio_min", c.axis_ratio_range.0.to_string()),
        ("axis_ratio_max", c.axis_ratio_range.1.to_string()),
        ("growing_rate_min_mm", c.growing_rate_mm.0.to_string()),
        ("growing_rate_max_mm", c.growing_rate_mm.1.to_string()),
        ("stable_rate_min_mm", c.stable_rate_mm.0.to_string()),
        ("stable_rate_max_mm", c.stable_rate_mm.1.to_string()),
        ("solid_intensity", c.solid_intensity.to_string()),
        (
            "ground_glass_intensity",
            c.ground_glass_intensity.to_string(),
        ),
        ("background_intensity", c.background_intensity.to_string()),
        ("texture_noise_sigma", c.texture_noise_sigma.to_string()),
        ("rater_jitter_sigma_mm", c.rater_jitter_sigma_mm.to_string()),
        ("minor_growth_ratio", c.minor_growth_ratio.to_string()),
    ];
    let mut s = Settings::new(
        "phantom-gen",
        &[
            ("n_nodules", "100"),
            ("growth_mix", "0.5"),
            ("test_fraction", "0.3"),
            ("seed", "0"),
            ("out", "phantoms"),
        ],
    );
    for (k, v) in owned {
        s.declare(k, &v);
    }
    s
}

pub fn phantom_gen(s: &Settings) -> Result<(), CliError> {
    let cohort = CohortSpec {
        spacing_mm: s.parse("spacing_mm")?,
        d0_range_mm: (s.parse("d0_min_mm")?, s.parse("d0_max_mm")?),
        axis_ratio_range: (s.parse("axis_ratio_min")?, s.parse("axis_ratio_max")?),
        growing_rate_mm: (
            s.parse("growing_rate_min_mm")?,
            s.parse("growing_rate_max_mm")?,
        ),
        stable_rate_mm: (
            s.parse("stable_rate_min_mm")?,
            s.parse("stable_rate_max_mm")?,
        ),
        solid_intensity: s.parse("solid_intensity")?,
        ground_glass_intensity: s.parse("ground_glass_intensity")?,
        background_intensity: s.parse("background_intensity")?,
        texture_noise_sigma: s.parse("texture_noise_sigma")?,
        rater_jitter_sigma_mm: s.parse("rater_jitter_sigma_mm")?,
        minor_growth_ratio: s.parse("minor_growth_ratio")?,
    };
    let n: usize = s.parse("n_nodules")?;
    let mix: f64 = s.parse("growth_mix")?;
    let test_fraction: f64 = s.parse("test_fraction")?;
    let seed: u64 = s.parse("seed")?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CliError::Usage(format!(
            "test_fraction {test_fraction} outside [0, 1)"
        )));
    }
    let generated = generate_cohort_with(&cohort, n, mix, seed).map_err(usage)?;
    let manifest = if test_fraction > 0.0 {
        assign_split(&generated.manifest, test_fraction, seed)?
    } else {
        generated.manifest
    };
    let dir = out_dir(s)?;
    save_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    let truths = serde_json::to_string_pretty(&generated.truths).context("serializing truths")?;
    fs::write(dir.join(TRUTHS_FILE), truths + "\n")?;
    s.write_resolved(&dir)?;
    eprintln!(
        "wrote {} nodules ({} test) to {}",
        manifest.len(),
        manifest.subset(Split::Test).len(),
        dir.join(MANIFEST_FILE).display()
    );
    Ok(())
}

pub fn train_settings() -> Settings {
    let t = TrainConfig::default();
    let b = BaselineConfig::new(BaselineKind::UResNet, t.base_filters);
    let owned = [
        ("learning_rate", t.learning_rate.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("epochs", t.epochs.to_string()),
        ("beta", t.beta.to_string()),
        ("gamma", t.gamma.to_string()),
        ("recon_mode", unit_name(&t.recon_mode)),
        ("diameter_proxy", unit_name(&t.diameter_proxy)),
        ("attention_enabled", t.attention_enabled.to_string()),
        ("use_sz0", t.use_sz0.to_string()),
        ("augment_flips", t.augment_flips.to_string()),
        ("augment_rotations", t.augment_rotations.to_string()),
        ("base_filters", t.base_filters.to_string()),
        ("num_latent_levels", t.num_latent_levels.to_string()),
        ("activation", unit_name(&t.activation)),
        ("seed", t.seed.to_string()),
        ("dropout_rate", b.dropout_rate.to_string()),
        ("dropout_enabled", b.dropout_enabled.to_string()),
        ("spu_latent_dim", b.spu_latent_dim.to_string()),
        ("gan_lambda", b.gan_lambda.to_string()),
    ];
    let mut s = Settings::new(
        "train",
        &[
            ("manifest", ""),
            ("model", "uhpnet"),
            ("ablation", ""),
            ("resume", ""),
            ("out", "run"),
        ],
    );
    for (k, v) in owned {
        s.declare(k, &v);
    }
    s
}

/// Training configuration from settings; a named ablation setup overrides
/// the loss, attention and D0 switches.
pub fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let recon_mode: ReconMode = parse_unit(s, "recon_mode")?;
    let diameter_proxy: DiameterProxy = parse_unit(s, "diameter_proxy")?;
    let activation: Activation = parse_unit(s, "activation")?;
    let config = TrainConfig {
        learning_rate: s.parse("learning_rate")?,
        batch_size: s.parse("batch_size")?,
        epochs: s.parse("epochs")?,
        beta: s.parse("beta")?,
        gamma: s.parse("gamma")?,
        recon_mode,
        diameter_proxy,
        attention_enabled: s.parse("attention_enabled")?,
        use_sz0: s.parse("use_sz0")?,
        augment_flips: s.parse("augment_flips")?,
        augment_rotations: s.parse("augment_rotations")?,
        base_filters: s.parse("base_filters")?,
        num_latent_levels: s.parse("num_latent_levels")?,
        activation,
        seed: s.parse("seed")?,
    };
    let config = match s.optional::<String>("ablation")? {
        Some(name) => Ablation::parse(&name).map_err(usage)?.apply(&config),
        None => config,
    };
    config.validate().map_err(usage)?;
    Ok(config)
}

/// `None` selects the U-HPNet itself.
fn baseline_config(s: &Settings, tc: &TrainConfig) -> Result<Option<BaselineConfig>, CliError> {
    let model = s.raw("model");
    if model.eq_ignore_ascii_case("uhpnet") || model.eq_ignore_ascii_case("u-hpnet") {
        return Ok(None);
    }
    let kind: BaselineKind = model.parse().map_err(usage)?;
    let b = BaselineConfig {
        dropout_rate: s.parse("dropout_rate")?,
        dropout_enabled: s.parse("dropout_enabled")?,
        spu_latent_dim: s.parse("spu_latent_dim")?,
        gan_lambda: s.parse("gan_lambda")?,
        ..BaselineConfig::from_train(kind, tc)
    };
    b.validate().map_err(usage)?;
    Ok(Some(b))
}

pub fn train(s: &Settings) -> Result<(), CliError> {
    let config = train_config(s)?;
    let baseline = baseline_config(s, &config)?;
    let manifest = load_manifest(&s.required_path("manifest")?)?;
    let resume = match s.optional::<PathBuf>("resume")? {
        Some(p) => Some(load_checkpoint(&p)?),
        None => None,
    };
    let dir = out_dir(s)?;
    s.write_resolved(&dir)?;
    let mut on_epoch = |e: &EpochLoss| eprintln!("{}", e.to_line());
    let outcome = match &baseline {
        Some(b) => train_baseline_with(b, &manifest, &config, resume, &mut on_epoch),
        None => train_with(&manifest, &config, resume, &mut on_epoch),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(uhpnet::Error::Diverged {
            epoch,
            message,
            last_good,
        }) => {
            save_checkpoint(&last_good, &dir.join(CHECKPOINT_FILE))?;
            return Err(CliError::Numerical(anyhow::anyhow!(
                "training diverged in epoch {epoch}: {message}; last good state saved"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    save_checkpoint(&outcome.checkpoint, &dir.join(CHECKPOINT_FILE))?;
    let levels = outcome.log.first().map_or(0, |l| l.kl.len());
    let mut log = EpochLoss::header(levels);
    log.push('\n');
    for l in &outcome.log {
        log.push_str(&l.to_line());
        log.push('\n');
    }
    fs::write(dir.join(LOSS_LOG_FILE), log)?;
    Ok(())
}

fn load_sampler(ckpt: &Checkpoint) -> Result<Box<dyn SegmentationSampler>, CliError> {
    Ok(match &ckpt.model {
        ModelSpec::Hpu(_) => Box::new(hpu_weights(ckpt)?),
        ModelSpec::Baseline(_) => Box::new(BaselineNet::from_checkpoint(ckpt)?),
    })
}

fn model_name(ckpt: &Checkpoint) -> String {
    match &ckpt.model {
        ModelSpec::Hpu(_) => "U-HPNet".into(),
        ModelSpec::Baseline(b) => b.kind.to_string(),
    }
}

pub fn predict_settings() -> Settings {
    Settings::new(
        "predict",
        &[
            ("checkpoint", ""),
            ("manifest", ""),
            ("nodule_id", ""),
            ("patch", ""),
            ("spacing_mm", "1.0"),
            ("d0_mm", ""),
            ("days", ""),
            ("k", &DEFAULT_K.to_string()),
            ("seed", "0"),
            ("out", "prediction"),
        ],
    )
}

/// Written prediction: the growth summary of one nodule plus the files
/// holding its appearance maps, relative to the report.
#[derive(Debug, Serialize)]
pub struct PredictReport {
    pub model: String,
    pub nodule_id: Option<String>,
    pub k: usize,
    pub seed: u64,
    pub d0_mm: f64,
    pub days_between: u32,
    pub growth_mean_mm: f64,
    pub growth_std_mm: f64,
    pub prob_growth_mean: f64,
    pub prob_growth_std: f64,
    pub appearance_mean_png: String,
    pub appearance_std_png: String,
    pub appearance_mean_f32: String,
    pub appearance_std_f32: String,
    pub histogram_png: String,
    pub histogram_csv: String,
}

struct PredictInput {
    nodule_id: Option<String>,
    i0: Patch,
    spacing_mm: f64,
    d0_mm: f64,
    days: u32,
}

fn predict_input(s: &Settings) -> Result<PredictInput, CliError> {
    let d0: Option<f64> = s.optional("d0_mm")?;
    let days: Option<u32> = s.optional("days")?;
    match (
        s.optional::<PathBuf>("manifest")?,
        s.optional::<String>("nodule_id")?,
    ) {
        (Some(path), Some(id)) => {
            if s.is_set("patch") {
                return Err(CliError::Usage(
                    "give either manifest with nodule_id or patch".into(),
                ));
            }
            let manifest = load_manifest(&path)?;
            let e = manifest.entry(&id).ok_or_else(|| {
                CliError::Data(anyhow::anyhow!("nodule {id} not in {}", path.display()))
            })?;
            let mean_d0 =
                e.annotations.iter().map(|a| a.d0_mm).sum::<f64>() / e.annotations.len() as f64;
            Ok(PredictInput {
                nodule_id: Some(id),
                i0: e.pair.i0.clone(),
                spacing_mm: e.pair.spacing_mm,
                d0_mm: d0.unwrap_or(mean_d0),
                days: days.unwrap_or(e.pair.days_between),
            })
        }
        (None, None) => {
            let patch = s.required_path("patch")?;
            let (Some(d0_mm), Some(days)) = (d0, days) else {
                return Err(CliError::Usage(
                    "a patch prediction needs d0_mm and days".into(),
                ));
            };
            let i0 = Patch::new(read_f32_grid(&patch)?)?;
            Ok(PredictInput {
                nodule_id: None,
                i0,
                spacing_mm: s.parse("spacing_mm")?,
                d0_mm,
                days,
            })
        }
        _ => Err(CliError::Usage("manifest and nodule_id go together".into())),
    }
}

pub fn predict_cmd(s: &Settings) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&s.required_path("checkpoint")?)?;
    let input = predict_input(s)?;
    let k: usize = s.parse("k")?;
    let seed: u64 = s.parse("seed")?;
    if k == 0 {
        return Err(CliError::Usage("k must be positive".into()));
    }
    let sampler = load_sampler(&ckpt)?;
    let req = PredictionRequest {
        i0: &input.i0,
        spacing_mm: input.spacing_mm,
        days_between: input.days,
        d0_mm: input.d0_mm,
    };
    let est = predict(sampler.as_ref(), &req, k, seed)?;
    let dir = out_dir(s)?;
    s.write_resolved(&dir)?;

    let names = [
        "appearance_mean.png",
        "appearance_std.png",
        "appearance_mean.f32",
        "appearance_std.f32",
        "growth_histogram.png",
        "growth_histogram.csv",
    ];
    plot::save_map_png(&est.appearance_mean, 1.0, &dir.join(names[0]))?;
    plot::save_map_png(&est.appearance_std, 0.5, &dir.join(names[1]))?;
    let as_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    write_f32_grid(&dir.join(names[2]), &as_f32(&est.appearance_mean))?;
    write_f32_grid(&dir.join(names[3]), &as_f32(&est.appearance_std))?;
    let (lo, width, counts) = plot::histogram(&est.deltas_mm, plot::HIST_BINS);
    plot::save_histogram_png(lo, width, &counts, &dir.join(names[4]))?;
    fs::write(dir.join(names[5]), plot::histogram_csv(lo, width, &counts))?;

    let report = PredictReport {
        model: model_name(&ckpt),
        nodule_id: input.nodule_id,
        k: est.k,
        seed,
        d0_mm: est.d0_used_mm,
        days_between: input.days,
        growth_mean_mm: est.growth_mean_mm,
        growth_std_mm: est.growth_std_mm,
        prob_growth_mean: est.prob_growth_mean,
        prob_growth_std: est.prob_growth_std,
        appearance_mean_png: names[0].into(),
        appearance_std_png: names[1].into(),
        appearance_mean_f32: names[2].into(),
        appearance_std_f32: names[3].into(),
        histogram_png: names[4].into(),
        histogram_csv: names[5].into(),
    };
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(dir.join(REPORT_FILE), text + "\n")?;
    println!(
        "growth {:.3} ± {:.3} mm, P(growth) {:.3} ± {:.3}",
        report.growth_mean_mm,
        report.growth_std_mm,
        report.prob_growth_mean,
        report.prob_growth_std
    );
    Ok(())
}

pub fn evaluate_settings() -> Settings {
    let o = EvalOptions::default();
    let modes: Vec<&str> = o.modes.iter().map(|m| m.name()).collect();
    let owned = [
        ("modes", modes.join(",")),
        ("k", o.k.to_string()),
        ("n_bootstrap", o.n_bootstrap.to_string()),
        ("seed", o.seed.to_string()),
        ("threshold", o.threshold.to_string()),
        ("decision", unit_name(&o.decision)),
    ];
    let mut s = Settings::new(
        "evaluate",
        &[
            ("checkpoint", ""),
            ("manifest", ""),
            ("split", "test"),
            ("out", "evaluation"),
        ],
    );
    for (k, v) in owned {
        s.declare(k, &v);
    }
    s
}

fn eval_options(s: &Settings) -> Result<EvalOptions, CliError> {
    let modes = s
        .raw("modes")
        .split(',')
        .map(|m| GroundTruthMode::parse(m).map_err(usage))
        .collect::<Result<Vec<_>, _>>()?;
    let decision: GrowthDecision = parse_unit(s, "decision")?;
    let o = EvalOptions {
        modes,
        k: s.parse("k")?,
        n_bootstrap: s.parse("n_bootstrap")?,
        seed: s.parse("seed")?,
        threshold: s.parse("threshold")?,
        decision,
    };
    if o.k == 0 || o.modes.is_empty() || !(o.threshold > 0.0 && o.threshold < 1.0) {
        return Err(CliError::Usage(
            "k, modes and threshold in (0, 1) must be given".into(),
        ));
    }
    Ok(o)
}

fn eval_manifest(s: &Settings, path: &Path) -> Result<DatasetManifest, CliError> {
    let manifest = load_manifest(path)?;
    let split = s.raw("split");
    let chosen = if split.eq_ignore_ascii_case("all") {
        manifest
    } else {
        manifest.subset(split.parse().map_err(usage)?)
    };
    if chosen.is_empty() {
        return Err(CliError::Data(anyhow::anyhow!(
            "no {split} nodules in {}",
            path.display()
        )));
    }
    Ok(chosen)
}

pub fn evaluate_cmd(s: &Settings) -> Result<(), CliError> {
    let options = eval_options(s)?;
    let ckpt = load_checkpoint(&s.required_path("checkpoint")?)?;
    let manifest = eval_manifest(s, &s.required_path("manifest")?)?;
    let sampler = load_sampler(&ckpt)?;
    let report = evaluate(sampler.as_ref(), &manifest, &options)?;
    let dir = out_dir(s)?;
    s.write_resolved(&dir)?;
    fs::write(dir.join(METRICS_JSON), report.to_json()? + "\n")?;
    fs::write(dir.join(METRICS_CSV), report.to_csv())?;
    fs::write(dir.join(STRATA_CSV), report.strata_csv())?;
    for m in &report.modes {
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!(
            "{:<8} Bacc {} MAE {} Dice {}",
            m.mode.name(),
            show(m.bacc.point),
            show(m.mae_mm.point),
            show(m.dice.point)
        );
    }
    if report.has_nan() {
        return Err(CliError::Numerical(anyhow::anyhow!(
            "report contains NaN metrics; see {}",
            dir.join(METRICS_JSON).display()
        )));
    }
    Ok(())
}
