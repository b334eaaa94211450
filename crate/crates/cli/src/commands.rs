use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use sha2::{Digest, Sha256};

use fvib_core::checkpoint::{Checkpoint, ModelKind};
use fvib_core::config::{CalibrationMethod, Config, DataConfig, Method};
use fvib_core::data::{DatasetManifest, Splits};
use fvib_core::fvib::{self, ConfidenceTuning};
use fvib_core::sweep::{self, CalibrationSetup, SweepSetup};
use fvib_core::verify::{self, VerifyOptions};
use fvib_core::vib;
use fvib_core::Error;

use crate::{EvalArgs, Switch, TrainArgs, VerifyArgs};

#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Verification,
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Verification => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(keys) => Failure::Config(anyhow!("invalid configuration:\n  {}", keys.join("\n  "))),
            Error::InvalidParameter(_) | Error::Domain(_) | Error::InvalidClassCount(_) => {
                Failure::Config(e.into())
            }
            Error::Data { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Shape { .. }
            | Error::EmptyInput(_)
            | Error::IndexOutOfRange { .. } => Failure::Data(e.into()),
            Error::State(_) => Failure::Internal(e.into()),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Config(anyhow!(msg.into()))
}

fn ct_override(base: ConfidenceTuning, switch: Option<Switch>) -> ConfidenceTuning {
    match switch {
        Some(Switch::On) => ConfidenceTuning { enabled: true, ..base },
        Some(Switch::Off) => ConfidenceTuning { enabled: false, ..base },
        None => base,
    }
}

/// Reads a TOML config, resolving data paths against its directory.
fn read_config(path: &Path) -> CmdResult<Config> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Config)?;
    let mut config: Config = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::Config)?;
    let absolute = std::path::absolute(path).map_err(|e| Failure::Config(e.into()))?;
    config.data.resolve_paths(absolute.parent().unwrap_or(Path::new("/")));
    config.validate()?;
    Ok(config)
}

fn load_splits(data: &DataConfig) -> CmdResult<Splits> {
    data.load_splits().map_err(|e| match Failure::from(e) {
        Failure::Data(e) => Failure::Data(e.context(format!("loading {:?}", data.source))),
        other => other,
    })
}

fn write_output(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Internal),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let mut config = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(s) = a.samples {
        config.eval.samples = s;
    }
    if let Some(sw) = a.ct {
        config.model.confidence_tuning = sw == Switch::On;
    }
    config.validate()?;
    let splits = load_splits(&config.data)?;
    let model = &config.model;
    let (checkpoint, log) = match model.method {
        Method::Fvib => {
            let ct = ConfidenceTuning {
                enabled: model.confidence_tuning,
                confidence: model.confidence,
            };
            // fail on an unreachable confidence before spending time on training
            ct.temperature(splits.train.classes())?;
            let trained = fvib::train(&splits.train, &model.hidden, &config.train, config.data.balance)?;
            let mut log = String::from("epoch,loss,j_fvib\n");
            for r in &trained.history {
                log.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.j_fvib));
            }
            let ck = Checkpoint::from_fvib(&trained, &config.train, ct, config.eval.samples, Some(config.data.clone()));
            (ck, log)
        }
        Method::Vib | Method::Taylor => {
            let beta = model.beta.expect("validated");
            let run = if model.method == Method::Vib { vib::vib_train } else { vib::taylor_train };
            let trained = run(&splits.train, beta, &model.hidden, model.kappa, &config.train)?;
            let mut log = String::from("epoch,loss,objective\n");
            for r in &trained.history {
                log.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.objective));
            }
            let ck = Checkpoint::from_vib(&trained.encoder, &config.train, config.eval.samples, Some(config.data.clone()));
            (ck, log)
        }
    };
    let log_path = sibling(&a.out, "log.csv");
    let manifest_path = sibling(&a.out, "manifest.json");
    checkpoint.save(&a.out)?;
    write_output(Some(&log_path), &log)?;
    let manifest = DatasetManifest::from_splits(&splits, config.data.split_seed);
    let manifest = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Internal(e.into()))? + "\n";
    write_output(Some(&manifest_path), &manifest)?;
    let final_loss = log.lines().last().and_then(|l| l.split(',').nth(1)).unwrap_or("n/a");
    println!("checkpoint: {}", a.out.display());
    println!("training log: {}", log_path.display());
    println!("final loss: {final_loss}");
    Ok(())
}

/// Everything the evaluation commands share.
struct EvalContext {
    checkpoint: Checkpoint,
    model_id: String,
    config: Config,
    splits: Splits,
    ct: ConfidenceTuning,
    grid: Vec<f64>,
    seed: u64,
}

impl EvalContext {
    fn load(a: &EvalArgs) -> CmdResult<Self> {
        let bytes = fs::read(&a.checkpoint)
            .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))
            .map_err(Failure::Data)?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Failure::Data(e.into()))?;
        let checkpoint = Checkpoint::from_json(&text)?;
        let model_id = hex::encode(&Sha256::digest(&bytes)[..8]);
        let config = match &a.config {
            Some(p) => read_config(p)?,
            None => Config {
                data: checkpoint
                    .data
                    .clone()
                    .ok_or_else(|| config_error("checkpoint records no data source; pass --config"))?,
                ..Config::default()
            },
        };
        let splits = load_splits(&config.data)?;
        if splits.train.feature_dim() != checkpoint.layer_dims[0] || splits.train.classes() != checkpoint.d {
            return Err(Failure::Data(anyhow!(
                "data has {} features and {} classes, the checkpoint expects {} and {}",
                splits.train.feature_dim(),
                splits.train.classes(),
                checkpoint.layer_dims[0],
                checkpoint.d
            )));
        }
        let grid = match &a.beta_grid {
            Some(g) => sweep::parse_beta_grid(g)?,
            None => config.eval.beta_grid.clone(),
        };
        if let Some(b) = grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(config_error(format!("beta grid value {b} outside [0, 1]")));
        }
        Ok(EvalContext {
            ct: ct_override(checkpoint.confidence_tuning(), a.ct),
            seed: a.seed.unwrap_or(config.eval.seed),
            checkpoint,
            model_id,
            config,
            splits,
            grid,
        })
    }

    /// Flag, then the config file's value, then the checkpoint default.
    fn samples(&self, a: &EvalArgs, from_config: usize) -> CmdResult<usize> {
        let s = a
            .samples
            .unwrap_or(if a.config.is_some() { from_config } else { self.checkpoint.default_samples });
        if s == 0 {
            return Err(config_error("--samples must be >= 1"));
        }
        Ok(s)
    }

    fn require_fvib(&self, command: &str) -> CmdResult {
        if self.checkpoint.kind != ModelKind::Fvib {
            return Err(config_error(format!("{command} needs an FVIB checkpoint")));
        }
        Ok(())
    }
}

pub fn sweep(a: &EvalArgs) -> CmdResult {
    let ctx = EvalContext::load(a)?;
    ctx.require_fvib("sweep")?;
    let samples = ctx.samples(a, ctx.config.eval.samples)?;
    let net = ctx.checkpoint.net()?;
    let targets = ctx.checkpoint.targets()?;
    let setup = SweepSetup {
        net: &net,
        targets: &targets,
        ct: ctx.ct,
        train: &ctx.splits.train,
        test: &ctx.splits.test,
        samples,
        seed: ctx.seed,
        bins: ctx.config.eval.bins,
        model_id: ctx.model_id.clone(),
    };
    let result = sweep::run_sweep(&setup, &ctx.grid, true)?;
    write_output(a.out.as_deref(), &result.to_csv()?)
}

pub fn calibrate(a: &EvalArgs) -> CmdResult {
    let ctx = EvalContext::load(a)?;
    ctx.require_fvib("calibrate")?;
    let samples = ctx.samples(a, ctx.config.eval.samples)?;
    let methods = &ctx.config.eval.methods;
    let net = ctx.checkpoint.net()?;
    let targets = ctx.checkpoint.targets()?;
    let baseline = if methods.contains(&CalibrationMethod::TemperatureScaling) {
        log::info!("training the cross-entropy baseline for temperature scaling");
        Some(vib::train_cross_entropy(
            &ctx.splits.train,
            &ctx.config.model.hidden,
            &ctx.config.train,
        )?)
    } else {
        None
    };
    let setup = CalibrationSetup {
        net: &net,
        targets: &targets,
        ct: ctx.ct,
        val: &ctx.splits.val,
        test: &ctx.splits.test,
        grid: &ctx.grid,
        samples,
        seed: ctx.seed,
        bins: ctx.config.eval.bins,
        baseline: baseline.as_ref(),
    };
    let reports = sweep::run_calibration(&setup, methods)?;
    write_output(a.out.as_deref(), &sweep::comparison_csv(&reports)?)?;
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Internal(e.into()))? + "\n";
        write_output(Some(&sibling(out, "json")), &json)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let ctx = EvalContext::load(a)?;
    let samples = ctx.samples(a, ctx.config.eval.accuracy_samples)?;
    let bins = ctx.config.eval.bins;
    let rows = match ctx.checkpoint.kind {
        ModelKind::Fvib => sweep::evaluate_fvib(
            &ctx.checkpoint.net()?,
            &ctx.checkpoint.targets()?,
            ctx.ct,
            &ctx.splits.test,
            &ctx.grid,
            samples,
            ctx.seed,
            bins,
        )?,
        ModelKind::Vib | ModelKind::Taylor => vec![sweep::evaluate_baseline(
            &ctx.checkpoint.vib_encoder()?,
            &ctx.splits.test,
            samples,
            ctx.seed,
            bins,
        )?],
    };
    write_output(a.out.as_deref(), &sweep::eval_csv(&rows)?)
}

pub fn verify(a: &VerifyArgs) -> CmdResult {
    let report = verify::run_all(VerifyOptions {
        corrupt_target_matrix: a.corrupt_target_matrix,
    })?;
    println!("{report}");
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Internal(e.into()))? + "\n";
        write_output(Some(out), &json)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}
