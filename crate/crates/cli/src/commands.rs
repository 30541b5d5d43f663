//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use jgrp2o::config::{RunConfig, Split};
use jgrp2o::data::{write_native, DatasetFormat, HandModel, SynthDataset};
use jgrp2o::eval::{evaluate, predict_all, report_from_poses, write_report};
use jgrp2o::model::JgrP2o;
use jgrp2o::training::{fit, Checkpoint, Event, StepLog, TrainState};
use jgrp2o::{Error, Result};
use rayon::prelude::*;

use crate::{Cli, Command, EvalArgs, GlobalArgs, GradcheckArgs, InferArgs, SynthArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Config(_)
        | Error::Validation(_)
        | Error::Io { .. }
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::Version { .. } => 2,
        _ => 1,
    }
}

/// Caps the worker pool at `JGRP2O_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("JGRP2O_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("JGRP2O_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {n} worker threads: {e}")))
}

pub fn run(cli: Cli) -> Result<u8> {
    let g = cli.global;
    match cli.command {
        Command::Train(a) => train(&g, a),
        Command::Eval(a) => eval(&g, a),
        Command::Infer(a) => infer(&g, a),
        Command::Gradcheck(a) => gradcheck(&g, a),
        Command::Params => params(&g),
        Command::Synth(a) => synth(&g, a),
    }
}

fn resolve(g: &GlobalArgs, flags: Vec<String>) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    overrides.extend(flags);
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn out_dir(g: &GlobalArgs, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Points `split` at `synth` or at a dataset path.
fn select_data(cfg: &mut RunConfig, data: Option<&str>, split: Split) {
    match data {
        None => {}
        Some("synth") => cfg.data.format = DatasetFormat::Synth,
        Some(path) => {
            if cfg.data.format == DatasetFormat::Synth {
                cfg.data.format = DatasetFormat::Native;
            }
            match split {
                Split::Train => cfg.data.train = path.to_string(),
                Split::Test => cfg.data.test = path.to_string(),
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(g: &GlobalArgs, a: TrainArgs) -> Result<u8> {
    let mut flags = Vec::new();
    if let Some(s) = g.seed {
        flags.push(format!("train.seed={s}"));
    }
    if let Some(e) = a.epochs {
        flags.push(format!("train.epochs={e}"));
    }
    let mut cfg = resolve(g, flags)?;
    select_data(&mut cfg, a.data.as_deref(), Split::Train);
    cfg.validate()?;
    let model = JgrP2o::new(cfg.model_config()?)?;
    let mut state = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config.backbone != cfg.backbone || ckpt.config.jgr != cfg.jgr {
                return Err(Error::Validation(format!(
                    "checkpoint {} was written for a different model configuration",
                    path.display()
                )));
            }
            ckpt.state
        }
        None => TrainState::new(&model, cfg.train.seed)?,
    };
    let data = cfg.materialize(Split::Train)?;
    let out = out_dir(g, "runs/train");
    cfg.echo(&out)?;
    let log_path = out.join("train_log.csv");
    let append = a.resume.is_some() && log_path.exists();
    let file = if append {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{}", StepLog::header(cfg.loss.stages)).map_err(|e| Error::io(&log_path, e))?;
    }
    let every = cfg.train.checkpoint_every;
    let result = fit(&model, &cfg, &data, &mut state, &mut |ev| match ev {
        Event::Step(s) => writeln!(log, "{}", s.csv_line()).map_err(|e| Error::io(&log_path, e)),
        Event::EpochEnd {
            epoch,
            mean_total,
            state,
        } => {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            eprintln!("epoch {epoch}: mean loss {mean_total:.6}");
            if every > 0 && epoch % every == 0 {
                let ckpt = Checkpoint {
                    config: cfg.clone(),
                    state: state.clone(),
                };
                ckpt.save(&out.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
            Ok(())
        }
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    let last = out.join("last.ckpt");
    Checkpoint { config: cfg, state }.save(&last)?;
    println!("wrote {}", last.display());
    Ok(0)
}

/// Checkpoint plus the configuration used to read data: the checkpoint's
/// own, or `--config` when given, with overrides on top.
fn load_for_inference(g: &GlobalArgs, checkpoint: &Path, data: Option<&str>) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(Some(p), &g.overrides)?,
        None => RunConfig::resolve(Some(&ckpt.config.to_toml()), &g.overrides)?,
    };
    select_data(&mut cfg, data, Split::Test);
    cfg.validate()?;
    Ok((ckpt, cfg))
}

fn eval(g: &GlobalArgs, a: EvalArgs) -> Result<u8> {
    let (ckpt, cfg) = load_for_inference(g, &a.checkpoint, a.data.as_deref())?;
    let data = cfg.dataset(Split::Test)?;
    ckpt.check_joints(data.joints())?;
    let report = if a.oracle {
        let gts = (0..data.len())
            .map(|i| data.get(i).map(|s| s.pose_world))
            .collect::<Result<Vec<_>>>()?;
        report_from_poses(&gts, &gts, &cfg.eval)?
    } else {
        let model = JgrP2o::new(ckpt.config.model_config()?)?;
        evaluate(&model, &ckpt.state.params, data.as_ref(), &cfg.eval)?.0
    };
    let out = out_dir(g, "runs/eval");
    write_report(&report, &out)?;
    cfg.echo(&out)?;
    println!(
        "frames {}  mean 3D error {:.4} mm",
        report.frames, report.mean_error_mm
    );
    Ok(0)
}

fn infer(g: &GlobalArgs, a: InferArgs) -> Result<u8> {
    let (ckpt, cfg) = load_for_inference(g, &a.checkpoint, a.data.as_deref())?;
    let data = cfg.dataset(Split::Test)?;
    ckpt.check_joints(data.joints())?;
    let model = JgrP2o::new(ckpt.config.model_config()?)?;
    let (preds, _) = predict_all(&model, &ckpt.state.params, data.as_ref(), cfg.eval.batch_size)?;
    let mut csv = String::from("frame,joint,u,v,z,x_mm,y_mm,z_mm\n");
    for (f, p) in preds.iter().enumerate() {
        for (j, (uvz, xyz)) in p.uvz.iter().zip(&p.world).enumerate() {
            csv.push_str(&format!(
                "{f},{j},{},{},{},{},{},{}\n",
                uvz[0], uvz[1], uvz[2], xyz[0], xyz[1], xyz[2]
            ));
        }
    }
    let out = out_dir(g, "runs/infer");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join("predictions.csv");
    write_file(&path, &csv)?;
    cfg.echo(&out)?;
    println!("wrote {} frames to {}", preds.len(), path.display());
    Ok(0)
}

fn gradcheck(g: &GlobalArgs, a: GradcheckArgs) -> Result<u8> {
    let mut flags = Vec::new();
    if let Some(s) = g.seed {
        flags.push(format!("gradcheck.seed={s}"));
    }
    if let Some(t) = a.tol {
        flags.push(format!("gradcheck.tol={t:e}"));
    }
    let cfg = resolve(g, flags)?;
    let start = std::time::Instant::now();
    let report = jgrp2o::training::check_model_gradients(&cfg)?;
    let mut entries = report.entries.clone();
    entries.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    for e in entries.iter().take(5) {
        println!("  {:<40} {:>10.3e}  ({} scalars)", e.name, e.max_rel_error, e.checked);
    }
    let worst = report
        .worst
        .as_ref()
        .map_or(String::from("-"), |(n, i)| format!("{n}[{i}]"));
    println!(
        "max relative error {:.3e} at {worst}; {} scalars checked, {} with reduced step, {} across a kink; {:.1}s",
        report.max_rel_error,
        report.checked,
        report.refined,
        report.kinked,
        start.elapsed().as_secs_f64()
    );
    if report.max_rel_error <= cfg.gradcheck.tol {
        println!("PASS (tolerance {:e})", cfg.gradcheck.tol);
        Ok(0)
    } else {
        println!("FAIL (tolerance {:e})", cfg.gradcheck.tol);
        Ok(4)
    }
}

fn params(g: &GlobalArgs) -> Result<u8> {
    let cfg = resolve(g, Vec::new())?;
    let model = JgrP2o::new(cfg.model_config()?)?;
    for (name, count) in model.param_breakdown() {
        println!("{name:<20} {count:>10}");
    }
    println!("{:<20} {:>10}", "total", model.param_count());
    Ok(0)
}

fn synth(g: &GlobalArgs, a: SynthArgs) -> Result<u8> {
    let mut flags = Vec::new();
    if let Some(s) = g.seed {
        flags.push(format!("data.seed={s}"));
    }
    let cfg = resolve(g, flags)?;
    let ds = SynthDataset {
        model: HandModel::default(),
        settings: cfg.synth_settings(),
        seed: cfg.data.seed,
        stream: 0,
        count: a.count,
    };
    let records = (0..a.count)
        .into_par_iter()
        .map(|i| ds.generate_raw(i))
        .collect::<Result<Vec<_>>>()?;
    let out = out_dir(g, "synth_data");
    let n = write_native(
        &out,
        &ds.settings.intrinsics,
        ds.settings.cube,
        records.iter().map(|(raw, joints)| (raw, joints.as_slice())),
    )?;
    println!("wrote {n} samples to {}", out.display());
    Ok(0)
}
