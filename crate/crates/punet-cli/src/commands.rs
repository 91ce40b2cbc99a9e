//! Subcommand implementations.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use punet::arch::{build_network, ArchitectureSpec};
use punet::checkpoint;
use punet::data::{noise_degradation, poisson_corrupt, Normalizer};
use punet::error::{Error, Result};
use punet::train::{
    evaluate, train, EpochRecord, MetricsSink, TrainConfig, METRICS_CSV_HEADER,
};
use punet::verify;

use crate::config::{load_data, maybe_augment, noise_config, parse_schedule, RunConfig};

/// Streams metrics rows to disk as epochs finish, so partial results survive
/// a divergence abort.
struct CsvFileSink {
    file: File,
}

impl CsvFileSink {
    fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{METRICS_CSV_HEADER}")?;
        file.flush()?;
        Ok(Self { file })
    }
}

impl MetricsSink for CsvFileSink {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    classes: usize,
    param_count: usize,
    status: &'a str,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    wall_clock_seconds: f64,
    time_to_80pct_val_seconds: Option<f64>,
    time_to_best_val_seconds: Option<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    // reject bad configs before creating anything
    cfg.validate()?;
    let schedule = parse_schedule(&cfg.schedule)?;

    let data = load_data(cfg)?;
    let train_split = maybe_augment(cfg, data.train)?;
    let classes = train_split.num_classes();
    let spec = ArchitectureSpec::by_name(&cfg.arch, classes)?;
    let mut net = build_network::<f32>(&spec)?;
    net.init_parameters(cfg.seed);
    let normalizer = Normalizer::fit(&train_split);

    std::fs::create_dir_all(out_dir)?;
    let mut sink = CsvFileSink::create(&out_dir.join("metrics.csv"))?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        sgd: cfg.sgd(),
        schedule,
        seed: cfg.seed,
        grad_clip: cfg.grad_clip,
    };

    println!(
        "training {} ({} parameters) on {} train / {} val images, {} epochs",
        cfg.arch,
        net.count_params(),
        train_split.len(),
        data.val.len(),
        cfg.epochs
    );
    let started = Instant::now();
    let result = train(&mut net, &train_split, &data.val, &normalizer, &train_cfg, &mut sink);
    let wall_clock = started.elapsed().as_secs_f64();

    match result {
        Ok(output) => {
            if let Some(bytes) = &output.best_checkpoint {
                std::fs::write(out_dir.join("best.ckpt"), bytes)?;
            }
            checkpoint::save_file(&net, Some(&normalizer), out_dir.join("final.ckpt"))?;
            let manifest = RunManifest {
                config: cfg,
                classes,
                param_count: net.count_params(),
                status: "completed",
                best_epoch: output.best_epoch,
                best_val_loss: output.best_epoch.map(|_| output.best_val_loss),
                wall_clock_seconds: wall_clock,
                time_to_80pct_val_seconds: output.metrics.time_to_val_acc(80.0),
                time_to_best_val_seconds: output.metrics.time_to_best_val(),
            };
            write_json(&out_dir.join("manifest.json"), &manifest)?;
            if let (Some(epoch), Some(rec)) = (output.best_epoch, output.metrics.epochs.last()) {
                println!(
                    "done in {wall_clock:.1}s: best val loss {:.4} at epoch {epoch}, final val acc {:.2}%",
                    output.best_val_loss, rec.val_acc
                );
            } else {
                println!("done in {wall_clock:.1}s (no epochs ran)");
            }
            Ok(())
        }
        Err(err) => {
            // metrics rows up to the failure are already on disk
            let manifest = RunManifest {
                config: cfg,
                classes,
                param_count: net.count_params(),
                status: "diverged",
                best_epoch: None,
                best_val_loss: None,
                wall_clock_seconds: wall_clock,
                time_to_80pct_val_seconds: None,
                time_to_best_val_seconds: None,
            };
            write_json(&out_dir.join("manifest.json"), &manifest)?;
            Err(err)
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    arch: String,
    dataset: String,
    top1: f64,
    top5: f64,
    loss: f64,
}

fn load_checkpoint_for(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(punet::Network32, Normalizer<f32>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let header = checkpoint::peek_header(&bytes)?;
    if !cfg.arch.is_empty() {
        let expected = ArchitectureSpec::by_name(&cfg.arch, header.arch.num_classes)?;
        if expected != header.arch {
            return Err(Error::Format(format!(
                "checkpoint holds a different architecture than --arch {}",
                cfg.arch
            )));
        }
    }
    let (net, normalizer) = checkpoint::load_network::<f32>(&bytes)?;
    let channels = 3;
    Ok((net, normalizer.unwrap_or_else(|| Normalizer::identity(channels))))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let (net, normalizer) = load_checkpoint_for(cfg, checkpoint_path)?;
    let data = load_data(cfg)?;
    let result = evaluate(&net, &data.test, &normalizer, cfg.batch_size)?;
    println!(
        "test: top1={:.4}% top5={:.4}% loss={:.6} ({} samples)",
        result.top1,
        result.top5,
        result.loss,
        data.test.len()
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(
            &dir.join("eval_report.json"),
            &EvalReport {
                arch: cfg.arch.clone(),
                dataset: cfg.dataset.clone(),
                top1: result.top1,
                top5: result.top5,
                loss: result.loss,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct NoiseReport {
    arch: String,
    dataset: String,
    noise_peak: f64,
    clean_top1: f64,
    clean_top5: f64,
    clean_loss: f64,
    noisy_top1: f64,
    noisy_top5: f64,
    noisy_loss: f64,
    /// Relative drop (clean - noisy) / clean * 100.
    delta_noise_pct: f64,
}

pub fn cmd_noise_eval(cfg: &RunConfig, checkpoint_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let (net, normalizer) = load_checkpoint_for(cfg, checkpoint_path)?;
    let data = load_data(cfg)?;
    let clean = evaluate(&net, &data.test, &normalizer, cfg.batch_size)?;
    let corrupted = poisson_corrupt(&data.test, &noise_config(cfg))?;
    let noisy = evaluate(&net, &corrupted, &normalizer, cfg.batch_size)?;
    let delta = noise_degradation(clean.top1, noisy.top1)?;
    println!(
        "clean: top1={:.4}% top5={:.4}% loss={:.6}",
        clean.top1, clean.top5, clean.loss
    );
    println!(
        "noisy (peak {}): top1={:.4}% top5={:.4}% loss={:.6}",
        cfg.noise_peak, noisy.top1, noisy.top5, noisy.loss
    );
    println!("noise degradation: {delta:.4}%");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(
            &dir.join("noise_report.json"),
            &NoiseReport {
                arch: cfg.arch.clone(),
                dataset: cfg.dataset.clone(),
                noise_peak: cfg.noise_peak,
                clean_top1: clean.top1,
                clean_top5: clean.top5,
                clean_loss: clean.loss,
                noisy_top1: noisy.top1,
                noisy_top5: noisy.top5,
                noisy_loss: noisy.loss,
                delta_noise_pct: delta,
            },
        )?;
    }
    Ok(())
}

/// Runs the verification registry; returns whether every check passed.
pub fn cmd_gradcheck(seed: u64, out_dir: Option<&Path>) -> Result<bool> {
    let reports = verify::run_registry(seed)?;
    print!("{}", verify::reports_to_text(&reports));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.csv"), verify::reports_to_csv(&reports))?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks run, {} failed", reports.len(), failed);
    Ok(failed == 0)
}

pub fn cmd_params(arch: &str, classes: usize) -> Result<()> {
    let spec = ArchitectureSpec::by_name(arch, classes)?;
    let net = build_network::<f32>(&spec)?;
    let audit = verify::audit_params(&net);
    print!("{}", audit.render_text());
    Ok(())
}

/// Maps an error to the process exit code: 2 config, 3 data, 4 divergence,
/// 1 everything else.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::Graph(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Domain(_) | Error::ShapeMismatch(_) => 3,
        Error::NumericalOverflow(_) => 4,
    }
}
