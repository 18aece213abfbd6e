use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use usv_core::detector::{detection_csv, train_detector, AnnotatedFrame, DetectorModel};
use usv_core::gan::{loss_csv, train, DehazeModel, Dehazer};
use usv_core::harness::{self, DatasetManifest, RunConfig, Split};
use usv_core::imaging::write_metrics;
use usv_core::servo::{ModelDetector, TruthDetector, VesselDetector};
use usv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "usvtrack", version, about = "Haze-robust USV target tracking experiments")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory receiving every output of this invocation.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render paired clear/hazy frames along approach trajectories.
    GenDataset,
    /// Train the dehazing GAN on the train split.
    TrainDehaze {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the detector on clear train frames.
    TrainDetector {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// PSNR/SSIM/MSE of hazy and dehazed test frames against clear.
    EvalDehaze {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Detection success on clear, hazy and dehazed test frames.
    EvalDetector {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        dehaze: Option<PathBuf>,
    },
    /// Closed-loop approach of the configured scenario.
    Track {
        /// Detector checkpoint; omit together with --truth to use renderer boxes.
        #[arg(long, required_unless_present = "truth")]
        detector: Option<PathBuf>,
        #[arg(long, conflicts_with = "detector")]
        truth: bool,
        /// Dehazing checkpoint, used when the config enables dehazing.
        #[arg(long)]
        dehaze: Option<PathBuf>,
        #[arg(long)]
        no_dehaze: bool,
        #[arg(long)]
        max_ticks: Option<usize>,
    },
    /// Merge metrics tables of several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Recompute PSNR from MSE for every published table row.
    AuditTables,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDataset => "gen-dataset",
            Command::TrainDehaze { .. } => "train-dehaze",
            Command::TrainDetector { .. } => "train-detector",
            Command::EvalDehaze { .. } => "eval-dehaze",
            Command::EvalDetector { .. } => "eval-detector",
            Command::Track { .. } => "track",
            Command::Report { .. } => "report",
            Command::AuditTables => "audit-tables",
        }
    }
}

fn load_dehazer(path: Option<&Path>) -> Result<Option<DehazeModel>> {
    path.map(DehazeModel::load).transpose()
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.resolved(cli.seed)?;
    if let Command::Track { max_ticks: Some(n), .. } = cli.command {
        cfg.servo.stop.max_ticks = n;
        cfg.servo.validate()?;
    }
    if let Command::Track { no_dehaze: true, .. } = cli.command {
        cfg.track.dehaze = false;
    }
    let out = cli.out.clone().unwrap_or_else(|| harness::default_run_dir(cli.command.name()));
    cfg.write_to_run_dir(&out)?;

    match cli.command {
        Command::GenDataset => {
            let m = harness::gen_dataset(&cfg.dataset, cfg.seed, &out)?;
            println!("frames={} train={} test={} dir={}", m.frames.len(), m.counts.train, m.counts.test, out.display());
        }
        Command::TrainDehaze { dataset } => {
            let manifest = DatasetManifest::load(&dataset)?;
            let pairs: Vec<_> = manifest.load_split(&dataset, Split::Train)?.into_iter().map(|f| (f.hazy, f.clear)).collect();
            let mut model = train(&pairs, &cfg.dehaze)?;
            model.save(&out.join("dehaze.ckpt"))?;
            harness::write_text(&out.join("loss.csv"), &loss_csv(&model.losses))?;
            let last = model.losses.last().map(|l| l.gen_loss).unwrap_or(f64::NAN);
            println!("epochs={} final_gen_loss={last:.6} params={}", model.losses.len(), model.generator_params());
        }
        Command::TrainDetector { dataset } => {
            let manifest = DatasetManifest::load(&dataset)?;
            let frames: Vec<AnnotatedFrame> =
                manifest.load_split(&dataset, Split::Train)?.iter().map(|f| f.annotated_clear()).collect();
            let mut model = train_detector(&frames, &cfg.detector)?;
            model.save(&out.join("detector.ckpt"))?;
            let mut csv = String::from("epoch,loss\n");
            for l in &model.losses {
                csv.push_str(&format!("{},{}\n", l.epoch, l.loss));
            }
            harness::write_text(&out.join("detector_loss.csv"), &csv)?;
            let last = model.losses.last().map(|l| l.loss).unwrap_or(f64::NAN);
            println!("epochs={} final_loss={last:.6}", model.losses.len());
        }
        Command::EvalDehaze { dataset, checkpoint } => {
            let manifest = DatasetManifest::load(&dataset)?;
            let model = load_dehazer(checkpoint.as_deref())?;
            let rows = harness::eval_dehaze(&manifest, &dataset, model.as_ref().map(|m| m as &dyn Dehazer), &cfg.ssim)?;
            write_metrics(&rows, &out, harness::report::METRICS_STEM)?;
            for r in &rows {
                println!("{} psnr={:.2} ssim={:.4} mse={:.2} n={}", r.label, r.psnr_db, r.ssim, r.mse, r.n_images);
            }
            if let Some(m) = &model {
                let d = harness::discriminator_scores(&manifest, &dataset, m)?;
                harness::write_json(&out.join("discriminator.json"), &d)?;
                println!("discriminator real={:.4} generated={:.4}", d.real, d.generated);
            }
        }
        Command::EvalDetector { dataset, detector, dehaze } => {
            let manifest = DatasetManifest::load(&dataset)?;
            let det = DetectorModel::load(&detector)?;
            let model = load_dehazer(dehaze.as_deref())?;
            let (report, dets) = harness::eval_detector(
                &manifest,
                &dataset,
                &det,
                model.as_ref().map(|m| m as &dyn Dehazer),
                &cfg.servo.detect,
            )?;
            harness::write_text(&out.join("detection_report.csv"), &harness::detection_report_csv(&report))?;
            harness::write_json(&out.join("detection_report.json"), &report)?;
            harness::write_text(&out.join("detections.csv"), &detection_csv(&dets))?;
            for r in &report.rows {
                println!("{} success_rate={:.4} ({}/{}) false_positives={}", r.input, r.success_rate, r.successes, r.annotated, r.false_positives);
            }
        }
        Command::Track { detector, truth, dehaze, .. } => {
            let model = if cfg.track.dehaze {
                let path = dehaze.ok_or_else(|| {
                    Error::InvalidArgument("dehazing is enabled; pass --dehaze PATH or --no-dehaze".into())
                })?;
                Some(DehazeModel::load(&path)?)
            } else {
                None
            };
            let det_model = detector.as_deref().map(DetectorModel::load).transpose()?;
            let source: Box<dyn VesselDetector + '_> = match (&det_model, truth) {
                (Some(m), _) => Box::new(ModelDetector { model: m, params: cfg.servo.detect }),
                (None, _) => Box::new(TruthDetector),
            };
            let (_, summary) = harness::track(&cfg, source.as_ref(), model.as_ref().map(|m| m as &dyn Dehazer), &out)?;
            println!("{}", summary.line);
        }
        Command::Report { runs } => {
            let rows = harness::report(&runs)?;
            write_metrics(&rows, &out, "report")?;
            print!("{}", usv_core::imaging::metrics_csv(&rows));
        }
        Command::AuditTables => {
            let rows = harness::audit_paper_tables();
            harness::write_text(&out.join("audit.csv"), &harness::audit_csv(&rows))?;
            harness::write_json(&out.join("audit.json"), &rows)?;
            print!("{}", harness::audit_csv(&rows));
            let passed = rows.iter().filter(|r| r.pass).count();
            println!("{passed}/{} rows consistent within {} dB", rows.len(), harness::AUDIT_TOLERANCE_DB);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
