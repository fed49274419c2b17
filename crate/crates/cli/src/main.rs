//! `patchlab`: generate scenes, train the detector and patches, and run the
//! evaluation tables from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for I/O errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchlab::attack::{load_patch, save_patch, write_curve_csv, Patch};
use patchlab::defense::write_scores_csv;
use patchlab::detector::{load_weights, save_weights, DetectorParams};
use patchlab::harness::{generate_dataset, patch_datasets, run_train_detector, DetectorRun, ExperimentConfig, ExperimentReport, Lab};
use patchlab::pnm::save_image;
use patchlab::Error;

#[derive(Parser)]
#[command(name = "patchlab", version, about = "Adversarial patches against a toy grid detector")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DetectorArg {
    /// Detector weights; defaults to `<out>/detector.bin`, trained if absent.
    #[arg(long)]
    detector: Option<PathBuf>,
}

#[derive(Args)]
struct PatchArgs {
    #[command(flatten)]
    detector: DetectorArg,
    /// Patch sidecar file; defaults to `<out>/patch.txt`, trained if absent.
    #[arg(long)]
    patch: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the patch train/test scenes as PGM files with their boxes.
    GenData,
    /// Train the detector and report its held-out quality.
    TrainDetector,
    /// Train a universal patch of `patch_size`.
    TrainPatch(DetectorArg),
    /// Clean, noise-patch, and trained-patch confidences.
    Eval(PatchArgs),
    /// One patch per size in `sweep_sizes`.
    SweepSize(DetectorArg),
    /// Learning rate × transformation count grid.
    SweepHyper(DetectorArg),
    /// Gaussian noise and blur countermeasures.
    Defend(PatchArgs),
    /// Confidence as a function of patch position.
    Heatmap(PatchArgs),
    /// Blur-delta attack classifier with a calibrated threshold.
    DetectAttack(PatchArgs),
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn detector(&self, arg: &DetectorArg) -> patchlab::Result<DetectorParams> {
        if let Some(p) = &arg.detector {
            return load_weights(p);
        }
        let default = self.path("detector.bin");
        if default.exists() {
            return load_weights(default);
        }
        self.train_detector()
    }

    fn train_detector(&self) -> patchlab::Result<DetectorParams> {
        self.train_detector_run().map(|run| run.params)
    }

    fn train_detector_run(&self) -> patchlab::Result<DetectorRun> {
        eprintln!("training detector");
        let run = run_train_detector(&self.cfg)?;
        save_weights(&run.params, self.path("detector.bin"))?;
        let mut curve = String::from("epoch,loss\n");
        for (e, l) in run.loss_curve.iter().enumerate() {
            curve.push_str(&format!("{e},{l}\n"));
        }
        fs::write(self.path("detector-loss.csv"), curve)?;
        let data = patch_datasets(&self.cfg)?;
        let mut report = Lab::new(&self.cfg, &run.params, &data).run_clean_baseline()?;
        report.name = "detector".into();
        report.push_note("heldout_clean_mean", run.gate.clean_mean);
        report.push_note("heldout_false_detection_rate", run.gate.false_detection_rate);
        report.push_note("heldout_scenes", run.gate.n_person);
        self.emit(&report, "detector")?;
        Ok(run)
    }

    fn patch(&self, lab: &Lab, arg: &PatchArgs) -> patchlab::Result<Patch> {
        if let Some(p) = &arg.patch {
            return load_patch(p);
        }
        let default = self.path("patch.txt");
        if default.exists() {
            return load_patch(default);
        }
        self.train_patch(lab)
    }

    fn train_patch(&self, lab: &Lab) -> patchlab::Result<Patch> {
        eprintln!("training {0}x{0} patch", self.cfg.patch_size);
        let run = lab.train_patch(self.cfg.patch_size)?;
        save_patch(&run.patch, self.path("patch.pgm"), self.path("patch.txt"))?;
        write_curve_csv(&run.curve, self.path("patch-curve.csv"))?;
        Ok(run.patch)
    }

    /// Writes `<stem>.csv` and `<stem>.txt` and prints the table.
    fn emit(&self, report: &ExperimentReport, stem: &str) -> patchlab::Result<()> {
        report.save_csv(self.path(&format!("{stem}.csv")))?;
        let text = report.render();
        fs::write(self.path(&format!("{stem}.txt")), &text)?;
        println!("{text}");
        Ok(())
    }
}

fn gen_data(ctx: &Ctx) -> patchlab::Result<()> {
    let (train, test) = generate_dataset(&ctx.cfg.scene()?, ctx.cfg.n_train, ctx.cfg.n_test, ctx.cfg.stream("dataset"))?;
    let dir = ctx.path("data");
    fs::create_dir_all(&dir)?;
    let mut truth = String::from("split,index,class,center_x,center_y,width,height\n");
    for (split, set) in [("train", &train), ("test", &test)] {
        for (k, s) in set.iter().enumerate() {
            save_image(&s.image, dir.join(format!("{split}-{k:03}.pgm")))?;
            for t in &s.truth {
                let b = t.bbox;
                truth.push_str(&format!("{split},{k},{},{},{},{},{}\n", t.class_id, b.center_x, b.center_y, b.width, b.height));
            }
        }
    }
    fs::write(dir.join("truth.csv"), truth)?;
    println!("wrote {} train and {} test scenes to {}", train.len(), test.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> patchlab::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.common.out)?;
    let ctx = Ctx { cfg, out: cli.common.out };
    fs::write(ctx.path("config.txt"), ctx.cfg.to_text())?;

    let with_lab = |arg: &DetectorArg, f: &dyn Fn(&Lab) -> patchlab::Result<()>| -> patchlab::Result<()> {
        let params = ctx.detector(arg)?;
        let data = patch_datasets(&ctx.cfg)?;
        f(&Lab::new(&ctx.cfg, &params, &data))
    };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainDetector => {
            let gate = ctx.train_detector_run()?.gate;
            println!(
                "held-out clean mean {:.3} over {} scenes, false detections {:.1}% over {} backgrounds",
                gate.clean_mean,
                gate.n_person,
                100.0 * gate.false_detection_rate,
                gate.n_background
            );
            Ok(())
        }
        Command::TrainPatch(d) => with_lab(d, &|lab| ctx.train_patch(lab).map(|_| ())),
        Command::Eval(a) => with_lab(&a.detector, &|lab| {
            let z = ctx.patch(lab, a)?;
            ctx.emit(&lab.run_noise_patch_baseline(&z)?, "eval")
        }),
        Command::SweepSize(d) => with_lab(d, &|lab| {
            let (report, patches) = lab.run_patch_size_sweep()?;
            for z in &patches {
                let n = z.size();
                save_patch(z, ctx.path(&format!("patch-{n}.pgm")), ctx.path(&format!("patch-{n}.txt")))?;
            }
            ctx.emit(&report, "sweep-size")
        }),
        Command::SweepHyper(d) => with_lab(d, &|lab| ctx.emit(&lab.run_hyperparam_sweep()?, "sweep-hyper")),
        Command::Defend(a) => with_lab(&a.detector, &|lab| {
            let z = ctx.patch(lab, a)?;
            ctx.emit(&lab.run_noise_defense(&z)?, "noise-defense")?;
            ctx.emit(&lab.run_blur_defense(&z)?, "blur-defense")
        }),
        Command::Heatmap(a) => with_lab(&a.detector, &|lab| {
            let z = ctx.patch(lab, a)?;
            let run = lab.run_heatmap(&z)?;
            save_image(&run.mean_map().render(), ctx.path("heatmap.pgm"))?;
            let sidecar = run.sidecar();
            fs::write(ctx.path("heatmap.txt"), &sidecar)?;
            for line in sidecar.lines().take_while(|l| !l.starts_with("grid")) {
                println!("{line}");
            }
            Ok(())
        }),
        Command::DetectAttack(a) => with_lab(&a.detector, &|lab| {
            let z = ctx.patch(lab, a)?;
            let run = lab.run_attack_detection(&z)?;
            write_scores_csv(&run.scores, ctx.path("attack-scores.csv"))?;
            ctx.emit(&run.report, "attack-detection")
        }),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::MalformedHeader(_) | Error::UnsupportedBitDepth(_) | Error::CorruptImage(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
