//! `semidrd` command-line tool: synthesize data, train, derain, evaluate and
//! inspect receptive fields.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidrd::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use semidrd::config::TrainConfig;
use semidrd::data::{
    composite, synthesize_background, synthesize_streaks, Image, LabeledEntry, Manifest, StreakParams,
    UnlabeledEntry,
};
use semidrd::drn::{RfLayout, RfSpec};
use semidrd::eval::{evaluate, evaluate_inputs, EvalItem};
use semidrd::train::{LossLog, LossReport, TrainObserver, Trainer};

const SEED_ENV: &str = "SEMIDRD_SEED";

#[derive(Parser)]
#[command(name = "semidrd", version, about = "Semi-supervised single-image deraining")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic rainy/clean pairs, unpaired rainy images and a manifest.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Unpaired rainy images (defaults to --count).
        #[arg(long)]
        unlabeled: Option<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config.echo, loss.csv and ck-epoch-N into --out.
    Train {
        /// TOML config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest with the labeled pairs (its unlabeled entries are used
        /// unless --unlabeled is given).
        #[arg(long)]
        labeled: Option<PathBuf>,
        /// Manifest whose unlabeled entries form the real-rain pool.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        supervised_only: bool,
        /// Continue from a checkpoint (its config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derain PNG images (files or directories) with a checkpoint.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or, without one, the rainy inputs) on a
    /// manifest's labeled pairs; writes metrics.csv into --out.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print receptive field per depth for a dilation set and for the
    /// 16-layer dilation-7 table.
    InspectRf {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        dilations: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        blocks: usize,
        /// Also run the impulse-response oracle and print it alongside.
        #[arg(long)]
        verify: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<semidrd::Error>())
                .map_or("error", |e| e.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            count,
            unlabeled,
            size,
            seed,
            out,
        } => synth(count, unlabeled.unwrap_or(count), size, seed, &out),
        Cmd::Train {
            config,
            labeled,
            unlabeled,
            epochs,
            seed,
            supervised_only,
            resume,
            out,
        } => train(TrainArgs {
            config,
            labeled,
            unlabeled,
            epochs,
            seed,
            supervised_only,
            resume,
            out,
        }),
        Cmd::Derain {
            checkpoint,
            input,
            out,
        } => derain(&checkpoint, &input, &out),
        Cmd::Eval {
            checkpoint,
            manifest,
            out,
        } => eval(checkpoint.as_deref(), &manifest, &out),
        Cmd::InspectRf {
            dilations,
            blocks,
            verify,
        } => inspect_rf(&dilations, blocks, verify),
    }
}

fn synth(count: usize, unlabeled: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        bail!(semidrd::Error::InvalidArgument("--count must be >= 1".into()));
    }
    std::fs::create_dir_all(out.join("labeled")).with_context(|| format!("creating {}", out.display()))?;
    std::fs::create_dir_all(out.join("unlabeled"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::new(out);
    for i in 0..count {
        let clean = synthesize_background(size, size, rng.random())?.quantized();
        let params = StreakParams {
            angle: rng.random_range(-30.0..=30.0),
            length: rng.random_range(4.0..16.0),
            density: rng.random_range(0.02..0.08),
            intensity: rng.random_range(0.4..0.9),
            seed: rng.random(),
        };
        let rainy = composite(&clean, &synthesize_streaks(size, size, &params)?)?;
        let (r, c) = (format!("labeled/{i:04}_rainy.png"), format!("labeled/{i:04}_clean.png"));
        rainy.write_png(out.join(&r))?;
        clean.write_png(out.join(&c))?;
        manifest.labeled.push(LabeledEntry {
            rainy: r.into(),
            clean: c.into(),
        });
    }
    // The unpaired pool uses longer, brighter and steeper streaks, a stand-in
    // for the shift between synthetic and real rain.
    for i in 0..unlabeled {
        let clean = synthesize_background(size, size, rng.random())?;
        let params = StreakParams {
            angle: rng.random_range(-45.0..=45.0),
            length: rng.random_range(10.0..24.0),
            density: rng.random_range(0.04..0.12),
            intensity: rng.random_range(0.6..=1.0),
            seed: rng.random(),
        };
        let rainy = composite(&clean, &synthesize_streaks(size, size, &params)?)?;
        let p = format!("unlabeled/{i:04}.png");
        rainy.write_png(out.join(&p))?;
        manifest.unlabeled.push(UnlabeledEntry { rainy: p.into() });
    }
    manifest.save(out.join("manifest.toml"))?;
    println!("wrote {count} pairs and {unlabeled} unlabeled images to {}", out.display());
    Ok(())
}

struct TrainArgs {
    config: Option<PathBuf>,
    labeled: Option<PathBuf>,
    unlabeled: Option<PathBuf>,
    epochs: Option<u64>,
    seed: Option<u64>,
    supervised_only: bool,
    resume: Option<PathBuf>,
    out: PathBuf,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| {
            semidrd::Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))
        })?)),
        Err(_) => Ok(None),
    }
}

/// Writes the loss log and an end-of-epoch checkpoint into the run directory.
struct RunObserver {
    log: LossLog,
    out: PathBuf,
    last: Option<LossReport>,
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, r: &LossReport) -> semidrd::Result<ControlFlow<()>> {
        self.log.write(r)?;
        self.last = Some(r.clone());
        Ok(ControlFlow::Continue(()))
    }

    fn on_epoch(&mut self, ck: &Checkpoint) -> semidrd::Result<()> {
        save_checkpoint(ck, self.out.join(format!("ck-epoch-{}", ck.epoch)))?;
        if let Some(r) = &self.last {
            println!("epoch {} step {} lr {:e} loss {:.6}", ck.epoch, ck.step, r.lr, r.total);
        }
        Ok(())
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let labeled_manifest = a
        .labeled
        .as_ref()
        .ok_or_else(|| semidrd::Error::InvalidArgument("--labeled <manifest> is required".into()))?;
    let manifest = Manifest::load(labeled_manifest)?;
    let labeled = manifest.load_labeled()?;
    let unlabeled = match &a.unlabeled {
        Some(p) => Manifest::load(p)?.load_unlabeled()?,
        None => manifest.load_unlabeled()?,
    };

    let mut trainer = match &a.resume {
        Some(ck) => {
            if a.config.is_some() || a.seed.is_some() {
                bail!(semidrd::Error::Config(
                    "--resume continues with the checkpoint's config; drop --config/--seed".into()
                ));
            }
            let ck = load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
            Trainer::from_checkpoint(&ck)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = env_seed()? {
                cfg.seed = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if a.supervised_only {
                cfg.supervised_only = true;
            }
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    if let Some(e) = a.epochs {
        trainer.set_epochs(e);
    }
    if a.resume.is_some() && a.supervised_only && !trainer.config().supervised_only {
        bail!(semidrd::Error::Config("cannot switch to --supervised-only on resume".into()));
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.echo"), trainer.config().to_toml()?)?;
    let csv = a.out.join("loss.csv");
    let log = if a.resume.is_some() {
        LossLog::append(&csv)?
    } else {
        LossLog::create(&csv)?
    };
    let mut obs = RunObserver {
        log,
        out: a.out.clone(),
        last: None,
    };
    let ck = trainer.fit(&labeled, &unlabeled, &mut obs)?;
    println!(
        "trained to epoch {} ({} steps); checkpoints in {}",
        ck.epoch,
        ck.step,
        a.out.display()
    );
    Ok(())
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn derain(checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .model()?;
    let files = collect_pngs(inputs)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for f in &files {
        let img = Image::read_png(f).with_context(|| format!("reading {}", f.display()))?;
        let y = model.derain(&img.to_tensor())?;
        let name = f.file_name().context("input has no file name")?;
        Image::from_tensor_clamped(&y, 0)?.write_png(out.join(name))?;
    }
    println!("derained {} images into {}", files.len(), out.display());
    Ok(())
}

fn eval(checkpoint: Option<&Path>, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let ids = manifest.labeled_ids();
    let items: Vec<EvalItem> = ids
        .into_iter()
        .zip(manifest.load_labeled()?)
        .map(|(id, s)| EvalItem {
            id,
            rainy: s.rainy,
            clean: s.clean,
        })
        .collect();
    let report = match checkpoint {
        Some(p) => {
            let model = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.model()?;
            evaluate(&model, &items)?
        }
        None => evaluate_inputs(&items)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    report.write_csv(out.join("metrics.csv"))?;
    println!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.rows.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

fn inspect_rf(dilations: &[usize], blocks: usize, verify: bool) -> Result<()> {
    let spec = RfSpec::sdcab(blocks, dilations);
    let table = RfSpec {
        layout: RfLayout::SingleConv,
        ..RfSpec::layer_table()
    };
    let names: Vec<String> = dilations.iter().map(|d| d.to_string()).collect();
    let col = format!("rf{{{}}}", names.join(","));
    if verify {
        println!("depth\t{col}\timpulse\trf_d7\timpulse_d7");
    } else {
        println!("depth\t{col}\trf_d7");
    }
    for depth in 0..=blocks + 2 {
        let rf = spec.receptive_field(depth)?;
        let d7 = if depth <= table.blocks + 2 {
            table.receptive_field(depth)?.to_string()
        } else {
            "-".into()
        };
        if verify {
            let imp = spec.impulse_footprint(depth)?;
            let imp7 = if depth <= table.blocks + 2 {
                table.impulse_footprint(depth)?.to_string()
            } else {
                "-".into()
            };
            println!("{depth}\t{rf}\t{imp}\t{d7}\t{imp7}");
        } else {
            println!("{depth}\t{rf}\t{d7}");
        }
    }
    Ok(())
}
