use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mdm_tensor::Rng;
use mdm_video::ablation::{eval_clips, run_ablation, train_missing, AblationSpec};
use mdm_video::config::Config;
use mdm_video::denoiser::LatentShape;
use mdm_video::flops::flops_estimate;
use mdm_video::metrics::{drift_curve, mask_trend};
use mdm_video::report::{
    write_ablation_csvs, write_drift_csv, write_flops_csv, write_gif, write_mask_csv,
    RolloutArtifact,
};
use mdm_video::rollout::{generate_plan_partial, RolloutConfig, SegmentPlan};
use mdm_video::toyworld::{build_corpus, gen_clip, render_clip, Corpus, PromptVocab};
use mdm_video::trainer::{train_until, MaskMode, TrainState, LOG_HEADER};
use mdm_video::{Error, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Parser, Debug)]
#[command(
    name = "mdm",
    version,
    about = "Masked-diffusion video generation on a toy latent world"
)]
struct Cli {
    /// `key = value` file applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data, initialisation and sampling; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base configuration before the file and overrides.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and filter a toy-world corpus.
    GenData {
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train (or resume) a denoiser on a corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train the single-head variant.
        #[arg(long)]
        no_mask: bool,
    },
    /// Sample a single-prompt video.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "right slow")]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Start from the first frame of a fresh ground-truth clip and record it for eval-drift.
        #[arg(long)]
        oracle: bool,
    },
    /// Sample a video whose prompt changes per segment.
    RolloutMulti {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Lines of `frame_count<TAB>prompt`.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Per-frame error of a saved rollout against its ground-truth clip.
    EvalDrift {
        #[arg(long)]
        rollout: Vec<PathBuf>,
    },
    /// Mask trend over sampling steps of a saved rollout.
    MaskStats {
        #[arg(long)]
        rollout: Option<PathBuf>,
    },
    /// Compare training or sampling variants over several seeds.
    Ablate {
        /// One of full, no_mask, zero_anchor, no_noise_aug, t_test_sweep.
        #[arg(long, default_value = "no_mask")]
        mode: String,
        /// Comma-separated inference noise levels for t_test_sweep.
        #[arg(long, value_delimiter = ',')]
        t_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint directory, one file per variant and seed.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Train checkpoints that are not on disk instead of failing.
        #[arg(long)]
        train_missing: bool,
        /// Held-out clips rolled out per arm and seed.
        #[arg(long, default_value_t = 8)]
        eval_clips: usize,
        /// Frames per evaluation rollout, including the given first frame.
        #[arg(long, default_value_t = 17)]
        frames: usize,
        #[arg(long, default_value_t = 777)]
        eval_seed: u64,
    },
    /// Analytic multiply-accumulate count of sampling a video.
    Flops {
        #[arg(long, default_value_t = 16)]
        frames: usize,
    },
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut c = match cli.profile {
        Profile::Desk => Config::desk(),
        Profile::Full => Config::default(),
    };
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(p.display().to_string()),
            _ => Error::Io(e),
        })?;
        c = c.parse_onto(&text)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn or_out(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

/// Model weights and schedule from the checkpoint, sampling settings and seed from the command line.
fn sampling_setup(ckpt: &Path, cli_config: &Config) -> Result<(TrainState, Config)> {
    let st = TrainState::load(ckpt, None)?;
    let mut c = st.config.clone();
    c.sampler = cli_config.sampler.clone();
    c.seed = cli_config.seed;
    c.validate()?;
    Ok((st, c))
}

fn save_rollout(out: &Path, art: &RolloutArtifact) -> Result<()> {
    art.save(&out.join("rollout.bin"))?;
    write_gif(&out.join("rollout.gif"), &art.frames, 8, 12)?;
    println!(
        "rollout frames={} digest={} path={}",
        art.frames.len(),
        art.digest(),
        out.join("rollout.bin").display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    let shape = LatentShape::of(&config.model);
    match &cli.command {
        Command::GenData { clips, length } => {
            let n = clips.unwrap_or(config.data.clips);
            let len = length.unwrap_or(config.data.clip_len);
            let rng = Rng::new(config.seed).split("corpus");
            let corpus = build_corpus(
                n,
                len,
                shape,
                (config.data.motion_lo, config.data.motion_hi),
                &rng,
            )?;
            let p = out.join("corpus.bin");
            corpus.save(&p)?;
            println!(
                "corpus clips={} dropped={} digest={} path={}",
                corpus.clips.len(),
                corpus.dropped,
                corpus.digest()?,
                p.display()
            );
        }
        Command::Train {
            corpus,
            steps,
            resume,
            no_mask,
        } => {
            let corpus = Corpus::load(&or_out(corpus, out, "corpus.bin"))?;
            let mut c = config.clone();
            if *no_mask {
                c.model.use_mask = false;
            }
            if let Some(s) = steps {
                c.train.steps = *s as usize;
            }
            let mut st = match resume {
                Some(p) => {
                    let mut st = TrainState::load(p, Some(&c))?;
                    st.config = c.clone();
                    st
                }
                None => TrainState::new(&c)?,
            };
            let log_path = out.join("train_log.csv");
            let fresh = resume.is_none() || !log_path.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&log_path)?;
            let mut log = csv::Writer::from_writer(file);
            if fresh {
                log.write_record(LOG_HEADER)?;
            }
            let hist = train_until(
                &mut st,
                &corpus,
                c.train.steps as u64,
                MaskMode::Learned,
                Some(&mut log),
            )?;
            let p = out.join("model.ckpt");
            st.save(&p)?;
            fs::write(out.join("config.txt"), c.to_text())?;
            println!(
                "trained step={} final_loss={} path={}",
                st.step,
                hist.last()
                    .map(|h| h.loss.to_string())
                    .unwrap_or_else(|| "none".into()),
                p.display()
            );
        }
        Command::Generate {
            checkpoint,
            prompt,
            frames,
            oracle,
        } => {
            let (st, c) = sampling_setup(&or_out(checkpoint, out, "model.ckpt"), &config)?;
            let ids = PromptVocab.encode(prompt)?;
            let model = st.ema_model()?;
            let clip = if *oracle {
                Some(gen_clip(
                    &ids,
                    *frames,
                    model.shape(),
                    &mut Rng::new(c.seed).split("oracle"),
                )?)
            } else {
                None
            };
            let plan = SegmentPlan::new(vec![(ids.clone(), *frames)])?;
            let rng = Rng::new(c.seed).split("rollout");
            let (state, err) = generate_plan_partial(
                &plan,
                &model,
                &RolloutConfig::from_config(&c),
                &c.schedule()?,
                &rng,
                clip.as_ref().map(|k| &k.frames[0]),
            );
            if let Some(state) = state {
                let art = RolloutArtifact::new(
                    &state,
                    vec![ids],
                    c.seed,
                    c.to_text(),
                    clip.map(|k| k.meta),
                )?;
                save_rollout(out, &art)?;
            }
            if let Some(e) = err {
                return Err(e);
            }
        }
        Command::RolloutMulti { checkpoint, plan } => {
            let (st, c) = sampling_setup(&or_out(checkpoint, out, "model.ckpt"), &config)?;
            let plan = SegmentPlan::load(plan)?;
            let model = st.ema_model()?;
            let rng = Rng::new(c.seed).split("rollout");
            let (state, err) = generate_plan_partial(
                &plan,
                &model,
                &RolloutConfig::from_config(&c),
                &c.schedule()?,
                &rng,
                None,
            );
            if let Some(state) = state {
                let prompts = plan
                    .segments
                    .iter()
                    .take(state.segment_starts.len())
                    .map(|(p, _)| p.clone())
                    .collect();
                let art = RolloutArtifact::new(&state, prompts, c.seed, c.to_text(), None)?;
                save_rollout(out, &art)?;
            }
            if let Some(e) = err {
                return Err(e);
            }
        }
        Command::EvalDrift { rollout } => {
            let paths = if rollout.is_empty() {
                vec![out.join("rollout.bin")]
            } else {
                rollout.clone()
            };
            let mut rows = Vec::new();
            for p in &paths {
                let art = RolloutArtifact::load(p)?;
                let meta = art.oracle.clone().ok_or_else(|| {
                    Error::Missing(format!("{} records no ground-truth clip", p.display()))
                })?;
                let truth = render_clip(
                    art.segment_prompts[0].clone(),
                    meta,
                    art.frames.len(),
                    art.shape,
                )?;
                let d = drift_curve(&art.frames, &truth.frames)?;
                println!(
                    "drift rollout={} final_mse={:.6} slope={:.6}",
                    p.display(),
                    d.mse.last().copied().unwrap_or(f64::NAN),
                    d.slope
                );
                let label = p.file_stem().map_or_else(
                    || p.display().to_string(),
                    |s| s.to_string_lossy().into_owned(),
                );
                rows.push((label, d));
            }
            write_drift_csv(&out.join("drift.csv"), &rows)?;
        }
        Command::MaskStats { rollout } => {
            let p = or_out(rollout, out, "rollout.bin");
            let art = RolloutArtifact::load(&p)?;
            let traces: Vec<_> = art
                .traces
                .iter()
                .flatten()
                .filter(|t| !t.steps.is_empty())
                .cloned()
                .collect();
            let trend = mask_trend(&traces)?;
            write_mask_csv(&out.join("mask_trend.csv"), &trend)?;
            println!(
                "mask first_decile={:.6} last_decile={:.6} increasing={}",
                trend.first_decile,
                trend.last_decile,
                trend.increasing()
            );
        }
        Command::Ablate {
            mode,
            t_values,
            seeds,
            corpus,
            checkpoints,
            train_missing: do_train,
            eval_clips: n_eval,
            frames,
            eval_seed,
        } => {
            let spec = AblationSpec::parse(mode, t_values.as_deref())?;
            let corpus = Corpus::load(&or_out(corpus, out, "corpus.bin"))?;
            let dir = or_out(checkpoints, out, "ablation_ckpt");
            if *do_train {
                for p in train_missing(&spec, &config, &corpus, seeds, &dir)? {
                    println!("trained {}", p.display());
                }
            }
            let clips = eval_clips(*n_eval, *frames, shape, *eval_seed)?;
            let results = run_ablation(&spec, &config, &corpus, seeds, &dir, &clips)?;
            write_ablation_csvs(out, &results)?;
            for r in &results {
                println!(
                    "arm={} seed={} final_mse={:.6} failures={}",
                    r.arm.name(),
                    r.seed,
                    r.mean_mse.last().copied().unwrap_or(f64::NAN),
                    r.failures
                );
            }
        }
        Command::Flops { frames } => {
            let f = flops_estimate(&config.model, config.sampler.steps, *frames);
            write_flops_csv(&out.join("flops.csv"), &f)?;
            println!(
                "flops dynamic_macs={} mask_macs={} per_frame_macs={} per_video_macs={} frames={}",
                f.dynamic.total(),
                f.mask.total(),
                f.per_frame,
                f.per_video,
                f.frames
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("error category=argument");
            }
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error category={} message={}", e.category(), e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
