use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use msgen_core::config::RunConfig;
use msgen_core::eval::{write_rows, METRIC_NAMES};
use msgen_core::flow::SamplerMode;
use msgen_core::grpo::{DpoMetrics, StepMetrics};
use msgen_core::pipeline::{self as pl, FlowRun};
use msgen_core::sprite::{gen_dataset, read_dataset, write_dataset, DatasetManifest, SceneSample};
use msgen_core::svg::line_chart;
use msgen_core::{Error, ErrorClass};
use serde::Serialize;

const MODEL_FILE: &str = "model.idcr";

#[derive(Parser)]
#[command(name = "msgen", version, about = "Multi-subject video flow lab: pretraining, GRPO post-training, evaluation")]
struct Cli {
    /// Worker threads for sampling and rollouts (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ode,
    Sde,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Gamma,
    Reward,
    Stages,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural sprite dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rectified-flow pretraining.
    TrainFlow {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint (step numbering and optimiser state carry over).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        svg: bool,
    },
    /// Online GRPO post-training.
    PostTrainGrpo(PostTrain),
    /// Offline DPO post-training baseline.
    PostTrainDpo(PostTrain),
    /// Sample videos for dataset conditions.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "ode")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Number of conditions (default: eval.count, capped by the dataset).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Evaluate a checkpoint (or the ground-truth videos) on a dataset.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "ground_truth")]
        ckpt: Option<PathBuf>,
        /// Dataset to evaluate on (default: the held-out set from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Score the dataset's own videos, bypassing the model.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long)]
        svg: bool,
    },
    /// Run an ablation suite.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        /// SFT checkpoint (reward suite).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Training dataset (reward and stages suites).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        svg: bool,
    },
}

#[derive(clap::Args)]
struct PostTrain {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: PathBuf,
    /// Frozen reference policy (default: --init).
    #[arg(long)]
    r#ref: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    svg: bool,
}

#[derive(Serialize)]
struct GrpoCsvRow {
    step: u64,
    mean_reward: f64,
    r_face_mean: f64,
    r_total_mean: f64,
    kl: f64,
    clip_frac: f64,
    grad_norm: f64,
}

impl From<&StepMetrics> for GrpoCsvRow {
    fn from(m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            mean_reward: m.mean_reward,
            r_face_mean: m.r_face_mean,
            r_total_mean: m.r_total_mean,
            kl: m.kl,
            clip_frac: m.clip_frac,
            grad_norm: m.grad_norm,
        }
    }
}

#[derive(Serialize)]
struct DpoCsvRow {
    step: u64,
    loss: f64,
    accuracy: f64,
    grad_norm: f64,
}

impl From<&DpoMetrics> for DpoCsvRow {
    fn from(m: &DpoMetrics) -> Self {
        Self {
            step: m.step,
            loss: m.loss,
            accuracy: m.accuracy,
            grad_norm: m.grad_norm,
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Numeric) => 4,
        Some(ErrorClass::Data) | None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be ≥ 1");
            return ExitCode::from(2);
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load_or_default(path.as_deref())?)
}

fn require(paths: &[&Path]) -> anyhow::Result<()> {
    let missing: Vec<_> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Missing(PathBuf::from(missing.join(", ")))).context("required inputs not found")
    }
}

fn load_data(dir: &Path, cfg: &RunConfig) -> anyhow::Result<(DatasetManifest, Vec<SceneSample>)> {
    let (m, s) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if m.dims() != cfg.data.dims() {
        return Err(Error::Config(format!(
            "dataset dims {:?} differ from config data dims {:?}",
            m.dims(),
            cfg.data.dims()
        ))
        .into());
    }
    Ok((m, s))
}

fn chart(path: &Path, title: &str, x: Vec<f64>, series: Vec<(String, Vec<f64>)>) -> anyhow::Result<()> {
    let svg = line_chart(title, &x, &series);
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData { config: c, out, count, seed } => {
            let cfg = config(&c)?;
            let count = count.unwrap_or(cfg.data.count);
            let seed = seed.unwrap_or(cfg.data.seed);
            let samples = gen_dataset(count, seed, &cfg.data.dims())?;
            write_dataset(&samples, &cfg.data.dims(), &out)?;
            cfg.write_resolved(&out)?;
            let mut hist = [0usize; 4];
            for s in &samples {
                hist[s.n_subjects()] += 1;
            }
            println!(
                "wrote {count} samples to {} (N=1: {}, N=2: {}, N=3: {})",
                out.display(),
                hist[1],
                hist[2],
                hist[3]
            );
        }
        Cmd::TrainFlow { config: c, data, out, steps, resume, svg } => {
            let cfg = config(&c)?;
            require(&[data.as_path()])?;
            if let Some(r) = &resume {
                require(&[r.as_path()])?;
            }
            let (manifest, samples) = load_data(&data, &cfg)?;
            let mut run = match &resume {
                Some(r) => FlowRun::resume(&cfg, pl::load_compatible(r, &cfg, &manifest.vocabulary)?)?,
                None => FlowRun::init(&cfg, manifest.vocabulary.clone())?,
            };
            let steps = steps.unwrap_or(cfg.flow.steps);
            cfg.write_resolved(&out)?;
            pl::train_flow(&cfg, &samples, &mut run, steps)?;
            run.save(&out.join(MODEL_FILE))?;
            let csv = out.join("flow_metrics.csv");
            // A resumed run appends to the existing log.
            let mut rows: Vec<pl::FlowLogRow> = Vec::new();
            if resume.is_some() && csv.exists() {
                let mut r = csv::Reader::from_path(&csv)?;
                for rec in r.records() {
                    let rec = rec?;
                    let step: u64 = rec[0].parse()?;
                    if step < run.step() - steps {
                        rows.push(pl::FlowLogRow { step, rf_loss: rec[1].parse()? });
                    }
                }
            }
            rows.extend(run.log.iter().copied());
            write_rows(&csv, &rows)?;
            if rows.is_empty() {
                std::fs::write(&csv, "step,rf_loss\n")?;
            }
            if svg {
                chart(
                    &out.join("flow_metrics.svg"),
                    "rf_loss",
                    rows.iter().map(|r| r.step as f64).collect(),
                    vec![("rf_loss".into(), rows.iter().map(|r| r.rf_loss).collect())],
                )?;
            }
            println!("trained to step {}; checkpoint {}", run.step(), out.join(MODEL_FILE).display());
        }
        Cmd::PostTrainGrpo(a) => post_train(a, false)?,
        Cmd::PostTrainDpo(a) => post_train(a, true)?,
        Cmd::Sample { config: c, ckpt, data, mode, out, count } => {
            let cfg = config(&c)?;
            require(&[ckpt.as_path(), data.as_path()])?;
            let (manifest, samples) = load_data(&data, &cfg)?;
            let ck = pl::load_compatible(&ckpt, &cfg, &manifest.vocabulary)?;
            let n = count.unwrap_or(cfg.eval.count).min(samples.len());
            let mode = match mode {
                Mode::Ode => SamplerMode::Ode,
                Mode::Sde => SamplerMode::Sde,
            };
            let sampler = cfg.sampler(mode);
            cfg.write_resolved(&out)?;
            let trajs = pl::sample_videos(&ck.model, &ck.params, &samples[..n], &sampler)?;
            let videos: Vec<_> = trajs.into_iter().map(|t| t.video).collect();
            pl::samples_container(&samples[..n], &videos, &sampler)?.save(&out.join("samples.idcr"))?;
            println!("sampled {n} videos into {}", out.join("samples.idcr").display());
        }
        Cmd::Evaluate { config: c, ckpt, data, out, ground_truth, svg } => {
            let mut cfg = config(&c)?;
            cfg.eval.ground_truth |= ground_truth;
            let mut inputs: Vec<&Path> = Vec::new();
            if let Some(d) = &data {
                inputs.push(d);
            }
            if !cfg.eval.ground_truth {
                inputs.push(ckpt.as_deref().ok_or_else(|| Error::Config("--ckpt is required".into()))?);
            }
            require(&inputs)?;
            let samples = match &data {
                Some(d) => {
                    let (_, s) = load_data(d, &cfg)?;
                    s.into_iter().take(cfg.eval.count).collect()
                }
                None => pl::eval_set(&cfg)?,
            };
            let report = if cfg.eval.ground_truth {
                pl::evaluate(&cfg, &samples, None)?
            } else {
                let vocab = msgen_core::sprite::Vocabulary::for_dims(&cfg.data.dims());
                let ck = pl::load_compatible(ckpt.as_deref().unwrap(), &cfg, &vocab)?;
                pl::evaluate_model(&cfg, &ck.model, &ck.params, &samples)?
            };
            cfg.write_resolved(&out)?;
            report.write_csv(&out.join("eval_report.csv"))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if svg {
                let x = report.rows.iter().map(|r| r.sample_id as f64).collect();
                let series = METRIC_NAMES
                    .iter()
                    .enumerate()
                    .map(|(j, n)| (n.to_string(), report.rows.iter().map(|r| r.metrics()[j]).collect()))
                    .collect();
                chart(&out.join("eval_report.svg"), "metrics per sample", x, series)?;
            }
            let m = &report.means;
            println!(
                "{} samples: facesim {:.4} (min {:.4}) nexus {:.4} gme {:.4} natural {:.4} aesthetic {:.4}",
                report.rows.len(),
                m.facesim_mean,
                m.facesim_min,
                m.nexus,
                m.gme,
                m.natural,
                m.aesthetic
            );
        }
        Cmd::Ablate { config: c, suite, out, init, data, svg } => {
            let cfg = config(&c)?;
            // Enumerate every missing input before any training starts.
            let mut missing = Vec::new();
            match suite {
                Suite::Gamma => {}
                Suite::Reward => {
                    match &init {
                        Some(p) if !p.exists() => missing.push(p.display().to_string()),
                        None => missing.push("--init <SFT checkpoint>".into()),
                        _ => {}
                    }
                    match &data {
                        Some(p) if !p.exists() => missing.push(p.display().to_string()),
                        None => missing.push("--data <dataset>".into()),
                        _ => {}
                    }
                }
                Suite::Stages => match &data {
                    Some(p) if !p.exists() => missing.push(p.display().to_string()),
                    None => missing.push("--data <dataset>".into()),
                    _ => {}
                },
            }
            if !missing.is_empty() {
                return Err(Error::Missing(PathBuf::from(missing.join(", ")))).context("ablation inputs not found");
            }
            cfg.write_resolved(&out)?;
            match suite {
                Suite::Gamma => {
                    let rows = pl::gamma_sweep(&cfg)?;
                    write_rows(&out.join("ablate_gamma.csv"), &rows)?;
                    if svg {
                        chart(
                            &out.join("ablate_gamma.svg"),
                            "identity vs gamma",
                            rows.iter().map(|r| r.gamma).collect(),
                            vec![
                                ("avg_facesim".into(), rows.iter().map(|r| r.avg_facesim).collect()),
                                ("min_facesim".into(), rows.iter().map(|r| r.min_facesim).collect()),
                                ("total".into(), rows.iter().map(|r| r.total).collect()),
                            ],
                        )?;
                    }
                    println!("wrote {} rows to {}", rows.len(), out.join("ablate_gamma.csv").display());
                }
                Suite::Reward => {
                    let (manifest, samples) = load_data(data.as_deref().unwrap(), &cfg)?;
                    let ck = pl::load_compatible(init.as_deref().unwrap(), &cfg, &manifest.vocabulary)?;
                    let rows = pl::reward_ablation(&cfg, &ck.model, &ck.params, &pl::tasks(&samples), &pl::eval_set(&cfg)?)?;
                    write_rows(&out.join("ablate_reward.csv"), &rows)?;
                    println!("wrote {} rows to {}", rows.len(), out.join("ablate_reward.csv").display());
                }
                Suite::Stages => {
                    let (manifest, samples) = load_data(data.as_deref().unwrap(), &cfg)?;
                    let rows = pl::stage_ablation(&cfg, &samples, &pl::eval_set(&cfg)?, &manifest.vocabulary)?;
                    write_rows(&out.join("ablate_stages.csv"), &rows)?;
                    println!("wrote {} rows to {}", rows.len(), out.join("ablate_stages.csv").display());
                }
            }
        }
    }
    Ok(())
}

fn post_train(a: PostTrain, dpo: bool) -> anyhow::Result<()> {
    let cfg = config(&a.config)?;
    let ref_path = a.r#ref.clone().unwrap_or_else(|| a.init.clone());
    require(&[a.data.as_path(), a.init.as_path(), ref_path.as_path()])?;
    let (manifest, samples) = load_data(&a.data, &cfg)?;
    let init = pl::load_compatible(&a.init, &cfg, &manifest.vocabulary)?;
    let reference = pl::load_compatible(&ref_path, &cfg, &manifest.vocabulary)?.params;
    let steps = a.steps.unwrap_or(cfg.grpo.steps);
    let train = pl::tasks(&samples);
    let mut params = init.params.clone();
    cfg.write_resolved(&a.out)?;
    let (kind, csv, series): (&str, PathBuf, Vec<(String, Vec<f64>)>) = if dpo {
        let m = pl::post_train_dpo(&cfg, &init.model, &mut params, &reference, &train, steps)?;
        let rows: Vec<DpoCsvRow> = m.iter().map(DpoCsvRow::from).collect();
        let csv = a.out.join("dpo_metrics.csv");
        write_rows(&csv, &rows)?;
        if rows.is_empty() {
            std::fs::write(&csv, "step,loss,accuracy,grad_norm\n")?;
        }
        ("dpo", csv, vec![
            ("loss".into(), rows.iter().map(|r| r.loss).collect()),
            ("accuracy".into(), rows.iter().map(|r| r.accuracy).collect()),
        ])
    } else {
        let m = pl::post_train_grpo(&cfg, &init.model, &mut params, &reference, &train, steps)?;
        for s in m.iter().filter(|s| s.skipped) {
            eprintln!("warning: step {} skipped (non-finite gradient)", s.step);
        }
        let rows: Vec<GrpoCsvRow> = m.iter().map(GrpoCsvRow::from).collect();
        let csv = a.out.join("grpo_metrics.csv");
        write_rows(&csv, &rows)?;
        if rows.is_empty() {
            std::fs::write(&csv, "step,mean_reward,r_face_mean,r_total_mean,kl,clip_frac,grad_norm\n")?;
        }
        ("grpo", csv, vec![
            ("mean_reward".into(), rows.iter().map(|r| r.mean_reward).collect()),
            ("r_face_mean".into(), rows.iter().map(|r| r.r_face_mean).collect()),
            ("r_total_mean".into(), rows.iter().map(|r| r.r_total_mean).collect()),
        ])
    };
    pl::save_checkpoint(&a.out.join(MODEL_FILE), kind, &init.model, &params, init.meta.step, None)?;
    if a.svg {
        let n = series.first().map_or(0, |s| s.1.len());
        chart(&csv.with_extension("svg"), &format!("{kind} metrics"), (0..n).map(|i| i as f64).collect(), series)?;
    }
    println!("{kind}: {steps} steps; checkpoint {}", a.out.join(MODEL_FILE).display());
    Ok(())
}
