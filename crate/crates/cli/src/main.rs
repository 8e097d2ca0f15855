use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvadapt::adaptation::TinyModel;
use mvadapt::config::{RunConfig, ViewPredictions};
use mvadapt::io::{save_labels, write_json};
use mvadapt::metrics::{aggregate, write_scores_csv};
use mvadapt::par::Exec;
use mvadapt::pipeline::{
    apply_model, fit_source_model, ground_subjects, obtain_subjects, pseudo_labels,
    run_on_subjects, save_subjects, score_models, Exclusion, Until,
};
use mvadapt::Error;

#[derive(Parser, Debug)]
#[command(
    name = "mvadapt",
    version,
    about = "Multi-view registration, label fusion and self-training"
)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of synthetic subjects
    #[arg(long, global = true)]
    subjects: Option<usize>,
    /// Read subjects from this directory instead of synthesizing them
    #[arg(long, global = true)]
    import: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate synthetic subjects into <out>/subjects
    Synth,
    /// Register every subject and write the registration manifests
    Register,
    /// Register and integrate; writes integrated labels per view
    Integrate,
    /// Write source-model pseudo-labels for every view with an image
    Pseudolabel,
    /// Run through adaptation; writes both models and the training log
    Adapt,
    /// Score the models stored under <out>/models on the subjects
    Evaluate,
    /// Every stage, ending with the evaluation report
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Registration { .. } | Error::ExhaustedAnchors => 3,
        Error::Adaptation(_) => 4,
        _ => 1,
    }
}

fn configure_workers() -> Result<(), Error> {
    let Ok(raw) = std::env::var("GRIN_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "GRIN_WORKERS must be a positive integer, got {raw:?}"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.subjects {
        cfg.subjects = n;
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    configure_workers()?;
    let cfg = load_config(cli)?;
    let exec = Exec::Parallel;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))?;
    let import = cli.import.as_deref();
    let mut subjects = obtain_subjects(&cfg, import, exec)?;

    match cli.command {
        Command::Synth => {
            save_subjects(&out.join("subjects"), &subjects)?;
            log::info!("wrote {} subjects", subjects.len());
        }
        Command::Register => {
            if cfg.pipeline.view_predictions == ViewPredictions::Model {
                apply_model(&mut subjects, &fit_source_model(&cfg, exec)?, exec)?;
            }
            let grounded = ground_subjects(&subjects, &cfg, exec)?;
            let mut excluded = Vec::new();
            for g in &grounded {
                write_json(
                    &out.join("registration")
                        .join(format!("{}.json", g.subject_id)),
                    &(&g.stage1, &g.stage2),
                )?;
                if !g.is_success() {
                    excluded.push(Exclusion {
                        subject_id: g.subject_id.clone(),
                        reason: g.failure.clone().unwrap_or_default(),
                    });
                }
            }
            write_json(&out.join("exclusions.json"), &excluded)?;
            if excluded.len() == grounded.len() {
                return Err(Error::Registration {
                    stage: mvadapt::error::Stage::Estimate,
                    reason: "no subject registered".into(),
                });
            }
        }
        Command::Integrate => {
            run_on_subjects(&cfg, subjects, Some(out), Until::Integration, exec)?;
        }
        Command::Pseudolabel => {
            let teacher = fit_source_model(&cfg, exec)?;
            teacher.save(&out.join("models").join("source"))?;
            for s in &subjects {
                for (i, label) in pseudo_labels(s, &teacher, &cfg, exec)?.iter().enumerate() {
                    if let Some(l) = label {
                        let path = out
                            .join("pseudolabels")
                            .join(&s.bag.subject_id)
                            .join(format!("view{i}.grit"));
                        std::fs::create_dir_all(path.parent().expect("joined path"))?;
                        save_labels(l, &path)?;
                    }
                }
            }
        }
        Command::Adapt => {
            run_on_subjects(&cfg, subjects, Some(out), Until::Adaptation, exec)?;
        }
        Command::Evaluate => evaluate(out, &subjects, exec)?,
        Command::Pipeline => {
            let result = run_on_subjects(&cfg, subjects, Some(out), Until::Evaluation, exec)?;
            for m in ["integrated", "source", "adapted"] {
                if let Some(d) = result.mean_av_dice(m) {
                    println!("{m:>10}  mean A/V Dice {:.2}%", 100.0 * d);
                }
            }
        }
    }
    Ok(())
}

fn evaluate(
    out: &Path,
    subjects: &[mvadapt::pipeline::SubjectData],
    exec: Exec,
) -> Result<(), Error> {
    let models_dir = out.join("models");
    let mut models = Vec::new();
    for name in ["source", "adapted"] {
        let dir = models_dir.join(name);
        if dir.join("weights.grit").is_file() {
            models.push((name, TinyModel::load(&dir)?));
        }
    }
    if models.is_empty() {
        return Err(Error::Argument(format!(
            "no models found under {}",
            models_dir.display()
        )));
    }
    let named: Vec<(&str, &TinyModel)> = models.iter().map(|(n, m)| (*n, m)).collect();
    let scores = score_models(subjects, &named, exec)?;
    if scores.is_empty() {
        return Err(Error::Argument(
            "no subject carries true labels to score against".into(),
        ));
    }
    let baseline = models
        .iter()
        .any(|(n, _)| *n == "source")
        .then_some("source");
    write_scores_csv(&scores, &out.join("eval").join("scores.csv"))?;
    aggregate(&scores, baseline).write_json(&out.join("eval").join("report.json"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
