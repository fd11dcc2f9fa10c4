//! Experiment orchestration: resolve a configuration from defaults, an
//! optional key=value file, and command-line overrides; launch seeded
//! training runs; and write every analysis artifact into one results
//! directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::PolicySet;
use crate::diffnet::{finite_difference_check, Activation, DenseNet};
use crate::env::{self, EnvConfig, Mode};
use crate::metrics::{
    aggregate_runs, build_confusion_matrix, ewma, mean_curve, peak_performance,
    write_confusion_csv, write_curves_csv, write_curves_svg, write_summary_json, SummaryFile,
    SummaryStats, EWMA_ALPHA,
};
use crate::training::{
    read_run_log_csv, train_run_resumable, write_run_log_csv, RunLog, TrainingConfig,
};
use crate::{Error, Result};

/// Fully resolved experiment: mode, seeds, output layout, and every
/// training/environment knob.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub runs: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    /// Greedy episodes used for the confusion matrix.
    pub eval_episodes: usize,
    /// Trainer checkpoint cadence in epochs; 0 disables resume files.
    pub resume_every: usize,
    pub training: TrainingConfig,
    pub env: EnvConfig,
}

impl ExperimentConfig {
    pub fn defaults(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            runs: 5,
            seed: 0,
            out: PathBuf::from("results"),
            jobs: 1,
            eval_episodes: 200,
            resume_every: 0,
            training: TrainingConfig::default(),
            env: EnvConfig::new(mode),
        }
    }

    pub fn mode(&self) -> Mode {
        self.env.mode
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("value for {key} must be numeric, got {value:?}"))
            })
        }
        match key {
            "mode" => self.env.mode = Mode::parse(value)?,
            "runs" => self.runs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "jobs" => self.jobs = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "resume_every" => self.resume_every = num(key, value)?,
            "epochs" => self.training.epochs = num(key, value)?,
            "gamma" => self.training.gamma = num(key, value)?,
            "lr" => self.training.learning_rate = num(key, value)?,
            "batch_size" => self.training.batch_size = num(key, value)?,
            "episodes_per_epoch" => self.training.episodes_per_epoch = num(key, value)?,
            "eps_start" => self.training.eps_start = num(key, value)?,
            "eps_end" => self.training.eps_end = num(key, value)?,
            "eps_anneal_epochs" => self.training.eps_anneal_epochs = Some(num(key, value)?),
            "arena_half_width" => self.env.arena_half_width = num(key, value)?,
            "dt" => self.env.dt = num(key, value)?,
            "velocity_damping" => self.env.velocity_damping = num(key, value)?,
            "predator_accel" => self.env.predator_accel = num(key, value)?,
            "prey_accel" => self.env.prey_accel = num(key, value)?,
            "predator_max_speed" => self.env.predator_max_speed = num(key, value)?,
            "prey_max_speed" => self.env.prey_max_speed = num(key, value)?,
            "episode_length" => self.env.episode_length = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        self.training.validate()?;
        self.env.validate()
    }

    /// Key=value lines of the resolved configuration, sorted by key; the
    /// output parses back through [`parse_config`].
    pub fn resolved_text(&self) -> String {
        let anneal = self
            .training
            .schedule()
            .map(|s| s.anneal_epochs)
            .unwrap_or(0);
        let mut pairs: Vec<(&str, String)> = vec![
            ("arena_half_width", self.env.arena_half_width.to_string()),
            ("batch_size", self.training.batch_size.to_string()),
            ("dt", self.env.dt.to_string()),
            ("episode_length", self.env.episode_length.to_string()),
            (
                "episodes_per_epoch",
                self.training.episodes_per_epoch.to_string(),
            ),
            ("epochs", self.training.epochs.to_string()),
            ("eps_anneal_epochs", anneal.to_string()),
            ("eps_end", self.training.eps_end.to_string()),
            ("eps_start", self.training.eps_start.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("gamma", self.training.gamma.to_string()),
            ("jobs", self.jobs.to_string()),
            ("lr", self.training.learning_rate.to_string()),
            ("mode", self.env.mode.to_string()),
            ("out", self.out.display().to_string()),
            ("predator_accel", self.env.predator_accel.to_string()),
            (
                "predator_max_speed",
                self.env.predator_max_speed.to_string(),
            ),
            ("prey_accel", self.env.prey_accel.to_string()),
            ("prey_max_speed", self.env.prey_max_speed.to_string()),
            ("resume_every", self.resume_every.to_string()),
            ("runs", self.runs.to_string()),
            ("seed", self.seed.to_string()),
            (
                "velocity_damping",
                self.env.velocity_damping.to_string(),
            ),
        ];
        pairs.sort_by_key(|(k, _)| *k);
        let mut text = String::new();
        for (k, v) in pairs {
            text.push_str(k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        text
    }
}

/// Resolves an experiment configuration. Precedence: defaults, then the
/// key=value file, then the flag overrides, later entries winning.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {} is not key=value: {line:?}",
                    lineno + 1
                ))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    pairs.extend(overrides.iter().cloned());

    let mode = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "mode")
        .map(|(_, v)| Mode::parse(v))
        .transpose()?
        .ok_or_else(|| Error::Config("mode is required (no_comm, full_obs, private_comm or public_comm)".into()))?;

    let mut config = ExperimentConfig::defaults(mode);
    for (key, value) in &pairs {
        config.apply(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

fn run_log_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("run{run}.csv"))
}

fn run_dir(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("run{run}"))
}

/// Executes every seeded run (up to `jobs` in parallel), then analyzes the
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(&config.out)?;
    std::fs::write(
        config.out.join(RESOLVED_CONFIG_FILE),
        config.resolved_text(),
    )?;

    let next_run = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = config.jobs.min(config.runs).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let run = next_run.fetch_add(1, Ordering::SeqCst);
                if run >= config.runs || failure.lock().unwrap().is_some() {
                    return;
                }
                let seed = config.seed + run as u64;
                if let Err(e) = execute_run(config, run, seed) {
                    let mut slot = failure.lock().unwrap();
                    if slot.is_none() {
                        *slot = Some(Error::InvalidCall(format!(
                            "run with seed {seed} failed: {e}"
                        )));
                    }
                    return;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    analyze_dir(&config.out)
}

fn execute_run(config: &ExperimentConfig, run: usize, seed: u64) -> Result<()> {
    let ckpt_dir = run_dir(&config.out, run);
    std::fs::create_dir_all(&ckpt_dir)?;
    let resume_path = ckpt_dir.join("resume.json");
    let resume = (config.resume_every > 0).then_some(resume_path.as_path());
    let outcome = train_run_resumable(
        &config.training,
        &config.env,
        seed,
        resume,
        config.resume_every,
    )?;

    let mut csv = Vec::new();
    write_run_log_csv(&mut csv, &outcome.log)?;
    std::fs::write(run_log_path(&config.out, run), csv)?;
    outcome.policies.save(&ckpt_dir)?;
    Ok(())
}

/// Recomputes summary.json, curves.csv/svg and (in communication modes)
/// confusion.csv from the run logs and checkpoints already in `dir`.
pub fn analyze_dir(dir: &Path) -> Result<()> {
    let config = parse_config(Some(&dir.join(RESOLVED_CONFIG_FILE)), &[])?;
    let mode = config.mode();

    let mut logs: Vec<RunLog> = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        logs.push(read_run_log_csv(&run_log_path(dir, run))?);
    }

    let stats = if logs.len() >= 2 {
        aggregate_runs(&logs)?
    } else {
        let log = &logs[0];
        let mean =
            log.iter().map(|r| r.mean_predator_reward).sum::<f64>() / log.len().max(1) as f64;
        SummaryStats {
            average_reward: mean,
            average_std: 0.0,
            average_peak: peak_performance(log)?,
            peak_std: 0.0,
        }
    };
    let summary = SummaryFile::new(mode.as_str(), config.runs, config.training.epochs, stats);
    let mut buf = Vec::new();
    write_summary_json(&mut buf, &summary)?;
    std::fs::write(dir.join("summary.json"), buf)?;

    let raw = mean_curve(&logs)?;
    let smoothed = ewma(&raw, EWMA_ALPHA)?;
    let mut csv = Vec::new();
    write_curves_csv(&mut csv, &raw, &smoothed)?;
    std::fs::write(dir.join("curves.csv"), csv)?;
    let mut svg = Vec::new();
    write_curves_svg(&mut svg, mode.as_str(), &raw, &smoothed)?;
    std::fs::write(dir.join("curves.svg"), svg)?;

    if mode.is_comm() {
        let best = best_run(&logs)?;
        let policies = PolicySet::load(&run_dir(dir, best), mode)?;
        let eval_seed = config.seed + config.runs as u64;
        let matrix =
            build_confusion_matrix(&policies, &config.env, config.eval_episodes, eval_seed)?;
        let mut csv = Vec::new();
        write_confusion_csv(&mut csv, &matrix)?;
        std::fs::write(dir.join("confusion.csv"), csv)?;
    }
    Ok(())
}

/// Index of the run with the highest peak performance.
pub fn best_run(logs: &[RunLog]) -> Result<usize> {
    let mut best = 0;
    let mut best_peak = f64::NEG_INFINITY;
    for (i, log) in logs.iter().enumerate() {
        let peak = peak_performance(log)?;
        if peak > best_peak {
            best_peak = peak;
            best = i;
        }
    }
    Ok(best)
}

/// One gradient-verification case: a freshly initialized network of a shape
/// the experiments actually use.
struct GradcheckCase {
    label: &'static str,
    dims: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
}

fn gradcheck_cases() -> Vec<GradcheckCase> {
    use Activation::{Identity, Relu};
    vec![
        GradcheckCase {
            label: "message net 12->1",
            dims: vec![12, 1],
            activations: vec![Relu],
            seed: 101,
        },
        GradcheckCase {
            label: "action net 13->256->512->5",
            dims: vec![13, 256, 512, 5],
            activations: vec![Relu, Relu, Identity],
            seed: 102,
        },
        GradcheckCase {
            label: "independent Q-net 10->256->512->5",
            dims: vec![10, 256, 512, 5],
            activations: vec![Relu, Relu, Identity],
            seed: 103,
        },
        GradcheckCase {
            label: "independent Q-net 12->256->512->5",
            dims: vec![12, 256, 512, 5],
            activations: vec![Relu, Relu, Identity],
            seed: 104,
        },
    ]
}

pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Runs the finite-difference sweep over every network shape in use and
/// prints one line per shape. Returns whether all of them passed.
pub fn run_gradcheck<W: Write>(out: &mut W) -> Result<bool> {
    let cases = gradcheck_cases();
    let reports: Vec<Result<crate::diffnet::FdReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .iter()
            .map(|case| {
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
                    let net = DenseNet::init(&case.dims, &case.activations, &mut rng);
                    let input: Vec<f64> = (0..case.dims[0])
                        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                        .collect();
                    finite_difference_check(&net, &input, GRADCHECK_H, GRADCHECK_TOL)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut all_passed = true;
    for (case, report) in cases.iter().zip(reports) {
        let report = report?;
        all_passed &= report.passed;
        writeln!(
            out,
            "{} {}: max rel error {:.3e} over {} components ({} skipped at relu kinks)",
            if report.passed { "PASS" } else { "FAIL" },
            case.label,
            report.max_rel_error,
            report.components_checked,
            report.components_skipped,
        )?;
    }
    Ok(all_passed)
}

/// Greedy trajectory export for an already-trained run directory.
pub fn export_trajectories(dir: &Path, run: usize, episodes: usize) -> Result<PathBuf> {
    let config = parse_config(Some(&dir.join(RESOLVED_CONFIG_FILE)), &[])?;
    let policies = PolicySet::load(&run_dir(dir, run), config.mode())?;
    let seed = config.seed + config.runs as u64;
    let rows =
        crate::training::record_greedy_trajectories(&policies, &config.env, episodes, seed)?;
    let path = dir.join(format!("run{run}_trajectories.csv"));
    let mut buf = Vec::new();
    env::write_trajectory_csv(&mut buf, &rows)?;
    std::fs::write(&path, buf)?;
    Ok(path)
}
