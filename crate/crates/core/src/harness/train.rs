use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{InitScheme, RunConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{self, EtfReport, OverlapStats, PhiReport, PowerIterationOptions};
use crate::model::{loss_and_grad, test_loss, Grads, TestLoss, ToyModel, Workspace};
use crate::optim::{self, lr_at, OptimState};
use crate::rng::StreamKey;
use crate::sampler::{sample_batch_into, Batch};

pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";
pub const MODEL_FILE: &str = "model.spsw";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const FAILURE_FILE: &str = "failure.json";

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ToyModel<f32>,
    pub loss_history: Vec<f32>,
    pub wall_time_s: f64,
}

pub fn stream_key(config: &RunConfig) -> StreamKey {
    StreamKey::new(config.seed, 0)
}

pub fn init_model(config: &RunConfig) -> ToyModel<f32> {
    let mut rng = stream_key(config).init();
    match config.init_scheme {
        InitScheme::Gaussian => ToyModel::init_gaussian(config.spec.n, config.m, config.init_scale, &mut rng),
    }
}

/// Online training: a fresh batch every step, scheduled learning rates for
/// both parameter groups, single precision throughout.
///
/// On a non-finite loss the error carries the history up to and including
/// the offending step.
pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    let mut history = Vec::with_capacity(config.total_steps as usize);
    train_into(config, &mut history).map(|(model, wall_time_s)| TrainOutput {
        model,
        loss_history: history,
        wall_time_s,
    })
}

fn train_into(config: &RunConfig, history: &mut Vec<f32>) -> Result<(ToyModel<f32>, f64)> {
    config.validate()?;
    let start = Instant::now();
    let spec = config.frequencies()?;
    let (n, m, b) = (config.spec.n, config.m, config.batch_size);
    let key = stream_key(config);
    let mut model = init_model(config);
    let mut state = OptimState::<f32>::new(n, m, config.adam, config.w_group(), config.b_group());
    let schedule = config.schedule()?;
    let (peak_w, peak_b) = (config.w_group().peak_lr, config.b_group().peak_lr);
    let mut batch = Batch::<f32>::zeros(b, n);
    let mut ws = Workspace::new(b, n, m);
    let mut grads = Grads::zeros(n, m);
    for t in 0..config.total_steps {
        sample_batch_into(&spec, &mut batch, &mut key.step(t));
        let loss = loss_and_grad(&model, &batch, &mut ws, &mut grads)?;
        history.push(loss as f32);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t as usize,
                history: history.clone(),
            });
        }
        let factor = lr_at(&schedule, t)?;
        optim::step(&mut model, &grads, &mut state, peak_w * factor, peak_b * factor)?;
    }
    Ok((model, start.elapsed().as_secs_f64()))
}

/// Test loss on `eval_multiplier` fresh batches from the evaluation stream.
pub fn evaluate(model: &ToyModel<f32>, config: &RunConfig) -> Result<TestLoss> {
    let spec = config.frequencies()?;
    let mut rng = stream_key(config).eval(0);
    test_loss(model, &spec, config.batch_size, config.eval_multiplier, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub phi: PhiReport,
    /// `None` with fewer than two rows.
    pub overlap_all: Option<OverlapStats>,
    /// Rows with norm above 1; `None` with fewer than two such rows.
    pub strong: Option<EtfReport>,
    pub ambiguity: Option<f64>,
    pub ambiguity_error: Option<String>,
}

pub fn geometry_metrics(model: &ToyModel<f32>, with_ambiguity: bool) -> Result<GeometryMetrics> {
    let w = geometry::to_f64(model.w.view());
    let phi = geometry::phi_report(w.view())?;
    let overlap_all = match geometry::overlap_stats(w.view(), None, geometry::DEFAULT_OVERLAP_BATCH) {
        Ok(s) => Some(s),
        Err(Error::TooFewRows { .. }) => None,
        Err(e) => return Err(e),
    };
    let strong = match geometry::etf_likeness(w.view(), geometry::STRONG_THRESHOLD) {
        Ok(r) => Some(r),
        Err(Error::TooFewRows { .. }) => None,
        Err(e) => return Err(e),
    };
    let (ambiguity, ambiguity_error) = if with_ambiguity {
        match geometry::ambiguity(w.view(), model.m(), PowerIterationOptions::default()) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    Ok(GeometryMetrics {
        phi,
        overlap_all,
        strong,
        ambiguity,
        ambiguity_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub config: RunConfig,
    /// Stored separately in the history CSV.
    #[serde(skip)]
    pub loss_history: Vec<f32>,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub test_loss_stderr: Option<f64>,
    pub geometry: GeometryMetrics,
    pub wall_time_s: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub step: Option<usize>,
    pub reason: String,
}

pub fn run_dir(root: &Path, config: &RunConfig) -> PathBuf {
    root.join(config.hash())
}

fn write_history(path: &Path, history: &[f32]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (t, l) in history.iter().enumerate() {
        writeln!(f, "{t},{l}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<f32>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in f.lines().enumerate().skip(1) {
        let line = line?;
        let value = line.split(',').nth(1).and_then(|v| v.parse().ok());
        match value {
            Some(v) => out.push(v),
            None => {
                return Err(Error::MalformedFile {
                    path: path.to_path_buf(),
                    offset: k as u64,
                    reason: format!("line {}: expected `step,loss`", k + 1),
                })
            }
        }
    }
    Ok(out)
}

/// Loads a finished run from its directory, if present.
pub fn load_result(dir: &Path) -> Result<Option<RunResult>> {
    let path = dir.join(RESULT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let mut r: RunResult = serde_json::from_str(&fs::read_to_string(path)?)?;
    r.loss_history = read_history(&dir.join(HISTORY_FILE))?;
    Ok(Some(r))
}

pub fn load_failure(dir: &Path) -> Result<Option<FailureRecord>> {
    let path = dir.join(FAILURE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

/// Trains, evaluates and measures one configuration, persisting everything
/// under `root/<config hash>/`. A directory that already holds a result is
/// loaded instead of retrained.
///
/// A divergent run leaves its partial loss history and a failure record
/// behind and returns the error.
pub fn run(config: &RunConfig, root: &Path) -> Result<RunResult> {
    config.validate()?;
    let dir = run_dir(root, config);
    if let Some(r) = load_result(&dir)? {
        return Ok(r);
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    let _ = fs::remove_file(dir.join(FAILURE_FILE));
    let mut history = Vec::with_capacity(config.total_steps as usize);
    let (model, wall_time_s) = match train_into(config, &mut history) {
        Ok(out) => out,
        Err(e) => {
            write_history(&dir.join(HISTORY_FILE), &history)?;
            let step = match &e {
                Error::NonFiniteLoss { step, .. } => Some(*step),
                // optimizer steps count from 1
                Error::NonFiniteGradient { step, .. } => Some(*step as usize - 1),
                _ => None,
            };
            let record = FailureRecord {
                step,
                reason: e.to_string(),
            };
            fs::write(dir.join(FAILURE_FILE), serde_json::to_string_pretty(&record)?)?;
            return Err(e);
        }
    };
    let out = TrainOutput {
        model,
        loss_history: history,
        wall_time_s,
    };
    let test = evaluate(&out.model, config)?;
    if !test.mean.is_finite() {
        let record = FailureRecord {
            step: None,
            reason: "non-finite test loss".into(),
        };
        write_history(&dir.join(HISTORY_FILE), &out.loss_history)?;
        fs::write(dir.join(FAILURE_FILE), serde_json::to_string_pretty(&record)?)?;
        return Err(Error::NonFiniteLoss {
            step: out.loss_history.len(),
            history: out.loss_history,
        });
    }
    let geometry = geometry_metrics(&out.model, config.compute_ambiguity)?;
    checkpoint::save_model(&dir.join(MODEL_FILE), &out.model)?;
    write_history(&dir.join(HISTORY_FILE), &out.loss_history)?;
    let result = RunResult {
        config_hash: config.hash(),
        config: config.clone(),
        final_train_loss: out.loss_history.last().copied().unwrap_or(f32::NAN) as f64,
        loss_history: out.loss_history,
        final_test_loss: test.mean,
        test_loss_stderr: test.stderr,
        geometry,
        wall_time_s: out.wall_time_s,
        checkpoint: PathBuf::from(MODEL_FILE),
    };
    // written last: its presence marks the run complete
    let tmp = dir.join(format!("{RESULT_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&result)?)?;
    fs::rename(tmp, dir.join(RESULT_FILE))?;
    Ok(result)
}
