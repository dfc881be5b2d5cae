use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ivi_core::denoise::score_from_denoiser;
use ivi_core::eval::{
    curl_proxy, flatness_diagnostic, grid_posterior, histogram_density, kl_grid, ratio_limit_diagnostic, Diagnostics,
    Grid2D, GridSpec, Moments, KL_SMOOTHING,
};
use ivi_core::infer::{Method, RunState};
use ivi_core::models::{posterior_sample, LatentVariableModel};
use ivi_core::ratio::Pair;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, EVAL_STREAM, TRAIN_STREAM};

/// Step used for the curl proxy's central differences.
const CURL_STEP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure at outer step {step}: {source}")]
    Numeric { step: usize, source: ivi_core::Error },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl RunError {
    /// 2 for configuration and I/O problems, 3 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Io { .. } => 2,
            RunError::Numeric { .. } => 3,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        RunError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn from_config(e: ivi_core::Error) -> Self {
        RunError::Config(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleEntry {
    pub x: f64,
    pub correlation: f64,
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSummary {
    pub grid: GridSpec,
    pub entries: Vec<OracleEntry>,
}

/// `{prefix}_x{x}.csv`, with `x` in its shortest round-trip form.
pub fn grid_file_name(prefix: &str, x: f64) -> String {
    format!("{prefix}_x{x}.csv")
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|e| RunError::io(format!("writing {}", path.display()), e))
}

fn create_dir(out: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out).map_err(|e| RunError::io(format!("creating {}", out.display()), e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("record serializes"));
        text.push('\n');
    }
    write_file(path, &text)
}

/// Trains per `cfg`, then evaluates the final state. Returns one
/// [`Diagnostics`] per eval x.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Diagnostics>, RunError> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let data = cfg.dataset(&model)?;
    create_dir(out)?;
    write_file(&out.join("config.json"), &cfg.to_json())?;

    let mut rng = cfg.rng(TRAIN_STREAM);
    let mut state =
        RunState::new(&model, &cfg.train, &mut rng).map_err(|source| RunError::Numeric { step: 0, source })?;

    let metrics_path = out.join("metrics.jsonl");
    let file =
        File::create(&metrics_path).map_err(|e| RunError::io(format!("creating {}", metrics_path.display()), e))?;
    let mut metrics = BufWriter::new(file);
    let mut io_error = None;
    let trained = ivi_core::infer::train(&mut state, &model, &data, &cfg.train, &mut rng, |record| {
        if io_error.is_none() {
            let line = serde_json::to_string(record).expect("record serializes");
            if let Err(e) = writeln!(metrics, "{line}") {
                io_error = Some(e);
            }
        }
    });
    let flushed = metrics.flush();
    if let Some(e) = io_error {
        return Err(RunError::io(format!("writing {}", metrics_path.display()), e));
    }
    flushed.map_err(|e| RunError::io(format!("writing {}", metrics_path.display()), e))?;
    trained.map_err(|(step, source)| RunError::Numeric { step, source })?;

    let snapshot = serde_json::to_string(&state).expect("run state serializes");
    write_file(&out.join("params.json"), &snapshot)?;
    evaluate(&state, &model, cfg, out)
}

/// Reads a snapshot written by [`run_train`] and checks it against `cfg`.
pub fn load_snapshot(cfg: &ExperimentConfig, params: &Path) -> Result<RunState, RunError> {
    let text = fs::read_to_string(params).map_err(|e| RunError::io(format!("reading {}", params.display()), e))?;
    let state: RunState =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("snapshot {}: {e}", params.display())))?;
    let model = cfg.build_model()?;
    state
        .check_compatible(&model, &cfg.train)
        .map_err(RunError::from_config)?;
    Ok(state)
}

pub fn run_eval(cfg: &ExperimentConfig, params: &Path, out: &Path) -> Result<Vec<Diagnostics>, RunError> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let state = load_snapshot(cfg, params)?;
    create_dir(out)?;
    evaluate(&state, &model, cfg, out)
}

/// Diagnostics and grids for every eval x, written to `out`.
pub fn evaluate(
    state: &RunState,
    model: &LatentVariableModel,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<Diagnostics>, RunError> {
    let numeric = |source| RunError::Numeric {
        step: state.step(),
        source,
    };
    let ev = &cfg.eval;
    let mut rng = cfg.rng(EVAL_STREAM);
    let method = cfg.train.method;
    let pc_ratio = matches!(method, Method::PcAdv | Method::Hybrid) && model.explicit_likelihood();

    let flatness = match (&state.ratio, method) {
        (Some(r), Method::JcAdv) => {
            let pairs: Vec<Pair> = (0..ev.flatness_samples)
                .map(|_| {
                    let (x, z) = model.sample_joint(&mut rng);
                    Pair::new(x, z)
                })
                .collect();
            Some(flatness_diagnostic(&r.net, model, &pairs).map_err(numeric)?)
        }
        _ => None,
    };
    let sigma = cfg.train.noise.sigma_at(state.step());

    let mut all = Vec::with_capacity(ev.xs.len());
    for &x in &ev.xs {
        let posterior = if model.explicit_joint() {
            Some(grid_posterior(model, x, &ev.grid).map_err(numeric)?)
        } else {
            None
        };
        let zs = posterior_sample(&state.posterior, x, &mut rng, ev.samples);
        let mut diag = Diagnostics {
            x,
            flatness_mean_abs: flatness,
            ..Diagnostics::default()
        };
        // Every sample may fall outside the grid for a badly fitted q.
        match histogram_density(&zs, &ev.grid) {
            Ok(h) => {
                diag.out_of_bounds = Some(h.out_of_bounds);
                diag.posterior_correlation = Some(h.density.moments().correlation);
                if let Some(p) = &posterior {
                    diag.kl_nats = Some(kl_grid(&h.density, p, KL_SMOOTHING).map_err(numeric)?);
                }
                write_file(&out.join(grid_file_name("q", x)), &h.density.to_csv())?;
            }
            Err(ivi_core::Error::Empty(_)) => diag.out_of_bounds = Some(1.0),
            Err(e) => return Err(numeric(e)),
        }
        if let Some(r) = &state.ratio {
            let values = Grid2D::from_fn(ev.grid, |z| r.net.eval(model, x, &z)).map_err(numeric)?;
            write_file(&out.join(grid_file_name("ratio", x)), &values.to_csv())?;
            if let (true, Some(p)) = (pc_ratio, &posterior) {
                diag.ratio_limit_std = Some(ratio_limit_diagnostic(&r.net, model, x, p).map_err(numeric)?);
            }
        }
        if let Some(u) = &state.denoiser_q {
            let field = |z: &[f64]| score_from_denoiser(&u.net, z, x, sigma);
            diag.curl_proxy = Some(curl_proxy(field, &ev.curl_grid(), CURL_STEP).map_err(numeric)?);
        }
        if !diag.all_finite() {
            return Err(numeric(ivi_core::Error::NonFinite {
                what: "diagnostics",
                step: state.step(),
            }));
        }
        all.push(diag);
    }
    write_jsonl(&out.join("diagnostics.jsonl"), &all)?;
    Ok(all)
}

/// Grid posteriors for every eval x plus `oracle.json`.
pub fn run_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<OracleSummary, RunError> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    if !model.explicit_joint() {
        return Err(RunError::Config("oracle needs an explicit joint density".into()));
    }
    create_dir(out)?;
    let mut entries = Vec::with_capacity(cfg.eval.xs.len());
    for &x in &cfg.eval.xs {
        let grid = grid_posterior(&model, x, &cfg.eval.grid).map_err(|source| RunError::Numeric { step: 0, source })?;
        write_file(&out.join(grid_file_name("posterior", x)), &grid.to_csv())?;
        let Moments { mean, var, correlation } = grid.moments();
        entries.push(OracleEntry {
            x,
            correlation,
            mean,
            var,
            mass: grid.mass(),
        });
    }
    let summary = OracleSummary {
        grid: cfg.eval.grid,
        entries,
    };
    write_file(
        &out.join("oracle.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
