//! Calibration of the potentials from strain/stress data.
//!
//! Four methods differ in where the internal variables come from:
//! `given_q` reads them from the data, `integration` predicts them with the
//! solver, `aux_fnn` fits one time-to-`q` network per sequence and `aux_rnn`
//! lets an LSTM infer them from the data stream. All share projected Adam
//! on a flat parameter vector.

pub mod nets;
pub mod objective;
pub mod optim;

use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::normalize::Normalizer;
use crate::potentials::{Mode, PotentialModel};
use crate::solver::SolverConfig;

pub use objective::{
    loss_biot, loss_sigma, AuxFnn, AuxRnn, Evaluation, GivenQ, Integration, Objective, Trainable,
};
pub use optim::{Adam, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GivenQ,
    Integration,
    AuxFnn,
    AuxRnn,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::GivenQ,
        Method::Integration,
        Method::AuxFnn,
        Method::AuxRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GivenQ => "given_q",
            Method::Integration => "integration",
            Method::AuxFnn => "aux_fnn",
            Method::AuxRnn => "aux_rnn",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown method '{s}' (expected given_q, integration, aux_fnn or aux_rnn)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub mode: Mode,
    /// Hidden width of the potentials; `None` uses the mode default.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Pretraining epochs of the auxiliary FNNs.
    pub pretrain_epochs: usize,
    /// Newton tolerance of the integration method, relative to `s_σ`.
    pub solver_rel_tolerance: f64,
    pub solver_max_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::AuxRnn,
            mode: Mode::Invariant,
            hidden: None,
            epochs: 2000,
            lr: 0.01,
            decay: 0.5,
            decay_interval: 500,
            restarts: 3,
            seed: 0,
            pretrain_epochs: 2000,
            solver_rel_tolerance: 1e-8,
            solver_max_iterations: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::validation(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if self.decay_interval == 0 {
            return Err(Error::validation(
                "decay interval must be at least one epoch",
            ));
        }
        if self.restarts == 0 {
            return Err(Error::validation("at least one restart is required"));
        }
        if self.hidden == Some(0) {
            return Err(Error::validation("hidden width must be positive"));
        }
        self.solver(1.0).validate()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            decay: self.decay,
            interval: self.decay_interval,
        }
    }

    pub fn solver(&self, s_sig: f64) -> SolverConfig {
        SolverConfig {
            tolerance: self.solver_rel_tolerance * s_sig,
            max_iterations: self.solver_max_iterations,
            ..SolverConfig::scaled(s_sig)
        }
    }

    fn hidden(&self) -> usize {
        self.hidden.unwrap_or(self.mode.default_hidden())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Why the restart was abandoned, if it was.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub mode: Mode,
    pub best_restart: usize,
    pub epochs_run: usize,
    /// Total loss per epoch, evaluated before that epoch's update.
    pub loss: Vec<f64>,
    pub loss_sigma: Vec<f64>,
    pub loss_biot: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub final_loss: f64,
    /// Potential parameters of the selected run.
    pub params: Vec<f64>,
    pub restarts: Vec<RestartSummary>,
    /// True if every restart ran to completion.
    pub converged: bool,
}

impl TrainReport {
    pub fn mean_epoch_seconds(&self) -> f64 {
        let n = self.epoch_seconds.len().max(1) as f64;
        self.epoch_seconds.iter().sum::<f64>() / n
    }
}

/// History of one optimization run.
#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    pub loss: Vec<f64>,
    pub loss_sigma: Vec<f64>,
    pub loss_biot: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Projected Adam on `theta` for `epochs` epochs. The final loss is the last
/// recorded one, or the loss at `theta` for a zero-epoch run.
pub fn optimize<O: Objective>(
    obj: &mut O,
    theta: &mut [f64],
    epochs: usize,
    schedule: Schedule,
) -> Result<RunHistory> {
    let mask = obj.nonneg_mask();
    optim::project(theta, &mask);
    let mut adam = Adam::new(theta.len());
    let mut h = RunHistory::default();
    if epochs == 0 {
        let ev = obj.evaluate(theta)?;
        h.initial_loss = ev.loss;
        h.final_loss = ev.loss;
        return Ok(h);
    }
    for e in 0..epochs {
        let start = Instant::now();
        let ev = obj
            .evaluate(theta)
            .inspect_err(|err| warn!("epoch {e} aborted: {err}"))?;
        adam.step(theta, &ev.grad, schedule.at(e), &mask);
        h.epoch_seconds.push(start.elapsed().as_secs_f64());
        if e == 0 {
            h.initial_loss = ev.loss;
        }
        h.loss.push(ev.loss);
        h.loss_sigma.push(ev.loss_sigma);
        h.loss_biot.push(ev.loss_biot);
        if e % 100 == 0 || e + 1 == epochs {
            log::debug!("epoch {e}: loss {:.6e}", ev.loss);
        }
    }
    h.final_loss = *h.loss.last().unwrap();
    Ok(h)
}

/// Outcome of [`train`]: the selected model and the report.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PotentialModel,
    pub report: TrainReport,
}

struct Run {
    model: PotentialModel,
    history: RunHistory,
}

/// Initial parameters `[potentials | auxiliary]` for one restart.
fn aux_init(
    method: Method,
    model_params: Vec<f64>,
    ds: &Dataset,
    norm: &Normalizer,
    cfg: &TrainConfig,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep the auxiliary stream apart from the potentials' initialization
    rng.set_stream(2);
    let mut theta = model_params;
    match method {
        Method::GivenQ | Method::Integration => {}
        Method::AuxFnn => {
            let net = objective::aux_fnn_net();
            let mut inits: Vec<Vec<f64>> =
                ds.sequences.iter().map(|_| net.init(&mut rng)).collect();
            inits.par_iter_mut().zip(&ds.sequences).for_each(|(p, s)| {
                let t: Vec<f64> = s.t.iter().map(|&t| norm.time.forward(t)).collect();
                objective::pretrain_fnn(
                    &net,
                    p,
                    &t,
                    &s.eps,
                    norm.s_q(),
                    cfg.pretrain_epochs,
                    cfg.lr,
                );
            });
            theta.extend(inits.into_iter().flatten());
        }
        Method::AuxRnn => {
            let (cell, head) = objective::aux_rnn_nets();
            theta.extend(cell.init(&mut rng));
            theta.extend(head.init(&mut rng));
        }
    }
    theta
}

fn run_once(ds: &Dataset, norm: &Normalizer, cfg: &TrainConfig, seed: u64) -> Result<Run> {
    let mut model = PotentialModel::with_hidden(cfg.mode, cfg.hidden(), *norm, seed);
    let nm = model.num_params();
    let mut theta = aux_init(cfg.method, model.params(), ds, norm, cfg, seed);
    let sched = cfg.schedule();
    let s_sig = norm.s_sig();
    let history = match cfg.method {
        Method::GivenQ => {
            let mut o = GivenQ::new(model.clone(), ds, s_sig)?;
            optimize(&mut o, &mut theta, cfg.epochs, sched)?
        }
        Method::Integration => {
            let mut o = Integration::new(model.clone(), ds, s_sig, cfg.solver(s_sig));
            optimize(&mut o, &mut theta, cfg.epochs, sched)?
        }
        Method::AuxFnn => {
            let mut o = AuxFnn::new(model.clone(), objective::aux_fnn_net(), ds, norm);
            optimize(&mut o, &mut theta, cfg.epochs, sched)?
        }
        Method::AuxRnn => {
            let (cell, head) = objective::aux_rnn_nets();
            let mut o = AuxRnn::new(model.clone(), cell, head, ds, norm);
            optimize(&mut o, &mut theta, cfg.epochs, sched)?
        }
    };
    model.set_params(&theta[..nm]);
    debug_assert!(model.is_feasible());
    Ok(Run { model, history })
}

/// Train `cfg.restarts` independently seeded runs (seed `cfg.seed + r`) and
/// keep the one with the lowest final loss.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let norm = Normalizer::fit(ds)?;
    if cfg.method == Method::GivenQ && !ds.has_q() {
        return Err(Error::validation(
            "method given_q needs a dataset with an internal-variable channel",
        ));
    }
    let mut summaries = Vec::new();
    let mut best: Option<(usize, Run)> = None;
    for r in 0..cfg.restarts {
        let seed = cfg.seed.wrapping_add(r as u64);
        let mut summary = RestartSummary {
            index: r,
            seed,
            epochs_run: 0,
            initial_loss: None,
            final_loss: None,
            failure: None,
        };
        match run_once(ds, &norm, cfg, seed) {
            Ok(run) => {
                info!(
                    "{} restart {r}: loss {:.4e} -> {:.4e}",
                    cfg.method, run.history.initial_loss, run.history.final_loss
                );
                summary.epochs_run = run.history.loss.len();
                summary.initial_loss = Some(run.history.initial_loss);
                summary.final_loss = Some(run.history.final_loss);
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| run.history.final_loss < b.history.final_loss);
                if better {
                    best = Some((r, run));
                }
            }
            Err(e) if e.is_numerical() => {
                warn!("{} restart {r} failed: {e}", cfg.method);
                summary.failure = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        summaries.push(summary);
    }
    let (best_restart, run) = best.ok_or(Error::AllRestartsFailed(cfg.restarts))?;
    let h = run.history;
    let report = TrainReport {
        method: cfg.method,
        mode: cfg.mode,
        best_restart,
        epochs_run: h.loss.len(),
        loss: h.loss,
        loss_sigma: h.loss_sigma,
        loss_biot: h.loss_biot,
        epoch_seconds: h.epoch_seconds,
        final_loss: h.final_loss,
        params: run.model.params(),
        converged: summaries.iter().all(|s| s.failure.is_none()),
        restarts: summaries,
    };
    Ok(TrainOutcome {
        model: run.model,
        report,
    })
}
