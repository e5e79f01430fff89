//! Implicit-Euler time integration with a Newton solve of the Biot equation.
//!
//! Per step the unknown is the rate `q̇`; with `q = q_prev + Δt q̇` the
//! residual is `R(q̇) = π(ε − q) − π̂(q̇, ε − q)`, i.e. `∂ψ/∂q + ∂φ/∂q̇ = 0`.
//! Newton starts from `q̇ = 0` and is globalized by backtracking on `‖R‖`.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::autodiff::{Scalar, Tape, Var};
use crate::data::{Dataset, Provenance, Sequence, StressKind};
use crate::error::{Error, Result};
use crate::potentials::{add6, const6, scale6, sub6, value6, Material, Potentials, T6};
use crate::symtensor::SymTensor2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Absolute tolerance on `‖π − π̂‖` (MPa).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Step-length factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl SolverConfig {
    /// Tolerance `1e-8 · s_σ`.
    pub fn scaled(stress_scale: f64) -> Self {
        SolverConfig {
            tolerance: 1e-8 * stress_scale,
            max_iterations: 20,
            shrink: 0.5,
            max_backtracks: 10,
        }
    }

    pub fn for_material<M: Material>(m: &M) -> Self {
        Self::scaled(m.stress_scale())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("solver tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("solver needs at least one iteration"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::validation(
                "line-search shrink factor must lie in (0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaterialState {
    pub t: f64,
    pub eps: SymTensor2,
    pub sig: SymTensor2,
    pub q: SymTensor2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub state: MaterialState,
    pub qdot: SymTensor2,
    /// `π̂` at the accepted rate.
    pub rate_force: SymTensor2,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

impl StepResult {
    pub fn rest(t: f64) -> Self {
        StepResult {
            state: MaterialState {
                t,
                ..Default::default()
            },
            qdot: SymTensor2::ZERO,
            rate_force: SymTensor2::ZERO,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        }
    }

    /// Dissipated energy density `π̂ : q̇ Δt` over the step.
    pub fn dissipation(&self, dt: f64) -> f64 {
        self.rate_force.dot(&self.qdot) * dt
    }
}

/// Residual of the Biot equation together with the implied `q` and `π̂`.
pub struct Residual<'t> {
    pub r: T6<'t>,
    pub q: T6<'t>,
    pub rate_force: T6<'t>,
}

pub fn biot_residual<'t, P: Potentials<'t>>(
    p: &P,
    eps: &T6<'t>,
    q_prev: &T6<'t>,
    dt: f64,
    qdot: &T6<'t>,
) -> Residual<'t> {
    let q = add6(q_prev, &scale6(qdot, dt));
    let el = sub6(eps, &q);
    let pi = p.overstress(&el);
    let pi_hat = p.rate_force(qdot, &el);
    Residual {
        r: sub6(&pi, &pi_hat),
        q,
        rate_force: pi_hat,
    }
}

fn norm(v: &[f64; 6]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian elimination with partial pivoting on a 6×6 system. `None` when
/// a pivot falls below `1e-13 · max|A|`.
pub fn solve6<S: Scalar>(mut a: [[S; 6]; 6], mut b: [S; 6]) -> Option<[S; 6]> {
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.value().abs()));
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    for col in 0..6 {
        let piv = (col..6)
            .max_by(|&i, &j| a[i][col].value().abs().total_cmp(&a[j][col].value().abs()))
            .unwrap();
        if !(a[piv][col].value().abs() > 1e-13 * scale) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let inv = a[col][col];
        for row in col + 1..6 {
            let f = a[row][col] / inv;
            for k in col + 1..6 {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = b;
    for row in (0..6).rev() {
        let mut s = x[row];
        for k in row + 1..6 {
            s = s - a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Solve `J δ = −R`, retrying once with `J + λI`, `λ = 1e-8 ‖J‖`.
fn newton_direction<S: Scalar>(j: [[S; 6]; 6], r: [S; 6], step: usize) -> Result<[S; 6]> {
    let neg = r.map(|x| -x);
    if let Some(d) = solve6(j, neg) {
        return Ok(d);
    }
    let fro = j
        .iter()
        .flatten()
        .map(|x| x.value() * x.value())
        .sum::<f64>()
        .sqrt();
    let lambda = 1e-8 * fro;
    let mut jr = j;
    for (i, row) in jr.iter_mut().enumerate() {
        row[i] = row[i] + lambda;
    }
    solve6(jr, neg).ok_or(Error::SingularJacobian { step })
}

/// Residual norm at a trial rate, evaluated on a scratch tape.
fn residual_norm<M: Material>(
    m: &M,
    tape: &mut Tape,
    eps: &SymTensor2,
    q_prev: &SymTensor2,
    dt: f64,
    qdot: &[f64; 6],
) -> f64 {
    tape.clear();
    let b = m.bind(tape);
    let qd = qdot.map(|v| tape.constant(v));
    let res = biot_residual(&b, &const6(tape, eps), &const6(tape, q_prev), dt, &qd);
    norm(&value6(&res.r).m)
}

/// Backtracking on `‖R‖`: returns the accepted step length and residual norm.
/// If no trial gives sufficient decrease the shortest one is taken.
#[allow(clippy::too_many_arguments)]
fn line_search<M: Material>(
    m: &M,
    scratch: &mut Tape,
    eps: &SymTensor2,
    q_prev: &SymTensor2,
    dt: f64,
    qdot: &[f64; 6],
    dir: &[f64; 6],
    r0: f64,
    cfg: &SolverConfig,
) -> (f64, f64) {
    let mut alpha = 1.0;
    let mut last = f64::INFINITY;
    for k in 0..=cfg.max_backtracks {
        let trial: [f64; 6] = std::array::from_fn(|i| qdot[i] + alpha * dir[i]);
        last = residual_norm(m, scratch, eps, q_prev, dt, &trial);
        if last < (1.0 - 1e-4 * alpha) * r0 || k == cfg.max_backtracks {
            break;
        }
        alpha *= cfg.shrink;
    }
    (alpha, last)
}

/// One implicit-Euler step from `prev` to `(t_new, eps_new)`.
pub fn step<M: Material>(
    m: &M,
    prev: &MaterialState,
    t_new: f64,
    eps_new: &SymTensor2,
    cfg: &SolverConfig,
) -> Result<StepResult> {
    let dt = t_new - prev.t;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::validation(format!(
            "time increment must be positive, got {dt}"
        )));
    }
    let mut tape = Tape::new();
    let mut scratch = Tape::new();
    let mut qdot = [0.0; 6];
    let mut best = (f64::INFINITY, qdot);
    let mut iterations = 0;
    loop {
        tape.clear();
        let (r, jac) = {
            let b = m.bind(&tape);
            let qd: T6<'_> = qdot.map(|v| tape.leaf(v));
            let eps = const6(&tape, eps_new);
            let res = biot_residual(&b, &eps, &const6(&tape, &prev.q), dt, &qd);
            let r = value6(&res.r).m;
            let rn = norm(&r);
            if rn < best.0 {
                best = (rn, qdot);
            }
            if rn <= cfg.tolerance {
                let q = value6(&res.q);
                let sig = value6(&b.stress(&eps, &const6(&tape, &q)));
                return Ok(StepResult {
                    state: MaterialState {
                        t: t_new,
                        eps: *eps_new,
                        sig,
                        q,
                    },
                    qdot: SymTensor2::new(qdot),
                    rate_force: value6(&res.rate_force),
                    iterations,
                    residual_norm: rn,
                    converged: true,
                });
            }
            if iterations == cfg.max_iterations || !rn.is_finite() {
                return Err(Error::NonConvergence {
                    step: 0,
                    iterations,
                    residual: best.0,
                    best: best.1,
                });
            }
            let jac: [[f64; 6]; 6] = std::array::from_fn(|i| {
                let row = tape.grad_scalars(res.r[i], &qd);
                std::array::from_fn(|j| row[j])
            });
            (r, jac)
        };
        let dir = newton_direction(jac, r, 0)?;
        let (alpha, _) = line_search(
            m,
            &mut scratch,
            eps_new,
            &prev.q,
            dt,
            &qdot,
            &dir,
            norm(&r),
            cfg,
        );
        for i in 0..6 {
            qdot[i] += alpha * dir[i];
        }
        iterations += 1;
    }
}

/// Integrate a whole strain path. Entry 0 of the result is the rest state.
pub fn predict_sequence<M: Material>(
    m: &M,
    times: &[f64],
    strains: &[SymTensor2],
    cfg: &SolverConfig,
) -> Result<Vec<StepResult>> {
    cfg.validate()?;
    if times.len() != strains.len() {
        return Err(Error::Dimension {
            what: "strain path",
            expected: times.len(),
            got: strains.len(),
        });
    }
    if times.is_empty() {
        return Err(Error::validation("empty strain path"));
    }
    if strains[0] != SymTensor2::ZERO {
        return Err(Error::validation("strain path must start at zero strain"));
    }
    let mut out = Vec::with_capacity(times.len());
    out.push(StepResult::rest(times[0]));
    for n in 1..times.len() {
        if !(times[n] > times[n - 1]) {
            return Err(Error::validation(format!(
                "times not strictly increasing at index {n}"
            )));
        }
        let prev = out[n - 1].state;
        let r = step(m, &prev, times[n], &strains[n], cfg).map_err(|e| e.at_step(n))?;
        out.push(r);
    }
    Ok(out)
}

/// Responses of a material to every strain path of a dataset. Times and
/// strains are kept; stresses, internal variables and per-step solver
/// statistics are replaced by the prediction.
pub fn predict_dataset<M: Material + Sync>(
    m: &M,
    paths: &Dataset,
    cfg: &SolverConfig,
) -> Result<Dataset> {
    let sequences = paths
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let out = predict_sequence(m, &s.t, &s.eps, cfg).map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("sequence {i}: {msg}")),
                other => other,
            })?;
            Ok(Sequence {
                t: s.t.clone(),
                eps: s.eps.clone(),
                sig: out.iter().map(|r| r.state.sig).collect(),
                q: Some(out.iter().map(|r| r.state.q).collect()),
                sig_ideal: None,
                residual: Some(out.iter().map(|r| r.residual_norm).collect()),
                iterations: Some(out.iter().map(|r| r.iterations).collect()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        stress: StressKind::Predicted,
        noise_std: 0.0,
        name: format!("prediction of {}", paths.provenance.name),
        ..paths.provenance.clone()
    };
    Ok(Dataset::new(provenance, paths.seed, sequences))
}

/// Result of a step recorded on a tape for differentiation.
pub struct TapedStep<'t> {
    pub q: T6<'t>,
    pub sig: T6<'t>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Implicit-Euler step whose Newton iterations are all recorded on the tape
/// of `p`, so outputs can be differentiated with respect to whatever `p` and
/// `q_prev` depend on. `frozen` must evaluate the same potentials with plain
/// constants; it drives the line search.
pub fn step_taped<'t, P: Potentials<'t>, M: Material>(
    p: &P,
    frozen: &M,
    q_prev: &T6<'t>,
    eps_new: &SymTensor2,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<TapedStep<'t>> {
    let tape = p.tape();
    let eps = const6(tape, eps_new);
    let q_prev_val = value6(q_prev);
    let mut scratch = Tape::new();
    let mut qdot: T6<'t> = std::array::from_fn(|_| tape.constant(0.0));
    let mut best = (f64::INFINITY, [0.0; 6]);
    let mut iterations = 0;
    // Lane k of the six-lane evaluation carries row k of the Jacobian, so a
    // single reverse sweep yields all of it.
    let onehot: [Var<'t>; 6] = std::array::from_fn(|k| {
        let mut e = [0.0; 6];
        e[k] = 1.0;
        tape.constant_lanes(&e)
    });
    loop {
        let qa = qdot.map(Var::alias);
        let qx = qa.map(|v| v.expand_to(6));
        let r6 = biot_residual(p, &eps, q_prev, dt, &qx).r;
        let rv: [f64; 6] = std::array::from_fn(|k| r6[k].values()[0]);
        let rn = norm(&rv);
        let qv = value6(&qa).m;
        if rn < best.0 {
            best = (rn, qv);
        }
        if rn <= cfg.tolerance {
            let q = add6(q_prev, &scale6(&qa, dt));
            let sig = p.stress(&eps, &q);
            return Ok(TapedStep {
                q,
                sig,
                iterations,
                residual_norm: rn,
            });
        }
        if iterations == cfg.max_iterations || !rn.is_finite() {
            return Err(Error::NonConvergence {
                step: 0,
                iterations,
                residual: best.0,
                best: best.1,
            });
        }
        let r: [Var<'t>; 6] = r6.map(|v| v.slice(0, 1));
        let seeded = tape.dot(&r6, &onehot);
        let cols = tape.grad_graph(seeded, &qx);
        let jac: [[Var<'t>; 6]; 6] =
            std::array::from_fn(|i| std::array::from_fn(|j| cols[j].slice(i, 1)));
        let dir = newton_direction(jac, r, 0)?;
        let dv = value6(&dir).m;
        let (alpha, _) = line_search(
            frozen,
            &mut scratch,
            eps_new,
            &q_prev_val,
            dt,
            &qv,
            &dv,
            rn,
            cfg,
        );
        qdot = std::array::from_fn(|i| qa[i] + dir[i] * alpha);
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmat::RefMaterialParams;
    use approx::assert_relative_eq;

    fn cfg() -> SolverConfig {
        SolverConfig {
            tolerance: 1e-10,
            ..SolverConfig::scaled(1.0)
        }
    }

    #[test]
    fn rest_state_is_a_fixed_point() {
        let p = RefMaterialParams::default();
        let r = step(
            &p,
            &MaterialState::default(),
            0.05,
            &SymTensor2::ZERO,
            &cfg(),
        )
        .unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.state.q, SymTensor2::ZERO);
        assert_eq!(r.state.sig, SymTensor2::ZERO);
    }

    #[test]
    fn zero_path_gives_zero_response() {
        let p = RefMaterialParams::default();
        let t: Vec<f64> = (0..6).map(|k| k as f64 * 0.05).collect();
        let out = predict_sequence(&p, &t, &[SymTensor2::ZERO; 6], &cfg()).unwrap();
        assert!(out.iter().all(|r| r.state.sig == SymTensor2::ZERO));
    }

    #[test]
    fn linear_step_matches_closed_form() {
        // q̇ = (𝕍₀ + Δt ℂ^ov)⁻¹ : ℂ^ov : (ε − q_prev) for quadratic potentials
        let p = RefMaterialParams::default().constant_viscosity();
        let prev = MaterialState {
            t: 0.3,
            q: SymTensor2::new([1e-3, -2e-3, 5e-4, 1e-4, 0.0, -3e-4]),
            ..Default::default()
        };
        let eps = SymTensor2::new([0.01, -0.004, 0.002, 0.003, -0.001, 0.0015]);
        let dt = 0.05;
        let r = step(&p, &prev, prev.t + dt, &eps, &cfg()).unwrap();
        assert_eq!(r.iterations, 1);
        let a = {
            let v = p.v0().matrix();
            let c = p.c_ov().matrix();
            let mut a = [[0.0; 6]; 6];
            for i in 0..6 {
                for j in 0..6 {
                    a[i][j] = v[i][j] + dt * c[i][j];
                }
            }
            a
        };
        let rhs = p.c_ov().apply(&(eps - prev.q)).m;
        let want = solve6(a, rhs).unwrap();
        for k in 0..6 {
            assert_relative_eq!(r.qdot.m[k], want[k], max_relative = 1e-9);
        }
    }

    #[test]
    fn taped_step_matches_plain_step() {
        let p = RefMaterialParams::default();
        let prev = MaterialState {
            t: 0.0,
            q: SymTensor2::new([1e-3, -2e-3, 5e-4, 1e-4, 0.0, -3e-4]),
            ..Default::default()
        };
        let eps = SymTensor2::new([0.015, -0.004, 0.002, 0.003, -0.001, 0.0015]);
        let plain = step(&p, &prev, 0.07, &eps, &cfg()).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let taped = step_taped(&b, &p, &const6(&tape, &prev.q), &eps, 0.07, &cfg()).unwrap();
        assert_eq!(taped.iterations, plain.iterations);
        assert!((value6(&taped.q) - plain.state.q).max_abs() < 1e-14);
        assert!((value6(&taped.sig) - plain.state.sig).max_abs() < 1e-10);
    }

    #[test]
    fn solve6_rejects_singular_systems() {
        let a = [[1.0; 6]; 6];
        assert!(solve6(a, [1.0; 6]).is_none());
        let mut id = [[0.0; 6]; 6];
        for (i, row) in id.iter_mut().enumerate() {
            row[i] = 2.0;
        }
        assert_eq!(solve6(id, [2.0; 6]).unwrap(), [1.0; 6]);
    }

    #[test]
    fn step_rejects_non_positive_increment() {
        let p = RefMaterialParams::default();
        let prev = MaterialState {
            t: 1.0,
            ..Default::default()
        };
        assert!(step(&p, &prev, 1.0, &SymTensor2::ZERO, &cfg()).is_err());
    }
}
