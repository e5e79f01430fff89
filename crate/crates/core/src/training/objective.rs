//! Loss functions of the four calibration methods as functions of one flat
//! parameter vector `θ = [potentials | auxiliary]`.

use log::warn;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::normalize::Normalizer;
use crate::potentials::{const6, BoundModel, Material, PotentialModel, Potentials, T6};
use crate::refmat::{RefBound, RefMaterialParams};
use crate::solver::{step_taped, SolverConfig};
use crate::symtensor::SymTensor2;

use super::nets::{Lstm, Mlp};

/// A material whose potentials can be recorded with parameters as tape
/// variables.
pub trait Trainable: Material + Clone + Send + Sync {
    type Taped<'m, 't>: Potentials<'t>
    where
        Self: 'm;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    fn nonneg_mask(&self) -> Vec<bool>;
    fn bind_params<'m, 't>(&'m self, tape: &'t Tape, p: &[Var<'t>]) -> Self::Taped<'m, 't>;
}

impl Trainable for PotentialModel {
    type Taped<'m, 't> = BoundModel<'m, 't>;

    fn num_params(&self) -> usize {
        PotentialModel::num_params(self)
    }

    fn params(&self) -> Vec<f64> {
        PotentialModel::params(self)
    }

    fn set_params(&mut self, p: &[f64]) {
        PotentialModel::set_params(self, p)
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        PotentialModel::nonneg_mask(self)
    }

    fn bind_params<'m, 't>(&'m self, tape: &'t Tape, p: &[Var<'t>]) -> BoundModel<'m, 't> {
        self.bind_with(tape, p.to_vec())
    }
}

/// The reference material as a parameter-free model, for experiments in
/// which only auxiliary networks are trained.
impl Trainable for RefMaterialParams {
    type Taped<'m, 't> = RefBound<'m, 't>;

    fn num_params(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, p: &[f64]) {
        assert!(p.is_empty());
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        Vec::new()
    }

    fn bind_params<'m, 't>(&'m self, tape: &'t Tape, _: &[Var<'t>]) -> RefBound<'m, 't> {
        self.bind(tape)
    }
}

/// Mean absolute difference over all entries and Mandel coordinates, divided
/// by `scale`.
pub fn mae(pred: &[SymTensor2], data: &[SymTensor2], scale: f64) -> Result<f64> {
    if pred.len() != data.len() {
        return Err(Error::Dimension {
            what: "loss operands",
            expected: data.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(data)
        .map(|(a, b)| (0..6).map(|k| (a.m[k] - b.m[k]).abs()).sum::<f64>())
        .sum();
    Ok(sum / (6.0 * pred.len() as f64 * scale))
}

/// `𝓛_σ`: stress MAE relative to `s_σ`.
pub fn loss_sigma(pred: &[SymTensor2], data: &[SymTensor2], s_sig: f64) -> Result<f64> {
    mae(pred, data, s_sig)
}

/// `𝓛_biot`: MAE between `π` and `π̂` relative to `s_σ`.
pub fn loss_biot(pi: &[SymTensor2], pi_hat: &[SymTensor2], s_sig: f64) -> Result<f64> {
    mae(pi, pi_hat, s_sig)
}

/// `Σ_lanes Σ_k |a_k − b_k|`.
fn abs_sum<'t>(a: &T6<'t>, b: &T6<'t>) -> Var<'t> {
    let tape = a[0].tape();
    let parts: Vec<Var<'t>> = (0..6).map(|k| (a[k] - b[k]).abs().sum_lanes()).collect();
    tape.sum(&parts)
}

/// Tensor components stored lane-wise: `c[k][lane]`.
#[derive(Clone, Debug, Default, PartialEq)]
struct Lanes([Vec<f64>; 6]);

impl Lanes {
    fn from_iter<'a>(ts: impl IntoIterator<Item = &'a SymTensor2>) -> Self {
        let mut c: [Vec<f64>; 6] = Default::default();
        for t in ts {
            for k in 0..6 {
                c[k].push(t.m[k]);
            }
        }
        Lanes(c)
    }

    fn len(&self) -> usize {
        self.0[0].len()
    }

    fn bind<'t>(&self, tape: &'t Tape) -> T6<'t> {
        std::array::from_fn(|k| tape.constant_lanes(&self.0[k]))
    }
}

fn concat6<'t>(tape: &'t Tape, parts: &[T6<'t>]) -> T6<'t> {
    std::array::from_fn(|k| {
        let v: Vec<Var<'t>> = parts.iter().map(|p| p[k]).collect();
        tape.concat(&v)
    })
}

/// Loss value, its two parts, and `∂𝓛/∂θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub loss_sigma: f64,
    pub loss_biot: f64,
    pub grad: Vec<f64>,
}

pub trait Objective {
    fn num_params(&self) -> usize;
    fn nonneg_mask(&self) -> Vec<bool>;
    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation>;
}

fn check_finite(ev: Evaluation) -> Result<Evaluation> {
    if !ev.loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss {}", ev.loss),
        });
    }
    if let Some(k) = ev.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient entry {k}"),
        });
    }
    Ok(ev)
}

/// Data of the states entering `𝓛_σ` and the steps entering `𝓛_biot`.
#[derive(Clone, Debug)]
struct Targets {
    eps: Lanes,
    sig: Lanes,
    eps_biot: Lanes,
    s_sig: f64,
}

/// `𝓛_σ + 𝓛_biot` on the tape for given lane-batched internal variables.
fn gsm_loss<'t, P: Potentials<'t>>(
    p: &P,
    d: &Targets,
    q: &T6<'t>,
    q_biot: &T6<'t>,
    qdot: &T6<'t>,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let tape = p.tape();
    let eps = d.eps.bind(tape);
    let sig = p.stress(&eps, q);
    let ls = abs_sum(&sig, &d.sig.bind(tape)) * (1.0 / (6.0 * d.eps.len() as f64 * d.s_sig));
    let eb = d.eps_biot.bind(tape);
    let el: T6<'t> = std::array::from_fn(|k| eb[k] - q_biot[k]);
    let pi = p.overstress(&el);
    let pih = p.rate_force(qdot, &el);
    let lb = abs_sum(&pi, &pih) * (1.0 / (6.0 * d.eps_biot.len() as f64 * d.s_sig));
    (ls + lb, ls, lb)
}

fn finish<'t>(
    tape: &'t Tape,
    leaves: &[Var<'t>],
    parts: (Var<'t>, Var<'t>, Var<'t>),
) -> Result<Evaluation> {
    let (l, ls, lb) = parts;
    let grad = if leaves.is_empty() {
        Vec::new()
    } else {
        tape.grad_scalars(l, leaves)
    };
    check_finite(Evaluation {
        loss: l.value(),
        loss_sigma: ls.value(),
        loss_biot: lb.value(),
        grad,
    })
}

fn require_q(ds: &Dataset) -> Result<()> {
    if !ds.has_q() {
        return Err(Error::validation(
            "method given_q needs a dataset with an internal-variable channel",
        ));
    }
    Ok(())
}

/// Internal variables and their backward-difference rates taken from data.
pub struct GivenQ<M> {
    pub model: M,
    d: Targets,
    q: Lanes,
    q_biot: Lanes,
    qdot: Lanes,
}

impl<M: Trainable> GivenQ<M> {
    pub fn new(model: M, ds: &Dataset, s_sig: f64) -> Result<Self> {
        require_q(ds)?;
        let seqs = &ds.sequences;
        let qs = |s: &Sequence| s.q.clone().expect("checked");
        let mut qdot = Vec::new();
        for s in seqs {
            let q = qs(s);
            qdot.extend((1..s.len()).map(|n| (q[n] - q[n - 1]) * (1.0 / s.dt(n))));
        }
        Ok(GivenQ {
            model,
            d: targets(ds, s_sig),
            q: Lanes::from_iter(seqs.iter().flat_map(|s| s.q.as_ref().unwrap())),
            q_biot: Lanes::from_iter(seqs.iter().flat_map(|s| &s.q.as_ref().unwrap()[1..])),
            qdot: Lanes::from_iter(&qdot),
        })
    }
}

/// All states in sequence-major order; the biot lanes skip each rest state.
fn targets(ds: &Dataset, s_sig: f64) -> Targets {
    let seqs = &ds.sequences;
    Targets {
        eps: Lanes::from_iter(seqs.iter().flat_map(|s| &s.eps)),
        sig: Lanes::from_iter(seqs.iter().flat_map(|s| &s.sig)),
        eps_biot: Lanes::from_iter(seqs.iter().flat_map(|s| &s.eps[1..])),
        s_sig,
    }
}

impl<M: Trainable> Objective for GivenQ<M> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        self.model.nonneg_mask()
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let tape = Tape::new();
        let leaves = tape.leaves(theta);
        let b = self.model.bind_params(&tape, &leaves);
        let parts = gsm_loss(
            &b,
            &self.d,
            &self.q.bind(&tape),
            &self.q_biot.bind(&tape),
            &self.qdot.bind(&tape),
        );
        finish(&tape, &leaves, parts)
    }
}

/// Network input for the auxiliary FNN: normalized time.
pub fn aux_fnn_net() -> Mlp {
    Mlp::new(&[1, 50, 50, 6])
}

struct FnnSeq {
    t: Vec<f64>,
    inv_dt: Vec<f64>,
}

/// One network `t ↦ q̃(t)` per sequence, trained jointly with the potentials.
pub struct AuxFnn<M> {
    pub model: M,
    pub net: Mlp,
    d: Targets,
    seqs: Vec<FnnSeq>,
    s_q: f64,
}

impl<M: Trainable> AuxFnn<M> {
    pub fn new(model: M, net: Mlp, ds: &Dataset, norm: &Normalizer) -> Self {
        let seqs = ds
            .sequences
            .iter()
            .map(|s| FnnSeq {
                t: s.t.iter().map(|&t| norm.time.forward(t)).collect(),
                inv_dt: (1..s.len()).map(|n| 1.0 / s.dt(n)).collect(),
            })
            .collect();
        AuxFnn {
            model,
            net,
            d: targets(ds, norm.s_sig()),
            seqs,
            s_q: norm.s_q(),
        }
    }

    pub fn sequences(&self) -> usize {
        self.seqs.len()
    }

    /// `q̃` of sequence `i` at its time points (MPa-free, physical units).
    pub fn internal_variables(&self, theta: &[f64], i: usize) -> Vec<SymTensor2> {
        let tape = Tape::new();
        let p = tape.leaves(self.aux_params(theta, i));
        let q = self.q_of(&tape, &p, i);
        crate::potentials::lanes6(&q)
    }

    fn aux_params<'a>(&self, theta: &'a [f64], i: usize) -> &'a [f64] {
        let n = self.net.num_params();
        let off = self.model.num_params() + i * n;
        &theta[off..off + n]
    }

    fn q_of<'t>(&self, tape: &'t Tape, p: &[Var<'t>], i: usize) -> T6<'t> {
        let x = tape.constant_lanes(&self.seqs[i].t);
        let out = self.net.forward(p, &[x]);
        std::array::from_fn(|k| out[k] * self.s_q)
    }
}

impl<M: Trainable> Objective for AuxFnn<M> {
    fn num_params(&self) -> usize {
        self.model.num_params() + self.seqs.len() * self.net.num_params()
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        let mut m = self.model.nonneg_mask();
        m.resize(self.num_params(), false);
        m
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let tape = Tape::new();
        let leaves = tape.leaves(theta);
        let nm = self.model.num_params();
        let b = self.model.bind_params(&tape, &leaves[..nm]);
        let na = self.net.num_params();
        let mut q_all = Vec::new();
        let mut q_b = Vec::new();
        let mut qdot = Vec::new();
        for (i, s) in self.seqs.iter().enumerate() {
            let p = &leaves[nm + i * na..nm + (i + 1) * na];
            let q = self.q_of(&tape, p, i);
            let n = s.t.len() - 1;
            let inv = tape.constant_lanes(&s.inv_dt);
            let later: T6 = q.map(|x| x.slice(1, n));
            qdot.push(std::array::from_fn(|k| (later[k] - q[k].slice(0, n)) * inv));
            q_b.push(later);
            q_all.push(q);
        }
        let parts = gsm_loss(
            &b,
            &self.d,
            &concat6(&tape, &q_all),
            &concat6(&tape, &q_b),
            &concat6(&tape, &qdot),
        );
        finish(&tape, &leaves, parts)
    }
}

/// Fit one auxiliary FNN to `target` (physical units) by mean squared
/// error in normalized units. Returns the final loss.
pub fn pretrain_fnn(
    net: &Mlp,
    p: &mut [f64],
    t_norm: &[f64],
    target: &[SymTensor2],
    s_q: f64,
    epochs: usize,
    lr: f64,
) -> f64 {
    let tgt = Lanes::from_iter(&target.iter().map(|t| *t * (1.0 / s_q)).collect::<Vec<_>>());
    let mut adam = super::optim::Adam::new(p.len());
    let free = vec![false; p.len()];
    let eval = |p: &[f64], grad: bool| {
        let tape = Tape::new();
        let leaves = tape.leaves(p);
        let x = tape.constant_lanes(t_norm);
        let out = net.forward(&leaves, &[x]);
        let tv = tgt.bind(&tape);
        let parts: Vec<Var> = (0..6)
            .map(|k| {
                let d = out[k] - tv[k];
                (d * d).sum_lanes()
            })
            .collect();
        let l = tape.sum(&parts) * (1.0 / (6.0 * t_norm.len() as f64));
        let g = if grad {
            tape.grad_scalars(l, &leaves)
        } else {
            Vec::new()
        };
        (l.value(), g)
    };
    for _ in 0..epochs {
        let (_, g) = eval(p, true);
        adam.step(p, &g, lr, &free);
    }
    eval(p, false).0
}

/// Inputs per step: `(ε_n, σ̄_n, Δt_n)`, normalized.
pub const RNN_INPUTS: usize = 13;

pub fn aux_rnn_nets() -> (Lstm, Mlp) {
    (Lstm::new(RNN_INPUTS, 50), Mlp::new(&[50, 6]))
}

/// Sequences of equal length integrated side by side as lanes.
struct RnnGroup {
    lanes: usize,
    steps: usize,
    /// `inputs[n - 1][j]`: input `j` of step `n`, one lane per member.
    inputs: Vec<[Vec<f64>; RNN_INPUTS]>,
    /// `1/Δt` for steps `1..=N`, time-major.
    inv_dt: Vec<f64>,
}

/// LSTM cell reading the data stream and emitting `q` per step.
pub struct AuxRnn<M> {
    pub model: M,
    pub cell: Lstm,
    pub head: Mlp,
    d: Targets,
    groups: Vec<RnnGroup>,
    s_q: f64,
}

impl<M: Trainable> AuxRnn<M> {
    pub fn new(model: M, cell: Lstm, head: Mlp, ds: &Dataset, norm: &Normalizer) -> Self {
        let mut by_len: std::collections::BTreeMap<usize, Vec<&Sequence>> = Default::default();
        for s in &ds.sequences {
            by_len.entry(s.len()).or_default().push(s);
        }
        let mut groups = Vec::new();
        let (mut eps, mut sig, mut eps_b) = (Vec::new(), Vec::new(), Vec::new());
        for (len, members) in by_len {
            let steps = len - 1;
            let inputs = (1..len)
                .map(|n| {
                    std::array::from_fn(|j| {
                        members
                            .iter()
                            .map(|s| match j {
                                0..=5 => norm.strain.forward(s.eps[n].m[j]),
                                6..=11 => norm.stress.forward(s.sig[n].m[j - 6]),
                                _ => norm.dt.forward(s.dt(n)),
                            })
                            .collect()
                    })
                })
                .collect();
            let inv_dt = (1..len)
                .flat_map(|n| members.iter().map(move |s| 1.0 / s.dt(n)))
                .collect();
            for n in 0..len {
                for s in &members {
                    eps.push(s.eps[n]);
                    sig.push(s.sig[n]);
                    if n > 0 {
                        eps_b.push(s.eps[n]);
                    }
                }
            }
            groups.push(RnnGroup {
                lanes: members.len(),
                steps,
                inputs,
                inv_dt,
            });
        }
        AuxRnn {
            model,
            cell,
            head,
            d: Targets {
                eps: Lanes::from_iter(&eps),
                sig: Lanes::from_iter(&sig),
                eps_biot: Lanes::from_iter(&eps_b),
                s_sig: norm.s_sig(),
            },
            groups,
            s_q: norm.s_q(),
        }
    }

    fn aux_len(&self) -> usize {
        self.cell.num_params() + self.head.num_params()
    }
}

impl<M: Trainable> Objective for AuxRnn<M> {
    fn num_params(&self) -> usize {
        self.model.num_params() + self.aux_len()
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        let mut m = self.model.nonneg_mask();
        m.resize(self.num_params(), false);
        m
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let tape = Tape::new();
        let leaves = tape.leaves(theta);
        let nm = self.model.num_params();
        let b = self.model.bind_params(&tape, &leaves[..nm]);
        let pc = &leaves[nm..nm + self.cell.num_params()];
        let ph = &leaves[nm + self.cell.num_params()..];
        let mut q_all = Vec::new();
        let mut q_b = Vec::new();
        let mut qdot = Vec::new();
        let zero = tape.constant(0.0);
        for g in &self.groups {
            let mut h = vec![zero; self.cell.hidden];
            let mut c = h.clone();
            let mut qs: Vec<T6> = vec![[tape.zeros(g.lanes); 6]];
            for n in 1..=g.steps {
                let x: Vec<Var> = g.inputs[n - 1]
                    .iter()
                    .map(|v| tape.constant_lanes(v))
                    .collect();
                (h, c) = self.cell.step(pc, &x, &h, &c);
                let out = self.head.forward(ph, &h);
                qs.push(std::array::from_fn(|k| out[k] * self.s_q));
            }
            let q = concat6(&tape, &qs);
            let m = g.steps * g.lanes;
            let later: T6 = q.map(|x| x.slice(g.lanes, m));
            let inv = tape.constant_lanes(&g.inv_dt);
            qdot.push(std::array::from_fn(|k| (later[k] - q[k].slice(0, m)) * inv));
            q_b.push(later);
            q_all.push(q);
        }
        let parts = gsm_loss(
            &b,
            &self.d,
            &concat6(&tape, &q_all),
            &concat6(&tape, &q_b),
            &concat6(&tape, &qdot),
        );
        finish(&tape, &leaves, parts)
    }
}

/// Stress loss of full implicit-Euler predictions, differentiated through
/// every Newton iteration.
pub struct Integration<M> {
    pub model: M,
    pub solver: SolverConfig,
    seqs: Vec<Sequence>,
    states: usize,
    s_sig: f64,
    last: Vec<Option<f64>>,
}

impl<M: Trainable> Integration<M> {
    pub fn new(model: M, ds: &Dataset, s_sig: f64, solver: SolverConfig) -> Self {
        let seqs = ds.sequences.clone();
        Integration {
            model,
            solver,
            states: ds.sequences.iter().map(Sequence::len).sum(),
            last: vec![None; seqs.len()],
            seqs,
            s_sig,
        }
    }

    /// Summed absolute stress error of one sequence and its gradient.
    fn sequence(&self, frozen: &M, theta: &[f64], s: &Sequence) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let leaves = tape.leaves(theta);
        let b = frozen.bind_params(&tape, &leaves);
        let mut q = const6(&tape, &SymTensor2::ZERO);
        let mut terms = vec![tape.constant(abs_total(&s.sig[0]))];
        for n in 1..s.len() {
            let r = step_taped(&b, frozen, &q, &s.eps[n], s.dt(n), &self.solver)
                .map_err(|e| e.at_step(n))?;
            terms.push(abs_sum(&r.sig, &const6(&tape, &s.sig[n])));
            q = r.q;
        }
        let total = tape.sum(&terms);
        let grad = if leaves.is_empty() {
            Vec::new()
        } else {
            tape.grad_scalars(total, &leaves)
        };
        Ok((total.value(), grad))
    }
}

fn abs_total(t: &SymTensor2) -> f64 {
    t.m.iter().map(|x| x.abs()).sum()
}

impl<M: Trainable> Objective for Integration<M> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        self.model.nonneg_mask()
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let mut frozen = self.model.clone();
        frozen.set_params(theta);
        let results: Vec<Result<(f64, Vec<f64>)>> = self
            .seqs
            .par_iter()
            .map(|s| self.sequence(&frozen, theta, s))
            .collect();
        let norm = 1.0 / (6.0 * self.states as f64 * self.s_sig);
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((l, g)) => {
                    self.last[i] = Some(l);
                    loss += l;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Err(e) if e.is_numerical() => match self.last[i] {
                    Some(prev) => {
                        warn!("sequence {i}: {e}; using penalty loss");
                        loss += 2.0 * prev;
                    }
                    None => return Err(e),
                },
                Err(e) => return Err(e),
            }
        }
        grad.iter_mut().for_each(|g| *g *= norm);
        check_finite(Evaluation {
            loss: loss * norm,
            loss_sigma: loss * norm,
            loss_biot: 0.0,
            grad,
        })
    }
}
