//! Free energy and dissipation potential built from input-convex networks.
//!
//! The free energy splits into an equilibrium branch `ψ^eq(ε)` and an
//! overstress branch `ψ^ov(ε − q)`; the dissipation potential `φ(q̇ | ε − q)`
//! is convex in the rate. Correction terms subtract the value and the
//! first-invariant slope at the origin so that
//! `ψ(0,0) = 0`, `σ(0,0) = 0`, `π(0,0) = 0`, `φ(0,·) = 0` and `∂φ/∂q̇(0,·) = 0`
//! hold for any parameter values.

use std::cell::OnceCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::icnn::{Ficnn, FicnnArch, Picnn, PicnnArch};
use crate::normalize::Normalizer;
use crate::symtensor::{self, SymTensor2};

pub type T6<'t> = [Var<'t>; 6];

/// Evaluation of the three potentials on a tape. Tensor arguments may carry
/// lanes; every provided method works lane-wise.
pub trait Potentials<'t> {
    fn tape(&self) -> &'t Tape;
    fn psi_eq(&self, eps: &T6<'t>) -> Var<'t>;
    fn psi_ov(&self, eps_el: &T6<'t>) -> Var<'t>;
    fn phi(&self, qdot: &T6<'t>, eps_el: &T6<'t>) -> Var<'t>;

    /// `∂ψ^eq/∂ε`, recorded so it can be differentiated again.
    fn eq_stress(&self, eps: &T6<'t>) -> T6<'t> {
        let e = eps.map(Var::alias);
        let psi = self.psi_eq(&e);
        to6(self.tape().grad_graph(psi, &e))
    }

    /// `π = ∂ψ^ov/∂ε^el = −∂ψ/∂q`.
    fn overstress(&self, eps_el: &T6<'t>) -> T6<'t> {
        let e = eps_el.map(Var::alias);
        let psi = self.psi_ov(&e);
        to6(self.tape().grad_graph(psi, &e))
    }

    /// `π̂ = ∂φ/∂q̇`.
    fn rate_force(&self, qdot: &T6<'t>, eps_el: &T6<'t>) -> T6<'t> {
        let r = qdot.map(Var::alias);
        let phi = self.phi(&r, eps_el);
        to6(self.tape().grad_graph(phi, &r))
    }

    fn free_energy(&self, eps: &T6<'t>, q: &T6<'t>) -> Var<'t> {
        self.psi_eq(eps) + self.psi_ov(&sub6(eps, q))
    }

    /// `σ = ∂ψ/∂ε`.
    fn stress(&self, eps: &T6<'t>, q: &T6<'t>) -> T6<'t> {
        add6(&self.eq_stress(eps), &self.overstress(&sub6(eps, q)))
    }
}

/// A constitutive model that can place its potentials on a tape.
pub trait Material: Sync {
    type Bound<'m, 't>: Potentials<'t>
    where
        Self: 'm;

    /// Bind with parameters recorded as constants.
    fn bind<'m, 't>(&'m self, tape: &'t Tape) -> Self::Bound<'m, 't>;

    /// Typical stress magnitude (MPa), used to scale tolerances.
    fn stress_scale(&self) -> f64;
}

pub(crate) fn to6(v: Vec<Var<'_>>) -> T6<'_> {
    v.try_into().expect("six components")
}

pub fn add6<'t>(a: &T6<'t>, b: &T6<'t>) -> T6<'t> {
    std::array::from_fn(|k| a[k] + b[k])
}

pub fn sub6<'t>(a: &T6<'t>, b: &T6<'t>) -> T6<'t> {
    std::array::from_fn(|k| a[k] - b[k])
}

pub fn scale6<'t>(a: &T6<'t>, s: f64) -> T6<'t> {
    a.map(|x| x * s)
}

pub fn const6<'t>(tape: &'t Tape, t: &SymTensor2) -> T6<'t> {
    t.m.map(|v| tape.constant(v))
}

/// Lane-batched constant tensor from a list of tensors.
pub fn const6_lanes<'t>(tape: &'t Tape, ts: &[SymTensor2]) -> T6<'t> {
    std::array::from_fn(|k| {
        let v: Vec<f64> = ts.iter().map(|t| t.m[k]).collect();
        tape.constant_lanes(&v)
    })
}

pub fn value6(v: &T6<'_>) -> SymTensor2 {
    SymTensor2::new(v.map(|x| x.value()))
}

/// Lane `i` of every component.
pub fn lanes6(v: &T6<'_>) -> Vec<SymTensor2> {
    let cols: Vec<Vec<f64>> = v.iter().map(|x| x.values()).collect();
    let n = cols.iter().map(Vec::len).max().unwrap_or(0);
    (0..n)
        .map(|i| {
            SymTensor2::new(std::array::from_fn(|k| {
                let c = &cols[k];
                if c.len() == 1 {
                    c[0]
                } else {
                    c[i]
                }
            }))
        })
        .collect()
}

/// `ψ(ε, q)` in MPa.
pub fn free_energy<M: Material>(m: &M, eps: &SymTensor2, q: &SymTensor2) -> f64 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    b.free_energy(&const6(&tape, eps), &const6(&tape, q))
        .value()
}

/// `σ = ∂ψ/∂ε`.
pub fn stress<M: Material>(m: &M, eps: &SymTensor2, q: &SymTensor2) -> SymTensor2 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    value6(&b.stress(&const6(&tape, eps), &const6(&tape, q)))
}

/// `π = −∂ψ/∂q`.
pub fn internal_force_psi<M: Material>(m: &M, eps: &SymTensor2, q: &SymTensor2) -> SymTensor2 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    value6(&b.overstress(&const6(&tape, &(*eps - *q))))
}

/// `φ(q̇ | ε, q)` in MPa/s.
pub fn dissipation_potential<M: Material>(
    m: &M,
    qdot: &SymTensor2,
    eps: &SymTensor2,
    q: &SymTensor2,
) -> f64 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    b.phi(&const6(&tape, qdot), &const6(&tape, &(*eps - *q)))
        .value()
}

/// `π̂ = ∂φ/∂q̇`.
pub fn internal_force_phi<M: Material>(
    m: &M,
    qdot: &SymTensor2,
    eps: &SymTensor2,
    q: &SymTensor2,
) -> SymTensor2 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    value6(&b.rate_force(&const6(&tape, qdot), &const6(&tape, &(*eps - *q))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Networks see the invariants `(tr, tr², tr⁴)` of their tensor inputs.
    Invariant,
    /// Networks see the normalized Mandel coordinates directly.
    Coordinate,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invariant" => Ok(Mode::Invariant),
            "coordinate" => Ok(Mode::Coordinate),
            _ => Err(Error::validation(format!(
                "unknown mode '{s}' (expected invariant or coordinate)"
            ))),
        }
    }
}

impl Mode {
    pub fn inputs(self) -> usize {
        match self {
            Mode::Invariant => 3,
            Mode::Coordinate => 6,
        }
    }

    /// Default hidden width of every network.
    pub fn default_hidden(self) -> usize {
        match self {
            Mode::Invariant => 10,
            Mode::Coordinate => 20,
        }
    }

    /// Invariant networks must be non-decreasing so that composition with
    /// the convex invariant basis stays convex.
    pub fn non_decreasing(self) -> bool {
        self == Mode::Invariant
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialModel {
    pub mode: Mode,
    pub psi_eq: Ficnn,
    pub psi_ov: Ficnn,
    pub phi: Picnn,
    pub norm: Normalizer,
}

impl PotentialModel {
    pub fn new(mode: Mode, norm: Normalizer, seed: u64) -> Self {
        Self::with_hidden(mode, mode.default_hidden(), norm, seed)
    }

    /// One hidden layer of width `hidden` in every network.
    pub fn with_hidden(mode: Mode, hidden: usize, norm: Normalizer, seed: u64) -> Self {
        let n = mode.inputs();
        let nd = mode.non_decreasing();
        let fic = FicnnArch::new(n, &[hidden], nd);
        let pic = PicnnArch {
            convex_inputs: n,
            nonconvex_inputs: n,
            hidden: vec![hidden],
            nonconvex_hidden: vec![hidden],
            non_decreasing: nd,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi_eq = fic.layout().init(&mut rng);
        let psi_ov = fic.layout().init(&mut rng);
        let phi = pic.layout().init(&mut rng);
        PotentialModel {
            mode,
            psi_eq: Ficnn::with_params(fic.clone(), psi_eq).expect("valid architecture"),
            psi_ov: Ficnn::with_params(fic, psi_ov).expect("valid architecture"),
            phi: Picnn::with_params(pic, phi).expect("valid architecture"),
            norm,
        }
    }

    pub fn num_params(&self) -> usize {
        self.psi_eq.params.len() + self.psi_ov.params.len() + self.phi.params.len()
    }

    /// Concatenated parameters `[ψ^eq | ψ^ov | φ]`.
    pub fn params(&self) -> Vec<f64> {
        [
            &self.psi_eq.params[..],
            &self.psi_ov.params,
            &self.phi.params,
        ]
        .concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let (a, rest) = p.split_at(self.psi_eq.params.len());
        let (b, c) = rest.split_at(self.psi_ov.params.len());
        self.psi_eq.params.copy_from_slice(a);
        self.psi_ov.params.copy_from_slice(b);
        self.phi.params.copy_from_slice(c);
    }

    pub fn nonneg_mask(&self) -> Vec<bool> {
        [
            self.psi_eq.layout.nonneg_mask(),
            self.psi_ov.layout.nonneg_mask(),
            self.phi.layout.nonneg_mask(),
        ]
        .concat()
    }

    pub fn project(&mut self) {
        self.psi_eq.project();
        self.psi_ov.project();
        self.phi.project();
    }

    pub fn is_feasible(&self) -> bool {
        self.psi_eq.layout.is_feasible(&self.psi_eq.params)
            && self.psi_ov.layout.is_feasible(&self.psi_ov.params)
            && self.phi.layout.is_feasible(&self.phi.params)
    }

    /// Bind with parameters as differentiable leaves, in [`Self::params`] order.
    pub fn bind_leaves<'m, 't>(&'m self, tape: &'t Tape) -> (BoundModel<'m, 't>, Vec<Var<'t>>) {
        let leaves = tape.leaves(&self.params());
        (BoundModel::new(self, tape, leaves.clone()), leaves)
    }

    /// Bind to externally created parameter variables.
    pub fn bind_with<'m, 't>(&'m self, tape: &'t Tape, p: Vec<Var<'t>>) -> BoundModel<'m, 't> {
        assert_eq!(p.len(), self.num_params());
        BoundModel::new(self, tape, p)
    }

    /// Network inputs for a (normalized) tensor argument.
    fn features<'t>(&self, t: &T6<'t>) -> Vec<Var<'t>> {
        match self.mode {
            Mode::Invariant => symtensor::invariants(t).to_vec(),
            Mode::Coordinate => t.to_vec(),
        }
    }

    /// Number of leading features whose slope at the origin is removed.
    fn corrected_features(&self) -> usize {
        match self.mode {
            Mode::Invariant => 1,
            Mode::Coordinate => 6,
        }
    }
}

impl Material for PotentialModel {
    type Bound<'m, 't> = BoundModel<'m, 't>;

    fn bind<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        let p = self.params().iter().map(|&v| tape.constant(v)).collect();
        BoundModel::new(self, tape, p)
    }

    fn stress_scale(&self) -> f64 {
        self.norm.s_sig()
    }
}

/// A [`PotentialModel`] with its parameters placed on a tape.
pub struct BoundModel<'m, 't> {
    model: &'m PotentialModel,
    tape: &'t Tape,
    p: Vec<Var<'t>>,
    // N(0) and the origin slope of ψ^eq and ψ^ov, recorded on first use
    origin: [OnceCell<(Var<'t>, Vec<Var<'t>>)>; 2],
}

impl<'m, 't> BoundModel<'m, 't> {
    fn new(model: &'m PotentialModel, tape: &'t Tape, p: Vec<Var<'t>>) -> Self {
        BoundModel {
            model,
            tape,
            p,
            origin: Default::default(),
        }
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.p
    }

    fn split(&self) -> (&[Var<'t>], &[Var<'t>], &[Var<'t>]) {
        let m = self.model;
        let (a, rest) = self.p.split_at(m.psi_eq.params.len());
        let (b, c) = rest.split_at(m.psi_ov.params.len());
        (a, b, c)
    }

    /// `s_ψ [N(x) − N(0) − Σ_k ∂N/∂x_k(0) x_k]` over the corrected features.
    fn branch(&self, which: usize, net: &Ficnn, p: &[Var<'t>], t: &T6<'t>) -> Var<'t> {
        let m = self.model;
        let k = m.corrected_features();
        let (n0, c) = self.origin[which].get_or_init(|| {
            let zero = self.tape.zeros(1);
            let x0: Vec<Var<'t>> = (0..m.mode.inputs()).map(|_| zero.alias()).collect();
            let n0 = net.forward(p, &x0);
            (n0, self.tape.grad_graph(n0, &x0[..k]))
        });
        let x = m.features(&scale6(t, 1.0 / m.norm.s_eps()));
        let n = net.forward(p, &x);
        let n0 = *n0;
        let slope = self.tape.dot(c, &x[..k]);
        (n - n0 - slope) * m.norm.s_psi()
    }
}

impl<'m, 't> Potentials<'t> for BoundModel<'m, 't> {
    fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn psi_eq(&self, eps: &T6<'t>) -> Var<'t> {
        let (p, _, _) = self.split();
        self.branch(0, &self.model.psi_eq, p, eps)
    }

    fn psi_ov(&self, eps_el: &T6<'t>) -> Var<'t> {
        let (_, p, _) = self.split();
        self.branch(1, &self.model.psi_ov, p, eps_el)
    }

    fn phi(&self, qdot: &T6<'t>, eps_el: &T6<'t>) -> Var<'t> {
        let m = self.model;
        let (_, _, p) = self.split();
        let x = m.features(&scale6(qdot, 1.0 / m.norm.s_qdot()));
        let e = scale6(eps_el, 1.0 / m.norm.s_eps());
        let y = match m.mode {
            Mode::Invariant => vec![
                symtensor::trace(&e),
                symtensor::dot(&e, &e),
                symtensor::trace_cube(&e),
            ],
            Mode::Coordinate => e.to_vec(),
        };
        let n = m.phi.forward(p, &x, &y);
        // The zero-rate value and slope depend on ε^el, so they are taken
        // lane by lane.
        let lanes = y.iter().map(Var::lanes).max().unwrap_or(1);
        let zero = self.tape.zeros(lanes);
        let x0: Vec<Var<'t>> = (0..x.len()).map(|_| zero.alias()).collect();
        let n0 = m.phi.forward(p, &x0, &y);
        let k = m.corrected_features();
        let c = self.tape.grad_graph(n0, &x0[..k]);
        let slope = self.tape.dot(&c, &x[..k]);
        (n - n0 - slope) * m.norm.s_phi()
    }
}
