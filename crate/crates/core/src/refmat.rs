//! Nonlinear viscoelastic reference material: a spring in parallel with a
//! Maxwell element whose viscosity softens with the overstress.
//!
//! ```text
//! ψ = ½ ε:ℂ^eq:ε + ½ (ε − q):ℂ^ov:(ε − q)
//! φ = ½ q̇:𝕍:q̇,   𝕍 = [(1 − o) exp(−(‖σ^ov‖/a)^b) + o] 𝕍₀,   σ^ov = ℂ^ov:(ε − q)
//! ```
//!
//! The internal variable `q` is the inelastic strain. The viscosity is
//! evaluated at the current state, so time integration is fully implicit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::potentials::{Material, Potentials, T6};
use crate::symtensor::{self, IsoStiffness, SymTensor2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefMaterialParams {
    pub k_eq: f64,
    pub g_eq: f64,
    pub k_ov: f64,
    pub g_ov: f64,
    pub eta_k: f64,
    pub eta_d: f64,
    pub a: f64,
    pub b: f64,
    pub o: f64,
}

impl Default for RefMaterialParams {
    fn default() -> Self {
        RefMaterialParams {
            k_eq: 500.0,
            g_eq: 300.0,
            k_ov: 1000.0,
            g_ov: 700.0,
            eta_k: 400.0,
            eta_d: 200.0,
            a: 10.0,
            b: 2.0,
            o: 0.1,
        }
    }
}

impl RefMaterialParams {
    /// Same moduli with a stress-independent viscosity `𝕍₀`.
    pub fn constant_viscosity(self) -> Self {
        RefMaterialParams { o: 1.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_eq", self.k_eq),
            ("g_eq", self.g_eq),
            ("k_ov", self.k_ov),
            ("g_ov", self.g_ov),
            ("eta_k", self.eta_k),
            ("eta_d", self.eta_d),
            ("a", self.a),
            ("b", self.b),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!(
                    "reference parameter {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.o > 0.0 && self.o <= 1.0) {
            return Err(Error::validation(format!(
                "reference parameter o must lie in (0, 1], got {}",
                self.o
            )));
        }
        Ok(())
    }

    pub fn c_eq(&self) -> IsoStiffness {
        IsoStiffness::new(self.k_eq, self.g_eq)
    }

    pub fn c_ov(&self) -> IsoStiffness {
        IsoStiffness::new(self.k_ov, self.g_ov)
    }

    pub fn v0(&self) -> IsoStiffness {
        IsoStiffness::new(self.eta_k, self.eta_d)
    }

    /// Relaxation times `(τ_D, τ_K) = (η_D/G_ov, η_K/K_ov)` of the linear limit.
    pub fn relaxation_times(&self) -> (f64, f64) {
        (self.eta_d / self.g_ov, self.eta_k / self.k_ov)
    }

    /// Scalar factor multiplying `𝕍₀`; lies in `[o, 1]`.
    pub fn viscosity_factor(&self, eps: &SymTensor2, eps_in: &SymTensor2) -> f64 {
        let s = self.c_ov().apply(&(*eps - *eps_in));
        let x = (s.norm() / self.a).powf(self.b);
        (1.0 - self.o) * (-x).exp() + self.o
    }

    pub fn viscosity(&self, eps: &SymTensor2, eps_in: &SymTensor2) -> IsoStiffness {
        self.v0().scaled(self.viscosity_factor(eps, eps_in))
    }

    pub fn free_energy(&self, eps: &SymTensor2, eps_in: &SymTensor2) -> f64 {
        let el = *eps - *eps_in;
        0.5 * eps.dot(&self.c_eq().apply(eps)) + 0.5 * el.dot(&self.c_ov().apply(&el))
    }

    pub fn dissipation_potential(
        &self,
        qdot: &SymTensor2,
        eps: &SymTensor2,
        eps_in: &SymTensor2,
    ) -> f64 {
        0.5 * qdot.dot(&self.viscosity(eps, eps_in).apply(qdot))
    }
}

impl Material for RefMaterialParams {
    type Bound<'m, 't> = RefBound<'m, 't>;

    fn bind<'m, 't>(&'m self, tape: &'t Tape) -> RefBound<'m, 't> {
        RefBound { p: self, tape }
    }

    /// Stress at the 2% strain cap in pure shear of both branches.
    fn stress_scale(&self) -> f64 {
        0.04 * (self.g_eq + self.g_ov)
    }
}

pub struct RefBound<'m, 't> {
    p: &'m RefMaterialParams,
    tape: &'t Tape,
}

fn quad<'t>(c: IsoStiffness, t: &T6<'t>) -> Var<'t> {
    symtensor::dot(t, &symtensor::apply_iso(c.bulk, c.shear, t)) * 0.5
}

impl<'m, 't> Potentials<'t> for RefBound<'m, 't> {
    fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn psi_eq(&self, eps: &T6<'t>) -> Var<'t> {
        quad(self.p.c_eq(), eps)
    }

    fn psi_ov(&self, eps_el: &T6<'t>) -> Var<'t> {
        quad(self.p.c_ov(), eps_el)
    }

    fn phi(&self, qdot: &T6<'t>, eps_el: &T6<'t>) -> Var<'t> {
        let p = self.p;
        let s = symtensor::apply_iso(p.k_ov, p.g_ov, eps_el);
        // ‖σ^ov/a‖^b written through the squared norm, smooth at zero for b ≥ 2
        let n2 = symtensor::dot(&s, &s) * (1.0 / (p.a * p.a));
        let x = if p.b == 2.0 { n2 } else { n2.powf(0.5 * p.b) };
        let factor = (-x).exp() * (1.0 - p.o) + p.o;
        quad(p.v0(), qdot) * factor
    }
}
