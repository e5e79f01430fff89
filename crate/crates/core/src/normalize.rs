//! Scale/offset pairs that bring data to magnitude one.
//!
//! Every quantity is mapped through `x̃ = (x − m) / s` with `m` the midpoint
//! and `s` the half-width of its observed range. Tensor arguments of the
//! potentials use the scale only: shifting each component by its own offset
//! would not commute with rotations and would break isotropy of the
//! invariant formulation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub scale: f64,
    pub offset: f64,
}

impl Range {
    pub const UNIT: Range = Range {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn fit(name: &str, min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::validation(format!("non-finite range for {name}")));
        }
        // relative test so rounding in accumulated times cannot hide a
        // constant quantity
        if max - min <= 1e-9 * max.abs().max(min.abs()) {
            return Err(Error::validation(format!(
                "degenerate range for {name}: min {min}, max {max}"
            )));
        }
        Ok(Range {
            scale: 0.5 * (max - min),
            offset: 0.5 * (max + min),
        })
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn inverse(&self, x: f64) -> f64 {
        x * self.scale + self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub strain: Range,
    pub stress: Range,
    pub strain_rate: Range,
    pub time: Range,
    pub dt: Range,
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    })
}

impl Normalizer {
    /// All scales one, all offsets zero.
    pub fn unit() -> Self {
        Normalizer {
            strain: Range::UNIT,
            stress: Range::UNIT,
            strain_rate: Range::UNIT,
            time: Range::UNIT,
            dt: Range::UNIT,
        }
    }

    /// Ranges over all steps and tensor components of a dataset. Strain
    /// rates are backward differences.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.sequences.is_empty() {
            return Err(Error::validation(
                "cannot fit normalizer to an empty dataset",
            ));
        }
        let seqs = &ds.sequences;
        let comps = |f: fn(&crate::data::Sequence) -> &Vec<crate::symtensor::SymTensor2>| {
            min_max(
                seqs.iter()
                    .flat_map(move |s| f(s).iter().flat_map(|t| t.components())),
            )
        };
        let (e0, e1) = comps(|s| &s.eps);
        let (s0, s1) = comps(|s| &s.sig);
        let (r0, r1) = min_max(seqs.iter().flat_map(|s| {
            (1..s.len()).flat_map(move |n| {
                let d = (s.eps[n] - s.eps[n - 1]) * (1.0 / s.dt(n));
                d.components()
            })
        }));
        let (t0, t1) = min_max(seqs.iter().flat_map(|s| s.t.iter().copied()));
        let (d0, d1) = min_max(seqs.iter().flat_map(|s| (1..s.len()).map(move |n| s.dt(n))));
        Ok(Normalizer {
            strain: Range::fit("strain", e0, e1)?,
            stress: Range::fit("stress", s0, s1)?,
            strain_rate: Range::fit("strain rate", r0, r1)?,
            time: Range::fit("time", t0, t1)?,
            dt: Range::fit("time increment", d0, d1)?,
        })
    }

    pub fn s_eps(&self) -> f64 {
        self.strain.scale
    }

    pub fn s_sig(&self) -> f64 {
        self.stress.scale
    }

    /// Internal variables share the strain scale.
    pub fn s_q(&self) -> f64 {
        self.strain.scale
    }

    pub fn s_qdot(&self) -> f64 {
        self.strain_rate.scale
    }

    /// Free-energy scale `s_ε s_σ`. Constant output offsets are irrelevant:
    /// the zero-state corrections subtract them exactly.
    pub fn s_psi(&self) -> f64 {
        self.strain.scale * self.stress.scale
    }

    /// Dissipation-potential scale `s_ε̇ s_σ`.
    pub fn s_phi(&self) -> f64 {
        self.strain_rate.scale * self.stress.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Sequence, StrainKind, StressKind};
    use crate::symtensor::SymTensor2;
    use approx::assert_relative_eq;

    fn dataset(times: Vec<f64>, eps11: &[f64], sig11: &[f64]) -> Dataset {
        let eps = eps11
            .iter()
            .map(|&e| SymTensor2::diag(e, 0.0, 0.0))
            .collect();
        let mut s = Sequence::from_path(times, eps);
        for (k, &v) in sig11.iter().enumerate() {
            s.sig[k] = SymTensor2::diag(v, 0.0, 0.0);
        }
        let prov = Provenance {
            stress: StressKind::Ideal,
            strain: StrainKind::Full,
            noise_std: 0.0,
            name: "toy".into(),
        };
        Dataset::new(prov, 0, vec![s])
    }

    #[test]
    fn symmetric_strain_range_has_zero_offset() {
        let ds = dataset(
            vec![0.0, 0.04, 0.1, 0.13],
            &[0.0, 0.02, -0.02, 0.01],
            &[0.0, 30.0, -30.0, 10.0],
        );
        let n = Normalizer::fit(&ds).unwrap();
        assert_eq!(n.strain.offset, 0.0);
        assert_eq!(n.strain.scale, 0.02);
        assert_eq!(n.s_sig(), 30.0);
        assert_relative_eq!(n.s_psi(), 0.6, max_relative = 1e-15);
        assert_eq!(n.s_q(), n.s_eps());
    }

    #[test]
    fn constant_time_step_is_degenerate() {
        let ds = dataset(
            vec![0.0, 0.05, 0.1, 0.15],
            &[0.0, 0.01, -0.01, 0.0],
            &[0.0, 1.0, -1.0, 0.0],
        );
        let err = Normalizer::fit(&ds).unwrap_err();
        assert!(err.to_string().contains("time increment"), "{err}");
    }

    #[test]
    fn affine_map_inverts() {
        let r = Range::fit("x", -3.0, 5.0).unwrap();
        assert_eq!(r.forward(5.0), 1.0);
        assert_eq!(r.forward(-3.0), -1.0);
        assert_eq!(r.inverse(r.forward(0.7)), 0.7);
    }
}
