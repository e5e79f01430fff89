//! Strain/stress sequences and dataset files.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::symtensor::SymTensor2;

pub const DATA_SCHEMA: &str = "gsmnet-data-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressKind {
    Ideal,
    Noisy,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrainKind {
    Full,
    Plane,
}

impl fmt::Display for StressKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StressKind::Ideal => "ideal",
            StressKind::Noisy => "noisy",
            StressKind::Predicted => "predicted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stress: StressKind,
    pub strain: StrainKind,
    #[serde(default)]
    pub noise_std: f64,
    /// Conventional label such as `D^ideal_1x200`.
    pub name: String,
}

/// One time-discretized path. Index 0 is the rest state at `t = 0`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub t: Vec<f64>,
    pub eps: Vec<SymTensor2>,
    pub sig: Vec<SymTensor2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<SymTensor2>>,
    /// Noise-free stresses, kept alongside noisy labels as ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig_ideal: Option<Vec<SymTensor2>>,
    /// Per-step Biot residual norms of a prediction (MPa).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<Vec<usize>>,
}

impl Sequence {
    /// A path without labels; stresses are zero-filled.
    pub fn from_path(t: Vec<f64>, eps: Vec<SymTensor2>) -> Self {
        let n = t.len();
        Sequence {
            t,
            eps,
            sig: vec![SymTensor2::ZERO; n],
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Number of time increments.
    pub fn steps(&self) -> usize {
        self.t.len().saturating_sub(1)
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.t[n] - self.t[n - 1]
    }

    /// Noise-free stresses when available, else the stored labels.
    pub fn reference_stress(&self) -> &[SymTensor2] {
        self.sig_ideal.as_deref().unwrap_or(&self.sig)
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let n = self.t.len();
        let ctx = |msg: String| Error::validation(format!("sequence {index}: {msg}"));
        if n < 2 {
            return Err(ctx("needs at least two states".into()));
        }
        let mut lens = vec![("eps", self.eps.len()), ("sig", self.sig.len())];
        if let Some(q) = &self.q {
            lens.push(("q", q.len()));
        }
        if let Some(s) = &self.sig_ideal {
            lens.push(("sig_ideal", s.len()));
        }
        if let Some(r) = &self.residual {
            lens.push(("residual", r.len()));
        }
        if let Some(r) = &self.iterations {
            lens.push(("iterations", r.len()));
        }
        for (what, len) in lens {
            if len != n {
                return Err(ctx(format!(
                    "channel '{what}' has {len} entries, expected {n}"
                )));
            }
        }
        if let Some(k) = (1..n).find(|&k| !(self.t[k] > self.t[k - 1])) {
            return Err(ctx(format!("times not strictly increasing at index {k}")));
        }
        if self.t.iter().any(|x| !x.is_finite())
            || self.eps.iter().chain(&self.sig).any(|x| !x.is_finite())
        {
            return Err(ctx("non-finite entries".into()));
        }
        if self.eps[0] != SymTensor2::ZERO {
            return Err(ctx("path must start from zero strain".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: String,
    pub provenance: Provenance,
    pub seed: u64,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(provenance: Provenance, seed: u64, sequences: Vec<Sequence>) -> Self {
        Dataset {
            schema: DATA_SCHEMA.to_string(),
            provenance,
            seed,
            sequences,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::validation("dataset has no sequences"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(())
    }

    pub fn has_q(&self) -> bool {
        self.sequences.iter().all(|s| s.q.is_some())
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(Sequence::steps).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = io::from_json_str(text, DATA_SCHEMA)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ds: Dataset = io::read_json(path, DATA_SCHEMA)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Label like `D^ideal_1x200`.
    pub fn conventional_name(stress: StressKind, sequences: usize, steps: usize) -> String {
        format!("D^{stress}_{sequences}x{steps}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let t = vec![0.0, 0.05, 0.11];
        let eps = vec![
            SymTensor2::ZERO,
            SymTensor2::new([1e-3, 0.0, 0.0, 0.0, 0.0, 2e-4]),
            SymTensor2::new([2e-3, -1e-4, 0.0, 0.0, 0.0, 3e-4]),
        ];
        let mut s = Sequence::from_path(t, eps);
        s.sig[1].m[0] = 0.1 + 0.2;
        s.q = Some(vec![SymTensor2::ZERO; 3]);
        let prov = Provenance {
            stress: StressKind::Ideal,
            strain: StrainKind::Full,
            noise_std: 0.0,
            name: Dataset::conventional_name(StressKind::Ideal, 1, 2),
        };
        Dataset::new(prov, 7, vec![s])
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = toy();
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(
            back.sequences[0].sig[1].m[0].to_bits(),
            (0.1f64 + 0.2).to_bits()
        );
        assert_eq!(ds.provenance.name, "D^ideal_1x2");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = toy().to_json().unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Dataset::from_json(cut), Err(Error::Format(_))));
    }

    #[test]
    fn foreign_version_is_rejected() {
        let text = toy()
            .to_json()
            .unwrap()
            .replace(DATA_SCHEMA, "gsmnet-data-v0");
        match Dataset::from_json(&text) {
            Err(Error::Schema { found, .. }) => assert_eq!(found, "gsmnet-data-v0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_checks() {
        let mut ds = toy();
        ds.sequences[0].t[2] = 0.05;
        assert!(ds.validate().is_err());
        let mut ds = toy();
        ds.sequences[0].sig.pop();
        assert!(ds.validate().is_err());
        let mut ds = toy();
        ds.sequences[0].eps[0].m[0] = 1e-3;
        assert!(ds.validate().is_err());
    }
}
