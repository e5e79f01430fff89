//! Trained potentials on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::{Ficnn, FicnnArch, Layout, Picnn, PicnnArch};
use crate::io;
use crate::normalize::Normalizer;
use crate::potentials::{Mode, PotentialModel};

pub const CKPT_SCHEMA: &str = "gsmnet-ckpt-v1";

/// One weight matrix or bias vector, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub nonneg: bool,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FicnnRecord {
    pub arch: FicnnArch,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicnnRecord {
    pub arch: PicnnArch,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub mode: Mode,
    /// Seed of the initialization the parameters were trained from.
    pub seed: u64,
    /// Training method, if the checkpoint came out of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub normalizer: Normalizer,
    pub psi_eq: FicnnRecord,
    pub psi_ov: FicnnRecord,
    pub phi: PicnnRecord,
}

fn blocks(layout: &Layout, p: &[f64]) -> Vec<BlockRecord> {
    layout
        .blocks
        .iter()
        .map(|b| BlockRecord {
            name: b.name.clone(),
            rows: b.rows,
            cols: b.cols,
            nonneg: b.nonneg,
            values: p[b.range()].chunks(b.cols).map(<[f64]>::to_vec).collect(),
        })
        .collect()
}

/// Flatten records against the expected layout, checking names, shapes and
/// sign constraints.
fn flatten(net: &str, layout: &Layout, records: &[BlockRecord]) -> Result<Vec<f64>> {
    if records.len() != layout.blocks.len() {
        return Err(Error::Format(format!(
            "{net}: {} blocks, architecture needs {}",
            records.len(),
            layout.blocks.len()
        )));
    }
    let mut p = Vec::with_capacity(layout.len);
    for (b, r) in layout.blocks.iter().zip(records) {
        let shape_ok = r.name == b.name
            && r.rows == b.rows
            && r.cols == b.cols
            && r.values.len() == b.rows
            && r.values.iter().all(|row| row.len() == b.cols);
        if !shape_ok {
            return Err(Error::Format(format!(
                "{net}: block '{}' does not match '{}' ({}×{})",
                r.name, b.name, b.rows, b.cols
            )));
        }
        for v in r.values.iter().flatten() {
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "{net}: non-finite entry in '{}'",
                    b.name
                )));
            }
            if b.nonneg && *v < 0.0 {
                return Err(Error::validation(format!(
                    "{net}: block '{}' must be non-negative, found {v}",
                    b.name
                )));
            }
        }
        p.extend(r.values.iter().flatten());
    }
    Ok(p)
}

impl Checkpoint {
    pub fn from_model(model: &PotentialModel, seed: u64, method: Option<String>) -> Self {
        let m = model;
        Checkpoint {
            schema: CKPT_SCHEMA.to_string(),
            mode: m.mode,
            seed,
            method,
            normalizer: m.norm,
            psi_eq: FicnnRecord {
                arch: m.psi_eq.arch.clone(),
                blocks: blocks(&m.psi_eq.layout, &m.psi_eq.params),
            },
            psi_ov: FicnnRecord {
                arch: m.psi_ov.arch.clone(),
                blocks: blocks(&m.psi_ov.layout, &m.psi_ov.params),
            },
            phi: PicnnRecord {
                arch: m.phi.arch.clone(),
                blocks: blocks(&m.phi.layout, &m.phi.params),
            },
        }
    }

    pub fn model(&self) -> Result<PotentialModel> {
        let n = self.mode.inputs();
        let nd = self.mode.non_decreasing();
        let y = match self.mode {
            Mode::Invariant => 3,
            Mode::Coordinate => 6,
        };
        for (name, a) in [("psi_eq", &self.psi_eq.arch), ("psi_ov", &self.psi_ov.arch)] {
            if a.inputs != n || a.non_decreasing != nd {
                return Err(Error::validation(format!(
                    "{name}: architecture does not fit {:?} mode",
                    self.mode
                )));
            }
        }
        let pa = &self.phi.arch;
        if pa.convex_inputs != n || pa.nonconvex_inputs != y || pa.non_decreasing != nd {
            return Err(Error::validation(format!(
                "phi: architecture does not fit {:?} mode",
                self.mode
            )));
        }
        let fic = |name: &str, r: &FicnnRecord| {
            r.arch.validate()?;
            let p = flatten(name, &r.arch.layout(), &r.blocks)?;
            Ficnn::with_params(r.arch.clone(), p)
        };
        let psi_eq = fic("psi_eq", &self.psi_eq)?;
        let psi_ov = fic("psi_ov", &self.psi_ov)?;
        self.phi.arch.validate()?;
        let phi = Picnn::with_params(
            self.phi.arch.clone(),
            flatten("phi", &self.phi.arch.layout(), &self.phi.blocks)?,
        )?;
        Ok(PotentialModel {
            mode: self.mode,
            psi_eq,
            psi_ov,
            phi,
            norm: self.normalizer,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = io::from_json_str(text, CKPT_SCHEMA)?;
        c.model()?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c: Checkpoint = io::read_json(path, CKPT_SCHEMA)?;
        c.model()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::Range;

    fn norm() -> Normalizer {
        Normalizer {
            strain: Range {
                scale: 0.02,
                offset: 0.0,
            },
            stress: Range {
                scale: 20.0,
                offset: 1.0,
            },
            strain_rate: Range {
                scale: 0.05,
                offset: 0.0,
            },
            time: Range {
                scale: 5.0,
                offset: 5.0,
            },
            dt: Range {
                scale: 0.02,
                offset: 0.05,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for mode in [Mode::Invariant, Mode::Coordinate] {
            let m = PotentialModel::new(mode, norm(), 17);
            let c = Checkpoint::from_model(&m, 17, Some("given_q".into()));
            let text = c.to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.model().unwrap(), m);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn blocks_are_row_major() {
        let m = PotentialModel::new(Mode::Invariant, norm(), 2);
        let c = Checkpoint::from_model(&m, 2, None);
        let b = &m.psi_eq.layout.blocks[0];
        let rec = &c.psi_eq.blocks[0];
        assert_eq!(rec.values[1][0], m.psi_eq.params[b.offset + b.cols]);
    }

    #[test]
    fn negative_constrained_weight_is_rejected() {
        let m = PotentialModel::new(Mode::Invariant, norm(), 3);
        let mut c = Checkpoint::from_model(&m, 3, None);
        let b = c.psi_ov.blocks.iter_mut().find(|b| b.nonneg).unwrap();
        b.values[0][0] = -0.1;
        assert!(matches!(c.model(), Err(Error::Validation(_))));
    }

    #[test]
    fn wrong_schema_and_shapes_are_rejected() {
        let m = PotentialModel::new(Mode::Coordinate, norm(), 4);
        let c = Checkpoint::from_model(&m, 4, None);
        let text = c.to_json().unwrap().replace(CKPT_SCHEMA, "gsmnet-ckpt-v0");
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::Schema { .. })
        ));
        let mut bad = c.clone();
        bad.phi.blocks[0].values.pop();
        assert!(bad.model().is_err());
        let mut bad = c;
        bad.mode = Mode::Invariant;
        assert!(bad.model().is_err());
    }
}
