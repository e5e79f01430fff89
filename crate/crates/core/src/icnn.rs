//! Fully and partially input-convex networks.
//!
//! Parameters live in one flat vector described by a [`Layout`] of named,
//! row-major blocks. Sign constraints are per block and enforced by
//! [`Layout::project`], which clamps constrained entries at zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Softplus => x.softplus(),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// A named matrix (or bias vector, `cols == 1`) inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub nonneg: bool,
    pub kind: BlockKind,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

impl Layout {
    fn push(&mut self, name: String, rows: usize, cols: usize, nonneg: bool, kind: BlockKind) {
        self.blocks.push(Block {
            name,
            rows,
            cols,
            offset: self.len,
            nonneg,
            kind,
        });
        self.len += rows * cols;
    }

    pub(crate) fn weight(&mut self, name: String, rows: usize, cols: usize, nonneg: bool) {
        self.push(name, rows, cols, nonneg, BlockKind::Weight);
    }

    pub(crate) fn bias(&mut self, name: String, rows: usize) {
        self.push(name, rows, 1, false, BlockKind::Bias);
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Constrained weights ~ U[0, g], free weights ~ U[−g, g] with
    /// g = √(6 / (rows + cols)); biases start at zero.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for b in &self.blocks {
            if b.kind == BlockKind::Bias {
                continue;
            }
            let g = (6.0 / (b.rows + b.cols) as f64).sqrt();
            for x in &mut p[b.range()] {
                *x = if b.nonneg {
                    rng.gen_range(0.0..g)
                } else {
                    rng.gen_range(-g..g)
                };
            }
        }
        p
    }

    /// Clamp every constrained entry at zero.
    pub fn project(&self, p: &mut [f64]) {
        for b in self.blocks.iter().filter(|b| b.nonneg) {
            for x in &mut p[b.range()] {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
    }

    pub fn is_feasible(&self, p: &[f64]) -> bool {
        self.blocks
            .iter()
            .filter(|b| b.nonneg)
            .all(|b| p[b.range()].iter().all(|&x| x >= 0.0))
    }

    /// Mask of entries that carry a sign constraint.
    pub fn nonneg_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len];
        for b in self.blocks.iter().filter(|b| b.nonneg) {
            m[b.range()].fill(true);
        }
        m
    }
}

/// `W x + b` for a row-major block, one output per row.
fn affine<S: Scalar>(p: &[S], w: &Block, x: &[S], terms: &mut [Vec<S>]) {
    debug_assert_eq!(w.cols, x.len());
    for (r, t) in terms.iter_mut().enumerate().take(w.rows) {
        let row = &p[w.offset + r * w.cols..w.offset + (r + 1) * w.cols];
        t.push(S::dot(row, x));
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

/// Architecture of a fully input-convex network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FicnnArch {
    pub inputs: usize,
    /// Layer widths including the scalar output layer.
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub non_decreasing: bool,
}

impl FicnnArch {
    /// Softplus hidden layers and a linear scalar output.
    pub fn new(inputs: usize, hidden: &[usize], non_decreasing: bool) -> Self {
        let mut widths = hidden.to_vec();
        widths.push(1);
        let mut activations = vec![Activation::Softplus; hidden.len()];
        activations.push(Activation::Linear);
        FicnnArch {
            inputs,
            widths,
            activations,
            non_decreasing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::validation("FICNN needs inputs and non-empty layers"));
        }
        check_len(
            "FICNN activations",
            self.widths.len(),
            self.activations.len(),
        )?;
        check_len("FICNN output width", 1, *self.widths.last().unwrap())?;
        let convex_ok = |a: &Activation| matches!(a, Activation::Softplus | Activation::Linear);
        if !self.activations[..self.widths.len() - 1]
            .iter()
            .all(convex_ok)
            || !convex_ok(self.activations.last().unwrap())
        {
            return Err(Error::validation(
                "FICNN activations must be convex and non-decreasing",
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout::default();
        let mut prev = 0;
        for (k, &w) in self.widths.iter().enumerate() {
            let n = k + 1;
            if k > 0 {
                l.weight(format!("W{n}u"), w, prev, true);
            }
            l.weight(format!("W{n}i"), w, self.inputs, self.non_decreasing);
            l.bias(format!("b{n}"), w);
            prev = w;
        }
        l
    }
}

/// Fully input-convex network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ficnn {
    pub arch: FicnnArch,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl Ficnn {
    pub fn new(arch: FicnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Ficnn {
            arch,
            layout,
            params,
        })
    }

    pub fn with_params(arch: FicnnArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        check_len("FICNN parameters", layout.len, params.len())?;
        Ok(Ficnn {
            arch,
            layout,
            params,
        })
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &[S]) -> S {
        let blocks = &self.layout.blocks;
        let mut bi = 0;
        let mut u: Vec<S> = Vec::new();
        for (k, &w) in self.arch.widths.iter().enumerate() {
            let mut terms: Vec<Vec<S>> = (0..w).map(|_| Vec::with_capacity(3)).collect();
            if k > 0 {
                affine(p, &blocks[bi], &u, &mut terms);
                bi += 1;
            }
            affine(p, &blocks[bi], x, &mut terms);
            let b = &blocks[bi + 1];
            bi += 2;
            let act = self.arch.activations[k];
            u = terms
                .into_iter()
                .enumerate()
                .map(|(r, mut t)| {
                    t.push(p[b.offset + r]);
                    act.apply(S::sum(&t))
                })
                .collect();
        }
        u[0]
    }

    /// Plain evaluation with the stored parameters.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_len("FICNN input", self.arch.inputs, x.len())?;
        Ok(self.forward(&self.params, x))
    }

    pub fn project(&mut self) {
        self.layout.project(&mut self.params);
    }
}

/// Architecture of a partially input-convex network: convex in `x`,
/// arbitrary in `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicnnArch {
    pub convex_inputs: usize,
    pub nonconvex_inputs: usize,
    /// Widths of the convex path, excluding the scalar output layer.
    pub hidden: Vec<usize>,
    /// Widths of the non-convex path (same depth as `hidden`).
    pub nonconvex_hidden: Vec<usize>,
    pub non_decreasing: bool,
}

impl PicnnArch {
    pub fn validate(&self) -> Result<()> {
        if self.convex_inputs == 0 || self.nonconvex_inputs == 0 {
            return Err(Error::validation("PICNN needs both input groups"));
        }
        check_len(
            "PICNN non-convex path depth",
            self.hidden.len(),
            self.nonconvex_hidden.len(),
        )?;
        if self.hidden.contains(&0) || self.nonconvex_hidden.contains(&0) {
            return Err(Error::validation("PICNN layer widths must be positive"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = self.hidden.clone();
        w.push(1);
        w
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout::default();
        let nx = self.convex_inputs;
        let widths = self.widths();
        for (k, &w) in widths.iter().enumerate() {
            let n = k + 1;
            let nv = if k == 0 {
                self.nonconvex_inputs
            } else {
                self.nonconvex_hidden[k - 1]
            };
            if k > 0 {
                let nu = widths[k - 1];
                l.weight(format!("l{n}.Wuu"), w, nu, true);
                l.weight(format!("l{n}.Wuv_gate"), nu, nv, false);
                l.bias(format!("l{n}.buv_gate"), nu);
            }
            l.weight(format!("l{n}.Wui"), w, nx, self.non_decreasing);
            l.weight(format!("l{n}.Wiv_gate"), nx, nv, false);
            l.bias(format!("l{n}.biv_gate"), nx);
            l.weight(format!("l{n}.Wuv"), w, nv, false);
            l.bias(format!("l{n}.bu"), w);
            if k < self.hidden.len() {
                l.weight(format!("l{n}.Wvv"), self.nonconvex_hidden[k], nv, false);
                l.bias(format!("l{n}.bv"), self.nonconvex_hidden[k]);
            }
        }
        l
    }
}

/// Partially input-convex network with its parameters.
///
/// Layer recursion, with gates `g(·) = softplus(·)` so both gated products
/// stay non-negative multiples of their convex inputs:
///
/// ```text
/// v_0 = y,  v_l = tanh(W^vv_l v_{l-1} + b^v_l)
/// u_l = act(W^uu_l [u_{l-1} ∘ g(W̃^uv_l v_{l-1} + b̃^uv_l)]
///         + W^ui_l [x ∘ g(W̃^iv_l v_{l-1} + b̃^iv_l)] + W^uv_l v_{l-1} + b^u_l)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Picnn {
    pub arch: PicnnArch,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl Picnn {
    pub fn new(arch: PicnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Picnn {
            arch,
            layout,
            params,
        })
    }

    pub fn with_params(arch: PicnnArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        check_len("PICNN parameters", layout.len, params.len())?;
        Ok(Picnn {
            arch,
            layout,
            params,
        })
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &[S], y: &[S]) -> S {
        let blocks = &self.layout.blocks;
        let mut bi = 0;
        let mut next = || {
            bi += 1;
            &blocks[bi - 1]
        };
        let widths = self.arch.widths();
        let last = widths.len() - 1;
        let mut u: Vec<S> = Vec::new();
        let mut v: Vec<S> = y.to_vec();
        for (k, &w) in widths.iter().enumerate() {
            let mut terms: Vec<Vec<S>> = (0..w).map(|_| Vec::with_capacity(4)).collect();
            if k > 0 {
                let wuu = next();
                let gate_w = next();
                let gate_b = next();
                let gated = gate(p, gate_w, gate_b, &v, &u);
                affine(p, wuu, &gated, &mut terms);
            }
            let wui = next();
            let gate_w = next();
            let gate_b = next();
            let gated = gate(p, gate_w, gate_b, &v, x);
            affine(p, wui, &gated, &mut terms);
            affine(p, next(), &v, &mut terms);
            let bu = next();
            let act = if k == last {
                Activation::Linear
            } else {
                Activation::Softplus
            };
            let new_u: Vec<S> = terms
                .into_iter()
                .enumerate()
                .map(|(r, mut t)| {
                    t.push(p[bu.offset + r]);
                    act.apply(S::sum(&t))
                })
                .collect();
            if k < last {
                let wvv = next();
                let bv = next();
                let mut vt: Vec<Vec<S>> = (0..wvv.rows).map(|_| Vec::with_capacity(2)).collect();
                affine(p, wvv, &v, &mut vt);
                v = vt
                    .into_iter()
                    .enumerate()
                    .map(|(r, mut t)| {
                        t.push(p[bv.offset + r]);
                        S::sum(&t).tanh()
                    })
                    .collect();
            }
            u = new_u;
        }
        u[0]
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_len("PICNN convex input", self.arch.convex_inputs, x.len())?;
        check_len(
            "PICNN non-convex input",
            self.arch.nonconvex_inputs,
            y.len(),
        )?;
        Ok(self.forward(&self.params, x, y))
    }

    pub fn project(&mut self) {
        self.layout.project(&mut self.params);
    }
}

/// `z ∘ softplus(W v + b)`.
fn gate<S: Scalar>(p: &[S], w: &Block, b: &Block, v: &[S], z: &[S]) -> Vec<S> {
    let mut t: Vec<Vec<S>> = (0..w.rows).map(|_| Vec::with_capacity(2)).collect();
    affine(p, w, v, &mut t);
    t.into_iter()
        .zip(z)
        .enumerate()
        .map(|(r, (mut t, &zr))| {
            t.push(p[b.offset + r]);
            zr * S::sum(&t).softplus()
        })
        .collect()
}
