//! Unconstrained auxiliary networks: a tanh feedforward net and an LSTM cell.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::icnn::Layout;

/// Dense net with tanh hidden layers and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub layout: Layout,
}

impl Mlp {
    /// `sizes = [inputs, hidden.., outputs]`.
    pub fn new(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2);
        let mut layout = Layout::default();
        for (n, w) in sizes.windows(2).enumerate() {
            layout.weight(format!("W{n}"), w[1], w[0], false);
            layout.bias(format!("b{n}"), w[1]);
        }
        Mlp {
            sizes: sizes.to_vec(),
            layout,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.layout.init(rng)
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(p.len(), self.layout.len);
        assert_eq!(x.len(), self.sizes[0]);
        let tape = x[0].tape();
        let layers = self.sizes.len() - 1;
        let mut h = x.to_vec();
        for n in 0..layers {
            let w = &self.layout.blocks[2 * n];
            let b = &self.layout.blocks[2 * n + 1];
            h = (0..w.rows)
                .map(|j| {
                    let row = &p[w.offset + j * w.cols..w.offset + (j + 1) * w.cols];
                    let z = tape.dot(row, &h) + p[b.offset + j];
                    if n + 1 < layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
        }
        h
    }

    pub fn eval(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let pv: Vec<Var> = p.iter().map(|&v| tape.constant(v)).collect();
        let xv: Vec<Var> = x.iter().map(|&v| tape.constant(v)).collect();
        self.forward(&pv, &xv).iter().map(Var::value).collect()
    }
}

/// LSTM cell with gate order (input, forget, candidate, output).
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)   f = σ(W_f x + U_f h + b_f)
/// g = tanh(W_g x + U_g h + b_g)   o = σ(W_o x + U_o h + b_o)
/// c' = f c + i g   h' = o tanh(c')
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub inputs: usize,
    pub hidden: usize,
    pub layout: Layout,
}

impl Lstm {
    pub fn new(inputs: usize, hidden: usize) -> Self {
        let mut layout = Layout::default();
        // one row per gate unit acting on [x, h]
        layout.weight("W".into(), 4 * hidden, inputs + hidden, false);
        layout.bias("b".into(), 4 * hidden);
        Lstm {
            inputs,
            hidden,
            layout,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Glorot-uniform weights, zero biases except a forget-gate bias of one.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = self.layout.init(rng);
        let b = &self.layout.blocks[1];
        for x in &mut p[b.offset + self.hidden..b.offset + 2 * self.hidden] {
            *x = 1.0;
        }
        p
    }

    pub fn step<'t>(
        &self,
        p: &[Var<'t>],
        x: &[Var<'t>],
        h: &[Var<'t>],
        c: &[Var<'t>],
    ) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        assert_eq!(x.len(), self.inputs);
        assert_eq!(h.len(), self.hidden);
        let tape = x[0].tape();
        let w = &self.layout.blocks[0];
        let b = &self.layout.blocks[1];
        let xh: Vec<Var<'t>> = x.iter().chain(h).copied().collect();
        let pre = |j: usize| {
            let row = &p[w.offset + j * w.cols..w.offset + (j + 1) * w.cols];
            tape.dot(row, &xh) + p[b.offset + j]
        };
        let nh = self.hidden;
        let mut h_new = Vec::with_capacity(nh);
        let mut c_new = Vec::with_capacity(nh);
        for k in 0..nh {
            let i = pre(k).sigmoid();
            let f = pre(nh + k).sigmoid();
            let g = pre(2 * nh + k).tanh();
            let o = pre(3 * nh + k).sigmoid();
            let cn = f * c[k] + i * g;
            h_new.push(o * cn.tanh());
            c_new.push(cn);
        }
        (h_new, c_new)
    }
}
