//! Symmetric second-order tensors in Mandel notation.
//!
//! Coordinates are ordered `(T11, T22, T33, √2 T23, √2 T13, √2 T12)`, so the
//! Frobenius product of two tensors is the dot product of their 6-vectors.

use std::f64::consts::SQRT_2;
use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Mandel coordinate labels, in storage order.
pub const COMPONENTS: [&str; 6] = ["11", "22", "33", "23", "13", "12"];

/// Index pairs `(i, j)` of each Mandel coordinate.
const PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymTensor2 {
    pub m: [f64; 6],
}

impl SymTensor2 {
    pub const ZERO: SymTensor2 = SymTensor2 { m: [0.0; 6] };

    pub const fn new(m: [f64; 6]) -> Self {
        SymTensor2 { m }
    }

    pub fn identity() -> Self {
        Self::new([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Self::new([a, b, c, 0.0, 0.0, 0.0])
    }

    /// Build from a symmetric 3×3 matrix. Off-diagonal pairs must agree to
    /// 1e-12 relative to the largest entry.
    pub fn from_matrix(a: &[[f64; 3]; 3]) -> Result<Self> {
        let scale = a.iter().flatten().fold(0.0f64, |s, x| s.max(x.abs()));
        for (i, j) in [(1, 2), (0, 2), (0, 1)] {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * scale {
                return Err(Error::validation(format!(
                    "matrix is not symmetric: entry ({},{}) = {} but ({},{}) = {}",
                    i + 1,
                    j + 1,
                    a[i][j],
                    j + 1,
                    i + 1,
                    a[j][i]
                )));
            }
        }
        let mut m = [0.0; 6];
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            m[k] = if i == j {
                a[i][i]
            } else {
                SQRT_2 * 0.5 * (a[i][j] + a[j][i])
            };
        }
        Ok(Self { m })
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let mut a = [[0.0; 3]; 3];
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            if i == j {
                a[i][i] = self.m[k];
            } else {
                a[i][j] = self.m[k] / SQRT_2;
                a[j][i] = a[i][j];
            }
        }
        a
    }

    /// Tensor component `T_ij` (not the Mandel coordinate).
    pub fn component(&self, k: usize) -> f64 {
        if k < 3 {
            self.m[k]
        } else {
            self.m[k] / SQRT_2
        }
    }

    /// Build from tensor components ordered like [`COMPONENTS`].
    pub fn from_components(c: [f64; 6]) -> Self {
        Self::new([
            c[0],
            c[1],
            c[2],
            SQRT_2 * c[3],
            SQRT_2 * c[4],
            SQRT_2 * c[5],
        ])
    }

    pub fn components(&self) -> [f64; 6] {
        std::array::from_fn(|k| self.component(k))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.m, &other.m)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn trace(&self) -> f64 {
        trace(&self.m)
    }

    pub fn dev(&self) -> Self {
        let p = self.trace() / 3.0;
        let mut m = self.m;
        for x in &mut m[..3] {
            *x -= p;
        }
        Self { m }
    }

    pub fn square(&self) -> Self {
        Self::new(square(&self.m))
    }

    /// Matrix product `self · other`, symmetrized (exact when they commute).
    pub fn sym_product(&self, other: &Self) -> Self {
        let (a, b) = (self.to_matrix(), other.to_matrix());
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let ab: f64 = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                let ba: f64 = (0..3).map(|k| b[i][k] * a[k][j]).sum();
                c[i][j] = 0.5 * (ab + ba);
            }
        }
        Self::from_matrix(&c).expect("symmetrized product")
    }

    /// `(tr t, tr t², tr t⁴)`.
    pub fn invariants(&self) -> [f64; 3] {
        invariants(&self.m)
    }

    /// Gradients of [`SymTensor2::invariants`]: `(I, 2t, 4t³)`.
    pub fn invariant_gradients(&self) -> [SymTensor2; 3] {
        let t2 = self.square();
        [Self::identity(), *self * 2.0, self.sym_product(&t2) * 4.0]
    }

    pub fn trace_cube(&self) -> f64 {
        trace_cube(&self.m)
    }

    /// Rotated tensor `R t Rᵀ`.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        let a = self.to_matrix();
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += r[i][k] * a[k][l] * r[j][l];
                    }
                }
                c[i][j] = s;
            }
        }
        // symmetric up to rounding; average the off-diagonal pairs
        for (i, j) in [(1, 2), (0, 2), (0, 1)] {
            let v = 0.5 * (c[i][j] + c[j][i]);
            c[i][j] = v;
            c[j][i] = v;
        }
        Self::from_matrix(&c).expect("symmetrized rotation")
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0f64, |s, x| s.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for SymTensor2 {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.m[k]
    }
}

impl Add for SymTensor2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(std::array::from_fn(|k| self.m[k] + o.m[k]))
    }
}

impl AddAssign for SymTensor2 {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for SymTensor2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(std::array::from_fn(|k| self.m[k] - o.m[k]))
    }
}

impl Mul<f64> for SymTensor2 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.m.map(|x| x * s))
    }
}

impl Neg for SymTensor2 {
    type Output = Self;
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl From<[f64; 6]> for SymTensor2 {
    fn from(m: [f64; 6]) -> Self {
        Self::new(m)
    }
}

pub fn dot<S: Scalar>(a: &[S; 6], b: &[S; 6]) -> S {
    S::dot(a, b)
}

pub fn trace<S: Scalar>(m: &[S; 6]) -> S {
    m[0] + m[1] + m[2]
}

/// Mandel coordinates of `t²`.
pub fn square<S: Scalar>(m: &[S; 6]) -> [S; 6] {
    let h = FRAC_1_SQRT_2;
    [
        m[0] * m[0] + (m[5] * m[5] + m[4] * m[4]) * 0.5,
        m[1] * m[1] + (m[5] * m[5] + m[3] * m[3]) * 0.5,
        m[2] * m[2] + (m[4] * m[4] + m[3] * m[3]) * 0.5,
        m[5] * m[4] * h + m[3] * (m[1] + m[2]),
        m[4] * (m[0] + m[2]) + m[5] * m[3] * h,
        m[5] * (m[0] + m[1]) + m[4] * m[3] * h,
    ]
}

/// `(tr t, tr t², tr t⁴)`, with `tr t⁴ = ‖t²‖²`.
pub fn invariants<S: Scalar>(m: &[S; 6]) -> [S; 3] {
    let sq = square(m);
    [trace(m), dot(m, m), dot(&sq, &sq)]
}

/// `tr t³ = t : t²`.
pub fn trace_cube<S: Scalar>(m: &[S; 6]) -> S {
    dot(m, &square(m))
}

/// Recover `tr t³` from `(tr t, tr t², tr t⁴)` through the Cayley–Hamilton
/// theorem. Undetermined when `tr t = 0`, where the cube enters only through
/// its square.
pub fn trace_cube_from_invariants(i1: f64, i2: f64, i4: f64) -> Option<f64> {
    if i1 == 0.0 {
        return None;
    }
    let e2 = 0.5 * (i1 * i1 - i2);
    let p4_rest = (i1.powi(4) - 3.0 * i1 * i1 * i2) / 6.0;
    Some((i4 + e2 * i2 - p4_rest) / (4.0 * i1 / 3.0))
}

/// Isotropic rank-4 tensor `3K 𝕂 + 2G 𝔻`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoStiffness {
    pub bulk: f64,
    pub shear: f64,
}

impl IsoStiffness {
    pub const fn new(bulk: f64, shear: f64) -> Self {
        IsoStiffness { bulk, shear }
    }

    /// `(3K 𝕂 + 2G 𝔻) : t`.
    pub fn apply(&self, t: &SymTensor2) -> SymTensor2 {
        SymTensor2::new(apply_iso(self.bulk, self.shear, &t.m))
    }

    /// Dense 6×6 Mandel matrix.
    pub fn matrix(&self) -> [[f64; 6]; 6] {
        let mut c = [[0.0; 6]; 6];
        for (j, col) in (0..6).map(|j| {
            let mut e = [0.0; 6];
            e[j] = 1.0;
            (j, apply_iso(self.bulk, self.shear, &e))
        }) {
            for i in 0..6 {
                c[i][j] = col[i];
            }
        }
        c
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.bulk * s, self.shear * s)
    }
}

/// `(3K 𝕂 + 2G 𝔻) : t` on Mandel coordinates.
pub fn apply_iso<S: Scalar>(bulk: f64, shear: f64, m: &[S; 6]) -> [S; 6] {
    let tr = trace(m);
    let sph = tr * (bulk - 2.0 * shear / 3.0);
    let g2 = 2.0 * shear;
    [
        m[0] * g2 + sph,
        m[1] * g2 + sph,
        m[2] * g2 + sph,
        m[3] * g2,
        m[4] * g2,
        m[5] * g2,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    fn tr(a: &[[f64; 3]; 3]) -> f64 {
        a[0][0] + a[1][1] + a[2][2]
    }

    fn random_tensor(rng: &mut impl Rng) -> SymTensor2 {
        SymTensor2::new(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn matrix_round_trip_examples() {
        assert_eq!(
            SymTensor2::from_matrix(&[[0.0; 3]; 3]).unwrap(),
            SymTensor2::ZERO
        );
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(
            SymTensor2::from_matrix(&id).unwrap().m,
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
        let mut a = [[0.0; 3]; 3];
        a[1][2] = 1.0;
        a[2][1] = 1.0;
        let t = SymTensor2::from_matrix(&a).unwrap();
        assert_eq!(t.m, [0.0, 0.0, 0.0, SQRT_2, 0.0, 0.0]);
        assert_eq!(t.to_matrix(), a);
    }

    #[test]
    fn non_symmetric_matrix_is_rejected() {
        let a = [[1.0, 0.2, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            SymTensor2::from_matrix(&a),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn invariant_examples() {
        assert_eq!(SymTensor2::identity().invariants(), [3.0, 3.0, 3.0]);
        assert_eq!(
            SymTensor2::diag(1.0, 2.0, 3.0).invariants(),
            [6.0, 14.0, 98.0]
        );
        assert_eq!(SymTensor2::ZERO.invariants(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn invariant_gradient_examples() {
        let [g1, g2, g4] = SymTensor2::ZERO.invariant_gradients();
        assert_eq!(
            (g1, g2, g4),
            (SymTensor2::identity(), SymTensor2::ZERO, SymTensor2::ZERO)
        );
        let id = SymTensor2::identity();
        let [g1, g2, g4] = id.invariant_gradients();
        assert_eq!((g1, g2, g4), (id, id * 2.0, id * 4.0));
    }

    #[test]
    fn invariant_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let t = random_tensor(&mut rng);
            let grads = t.invariant_gradients();
            for k in 0..6 {
                let mut tp = t;
                let mut tm = t;
                tp.m[k] += h;
                tm.m[k] -= h;
                let (ip, im) = (tp.invariants(), tm.invariants());
                for j in 0..3 {
                    let fd = (ip[j] - im[j]) / (2.0 * h);
                    let scale = grads[j].norm().max(1e-12);
                    assert!((fd - grads[j].m[k]).abs() / scale < 1e-7, "I{j} coord {k}");
                }
            }
        }
    }

    #[test]
    fn apply_iso_examples() {
        let id = SymTensor2::identity();
        assert_eq!(IsoStiffness::new(1.0, 1.0).apply(&id), id * 3.0);
        let z = IsoStiffness::new(0.0, 1.0).apply(&id);
        assert!(z.max_abs() < 1e-15);
        let t = SymTensor2::diag(0.01, 0.0, 0.0);
        let s = IsoStiffness::new(500.0, 300.0).apply(&t);
        assert_relative_eq!(s.trace(), 15.0, max_relative = 1e-14);
        let dev = s.dev() - t.dev() * 600.0;
        assert!(dev.max_abs() < 1e-13);
    }

    #[test]
    fn projectors_are_orthogonal_idempotents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = IsoStiffness::new(1.0 / 3.0, 0.0);
        let d = IsoStiffness::new(0.0, 0.5);
        for _ in 0..50 {
            let t = random_tensor(&mut rng);
            let kt = k.apply(&t);
            let dt = d.apply(&t);
            assert!((k.apply(&kt) - kt).max_abs() < 1e-14);
            assert!((d.apply(&dt) - dt).max_abs() < 1e-14);
            assert!(k.apply(&dt).max_abs() < 1e-14);
            assert!(d.apply(&kt).max_abs() < 1e-14);
        }
    }

    #[test]
    fn dense_matrix_matches_apply() {
        let c = IsoStiffness::new(1000.0, 700.0);
        let mat = c.matrix();
        let t = SymTensor2::new([0.1, -0.2, 0.3, 0.05, -0.4, 0.7]);
        let direct = c.apply(&t);
        for i in 0..6 {
            let v: f64 = (0..6).map(|j| mat[i][j] * t.m[j]).sum();
            assert_relative_eq!(v, direct.m[i], max_relative = 1e-13, epsilon = 1e-12);
        }
    }

    #[test]
    fn trace_cube_is_recovered_from_the_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let t = random_tensor(&mut rng);
            let [i1, i2, i4] = t.invariants();
            let p3 = tr(&matmul(
                &matmul(&t.to_matrix(), &t.to_matrix()),
                &t.to_matrix(),
            ));
            let rec = trace_cube_from_invariants(i1, i2, i4).unwrap();
            let scale = p3.abs().max(t.norm().powi(3));
            assert!((rec - p3).abs() / scale < 1e-9, "{rec} vs {p3}");
        }
    }

    #[test]
    fn trace_cube_counterexample_breaks_chord_convexity() {
        // A = 0, B = −I: f(λB) = −3λ³ lies above the chord −3λ
        let b = -SymTensor2::identity();
        for lam in [0.25, 0.5, 0.75] {
            let f = (b * lam).trace_cube();
            assert_relative_eq!(f, -3.0 * lam * lam * lam, max_relative = 1e-14);
            assert!(f > lam * b.trace_cube());
        }
    }

    fn arb_tensor() -> impl Strategy<Value = SymTensor2> {
        prop::array::uniform6(-2.0f64..2.0).prop_map(SymTensor2::new)
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_to_rounding(t in arb_tensor()) {
            let back = SymTensor2::from_matrix(&t.to_matrix()).unwrap();
            for k in 0..6 {
                prop_assert!((back.m[k] - t.m[k]).abs() <= 4.0 * f64::EPSILON * t.m[k].abs());
            }
        }

        #[test]
        fn frobenius_product_is_mandel_dot(a in arb_tensor(), b in arb_tensor()) {
            let (ma, mb) = (a.to_matrix(), b.to_matrix());
            let frob: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| ma[i][j] * mb[i][j]).sum();
            prop_assert!((frob - a.dot(&b)).abs() < 1e-12 * (1.0 + a.norm() * b.norm()));
        }

        #[test]
        fn square_matches_matrix_product(t in arb_tensor()) {
            let a = t.to_matrix();
            let want = SymTensor2::from_matrix(&matmul(&a, &a)).unwrap();
            let got = t.square();
            for k in 0..6 {
                prop_assert!((want.m[k] - got.m[k]).abs() < 1e-12 * (1.0 + t.norm().powi(2)));
            }
        }

        #[test]
        fn basis_is_nonnegative_where_required(t in arb_tensor()) {
            let [_, i2, i4] = t.invariants();
            prop_assert!(i2 >= 0.0 && i4 >= 0.0);
        }

        #[test]
        fn basis_members_are_chord_convex(a in arb_tensor(), b in arb_tensor()) {
            let (fa, fb) = (a.invariants(), b.invariants());
            for lam in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let f = (a + (b - a) * lam).invariants();
                for j in 0..3 {
                    let chord = fa[j] + lam * (fb[j] - fa[j]);
                    let scale = 1.0 + fa[j].abs().max(fb[j].abs());
                    prop_assert!(f[j] <= chord + 1e-9 * scale);
                }
            }
        }

        #[test]
        fn apply_iso_is_linear(a in arb_tensor(), b in arb_tensor(), s in -3.0f64..3.0) {
            let c = IsoStiffness::new(500.0, 300.0);
            let lhs = c.apply(&(a + b * s));
            let rhs = c.apply(&a) + c.apply(&b) * s;
            prop_assert!((lhs - rhs).max_abs() < 1e-10 * (1.0 + lhs.max_abs()));
        }

        #[test]
        fn invariants_are_rotation_invariant(t in arb_tensor(), ang in prop::array::uniform3(-3.0f64..3.0)) {
            let r = rotation(ang);
            let (a, b) = (t.invariants(), t.rotated(&r).invariants());
            for j in 0..3 {
                prop_assert!((a[j] - b[j]).abs() < 1e-10 * (1.0 + a[j].abs()));
            }
        }
    }

    fn rotation(a: [f64; 3]) -> [[f64; 3]; 3] {
        let (s1, c1) = a[0].sin_cos();
        let (s2, c2) = a[1].sin_cos();
        let (s3, c3) = a[2].sin_cos();
        let rz = [[c1, -s1, 0.0], [s1, c1, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]];
        let rx = [[1.0, 0.0, 0.0], [0.0, c3, -s3], [0.0, s3, c3]];
        matmul(&matmul(&rz, &ry), &rx)
    }
}
