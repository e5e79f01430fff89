//! Random spline strain paths labeled by the reference material.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, Sequence, StrainKind, StressKind};
use crate::error::{Error, Result};
use crate::refmat::RefMaterialParams;
use crate::solver::{predict_sequence, SolverConfig};
use crate::symtensor::SymTensor2;

/// Tensor components that vanish in plane strain: 33, 23, 13.
const OUT_OF_PLANE: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// Range of the time between knots (s).
    pub knot_dt: (f64, f64),
    /// Standard deviation of knot strain increments.
    pub knot_std: f64,
    /// Bound on `|ε_ij|` at the knots.
    pub cap: f64,
    /// Range of the sampling time increment (s); equal bounds give a constant step.
    pub dt: (f64, f64),
    /// Number of time increments; a path has `steps + 1` states.
    pub steps: usize,
    pub plane_strain: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            knot_dt: (0.2, 1.0),
            knot_std: 0.005,
            cap: 0.02,
            dt: (0.03, 0.07),
            steps: 200,
            plane_strain: false,
        }
    }
}

impl PathConfig {
    /// 250 increments at a constant 0.05 s.
    pub fn test_path() -> Self {
        PathConfig {
            dt: (0.05, 0.05),
            steps: 250,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(format!(
                    "invalid {name} range [{lo}, {hi}]"
                )))
            }
        };
        range("knot time increment", self.knot_dt)?;
        range("time increment", self.dt)?;
        if !(self.knot_std > 0.0 && self.knot_std.is_finite()) {
            return Err(Error::validation("knot strain std must be positive"));
        }
        if !(self.cap > 0.0 && self.cap.is_finite()) {
            return Err(Error::validation("strain cap must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::validation("a path needs at least one increment"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Natural cubic spline through `(x_i, y_i)`.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 2 && y.len() == n);
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for i in 0..k {
                let diag = 2.0 * (h[i] + h[i + 1]);
                let rhs = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
                let (sub, sup) = (h[i], h[i + 1]);
                if i == 0 {
                    c[i] = sup / diag;
                    d[i] = rhs / diag;
                } else {
                    let den = diag - sub * c[i - 1];
                    c[i] = sup / den;
                    d[i] = (rhs - sub * d[i - 1]) / den;
                }
            }
            for i in (0..k).rev() {
                m[i + 1] = d[i] - if i + 1 < k { c[i] * m[i + 2] } else { 0.0 };
            }
        }
        NaturalSpline { x, y, m }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&xk| xk <= t) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Knot times and knot strains (tensor components), starting at the origin
/// and covering at least `duration`.
pub fn sample_knots(
    cfg: &PathConfig,
    duration: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<[f64; 6]>) {
    let normal = Normal::new(0.0, cfg.knot_std).expect("validated std");
    let mut t = vec![0.0];
    let mut e = vec![[0.0; 6]];
    while *t.last().unwrap() < duration {
        let dt = uniform(rng, cfg.knot_dt);
        let prev = *e.last().unwrap();
        let mut next = prev;
        for (k, v) in next.iter_mut().enumerate() {
            if cfg.plane_strain && OUT_OF_PLANE.contains(&k) {
                continue;
            }
            *v = loop {
                let c = prev[k] + normal.sample(rng);
                if c.abs() <= cfg.cap {
                    break c;
                }
            };
        }
        t.push(t.last().unwrap() + dt);
        e.push(next);
    }
    (t, e)
}

/// A random strain path: times and strains, `cfg.steps + 1` states from rest.
pub fn sample_strain_path(cfg: &PathConfig, seed: u64) -> Result<(Vec<f64>, Vec<SymTensor2>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kt, ke) = sample_knots(cfg, cfg.steps as f64 * cfg.dt.1, &mut rng);
    let splines: Vec<NaturalSpline> = (0..6)
        .map(|k| NaturalSpline::new(kt.clone(), ke.iter().map(|e| e[k]).collect()))
        .collect();
    let mut t = Vec::with_capacity(cfg.steps + 1);
    t.push(0.0);
    for n in 1..=cfg.steps {
        let next = if cfg.dt.0 == cfg.dt.1 {
            // exact multiples rather than accumulated sums
            n as f64 * cfg.dt.0
        } else {
            t[n - 1] + uniform(&mut rng, cfg.dt)
        };
        t.push(next);
    }
    let eps = t
        .iter()
        .enumerate()
        .map(|(n, &tn)| {
            if n == 0 {
                return SymTensor2::ZERO;
            }
            let mut c: [f64; 6] = std::array::from_fn(|k| splines[k].eval(tn));
            if cfg.plane_strain {
                for k in OUT_OF_PLANE {
                    c[k] = 0.0;
                }
            }
            SymTensor2::from_components(c)
        })
        .collect();
    Ok((t, eps))
}

/// Stresses and internal variables of the reference material along a path.
pub fn label_with_reference(
    t: Vec<f64>,
    eps: Vec<SymTensor2>,
    params: &RefMaterialParams,
    cfg: &SolverConfig,
) -> Result<Sequence> {
    let out = predict_sequence(params, &t, &eps, cfg)?;
    let mut s = Sequence::from_path(t, eps);
    s.sig = out.iter().map(|r| r.state.sig).collect();
    s.q = Some(out.iter().map(|r| r.state.q).collect());
    Ok(s)
}

/// Adds independent `N(0, std)` noise to every stress component after the
/// rest state. The clean stresses are kept as `sig_ideal`.
pub fn add_noise(ds: &Dataset, std: f64, seed: u64) -> Result<Dataset> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::validation(format!(
            "noise std must be non-negative, got {std}"
        )));
    }
    let mut out = ds.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).expect("checked std");
    for (i, s) in out.sequences.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        // separate stream from the path generator sharing this seed
        rng.set_stream(1);
        let clean = s.reference_stress().to_vec();
        s.sig = clean
            .iter()
            .enumerate()
            .map(|(n, sig)| {
                if n == 0 {
                    return *sig;
                }
                let c = sig.components();
                SymTensor2::from_components(std::array::from_fn(|k| c[k] + normal.sample(&mut rng)))
            })
            .collect();
        s.sig_ideal = Some(clean);
    }
    out.provenance.stress = StressKind::Noisy;
    out.provenance.noise_std = std;
    out.provenance.name = Dataset::conventional_name(
        StressKind::Noisy,
        out.sequences.len(),
        out.sequences.first().map_or(0, Sequence::steps),
    );
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub sequences: usize,
    pub path: PathConfig,
    pub noise_std: f64,
    pub seed: u64,
    pub material: RefMaterialParams,
    /// Newton tolerance for labeling (MPa).
    pub tolerance: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            sequences: 1,
            path: PathConfig::default(),
            noise_std: 0.0,
            seed: 0,
            material: RefMaterialParams::default(),
            tolerance: 1e-9,
        }
    }
}

impl GenerateConfig {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            ..SolverConfig::scaled(1.0)
        }
    }
}

/// Sequence `i` uses seed `cfg.seed + i` for its path and its noise.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.sequences == 0 {
        return Err(Error::validation("dataset needs at least one sequence"));
    }
    cfg.path.validate()?;
    cfg.material.validate()?;
    let solver = cfg.solver();
    solver.validate()?;
    let sequences = (0..cfg.sequences)
        .into_par_iter()
        .map(|i| {
            let (t, eps) = sample_strain_path(&cfg.path, cfg.seed.wrapping_add(i as u64))?;
            label_with_reference(t, eps, &cfg.material, &solver).inspect_err(|e| {
                log::error!("labeling sequence {i} failed: {e}");
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance {
        stress: StressKind::Ideal,
        strain: if cfg.path.plane_strain {
            StrainKind::Plane
        } else {
            StrainKind::Full
        },
        noise_std: 0.0,
        name: Dataset::conventional_name(StressKind::Ideal, cfg.sequences, cfg.path.steps),
    };
    let ds = Dataset::new(prov, cfg.seed, sequences);
    if cfg.noise_std > 0.0 {
        add_noise(&ds, cfg.noise_std, cfg.seed)
    } else {
        Ok(ds)
    }
}
