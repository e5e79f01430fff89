//! Error metrics of predicted against reference stresses.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::symtensor::{SymTensor2, COMPONENTS};

pub const METRICS_SCHEMA: &str = "gsmnet-metrics-v1";

/// Stress components leaving the 1-2 plane: σ33, σ23, σ13.
pub const OUT_OF_PLANE: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    /// MPa, averaged over the subset's components.
    pub mae: f64,
    /// `mae` over the half range of all reference components; `None` for a
    /// constant reference.
    pub normalized_mae: Option<f64>,
    /// Pooled coefficient of determination; `None` when undefined.
    pub r2: Option<f64>,
}

/// Tensor components throughout (σ23, not its Mandel coordinate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub schema: String,
    pub samples: usize,
    /// Per-component MAE in MPa, ordered as [`COMPONENTS`].
    pub mae_components: [f64; 6],
    pub mae: f64,
    /// Half range of the reference stress components.
    pub scale: f64,
    pub normalized_mae: Option<f64>,
    pub r2: Option<f64>,
    pub out_of_plane: SubsetMetrics,
    /// Whether noise-free reference stresses were used.
    pub ground_truth: bool,
}

fn subset(pred: &[SymTensor2], refs: &[SymTensor2], comps: &[usize], scale: f64) -> SubsetMetrics {
    let n = (pred.len() * comps.len()) as f64;
    let pairs = || {
        pred.iter()
            .zip(refs)
            .flat_map(move |(p, r)| comps.iter().map(move |&k| (p.component(k), r.component(k))))
    };
    let mae = pairs().map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
    let mean = pairs().map(|(_, r)| r).sum::<f64>() / n;
    let ss_res: f64 = pairs().map(|(p, r)| (p - r).powi(2)).sum();
    let ss_tot: f64 = pairs().map(|(_, r)| (r - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else if ss_res == 0.0 {
        Some(1.0)
    } else {
        None
    };
    SubsetMetrics {
        mae,
        normalized_mae: (scale > 0.0).then(|| mae / scale),
        r2,
    }
}

/// Metrics over paired stress lists.
pub fn metrics(
    pred: &[SymTensor2],
    refs: &[SymTensor2],
    ground_truth: bool,
) -> Result<EvalMetrics> {
    if pred.len() != refs.len() {
        return Err(Error::Dimension {
            what: "stress lists",
            expected: refs.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::validation("no stresses to compare"));
    }
    if let Some(i) = pred.iter().chain(refs).position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("stress entry {}", i % pred.len()),
        });
    }
    let (lo, hi) = refs
        .iter()
        .flat_map(|s| s.components())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
    let scale = 0.5 * (hi - lo);
    let mae_components = std::array::from_fn(|k| subset(pred, refs, &[k], scale).mae);
    let all = subset(pred, refs, &[0, 1, 2, 3, 4, 5], scale);
    Ok(EvalMetrics {
        schema: METRICS_SCHEMA.to_string(),
        samples: pred.len(),
        mae_components,
        mae: all.mae,
        scale,
        normalized_mae: all.normalized_mae,
        r2: all.r2,
        out_of_plane: subset(pred, refs, &OUT_OF_PLANE, scale),
        ground_truth,
    })
}

fn paired(pred: &Dataset, reference: &Dataset) -> Result<()> {
    if pred.sequences.len() != reference.sequences.len() {
        return Err(Error::Dimension {
            what: "sequence count",
            expected: reference.sequences.len(),
            got: pred.sequences.len(),
        });
    }
    for (i, (p, r)) in pred.sequences.iter().zip(&reference.sequences).enumerate() {
        if p.len() != r.len() {
            return Err(Error::validation(format!(
                "sequence {i}: response has {} states, reference {}",
                p.len(),
                r.len()
            )));
        }
    }
    Ok(())
}

fn reference_stresses(reference: &Dataset, ground_truth: bool) -> (Vec<SymTensor2>, bool) {
    let used = ground_truth && reference.sequences.iter().all(|s| s.sig_ideal.is_some());
    let sig = reference
        .sequences
        .iter()
        .flat_map(|s| {
            if used {
                s.reference_stress()
            } else {
                &s.sig[..]
            }
        })
        .copied()
        .collect();
    (sig, used)
}

/// Compare every state of a response with its reference. With
/// `ground_truth`, noise-free reference stresses are used where the file
/// carries them.
pub fn evaluate(pred: &Dataset, reference: &Dataset, ground_truth: bool) -> Result<EvalMetrics> {
    paired(pred, reference)?;
    let p: Vec<SymTensor2> = pred
        .sequences
        .iter()
        .flat_map(|s| &s.sig)
        .copied()
        .collect();
    let (r, used) = reference_stresses(reference, ground_truth);
    metrics(&p, &r, used)
}

/// Long-format CSV for correlation plots: `coordinate,reference,predicted`.
pub fn correlation_csv(pred: &Dataset, reference: &Dataset, ground_truth: bool) -> Result<String> {
    paired(pred, reference)?;
    let (r, _) = reference_stresses(reference, ground_truth);
    let p = pred.sequences.iter().flat_map(|s| &s.sig);
    let mut out = String::from("coordinate,reference,predicted\n");
    for (a, b) in r.iter().zip(p) {
        for (k, name) in COMPONENTS.iter().enumerate() {
            out.push_str(&format!(
                "{name},{:e},{:e}\n",
                a.component(k),
                b.component(k)
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> Vec<SymTensor2> {
        (0..20)
            .map(|i| {
                let x = i as f64;
                SymTensor2::from_components([x, -0.5 * x, 0.1 * x * x, x.sin(), 2.0, 0.3 * x])
            })
            .collect()
    }

    #[test]
    fn identical_response_is_perfect() {
        let s = series();
        let m = metrics(&s, &s, false).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.r2, Some(1.0));
        assert_eq!(m.normalized_mae, Some(0.0));
        assert_eq!(m.out_of_plane.r2, Some(1.0));
    }

    #[test]
    fn constant_offset_matches_hand_statistics() {
        let r = series();
        let c = 0.75;
        let p: Vec<SymTensor2> = r
            .iter()
            .map(|s| {
                let mut x = s.components();
                x.iter_mut().for_each(|v| *v += c);
                SymTensor2::from_components(x)
            })
            .collect();
        let m = metrics(&p, &r, false).unwrap();
        assert!((m.mae - c).abs() < 1e-12);
        assert!(m.mae_components.iter().all(|e| (e - c).abs() < 1e-12));
        // R² = 1 − n c² / Σ (r − r̄)² over the pooled components
        let vals: Vec<f64> = r.iter().flat_map(|s| s.components()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
        let want = 1.0 - vals.len() as f64 * c * c / ss;
        assert!((m.r2.unwrap() - want).abs() < 1e-12);
        let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
        let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!((m.normalized_mae.unwrap() - c / (0.5 * (hi - lo))).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_has_no_scale() {
        let z = vec![SymTensor2::ZERO; 4];
        let m = metrics(&z, &z, false).unwrap();
        assert_eq!(m.normalized_mae, None);
        assert_eq!(m.r2, Some(1.0));
        let p = vec![SymTensor2::identity(); 4];
        assert_eq!(metrics(&p, &z, false).unwrap().r2, None);
    }

    #[test]
    fn out_of_plane_subset_ignores_in_plane_errors() {
        let r = series();
        let p: Vec<SymTensor2> = r
            .iter()
            .map(|s| {
                let mut x = s.components();
                x[0] += 3.0;
                x[5] -= 1.0;
                SymTensor2::from_components(x)
            })
            .collect();
        let m = metrics(&p, &r, false).unwrap();
        assert_eq!(m.out_of_plane.mae, 0.0);
        assert!((m.mae - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn r2_never_exceeds_one() {
        let r = series();
        let p: Vec<SymTensor2> = r.iter().map(|s| *s * 0.9).collect();
        let m = metrics(&p, &r, false).unwrap();
        assert!(m.r2.unwrap() <= 1.0);
        assert!(m.normalized_mae.unwrap() >= 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let r = series();
        assert!(metrics(&r[1..], &r, false).is_err());
    }
}
