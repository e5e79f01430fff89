use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use gsmnet::checkpoint::Checkpoint;
use gsmnet::data::{Dataset, Provenance, Sequence, StrainKind, StressKind};
use gsmnet::eval::EvalMetrics;
use gsmnet::normalize::Normalizer;
use gsmnet::potentials::{Mode, PotentialModel};
use gsmnet::SymTensor2;

fn workdir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("cli")
        .join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn gsmnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsmnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gsmnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// An untrained checkpoint with the scales of a generated dataset.
fn init_checkpoint(dir: &Path, data: &str) -> PathBuf {
    let ds = Dataset::read(&dir.join(data)).unwrap();
    let m = PotentialModel::new(Mode::Invariant, Normalizer::fit(&ds).unwrap(), 1);
    let path = dir.join("init.json");
    Checkpoint::from_model(&m, 1, None).write(&path).unwrap();
    path
}

#[test]
fn generate_writes_ideal_full_strain_data_and_resolved_config() {
    let d = workdir("generate");
    let line = ok(
        &d,
        &[
            "generate",
            "--sequences",
            "1",
            "--steps",
            "200",
            "--seed",
            "7",
            "-o",
            "d.json",
        ],
    );
    assert!(line.contains("D^ideal_1x200"), "{line}");
    let ds = Dataset::read(&d.join("d.json")).unwrap();
    assert_eq!(ds.provenance.stress, StressKind::Ideal);
    assert_eq!(ds.provenance.strain, StrainKind::Full);
    assert_eq!(ds.sequences.len(), 1);
    assert_eq!(ds.sequences[0].steps(), 200);
    assert!(ds.has_q());
    let conf = std::fs::read_to_string(d.join("d.resolved.conf")).unwrap();
    assert!(conf.contains("seed = 7"), "{conf}");
}

#[test]
fn noise_and_plane_strain_are_tagged() {
    let d = workdir("noisy_plane");
    ok(
        &d,
        &[
            "generate",
            "--steps",
            "40",
            "--noise",
            "1.5",
            "--plane-strain",
            "-o",
            "d.json",
        ],
    );
    let ds = Dataset::read(&d.join("d.json")).unwrap();
    assert_eq!(ds.provenance.stress, StressKind::Noisy);
    assert_eq!(ds.provenance.strain, StrainKind::Plane);
    assert_eq!(ds.provenance.noise_std, 1.5);
    let s = &ds.sequences[0];
    assert!(s.sig_ideal.is_some());
    for e in &s.eps {
        for k in [2, 3, 4] {
            assert_eq!(e.m[k], 0.0);
        }
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = workdir("config");
    std::fs::write(d.join("run.conf"), "steps = 30\nseed = 4 # base\n").unwrap();
    ok(
        &d,
        &[
            "generate", "--config", "run.conf", "--seed", "9", "-o", "d.json",
        ],
    );
    let ds = Dataset::read(&d.join("d.json")).unwrap();
    assert_eq!(ds.seed, 9);
    assert_eq!(ds.sequences[0].steps(), 30);
    let out = gsmnet(&d, &["generate", "--set", "stepz=3", "-o", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_method_is_a_usage_error() {
    let d = workdir("bad_method");
    ok(&d, &["generate", "--steps", "5", "-o", "d.json"]);
    let out = gsmnet(&d, &["train", "--data", "d.json", "--method", "backprop"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backprop"));
}

#[test]
fn missing_input_file_exits_with_validation_code() {
    let d = workdir("missing");
    let out = gsmnet(&d, &["train", "--data", "nope.json", "--method", "given_q"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn aux_rnn_training_writes_checkpoint_and_report() {
    let d = workdir("train_rnn");
    ok(&d, &["generate", "--steps", "20", "-o", "d.json"]);
    ok(
        &d,
        &[
            "train",
            "--data",
            "d.json",
            "--method",
            "aux_rnn",
            "--epochs",
            "5",
            "--restarts",
            "1",
            "--set",
            "pretrain_epochs=5",
            "--out-dir",
            "run",
        ],
    );
    let ck = Checkpoint::read(&d.join("run/checkpoint.json")).unwrap();
    assert_eq!(ck.method.as_deref(), Some("aux_rnn"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["loss"].as_array().unwrap().len(), 5);
    assert!(d.join("run/train.resolved.conf").exists());
}

#[test]
fn integration_on_a_toy_set_is_quick() {
    let d = workdir("train_int");
    ok(&d, &["generate", "--steps", "10", "-o", "d.json"]);
    let t0 = Instant::now();
    ok(
        &d,
        &[
            "train",
            "--data",
            "d.json",
            "--method",
            "integration",
            "--epochs",
            "50",
            "--restarts",
            "1",
            "--out-dir",
            "run",
        ],
    );
    assert!(t0.elapsed().as_secs_f64() < 60.0);
    assert!(d.join("run/checkpoint.json").exists());
}

#[test]
fn zero_path_gives_zero_stress() {
    let d = workdir("zero");
    ok(&d, &["generate", "--steps", "10", "-o", "d.json"]);
    let ck = init_checkpoint(&d, "d.json");
    let t: Vec<f64> = (0..=10).map(|k| 0.05 * k as f64).collect();
    let zero = Dataset::new(
        Provenance {
            stress: StressKind::Ideal,
            strain: StrainKind::Full,
            noise_std: 0.0,
            name: "zero".into(),
        },
        0,
        vec![Sequence::from_path(t, vec![SymTensor2::ZERO; 11])],
    );
    zero.write(&d.join("zero.json")).unwrap();
    ok(
        &d,
        &[
            "predict",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--path",
            "zero.json",
            "-o",
            "r.json",
        ],
    );
    let r = Dataset::read(&d.join("r.json")).unwrap();
    for s in &r.sequences[0].sig {
        assert!(s.max_abs() < 1e-12, "{s:?}");
    }
}

#[test]
fn test_path_response_has_residual_per_state() {
    let d = workdir("test_path");
    ok(&d, &["generate", "--steps", "20", "-o", "d.json"]);
    ok(
        &d,
        &[
            "generate",
            "--test-path",
            "--seed",
            "12345",
            "-o",
            "test.json",
        ],
    );
    let ck = init_checkpoint(&d, "d.json");
    let line = ok(
        &d,
        &[
            "predict",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--path",
            "test.json",
            "-o",
            "r.json",
        ],
    );
    assert!(line.contains("251 states"), "{line}");
    let r = Dataset::read(&d.join("r.json")).unwrap();
    let s = &r.sequences[0];
    assert_eq!(s.steps(), 250);
    assert_eq!(r.provenance.stress, StressKind::Predicted);
    let res = s.residual.as_ref().unwrap();
    assert_eq!(res.len(), s.len());
    assert!(res.iter().all(|x| x.is_finite()));
    assert!(s.sig.iter().all(|x| x.is_finite()));
}

#[test]
fn non_converged_step_exits_with_numerical_code() {
    let d = workdir("nonconv");
    ok(&d, &["generate", "--steps", "20", "-o", "d.json"]);
    let ck = init_checkpoint(&d, "d.json");
    let out = gsmnet(
        &d,
        &[
            "predict",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--path",
            "d.json",
            "-o",
            "r.json",
            "--set",
            "solver_max_iterations=1",
            "--set",
            "solver_rel_tolerance=1e-15",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step 1"), "{err}");
    assert!(!d.join("r.json").exists());
}

#[test]
fn evaluating_a_reference_against_itself_is_perfect() {
    let d = workdir("identity");
    ok(
        &d,
        &[
            "generate", "--steps", "30", "--noise", "1.5", "-o", "d.json",
        ],
    );
    ok(
        &d,
        &[
            "evaluate",
            "--response",
            "d.json",
            "--reference",
            "d.json",
            "-o",
            "m.json",
            "--csv",
            "c.csv",
        ],
    );
    let m: EvalMetrics =
        serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m.mae, 0.0);
    assert_eq!(m.r2, Some(1.0));
    assert!(!m.ground_truth);
    let csv = std::fs::read_to_string(d.join("c.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("coordinate,reference,predicted"));
    assert_eq!(csv.lines().count(), 1 + 6 * 31);

    // against the noise-free channel the noisy labels are off by the noise
    ok(
        &d,
        &[
            "evaluate",
            "--response",
            "d.json",
            "--reference",
            "d.json",
            "--ground-truth",
            "-o",
            "g.json",
        ],
    );
    let g: EvalMetrics =
        serde_json::from_str(&std::fs::read_to_string(d.join("g.json")).unwrap()).unwrap();
    assert!(g.ground_truth);
    assert!(g.mae > 0.5 && g.mae < 2.5, "{}", g.mae);
}
