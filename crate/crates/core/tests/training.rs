use gsmnet::data::Dataset;
use gsmnet::datagen::{generate, GenerateConfig, PathConfig};
use gsmnet::normalize::Normalizer;
use gsmnet::potentials::{Mode, PotentialModel};
use gsmnet::refmat::RefMaterialParams;
use gsmnet::solver::SolverConfig;
use gsmnet::training::nets::{Lstm, Mlp};
use gsmnet::training::objective::{aux_fnn_net, pretrain_fnn, RNN_INPUTS};
use gsmnet::training::{
    optimize, train, AuxFnn, AuxRnn, GivenQ, Integration, Method, Objective, Schedule, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(steps: usize, seed: u64) -> Dataset {
    generate(&GenerateConfig {
        path: PathConfig {
            steps,
            ..Default::default()
        },
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn toy_model(ds: &Dataset) -> PotentialModel {
    PotentialModel::with_hidden(Mode::Invariant, 1, Normalizer::fit(ds).unwrap(), 3)
}

/// Central differences of the loss against the reported gradient.
fn check_gradient(obj: &mut impl Objective, theta: &[f64]) {
    let ev = obj.evaluate(theta).unwrap();
    assert_eq!(ev.grad.len(), theta.len());
    let gmax = ev.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(gmax > 0.0);
    for i in 0..theta.len() {
        let h = 1e-6 * theta[i].abs().max(1e-2);
        let mut tp = theta.to_vec();
        tp[i] += h;
        let lp = obj.evaluate(&tp).unwrap().loss;
        tp[i] -= 2.0 * h;
        let lm = obj.evaluate(&tp).unwrap().loss;
        let fd = (lp - lm) / (2.0 * h);
        let err = (ev.grad[i] - fd).abs();
        assert!(
            err <= 1e-4 * fd.abs().max(1e-2 * gmax),
            "entry {i}: autodiff {} vs fd {fd}",
            ev.grad[i]
        );
    }
}

fn perturbed(theta: &[f64], mask: &[bool], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    theta
        .iter()
        .zip(mask)
        .map(|(&x, &nn)| {
            let y = x + rng.gen_range(-0.2..0.2);
            if nn {
                y.abs() + 0.05
            } else {
                y
            }
        })
        .collect()
}

#[test]
fn given_q_gradient_matches_finite_differences() {
    let ds = dataset(3, 1);
    let m = toy_model(&ds);
    let mut o = GivenQ::new(m.clone(), &ds, m.norm.s_sig()).unwrap();
    let th = perturbed(&m.params(), &o.nonneg_mask(), 1);
    check_gradient(&mut o, &th);
}

#[test]
fn aux_fnn_gradient_matches_finite_differences() {
    let ds = dataset(3, 2);
    let m = toy_model(&ds);
    let net = Mlp::new(&[1, 2, 6]);
    let mut th = m.params();
    th.extend(net.init(&mut ChaCha8Rng::seed_from_u64(4)));
    let mut o = AuxFnn::new(m.clone(), net, &ds, &m.norm);
    let th = perturbed(&th, &o.nonneg_mask(), 2);
    check_gradient(&mut o, &th);
}

#[test]
fn aux_rnn_gradient_matches_finite_differences() {
    let ds = dataset(3, 3);
    let m = toy_model(&ds);
    let cell = Lstm::new(RNN_INPUTS, 2);
    let head = Mlp::new(&[2, 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut th = m.params();
    th.extend(cell.init(&mut rng));
    th.extend(head.init(&mut rng));
    let mut o = AuxRnn::new(m.clone(), cell, head, &ds, &m.norm);
    let th = perturbed(&th, &o.nonneg_mask(), 3);
    check_gradient(&mut o, &th);
}

#[test]
fn integration_gradient_matches_finite_differences_through_newton() {
    let ds = dataset(3, 4);
    let m = toy_model(&ds);
    let s = m.norm.s_sig();
    let solver = SolverConfig {
        tolerance: 1e-12 * s,
        ..SolverConfig::scaled(s)
    };
    let mut o = Integration::new(m.clone(), &ds, s, solver);
    let th = perturbed(&m.params(), &o.nonneg_mask(), 4);
    check_gradient(&mut o, &th);
}

#[test]
fn reference_potentials_satisfy_the_biot_equation_on_their_own_data() {
    let ds = dataset(100, 5);
    let norm = Normalizer::fit(&ds).unwrap();
    let p = RefMaterialParams::default();
    let mut o = GivenQ::new(p, &ds, norm.s_sig()).unwrap();
    let ev = o.evaluate(&[]).unwrap();
    let tol = GenerateConfig::default().solver().tolerance;
    assert!(ev.loss_sigma < 1e-12, "{}", ev.loss_sigma);
    assert!(ev.loss_biot <= tol / norm.s_sig(), "{}", ev.loss_biot);
}

#[test]
fn given_q_requires_internal_variables() {
    let mut ds = dataset(5, 6);
    ds.sequences[0].q = None;
    let m = toy_model(&ds);
    assert!(GivenQ::new(m, &ds, 1.0).is_err());
    let cfg = TrainConfig {
        method: Method::GivenQ,
        epochs: 1,
        restarts: 1,
        ..Default::default()
    };
    assert!(train(&ds, &cfg).is_err());
}

fn pretrained(ds: &Dataset, norm: &Normalizer, epochs: usize) -> (Mlp, Vec<f64>) {
    let net = aux_fnn_net();
    let mut p = net.init(&mut ChaCha8Rng::seed_from_u64(9));
    let s = &ds.sequences[0];
    let t: Vec<f64> = s.t.iter().map(|&t| norm.time.forward(t)).collect();
    pretrain_fnn(&net, &mut p, &t, &s.eps, norm.s_q(), epochs, 0.01);
    (net, p)
}

#[test]
fn pretraining_tracks_the_strain_path() {
    let ds = dataset(200, 7);
    let norm = Normalizer::fit(&ds).unwrap();
    let (net, p) = pretrained(&ds, &norm, 2000);
    let s = &ds.sequences[0];
    let mut err = 0.0;
    for (t, e) in s.t.iter().zip(&s.eps) {
        let q = net.eval(&p, &[norm.time.forward(*t)]);
        err += (0..6)
            .map(|k| (q[k] * norm.s_q() - e.m[k]).abs())
            .sum::<f64>();
    }
    let mae = err / (6.0 * s.len() as f64) / norm.s_eps();
    assert!(mae < 0.05, "normalized MAE {mae}");
}

#[test]
fn aux_fnn_finds_the_true_internal_variables_under_reference_potentials() {
    let ds = dataset(100, 8);
    let norm = Normalizer::fit(&ds).unwrap();
    let (net, p) = pretrained(&ds, &norm, 2000);
    let mut o = AuxFnn::new(RefMaterialParams::default(), net, &ds, &norm);
    let mut th = p;
    let sched = Schedule {
        lr: 0.003,
        decay: 0.5,
        interval: 500,
    };
    let h = optimize(&mut o, &mut th, 1500, sched).unwrap();
    let (b0, b1) = (h.loss_biot[0], *h.loss_biot.last().unwrap());
    assert!(b1 * 10.0 <= b0, "biot loss {b0} -> {b1}");
}

#[test]
fn true_internal_variables_beat_the_strain_guess() {
    let ds = dataset(100, 9);
    let norm = Normalizer::fit(&ds).unwrap();
    let m = PotentialModel::new(Mode::Invariant, norm, 0);
    let s = &ds.sequences[0];
    let t: Vec<f64> = s.t.iter().map(|&t| norm.time.forward(t)).collect();
    let (net, guess) = pretrained(&ds, &norm, 2000);
    let mut cheat = guess.clone();
    pretrain_fnn(
        &net,
        &mut cheat,
        &t,
        s.q.as_ref().unwrap(),
        norm.s_q(),
        2000,
        0.01,
    );
    let mut o = AuxFnn::new(m.clone(), net, &ds, &norm);
    // train the potentials alone against each fixed internal-variable path
    let mut fit = |aux: &[f64]| {
        let mut th = [m.params(), aux.to_vec()].concat();
        let mut mask = o.nonneg_mask();
        let nm = m.num_params();
        let sched = Schedule {
            lr: 0.01,
            decay: 0.5,
            interval: 300,
        };
        let mut adam = gsmnet::training::Adam::new(th.len());
        for e in 0..600 {
            let mut ev = o.evaluate(&th).unwrap();
            ev.grad[nm..].iter_mut().for_each(|g| *g = 0.0);
            mask.truncate(th.len());
            adam.step(&mut th, &ev.grad, sched.at(e), &mask);
        }
        o.evaluate(&th).unwrap().loss
    };
    let with_truth = fit(&cheat);
    let with_guess = fit(&guess);
    assert!(with_truth <= with_guess, "{with_truth} > {with_guess}");
}

fn quick(method: Method, restarts: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 30,
        restarts,
        seed,
        pretrain_epochs: 20,
        ..Default::default()
    }
}

#[test]
fn single_restart_is_a_plain_run() {
    let ds = dataset(20, 10);
    let out = train(&ds, &quick(Method::GivenQ, 1, 4)).unwrap();
    assert_eq!(out.report.best_restart, 0);
    assert_eq!(out.report.restarts.len(), 1);
    assert_eq!(out.report.epochs_run, 30);
    assert_eq!(out.report.final_loss, *out.report.loss.last().unwrap());
    assert!(out.model.is_feasible());
}

#[test]
fn restarts_keep_the_lowest_final_loss_deterministically() {
    let ds = dataset(20, 11);
    for method in [Method::GivenQ, Method::AuxRnn] {
        let run = || {
            let mut r = train(&ds, &quick(method, 3, 2)).unwrap().report;
            r.epoch_seconds.clear();
            r
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let mut finals: Vec<f64> = a.restarts.iter().map(|r| r.final_loss.unwrap()).collect();
        assert_eq!(a.final_loss, finals[a.best_restart]);
        finals.sort_by(f64::total_cmp);
        assert_eq!(a.final_loss, finals[0]);
        assert!(a.final_loss <= finals[1]);
        let seeds: Vec<u64> = a.restarts.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![2, 3, 4]);
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let ds = dataset(10, 12);
    for method in [Method::GivenQ, Method::AuxFnn, Method::AuxRnn] {
        let cfg = TrainConfig {
            epochs: 0,
            pretrain_epochs: 0,
            ..quick(method, 1, 6)
        };
        let out = train(&ds, &cfg).unwrap();
        let init = PotentialModel::new(Mode::Invariant, Normalizer::fit(&ds).unwrap(), 6);
        assert_eq!(out.model.params(), init.params());
        assert!(out.report.loss.is_empty());
        assert!(out.report.final_loss.is_finite());
    }
}

#[test]
fn every_method_reduces_its_loss() {
    let ds = dataset(10, 13);
    for method in Method::ALL {
        let cfg = TrainConfig {
            epochs: 60,
            ..quick(method, 1, 1)
        };
        let out = train(&ds, &cfg).unwrap();
        let l = &out.report.loss;
        assert!(
            l[l.len() - 1] < l[0],
            "{method}: {} -> {}",
            l[0],
            l[l.len() - 1]
        );
        assert!(out.model.is_feasible());
    }
}
