mod common;

use std::collections::BTreeMap;

use common::{median, quadratic, quadratic_benchmark, quadratic_space};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_pose::tpe::{
    best_so_far, optimize, optimize_logged, random_search, read_log, sample_uniform, score_candidates,
    split_history, suggest, Dimension, ParamValue, ParzenEstimator, Point, Provenance, SearchSpace, TpeConfig,
    TpeError, Trial,
};

fn one_dim(name: &str, dim: Dimension) -> SearchSpace {
    SearchSpace::new(vec![(name.into(), dim)]).unwrap()
}

fn trial(index: usize, params: Point, loss: Option<f64>) -> Trial {
    Trial {
        index,
        params,
        loss,
        provenance: Provenance::Startup,
        wall_time_s: 0.0,
    }
}

fn num(v: f64) -> ParamValue {
    ParamValue::Number(v)
}

fn point(pairs: &[(&str, ParamValue)]) -> Point {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn log_uniform_median() {
    let space = one_dim("l1", Dimension::LogUniform { lo: 1e-4, hi: 1e-1 });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut xs: Vec<f64> = (0..10_000)
        .map(|_| match &sample_uniform(&space, &mut rng)["l1"] {
            ParamValue::Number(x) => *x,
            _ => unreachable!(),
        })
        .collect();
    let m = median(&mut xs);
    assert!((2.5e-3..=4.5e-3).contains(&m), "median {m}");
    assert!(xs.iter().all(|x| (1e-4..=1e-1).contains(x)));
}

#[test]
fn single_choice_and_ordinal_values() {
    let space = SearchSpace::new(vec![
        ("act".into(), Dimension::Categorical { choices: vec!["relu".into()] }),
        (
            "width".into(),
            Dimension::Ordinal {
                choices: (1..=9).map(|k| 2f64.powi(k)).collect(),
            },
        ),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let p = sample_uniform(&space, &mut rng);
        assert_eq!(p["act"], ParamValue::Text("relu".into()));
        let ParamValue::Number(w) = p["width"] else { panic!() };
        assert!(w.log2().fract() == 0.0 && (2.0..=512.0).contains(&w));
    }
}

#[test]
fn split_examples() {
    let p = point(&[("x", num(0.5))]);
    let ts: Vec<Trial> = [1.0, 2.0, 3.0, 4.0]
        .iter()
        .enumerate()
        .map(|(i, &l)| trial(i, p.clone(), Some(l)))
        .collect();
    assert_eq!(split_history(&ts, 0.25).unwrap(), (vec![0], vec![1, 2, 3]));

    let equal: Vec<Trial> = (0..10).map(|i| trial(i, p.clone(), Some(1.0))).collect();
    let (good, bad) = split_history(&equal, 0.25).unwrap();
    assert_eq!(good, vec![0, 1, 2]);
    assert_eq!(bad.len(), 7);

    let mut with_fail = ts.clone();
    with_fail.push(trial(4, p.clone(), None));
    let (good, bad) = split_history(&with_fail, 0.25).unwrap();
    assert!(!good.contains(&4) && bad.contains(&4));

    let failed: Vec<Trial> = (0..3).map(|i| trial(i, p.clone(), None)).collect();
    assert!(matches!(split_history(&failed, 0.25), Err(TpeError::NoCompletedTrials)));
}

#[test]
fn empty_history_is_uniform_startup() {
    let space = quadratic_space();
    let cfg = TpeConfig::default();
    let (p, prov) = suggest(&[], &space, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(prov, Provenance::Startup);
    assert_eq!(p, sample_uniform(&space, &mut ChaCha8Rng::seed_from_u64(1)));
}

#[test]
fn suggestions_follow_good_cluster() {
    let space = one_dim("x", Dimension::Uniform { lo: 0.0, hi: 1.0 });
    let cfg = TpeConfig {
        n_startup: 1,
        ..TpeConfig::default()
    };
    let mut hits = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts = Vec::new();
        for i in 0..20 {
            // Five good points near 0.1, fifteen bad ones near 0.9.
            let (centre, loss) = if i < 5 { (0.1, 0.01) } else { (0.9, 1.0) };
            let x: f64 = centre + rng.gen_range(-0.05..0.05);
            ts.push(trial(i, point(&[("x", num(x))]), Some(loss)));
        }
        let (p, prov) = suggest(&ts, &space, &cfg, &mut rng);
        assert_eq!(prov, Provenance::Tpe);
        let ParamValue::Number(x) = p["x"] else { panic!() };
        if x <= 0.5 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100 suggestions in [0, 0.5]");
}

#[test]
fn categorical_preference_by_scores() {
    let space = one_dim(
        "activation",
        Dimension::Categorical {
            choices: vec!["relu".into(), "elu".into()],
        },
    );
    let mut ts = Vec::new();
    for i in 0..12 {
        let (act, loss) = if i < 3 { ("relu", 0.1) } else { ("elu", 1.0 + i as f64) };
        ts.push(trial(i, point(&[("activation", ParamValue::Text(act.into()))]), Some(loss)));
    }
    let cands = score_candidates(&ts, &space, 0.25, 200, &mut ChaCha8Rng::seed_from_u64(9));
    let score = |name: &str| {
        cands
            .iter()
            .find(|c| c.point["activation"] == ParamValue::Text(name.into()))
            .map(|c| c.log_ratio)
            .unwrap()
    };
    assert!(score("relu") > score("elu"));
    let relu = cands
        .iter()
        .filter(|c| c.point["activation"] == ParamValue::Text("relu".into()))
        .count();
    assert!(relu > 100, "relu drawn {relu}/200 times");
}

#[test]
fn parzen_density_normalised() {
    for obs in [vec![0.2], vec![0.1, 0.15, 0.9], vec![-3.0, -2.9, 1.5, 2.0, 2.1]] {
        let (lo, hi) = (-4.0, 3.0);
        let est = ParzenEstimator::fit(&obs, lo, hi);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        // Composite Simpson's rule.
        let mut s = est.pdf(lo) + est.pdf(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * est.pdf(lo + i as f64 * h);
        }
        let integral = s * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "{obs:?}: {integral}");
        assert_eq!(est.pdf(lo - 0.1), 0.0);
    }
}

fn mixed_space() -> SearchSpace {
    SearchSpace::new(vec![
        ("c".into(), Dimension::Categorical { choices: vec!["a".into(), "b".into(), "c".into()] }),
        ("o".into(), Dimension::Ordinal { choices: vec![16.0, 32.0, 64.0, 128.0] }),
        ("u".into(), Dimension::Uniform { lo: -1.0, hi: 2.0 }),
        ("l".into(), Dimension::LogUniform { lo: 1e-4, hi: 1e-1 }),
    ])
    .unwrap()
}

#[test]
fn ten_thousand_suggestions_stay_in_space() {
    let space = mixed_space();
    let cfg = TpeConfig {
        n_startup: 2,
        ..TpeConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut count = 0;
    while count < 10_000 {
        let n = rng.gen_range(2..30);
        let history: Vec<Trial> = (0..n)
            .map(|i| {
                let loss = if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0.0..10.0)) };
                trial(i, sample_uniform(&space, &mut rng), loss)
            })
            .collect();
        for _ in 0..100 {
            let (p, _) = suggest(&history, &space, &cfg, &mut rng);
            assert!(space.contains(&p), "{p:?}");
            count += 1;
        }
    }
}

#[test]
fn constant_objective() {
    let cfg = TpeConfig {
        n_trials: 25,
        n_startup: 5,
        ..TpeConfig::default()
    };
    let r = optimize(|_, _| Ok::<_, ()>(4.25), &mixed_space(), &cfg).unwrap();
    assert_eq!(r.history.len(), 25);
    assert_eq!(r.best.loss, Some(4.25));
    assert_eq!(r.history.iter().filter(|t| t.provenance == Provenance::Startup).count(), 5);
}

#[test]
fn all_failures_reported() {
    let cfg = TpeConfig {
        n_trials: 6,
        n_startup: 2,
        ..TpeConfig::default()
    };
    let err = optimize(|_, _| Err::<f64, _>("diverged"), &quadratic_space(), &cfg).unwrap_err();
    assert!(matches!(err, TpeError::NoSuccessfulTrial(6)));
    let nan = optimize(|_, _| Ok::<_, ()>(f64::NAN), &quadratic_space(), &cfg).unwrap_err();
    assert!(matches!(nan, TpeError::NoSuccessfulTrial(6)));
}

#[test]
fn best_so_far_is_monotone_and_runs_are_deterministic() {
    let cfg = TpeConfig {
        n_trials: 40,
        n_startup: 10,
        seed: 5,
        ..TpeConfig::default()
    };
    let space = quadratic_space();
    let a = optimize(|_, p| Ok::<_, ()>(quadratic(p)), &space, &cfg).unwrap();
    let b = optimize(|_, p| Ok::<_, ()>(quadratic(p)), &space, &cfg).unwrap();
    let strip = |h: &[Trial]| h.iter().map(|t| (t.params.clone(), t.loss)).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    let curve = best_so_far(&a.history);
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn all_startup_equals_random_search() {
    let space = mixed_space();
    let obj = |_: usize, p: &Point| {
        let ParamValue::Number(u) = p["u"] else { panic!() };
        Ok::<_, ()>(u * u)
    };
    let cfg = TpeConfig {
        n_trials: 30,
        n_startup: 30,
        seed: 77,
        ..TpeConfig::default()
    };
    let t = optimize(obj, &space, &cfg).unwrap();
    let r = random_search(obj, &space, 30, 77).unwrap();
    for (a, b) in t.history.iter().zip(&r.history) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss.map(f64::to_bits), b.loss.map(f64::to_bits));
    }
}

#[test]
fn quadratic_benchmark_beats_random() {
    let (tpe, random) = quadratic_benchmark(20);
    assert!(tpe < 0.01, "TPE median best {tpe}");
    assert!(tpe <= random, "TPE {tpe} vs random {random}");
    // Ten-seed median, as a smaller sample.
    let (tpe10, _) = quadratic_benchmark(10);
    assert!(tpe10 < 0.01, "{tpe10}");
}

#[test]
fn interrupted_run_resumes_from_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");
    let space = mixed_space();
    let cfg = TpeConfig {
        n_trials: 24,
        n_startup: 8,
        seed: 3,
        ..TpeConfig::default()
    };
    let obj = |_: usize, p: &Point| {
        let ParamValue::Number(u) = p["u"] else { panic!() };
        let ParamValue::Number(l) = p["l"] else { panic!() };
        Ok::<_, ()>((u - 0.5).powi(2) + l)
    };
    let full = optimize(obj, &space, &cfg).unwrap();

    // Stop after 13 trials, then restart with the full budget.
    let mut calls = 0;
    let partial = TpeConfig { n_trials: 13, ..cfg.clone() };
    optimize_logged(obj, &space, &partial, Some(&log)).unwrap();
    let resumed = optimize_logged(
        |i, p| {
            calls += 1;
            obj(i, p)
        },
        &space,
        &cfg,
        Some(&log),
    )
    .unwrap();
    assert_eq!(calls, 11);
    let strip = |h: &[Trial]| h.iter().map(|t| (t.index, t.params.clone(), t.loss, t.provenance)).collect::<Vec<_>>();
    assert_eq!(strip(&resumed.history), strip(&full.history));
    let logged = read_log(&log, &space).unwrap();
    assert_eq!(logged.len(), 24);
    let text = std::fs::read_to_string(&log).unwrap();
    let first: BTreeMap<String, serde_json::Value> = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["index", "params", "loss", "provenance", "wall_time_s"] {
        assert!(first.contains_key(key), "log line lacks {key}");
    }
}

#[test]
fn corrupt_log_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");
    std::fs::write(&log, "{\"index\":0,\"params\":{\"x\":0.5,\"y\":0.5},\"loss\":0.1,\"provenance\":\"startup\",\"wall_time_s\":0}\nnot json\n").unwrap();
    let err = read_log(&log, &quadratic_space()).unwrap_err();
    assert!(matches!(err, TpeError::Log { line: 2, .. }), "{err}");
    std::fs::write(&log, "{\"index\":0,\"params\":{\"x\":5.0,\"y\":0.5},\"loss\":0.1,\"provenance\":\"startup\",\"wall_time_s\":0}\n").unwrap();
    assert!(read_log(&log, &quadratic_space()).is_err());
}

#[test]
fn invalid_spaces_and_configs() {
    assert!(SearchSpace::new(vec![]).is_err());
    assert!(SearchSpace::new(vec![("x".into(), Dimension::Uniform { lo: 1.0, hi: 1.0 })]).is_err());
    assert!(SearchSpace::new(vec![("x".into(), Dimension::LogUniform { lo: 0.0, hi: 1.0 })]).is_err());
    let bad = TpeConfig {
        gamma: 1.0,
        ..TpeConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TpeConfig {
        n_startup: 10,
        n_trials: 5,
        ..TpeConfig::default()
    };
    assert!(bad.validate().is_err());
}
