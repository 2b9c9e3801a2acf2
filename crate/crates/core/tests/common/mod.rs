//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_pose::nn::{Mode, Model, Regularization, Tensor};

/// Worst relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Scalar objective `sum_i r_i y_i + penalty`, evaluated on a clone so the
/// dropout stream of `template` is never advanced.
fn objective(template: &Model, x: &Tensor, r: &[f64], reg: Regularization) -> f64 {
    let mut m = template.clone();
    let y = m.forward(x, Mode::Train).expect("forward");
    y.data().iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + m.penalty(reg)
}

/// Check every parameter gradient and the input gradient of `model` on a
/// random batch against central finite differences.
pub fn gradient_check(model: &Model, input_shape: &[usize], reg: Regularization, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in: usize = input_shape.iter().product();
    let x = Tensor::new(input_shape.to_vec(), random_vec(&mut rng, n_in));
    let n_out = input_shape[0] * model.output_len();
    let r = random_vec(&mut rng, n_out);

    let mut analytic = model.clone();
    analytic.zero_grad();
    analytic.forward(&x, Mode::Train).expect("forward");
    let gin = analytic
        .backward(&Tensor::new(vec![input_shape[0], model.output_len()], r.clone()), reg)
        .expect("backward");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let n_params = model.params().count();
    for p in 0..n_params {
        let len = model.params().nth(p).unwrap().value.len();
        for i in 0..len {
            let mut plus = model.clone();
            plus.params_mut().nth(p).unwrap().value[i] += h;
            let mut minus = model.clone();
            minus.params_mut().nth(p).unwrap().value[i] -= h;
            let fd = (objective(&plus, &x, &r, reg) - objective(&minus, &x, &r, reg)) / (2.0 * h);
            let an = analytic.params().nth(p).unwrap().grad[i];
            worst = worst.max(rel_error(an, fd));
            checked += 1;
        }
    }
    for i in 0..n_in {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (objective(model, &xp, &r, reg) - objective(model, &xm, &r, reg)) / (2.0 * h);
        worst = worst.max(rel_error(gin.data()[i], fd));
        checked += 1;
    }
    GradReport {
        max_rel_error: worst,
        checked,
    }
}

/// `(x - 0.3)^2 + (y - 0.7)^2` on the unit square.
pub fn quadratic_space() -> tactile_pose::tpe::SearchSpace {
    use tactile_pose::tpe::{Dimension, SearchSpace};
    SearchSpace::new(vec![
        ("x".into(), Dimension::Uniform { lo: 0.0, hi: 1.0 }),
        ("y".into(), Dimension::Uniform { lo: 0.0, hi: 1.0 }),
    ])
    .unwrap()
}

pub fn quadratic(p: &tactile_pose::tpe::Point) -> f64 {
    use tactile_pose::tpe::ParamValue;
    let get = |k: &str| match &p[k] {
        ParamValue::Number(v) => *v,
        ParamValue::Text(t) => panic!("unexpected text value {t}"),
    };
    (get("x") - 0.3).powi(2) + (get("y") - 0.7).powi(2)
}

/// Median best loss of TPE and of random search over `seeds` seeded runs
/// of the quadratic benchmark (60 trials, 20 startup).
pub fn quadratic_benchmark(seeds: u64) -> (f64, f64) {
    use tactile_pose::tpe::{optimize, random_search, TpeConfig};
    let space = quadratic_space();
    let mut tpe = Vec::new();
    let mut random = Vec::new();
    for seed in 0..seeds {
        let cfg = TpeConfig {
            n_trials: 60,
            n_startup: 20,
            seed,
            ..TpeConfig::default()
        };
        let r = optimize(|_, p| Ok::<_, ()>(quadratic(p)), &space, &cfg).unwrap();
        tpe.push(r.best.loss.unwrap());
        // A separate stream family so the baseline is not TPE's own startup.
        let r = random_search(|_, p| Ok::<_, ()>(quadratic(p)), &space, 60, seed + 1_000_000).unwrap();
        random.push(r.best.loss.unwrap());
    }
    (median(&mut tpe), median(&mut random))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-sided Kolmogorov-Smirnov p-value of `samples` against U(lo, hi),
/// using the asymptotic distribution with Stephens' small-sample
/// correction.
pub fn ks_uniform_p(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut xs: Vec<f64> = samples.iter().map(|x| (x - lo) / (hi - lo)).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &f)| ((i as f64 + 1.0) / n - f).max(f - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}
