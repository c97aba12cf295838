//! Shared test utilities: the central-finite-difference gradient oracle and
//! the op-by-op check suite built on it.

// Each integration-test binary compiles this module and uses its own
// subset of it.
#![allow(dead_code)]

use quantkd::rng::Rng;
use quantkd::tensor::{Tape, Tensor, Var};

pub const FD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Max relative error between tape gradients and central finite differences
/// for a scalar function of the given inputs. `build` must construct the
/// same graph for every call (it runs once per perturbed element).
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).numel(), 1, "gradcheck needs a scalar objective");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::rand_normal(shape, rng)
}

/// Inputs for relu-style kinks: resample anything within `margin` of zero.
fn normal_away_from_zero(shape: &[usize], rng: &mut Rng, margin: f64) -> Tensor<f64> {
    let mut t = normal(shape, rng);
    for v in t.data_mut() {
        while v.abs() < margin {
            *v = rng.normal::<f64>();
        }
    }
    t
}

/// Random positive weights for projecting a multi-output op to a scalar.
fn projector(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.2, 1.0, rng)
}

/// One named gradient check; returns the observed max relative error.
pub type OpCheck = (&'static str, fn(&mut Rng) -> f64);

fn project_loss(tape: &mut Tape<f64>, y: Var, weights: Tensor<f64>) -> Var {
    let w = tape.constant(weights);
    let prod = tape.mul(y, w).expect("projection shapes agree");
    tape.sum_all(prod)
}

pub fn check_matmul(rng: &mut Rng) -> f64 {
    let m = 2 + rng.below(3);
    let k = 2 + rng.below(4);
    let n = 1 + rng.below(3);
    let a = normal(&[m, k], rng);
    let b = normal(&[k, n], rng);
    let w = projector(&[m, n], rng);
    gradcheck(&[a, b], FD_H, move |tape, vars| {
        let y = tape.matmul(vars[0], vars[1]).unwrap();
        project_loss(tape, y, w.clone())
    })
}

pub fn check_conv2d(rng: &mut Rng) -> f64 {
    let (n, c, f) = (1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(3));
    let (h, w) = (4 + rng.below(3), 4 + rng.below(3));
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let x = normal(&[n, c, h, w], rng);
    let k = normal(&[f, c, 3, 3], rng);
    let oh = (h + 2 * pad - 3) / stride + 1;
    let ow = (w + 2 * pad - 3) / stride + 1;
    let proj = projector(&[n, f, oh, ow], rng);
    gradcheck(&[x, k], FD_H, move |tape, vars| {
        let y = tape.conv2d(vars[0], vars[1], stride, pad).unwrap();
        project_loss(tape, y, proj.clone())
    })
}

pub fn check_relu(rng: &mut Rng) -> f64 {
    let x = normal_away_from_zero(&[3, 7], rng, 0.05);
    let w = projector(&[3, 7], rng);
    gradcheck(&[x], FD_H, move |tape, vars| {
        let y = tape.relu(vars[0]);
        project_loss(tape, y, w.clone())
    })
}

pub fn check_add_sub_mul_scale(rng: &mut Rng) -> f64 {
    let shape = [2 + rng.below(3), 3 + rng.below(3)];
    let a = normal(&shape, rng);
    let b = normal(&shape, rng);
    let w = projector(&shape, rng);
    gradcheck(&[a, b], FD_H, move |tape, vars| {
        let s = tape.add(vars[0], vars[1]).unwrap();
        let d = tape.sub(s, vars[1]).unwrap();
        let m = tape.mul(d, vars[1]).unwrap();
        let sc = tape.scale(m, -1.7);
        project_loss(tape, sc, w.clone())
    })
}

pub fn check_bias_broadcasts(rng: &mut Rng) -> f64 {
    let (n, c, h, w) = (2, 1 + rng.below(3), 3, 2);
    let x2 = normal(&[n, c], rng);
    let b2 = normal(&[c], rng);
    let x4 = normal(&[n, c, h, w], rng);
    let b4 = normal(&[c], rng);
    let w2 = projector(&[n, c], rng);
    let w4 = projector(&[n, c, h, w], rng);
    let e1 = gradcheck(&[x2, b2], FD_H, move |tape, vars| {
        let y = tape.add(vars[0], vars[1]).unwrap();
        project_loss(tape, y, w2.clone())
    });
    let e2 = gradcheck(&[x4, b4], FD_H, move |tape, vars| {
        let y = tape.add(vars[0], vars[1]).unwrap();
        project_loss(tape, y, w4.clone())
    });
    e1.max(e2)
}

pub fn check_reductions(rng: &mut Rng) -> f64 {
    let x = normal(&[2 + rng.below(3), 5], rng);
    let e1 = gradcheck(&[x.clone()], FD_H, |tape, vars| tape.sum_all(vars[0]));
    let e2 = gradcheck(&[x], FD_H, |tape, vars| tape.mean_all(vars[0]));
    e1.max(e2)
}

pub fn check_global_pool_and_reshape(rng: &mut Rng) -> f64 {
    let (n, c, h, w) = (2, 3, 2 + rng.below(3), 2 + rng.below(3));
    let x = normal(&[n, c, h, w], rng);
    let proj = projector(&[n, c], rng);
    gradcheck(&[x], FD_H, move |tape, vars| {
        let flat = tape.reshape(vars[0], vec![n, c, h * w, 1]).unwrap();
        let back = tape.reshape(flat, vec![n, c, h, w]).unwrap();
        let y = tape.global_avg_pool(back).unwrap();
        project_loss(tape, y, proj.clone())
    })
}

pub fn check_batch_norm_train(rng: &mut Rng) -> f64 {
    let (n, c, h, w) = (3, 2, 2 + rng.below(2), 2);
    let x = normal(&[n, c, h, w], rng);
    let gamma = Tensor::rand_uniform(&[c], 0.5, 1.5, rng);
    let beta = normal(&[c], rng);
    let proj = projector(&[n, c, h, w], rng);
    gradcheck(&[x, gamma, beta], FD_H, move |tape, vars| {
        let (y, _, _) = tape.batch_norm_train(vars[0], vars[1], vars[2]).unwrap();
        project_loss(tape, y, proj.clone())
    })
}

pub fn check_batch_norm_eval(rng: &mut Rng) -> f64 {
    let (n, c, h, w) = (2, 3, 2, 2);
    let x = normal(&[n, c, h, w], rng);
    let gamma = Tensor::rand_uniform(&[c], 0.5, 1.5, rng);
    let beta = normal(&[c], rng);
    let rmean = normal(&[c], rng);
    let rvar = Tensor::rand_uniform(&[c], 0.3, 1.5, rng);
    let proj = projector(&[n, c, h, w], rng);
    gradcheck(&[x, gamma, beta], FD_H, move |tape, vars| {
        let y = tape
            .batch_norm_eval(vars[0], vars[1], vars[2], &rmean, &rvar)
            .unwrap();
        project_loss(tape, y, proj.clone())
    })
}

pub fn check_softmax_t(rng: &mut Rng) -> f64 {
    let mut worst = 0.0f64;
    for tau in [0.5, 1.0, 5.0] {
        let z = normal(&[2, 5], rng);
        let w = projector(&[2, 5], rng);
        let e = gradcheck(&[z], FD_H, move |tape, vars| {
            let p = tape.softmax_t(vars[0], tau).unwrap();
            project_loss(tape, p, w.clone())
        });
        worst = worst.max(e);
    }
    worst
}

/// Direct cross-entropy check: probabilities perturbed directly, so use a
/// smaller step to stay inside the distribution-validation tolerance.
pub fn check_cross_entropy_direct(rng: &mut Rng) -> f64 {
    let c = 4;
    let rows = 2;
    let make_dist = |rng: &mut Rng| {
        let mut t = Tensor::rand_uniform(&[rows, c], 0.2, 1.0, rng);
        for r in 0..rows {
            let sum: f64 = t.row(r).iter().sum();
            for e in 0..c {
                t.data_mut()[r * c + e] /= sum;
            }
        }
        t
    };
    let target = make_dist(rng);
    let model = make_dist(rng);
    gradcheck(&[target, model], 1e-6, |tape, vars| {
        let rows = tape.cross_entropy(vars[0], vars[1]).unwrap();
        tape.sum_all(rows)
    })
}

/// Composite check: gradient of CE(one-hot, softmax(z)) w.r.t. logits must
/// equal `p - onehot` in closed form, and match finite differences.
pub fn check_ce_softmax_closed_form(rng: &mut Rng) -> f64 {
    let c = 5;
    let z = normal(&[1, c], rng);
    let label = rng.below(c);

    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone(), true);
    let onehot = tape.constant(Tensor::one_hot(&[label], c).unwrap());
    let p = tape.softmax_t(zv, 1.0).unwrap();
    let p_vals: Vec<f64> = tape.value(p).data().to_vec();
    let rows = tape.cross_entropy(onehot, p).unwrap();
    let loss = tape.sum_all(rows);
    tape.backward(loss).unwrap();
    let grad = tape.grad(zv).unwrap().data().to_vec();
    let mut closed_err = 0.0f64;
    for j in 0..c {
        let expect = p_vals[j] - if j == label { 1.0 } else { 0.0 };
        closed_err = closed_err.max((grad[j] - expect).abs());
    }

    let fd_err = gradcheck(&[z], FD_H, move |tape, vars| {
        let onehot = tape.constant(Tensor::one_hot(&[label], c).unwrap());
        let p = tape.softmax_t(vars[0], 1.0).unwrap();
        let rows = tape.cross_entropy(onehot, p).unwrap();
        tape.sum_all(rows)
    });
    closed_err.max(fd_err)
}

/// Composite MLP: linear -> relu -> linear -> softmax -> CE.
pub fn check_mlp_composite(rng: &mut Rng) -> f64 {
    let (n, d, hdim, c) = (2, 4, 6, 3);
    let x = normal(&[n, d], rng);
    let w1 = normal(&[d, hdim], rng).map(|v| v * 0.5);
    let b1 = normal(&[hdim], rng).map(|v| v * 0.1);
    let w2 = normal(&[hdim, c], rng).map(|v| v * 0.5);
    let b2 = normal(&[c], rng).map(|v| v * 0.1);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    gradcheck(&[x, w1, b1, w2, b2], FD_H, move |tape, vars| {
        let h1 = tape.matmul(vars[0], vars[1]).unwrap();
        let h1 = tape.add(h1, vars[2]).unwrap();
        let h1 = tape.relu(h1);
        let z = tape.matmul(h1, vars[3]).unwrap();
        let z = tape.add(z, vars[4]).unwrap();
        let onehot = tape.constant(Tensor::one_hot(&labels, c).unwrap());
        let p = tape.softmax_t(z, 1.0).unwrap();
        let rows = tape.cross_entropy(onehot, p).unwrap();
        tape.mean_all(rows)
    })
}

/// Full mixed distillation loss w.r.t. student logits.
pub fn check_kd_loss(rng: &mut Rng) -> f64 {
    let mut worst = 0.0f64;
    for (tau, lambda, scaled) in [(1.0, 0.5, false), (5.0, 0.3, false), (2.0, 0.8, true), (4.0, 1.0, false)]
    {
        let (n, c) = (2, 4);
        let s = normal(&[n, c], rng);
        let t = normal(&[n, c], rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let e = gradcheck(&[s], FD_H, move |tape, vars| {
            let tv = tape.constant(t.clone());
            quantkd::distill::kd_loss(tape, vars[0], tv, &labels, tau, lambda, scaled).unwrap()
        });
        worst = worst.max(e);
    }
    worst
}

/// The whole suite, for the acceptance gate.
pub fn all_gradient_checks() -> Vec<OpCheck> {
    vec![
        ("matmul", check_matmul),
        ("conv2d", check_conv2d),
        ("relu", check_relu),
        ("add_sub_mul_scale", check_add_sub_mul_scale),
        ("bias_broadcasts", check_bias_broadcasts),
        ("reductions", check_reductions),
        ("global_pool_reshape", check_global_pool_and_reshape),
        ("batch_norm_train", check_batch_norm_train),
        ("batch_norm_eval", check_batch_norm_eval),
        ("softmax_t", check_softmax_t),
        ("cross_entropy", check_cross_entropy_direct),
        ("ce_softmax_closed_form", check_ce_softmax_closed_form),
        ("mlp_composite", check_mlp_composite),
        ("kd_loss", check_kd_loss),
    ]
}
