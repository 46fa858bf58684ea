//! Central-difference checks for every recorded operation and for the
//! complete adaptation loss.
//!
//! Each case rebuilds its forward pass from scratch inside a closure, so the
//! finite-difference side never shares state with the analytic side. Tensor
//! outputs are collapsed to a scalar through a fixed random weighting; a
//! plain sum would zero out softmax and norm gradients along symmetric
//! directions and hide sign errors.

use cad_core::attention::{co_adapt_on, AdaptMode, MabVars, QueryAdapted, QueryAggregation};
use cad_core::head::{
    classify_on, classify_per_class_on, episode_loss_on, prototypes_on, DistanceKind,
};
use cad_core::numerics::check::check_gradients;
use cad_core::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};
use cad_core::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Uniform magnitudes in [0.25, 1.25] with random signs: far enough from
/// zero that the relu and sqrt kinks stay outside the difference stencil.
fn rand_tensor_off_kinks(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let mag: f64 = rng.random_range(0.25..1.25);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn positive_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_tensor(shape, seed).map(|v| 1.0 + 0.4 * v)
}

/// Weighted sum of `out` against a fixed probe tensor recorded as a leaf.
fn probe(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights);
    let p = tape.mul(out, w)?;
    tape.sum_all(p)
}

/// Runs the checker for `build` at `inputs` and asserts the report passes.
fn fd_check(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).unwrap().clone())
        .collect();

    let report = check_gradients(inputs, &analytic, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss)?.item()
    })
    .unwrap();
    assert!(
        report.passes(),
        "{name}: max rel err {:.3e} at {:?}, {} checked, {} skipped",
        report.max_rel_err,
        report.worst,
        report.checked,
        report.skipped,
    );
}

#[test]
fn add_matches_central_differences_under_broadcast() {
    let a = rand_tensor(&[2, 3, 4], 1);
    for (i, b_shape) in [vec![2, 3, 4], vec![4], vec![3, 1], vec![1]].iter().enumerate() {
        let b = rand_tensor(b_shape, 100 + i as u64);
        let w = rand_tensor(&[2, 3, 4], 200 + i as u64);
        fd_check("add", &[a.clone(), b], |tape, vars| {
            let out = tape.add(vars[0], vars[1])?;
            probe(tape, out, &w)
        });
    }
}

#[test]
fn mul_matches_central_differences_under_broadcast() {
    let a = rand_tensor(&[2, 3, 4], 2);
    for (i, b_shape) in [vec![2, 3, 4], vec![4], vec![3, 1], vec![1]].iter().enumerate() {
        let b = rand_tensor(b_shape, 300 + i as u64);
        let w = rand_tensor(&[2, 3, 4], 400 + i as u64);
        fd_check("mul", &[a.clone(), b], |tape, vars| {
            let out = tape.mul(vars[0], vars[1])?;
            probe(tape, out, &w)
        });
    }
}

#[test]
fn matmul_matches_central_differences_including_batched() {
    let cases: [(&[usize], &[usize], &[usize]); 4] = [
        (&[3, 4], &[4, 2], &[3, 2]),
        (&[2, 3, 4], &[2, 4, 2], &[2, 3, 2]),
        (&[2, 3, 4], &[4, 2], &[2, 3, 2]),
        (&[1, 3, 4], &[5, 4, 2], &[5, 3, 2]),
    ];
    for (i, (sa, sb, so)) in cases.iter().enumerate() {
        let a = rand_tensor(sa, 10 + i as u64);
        let b = rand_tensor(sb, 20 + i as u64);
        let w = rand_tensor(so, 30 + i as u64);
        fd_check("matmul", &[a, b], |tape, vars| {
            let out = tape.matmul(vars[0], vars[1])?;
            probe(tape, out, &w)
        });
    }
}

#[test]
fn transpose_and_reshape_route_gradients_back() {
    let x = rand_tensor(&[2, 3, 4], 3);
    let w = rand_tensor(&[2, 4, 3], 40);
    fd_check("transpose_last", &[x], |tape, vars| {
        let out = tape.transpose_last(vars[0])?;
        probe(tape, out, &w)
    });

    let x = rand_tensor(&[2, 6], 4);
    let w = rand_tensor(&[3, 4], 41);
    fd_check("reshape", &[x], |tape, vars| {
        let out = tape.reshape(vars[0], vec![3, 4])?;
        probe(tape, out, &w)
    });
}

#[test]
fn softmax_matches_central_differences_on_each_axis() {
    let x2 = rand_tensor(&[3, 4], 5);
    for axis in 0..2 {
        let w = rand_tensor(&[3, 4], 50 + axis as u64);
        fd_check("softmax2", &[x2.clone()], |tape, vars| {
            let out = tape.softmax(vars[0], axis)?;
            probe(tape, out, &w)
        });
    }
    let x3 = rand_tensor(&[2, 3, 4], 6);
    let w = rand_tensor(&[2, 3, 4], 52);
    fd_check("softmax3", &[x3], |tape, vars| {
        let out = tape.softmax(vars[0], 2)?;
        probe(tape, out, &w)
    });
}

#[test]
fn layer_norm_matches_central_differences_for_all_operands() {
    let x = rand_tensor(&[4, 5], 7);
    let gain = positive_tensor(&[5], 70);
    let bias = rand_tensor(&[5], 71);
    let w = rand_tensor(&[4, 5], 72);
    fd_check("layer_norm", &[x, gain, bias], |tape, vars| {
        let out = tape.layer_norm(vars[0], vars[1], vars[2], LAYER_NORM_EPS)?;
        probe(tape, out, &w)
    });
}

#[test]
fn pointwise_ops_match_central_differences() {
    let x = rand_tensor_off_kinks(&[3, 4], 8);
    let w = rand_tensor(&[3, 4], 80);
    fd_check("relu", &[x], |tape, vars| {
        let out = tape.relu(vars[0])?;
        probe(tape, out, &w)
    });

    let x = positive_tensor(&[3, 4], 9);
    let w = rand_tensor(&[3, 4], 81);
    fd_check("sqrt", &[x], |tape, vars| {
        let out = tape.sqrt(vars[0])?;
        probe(tape, out, &w)
    });

    let x = rand_tensor(&[3, 4], 10);
    let w = rand_tensor(&[3, 4], 82);
    fd_check("scale", &[x], |tape, vars| {
        let out = tape.scale(vars[0], -2.5)?;
        probe(tape, out, &w)
    });
}

#[test]
fn reductions_match_central_differences_on_each_axis() {
    let x = rand_tensor(&[2, 3, 4], 11);
    for axis in 0..3 {
        let mut shape = vec![2, 3, 4];
        shape.remove(axis);
        let w = rand_tensor(&shape, 90 + axis as u64);
        fd_check("mean_axis", &[x.clone()], |tape, vars| {
            let out = tape.mean_axis(vars[0], axis)?;
            probe(tape, out, &w)
        });
        fd_check("sum_axis", &[x.clone()], |tape, vars| {
            let out = tape.sum_axis(vars[0], axis)?;
            probe(tape, out, &w)
        });
    }
    fd_check("sum_all", &[rand_tensor(&[3, 4], 12)], |tape, vars| {
        tape.sum_all(vars[0])
    });
}

#[test]
fn pairwise_distances_match_central_differences() {
    let a = rand_tensor(&[5, 3], 13);
    let b = rand_tensor(&[4, 3], 14);
    let w = rand_tensor(&[5, 4], 95);
    fd_check("euclidean_sq", &[a.clone(), b.clone()], |tape, vars| {
        let out = tape.euclidean_sq(vars[0], vars[1])?;
        probe(tape, out, &w)
    });
    // The square-rooted form is only smooth away from coincident rows;
    // random draws keep every pair separated.
    fd_check("euclidean", &[a, b], |tape, vars| {
        let sq = tape.euclidean_sq(vars[0], vars[1])?;
        let out = tape.sqrt(sq)?;
        probe(tape, out, &w)
    });
}

#[test]
fn nll_loss_matches_central_differences() {
    // Rows are softmax outputs so the probed entries sit well inside (0, 1).
    let logits = rand_tensor(&[4, 3], 15);
    let probs = {
        let mut tape = Tape::new();
        let l = tape.input(&logits);
        let p = tape.softmax(l, 1).unwrap();
        tape.value(p).unwrap().clone()
    };
    let labels = [0usize, 2, 1, 1];
    fd_check("nll_loss", &[probs], |tape, vars| {
        tape.nll_loss(vars[0], &labels)
    });
}

#[test]
fn conv_stack_matches_central_differences() {
    let x = rand_tensor(&[2, 4, 4, 3], 16);
    let k3 = rand_tensor(&[3, 3, 3, 2], 17);
    let w = rand_tensor(&[2, 4, 4, 2], 96);
    fd_check("conv2d_same 3x3", &[x.clone(), k3], |tape, vars| {
        let out = tape.conv2d_same(vars[0], vars[1])?;
        probe(tape, out, &w)
    });

    let k1 = rand_tensor(&[1, 1, 3, 2], 18);
    fd_check("conv2d_same 1x1", &[x.clone(), k1], |tape, vars| {
        let out = tape.conv2d_same(vars[0], vars[1])?;
        probe(tape, out, &w)
    });

    let wp = rand_tensor(&[2, 2, 2, 3], 97);
    fd_check("avg_pool2", &[x.clone()], |tape, vars| {
        let out = tape.avg_pool2(vars[0])?;
        probe(tape, out, &wp)
    });

    let wg = rand_tensor(&[2, 3], 98);
    fd_check("global_avg_pool", &[x], |tape, vars| {
        let out = tape.global_avg_pool(vars[0])?;
        probe(tape, out, &wg)
    });
}

/// Episode loss for two classes, two shots, six queries at feature width
/// four: adaptation, prototypes, distance softmax, negative log likelihood.
/// Gradients flow to both embeddings and all six attention parameters.
fn adaptation_loss(
    tape: &mut Tape<f64>,
    vars: &[Var],
    mode: AdaptMode,
    aggregation: QueryAggregation,
    distance: DistanceKind,
) -> Result<Var> {
    let labels = [0usize, 0, 0, 1, 1, 1];
    let mab = if mode.is_parametric() {
        MabVars::Parametric {
            w_q: vars[2],
            w_k: vars[3],
            w_v: vars[4],
            w_o: vars[5],
            norm: Some((vars[6], vars[7])),
        }
    } else {
        MabVars::Identity
    };
    let adapted = co_adapt_on(tape, vars[0], vars[1], &mab, mode, aggregation)?;
    let protos = prototypes_on(tape, adapted.z_s_adapted)?;
    let probs = match adapted.z_q_adapted {
        QueryAdapted::Shared(q) => classify_on(tape, q, protos, distance)?,
        QueryAdapted::PerClass(q) => classify_per_class_on(tape, q, protos, distance)?,
    };
    episode_loss_on(tape, probs, &labels)
}

#[test]
fn full_adaptation_loss_matches_central_differences() {
    let z_s = rand_tensor(&[2, 2, 4], 19);
    let z_q = rand_tensor(&[6, 4], 20);
    let inputs = vec![
        z_s.clone(),
        z_q.clone(),
        rand_tensor(&[4, 4], 21),
        rand_tensor(&[4, 4], 22),
        rand_tensor(&[4, 4], 23),
        rand_tensor(&[4, 4], 24),
        positive_tensor(&[4], 25),
        rand_tensor(&[4], 26),
    ];
    for aggregation in [QueryAggregation::MeanOverClasses, QueryAggregation::PerClass] {
        for distance in [DistanceKind::SqEuclidean, DistanceKind::Euclidean] {
            fd_check("full adaptation loss", &inputs, |tape, vars| {
                adaptation_loss(tape, vars, AdaptMode::Full, aggregation, distance)
            });
        }
    }
}

#[test]
fn reduced_mode_losses_match_central_differences() {
    let inputs = vec![
        rand_tensor(&[2, 2, 4], 27),
        rand_tensor(&[6, 4], 28),
        rand_tensor(&[4, 4], 29),
        rand_tensor(&[4, 4], 30),
        rand_tensor(&[4, 4], 31),
        rand_tensor(&[4, 4], 32),
        positive_tensor(&[4], 33),
        rand_tensor(&[4], 34),
    ];
    for mode in [
        AdaptMode::SupportOnly,
        AdaptMode::QueryOnly,
        AdaptMode::SelfOnly,
    ] {
        fd_check(mode.as_str(), &inputs, |tape, vars| {
            adaptation_loss(
                tape,
                vars,
                mode,
                QueryAggregation::MeanOverClasses,
                DistanceKind::SqEuclidean,
            )
        });
    }

    let free = [rand_tensor(&[2, 2, 4], 35), rand_tensor(&[6, 4], 36)];
    fd_check("nonparam", &free, |tape, vars| {
        adaptation_loss(
            tape,
            vars,
            AdaptMode::Nonparam,
            QueryAggregation::MeanOverClasses,
            DistanceKind::SqEuclidean,
        )
    });
}
