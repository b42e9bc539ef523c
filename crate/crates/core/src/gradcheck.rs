//! Central finite-difference verification of the autodiff engine.
//!
//! Every check compares the tape's analytic gradients against a two-sided
//! difference quotient computed from forward evaluations only, so the
//! reference never touches the backward pass it is checking. This module
//! backs the `gradcheck` CLI subcommand; the same harness is reused by the
//! acceptance suite.

use crate::decoder::{DecoderHead, DecoderModel, Direction, MergeCase};
use crate::encoder::{EncoderMode, EncoderModel, PowerLayer};
use crate::nn::{gru_cell_step, GruCell};
use crate::rng::{NoiseParams, RngStream};
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::trainer::generate_batch;
use crate::unroll::{bind_decoder, bind_encoder, build_episode_graph, NormMode, UnrollOptions};
use crate::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Absolute floor in the relative-error denominator near zero.
pub const FD_ABS_FLOOR: f64 = 1e-7;
/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for the full closed-loop unroll.
pub const CLOSED_LOOP_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_ABS_FLOOR)
}

/// Max relative error between `analytic` gradients and central finite
/// differences of `forward` over every parameter entry.
pub fn max_rel_error_fd<S: Scalar>(
    params: &[Tensor<S>],
    analytic: &[Tensor<S>],
    forward: &mut dyn FnMut(&[Tensor<S>]) -> f64,
) -> f64 {
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let h = FD_STEP;
    let mut max_err = 0.0f64;
    for ti in 0..params.len() {
        for ei in 0..params[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + S::from(h).unwrap();
            let lp = forward(&work);
            work[ti].data_mut()[ei] = orig - S::from(h).unwrap();
            let lm = forward(&work);
            work[ti].data_mut()[ei] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[ti].data()[ei].to_f64().unwrap();
            let err = rel_err(a, fd);
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

/// One primitive check: `build` assembles a scalar root from leaves bound
/// to the given parameter tensors.
fn check_primitive<S: Scalar>(
    name: &str,
    params: Vec<Tensor<S>>,
    tolerance: f64,
    build: &dyn Fn(&mut Tape<S>, &[Value]) -> Value,
) -> CheckReport {
    let run = |tensors: &[Tensor<S>], want_grads: bool| -> (f64, Vec<Tensor<S>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Value> = tensors.iter().map(|t| tape.leaf_from(t)).collect();
        let root = build(&mut tape, &leaves);
        let loss = tape.value(root).item().to_f64().unwrap();
        if want_grads {
            tape.backward(root).expect("gradcheck backward");
            let grads = leaves.iter().map(|&v| tape.grad(v).clone()).collect();
            (loss, grads)
        } else {
            (loss, Vec::new())
        }
    };
    let (_, analytic) = run(&params, true);
    let mut forward = |tensors: &[Tensor<S>]| run(tensors, false).0;
    let max_rel_err = max_rel_error_fd(&params, &analytic, &mut forward);
    CheckReport {
        name: name.to_string(),
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| 2.0 * rng.next_uniform() - 1.0)
            .collect(),
    )
}

/// A fixed random projection turns a matrix output into a scalar loss so
/// the whole Jacobian is exercised, not just a symmetric slice of it.
fn project<S: Scalar>(tape: &mut Tape<S>, out: Value, rng: &mut RngStream) -> Value {
    let t = tape.value(out);
    let c = Tensor::from_vec(
        t.rows(),
        t.cols(),
        (0..t.len())
            .map(|_| S::from(2.0 * rng.next_uniform() - 1.0).unwrap())
            .collect(),
    );
    let c = tape.leaf(c);
    let prod = tape.mul(out, c);
    tape.mean_all(prod)
}

/// Runs the primitive checks plus the full K=4, N=6, 8-neuron closed-loop
/// unroll check, all seeded from `seed`.
pub fn run_gradchecks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let mut r = RngStream::new(seed, 0);

    macro_rules! prim {
        ($name:expr, $params:expr, $build:expr) => {{
            let b = $build;
            reports.push(check_primitive::<f64>($name, $params, PRIMITIVE_TOL, &b));
        }};
    }

    let pr = RngStream::new(seed, 1);
    prim!("add", vec![rand_tensor(3, 4, &mut r), rand_tensor(3, 4, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.add(v[0], v[1]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("add_row", vec![rand_tensor(3, 4, &mut r), rand_tensor(1, 4, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.add_row(v[0], v[1]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("scalar_broadcast", vec![rand_tensor(3, 4, &mut r), Tensor::scalar(0.7)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let a = t.add_scalar(v[0], v[1]);
            let b = t.sub_scalar(a, v[1]);
            let m = t.mul_scalar(b, v[1]);
            let d = t.div_scalar(m, v[1]);
            project(t, d, &mut c.clone())
        }
    });
    prim!("mul", vec![rand_tensor(3, 4, &mut r), rand_tensor(3, 4, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.mul(v[0], v[1]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("matmul", vec![rand_tensor(3, 4, &mut r), rand_tensor(4, 5, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.matmul(v[0], v[1]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("concat_cols", vec![rand_tensor(3, 2, &mut r), rand_tensor(3, 3, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.concat_cols(v[0], v[1]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("const_affine", vec![rand_tensor(3, 4, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let a = t.add_const(v[0], 0.3);
            let m = t.mul_const(a, -1.7);
            let d = t.div_const(m, 2.5);
            let o = t.one_minus(d);
            project(t, o, &mut c.clone())
        }
    });
    prim!("tanh", vec![rand_tensor(3, 4, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.tanh(v[0]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("sigmoid", vec![rand_tensor(3, 4, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.sigmoid(v[0]);
            project(t, s, &mut c.clone())
        }
    });
    prim!("sqrt_clamp", vec![rand_tensor(3, 4, &mut r).map(|x| x.abs() + 0.5)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            // clamp at 0.1: all entries are >= 0.5, safely inside the
            // pass-through region for the FD step.
            let cl = t.clamp_min(v[0], 0.1);
            let s = t.sqrt(cl);
            project(t, s, &mut c.clone())
        }
    });
    prim!("ln_clamped", vec![rand_tensor(3, 4, &mut r).map(|x| x.abs() + 0.5)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let s = t.ln_clamped(v[0], 1e-30);
            project(t, s, &mut c.clone())
        }
    });
    prim!("mean_all", vec![rand_tensor(4, 3, &mut r)], {
        move |t: &mut Tape<f64>, v: &[Value]| t.mean_all(v[0])
    });
    prim!("gather_slice_element", vec![rand_tensor(4, 5, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let g = t.gather_col(v[0], vec![1, 4, 0, 2]);
            let s = t.slice_col(v[0], 3);
            let e = t.get_element(v[0], 2, 2);
            let gs = t.concat_cols(g, s);
            let p = project(t, gs, &mut c.clone());
            let pe = t.mul_scalar(p, e);
            t.mean_all(pe)
        }
    });
    // Softmax: per-output gradient rows, checked one class at a time.
    {
        let logits = rand_tensor(1, 8, &mut r).map(|x| x * 2.0);
        let mut worst = 0.0f64;
        for class in 0..8 {
            let rep = check_primitive::<f64>("softmax", vec![logits.clone()], PRIMITIVE_TOL, &{
                move |t: &mut Tape<f64>, v: &[Value]| {
                    let p = t.softmax(v[0]);
                    let picked = t.gather_col(p, vec![class]);
                    t.mean_all(picked)
                }
            });
            worst = worst.max(rep.max_rel_err);
        }
        reports.push(CheckReport {
            name: "softmax".into(),
            max_rel_err: worst,
            tolerance: PRIMITIVE_TOL,
            passed: worst < PRIMITIVE_TOL,
        });
    }
    // Cross-entropy through softmax (the training loss head).
    prim!("softmax_cross_entropy", vec![rand_tensor(3, 8, &mut r)], {
        move |t: &mut Tape<f64>, v: &[Value]| {
            let p = t.softmax(v[0]);
            let picked = t.gather_col(p, vec![2, 7, 0]);
            let lp = t.ln_clamped(picked, 1e-30);
            let m = t.mean_all(lp);
            t.mul_const(m, -1.0)
        }
    });
    // Batch-norm block as composed in the training unroll.
    prim!("batch_norm", vec![rand_tensor(6, 1, &mut r)], {
        let c = pr.clone();
        move |t: &mut Tape<f64>, v: &[Value]| {
            let m = t.mean_all(v[0]);
            let centered = t.sub_scalar(v[0], m);
            let sq = t.mul(centered, centered);
            let var = t.mean_all(sq);
            let vf = t.clamp_min(var, 1e-8);
            let dev = t.sqrt(vf);
            let normed = t.div_scalar(centered, dev);
            project(t, normed, &mut c.clone())
        }
    });
    // GRU cell: gradient of the mean next state w.r.t. x, h and all nine
    // parameter tensors.
    {
        let cell: GruCell<f64> = GruCell::init(3, 4, &mut RngStream::new(seed, 2));
        let mut params: Vec<Tensor<f64>> = vec![rand_tensor(1, 3, &mut r), rand_tensor(1, 4, &mut r)];
        params.extend(cell.params().iter().map(|t| (*t).clone()));
        let rep = check_primitive::<f64>("gru_cell", params, PRIMITIVE_TOL, &{
            move |t: &mut Tape<f64>, v: &[Value]| {
                let cell_nodes = crate::nn::GruCellNodes {
                    w_r: v[2],
                    u_r: v[3],
                    b_r: v[4],
                    w_u: v[5],
                    u_u: v[6],
                    b_u: v[7],
                    w_c: v[8],
                    u_c: v[9],
                    b_c: v[10],
                };
                let h = gru_cell_step(t, v[0], v[1], &cell_nodes);
                t.mean_all(h)
            }
        });
        reports.push(rep);
    }

    reports.push(closed_loop_check(seed)?);
    Ok(reports)
}

/// FD check of the full encoder -> channel -> decoder unroll (K=4, N=6,
/// 8 neurons, batch 3, batch-live normalization) over every parameter.
pub fn closed_loop_check(seed: u64) -> Result<CheckReport> {
    let k = 4;
    let n = 6;
    let hidden = 8;
    let enc = EncoderModel::<f64>::init(
        k,
        n,
        2,
        hidden,
        EncoderMode::Feedback,
        PowerLayer::NormPower,
        &mut RngStream::new(seed, 10),
    );
    let dec = DecoderModel::<f64>::init(
        k,
        n,
        2,
        hidden,
        Direction::Bi,
        MergeCase::FullAttention,
        DecoderHead::Softmax,
        &mut RngStream::new(seed, 11),
    )?;
    let params = NoiseParams::new(0.794, 0.1)?;
    let mut data_rng = RngStream::new(seed, 12);
    let data = generate_batch::<f64>(&mut data_rng, 3, k, n, &params)?;
    let opts = UnrollOptions {
        norm: NormMode::BatchLive,
        detach_feedback: false,
    };

    let tensors: Vec<Tensor<f64>> = enc
        .trainable()
        .iter()
        .map(|(_, t)| (*t).clone())
        .chain(dec.trainable().iter().map(|(_, t)| (*t).clone()))
        .collect();

    let eval = |tensors: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut e = enc.clone();
        let mut d = dec.clone();
        set_trainable(&mut e, &mut d, tensors);
        let mut tape = Tape::new();
        let enc_nodes = bind_encoder(&mut tape, &e);
        let dec_nodes = bind_decoder(&mut tape, &d);
        let graph = build_episode_graph(&mut tape, &e, &enc_nodes, &d, &dec_nodes, &data, &opts)?;
        let loss = tape.value(graph.loss).item();
        if want_grads {
            tape.backward(graph.loss)?;
            let grads = enc_nodes
                .values()
                .into_iter()
                .chain(dec_nodes.values())
                .map(|v| tape.grad(v).clone())
                .collect();
            Ok((loss, grads))
        } else {
            Ok((loss, Vec::new()))
        }
    };

    let (_, analytic) = eval(&tensors, true)?;
    let mut forward = |t: &[Tensor<f64>]| eval(t, false).expect("closed-loop forward").0;
    let max_rel_err = max_rel_error_fd(&tensors, &analytic, &mut forward);
    Ok(CheckReport {
        name: "closed_loop_unroll".into(),
        max_rel_err,
        tolerance: CLOSED_LOOP_TOL,
        passed: max_rel_err < CLOSED_LOOP_TOL,
    })
}

/// Writes a flat tensor list back into the two models, in the canonical
/// trainable order.
pub fn set_trainable<S: Scalar>(
    enc: &mut EncoderModel<S>,
    dec: &mut DecoderModel<S>,
    tensors: &[Tensor<S>],
) {
    let mut slots = enc.trainable_mut();
    slots.extend(dec.trainable_mut());
    assert_eq!(slots.len(), tensors.len(), "trainable count mismatch");
    for (slot, t) in slots.into_iter().zip(tensors) {
        *slot = t.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitive_checks_pass() {
        let reports = run_gradchecks(1).unwrap();
        for rep in &reports {
            assert!(
                rep.passed,
                "{} failed: max rel err {} >= tol {}",
                rep.name, rep.max_rel_err, rep.tolerance
            );
        }
        assert!(reports.iter().any(|r| r.name == "closed_loop_unroll"));
    }

    #[test]
    fn cross_entropy_logit_gradient_is_probs_minus_onehot() {
        // Analytic identity check at the logits level, against both the
        // tape and finite differences.
        let logits = rand_tensor(1, 8, &mut RngStream::new(5, 0));
        let hot = 3usize;
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf_from(&logits);
        let p = tape.softmax(v);
        let picked = tape.gather_col(p, vec![hot]);
        let lp = tape.ln_clamped(picked, 1e-30);
        let m = tape.mean_all(lp);
        let loss = tape.mul_const(m, -1.0);
        tape.backward(loss).unwrap();
        let probs = tape.value(p).clone();
        let grad = tape.grad(v).clone();
        for j in 0..8 {
            let expect = probs.data()[j] - if j == hot { 1.0 } else { 0.0 };
            assert!(
                (grad.data()[j] - expect).abs() < 1e-12,
                "logit grad {} vs {}",
                grad.data()[j],
                expect
            );
        }
    }
}
