#![allow(dead_code)]

use fedic::calibration::{
    average_ensemble, calibration_loss_and_gradients, classwise_adjust, client_weights, ensemble_logits, fuse,
    CalibrationInputs, CalibrationParams, Toggles,
};
use fedic::distillation::{distill_gradients, distill_loss, DistillBatch, DistillConfig};
use fedic::nn::{
    compute_gradients, cross_entropy_gradients, kl_distill_loss, mean_cross_entropy, softmax_cross_entropy, Architecture,
    Graph, MlpModel, ParamSet, Var,
};
use fedic::{sigmoid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradient agreement bound for every op.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Fixtures whose ReLU pre-activations come closer than this to zero are
/// redrawn, since the finite difference straddles the kink there.
pub const KINK_GUARD: f64 = 0.05;
pub const FIXTURES_PER_OP: usize = 20;

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients
/// from inflating the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every scalar in `params`.
pub fn fd_check<P, G>(params: &P, analytic: &G, loss: impl Fn(&P) -> f64) -> f64
where
    P: ParamSet<f64> + Clone,
    G: ParamSet<f64>,
{
    let grads = analytic.param_slices();
    let shape: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
    assert_eq!(shape, grads.iter().map(|s| s.len()).collect::<Vec<_>>(), "gradient tree shape");
    let mut worst: f64 = 0.0;
    for (s, grad) in grads.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            let mut plus = params.clone();
            plus.param_slices_mut()[s][i] += FD_STEP;
            let mut minus = params.clone();
            minus.param_slices_mut()[s][i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Plain list of tensors, for checking raw graph ops.
#[derive(Clone)]
pub struct Inputs(pub Vec<Tensor<f64>>);

impl ParamSet<f64> for Inputs {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.0.iter().map(|t| t.data()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.iter_mut().map(|t| t.data_mut()).collect()
    }
}

/// Builds `build` on fresh parameter nodes for `inputs` and compares the
/// tape's gradients with central differences of the tape's own forward value.
pub fn check_graph(inputs: &Inputs, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |inp: &Inputs| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inp.0.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let analytic = Inputs(vars.iter().map(|&v| grads.get_or_zeros(v)).collect());
    fd_check(inputs, &analytic, |p| {
        let (g, _, l) = eval(p);
        g.value(l).item().unwrap()
    })
}

pub fn small_arch(input: usize, classes: usize) -> Architecture {
    Architecture {
        input_dim: input,
        hidden: vec![5],
        feature_dim: 4,
        class_count: classes,
    }
}

/// Kaiming init plus random biases, so no unit starts exactly at zero.
pub fn random_model(arch: &Architecture, seed: u64) -> MlpModel<f64> {
    let mut m = MlpModel::<f64>::init(arch, seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for s in m.param_slices_mut() {
        for v in s.iter_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    m
}

/// Smallest `|pre-activation|` over every ReLU unit and every row of `x`.
pub fn min_relu_margin(model: &MlpModel<f64>, x: &Tensor<f64>) -> f64 {
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for layer in model.feature_layers() {
        let mut z = h.matmul(layer.weights()).unwrap();
        let m = z.cols();
        for row in z.data_mut().chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(layer.bias().data()) {
                *o += b;
            }
        }
        margin = margin.min(z.data().iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
        h = z.map(|v| v.max(0.0));
    }
    margin
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Calibrated logits computed sample by sample from the formula functions,
/// independent of the tape.
pub fn reference_calibration_loss(p: &CalibrationParams<f64>, inputs: &CalibrationInputs<f64>, t: Toggles) -> f64 {
    let n = inputs.len();
    let mut total = 0.0;
    for i in 0..n {
        let rows: Vec<Vec<f64>> = inputs.client_logits.iter().map(|l| l.row(i).to_vec()).collect();
        let phi = Tensor::from_rows(&rows).unwrap();
        let z_cl = if t.logit_adjust {
            let e = client_weights(&phi, &p.a_e, p.b_e).unwrap();
            let ens = ensemble_logits(&phi, &e).unwrap();
            Some(classwise_adjust(&ens, &p.a_z, &p.b_z).unwrap())
        } else {
            None
        };
        let z_ft = inputs.z_ft.as_ref().map(|z| z.row(i).to_vec());
        let z = match (z_cl, z_ft) {
            (Some(cl), Some(ft)) => {
                let v = inputs.feature_mean.row(i);
                let s = sigmoid(v.iter().zip(&p.u).map(|(a, b)| a * b).sum::<f64>());
                fuse(&cl, &ft, s).unwrap()
            }
            (Some(cl), None) => cl,
            (None, Some(ft)) => ft,
            (None, None) => average_ensemble(&phi).unwrap(),
        };
        total += softmax_cross_entropy(&z, inputs.labels[i]).unwrap();
    }
    total / n as f64
}

pub fn random_calibration(rng: &mut ChaCha8Rng, classes: usize, feat: usize) -> CalibrationParams<f64> {
    let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    CalibrationParams {
        a_e: v(classes, -0.5, 0.5),
        b_e: v(1, -0.5, 0.5)[0],
        a_z: v(classes, 0.5, 1.5),
        b_z: v(classes, -0.5, 0.5),
        u: v(feat, -0.5, 0.5),
    }
}

pub fn random_inputs(rng: &mut ChaCha8Rng, clients: usize, n: usize, classes: usize, feat: usize, ft: bool) -> CalibrationInputs<f64> {
    CalibrationInputs {
        client_logits: (0..clients).map(|_| uniform(rng, vec![n, classes], -3.0, 3.0)).collect(),
        feature_mean: uniform(rng, vec![n, feat], 0.0, 2.0),
        z_ft: ft.then(|| uniform(rng, vec![n, classes], -3.0, 3.0)),
        labels: random_labels(rng, n, classes),
    }
}

/// One named family of gradient fixtures with its worst relative error.
pub struct GradReport {
    pub op: &'static str,
    pub fixtures: usize,
    pub worst: f64,
}

fn family(op: &'static str, mut one: impl FnMut(u64) -> Option<f64>) -> GradReport {
    let mut worst: f64 = 0.0;
    let mut fixtures = 0;
    let mut seed = 0;
    while fixtures < FIXTURES_PER_OP {
        seed += 1;
        assert!(seed < 100 * FIXTURES_PER_OP as u64, "{op}: too many rejected fixtures");
        if let Some(e) = one(seed) {
            worst = worst.max(e);
            fixtures += 1;
        }
    }
    GradReport { op, fixtures, worst }
}

/// Every differentiable operation the trainer relies on.
pub fn gradient_suite() -> Vec<GradReport> {
    let mut out = Vec::new();

    // Network forward through a linear functional of the logits.
    out.push(family("mlp forward", |seed| {
        let mut r = rng(seed);
        let arch = small_arch(3, 4);
        let m = random_model(&arch, seed);
        let x = uniform(&mut r, vec![3, 3], -1.0, 1.0);
        if min_relu_margin(&m, &x) < KINK_GUARD {
            return None;
        }
        let w = uniform(&mut r, vec![4], -1.0, 1.0);
        let (_, grads) = compute_gradients(&m, |g, vars| {
            let xv = g.constant(x.clone());
            let (_, logits) = vars.forward(g, xv)?;
            let wv = g.constant(w.clone());
            let weighted = g.mul_row(logits, wv)?;
            g.mean(weighted)
        })
        .unwrap();
        Some(fd_check(&m, &grads, |p| {
            let l = p.logits(&x).unwrap();
            l.data().chunks(4).flat_map(|row| row.iter().zip(w.data()).map(|(a, b)| a * b)).sum::<f64>() / 12.0
        }))
    }));

    out.push(family("mlp cross-entropy", |seed| {
        let mut r = rng(seed);
        let arch = small_arch(4, 3);
        let m = random_model(&arch, seed);
        let x = uniform(&mut r, vec![5, 4], -1.0, 1.0);
        if min_relu_margin(&m, &x) < KINK_GUARD {
            return None;
        }
        let y = random_labels(&mut r, 5, 3);
        let (_, grads) = cross_entropy_gradients(&m, &x, &y).unwrap();
        Some(fd_check(&m, &grads, |p| mean_cross_entropy(p, &x, &y).unwrap()))
    }));

    out.push(family("cross-entropy", |seed| {
        let mut r = rng(seed);
        let logits = Inputs(vec![uniform(&mut r, vec![4, 5], -4.0, 4.0)]);
        let y = random_labels(&mut r, 4, 5);
        Some(check_graph(&logits, |g, v| g.cross_entropy(v[0], &y).unwrap()))
    }));

    out.push(family("kl divergence", |seed| {
        let mut r = rng(seed);
        let student = uniform(&mut r, vec![3, 4], -3.0, 3.0);
        let teacher = uniform(&mut r, vec![3, 4], -3.0, 3.0);
        let t = [0.5, 1.0, 2.0, 4.0][seed as usize % 4];
        let inputs = Inputs(vec![student]);
        let analytic_vs_graph = check_graph(&inputs, |g, v| g.kl_divergence(&teacher, v[0], t).unwrap());
        // Also against the row-wise reference loss.
        let mut g = Graph::new();
        let s = g.param(inputs.0[0].clone());
        let l = g.kl_divergence(&teacher, s, t).unwrap();
        let grads = g.backward(l).unwrap();
        let reference = fd_check(&inputs, &Inputs(vec![grads.get_or_zeros(s)]), |p| {
            (0..3).map(|i| kl_distill_loss(teacher.row(i), p.0[0].row(i), t).unwrap()).sum::<f64>() / 3.0
        });
        Some(analytic_vs_graph.max(reference))
    }));

    out.push(family("tape primitives", |seed| {
        let mut r = rng(seed);
        let inputs = Inputs(vec![
            uniform(&mut r, vec![3, 4], -1.0, 1.0),
            uniform(&mut r, vec![4, 2], -1.0, 1.0),
            uniform(&mut r, vec![2], -1.0, 1.0),
            uniform(&mut r, vec![3, 2], 0.5, 1.5),
            uniform(&mut r, vec![1], -1.0, 1.0),
            uniform(&mut r, vec![2], -1.0, 1.0),
        ]);
        Some(check_graph(&inputs, |g, v| {
            let a = g.matmul(v[0], v[1]).unwrap(); // [3×2]
            let b = g.add_row(a, v[2]).unwrap();
            let c = g.mul_row(b, v[5]).unwrap();
            let s = g.sigmoid(c);
            let pos = g.add(s, v[3]).unwrap(); // strictly positive rows
            let norm = g.row_normalize(pos).unwrap();
            let col0 = g.column(norm, 0).unwrap();
            let col1 = g.matvec(v[3], v[2]).unwrap();
            let stacked = g.stack_cols(&[col0, col1]).unwrap();
            let scaled = g.mul_col(stacked, col0).unwrap();
            let shifted = g.add_scalar(scaled, v[4]).unwrap();
            let om = g.one_minus(shifted);
            let d = g.sub(om, v[3]).unwrap();
            let e = g.scale(d, 0.7);
            let sq = g.mul_col(e, col1).unwrap();
            g.mean(sq).unwrap()
        }))
    }));

    out.push(family("relu", |seed| {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![2, 5], -1.0, 1.0);
        if x.data().iter().any(|v| v.abs() < KINK_GUARD) {
            return None;
        }
        let w = uniform(&mut r, vec![5], -1.0, 1.0);
        Some(check_graph(&Inputs(vec![x, w]), |g, v| {
            let h = g.relu(v[0]);
            let y = g.matvec(h, v[1]).unwrap();
            g.mean(y).unwrap()
        }))
    }));

    for (op, toggles) in [
        ("calibration (all on)", Toggles::ALL),
        ("calibration (adjust only)", Toggles { fine_tune: false, logit_adjust: true }),
        ("calibration (fine-tune only)", Toggles { fine_tune: true, logit_adjust: false }),
    ] {
        out.push(family(op, |seed| {
            let mut r = rng(seed);
            let (k, c, d) = (3, 4, 3);
            let inputs = random_inputs(&mut r, k, 6, c, d, toggles.fine_tune);
            let p = random_calibration(&mut r, c, d);
            let (value, grads) = calibration_loss_and_gradients(&p, &inputs, toggles).unwrap();
            let reference = reference_calibration_loss(&p, &inputs, toggles);
            let value_err = rel_err(value, reference);
            Some(value_err.max(fd_check(&p, &grads, |q| reference_calibration_loss(q, &inputs, toggles))))
        }));
    }

    for (op, lambda) in [
        ("distillation (lambda 0)", 0.0),
        ("distillation (lambda 0.3)", 0.3),
        ("distillation (lambda 0.5)", 0.5),
        ("distillation (lambda 1)", 1.0),
    ] {
        out.push(family(op, |seed| {
            let mut r = rng(seed);
            let arch = small_arch(3, 4);
            let m = random_model(&arch, seed + 1000);
            let aux_x = uniform(&mut r, vec![4, 3], -1.0, 1.0);
            let ulb_x = uniform(&mut r, vec![5, 3], -1.0, 1.0);
            if min_relu_margin(&m, &aux_x).min(min_relu_margin(&m, &ulb_x)) < KINK_GUARD {
                return None;
            }
            let cfg = DistillConfig {
                lambda,
                temperature: [1.0, 2.0][seed as usize % 2],
                ..DistillConfig::default()
            };
            let batch = DistillBatch {
                aux_y: random_labels(&mut r, 4, 4),
                teacher_logits: uniform(&mut r, vec![5, 4], -3.0, 3.0),
                aux_x,
                ulb_x,
            };
            let (_, grads) = distill_gradients(&m, &batch, &cfg).unwrap();
            Some(fd_check(&m, &grads, |p| {
                distill_loss(
                    &p.logits(&batch.aux_x).unwrap(),
                    &batch.aux_y,
                    &p.logits(&batch.ulb_x).unwrap(),
                    &batch.teacher_logits,
                    &cfg,
                )
                .unwrap()
            }))
        }));
    }
    out
}
