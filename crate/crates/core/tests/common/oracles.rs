//! Closed-form and loop oracles for the loss operators, the style operators,
//! and the model forward pass.

use std::collections::BTreeMap;

use xded_core::model::{self, init_parameters, Mode, ModelSpec, StyleOp, INPUT_CENTER, INPUT_GAIN};
use xded_core::regularizers::{
    self, ensemble_logits, groups_from_labels, kl_divergence, mixstyle_with, softmax_temperature, total_loss,
    unistyle, xded_loss, xded_loss_with_teacher, ClassGroup, Reduction, XdedConfig, STYLE_EPS,
};
use xded_core::{Tape, Tensor};

const EXACT: f64 = 1e-8;
const WITH_EPS: f64 = 1e-4;

fn softmax_ref(z: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn kl_ref(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn xded_ref(logits: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    let classes = logits[0].len();
    for y in 0..=*labels.iter().max().unwrap() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; classes];
        for &i in &members {
            for c in 0..classes {
                mean[c] += logits[i][c];
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        let teacher = softmax_ref(&mean, tau);
        for &i in &members {
            total += kl_ref(&teacher, &softmax_ref(&logits[i], tau));
        }
    }
    total
}

fn ce_ref(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| -softmax_ref(z, 1.0)[y].ln())
        .sum::<f64>()
        / n
}

fn fixture() -> (Vec<Vec<f64>>, Vec<usize>) {
    let logits = vec![
        vec![2.0, -1.0, 0.5],
        vec![0.3, 0.1, -0.7],
        vec![-1.5, 2.5, 0.0],
        vec![0.4, 1.2, 1.9],
    ];
    (logits, vec![0, 0, 1, 1])
}

fn logits_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

pub fn softmax_matches_scalar_formula() {
    let mut rng = super::rng(1);
    for tau in [0.5, 1.0, 4.0] {
        let z = super::uniform(&mut rng, &[5, 7], -6.0, 6.0);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let p = softmax_temperature(&mut tape, v, tau).unwrap();
        for i in 0..5 {
            let expect = softmax_ref(z.row(i), tau);
            for (a, b) in tape.value(p).row(i).iter().zip(&expect) {
                assert!((a - b).abs() <= EXACT);
            }
            assert!((tape.value(p).row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 2], vec![4.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let pa = softmax_temperature(&mut tape, a, 4.0).unwrap();
    let pb = softmax_temperature(&mut tape, b, 1.0).unwrap();
    assert_eq!(tape.data(pa), tape.data(pb));
    assert!((tape.data(pb)[0] - 0.731_058_578_630_004_9).abs() <= EXACT);
}

pub fn kl_matches_loop_sum() {
    let mut rng = super::rng(2);
    for _ in 0..20 {
        let zp = super::uniform(&mut rng, &[3, 6], -3.0, 3.0);
        let zq = super::uniform(&mut rng, &[3, 6], -3.0, 3.0);
        let p: Vec<Vec<f64>> = (0..3).map(|i| softmax_ref(zp.row(i), 1.0)).collect();
        let q: Vec<Vec<f64>> = (0..3).map(|i| softmax_ref(zq.row(i), 1.0)).collect();
        let mut tape = Tape::new();
        let pv = tape.constant(logits_tensor(&p));
        let qv = tape.constant(logits_tensor(&q));
        let kl = kl_divergence(&mut tape, pv, qv).unwrap();
        let expect: f64 = (0..3).map(|i| kl_ref(&p[i], &q[i])).sum();
        assert!((tape.value(kl).item().unwrap() - expect).abs() <= EXACT);
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let q = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let kl = kl_divergence(&mut tape, p, q).unwrap();
    assert!((tape.value(kl).item().unwrap() - std::f64::consts::LN_2).abs() <= EXACT);
}

pub fn ensemble_is_loop_mean() {
    let mut rng = super::rng(3);
    let z = super::uniform(&mut rng, &[5, 4], -5.0, 5.0);
    let group = ClassGroup::new(1, vec![0, 2, 4]).unwrap();
    let mut tape = Tape::new();
    let v = tape.variable(z.clone());
    let e = ensemble_logits(&mut tape, v, &group).unwrap();
    let mut expect = [0.0; 4];
    for &i in &group.members {
        for c in 0..4 {
            expect[c] += z.row(i)[c];
        }
    }
    for (c, value) in tape.data(e).iter().enumerate() {
        assert_eq!(*value, expect[c] / 3.0);
    }
    assert!(!tape.requires_grad(e));
}

pub fn xded_matches_hand_computation() {
    let (logits, labels) = fixture();
    let groups = groups_from_labels(&labels);
    let expect = xded_ref(&logits, &labels, 4.0);
    for (reduction, scale) in [(Reduction::Sum, 1.0), (Reduction::Mean, 0.25)] {
        let mut tape = Tape::new();
        let v = tape.variable(logits_tensor(&logits));
        let loss = xded_loss(&mut tape, v, &groups, 4.0, reduction).unwrap();
        assert!((tape.value(loss).item().unwrap() - scale * expect).abs() <= EXACT);
    }
    assert!(expect > 0.0);
}

pub fn total_loss_is_composition_of_oracles() {
    let (logits, labels) = fixture();
    let groups = groups_from_labels(&labels);
    let cfg = XdedConfig::default();
    assert_eq!((cfg.lambda, cfg.tau), (5.0, 4.0));
    let mut tape = Tape::new();
    let v = tape.variable(logits_tensor(&logits));
    let terms = total_loss(&mut tape, v, &labels, &groups, &cfg).unwrap();
    let expect = ce_ref(&logits, &labels) + 5.0 * xded_ref(&logits, &labels, 4.0) / 4.0;
    assert!((tape.value(terms.total).item().unwrap() - expect).abs() <= EXACT);
    assert!((tape.value(terms.ce).item().unwrap() - ce_ref(&logits, &labels)).abs() <= EXACT);
}

fn channel_stats(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn unistyle_output_statistics() {
    let mut rng = super::rng(4);
    let x = super::uniform(&mut rng, &[2, 3, 4, 4], -2.0, 3.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = unistyle(&mut tape, v).unwrap();
    let y = tape.data(out);
    for nc in 0..6 {
        let src = &x.data()[nc * 16..(nc + 1) * 16];
        let (mu, sigma) = channel_stats(src);
        let got = &y[nc * 16..(nc + 1) * 16];
        for (g, s) in got.iter().zip(src) {
            assert!((g - (s - mu) / (sigma + STYLE_EPS)).abs() <= EXACT);
        }
        let (m, s) = channel_stats(got);
        assert!(m.abs() <= 1e-10);
        assert!((s - 1.0).abs() <= WITH_EPS);
    }
}

pub fn unistyle_fixed_points_and_affine_invariance() {
    let mut rng = super::rng(5);
    // Large spread keeps the ε guard below tolerance.
    let x = super::uniform(&mut rng, &[1, 2, 4, 4], -100.0, 100.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let once = unistyle(&mut tape, v).unwrap();
    let twice = unistyle(&mut tape, once).unwrap();
    for (a, b) in tape.data(once).iter().zip(tape.data(twice)) {
        assert!((a - b).abs() <= WITH_EPS);
    }
    let scaled: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| if i < 16 { 2.5 * v + 3.0 } else { 1.5 * v - 1.0 })
        .collect();
    let s = tape.constant(Tensor::new(vec![1, 2, 4, 4], scaled).unwrap());
    let out = unistyle(&mut tape, s).unwrap();
    for (a, b) in tape.data(once).iter().zip(tape.data(out)) {
        assert!((a - b).abs() <= 1e-6);
    }
}

pub fn mixstyle_swap_carries_partner_statistics() {
    let mut rng = super::rng(6);
    let x = super::uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = mixstyle_with(&mut tape, v, &[0.0, 0.0], &[1, 0]).unwrap();
    let y = tape.data(out);
    for n in 0..2 {
        for c in 0..3 {
            let own = (n * 3 + c) * 16;
            let other = ((1 - n) * 3 + c) * 16;
            let (mu_o, sigma_o) = channel_stats(&x.data()[other..other + 16]);
            let (mu, sigma) = channel_stats(&y[own..own + 16]);
            assert!((mu - mu_o).abs() <= 1e-6);
            // The output deviation is the partner's guarded deviation scaled by
            // the standardized spread, sigma / (sigma + eps).
            let (_, sigma_in) = channel_stats(&x.data()[own..own + 16]);
            let expect = (sigma_o + STYLE_EPS) * sigma_in / (sigma_in + STYLE_EPS);
            assert!((sigma - expect).abs() <= 1e-6);
            assert!((sigma - sigma_o).abs() <= 1e-4);
        }
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let same = mixstyle_with(&mut tape, v, &[1.0, 1.0], &[0, 1]).unwrap();
    for (a, b) in tape.data(same).iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

pub fn teacher_path_receives_no_gradient() {
    let (logits, labels) = fixture();
    let groups = groups_from_labels(&labels);
    let mut tape = Tape::new();
    let student = tape.variable(logits_tensor(&logits));
    let teacher = tape.variable(logits_tensor(&logits));
    let loss = xded_loss_with_teacher(&mut tape, student, teacher, &groups, 4.0, Reduction::Mean).unwrap();
    tape.backward(loss).unwrap();
    let tg = tape.grad(teacher).map(|g| g.to_vec()).unwrap_or(vec![0.0; 12]);
    assert!(tg.iter().all(|&g| g == 0.0));
    assert!(tape.grad(student).unwrap().iter().any(|&g| g != 0.0));
}

pub fn explicit_teacher_block_changes_no_gradient() {
    let (logits, labels) = fixture();
    let groups = groups_from_labels(&labels);
    let grads = |blocked: bool| {
        let mut tape = Tape::new();
        let z = tape.variable(logits_tensor(&logits));
        let teacher = if blocked { tape.detach(z) } else { z };
        let loss = xded_loss_with_teacher(&mut tape, z, teacher, &groups, 4.0, Reduction::Mean).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).item().unwrap(), tape.grad(z).unwrap().to_vec())
    };
    assert_eq!(grads(false), grads(true));
}

pub fn identical_groups_give_exact_zero_loss_and_gradient() {
    let row_a = [0.7, -1.3, 2.1, 0.0];
    let row_b = [-0.2, 0.9, 0.4, 1.7];
    let logits = vec![row_a.to_vec(), row_b.to_vec(), row_a.to_vec(), row_b.to_vec(), row_b.to_vec()];
    let labels = [0, 1, 0, 1, 1];
    let groups = groups_from_labels(&labels);
    for reduction in [Reduction::Mean, Reduction::Sum] {
        let mut tape = Tape::new();
        let z = tape.variable(logits_tensor(&logits));
        let loss = xded_loss(&mut tape, z, &groups, 4.0, reduction).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        assert!(tape.grad(z).unwrap().iter().all(|&g| g == 0.0));
    }
    let mut tape = Tape::new();
    let z = tape.variable(logits_tensor(&logits[..1]));
    let single = [ClassGroup::new(0, vec![0]).unwrap()];
    let loss = xded_loss(&mut tape, z, &single, 4.0, Reduction::Mean).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    assert!(tape.grad(z).unwrap().iter().all(|&g| g == 0.0));
}

pub fn detached_parameter_gets_no_gradient_through_the_model() {
    let spec = ModelSpec::default();
    let params = init_parameters(&spec, 3).unwrap();
    let mut rng = super::rng(7);
    let x = super::uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    let mut tape = Tape::new();
    let mut vars = params.attach(&mut tape, true);
    let head = vars["head.weight"];
    let frozen = tape.detach(head);
    vars.insert("head.weight".into(), frozen);
    let input = tape.constant(x);
    let out = model::forward(&mut tape, &vars, &spec, input, Mode::Eval).unwrap();
    let loss = regularizers::cross_entropy(&mut tape, out.logits, &[0, 1]).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(head).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    assert!(tape.grad(vars["block1.kernel"]).unwrap().iter().any(|&v| v != 0.0));
}

/// Straight-line loop evaluation of the classifier, sharing no code with the tape.
fn reference_logits(params: &model::ParameterSet, spec: &ModelSpec, image: &[f64]) -> Vec<f64> {
    let mut size = spec.image_size;
    let mut channels = spec.input_channels;
    let mut x: Vec<f64> = image.iter().map(|v| (v - INPUT_CENTER) * INPUT_GAIN).collect();
    for (b, &out_ch) in spec.blocks.iter().enumerate() {
        let kernel = params.get(&format!("block{}.kernel", b + 1)).unwrap().data();
        let bias = params.get(&format!("block{}.bias", b + 1)).unwrap().data();
        let mut h = vec![0.0; out_ch * size * size];
        for k in 0..out_ch {
            for i in 0..size {
                for j in 0..size {
                    let mut acc = bias[k];
                    for c in 0..channels {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii < 0 || jj < 0 || ii >= size as isize || jj >= size as isize {
                                    continue;
                                }
                                acc += kernel[((k * channels + c) * 3 + di) * 3 + dj]
                                    * x[(c * size + ii as usize) * size + jj as usize];
                            }
                        }
                    }
                    h[(k * size + i) * size + j] = acc;
                }
            }
        }
        if spec.style_at(b + 1) == StyleOp::Unistyle {
            for k in 0..out_ch {
                let plane = &mut h[k * size * size..(k + 1) * size * size];
                let (mu, sigma) = channel_stats(plane);
                for v in plane.iter_mut() {
                    *v = (*v - mu) / (sigma + STYLE_EPS);
                }
            }
        }
        let half = size / 2;
        let mut pooled = vec![0.0; out_ch * half * half];
        for k in 0..out_ch {
            for i in 0..half {
                for j in 0..half {
                    let mut s = 0.0;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += h[(k * size + 2 * i + di) * size + 2 * j + dj].max(0.0);
                    }
                    pooled[(k * half + i) * half + j] = s / 4.0;
                }
            }
        }
        x = pooled;
        size = half;
        channels = out_ch;
    }
    let area = (size * size) as f64;
    let embedding: Vec<f64> = (0..channels)
        .map(|c| x[c * size * size..(c + 1) * size * size].iter().sum::<f64>() / area)
        .collect();
    let w = params.get("head.weight").unwrap();
    let bias = params.get("head.bias").unwrap().data();
    (0..spec.num_classes)
        .map(|k| bias[k] + w.row(k).iter().zip(&embedding).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn forward_matches_straight_line_reference() {
    let mut rng = super::rng(8);
    for style in [StyleOp::None, StyleOp::Unistyle] {
        let spec = ModelSpec {
            style_ops: BTreeMap::from([(1, style)]),
            ..ModelSpec::default()
        };
        let mut params = init_parameters(&spec, 11).unwrap();
        for (name, t) in params.iter_mut() {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = 0.05;
                }
            }
        }
        let x = super::uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
        let logits = model::eval_logits(&params, &spec, &x).unwrap();
        for n in 0..2 {
            let expect = reference_logits(&params, &spec, &x.data()[n * 768..(n + 1) * 768]);
            for (a, b) in logits.row(n).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }
}
