use std::collections::BTreeMap;

use super::{away_from_zero, check_gradients, rng, uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xded_core::model::{self, Mode, ModelSpec, StyleOp};
use xded_core::regularizers::{self, ClassGroup, Reduction, XdedConfig};
use xded_core::{Tape, Tensor, Var};

const SEEDS: u64 = 20;

fn for_seeds(make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let inputs = make(&mut r);
        check_gradients(seed, &inputs, build);
    }
}

pub fn matmul_and_transpose() {
    for_seeds(
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)],
        &|t, v| {
            let bt = t.transpose(v[1]).unwrap();
            t.matmul(v[0], bt).unwrap()
        },
    );
}

pub fn add_row_broadcast() {
    for_seeds(
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
        &|t, v| t.add_row_broadcast(v[0], v[1]).unwrap(),
    );
}

pub fn conv2d() {
    for_seeds(
        |r| {
            vec![
                uniform(r, &[2, 2, 4, 5], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ]
        },
        &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
    );
}

pub fn elementwise_binary() {
    for_seeds(
        |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
        &|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(v[0], v[1]).unwrap();
            let m = t.mul(s, d).unwrap();
            let m = t.mul(m, v[1]).unwrap();
            let m = t.mul_scalar(m, -1.5);
            t.add_scalar(m, 0.25)
        },
    );
}

pub fn relu_and_clamp() {
    for_seeds(
        |r| vec![away_from_zero(r, &[4, 3], 2.0, 1e-3)],
        &|t, v| {
            let a = t.relu(v[0]);
            let shifted = t.add_scalar(v[0], 0.1);
            let b = t.clamp_min(shifted, 0.1);
            t.add(a, b).unwrap()
        },
    );
}

pub fn exp_and_log() {
    for_seeds(
        |r| vec![uniform(r, &[3, 3], 0.2, 2.0)],
        &|t, v| {
            let e = t.exp(v[0]);
            let l = t.log(v[0]).unwrap();
            t.mul(e, l).unwrap()
        },
    );
}

pub fn reductions() {
    for_seeds(
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
        &|t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            let s = t.sum(sq);
            let m = t.mean(v[0]);
            let p = t.mul(s, m).unwrap();
            t.add(p, m).unwrap()
        },
    );
}

pub fn pooling() {
    for_seeds(
        |r| vec![uniform(r, &[2, 3, 4, 6], -1.0, 1.0)],
        &|t, v| {
            let p = t.avgpool2x2(v[0]).unwrap();
            let sq = t.mul(p, p).unwrap();
            t.global_avg_pool(sq).unwrap()
        },
    );
}

pub fn softmax_and_log_softmax() {
    for tau in [0.5, 1.0, 4.0] {
        for_seeds(
            |r| vec![uniform(r, &[3, 5], -3.0, 3.0)],
            &|t, v| {
                let p = t.softmax_temperature(v[0], tau).unwrap();
                let l = t.log_softmax(v[0]).unwrap();
                t.add(p, l).unwrap()
            },
        );
    }
}

pub fn kl_divergence_of_softmaxes() {
    for_seeds(
        |r| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], -2.0, 2.0)],
        &|t, v| {
            let p = t.softmax_temperature(v[0], 1.0).unwrap();
            let q = t.softmax_temperature(v[1], 2.0).unwrap();
            t.kl_divergence(p, q, 1e-12).unwrap()
        },
    );
}

pub fn fused_softmax_kl() {
    for tau in [1.0, 4.0] {
        for_seeds(
            |r| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], -4.0, 4.0)],
            &|t, v| {
                let p = t.softmax_temperature(v[0], 1.0).unwrap();
                t.softmax_kl(p, v[1], tau, 1e-12).unwrap()
            },
        );
    }
}

pub fn row_selection_and_pick() {
    for_seeds(
        |r| vec![uniform(r, &[4, 3], -1.0, 1.0)],
        &|t, v| {
            let s = t.select_rows(v[0], &[2, 0, 2]).unwrap();
            let m = t.mean_rows(s).unwrap();
            let p = t.pick(v[0], &[1, 0, 2, 1]).unwrap();
            let ms = t.sum(m);
            let ps = t.sum(p);
            let ps = t.mul(ps, ms).unwrap();
            t.add(ps, ms).unwrap()
        },
    );
}

pub fn channel_statistics() {
    for_seeds(
        |r| vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
        &|t, v| {
            let m = t.channel_mean(v[0]).unwrap();
            let s = t.channel_std(v[0]).unwrap();
            t.mul(m, s).unwrap()
        },
    );
}

pub fn standardize() {
    for_seeds(
        |r| vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)],
        &|t, v| t.standardize(v[0], 1e-5).unwrap(),
    );
}

pub fn channel_affine() {
    for_seeds(
        |r| {
            vec![
                uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 3], 0.5, 1.5),
                uniform(r, &[2, 3], -1.0, 1.0),
            ]
        },
        &|t, v| t.channel_affine(v[0], v[1], v[2]).unwrap(),
    );
}

pub fn mixstyle_with_fixed_draws() {
    for_seeds(
        |r| vec![uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
        &|t, v| regularizers::mixstyle_with(t, v[0], &[0.3, 0.9, 0.05], &[2, 0, 1]).unwrap(),
    );
}

pub fn xded_loss_both_reductions() {
    let labels = [0, 1, 0, 2, 1, 0];
    let groups = regularizers::groups_from_labels(&labels);
    for reduction in [Reduction::Mean, Reduction::Sum] {
        for_seeds(
            |r| vec![uniform(r, &[6, 4], -3.0, 3.0)],
            &|t, v| regularizers::xded_loss(t, v[0], &groups, 4.0, reduction).unwrap(),
        );
    }
}

pub fn total_loss() {
    let labels = [0, 1, 0, 2, 1, 1];
    let groups = regularizers::groups_from_labels(&labels);
    let cfg = XdedConfig::default();
    for_seeds(
        |r| vec![uniform(r, &[6, 3], -3.0, 3.0)],
        &|t, v| regularizers::total_loss(t, v[0], &labels, &groups, &cfg).unwrap().total,
    );
}

const SIX: [usize; 6] = [0, 1, 0, 2, 1, 2];

fn small_spec(op: StyleOp) -> ModelSpec {
    ModelSpec {
        blocks: vec![3, 4],
        num_classes: 3,
        style_ops: [(1, op), (2, op)].into_iter().filter(|(_, o)| *o != StyleOp::None).collect(),
        ..ModelSpec::default()
    }
}

fn full_loss_check(op: StyleOp, use_xded: bool, labels: &[usize]) {
    let spec = small_spec(op);
    let names: Vec<String> = spec.parameter_shapes().into_iter().map(|(n, _)| n).collect();
    let groups: Vec<ClassGroup> = regularizers::groups_from_labels(labels);
    let cfg = XdedConfig::default();
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let images = uniform(&mut r, &[labels.len(), 3, 16, 16], 0.0, 1.0);
        let mut params = model::init_parameters(&spec, seed).unwrap();
        for (_, t) in params.iter_mut() {
            let noise = uniform(&mut r, &[t.numel()], -0.1, 0.1);
            for (w, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *w += n;
            }
        }
        let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let build = |t: &mut Tape, v: &[Var]| {
            let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
            let x = t.constant(images.clone());
            let mut style_rng = ChaCha8Rng::seed_from_u64(seed);
            let out = model::forward(t, &vars, &spec, x, Mode::Train(&mut style_rng)).unwrap();
            if use_xded {
                regularizers::total_loss(t, out.logits, labels, &groups, &cfg).unwrap().total
            } else {
                regularizers::cross_entropy(t, out.logits, labels).unwrap()
            }
        };
        check_gradients(seed, &inputs, &build);
    }
}

pub fn full_model_cross_entropy() {
    full_loss_check(StyleOp::None, false, &SIX);
}

pub fn full_model_xded_objective() {
    full_loss_check(StyleOp::None, true, &SIX);
}

pub fn full_model_xded_with_unistyle() {
    full_loss_check(StyleOp::Unistyle, true, &SIX);
}

pub fn full_model_with_mixstyle() {
    full_loss_check(StyleOp::Mixstyle, false, &SIX);
}

/// λ = 5, τ = 4 objective on four samples in two class groups.
pub fn full_model_four_samples_two_groups() {
    full_loss_check(StyleOp::None, true, &[0, 0, 1, 1]);
    full_loss_check(StyleOp::Unistyle, true, &[1, 0, 0, 1]);
}
