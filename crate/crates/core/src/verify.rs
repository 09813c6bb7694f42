//! Seeded finite-difference suite over every differentiable operation, the
//! full two-branch loss and the detection loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{detection_loss_node, DetectionHeadConfig};
use crate::error::Result;
use crate::model::{combined_loss, Heads, SgnetConfig, SgnetModel};
use crate::taxonomy::Taxonomy;
use crate::tensor::gradcheck::grad_check;
use crate::tensor::{Graph, NodeId, Tensor};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub op: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuite {
    pub eps: f64,
    pub threshold: f64,
    pub cases: Vec<GradCase>,
}

impl GradSuite {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error <= self.threshold)
    }

    /// `(op, cases, worst error)` in first-seen order.
    pub fn per_op(&self) -> Vec<(String, usize, f64)> {
        let mut out: Vec<(String, usize, f64)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(op, ..)| *op == c.op) {
                Some(e) => {
                    e.1 += 1;
                    e.2 = e.2.max(c.max_rel_error);
                }
                None => out.push((c.op.clone(), 1, c.max_rel_error)),
            }
        }
        out
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng).with_requires_grad(true)
}

/// Values bounded away from zero so no element sits on the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.1 + rng.random::<f64>();
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape").with_requires_grad(true)
}

/// Distinct values at least 0.05 apart, so pooling windows have no near-ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).expect("shape").with_requires_grad(true)
}

fn probe(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    Tensor::<f64>::randn(&[n], rng).into_data()
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>);

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "conv2d" => {
            let n = rng.random_range(1..=2);
            let cin = rng.random_range(1..=3);
            let cout = rng.random_range(1..=3);
            let k = [1, 2, 3][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let h = rng.random_range(k.max(3)..=5);
            let ho = (h + 2 * padding - k) / stride + 1;
            let p = probe(n * cout * ho * ho, rng);
            (
                vec![randn(&[n, cin, h, h], rng), randn(&[cout, cin, k, k], rng), randn(&[cout], rng)],
                Box::new(move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride, padding)?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        "maxpool2d" => {
            let (k, s) = [(2, 2), (3, 2), (2, 1)][rng.random_range(0..3)];
            let h = rng.random_range(4..=6);
            let c = rng.random_range(1..=2);
            let ho = (h - k) / s + 1;
            let p = probe(2 * c * ho * ho, rng);
            (
                vec![distinct(&[2, c, h, h], rng)],
                Box::new(move |g, ids| {
                    let y = g.maxpool2d(ids[0], k, s)?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        "relu" => {
            let p = probe(12, rng);
            (
                vec![off_kink(&[3, 4], rng)],
                Box::new(move |g, ids| {
                    let y = g.relu(ids[0])?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        "linear" => {
            let (n, i, o) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=4));
            let p = probe(n * o, rng);
            (
                vec![randn(&[n, i], rng), randn(&[o, i], rng), randn(&[o], rng)],
                Box::new(move |g, ids| {
                    let y = g.linear(ids[0], ids[1], ids[2])?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        "concat_channels" => {
            let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let p = probe(2 * (ca + cb) * 4, rng);
            (
                vec![randn(&[2, ca, 2, 2], rng), randn(&[2, cb, 2, 2], rng)],
                Box::new(move |g, ids| {
                    let y = g.concat_channels(ids[0], ids[1])?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        "flatten_reshape" => {
            let p = probe(24, rng);
            (
                vec![randn(&[2, 3, 2, 2], rng)],
                Box::new(move |g, ids| {
                    let f = g.flatten(ids[0])?;
                    let r = g.reshape(f, &[4, 6])?;
                    g.weighted_sum(r, &p)
                }),
            )
        }
        "softmax" => {
            let p = probe(12, rng);
            (
                vec![randn(&[3, 4], rng)],
                Box::new(move |g, ids| {
                    let y = g.softmax(ids[0])?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        "cross_entropy" => {
            let c = rng.random_range(2..=6);
            let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..c)).collect();
            (
                vec![randn(&[3, c], rng)],
                Box::new(move |g, ids| g.cross_entropy(ids[0], &targets)),
            )
        }
        "sum_scale_add" => {
            let factor = rng.random_range(-2.0..2.0);
            let p = probe(6, rng);
            (
                vec![randn(&[2, 3], rng), randn(&[2, 3], rng)],
                Box::new(move |g, ids| {
                    let s = g.scale(ids[0], factor)?;
                    let a = g.add(s, ids[1])?;
                    let total = g.sum(a)?;
                    let weighted = g.weighted_sum(a, &p)?;
                    g.add(total, weighted)
                }),
            )
        }
        "slice_cols" => {
            let d = rng.random_range(3..=7);
            let start = rng.random_range(0..d - 1);
            let end = rng.random_range(start + 1..=d);
            let p = probe(2 * (end - start), rng);
            (
                vec![randn(&[2, d], rng)],
                Box::new(move |g, ids| {
                    let y = g.slice_cols(ids[0], start, end)?;
                    g.weighted_sum(y, &p)
                }),
            )
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub const OPS: [&str; 10] = [
    "conv2d",
    "maxpool2d",
    "relu",
    "linear",
    "concat_channels",
    "flatten_reshape",
    "softmax",
    "cross_entropy",
    "sum_scale_add",
    "slice_cols",
];

fn sgnet_case(seed: u64) -> Result<(GradCase, GradCase)> {
    let cfg = SgnetConfig::preset("sgnet-tiny")?;
    let model = SgnetModel::<f64>::build(&cfg, seed)?;
    let t = Taxonomy::new(
        "tiny",
        vec![
            ("a".into(), vec!["a0".into(), "a1".into()]),
            ("b".into(), vec!["b0".into(), "b1".into()]),
        ],
        None,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| {
            // biases are zero at init; give them values so every path is exercised
            let mut q = p.clone();
            for v in q.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            q.with_requires_grad(true)
        })
        .collect();
    let np = inputs.len();
    inputs.push(randn(&[2, cfg.input_channels, cfg.input_size, cfg.input_size], &mut rng));
    let check = |alpha: f64| {
        grad_check(&inputs, SUITE_EPS, |g, ids| {
            let out = model.forward(g, &ids[..np], ids[np], Heads::Both)?;
            Ok(combined_loss(g, &out, &labels, &t, alpha)?.0)
        })
    };
    let r = check(0.5)?;
    let r2 = check(0.3)?;
    Ok((
        GradCase {
            op: "sgnet_combined_loss".into(),
            seed,
            max_rel_error: r.max_rel_error,
            elements: r.elements_checked,
        },
        GradCase {
            op: "sgnet_combined_loss".into(),
            seed,
            max_rel_error: r2.max_rel_error,
            elements: r2.elements_checked,
        },
    ))
}

fn detection_case(seed: u64, cfg: &DetectionHeadConfig) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.c_fc())).collect();
    let scores = randn(&[n, cfg.c()], &mut rng);
    let r = grad_check(&[scores], SUITE_EPS, |g, ids| Ok(detection_loss_node(g, ids[0], &labels, cfg)?.0))?;
    Ok(GradCase {
        op: "detection_class_loss".into(),
        seed,
        max_rel_error: r.max_rel_error,
        elements: r.elements_checked,
    })
}

/// Runs `cases_per_op` seeded instances of every primitive plus composite
/// cases; with the default of 10 this is 100 primitive cases.
pub fn gradcheck_suite(cases_per_op: usize, seed: u64) -> Result<GradSuite> {
    let mut cases = Vec::new();
    for (k, op) in OPS.iter().enumerate() {
        for i in 0..cases_per_op {
            let case_seed = seed.wrapping_add((k * 1000 + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let (inputs, f) = op_case(op, &mut rng);
            let r = grad_check(&inputs, SUITE_EPS, |g, ids| f(g, ids))?;
            cases.push(GradCase {
                op: op.to_string(),
                seed: case_seed,
                max_rel_error: r.max_rel_error,
                elements: r.elements_checked,
            });
        }
    }
    let composite = cases_per_op.div_ceil(2).max(1);
    for i in 0..composite {
        let (a, b) = sgnet_case(seed.wrapping_add(50_000 + i as u64))?;
        cases.push(a);
        cases.push(b);
    }
    let coco = DetectionHeadConfig::coco();
    for i in 0..composite {
        cases.push(detection_case(seed.wrapping_add(60_000 + i as u64), &coco)?);
    }
    Ok(GradSuite {
        eps: SUITE_EPS,
        threshold: SUITE_THRESHOLD,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let s = gradcheck_suite(1, 3).unwrap();
        assert!(s.passed(), "{:?}", s.per_op());
    }
}
