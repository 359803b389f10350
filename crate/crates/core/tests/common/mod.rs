//! Independent oracles and finite-difference harnesses shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadg_core::gradcheck::{check_gradients, weighted_sum, FD_STEP};
use sadg_core::losses::{
    adversarial_loss, avg_score_alignment_loss, composite_loss, cross_entropy,
    feature_alignment_loss, scale_alignment_loss, triplet_loss, LossWeights, TripletMining,
};
use sadg_core::models::{DomainDiscriminator, Module, TaskNetwork};
use sadg_core::tensor::Result as TResult;
use sadg_core::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with `|x - kink| >= gap`, so piecewise ops are smooth under the
/// finite-difference step.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                kink + mag
            } else {
                kink - mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    // every class present
    let mut l: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.gen_range(0..=i));
    }
    l
}

// ---------------------------------------------------------------------------
// finite-difference cases

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> TResult<Var>>);

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "add_scalar",
    "matmul",
    "dense",
    "relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "clamp_min",
    "sum",
    "mean",
    "sum_rows",
    "mean_axis0",
    "softmax",
    "log_softmax",
    "concat",
    "reshape",
    "gather_rows",
    "gather",
    "conv2d",
    "conv2d_strided",
    "max_pool2d",
    "global_avg_pool",
    "grad_reverse",
    "normalize_rows",
    "pairwise_sq_dist",
];

fn reduce(w: Tensor) -> impl Fn(&mut Tape, Var) -> TResult<Var> {
    move |t: &mut Tape, x: Var| weighted_sum(t, x, &w)
}

/// One random instance of primitive `name`, reduced to a scalar with random
/// upstream weights.
pub fn primitive_case(name: &str, r: &mut ChaCha8Rng) -> Case {
    let m = r.gen_range(2..5);
    let n = r.gen_range(2..5);
    let k = r.gen_range(2..4);
    let w_mn = uniform(r, &[m, n], -1.0, 1.0);
    match name {
        "add" | "sub" | "mul" => {
            let a = uniform(r, &[m, n], -2.0, 2.0);
            let b = uniform(r, &[m, n], -2.0, 2.0);
            let red = reduce(w_mn);
            let op = name.to_string();
            (
                vec![a, b],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    red(t, y)
                }),
            )
        }
        "add_bias" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[n], -1.0, 1.0);
            let red = reduce(w_mn);
            (vec![x, b], Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                red(t, y)
            }))
        }
        "scale" | "add_scalar" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let c = r.gen_range(-2.0..2.0);
            let red = reduce(w_mn);
            let is_scale = name == "scale";
            (vec![x], Box::new(move |t, v| {
                let y = if is_scale { t.scale(v[0], c) } else { t.add_scalar(v[0], c) };
                red(t, y)
            }))
        }
        "matmul" => {
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, n], -1.0, 1.0);
            let red = reduce(w_mn);
            (vec![a, b], Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                red(t, y)
            }))
        }
        "dense" => {
            let x = uniform(r, &[m, k], -1.0, 1.0);
            let w = uniform(r, &[k, n], -1.0, 1.0);
            let b = uniform(r, &[n], -1.0, 1.0);
            let red = reduce(w_mn);
            (vec![x, w, b], Box::new(move |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                red(t, y)
            }))
        }
        "relu" | "clamp_min" => {
            let floor = if name == "relu" { 0.0 } else { 0.2 };
            let x = away_from(r, &[m, n], floor, 0.01);
            let red = reduce(w_mn);
            let relu = name == "relu";
            (vec![x], Box::new(move |t, v| {
                let y = if relu { t.relu(v[0]) } else { t.clamp_min(v[0], floor) };
                red(t, y)
            }))
        }
        "exp" | "log" | "sqrt" | "square" => {
            let x = uniform(r, &[m, n], 0.2, 2.0);
            let red = reduce(w_mn);
            let op = name.to_string();
            (vec![x], Box::new(move |t, v| {
                let y = match op.as_str() {
                    "exp" => t.exp(v[0]),
                    "log" => t.log(v[0]),
                    "sqrt" => t.sqrt(v[0]),
                    _ => t.square(v[0]),
                };
                red(t, y)
            }))
        }
        "sum" | "mean" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let c = r.gen_range(0.5..2.0);
            let is_sum = name == "sum";
            (vec![x], Box::new(move |t, v| {
                let y = if is_sum { t.sum(v[0]) } else { t.mean(v[0]) };
                // a non-unit upstream gradient
                let sq = t.square(y);
                Ok(t.scale(sq, c))
            }))
        }
        "sum_rows" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let red = reduce(uniform(r, &[m], -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = t.sum_rows(v[0])?;
                red(t, y)
            }))
        }
        "mean_axis0" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let red = reduce(uniform(r, &[1, n], -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = t.mean_axis0(v[0])?;
                red(t, y)
            }))
        }
        "softmax" | "log_softmax" => {
            let x = uniform(r, &[m, n], -3.0, 3.0);
            let red = reduce(w_mn);
            let soft = name == "softmax";
            (vec![x], Box::new(move |t, v| {
                let y = if soft { t.softmax(v[0])? } else { t.log_softmax(v[0])? };
                red(t, y)
            }))
        }
        "concat" => {
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[k, n], -1.0, 1.0);
            let red = reduce(uniform(r, &[m + k, n], -1.0, 1.0));
            (vec![a, b], Box::new(move |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                red(t, y)
            }))
        }
        "reshape" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let red = reduce(uniform(r, &[n, m], -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = t.reshape(v[0], &[n, m])?;
                red(t, y)
            }))
        }
        "gather_rows" | "gather" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let rows = name == "gather_rows";
            let len = if rows { m } else { m * n };
            // repeated indices exercise gradient accumulation
            let idx: Vec<usize> = (0..len + 2).map(|_| r.gen_range(0..len)).collect();
            let out_shape = if rows { vec![idx.len(), n] } else { vec![idx.len()] };
            let red = reduce(uniform(r, &out_shape, -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = if rows { t.gather_rows(v[0], &idx)? } else { t.gather(v[0], &idx)? };
                red(t, y)
            }))
        }
        "conv2d" | "conv2d_strided" => {
            let (stride, pad) = if name == "conv2d" { (1, 1) } else { (2, 0) };
            let (b, c, o, h) = (2, r.gen_range(1..3), r.gen_range(1..3), 5);
            let x = uniform(r, &[b, c, h, h], -1.0, 1.0);
            let w = uniform(r, &[o, c, 3, 3], -1.0, 1.0);
            let bias = uniform(r, &[o], -1.0, 1.0);
            let out = (h + 2 * pad - 3) / stride + 1;
            let red = reduce(uniform(r, &[b, o, out, out], -1.0, 1.0));
            (vec![x, w, bias], Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                red(t, y)
            }))
        }
        "max_pool2d" => {
            let x = uniform(r, &[2, 2, 4, 4], -1.0, 1.0);
            let red = reduce(uniform(r, &[2, 2, 2, 2], -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = t.max_pool2d(v[0], 2, 2)?;
                red(t, y)
            }))
        }
        "global_avg_pool" => {
            let x = uniform(r, &[2, 3, 3, 3], -1.0, 1.0);
            let red = reduce(uniform(r, &[2, 3], -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = t.global_avg_pool(v[0])?;
                red(t, y)
            }))
        }
        "grad_reverse" => {
            // a reversal is undone by a second one with the inverse scale,
            // which makes the composition comparable to plain differences
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let lambda = r.gen_range(0.25..2.0);
            let red = reduce(w_mn);
            (vec![x], Box::new(move |t, v| {
                let y = t.grad_reverse(v[0], lambda);
                let z = t.grad_reverse(y, 1.0 / lambda);
                let sq = t.square(z);
                red(t, sq)
            }))
        }
        "normalize_rows" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let red = reduce(w_mn);
            (vec![x], Box::new(move |t, v| {
                let y = t.normalize_rows(v[0], 1e-12)?;
                red(t, y)
            }))
        }
        "pairwise_sq_dist" => {
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let red = reduce(uniform(r, &[m, m], -1.0, 1.0));
            (vec![x], Box::new(move |t, v| {
                let y = t.pairwise_sq_dist(v[0])?;
                red(t, y)
            }))
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const LOSSES: &[&str] = &[
    "cross_entropy",
    "adversarial",
    "triplet_all",
    "triplet_hard",
    "scale_alignment",
    "feature_alignment",
    "avg_score_alignment",
    "composite",
];

fn disc_params(d: &DomainDiscriminator) -> Vec<Tensor> {
    d.params().iter().map(|p| p.value.clone()).collect()
}

/// One random instance of loss `name` as a function of all its inputs.
pub fn loss_case(name: &str, r: &mut ChaCha8Rng) -> Case {
    let batch = r.gen_range(4..9);
    let dim = r.gen_range(2..5);
    match name {
        "cross_entropy" => {
            let k = r.gen_range(2..4);
            let logits = uniform(r, &[batch, k], -3.0, 3.0);
            let y = labels(r, batch, k);
            (vec![logits], Box::new(move |t, v| Ok(cross_entropy(t, v[0], &y).unwrap())))
        }
        "adversarial" => {
            let domains = r.gen_range(2..4);
            let disc = DomainDiscriminator::new(dim, 3, domains, r).unwrap();
            let feats = uniform(r, &[batch, dim], -1.0, 1.0);
            let y = labels(r, batch, domains);
            let mut inputs = vec![feats];
            inputs.extend(disc_params(&disc));
            (inputs, Box::new(move |t, v| {
                // undo the built-in reversal so the feature gradient is the
                // plain derivative of the domain loss
                let f = t.grad_reverse(v[0], 1.0);
                Ok(adversarial_loss(t, &disc, &v[1..], f, &y, 1.0).unwrap())
            }))
        }
        "triplet_all" | "triplet_hard" => {
            let mining = if name == "triplet_all" { TripletMining::BatchAll } else { TripletMining::BatchHard };
            let e = uniform(r, &[batch, dim], -1.0, 1.0);
            let y = labels(r, batch, 2);
            (vec![e], Box::new(move |t, v| {
                let u = t.normalize_rows(v[0], 1e-12)?;
                Ok(triplet_loss(t, u, &y, 0.3, mining).unwrap())
            }))
        }
        "scale_alignment" | "avg_score_alignment" => {
            let large = uniform(r, &[batch, 2], -2.0, 2.0);
            let small = uniform(r, &[batch, 2], -2.0, 2.0);
            let y = labels(r, batch, 2);
            let pairwise = name == "scale_alignment";
            (vec![large, small], Box::new(move |t, v| {
                Ok(if pairwise {
                    scale_alignment_loss(t, v[0], v[1], &y).unwrap()
                } else {
                    avg_score_alignment_loss(t, v[0], v[1], &y).unwrap()
                })
            }))
        }
        "feature_alignment" => {
            let task = TaskNetwork::new(dim, r);
            let large = uniform(r, &[batch, dim], -1.0, 1.0);
            let small = uniform(r, &[batch, dim], -1.0, 1.0);
            let y = labels(r, batch, 2);
            let mut inputs = vec![large, small];
            inputs.extend(task.params().iter().map(|p| p.value.clone()));
            (inputs, Box::new(move |t, v| {
                Ok(feature_alignment_loss(t, &task, &v[2..], v[0], v[1], &y).unwrap())
            }))
        }
        "composite" => {
            let domains = 2;
            let disc = DomainDiscriminator::new(dim, 3, domains, r).unwrap();
            let task = TaskNetwork::new(dim, r);
            let n = batch.max(4) / 2;
            let feats = uniform(r, &[2 * n, dim], -1.0, 1.0);
            let y_pairs = labels(r, n, 2);
            let y: Vec<usize> = y_pairs.iter().chain(&y_pairs).copied().collect();
            let dom = labels(r, 2 * n, domains);
            let weights = LossWeights {
                lambda1: r.gen_range(0.05..0.5),
                lambda2: r.gen_range(0.05..0.5),
                lambda3: r.gen_range(0.05..0.5),
                margin: 0.3,
            };
            let mut inputs = vec![feats];
            inputs.extend(task.params().iter().map(|p| p.value.clone()));
            inputs.extend(disc_params(&disc));
            (inputs, Box::new(move |t, v| {
                let tv = &v[1..3];
                let dv = &v[3..];
                let f = t.grad_reverse(v[0], 1.0);
                let logits = task.classify(t, tv, v[0]).unwrap();
                let l_cls = cross_entropy(t, logits, &y).unwrap();
                let l_ada = adversarial_loss(t, &disc, dv, f, &dom, 1.0).unwrap();
                let u = t.normalize_rows(v[0], 1e-12)?;
                let l_trip = triplet_loss(t, u, &y, 0.3, TripletMining::BatchAll).unwrap();
                let rows: Vec<usize> = (0..n).collect();
                let partners: Vec<usize> = (n..2 * n).collect();
                let large = t.gather_rows(logits, &rows)?;
                let small = t.gather_rows(logits, &partners)?;
                let l_sa = scale_alignment_loss(t, large, small, &y_pairs).unwrap();
                Ok(composite_loss(t, &weights, l_cls, l_ada, l_trip, l_sa).unwrap())
            }))
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Worst relative error over `instances` random instances.
pub fn worst_error(case: fn(&str, &mut ChaCha8Rng) -> Case, name: &str, instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (inputs, f) = case(name, &mut r);
        let report = check_gradients(&inputs, |t, v| f(t, v), FD_STEP).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

// ---------------------------------------------------------------------------
// metric and loss oracles

/// Direct enumeration of every `(anchor, positive, negative)` triplet.
pub fn brute_triplet(emb: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let d = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..emb.len() {
        for p in 0..emb.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..emb.len() {
                if labels[n] == labels[a] {
                    continue;
                }
                let v = d(&emb[a], &emb[p]) - d(&emb[a], &emb[n]) + margin;
                total += if v > 0.0 { v } else { 0.0 };
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Pair counting over every (positive, negative) pair; ties count one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins2: u128 = 0;
    let (mut p, mut n) = (0usize, 0usize);
    for i in 0..scores.len() {
        if labels[i] == 1 {
            p += 1;
        } else {
            n += 1;
        }
    }
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] != 0 {
                continue;
            }
            if scores[i] > scores[j] {
                wins2 += 2;
            } else if scores[i] == scores[j] {
                wins2 += 1;
            }
        }
    }
    100.0 * wins2 as f64 / (2.0 * p as f64 * n as f64)
}

/// `(FAR, FRR)` by direct counting.
pub fn count_rates(scores: &[f64], labels: &[usize], t: f64) -> (f64, f64) {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    let mut missed = 0;
    let mut flagged = 0;
    for (s, l) in scores.iter().zip(labels) {
        if *l == 1 && *s < t {
            missed += 1;
        }
        if *l == 0 && *s >= t {
            flagged += 1;
        }
    }
    (missed as f64 / p as f64, flagged as f64 / n as f64)
}

/// Fraction of recaptures flagged at `t`.
pub fn detection_rate(scores: &[f64], labels: &[usize], t: f64) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count();
    let hit = scores.iter().zip(labels).filter(|(s, l)| **l == 1 && **s >= t).count();
    hit as f64 / p as f64
}

/// ROC by sweeping every midpoint between distinct scores plus both infinities.
pub fn sweep_roc(scores: &[f64], labels: &[usize]) -> Vec<(f64, f64)> {
    let mut d: Vec<f64> = scores.to_vec();
    d.sort_by(|a, b| b.partial_cmp(a).unwrap());
    d.dedup();
    let mut ts = vec![f64::INFINITY];
    for w in d.windows(2) {
        ts.push((w[0] + w[1]) / 2.0);
    }
    ts.push(f64::NEG_INFINITY);
    ts.iter()
        .map(|&t| {
            let (_, frr) = count_rates(scores, labels, t);
            (frr, detection_rate(scores, labels, t))
        })
        .collect()
}

/// Exhaustive EER threshold search over every partition of the source
/// scores, then direct HTER counting on the evaluation set.
pub fn sweep_hter(scores: &[f64], labels: &[usize], src: &[f64], src_labels: &[usize]) -> (f64, f64) {
    let mut d: Vec<f64> = src.to_vec();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d.dedup();
    let mut ts = vec![d[0]];
    for w in d.windows(2) {
        ts.push(0.5 * (w[0] + w[1]));
    }
    ts.push(d[d.len() - 1] + 1.0);
    let mut best_t = ts[0];
    let mut best_gap = f64::INFINITY;
    for &t in &ts {
        let (far, frr) = count_rates(src, src_labels, t);
        if (far - frr).abs() < best_gap {
            best_gap = (far - frr).abs();
            best_t = t;
        }
    }
    let (far, frr) = count_rates(scores, labels, best_t);
    (100.0 * (far + frr) / 2.0, best_t)
}

/// `½ Σ p ln(p/q) + q ln(q/p)` term by term.
pub fn direct_symkl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += p[i] * (p[i] / q[i]).ln() + q[i] * (q[i] / p[i]).ln();
    }
    0.5 * s
}

pub fn random_scores(r: &mut ChaCha8Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<usize>) {
    let y = labels(r, n, 2);
    let s = y
        .iter()
        .map(|&l| {
            let v: f64 = r.gen_range(0.0..1.0) + 0.3 * l as f64;
            if ties {
                (v * 8.0).round() / 8.0
            } else {
                v
            }
        })
        .collect();
    (s, y)
}
