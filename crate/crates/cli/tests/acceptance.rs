//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use common::{
    brute_triplet, direct_symkl, loss_case, mann_whitney_auc, primitive_case, random_scores, rng, sweep_hter,
    sweep_roc, uniform, worst_error, LOSSES, PRIMITIVES,
};
use rand::Rng;
use sadg_core::eval::{auc, hter_at_eer, roc_curve};
use sadg_core::experiment::{execute_run, ExperimentPlan, Mode, RunOutput};
use sadg_core::losses::{
    adversarial_loss, composite_loss, cross_entropy, scale_alignment_loss, symmetric_kl, triplet_loss, LossWeights,
    ScoreDistribution, TripletMining,
};
use sadg_core::models::{BackboneSpec, NetworkSpec, Networks};
use sadg_core::sampler::{BalancedSampler, LossId, SamplerConfig, SourceView};
use sadg_core::synth::{
    default_domains, generate_corpus, stream_rng, Corpus, DomainCorpus, DEFAULT_CANVAS, DEFAULT_COUNT_PER_CLASS,
    DEFAULT_SEED,
};
use sadg_core::trainer::scale_divergence;
use sadg_core::{Tape, Tensor, Var};
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

const FD_TOL: f64 = 1e-4;
const FD_INSTANCES: usize = 20;
const FD_BUDGET: Duration = Duration::from_secs(60);
const SYMKL_TOL: f64 = 1e-12;
const COMPOSITE_TOL: f64 = 1e-10;
const SEEDS: [u64; 3] = [1, 2, 3];
const RUN_BUDGET: Duration = Duration::from_secs(600);
const MIN_GAIN: f64 = 2.0;
const MIN_TASKS: usize = 3;
const ABLATION_SLACK: f64 = 0.5;
const SA_RATIO: f64 = 0.5;
const SAMPLER_BATCHES: usize = 1000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn finite_differences() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (i, name) in PRIMITIVES.iter().enumerate() {
        let e = worst_error(primitive_case, name, FD_INSTANCES, 1000 + i as u64);
        if e > worst.0 {
            worst = (e, name);
        }
        checked += 1;
    }
    for (i, name) in LOSSES.iter().enumerate() {
        let e = worst_error(loss_case, name, FD_INSTANCES, 2000 + i as u64);
        if e > worst.0 {
            worst = (e, name);
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 <= FD_TOL && elapsed < FD_BUDGET,
        format!(
            "{checked} functions x {FD_INSTANCES} instances, worst rel err {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn small_networks(seed: u64, domains: usize) -> Networks {
    let spec = NetworkSpec {
        backbone: BackboneSpec {
            input_size: 8,
            in_channels: 3,
            channels: vec![4, 6],
            embed_dim: 6,
        },
        disc_hidden: 5,
        domains,
    };
    Networks::new(&spec, &mut stream_rng(seed, 0)).unwrap()
}

fn grad_bits(tape: &Tape, vars: &[Var]) -> Vec<u64> {
    vars.iter()
        .flat_map(|v| tape.grad(*v).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn gradient_reversal() -> Verdict {
    let mut r = rng(7);
    let mut forward_ok = true;
    let mut backward_ok = true;
    for _ in 0..50 {
        let x = uniform(&mut r, &[4, 3], -1e3, 1e3);
        let u = uniform(&mut r, &[4, 3], -10.0, 10.0);
        let lambda = r.gen_range(0.0..3.0);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.grad_reverse(v, lambda);
        forward_ok &= tape.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let w = tape.constant(u.clone());
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        backward_ok &= tape
            .grad(v)
            .unwrap()
            .iter()
            .zip(u.data())
            .all(|(g, ui)| g.to_bits() == (-lambda * ui).to_bits());
    }
    // D gradients with and without reversal, on real networks
    let mut disc_ok = true;
    let mut gen_ok = true;
    for seed in 0..10 {
        let nets = small_networks(seed, 3);
        let images = uniform(&mut rng(seed + 50), &[6, 3, 8, 8], 0.0, 1.0);
        let domains = [0, 1, 2, 2, 1, 0];
        let run = |lambda: Option<f64>| {
            let mut tape = Tape::new();
            let b = nets.bind(&mut tape);
            let x = tape.constant(images.clone());
            let f = nets.generator.embed(&mut tape, &b.generator, x).unwrap();
            let loss = match lambda {
                Some(l) => adversarial_loss(&mut tape, &nets.discriminator, &b.discriminator, f, &domains, l).unwrap(),
                None => {
                    let logits = nets.discriminator.logits(&mut tape, &b.discriminator, f).unwrap();
                    cross_entropy(&mut tape, logits, &domains).unwrap()
                }
            };
            tape.backward(loss).unwrap();
            let gen: Vec<f64> = b.generator.iter().flat_map(|v| tape.grad(*v).unwrap().to_vec()).collect();
            (grad_bits(&tape, &b.discriminator), gen)
        };
        let (d_plain, g_plain) = run(None);
        for lambda in [1.0, 0.5] {
            let (d_rev, g_rev) = run(Some(lambda));
            disc_ok &= d_rev == d_plain;
            if lambda == 1.0 {
                gen_ok &= g_rev.iter().zip(&g_plain).all(|(a, b)| *a == -*b);
            }
        }
    }
    verdict(
        forward_ok && backward_ok && disc_ok && gen_ok,
        format!(
            "forward identity {forward_ok}, backward -lambda*g {backward_ok}, D grads unchanged {disc_ok}, G grads negated {gen_ok}"
        ),
    )
}

fn exact_oracles() -> Verdict {
    let mut r = rng(11);
    let mut triplet_ok = true;
    for _ in 0..300 {
        let m = r.gen_range(2..=12);
        let dim = r.gen_range(1..5);
        let emb: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = (0..m).map(|_| r.gen_range(0..2)).collect();
        let margin = r.gen_range(0.0..1.0);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(vec![m, dim], emb.concat()).unwrap());
        let l = triplet_loss(&mut tape, e, &y, margin, TripletMining::BatchAll).unwrap();
        triplet_ok &= tape.value(l).item() == brute_triplet(&emb, &y, margin);
    }
    let (mut auc_ok, mut roc_ok, mut hter_ok) = (true, true, true);
    let mut cases = 0;
    for trial in 0..300 {
        let n = r.gen_range(2..=200);
        let (s, y) = random_scores(&mut r, n, trial % 2 == 0);
        let (src, src_y) = random_scores(&mut r, n.max(4), trial % 3 == 0);
        if y.iter().all(|&l| l == y[0]) || src_y.iter().all(|&l| l == src_y[0]) {
            continue;
        }
        cases += 1;
        auc_ok &= auc(&s, &y).unwrap() == mann_whitney_auc(&s, &y);
        let pts: Vec<(f64, f64)> = roc_curve(&s, &y).unwrap().iter().map(|p| (p.fpr, p.tpr)).collect();
        roc_ok &= pts == sweep_roc(&s, &y);
        hter_ok &= hter_at_eer(&s, &y, &src, &src_y).unwrap() == sweep_hter(&s, &y, &src, &src_y);
    }
    let mut kl_err: f64 = 0.0;
    for _ in 0..500 {
        let k = r.gen_range(2..6);
        let raw: Vec<f64> = (0..2 * k).map(|_| r.gen_range(0.01..1.0)).collect();
        let norm = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x / v.iter().sum::<f64>()).collect() };
        let (p, q) = (norm(&raw[..k]), norm(&raw[k..]));
        let got = symmetric_kl(&ScoreDistribution::new(&p).unwrap(), &ScoreDistribution::new(&q).unwrap());
        kl_err = kl_err.max((got - direct_symkl(&p, &q)).abs());
    }
    let kl_ok = kl_err <= SYMKL_TOL;
    verdict(
        triplet_ok && auc_ok && roc_ok && hter_ok && kl_ok,
        format!(
            "triplet {triplet_ok}, auc {auc_ok}, roc {roc_ok}, hter {hter_ok} over {cases} score sets; symKL max err {kl_err:.1e}"
        ),
    )
}

/// Gradient of one scalar built from a fresh binding of `nets`.
fn network_grads(nets: &Networks, build: &dyn Fn(&mut Tape, &sadg_core::models::BoundNetworks) -> Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = nets.bind(&mut tape);
    let loss = build(&mut tape, &b);
    tape.backward(loss).unwrap();
    b.all().flat_map(|v| tape.grad_tensor(v).data().to_vec()).collect()
}

fn composite_gradient() -> Verdict {
    let weights = LossWeights {
        lambda1: 0.1,
        lambda2: 0.2,
        lambda3: 0.1,
        ..LossWeights::default()
    };
    let corpus = generate_corpus(&default_domains(), 4, 16, 3);
    let sources: Vec<&DomainCorpus> = corpus.domains.iter().take(3).collect();
    let idx: Vec<Vec<usize>> = sources.iter().map(|d| (0..d.len()).collect()).collect();
    let cfg = SamplerConfig {
        per_domain: 4,
        crop: 8,
        ..SamplerConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let nets = small_networks(seed, 3);
        let views = sources
            .iter()
            .zip(&idx)
            .map(|(c, i)| SourceView { corpus: c, indices: i })
            .collect();
        let mut r = stream_rng(seed, 1);
        let batch = BalancedSampler::new(views, cfg, &mut r).unwrap().next_batch(&mut r).unwrap();
        let images = batch.images();
        let cls = batch.flatten_for_loss(LossId::Classification);
        let ada = batch.flatten_for_loss(LossId::Adversarial);
        let sa = batch.flatten_for_loss(LossId::ScaleAlignment);
        let terms = |t: &mut Tape, b: &sadg_core::models::BoundNetworks| -> [Var; 4] {
            let x = t.constant(images.clone());
            let f = nets.generator.embed(t, &b.generator, x).unwrap();
            let logits = nets.task.classify(t, &b.task, f).unwrap();
            let l_cls = cross_entropy(t, logits, &cls.labels).unwrap();
            let l_ada = adversarial_loss(t, &nets.discriminator, &b.discriminator, f, &ada.labels, 1.0).unwrap();
            let u = t.normalize_rows(f, 1e-12).unwrap();
            let l_trip = triplet_loss(t, u, &cls.labels, weights.margin, TripletMining::BatchAll).unwrap();
            let large = t.gather_rows(logits, &sa.rows).unwrap();
            let small = t.gather_rows(logits, &sa.partners).unwrap();
            let l_sa = scale_alignment_loss(t, large, small, &sa.labels).unwrap();
            [l_cls, l_ada, l_trip, l_sa]
        };
        let total = network_grads(&nets, &|t, b| {
            let [c, a, tr, s] = terms(t, b);
            composite_loss(t, &weights, c, a, tr, s).unwrap()
        });
        let lam = [1.0, weights.lambda1, weights.lambda2, weights.lambda3];
        let parts: Vec<Vec<f64>> = (0..4).map(|i| network_grads(&nets, &|t, b| terms(t, b)[i])).collect();
        for k in 0..total.len() {
            let want: f64 = (0..4).map(|i| lam[i] * parts[i][k]).sum();
            worst = worst.max((total[k] - want).abs());
        }
    }
    verdict(
        worst <= COMPOSITE_TOL,
        format!("lambda=(0.1,0.2,0.1), max |composite - weighted sum| {worst:.1e} over all G, D, T params"),
    )
}

struct Grid {
    /// (method, target) -> per-seed AUC
    auc: BTreeMap<(String, String), Vec<f64>>,
    /// (method, target) -> per-seed held-out scale divergence
    divergence: BTreeMap<(String, String), Vec<f64>>,
    slowest: Duration,
}

fn run_grid(corpus: &Corpus) -> Grid {
    let ids: Vec<String> = corpus.domains.iter().map(|d| d.id.clone()).collect();
    let plan = |mode: Mode| ExperimentPlan {
        mode,
        seeds: SEEDS.to_vec(),
        ..ExperimentPlan::default()
    };
    let mut specs: Vec<_> = plan(Mode::Lodo)
        .expand(&ids)
        .unwrap()
        .into_iter()
        .filter(|s| s.method == "baseline")
        .collect();
    specs.extend(plan(Mode::Ablation).expand(&ids).unwrap());
    let mut grid = Grid {
        auc: BTreeMap::new(),
        divergence: BTreeMap::new(),
        slowest: Duration::ZERO,
    };
    for spec in &specs {
        let start = Instant::now();
        let out: RunOutput = execute_run(corpus, spec).unwrap();
        grid.slowest = grid.slowest.max(start.elapsed());
        let key = (spec.method.clone(), spec.target.clone());
        let target = corpus.domain(&spec.target).unwrap();
        let canvases: Vec<_> = target.images.iter().collect();
        let div = scale_divergence(
            &out.networks,
            &canvases,
            spec.config.sampler.crop,
            spec.config.sampler.scale_factor,
        )
        .unwrap();
        println!(
            "    {:<14} target {} seed {}  auc {:6.2}  hter {:6.2}  scale-kl {:.4}  {:.1}s",
            spec.method,
            spec.target,
            spec.seed,
            out.record.report.auc,
            out.record.report.hter,
            div,
            start.elapsed().as_secs_f64()
        );
        grid.auc.entry(key.clone()).or_default().push(out.record.report.auc);
        grid.divergence.entry(key).or_default().push(div);
    }
    grid
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn method_mean(map: &BTreeMap<(String, String), Vec<f64>>, method: &str) -> f64 {
    let all: Vec<f64> = map
        .iter()
        .filter(|((m, _), _)| m == method)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    mean(&all)
}

fn improvement_over_baseline(grid: &Grid, targets: &[String]) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for t in targets {
        let full = mean(&grid.auc[&("SADG".to_string(), t.clone())]);
        let base = mean(&grid.auc[&("baseline".to_string(), t.clone())]);
        if full >= base + MIN_GAIN {
            wins += 1;
        }
        parts.push(format!("{t}: {full:.2} vs {base:.2}"));
    }
    let fast = grid.slowest <= RUN_BUDGET;
    verdict(
        wins >= MIN_TASKS && fast,
        format!(
            "SADG >= baseline + {MIN_GAIN} on {wins}/{} tasks [{}], slowest run {:.1}s",
            targets.len(),
            parts.join(", "),
            grid.slowest.as_secs_f64()
        ),
    )
}

fn ablations_do_not_beat_full(grid: &Grid) -> Verdict {
    let full = method_mean(&grid.auc, "SADG");
    let mut ok = true;
    let mut parts = vec![format!("full {full:.2}")];
    for m in ["SADG wo/ad", "SADG wo/trip", "SADG wo/sa"] {
        let a = method_mean(&grid.auc, m);
        ok &= a <= full + ABLATION_SLACK;
        parts.push(format!("{m} {a:.2}"));
    }
    verdict(ok, format!("mean target AUC: {}", parts.join(", ")))
}

fn alignment_shrinks_divergence(grid: &Grid) -> Verdict {
    let full = method_mean(&grid.divergence, "SADG");
    let without = method_mean(&grid.divergence, "SADG wo/sa");
    verdict(
        full <= SA_RATIO * without,
        format!("held-out scale-pair symKL: with alignment {full:.4}, without {without:.4}"),
    )
}

fn sampler_balance() -> Verdict {
    let corpus = generate_corpus(&default_domains(), 6, 32, 1);
    let cfg = SamplerConfig {
        crop: 8,
        ..SamplerConfig::default()
    };
    let mut ok = true;
    let mut sizes = Vec::new();
    for (n_src, want) in [(3usize, 24usize), (2, 16)] {
        let sources: Vec<&DomainCorpus> = corpus.domains.iter().take(n_src).collect();
        let idx: Vec<Vec<usize>> = sources.iter().map(|d| (0..d.len()).collect()).collect();
        let views = sources
            .iter()
            .zip(&idx)
            .map(|(c, i)| SourceView { corpus: c, indices: i })
            .collect();
        let mut r = stream_rng(5, 1);
        let mut sampler = BalancedSampler::new(views, cfg, &mut r).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..SAMPLER_BATCHES {
            let b = sampler.next_batch(&mut r).unwrap();
            seen.insert(b.len());
            ok &= b.len() == want;
            for d in 0..n_src {
                let ones = b.pairs.iter().filter(|p| p.domain == d && p.y == 1).count();
                let zeros = b.pairs.iter().filter(|p| p.domain == d && p.y == 0).count();
                ok &= ones == zeros && ones + zeros == want / n_src;
            }
        }
        sizes.push(format!("{n_src} sources -> {seen:?} pairs"));
    }
    verdict(ok, format!("{SAMPLER_BATCHES} batches each: {}", sizes.join(", ")))
}

fn sadg(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_sadg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn gen_and_run(dir: &Path) -> Option<Vec<u8>> {
    let corpus = dir.join("corpus");
    let out = dir.join("out");
    let c = corpus.to_str()?;
    let o = out.to_str()?;
    let ok = sadg(&["gen", "--out", c, "--seed", "5", "--count", "8", "--canvas", "32"])
        && sadg(&[
            "run", "--corpus", c, "--out", o, "--mode", "lodo", "--target", "B", "--seeds", "1,2", "--set", "steps=15",
            "--set", "crop=16", "--set", "val_every=5",
        ]);
    if !ok {
        return None;
    }
    std::fs::read(out.join("results.csv")).ok()
}

fn pipeline_determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (gen_and_run(a.path()), gen_and_run(b.path())) {
        (Some(x), Some(y)) => verdict(
            x == y && !x.is_empty(),
            format!("results.csv {} bytes, identical: {}", x.len(), x == y),
        ),
        _ => verdict(false, "gen or run failed"),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, v: Verdict| {
        println!("criterion {id} {:<38} {}  {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    };
    report("1", "finite-difference gradients", finite_differences());
    report("2", "gradient reversal", gradient_reversal());
    report("3", "exact oracles", exact_oracles());
    report("4", "composite gradient decomposition", composite_gradient());
    report("7", "balanced batches", sampler_balance());
    report("8", "gen+run determinism", pipeline_determinism());

    let corpus = generate_corpus(&default_domains(), DEFAULT_COUNT_PER_CLASS, DEFAULT_CANVAS, DEFAULT_SEED);
    let targets: Vec<String> = corpus.domains.iter().map(|d| d.id.clone()).collect();
    println!("    training grid: baseline, SADG and three ablations x {} targets x {} seeds", targets.len(), SEEDS.len());
    let grid = run_grid(&corpus);
    report("5a", "SADG beats the CE baseline", improvement_over_baseline(&grid, &targets));
    report("5b", "ablations do not beat SADG", ablations_do_not_beat_full(&grid));
    report("6", "scale alignment shrinks divergence", alignment_shrinks_divergence(&grid));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
