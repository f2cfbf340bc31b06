//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bflab::batchformer::{batchformer_forward, BatchFormerModel, ModelConfig};
use bflab::config::LabConfig;
use bflab::data::generate_dataset;
use bflab::gradcheck::{numeric_gradient, relative_error};
use bflab::gradsuite::{run_suite, SuiteOptions};
use bflab::loss::{balanced_softmax_loss, cross_entropy, ClassCounts, Loss};
use bflab::nn::{Frame, Mode};
use bflab::probe::{
    cross_sample_blocks, cross_sample_gradients, per_class_gradient_report, probe_logits,
    probe_site_values, sample_loss, ProbeOptions,
};
use bflab::rng::{substream, LabRng, Stream};
use bflab::train::train;
use bflab::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut LabRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn labels(rng: &mut LabRng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(&SuiteOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = report
        .ops
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let covers_model = report
        .ops
        .iter()
        .any(|o| o.op == "batchformer_loss" && o.instances > 0);
    outcome(
        report.passed()
            && report.instances() >= 100
            && covers_model
            && elapsed < Duration::from_secs(120),
        format!(
            "{} ops, {} instances, max rel error {:.2e} ({}), {:.1}s",
            report.ops.len(),
            report.instances(),
            worst.max_rel_error,
            worst.op,
            elapsed.as_secs_f64()
        ),
    )
}

fn gating_identity() -> Outcome {
    let model = BatchFormerModel::init(ModelConfig::default(), 11).unwrap();
    let mut rng = substream(11, Stream::Probe);
    let x = random_tensor(&mut rng, 4, 16, 2.0);
    let y = labels(&mut rng, 4, 10);

    let mut g = Graph::new();
    let mut f = Frame::new(&mut g, &model.store);
    let xv = f.graph.constant(x.clone());
    let (out, out_y) =
        batchformer_forward(&mut f, &model.encoder, xv, &y, false, Mode::Eval).unwrap();
    let eval_same = g.value(out).shape() == x.shape()
        && g.value(out)
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
        && out_y == y;

    let mut g = Graph::new();
    let mut f = Frame::new(&mut g, &model.store);
    let xv = f.graph.constant(x.clone());
    let mut drop_rng = substream(11, Stream::Dropout);
    let (dual, dual_y) = batchformer_forward(
        &mut f,
        &model.encoder,
        xv,
        &y,
        true,
        Mode::Train(&mut drop_rng),
    )
    .unwrap();
    let d = g.value(dual);
    let shape_ok = d.shape() == [8, 16];
    let head_ok = d.data()[..64]
        .iter()
        .zip(x.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let labels_ok = dual_y.len() == 8 && dual_y[..4] == y[..] && dual_y[4..] == y[..];
    outcome(
        eval_same && shape_ok && head_ok && labels_ok,
        format!("eval passthrough {eval_same}, train shape [8,16] {shape_ok}, first half exact {head_ok}, labels [y;y] {labels_ok}"),
    )
}

fn cross_terms() -> Outcome {
    let model = BatchFormerModel::init(ModelConfig::default(), 21).unwrap();
    let mut rng = substream(21, Stream::Probe);
    let x = random_tensor(&mut rng, 8, 32, 1.5);
    let y = labels(&mut rng, 8, 10);
    let loss = Loss::CrossEntropy;

    let off = ProbeOptions {
        batchformer_loss: false,
        ..ProbeOptions::default()
    };
    let without = cross_sample_gradients(&model, &x, &y, &loss, &off)
        .unwrap()
        .max_off_diagonal();

    let on = ProbeOptions::default();
    let matrix = cross_sample_gradients(&model, &x, &y, &loss, &on).unwrap();
    let blocks = cross_sample_blocks(&model, &x, &y, &loss, &on).unwrap();
    let site = probe_site_values(&model, &x, &on).unwrap();
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (i, block) in blocks.iter().enumerate() {
        let f = |g: &mut Graph, v: &[bflab::Var]| {
            let logits = probe_logits(&model, g, v[0], &y, &on)?;
            sample_loss(g, logits, &y, i, &loss, &on)
        };
        let numeric = numeric_gradient(&f, std::slice::from_ref(&site), 0, 1e-5).unwrap();
        for (a, n) in block.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
        for (j, row) in numeric.rows().enumerate() {
            let fd_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if j != i && matrix.norms[i][j] > 0.0 {
                worst = worst.max(relative_error(matrix.norms[i][j], fd_norm));
                compared += 1;
            }
        }
    }
    let with = matrix.max_off_diagonal();
    outcome(
        without <= 1e-12 && with > 1e-8 && compared > 0 && worst <= 1e-4,
        format!(
            "N=8 C=16: off-diagonal max without encoder path {without:.1e}, with {with:.3e}; {compared} nonzero entries vs finite differences, max rel error {worst:.2e}"
        ),
    )
}

fn inference_independence() -> Outcome {
    let config = LabConfig::default();
    let ds = generate_dataset(&config.data).unwrap();
    let model = BatchFormerModel::init(config.model.clone(), 31).unwrap();
    let idx: Vec<usize> = (0..256).collect();
    let (x, y) = ds.test_batch(&idx).unwrap();
    let batched = model.inference_forward(&x).unwrap();

    let single_ok = (0..256).all(|i| {
        let one = model
            .inference_forward(&x.select_rows(&[i]).unwrap())
            .unwrap();
        one.data() == batched.row(i)
    });

    let mut zeroed = model.clone();
    for id in zeroed.encoder_ids() {
        let v = zeroed.store.value_mut(id);
        *v = Tensor::zeros(v.shape());
    }
    let zero_ok = zeroed.inference_forward(&x).unwrap() == batched;

    let mut g = Graph::new();
    let mut f = Frame::new(&mut g, &model.store);
    let xv = f.graph.constant(x.clone());
    let (logits, _) = model.train_forward(&mut f, xv, &y, Mode::Eval).unwrap();
    let train_logits = g.value(logits);
    let branch_ok =
        train_logits.shape()[0] == 512 && (0..256).all(|i| train_logits.row(i) == batched.row(i));
    outcome(
        single_ok && zero_ok && branch_ok,
        format!("batch 1 vs 256 exact {single_ok}, zeroed encoder exact {zero_ok}, equals pre-encoder training rows {branch_ok}"),
    )
}

fn permutation_equivariance() -> Outcome {
    let model = BatchFormerModel::init(ModelConfig::default(), 41).unwrap();
    let mut rng = substream(41, Stream::Probe);
    let n = 8;
    let x = random_tensor(&mut rng, n, 32, 1.5);
    let y = labels(&mut rng, n, 10);
    let run = |x: &Tensor, y: &[usize]| {
        let mut g = Graph::new();
        let mut f = Frame::new(&mut g, &model.store);
        let xv = f.graph.constant(x.clone());
        let (logits, ly) = model.train_forward(&mut f, xv, y, Mode::Eval).unwrap();
        (g.value(logits).clone(), ly)
    };
    let (base, base_y) = run(&x, &y);
    let mut ok = 0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let px = x.select_rows(&perm).unwrap();
        let py: Vec<usize> = perm.iter().map(|&p| y[p]).collect();
        let (out, out_y) = run(&px, &py);
        let rows_ok = (0..n)
            .all(|r| out.row(r) == base.row(perm[r]) && out.row(n + r) == base.row(n + perm[r]));
        let labels_ok =
            (0..n).all(|r| out_y[r] == base_y[perm[r]] && out_y[n + r] == base_y[n + perm[r]]);
        if rows_ok && labels_ok {
            ok += 1;
        }
    }
    outcome(
        ok == 20,
        format!("{ok}/20 permutations reorder both halves exactly"),
    )
}

struct SeedRun {
    spearman: Option<f64>,
    few_on: f64,
    few_off: f64,
}

fn seed_runs() -> (Vec<SeedRun>, Duration, Duration) {
    let mut runs = Vec::new();
    let mut probe_time = Duration::ZERO;
    let mut pair_time = Duration::ZERO;
    for seed in 0..5u64 {
        let mut c = LabConfig::default();
        c.set_seed(seed);
        let ds = generate_dataset(&c.data).unwrap();

        let t = Instant::now();
        let on = train(&c, &ds).unwrap();
        let train_on = t.elapsed();
        let loss = Loss::new(c.train.loss, &ds.counts);
        let t = Instant::now();
        let report = per_class_gradient_report(
            &on.model,
            &ds,
            20,
            64,
            &mut substream(seed, Stream::Probe),
            &loss,
            &ProbeOptions::default(),
        )
        .unwrap();
        probe_time += train_on + t.elapsed();

        c.train.batchformer = false;
        let t = Instant::now();
        let off = train(&c, &ds).unwrap();
        pair_time += train_on + t.elapsed();
        runs.push(SeedRun {
            spearman: report.spearman,
            few_on: on.record.final_metrics().few,
            few_off: off.record.final_metrics().few,
        });
    }
    (runs, probe_time, pair_time)
}

fn rarity_trend(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let positive = runs
        .iter()
        .filter(|r| r.spearman.is_some_and(|s| s > 0.0))
        .count();
    let values: Vec<String> = runs
        .iter()
        .map(|r| r.spearman.map_or("undef".into(), |s| format!("{s:.3}")))
        .collect();
    outcome(
        positive >= 4 && elapsed < Duration::from_secs(600),
        format!(
            "spearman per seed [{}]; {positive}/5 positive; {:.1}s",
            values.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn few_shot_gain(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let diffs: Vec<f64> = runs.iter().map(|r| r.few_on - r.few_off).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let shown: Vec<String> = diffs.iter().map(|d| format!("{d:+.3}")).collect();
    outcome(
        mean > 0.0 && elapsed < Duration::from_secs(1200),
        format!(
            "few on-off per seed [{}]; mean {mean:+.4}; {:.1}s",
            shown.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn balanced_reduction() -> Outcome {
    let mut rng = substream(51, Stream::Probe);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..12);
        let k = rng.random_range(2..12);
        let logits = random_tensor(&mut rng, n, k, 8.0);
        let y = labels(&mut rng, n, k);
        let counts = ClassCounts::uniform(k, 1 + trial).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logits);
        let ce = cross_entropy(&mut g, l, &y).unwrap();
        let bal = balanced_softmax_loss(&mut g, l, &y, &counts).unwrap();
        worst = worst.max((g.value(ce).item().unwrap() - g.value(bal).item().unwrap()).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("200 random logit sets, max |balanced - ce| = {worst:.2e}"),
    )
}

fn run_train(out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_bf-lab"))
        .args(["train", "--seed", "3", "--batchformer", "on", "--out"])
        .arg(out)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ran = run_train(&a) && run_train(&b);
    let read = |p: &Path| std::fs::read(p.join("metrics.json")).ok();
    let (ma, mb) = (read(&a), read(&b));
    let same = ran && ma.is_some() && ma == mb;
    outcome(
        same,
        format!(
            "two `bf-lab train --seed 3` runs exited 0 {ran}, metrics.json byte-identical {same}"
        ),
    )
}

fn main() {
    let (runs, probe_time, pair_time) = seed_runs();
    let results = [
        ("gradient oracle suite", gradient_suite()),
        ("train/eval gating identity", gating_identity()),
        ("cross-sample gradient terms", cross_terms()),
        ("inference independence", inference_independence()),
        ("permutation equivariance", permutation_equivariance()),
        (
            "rarity vs cross-gradient trend",
            rarity_trend(&runs, probe_time),
        ),
        ("few-group gain", few_shot_gain(&runs, pair_time)),
        ("balanced softmax reduction", balanced_reduction()),
        ("train determinism", determinism()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "criterion {} [{}] {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
