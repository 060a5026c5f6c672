//! The acceptance gate. One test per criterion; each prints a single
//! PASS/FAIL line (visible with `--nocapture`) and fails the build when
//! its bound is violated.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lightn::cloud::{sq_dist, PointCloud};
use lightn::cost::{
    flops_attention, flops_embedding, instrument_attention_macs, instrument_embedding_macs,
    pipeline_report, pointnet_full,
};
use lightn::data::{gen_synthetic, ALL_CLASSES};
use lightn::losses::{chamfer, chamfer_value, repulsion, sampling_loss, total_loss, LossConfig};
use lightn::model::{
    attention_core, forward, input_embed, mount_sampler, AttentionConfig, AttentionVariant,
    SamplerConfig, SamplerParams,
};
use lightn::projection::{knn, project_weights, ProjectionConfig};
use lightn::samplers::{dedup_and_complete, fps};
use lightn::task::{
    evaluate, mount_task, pipeline_loss, pretrain_task, train_sampler, EvalMode, EvalSampler,
    TaskParams, TrainConfig,
};
use lightn::tensor::{grad_check, Matrix, Tape};

fn report(criterion: u32, ok: bool, desc: &str) {
    println!("criterion {criterion}: {} — {desc}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {desc}");
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect(),
    )
    .unwrap()
}

fn permuted(p: &PointCloud, rng: &mut ChaCha8Rng) -> PointCloud {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    PointCloud::new(idx.iter().map(|&i| p.point(i)).collect()).unwrap()
}

#[test]
fn criterion_1_scope_is_property_and_ratio_based() {
    // Absolute large-benchmark numbers are out of reach at this scale by
    // design; everything checked below is a property, an oracle match, or
    // a ratio. This line records that scope choice.
    report(
        1,
        true,
        "desk-scale suite: properties, oracles, and cost ratios stand in for full-benchmark numbers",
    );
}

#[test]
fn criterion_2_permutation_suite() {
    let start = Instant::now();
    let cfg = SamplerConfig::new(8);
    let mut ok = true;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SamplerParams::init(seed, &cfg).unwrap();
        let p = random_cloud(&mut rng, 64);
        let q = permuted(&p, &mut rng);
        let a = forward(&p, &params, &cfg).unwrap();
        let b = forward(&q, &params, &cfg).unwrap();
        for (x, y) in a.points().iter().zip(b.points()) {
            for c in 0..3 {
                if (x[c] - y[c]).abs() / x[c].abs().max(1.0) > 1e-6 {
                    ok = false;
                }
            }
        }
        // score-matrix symmetry of the correlation attention
        let mut tape = Tape::new();
        let ms = mount_sampler(&mut tape, &params, false);
        let x = input_embed(&mut tape, &p, &ms).unwrap();
        let core = attention_core(&mut tape, x, &ms).unwrap();
        let scores = tape.value(core.raw_scores[0]);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                if (scores.get(i, j) - scores.get(j, i)).abs() > 1e-12 {
                    ok = false;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        ok && elapsed.as_secs() < 30,
        &format!("50 permutation triples at N = 64 within 1e-6; scores symmetric to 1e-12 ({elapsed:.1?})"),
    );
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let mut worst_primitive = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // primitive operations at random points
    for _ in 0..20 {
        let x = Matrix::new(3, 4, (0..12).map(|_| rng.gen_range(0.2..1.5)).collect());
        let cases: Vec<Box<dyn Fn(&mut Tape, lightn::tensor::VarId) -> lightn::error::Result<lightn::tensor::VarId>>> = vec![
            Box::new(|t, x| {
                let y = t.unary(lightn::tensor::Unary::Exp, x);
                Ok(t.reduce(lightn::tensor::Reduce::Sum, y))
            }),
            Box::new(|t, x| {
                let y = t.unary(lightn::tensor::Unary::Square, x);
                let s = t.row_softmax(y);
                let l = t.unary(lightn::tensor::Unary::Log, s);
                Ok(t.reduce(lightn::tensor::Reduce::Mean, l))
            }),
            Box::new(|t, x| {
                let w = t.constant(Matrix::new(4, 2, (0..8).map(|i| 0.1 * i as f64).collect()));
                let y = t.matmul(x, w)?;
                let m = t.reduce(lightn::tensor::Reduce::MaxOverRows, y);
                Ok(t.reduce(lightn::tensor::Reduce::Sum, m))
            }),
            Box::new(|t, x| {
                let g = t.constant(Matrix::ones(1, 4));
                let s = t.constant(Matrix::zeros(1, 4));
                let y = t.layer_norm_rows(x, g, s)?;
                let sq = t.unary(lightn::tensor::Unary::Square, y);
                Ok(t.reduce(lightn::tensor::Reduce::Sum, sq))
            }),
        ];
        for f in &cases {
            worst_primitive = worst_primitive.max(grad_check(f, &x, 1e-6).unwrap());
        }
    }

    // composed pipeline loss at N = 16, m = 4, against the sampler's own
    // input layer, normalization gains, and the temperature
    let cloud = random_cloud(&mut ChaCha8Rng::seed_from_u64(40), 16);
    let cfg = SamplerConfig::new(4);
    let params = SamplerParams::init(12, &cfg).unwrap();
    let theta = TaskParams::init(5, 4).unwrap();
    let loss_cfg = LossConfig::default();
    let proj_cfg = ProjectionConfig::default();

    let composed = |vary: &str| {
        let params = params.clone();
        let cloud = cloud.clone();
        let theta = theta.clone();
        let cfg = cfg.clone();
        let loss_cfg = loss_cfg.clone();
        let proj_cfg = proj_cfg.clone();
        let vary = vary.to_string();
        move |tape: &mut Tape, x: lightn::tensor::VarId| {
            let mut ms = mount_sampler(tape, &params, false);
            match vary.as_str() {
                "embed_w" => ms.embed_w = x,
                "ln_gain" => ms.ln_gain = x,
                "temperature" => ms.temperature = x,
                other => panic!("unknown target {other}"),
            }
            let mt = mount_task(tape, &theta, false);
            let nodes =
                pipeline_loss(tape, &cloud, 1, &ms, &cfg, Some(&mt), &loss_cfg, &proj_cfg)?;
            Ok(nodes.total)
        }
    };
    let mut worst_composed = 0.0f64;
    worst_composed =
        worst_composed.max(grad_check(composed("embed_w"), &params.embed_w, 1e-6).unwrap());
    worst_composed =
        worst_composed.max(grad_check(composed("ln_gain"), &params.ln_gain, 1e-6).unwrap());
    worst_composed = worst_composed.max(
        grad_check(composed("temperature"), &Matrix::row_vector(&[params.temperature]), 1e-6)
            .unwrap(),
    );

    let elapsed = start.elapsed();
    report(
        3,
        worst_primitive <= 1e-4 && worst_composed <= 1e-3 && elapsed.as_secs() < 120,
        &format!(
            "finite differences: primitives {worst_primitive:.2e} <= 1e-4, composed pipeline {worst_composed:.2e} <= 1e-3 ({elapsed:.1?})"
        ),
    );
}

/// Brute-force farthest-point reference, written independently of the
/// library implementation.
fn fps_reference(p: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for cand in 0..p.len() {
            if selected.contains(&cand) {
                continue;
            }
            let d = selected
                .iter()
                .map(|&s| sq_dist(p.point(cand), p.point(s)))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = cand;
            }
        }
        selected.push(best);
    }
    selected
}

#[test]
fn criterion_4_oracle_suite() {
    let start = Instant::now();
    let mut ok = true;

    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=10);
        let p = random_cloud(&mut rng, n);
        let m = rng.gen_range(1..=n);
        let s = rng.gen_range(0..n);
        if fps(&p, m, s).unwrap().as_slice() != fps_reference(&p, m, s).as_slice() {
            ok = false;
        }
    }

    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let nq = rng.gen_range(1..=8);
        let np = rng.gen_range(1..=8);
        let q = random_cloud(&mut rng, nq);
        let p = random_cloud(&mut rng, np);
        let mut tape = Tape::new();
        let qid = tape.constant(Matrix::from_rows(
            &q.points().iter().map(|pt| pt.to_vec()).collect::<Vec<_>>(),
        ));
        let node = chamfer(&mut tape, qid, &p).unwrap();
        if tape.value(node).get(0, 0).to_bits() != chamfer_value(&q, &p).to_bits() {
            ok = false;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let p = random_cloud(&mut rng, 20);
        let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let neighbors = knn(&p, q, 7).unwrap();
        let dists: Vec<f64> = neighbors.iter().map(|&(_, d)| d).collect();
        for t in [1e-6, 0.01, 1.0, 100.0] {
            let w = project_weights(&dists, t).unwrap();
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                ok = false;
            }
        }
        let one_hot = project_weights(&dists, 1e-6).unwrap();
        if one_hot[0] < 1.0 - 1e-9 {
            ok = false;
        }
    }

    let elapsed = start.elapsed();
    report(
        4,
        ok && elapsed.as_secs() < 60,
        &format!("greedy-sampling, nearest-distance, and projection-weight oracles hold ({elapsed:.1?})"),
    );
}

#[test]
fn criterion_5_cost_model_suite() {
    let start = Instant::now();
    let mut ok = true;

    for n in [2usize, 4, 8, 16] {
        for d in [2usize, 4, 8] {
            for variant in [
                AttentionVariant::SelfCorrelation,
                AttentionVariant::QRemoved,
                AttentionVariant::KvRemoved,
                AttentionVariant::QkvFull,
            ] {
                let got = instrument_attention_macs(n, d, variant, 1).unwrap();
                if got != flops_attention(n as u64, d as u64, 1, 1, variant) {
                    ok = false;
                }
            }
            if instrument_embedding_macs(n, d).unwrap()
                != flops_embedding(n as u64, d as u64, lightn::cost::EmbeddingStyle::Lightn)
            {
                ok = false;
            }
        }
    }

    ok &= flops_attention(1024, 64, 1, 1, AttentionVariant::QkvFull) == 150_994_944;
    ok &= flops_attention(1024, 64, 1, 1, AttentionVariant::SelfCorrelation) == 138_412_032;

    let reference = pointnet_full::flops(1024) as f64;
    ok &= (reference - 927.2e6).abs() <= 0.10 * 927.2e6;

    let pipeline = pipeline_report(1024, 32, &AttentionConfig::default(), &[512, 256]);
    ok &= (pipeline.flops_reduction_pct - 75.93).abs() <= 5.0;

    let elapsed = start.elapsed();
    report(
        5,
        ok && elapsed.as_secs() < 60,
        &format!(
            "formulas match instrumented counts; reference profile in band; pipeline reduction {:.2}% within 75.93 +/- 5 ({elapsed:.1?})",
            pipeline.flops_reduction_pct
        ),
    );
}

#[test]
fn criterion_6_desk_scale_task_gain() {
    let start = Instant::now();
    let train = gen_synthetic(&ALL_CLASSES, 256, 200, 1).unwrap();
    let test = gen_synthetic(&ALL_CLASSES, 256, 50, 2).unwrap();

    let (theta, log) = pretrain_task(&train, &test, &TrainConfig::new(8, 7)).unwrap();
    let head_acc = log.last().unwrap().test_accuracy;

    let m = 16;
    let sampler_cfg = SamplerConfig::new(m);
    let subset = train.subset_per_class(25);
    let (params, _) = train_sampler(
        &subset,
        &theta,
        &sampler_cfg,
        &TrainConfig::new(15, 11),
        &LossConfig::default(),
        &ProjectionConfig::default(),
    )
    .unwrap();

    let proj = ProjectionConfig::default();
    let lightn_sampler = EvalSampler::Lightn { params: &params, cfg: &sampler_cfg };
    let acc = |s: &EvalSampler, mode| evaluate(&test, s, &theta, m, mode, &proj).unwrap();
    let l_soft = acc(&lightn_sampler, EvalMode::Soft);
    let l_matched = acc(&lightn_sampler, EvalMode::Matched);
    let r_soft = acc(&EvalSampler::Random { seed: 99 }, EvalMode::Soft);
    let r_matched = acc(&EvalSampler::Random { seed: 99 }, EvalMode::Matched);
    let f_soft = acc(&EvalSampler::Fps, EvalMode::Soft);
    let f_matched = acc(&EvalSampler::Fps, EvalMode::Matched);

    let elapsed = start.elapsed();
    let ok = head_acc >= 0.90
        && l_soft >= r_soft + 0.10
        && l_matched >= r_matched + 0.10
        && l_soft >= f_soft - 0.02
        && l_matched >= f_matched - 0.02
        && elapsed.as_secs() < 600;
    report(
        6,
        ok,
        &format!(
            "head {head_acc:.3}; learned soft/matched {l_soft:.3}/{l_matched:.3} vs random {r_soft:.3}/{r_matched:.3} and farthest-point {f_soft:.3}/{f_matched:.3} at m = 16 ({elapsed:.1?})"
        ),
    );
}

#[test]
fn criterion_7_loss_composition_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut ok = true;
    for _ in 0..20 {
        let p = random_cloud(&mut rng, 12);
        let q = random_cloud(&mut rng, 5);
        let qm = Matrix::from_rows(&q.points().iter().map(|pt| pt.to_vec()).collect::<Vec<_>>());

        // alpha = beta = 0 collapses the sampling loss to pure coverage
        let chamfer_only = {
            let mut tape = Tape::new();
            let qid = tape.constant(qm.clone());
            let c = chamfer(&mut tape, qid, &p).unwrap();
            tape.value(c).get(0, 0)
        };
        let cfg0 = LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let sampling0 = {
            let mut tape = Tape::new();
            let qid = tape.constant(qm.clone());
            let t = tape.constant(Matrix::row_vector(&[1.0]));
            let s = sampling_loss(&mut tape, qid, &p, t, &cfg0).unwrap();
            tape.value(s).get(0, 0)
        };
        ok &= sampling0.to_bits() == chamfer_only.to_bits();

        // delta = 0 makes the task term vanish exactly
        let mut tape = Tape::new();
        let sampling = tape.constant(Matrix::row_vector(&[1.25]));
        let task = tape.constant(Matrix::row_vector(&[7.5]));
        let cfg_d0 = LossConfig { delta: 0.0, ..Default::default() };
        let tl = total_loss(&mut tape, sampling, Some(task), &cfg_d0).unwrap();
        ok &= tape.value(tl).get(0, 0).to_bits() == 1.25f64.to_bits();

        // repulsion vanishes when every neighbor is farther than h
        let spread = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let sid = tape.constant(Matrix::from_rows(
            &spread.points().iter().map(|pt| pt.to_vec()).collect::<Vec<_>>(),
        ));
        let rep = repulsion(&mut tape, sid, &LossConfig::default()).unwrap();
        ok &= tape.value(rep.loss).get(0, 0) == 0.0;
    }
    report(7, ok, "loss-weight zeroing yields the exact sub-losses; repulsion is zero beyond radius h");
}

#[test]
fn criterion_8_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    let mut text = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for _ in 0..32 {
        text.push_str(&format!(
            "{} {} {}\n",
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64)
        ));
    }
    std::fs::write(&input, text).unwrap();

    let mut ok = true;
    let mut flops_outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_lightn"))
            .args([
                "sample",
                "--input",
                input.to_str().unwrap(),
                "--sampler",
                "random",
                "--m",
                "8",
                "--seed",
                "21",
                "--output",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        ok &= status.status.success();
        let fl = std::process::Command::new(env!("CARGO_BIN_EXE_lightn"))
            .args(["flops"])
            .output()
            .unwrap();
        ok &= fl.status.success();
        flops_outputs.push(fl.stdout);
    }
    ok &= flops_outputs[0] == flops_outputs[1];
    let read = |n: &str, f: &str| std::fs::read(dir.path().join(n).join(f)).unwrap();
    for f in ["sampled_random_m8.xyz", "sampled_random_m8.metrics.json", "run_config.txt"] {
        ok &= read("a", f) == read("b", f);
    }
    report(8, ok, "repeated command-line runs with one seed emit byte-identical reports");
}

#[test]
fn criterion_9_subset_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut ok = true;

    // duplicate-heavy matchings always complete to exactly m distinct indices
    for _ in 0..100 {
        let n = rng.gen_range(6..40);
        let p = random_cloud(&mut rng, n);
        let m = rng.gen_range(2..=n.min(12));
        let matched: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n.min(3))).collect();
        let idx = dedup_and_complete(&matched, &p, m).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for &i in idx.as_slice() {
            ok &= i < n && seen.insert(i);
        }
        ok &= idx.len() == m;
    }

    // matched-mode evaluation checks every fed point against the input
    let ds = gen_synthetic(&ALL_CLASSES, 32, 3, 17).unwrap();
    let theta = TaskParams::init(3, 4).unwrap();
    let cfg = SamplerConfig::new(6);
    let params = SamplerParams::init(23, &cfg).unwrap();
    let result = evaluate(
        &ds,
        &EvalSampler::Lightn { params: &params, cfg: &cfg },
        &theta,
        6,
        EvalMode::Matched,
        &ProjectionConfig::default(),
    );
    ok &= result.is_ok();

    report(9, ok, "matched evaluation feeds only true input points; completion yields exactly m distinct indices");
}
