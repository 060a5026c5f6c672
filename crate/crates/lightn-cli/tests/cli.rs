//! End-to-end tests of the command-line interface: output grammar,
//! reproducibility, error reporting, and the full train/eval chain at a
//! tiny scale.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lightn"))
}

fn run_ok(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_cloud(path: &Path) {
    let mut text = String::new();
    for i in 0..12 {
        let x = (i as f64 * 0.37).sin();
        let y = (i as f64 * 0.73).cos();
        let z = i as f64 / 12.0;
        text.push_str(&format!("{x} {y} {z}\n"));
    }
    std::fs::write(path, text).unwrap();
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn sample_fps_writes_a_parseable_subset() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    write_cloud(&input);
    let out = dir.path().join("out");
    run_ok(
        &[
            "sample",
            "--input",
            input.to_str().unwrap(),
            "--sampler",
            "fps",
            "--m",
            "4",
            "--output",
            out.to_str().unwrap(),
        ],
        &[],
    );
    let sampled = read(&out.join("sampled_fps_m4.xyz"));
    assert_eq!(sampled.lines().count(), 4);
    let original = read(&input);
    let input_lines: Vec<&str> = original.lines().collect();
    for line in sampled.lines() {
        assert!(input_lines.contains(&line), "not an input point: {line}");
    }
    let metrics = read(&out.join("sampled_fps_m4.metrics.json"));
    assert!(metrics.contains("lightn-metrics v1"));
    assert!(metrics.contains("chamfer"));
}

#[test]
fn sample_at_full_m_is_a_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    write_cloud(&input);
    let out = dir.path().join("out");
    run_ok(
        &[
            "sample",
            "--input",
            input.to_str().unwrap(),
            "--sampler",
            "fps",
            "--m",
            "12",
            "--output",
            out.to_str().unwrap(),
        ],
        &[],
    );
    let mut sampled: Vec<String> =
        read(&out.join("sampled_fps_m12.xyz")).lines().map(String::from).collect();
    let mut original: Vec<String> = read(&input).lines().map(String::from).collect();
    sampled.sort();
    original.sort();
    assert_eq!(sampled, original);
}

#[test]
fn identical_runs_emit_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    write_cloud(&input);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run_ok(
            &[
                "sample",
                "--input",
                input.to_str().unwrap(),
                "--sampler",
                "random",
                "--m",
                "5",
                "--seed",
                "42",
                "--output",
                out.to_str().unwrap(),
            ],
            &[],
        );
        outputs.push((
            read(&out.join("sampled_random_m5.xyz")),
            read(&out.join("sampled_random_m5.metrics.json")),
            read(&out.join("run_config.txt")),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn flops_report_is_deterministic_and_carries_conventions() {
    let a = run_ok(&["flops"], &[]);
    let b = run_ok(&["flops"], &[]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["sampler"]["convention"], "mac-formula");
    assert_eq!(doc["task_at_n"]["convention"], "mac=2flops");
    let reduction = doc["flops_reduction_pct"].as_f64().unwrap();
    assert!((reduction - 75.93).abs() <= 5.0, "reduction = {reduction}");
}

#[test]
fn failures_exit_nonzero_with_error_json() {
    let out = bin()
        .args(["sample", "--input", "/nonexistent/cloud.xyz", "--sampler", "fps"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is a JSON document");
    assert_eq!(err["schema"], "lightn-error v1");
    assert_eq!(err["kind"], "io");

    let out = bin()
        .args(["sample", "--input", "/nonexistent/cloud.xyz", "--sampler", "warp"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_file_applies_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "flops_n=512\nflops_m=64\n# comment\n").unwrap();

    let from_file = run_ok(&["flops", "--config", cfg.to_str().unwrap()], &[]);
    let doc: serde_json::Value = serde_json::from_slice(&from_file.stdout).unwrap();
    assert_eq!(doc["n"], 512);
    assert_eq!(doc["m"], 64);

    let overridden = run_ok(
        &["flops", "--config", cfg.to_str().unwrap(), "--flops-m", "32"],
        &[],
    );
    let doc: serde_json::Value = serde_json::from_slice(&overridden.stdout).unwrap();
    assert_eq!(doc["n"], 512);
    assert_eq!(doc["m"], 32);
}

#[test]
fn env_var_sets_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.xyz");
    write_cloud(&input);
    let out = dir.path().join("from_env");
    run_ok(
        &["sample", "--input", input.to_str().unwrap(), "--sampler", "voxel", "--m", "4"],
        &[("LIGHTN_OUT_DIR", out.to_str().unwrap())],
    );
    assert!(out.join("sampled_voxel_m4.xyz").exists());
}

/// The full chain at toy scale: pre-train, sampler training, evaluation,
/// and sampling through the trained checkpoint.
#[test]
fn train_eval_chain_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let tiny: &[&str] = &[
        "--n",
        "24",
        "--train-per-class",
        "4",
        "--test-per-class",
        "2",
        "--sampler-train-per-class",
        "2",
        "--pretrain-epochs",
        "1",
        "--epochs",
        "1",
        "--m",
        "4",
        "--seed",
        "5",
    ];

    let task_dir = dir.path().join("task");
    let mut args = vec!["train-task", "--output", task_dir.to_str().unwrap()];
    args.extend_from_slice(tiny);
    run_ok(&args, &[]);
    let task_ckpt = task_dir.join("task_checkpoint.txt");
    assert!(read(&task_dir.join("pretrain_metrics.csv")).starts_with("epoch,loss"));

    let smp_dir = dir.path().join("sampler");
    let mut args = vec![
        "train-sampler",
        "--task-checkpoint",
        task_ckpt.to_str().unwrap(),
        "--output",
        smp_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(tiny);
    run_ok(&args, &[]);
    let smp_ckpt = smp_dir.join("sampler_checkpoint.txt");
    assert!(read(&smp_dir.join("sampler_metrics.csv")).starts_with("epoch,total"));

    let mut args = vec![
        "eval",
        "--task-checkpoint",
        task_ckpt.to_str().unwrap(),
        "--sampler-checkpoint",
        smp_ckpt.to_str().unwrap(),
        "--sampler",
        "lightn",
    ];
    args.extend_from_slice(tiny);
    let out = run_ok(&args, &[]);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["schema"], "lightn-eval v1");
    for key in ["accuracy_soft", "accuracy_matched"] {
        let acc = doc[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{key} = {acc}");
    }

    // sample through the trained checkpoint
    let input = dir.path().join("in.xyz");
    write_cloud(&input);
    let sample_dir = dir.path().join("sampled");
    run_ok(
        &[
            "sample",
            "--input",
            input.to_str().unwrap(),
            "--sampler",
            "lightn",
            "--sampler-checkpoint",
            smp_ckpt.to_str().unwrap(),
            "--m",
            "4",
            "--output",
            sample_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(read(&sample_dir.join("sampled_lightn_m4.xyz")).lines().count(), 4);
}

#[test]
fn bench_csv_is_reproducible_from_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let tiny: &[&str] = &[
        "--n",
        "24",
        "--train-per-class",
        "3",
        "--test-per-class",
        "2",
        "--sampler-train-per-class",
        "2",
        "--pretrain-epochs",
        "1",
        "--epochs",
        "1",
        "--m-list",
        "4",
        "--seed",
        "9",
    ];
    let out_a = dir.path().join("a");
    let mut args = vec!["bench", "--output", out_a.to_str().unwrap()];
    args.extend_from_slice(tiny);
    run_ok(&args, &[]);
    let csv_a = read(&out_a.join("bench.csv"));
    assert!(csv_a.starts_with("sampler,m,accuracy_soft,accuracy_matched,flops,params\n"));
    assert_eq!(csv_a.lines().count(), 1 + 4); // header + 4 samplers x 1 m

    // regenerate purely from the emitted run configuration
    let out_b = dir.path().join("b");
    run_ok(
        &[
            "bench",
            "--config",
            out_a.join("run_config.txt").to_str().unwrap(),
            "--output",
            out_b.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(csv_a, read(&out_b.join("bench.csv")));
}
