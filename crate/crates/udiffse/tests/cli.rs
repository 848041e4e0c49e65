//! Process-level CLI tests: the synth/train/enhance/eval/bench pipeline,
//! exit codes per failure class, and output reproducibility.

use ndarray::Array2;
use num_complex::Complex64;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use udiffse::score::{save_prior, GaussianPrior};
use udiffse::spectral::StftConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_udiffse")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary executes")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("udiffse_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Build a small corpus once per test dir: two 0.5 s matched-prior scenes
/// plus the prior file they were drawn from.
fn synth_corpus(dir: &Path) {
    let out = run_in(
        dir,
        &[
            "synth",
            "--out-dir",
            "corpus",
            "--count",
            "2",
            "--duration",
            "0.5",
            "--source",
            "gaussian-prior-draw",
            "--noise",
            "white",
            "--prior-out",
            "prior.bin",
            "--seed",
            "11",
        ],
    );
    assert_code(&out, 0, "synth");
}

#[test]
fn full_pipeline_runs_and_reports() {
    let dir = fresh_dir("pipeline");
    synth_corpus(&dir);

    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_000.wav",
            "--prior",
            "prior.bin",
            "--output",
            "out.wav",
            "--reference",
            "corpus/clean_000.wav",
            "--seed",
            "3",
            "--verbose",
        ],
    );
    assert_code(&out, 0, "enhance");
    assert!(dir.join("out.wav").exists());
    let report = std::fs::read_to_string(dir.join("out.wav.report.txt")).unwrap();
    assert!(report.contains("command = enhance"));
    assert!(report.contains("metrics:"));
    assert!(report.contains("score_evaluations = 75")); // 2N + N/2 at N = 30
    assert!(report.contains("nmf_updates = 15"));
    assert!(report.contains("si_sdr_out_db"));
    assert!(report.contains("trace:"));
    assert!(report.contains("nmf_w:"));

    // The eval subcommand agrees with the report's output metric.
    let out = run_in(
        &dir,
        &[
            "eval",
            "--estimate",
            "out.wav",
            "--reference",
            "corpus/clean_000.wav",
            "--mixture",
            "corpus/noisy_000.wav",
        ],
    );
    assert_code(&out, 0, "eval");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("si_sdr_db ="));
    assert!(text.contains("si_sdr_improvement_db ="));
    let reported: f64 = report
        .lines()
        .find(|l| l.starts_with("si_sdr_out_db"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let evaled: f64 = text
        .lines()
        .find(|l| l.starts_with("si_sdr_db"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((reported - evaled).abs() < 5e-4);
}

#[test]
fn train_prior_then_enhance_with_it() {
    let dir = fresh_dir("train");
    synth_corpus(&dir);

    let out = run_in(
        &dir,
        &[
            "train-prior",
            "--manifest",
            "corpus/manifest.txt",
            "--out",
            "trained.bin",
            "--steps",
            "60",
            "--lr",
            "0.01",
            "--batch-size",
            "2",
            "--seed",
            "1",
        ],
    );
    assert_code(&out, 0, "train-prior");
    assert!(dir.join("trained.bin").exists());

    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_001.wav",
            "--prior",
            "trained.bin",
            "--output",
            "out2.wav",
            "--seed",
            "4",
        ],
    );
    assert_code(&out, 0, "enhance with trained prior");
    assert!(dir.join("out2.wav").exists());
}

#[test]
fn bench_prints_one_row_per_algorithm() {
    let dir = fresh_dir("bench");
    let out = run_in(
        &dir,
        &[
            "bench",
            "--scenes",
            "1",
            "--duration",
            "0.4",
            "--n-steps",
            "8",
            "--em",
            "2",
            "--seed",
            "2",
        ],
    );
    assert_code(&out, 0, "bench");
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("algo") && lines[0].contains("rtf") && lines[0].contains("si_sdr_out"));
    assert!(lines.iter().any(|l| l.starts_with("udiffse ")));
    assert!(lines.iter().any(|l| l.starts_with("udiffse+")));
}

#[test]
fn conditional_prior_without_visual_is_config_error() {
    let dir = fresh_dir("cond");
    synth_corpus(&dir);
    // Any conditional prior triggers the check before shapes are compared.
    let prior = GaussianPrior::new(
        Array2::from_elem((4, 4), Complex64::new(0.0, 0.0)),
        Array2::from_elem((4, 4), 0.5),
        StftConfig::default(),
    )
    .unwrap()
    .with_conditioning(Array2::from_elem((16, 8), Complex64::new(0.1, 0.0)))
    .unwrap();
    save_prior(dir.join("cond.bin"), &prior).unwrap();

    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_000.wav",
            "--prior",
            "cond.bin",
            "--output",
            "never.wav",
        ],
    );
    assert_code(&out, 2, "conditional prior without visual");
    assert!(!dir.join("never.wav").exists(), "no output may be written");
}

#[test]
fn unreadable_inputs_exit_3() {
    let dir = fresh_dir("unreadable");
    synth_corpus(&dir);

    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_000.wav",
            "--prior",
            "missing.bin",
            "--output",
            "x.wav",
        ],
    );
    assert_code(&out, 3, "missing prior file");

    std::fs::write(dir.join("garbage.bin"), b"NOTPRIORxxxxxxxxxxxxxxxx").unwrap();
    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_000.wav",
            "--prior",
            "garbage.bin",
            "--output",
            "x.wav",
        ],
    );
    assert_code(&out, 3, "corrupt prior file");

    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "nothere.wav",
            "--prior",
            "prior.bin",
            "--output",
            "x.wav",
        ],
    );
    assert_code(&out, 3, "missing wav");
}

#[test]
fn mismatched_prior_exits_4() {
    let dir = fresh_dir("mismatch");
    synth_corpus(&dir);
    // Valid unconditional prior whose frame count cannot match 0.5 s input.
    let prior = GaussianPrior::new(
        Array2::from_elem((256, 4), Complex64::new(0.0, 0.0)),
        Array2::from_elem((256, 4), 0.5),
        StftConfig::default(),
    )
    .unwrap();
    save_prior(dir.join("small.bin"), &prior).unwrap();
    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_000.wav",
            "--prior",
            "small.bin",
            "--output",
            "x.wav",
        ],
    );
    assert_code(&out, 4, "prior shape mismatch");
}

#[test]
fn divergent_guidance_exits_5() {
    let dir = fresh_dir("diverge");
    synth_corpus(&dir);
    let out = run_in(
        &dir,
        &[
            "enhance",
            "--input",
            "corpus/noisy_000.wav",
            "--prior",
            "prior.bin",
            "--output",
            "x.wav",
            "--lambda",
            "1e12",
        ],
    );
    assert_code(&out, 5, "runaway guidance");
}

#[test]
fn bad_config_file_exits_2() {
    let dir = fresh_dir("badcfg");
    std::fs::write(dir.join("cfg.txt"), "no_such_key = 1\n").unwrap();
    let out = run_in(&dir, &["enhance", "--config", "cfg.txt"]);
    assert_code(&out, 2, "unknown config key");

    let out = run_in(&dir, &["enhance", "--output", "x.wav", "--prior", "p.bin"]);
    assert_code(&out, 2, "missing input key");
}

#[test]
fn synth_is_reproducible_and_parallel_matches_sequential() {
    let dir = fresh_dir("synthrepro");
    for (sub, extra) in [("a", None), ("b", None), ("c", Some("--parallel"))] {
        let mut args = vec![
            "synth",
            "--out-dir",
            sub,
            "--count",
            "3",
            "--duration",
            "0.3",
            "--seed",
            "9",
        ];
        if let Some(flag) = extra {
            args.push(flag);
        }
        let out = run_in(&dir, &args);
        assert_code(&out, 0, "synth");
    }
    for name in [
        "clean_000.wav",
        "noisy_000.wav",
        "visual_000.emb",
        "clean_001.wav",
        "clean_002.wav",
    ] {
        let a = std::fs::read(dir.join("a").join(name)).unwrap();
        let b = std::fs::read(dir.join("b").join(name)).unwrap();
        let c = std::fs::read(dir.join("c").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical synth runs");
        assert_eq!(a, c, "{name} differs between sequential and parallel synth");
    }
    // Manifests match too, modulo the directory prefix in paths.
    let manifest = |sub: &str| {
        std::fs::read_to_string(dir.join(sub).join("manifest.txt"))
            .unwrap()
            .replace(&format!("{sub}/"), "")
            .replace(&format!("{sub}\\"), "")
    };
    assert_eq!(manifest("a"), manifest("b"));
    assert_eq!(manifest("a"), manifest("c"));
}
