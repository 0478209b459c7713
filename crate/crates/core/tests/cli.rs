mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use covbal::cli::{cmd_estimate, read_dataset, run, RunConfig, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
use covbal::data::{Dataset, Subject};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

use common::{assert_valid, example_csv, write_csv};

fn covbal(args: &[&str]) -> i32 {
    let mut all = vec!["covbal"];
    all.extend_from_slice(args);
    run(all)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn asmds(doc: &Value) -> Vec<f64> {
    doc["imbalance"]["asmd"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect()
}

#[test]
fn example_eb_balances_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eb.json");
    let code = covbal(&["estimate", "--input", example_csv(), "--method", "eb", "--output", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let doc = read_json(&out);
    assert_valid(&doc);
    let a = asmds(&doc);
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|v| *v <= 1e-6), "{a:?}");
    assert!(doc["imbalance"]["md"].as_f64().unwrap() <= 1e-6);
    assert_eq!(doc["fit"]["converged"], Value::Bool(true));
}

#[test]
fn ceb_without_error_model_is_a_config_error() {
    assert_eq!(covbal(&["estimate", "--input", example_csv(), "--method", "ceb"]), EXIT_CONFIG);
    assert_eq!(covbal(&["estimate", "--input", example_csv(), "--method", "bceb"]), EXIT_CONFIG);
}

#[test]
fn error_model_block_exclusivity() {
    let both = [
        "estimate", "--input", example_csv(), "--method", "ceb", "--sigma1", "0.05",
        "--estimate-from-replicates",
    ];
    assert_eq!(covbal(&both), EXIT_CONFIG);
    let hw = ["estimate", "--input", example_csv(), "--method", "ceb_hw", "--sigma1", "0.05"];
    assert_eq!(covbal(&hw), EXIT_CONFIG);
    let wrong_len = ["estimate", "--input", example_csv(), "--method", "ceb", "--sigma1", "0.1,0.2,0.3"];
    assert_eq!(covbal(&wrong_len), EXIT_CONFIG);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hw.json");
    let ok = ["estimate", "--input", example_csv(), "--method", "ceb_hw", "--output", s(&out)];
    assert_eq!(covbal(&ok), EXIT_OK);
    assert_valid(&read_json(&out));
}

#[test]
fn numerical_failure_exits_3() {
    // error variance far above the spread of x: the corrected objective has
    // no local minimum
    let code = covbal(&["estimate", "--input", example_csv(), "--method", "ceb", "--sigma1", "25"]);
    assert_eq!(code, EXIT_NUMERICAL);
}

#[test]
fn malformed_rows_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "id,treat,outcome,rep,x_1,u_1\na,1,2.0,1,0.5,1\nb,0,1.0,1,oops,2\n").unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(err.to_string().contains(":3:"), "{err}");
    assert_eq!(err.exit_code(), EXIT_CONFIG);

    std::fs::write(&path, "id,treat,outcome,rep,x_1,u_1\na,1,2.0,0,0.5,1\nb,0,1.0,1,0.1,2\n").unwrap();
    assert!(read_dataset(&path).unwrap_err().to_string().contains(":2:"));

    std::fs::write(&path, "id,treat,rep,x_1,z\na,1,1,0.5,1\n").unwrap();
    assert!(read_dataset(&path).unwrap_err().to_string().contains("unexpected column"));

    std::fs::write(&path, "id,treat,outcome,rep,x_1,u_1\na,2,2.0,1,0.5,1\nb,0,1.0,1,0.1,2\n").unwrap();
    assert_eq!(read_dataset(&path).unwrap_err().exit_code(), EXIT_CONFIG);
}

#[test]
fn ragged_replicates_parse() {
    let input = read_dataset(Path::new(example_csv())).unwrap();
    let counts = input.data.replicate_counts();
    assert!(counts.contains(&1) && counts.contains(&2));
    assert_eq!(input.covariate_names(), ["x_1", "u_1"]);
}

/// Arms with identical covariate rows.
fn mirrored(dir: &Path) -> PathBuf {
    let subjects: Vec<Subject> = (0..12)
        .map(|i| Subject {
            id: format!("s{i}"),
            treated: i % 2 == 0,
            outcome: None,
            x_star: vec![vec![(i / 2) as f64 * 0.7 - 1.0]],
            u: vec![((i / 2) as f64).sin()],
        })
        .collect();
    let data = Dataset::from_subjects(subjects).unwrap();
    let path = dir.join("mirror.csv");
    write_csv(&path, &data);
    path
}

#[test]
fn uniform_weights_on_identical_arms_balance() {
    let dir = tempfile::tempdir().unwrap();
    let input = mirrored(dir.path());
    let weights = dir.path().join("w.csv");
    let mut text = String::from("id,weight\n");
    for i in (1..12).step_by(2) {
        text.push_str(&format!("s{i},{}\n", 1.0 / 6.0));
    }
    std::fs::write(&weights, text).unwrap();
    let out = dir.path().join("bal.json");
    let code = covbal(&["balance", "--input", s(&input), "--weights", s(&weights), "--output", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let doc = read_json(&out);
    assert_valid(&doc);
    assert!(asmds(&doc).iter().all(|v| *v <= 1e-12));
    assert!(doc["imbalance"]["md"].as_f64().unwrap() <= 1e-12);
    assert_eq!(doc["fit"], Value::Null);
}

#[test]
fn weights_not_summing_to_one_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let input = mirrored(dir.path());
    let weights = dir.path().join("w.csv");
    let mut text = String::from("id,weight\n");
    for i in (1..12).step_by(2) {
        text.push_str(&format!("s{i},0.2\n"));
    }
    std::fs::write(&weights, text).unwrap();
    let code = covbal(&["balance", "--input", s(&input), "--weights", s(&weights)]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn estimate_weights_round_trip_through_balance() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.csv");
    let code = covbal(&[
        "estimate", "--input", example_csv(), "--weights-out", s(&w), "--output",
        s(&dir.path().join("est.json")),
    ]);
    assert_eq!(code, EXIT_OK);
    let out = dir.path().join("bal.json");
    let code = covbal(&["balance", "--input", example_csv(), "--weights", s(&w), "--output", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let doc = read_json(&out);
    assert_valid(&doc);
    assert!(asmds(&doc).iter().all(|v| *v <= 1e-6));
}

#[test]
fn balance_fits_when_no_weights_given() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bal.json");
    let code = covbal(&[
        "balance", "--input", example_csv(), "--method", "cbps", "--cbps-variant", "just_identified",
        "--output", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let doc = read_json(&out);
    assert_valid(&doc);
    assert_eq!(doc["imbalance"]["weights_source"], "cbps");
    assert!(asmds(&doc).iter().all(|v| *v <= 1e-6));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "input = {:?}\nmethod = \"ceb\"\nsigma1 = [0.05]\nbootstrap = 20\nseed = 4\n",
            example_csv()
        ),
    )
    .unwrap();
    let out = dir.path().join("a.json");
    assert_eq!(covbal(&["estimate", "--config", s(&cfg), "--output", s(&out)]), EXIT_OK);
    let a = read_json(&out);
    assert_valid(&a);
    assert_eq!(a["att"]["method"], "ceb");
    assert_eq!(a["att"]["bootstrap_reps"], 20);

    let out_b = dir.path().join("b.json");
    let code = covbal(&["estimate", "--config", s(&cfg), "--method", "bceb", "--output", s(&out_b)]);
    assert_eq!(code, EXIT_OK);
    let b = read_json(&out_b);
    assert_eq!(b["att"]["method"], "bceb");
    assert_eq!(b["config"]["seed"], 4);

    std::fs::write(&cfg, "input = \"x.csv\"\nunknown_key = 1\n").unwrap();
    assert_eq!(covbal(&["estimate", "--config", s(&cfg)]), EXIT_CONFIG);
}

#[test]
fn results_reproduce_from_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.json");
    let code = covbal(&[
        "estimate", "--input", example_csv(), "--method", "ceb", "--estimate-from-replicates",
        "--bootstrap", "30", "--seed", "11", "--output", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let first = read_json(&out);
    let mut cfg: RunConfig = serde_json::from_value(first["config"].clone()).unwrap();
    cfg.output = None;
    let again: Value = serde_json::from_str(&cmd_estimate(&cfg).unwrap()).unwrap();
    assert_eq!(first["att"], again["att"]);
    assert_eq!(first["fit"], again["fit"]);
    assert!(first["att"]["se"].as_f64().unwrap() > 0.0);
}

/// Simulated data resembling a cohort with one mismeasured covariate whose
/// propensity coefficient is near zero but which drives the outcome.
fn sensitivity_data(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let subjects: Vec<Subject> = (0..1500)
        .map(|i| {
            let x: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.sample(StandardNormal);
            let index = -0.4 - 0.15 * x + 0.6 * u;
            let treated = rng.gen::<f64>() < 1.0 / (1.0 + (-index).exp());
            let noise: f64 = rng.sample(StandardNormal);
            let y = 2.5 + 3.0 * x + 1.0 * u + if treated { 3.0 } else { 0.0 } + noise;
            let e: f64 = rng.sample(StandardNormal);
            Subject {
                id: format!("p{i}"),
                treated,
                outcome: Some(y),
                x_star: vec![vec![x + 0.2 * e]],
                u: vec![u],
            }
        })
        .collect();
    let path = dir.join("cohort.csv");
    write_csv(&path, &Dataset::from_subjects(subjects).unwrap());
    path
}

#[test]
fn sensitivity_sweep_is_monotone_in_error_variance() {
    let dir = tempfile::tempdir().unwrap();
    let input = sensitivity_data(dir.path());
    let mut taus = Vec::new();
    for (k, v) in ["0.0126", "0.0226", "0.0372", "0.0420"].iter().enumerate() {
        let out = dir.path().join(format!("s{k}.json"));
        let code = covbal(&["estimate", "--input", s(&input), "--method", "ceb", "--sigma1", v, "--output", s(&out)]);
        assert_eq!(code, EXIT_OK);
        let doc = read_json(&out);
        assert_valid(&doc);
        taus.push(doc["att"]["tau"].as_f64().unwrap().abs());
    }
    assert!(taus.windows(2).all(|w| w[1] >= w[0]), "{taus:?}");
    assert!(taus[3] > taus[0]);
}

#[test]
fn simulate_smoke_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let code = covbal(&[
        "simulate", "--design", "bivariate", "--reps", "5", "--n", "1000", "--error-variance", "0.05",
        "--output", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let doc = read_json(&out.join("table.json"));
    assert_valid(&doc);
    let meta = &doc["tables"][0]["metadata"];
    assert_eq!(meta["reps"], 5);
    assert_eq!(meta["replicate_policy"], "first");
    assert!(meta["covariate_law"].as_str().unwrap().contains("0.3"));
    let cell = &doc["tables"][0]["cells"][0];
    let total = cell["successes"].as_u64().unwrap() + cell["failures"].as_u64().unwrap();
    assert_eq!(total, 5);
    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert!(plot.starts_with("scenario,method,x,metric,value\n"));
    let rows = csv::Reader::from_path(out.join("table.csv")).unwrap().records().count();
    assert_eq!(rows, 1);
}

#[test]
fn simulate_rejects_replicate_method_without_replicates() {
    let code = covbal(&[
        "simulate", "--design", "four_covariate", "--methods", "ceb_hl", "--m", "1", "--reps", "2",
        "--error-variance", "0.1",
    ]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn binary_exit_codes_and_threads_override() {
    let bin = env!("CARGO_BIN_EXE_covbal");
    let status = Command::new(bin)
        .args(["estimate", "--input", example_csv(), "--method", "ceb"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&status.stderr).contains("needs an error model"));

    let dir = tempfile::tempdir().unwrap();
    let run_sim = |sub: &str, threads: &str| {
        let out = dir.path().join(sub);
        let st = Command::new(bin)
            .env("THREADS", threads)
            .args([
                "simulate", "--design", "four_covariate", "--n", "300", "--reps", "3", "--m", "2",
                "--methods", "eb,ceb_hw", "--error-variance", "0.1", "--output",
            ])
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        let doc = read_json(&out.join("table.json"));
        (doc["tables"].clone(), std::fs::read(out.join("table.csv")).unwrap())
    };
    assert_eq!(run_sim("one", "1"), run_sim("two", "2"));

    let bad = Command::new(bin)
        .env("THREADS", "many")
        .args(["simulate", "--reps", "1", "--n", "100"])
        .arg("--output")
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(EXIT_CONFIG));
}
