use std::path::Path;
use std::process::Command;

use approx::assert_abs_diff_eq;
use cfa_core::cli::run_cli;
use cfa_core::datagen::Dataset;
use cfa_core::simulation::{emit_dcr_table, make_condition, run_simulation, RunSpec, SimulationConfig};

fn cfa(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cfa"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn write_model(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// Loading rows of a `fit` table: (item, estimate, fixed).
fn loading_rows(table: &str) -> Vec<(String, f64, bool)> {
    table
        .lines()
        .skip_while(|l| !l.starts_with("item"))
        .skip(1)
        .map(|l| {
            let mut cols = l.split_whitespace();
            let item = cols.next().unwrap().to_string();
            let value: f64 = cols.next().unwrap().parse().unwrap();
            (item, value, l.contains("(fixed)"))
        })
        .collect()
}

#[test]
fn simulate_stdout_matches_library_table() {
    let (code, stdout, _) = cfa(&[
        "simulate", "--condition", "3", "--runs", "m1,sol3,m4", "--reps", "40", "--seed", "11",
    ]);
    assert_eq!(code, 0);

    let truth = make_condition(3).unwrap();
    let runs = ["m1", "sol3", "m4"]
        .iter()
        .map(|t| RunSpec::parse(t, &truth).unwrap())
        .collect();
    let config = SimulationConfig {
        replicates: 40,
        base_seed: 11,
        ..SimulationConfig::for_condition(3, runs).unwrap()
    };
    let mut expected = Vec::new();
    emit_dcr_table(&run_simulation(&config).unwrap(), &mut expected).unwrap();
    assert_eq!(stdout.as_bytes(), expected.as_slice());
}

#[test]
fn repeated_invocations_are_identical() {
    let args = ["simulate", "--condition", "2", "--runs", "m2:+1,sol2:ub0", "--reps", "30", "--seed", "5"];
    let (c1, a, _) = cfa(&args);
    let (c2, b, _) = cfa(&args);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(a, b);
    assert!(a.starts_with("condition,method,loading,truth,m,n,dcr\n"));
}

#[test]
fn simulate_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let (code, stdout, _) = cfa(&[
        "simulate", "--condition", "1", "--runs", "sol3", "--reps", "20",
        "--out", path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    let table = std::fs::read_to_string(&path).unwrap();
    assert_eq!(table.lines().count(), 4);
    let manifest = std::fs::read_to_string(dir.path().join("t.csv.manifest.txt")).unwrap();
    assert!(manifest.contains("condition: 1"));
}

#[test]
fn generated_data_fit_with_positive_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(
        dir.path(),
        "m.txt",
        "F =~ x1 + x2 + x3 + x4\nstart F.x1 = -0.7\nstart F.x2 = -0.7\nstart F.x3 = -0.6\nstart F.x4 = -0.8\n",
    );
    let data = dir.path().join("d.csv");
    let (code, _, err) = cfa(&["gen", "--model", &model, "--n", "400", "--seed", "3", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{}", err);

    let parsed = Dataset::read_csv(std::fs::File::open(&data).unwrap()).unwrap();
    assert_eq!((parsed.n(), parsed.p()), (400, 4));

    // the start lines above describe the population, not the fit
    let plain = write_model(dir.path(), "plain.txt", "F =~ x1 + x2 + x3 + x4\n");
    let (code, table, err) = cfa(&["fit", "--model", &plain, "--data", data.to_str().unwrap(), "--identify", "anchor=F.x1"]);
    assert_eq!(code, 0, "{}", err);
    let rows = loading_rows(&table);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ("x1".to_string(), 1.0, true));
    assert!(rows.iter().all(|(_, v, _)| *v > 0.0), "{}", table);
}

#[test]
fn fixed_variance_fit_follows_starts() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.txt", "F =~ x1 + x2 + x3\n");
    let data = dir.path().join("d.csv");
    assert_eq!(cfa(&["gen", "--model", &model, "--n", "300", "--seed", "9", "--out", data.to_str().unwrap()]).0, 0);
    let d = data.to_str().unwrap();

    let (_, pos, _) = cfa(&["fit", "--model", &model, "--data", d, "--starts", "1"]);
    let (_, neg, _) = cfa(&["fit", "--model", &model, "--data", d, "--starts", "-1"]);
    let (pos, neg) = (loading_rows(&pos), loading_rows(&neg));
    assert_eq!(pos.len(), 3);
    for (p, n) in pos.iter().zip(&neg) {
        assert!(p.1 > 0.0 && n.1 < 0.0);
        // printed to 3 decimals
        assert_abs_diff_eq!(p.1, -n.1, epsilon = 1.5e-3);
    }

    let (code, bounded, _) = cfa(&["fit", "--model", &model, "--data", d, "--starts", "-1", "--bound", "F.x2:0:inf"]);
    assert_eq!(code, 0);
    assert!(loading_rows(&bounded)[1].1 >= 0.0);
}

#[test]
fn ordinal_data_fit_categorically() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(
        dir.path(),
        "m.txt",
        "F =~ x1 + x2 + x3 + x4\nordinal x1 3\nordinal x2 3\nordinal x3 3\nordinal x4 3\n",
    );
    let data = dir.path().join("d.csv");
    let (code, _, err) = cfa(&["gen", "--model", &model, "--n", "800", "--seed", "21", "--ordinal", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{}", err);
    let csv = std::fs::read_to_string(&data).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').all(|v| ["0", "1", "2"].contains(&v))));

    let (code, table, err) = cfa(&["fit", "--model", &model, "--data", data.to_str().unwrap(), "--categorical", "--starts", "1"]);
    assert_eq!(code, 0, "{}", err);
    let rows = loading_rows(&table);
    assert_eq!(rows.len(), 4);
    for (_, v, _) in rows {
        assert!((v - 0.7).abs() < 0.15, "{}", table);
    }
}

#[test]
fn usage_errors_exit_one() {
    let (code, stdout, stderr) = cfa(&["fit", "--bogus"]);
    assert_eq!(code, 1);
    assert!(stdout.is_empty());
    assert!(!stderr.is_empty());
    assert_eq!(cfa(&[]).0, 1);
}

#[test]
fn runtime_errors_exit_two() {
    let (code, _, stderr) = cfa(&["simulate", "--condition", "9", "--runs", "m1"]);
    assert_eq!(code, 2);
    assert!(stderr.starts_with("error:"));
    let (code, _, _) = cfa(&["simulate", "--condition", "1", "--runs", "m7"]);
    assert_eq!(code, 2);
}

#[test]
fn help_goes_to_stdout() {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(run_cli(["cfa", "--help"], &mut out, &mut err), 0);
    let text = String::from_utf8(out).unwrap();
    for sub in ["gen", "fit", "simulate"] {
        assert!(text.contains(sub));
    }
    assert!(err.is_empty());
}
