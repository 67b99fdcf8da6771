use kw_cli::PlanDocument;
use kw_core::{build_plan, Hypotheses, LagrangeConfig};
use std::path::Path;
use std::process::{Command, Output};

fn kw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kw"))
        .args(args)
        .output()
        .expect("kw runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn data_rows(out: &Output) -> Vec<Vec<String>> {
    stdout(out)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write_plan(dir: &Path, horizon: usize, lambda: f64) -> String {
    let hyp = Hypotheses::new(0.2, 0.6).unwrap();
    let cfg = LagrangeConfig::new(hyp, 0.4, lambda, lambda).unwrap();
    let doc = PlanDocument::from_plan(&build_plan(&cfg, horizon).unwrap()).unwrap();
    let path = dir.join("plan.json");
    std::fs::write(&path, doc.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn solve_prints_summary_and_writes_a_document() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("solved.json");
    let out = kw(&[
        "solve",
        "--theta0",
        "0.05",
        "--theta1",
        "0.15",
        "--alpha",
        "0.1",
        "--beta",
        "0.1",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "theta_star,lambda0,lambda1,H,N_star,delta,Q99,alpha,beta,status"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[3], "128");
    assert_eq!(row[6], "89");
    assert!((row[4].parse::<f64>().unwrap() - 38.62).abs() <= 0.01);
    let doc = PlanDocument::parse(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(doc.effective_horizon, 128);
    assert_eq!(doc.to_plan().unwrap().horizon(), doc.horizon);
}

#[test]
fn invalid_probabilities_exit_with_usage_code() {
    let out = kw(&[
        "solve", "--theta0", "0.05", "--theta1", "0.15", "--alpha", "1.5", "--beta", "0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    let out = kw(&[
        "solve", "--theta0", "0.3", "--theta1", "0.2", "--alpha", "0.1", "--beta", "0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_a_one_stage_plan() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), 1, 3.0);
    let out = kw(&["eval", "--plan", &plan, "--theta", "0.2,0.6"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).starts_with("theta,oc,asn\n"));
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row[2], "1");
    }
}

#[test]
fn eval_simulation_columns_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), 20, 30.0);
    let args = [
        "eval",
        "--plan",
        &plan,
        "--theta",
        "0.4",
        "--simulate",
        "20000",
        "--seed",
        "5",
    ];
    let first = kw(&args);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(stdout(&first), stdout(&kw(&args)));
    let rows = data_rows(&first);
    assert_eq!(rows[0].len(), 7);
    let (asn, asn_hat, se): (f64, f64, f64) = (
        rows[0][2].parse().unwrap(),
        rows[0][5].parse().unwrap(),
        rows[0][6].parse().unwrap(),
    );
    assert!((asn - asn_hat).abs() <= 4.0 * se);
}

#[test]
fn malformed_plans_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), 5, 10.0);
    let text = std::fs::read_to_string(&plan)
        .unwrap()
        .replace("\"kw-plan/1\"", "\"kw-plan/9\"");
    std::fs::write(&plan, text).unwrap();
    let out = kw(&["eval", "--plan", &plan, "--theta", "0.3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    std::fs::write(&plan, "{ not json").unwrap();
    assert_eq!(
        kw(&["eval", "--plan", &plan, "--theta", "0.3"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn grid_emits_one_row_per_point() {
    let out = kw(&[
        "grid",
        "--theta0",
        "0.3",
        "--theta1",
        "0.5",
        "--points",
        "2",
        "--log-min",
        "2",
        "--log-max",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).starts_with(
        "ln_lambda0,ln_lambda1,alpha,beta,N_star,N_theta0,N_theta1,delta,FSS_approx,R,R0,R1\n"
    ));
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 4);
    assert_eq!((rows[0][0].as_str(), rows[0][1].as_str()), ("2", "2"));
    assert_eq!((rows[3][0].as_str(), rows[3][1].as_str()), ("3", "3"));
    assert_eq!(
        kw(&["grid", "--theta0", "0.3", "--theta1", "0.5", "--points", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn symmetric_table_leaves_sprt_columns_empty() {
    let out = kw(&[
        "table", "--theta0", "0.45", "--theta1", "0.55", "--levels", "0.1",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 17);
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 1);
    for (name, value) in header.iter().zip(&rows[0]) {
        if name.starts_with("sprt_") || name.ends_with("_W") {
            assert!(value.is_empty(), "{name} = {value}");
        }
    }
    let q99 = header.iter().position(|h| *h == "Q99").unwrap();
    assert_eq!(rows[0][q99], "274");
}
