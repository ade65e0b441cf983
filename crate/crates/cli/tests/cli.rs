use std::path::Path;
use std::process::{Command, Output};

use fairpareto_core::configspace::Configuration;
use fairpareto_core::objectives::{MetricValue, Objectives};
use fairpareto_core::paretostats::read_front_csv;
use fairpareto_core::store::{RunLogWriter, TrialRecord};

fn fairpareto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairpareto"))
        .args(args)
        .env("FAIRPARETO_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const WORKED_EXAMPLE: &str = "image_id,identity,group,e0
m1a,m1,M,0.0
m1b,m1,M,0.1
f1a,f1,F,1.0
f1b,f1,F,1.3
f2a,f2,F,1.1
";

fn write_log(path: &Path, points: &[(f64, f64)], fidelity: u32) {
    let mut w = RunLogWriter::create(path).unwrap();
    for (i, &(e, r)) in points.iter().enumerate() {
        let mut o = Objectives::new();
        o.insert("error".into(), MetricValue::Defined(e));
        o.insert("rank_disparity".into(), MetricValue::Defined(r));
        let config = Configuration::new().with("head", "CosFace").with("lr", 0.001 * (i + 1) as f64);
        w.append(&TrialRecord::reported(format!("t{i}"), config, i as u64, fidelity, o, 1.0))
            .unwrap();
    }
}

#[test]
fn search_with_one_trial_writes_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.jsonl");
    let o = fairpareto(&["search", "--budget-trials", "1", "--workers", "1", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with(r#"{"v":1,"trial_id":"t0","#));
    assert_eq!(stdout(&o), "config_key,f1_mean,f1_stderr,f2_mean,f2_stderr,n_seeds,on_front\n");
}

#[test]
fn search_defaults_use_standard_ladder() {
    let help = stdout(&fairpareto(&["search", "--help"]));
    for flag in ["--min-fidelity <MIN_FIDELITY>  [default: 25]", "--max-fidelity <MAX_FIDELITY>  [default: 100]", "--eta <ETA>  [default: 2]", "--rho <RHO>  [default: 0.05]"] {
        let (name, default) = flag.split_once("  ").unwrap();
        let line = help.lines().find(|l| l.contains(name)).unwrap_or_else(|| panic!("{name} missing"));
        let rest = help.lines().skip_while(|l| !l.contains(name)).take(3).collect::<Vec<_>>().join(" ");
        assert!(line.contains(default) || rest.contains(default), "{name}: {rest}");
    }
}

#[test]
fn search_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = fairpareto(&["search", "--budget-trials", "40", "--seed", "7", "--out", path_str(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn invalid_space_file_exits_2_naming_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.json");
    std::fs::write(
        &space,
        r#"{"name":"bad","parameters":[{"name":"head","kind":"categorical","choices":["A"]},{"name":"lr","kind":"continuous_log","bounds":[0.1,0.01]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("run.jsonl");
    let o = fairpareto(&["search", "--space", path_str(&space), "--budget-trials", "1", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`lr`"), "{}", stderr(&o));
}

#[test]
fn failing_worker_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.jsonl");
    let o = fairpareto(&["search", "--backend", "worker:exit 1", "--budget-trials", "20", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn bad_backend_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.jsonl");
    let o = fairpareto(&["search", "--backend", "builtin:nope", "--budget-trials", "1", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_embeddings_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("emb.csv");
    std::fs::write(&file, WORKED_EXAMPLE).unwrap();
    let o = fairpareto(&["eval-embeddings", "--file", path_str(&file)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "metric,value\nrank_disparity,1\ndisparity,1\nratio,undefined\nrank_ratio,1\nerror_ratio,1\n"
    );
}

#[test]
fn eval_embeddings_mirrored_groups_have_zero_disparity() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("emb.csv");
    let mut text = String::from("image_id,identity,group,e0,e1\n");
    let base = [(0.0, 0.0), (0.2, 0.1), (1.0, 1.0), (1.1, 0.8), (3.0, -1.0), (2.7, -1.2)];
    for (g, sign) in [("A", 1.0), ("B", -1.0)] {
        for (i, (x, y)) in base.iter().enumerate() {
            text.push_str(&format!("{g}{i},{g}p{},{g},{},{}\n", i / 2, sign * x + 50.0 * sign, sign * y));
        }
    }
    std::fs::write(&file, text).unwrap();
    let o = fairpareto(&["eval-embeddings", "--file", path_str(&file), "--metrics", "rank_disparity,disparity"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "metric,value\nrank_disparity,0\ndisparity,0\n");
}

#[test]
fn eval_embeddings_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let one_group = dir.path().join("one.csv");
    std::fs::write(&one_group, "image_id,identity,group,e0\na,x,G,0\nb,x,G,1\n").unwrap();
    assert_eq!(fairpareto(&["eval-embeddings", "--file", path_str(&one_group)]).status.code(), Some(2));

    let no_identity = dir.path().join("bad.csv");
    std::fs::write(&no_identity, "image_id,group,e0\na,G,0\n").unwrap();
    let o = fairpareto(&["eval-embeddings", "--file", path_str(&no_identity)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("identity"), "{}", stderr(&o));

    let missing = dir.path().join("missing.csv");
    assert_eq!(fairpareto(&["eval-embeddings", "--file", path_str(&missing)]).status.code(), Some(2));

    let file = dir.path().join("emb.csv");
    std::fs::write(&file, WORKED_EXAMPLE).unwrap();
    let o = fairpareto(&["eval-embeddings", "--file", path_str(&file), "--metrics", "accuracy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_embeddings_three_groups_needs_multi_group() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("emb.csv");
    let text = format!("{WORKED_EXAMPLE}x1a,x1,X,5.0\nx1b,x1,X,5.05\n");
    std::fs::write(&file, text).unwrap();
    assert_eq!(fairpareto(&["eval-embeddings", "--file", path_str(&file)]).status.code(), Some(2));
    let o = fairpareto(&["eval-embeddings", "--file", path_str(&file), "--multi-group", "--metrics", "rank_disparity,ratio"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // M-F 1.0, M-X 0.0, F-X 1.0; ratio only defined for F-X (|1 - 0/1|) and M-X (|1 - 1/1|)
    assert_eq!(stdout(&o), "metric,value\nrank_disparity,1\nratio,1\n");
}

#[test]
fn pareto_marks_front_rows() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("run.jsonl");
    write_log(&runs, &[(0.1, 0.5), (0.2, 0.3), (0.3, 0.4)], 100);
    let front = dir.path().join("front.csv");
    let o = fairpareto(&["pareto", "--runs", path_str(&runs), "--objectives", "error,rank_disparity", "--out", path_str(&front)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (names, rows) = read_front_csv(std::fs::File::open(&front).unwrap()).unwrap();
    assert_eq!(names, vec!["error", "rank_disparity"]);
    let flags: Vec<bool> = rows.iter().map(|r| r.on_front).collect();
    assert_eq!(flags, vec![true, true, false]);
}

#[test]
fn pareto_filter_excludes_records() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("run.jsonl");
    write_log(&runs, &[(0.1, 0.5), (0.2, 0.3), (0.3, 0.1), (0.5, 0.0)], 100);
    let o = fairpareto(&["pareto", "--runs", path_str(&runs), "--filter", "error<0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_front_csv(stdout(&o).as_bytes()).unwrap();
    let errors: Vec<f64> = rows.iter().map(|r| r.point.mean.get("error").unwrap()).collect();
    assert_eq!(errors, vec![0.1, 0.2]);
}

#[test]
fn pareto_aggregates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("run.jsonl");
    let mut w = RunLogWriter::create(&runs).unwrap();
    let config = Configuration::new().with("head", "ArcFace");
    for (seed, e) in [(0u64, 0.2), (1, 0.4)] {
        let mut o = Objectives::new();
        o.insert("error".into(), MetricValue::Defined(e));
        o.insert("rank_disparity".into(), MetricValue::Defined(1.0));
        w.append(&TrialRecord::reported(format!("t0-s{seed}"), config.clone(), seed, 100, o, 0.0)).unwrap();
    }
    drop(w);
    let o = fairpareto(&["pareto", "--runs", path_str(&runs), "--aggregate-seeds"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_front_csv(stdout(&o).as_bytes()).unwrap();
    assert_eq!(rows.len(), 1);
    let p = &rows[0].point;
    assert_eq!(p.n_seeds, 2);
    assert!((p.mean.get("error").unwrap() - 0.3).abs() < 1e-15);
    // sample sd 0.1414..., divided by sqrt(2)
    assert!((p.standard_error.get("error").unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn unknown_objective_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("run.jsonl");
    write_log(&runs, &[(0.1, 0.5)], 100);
    let o = fairpareto(&["pareto", "--runs", path_str(&runs), "--objectives", "error,latency"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latency"));
    let o = fairpareto(&["report", "--runs", path_str(&runs), "--correlation", "error,latency"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fairpareto(&["pareto", "--runs", path_str(&runs), "--filter", "latency<3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_linear_objectives_correlate_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("run.jsonl");
    let pts: Vec<(f64, f64)> = (0..10).map(|i| (0.05 * i as f64, 2.0 + 0.3 * i as f64)).collect();
    write_log(&runs, &pts, 100);
    let o = fairpareto(&["report", "--runs", path_str(&runs), "--correlation", "error,rank_disparity"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "x,y,n,pearson\nerror,rank_disparity,10,1\n");
    let o = fairpareto(&["report", "--runs", path_str(&runs), "--correlation", "error,rank_disparity", "--filter", "error<0.3"]);
    assert!(stdout(&o).contains(",6,1\n"), "{}", stdout(&o));
}

#[test]
fn reevaluate_runs_front_members_with_four_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("run.jsonl");
    let o = fairpareto(&["search", "--budget-trials", "30", "--seed", "1", "--out", path_str(&runs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let front_rows = stdout(&o).lines().count() - 1;
    let re = dir.path().join("re.jsonl");
    let o = fairpareto(&["reevaluate", "--runs", path_str(&runs), "--out", path_str(&re)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&re).unwrap().lines().count(), 4 * front_rows);
    let o = fairpareto(&["pareto", "--runs", path_str(&re), "--objectives", "f1,f2", "--aggregate-seeds"]);
    let (_, rows) = read_front_csv(stdout(&o).as_bytes()).unwrap();
    assert_eq!(rows.len(), front_rows);
    assert!(rows.iter().all(|r| r.point.n_seeds == 4));
}
