use std::collections::BTreeSet;
use std::path::Path;

use mkv_core::cli::run;
use mkv_core::output::Table;

fn mkv(args: &[&str], out: &Path) -> i32 {
    let mut argv = vec!["mkv".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.extend(["--out".to_string(), out.display().to_string()]);
    run(argv)
}

fn csv(path: &Path) -> Table {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let mut t = Table::new(lines.next().unwrap().split(','));
    for l in lines {
        t.push(l.split(',').map(String::from).collect());
    }
    t
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn validate_builtin_problems() {
    let tmp = tempfile::tempdir().unwrap();
    for p in ["lq1d", "zero", "drift-only"] {
        let dir = tmp.path().join(p);
        assert_eq!(mkv(&["validate", "--problem", p], &dir), 0, "{p}");
        assert!(dir.join("report.json").exists());
    }
}

#[test]
fn zero_problem_pays_the_terminal_constant() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mkv(&["estimate", "--problem", "zero", "--g-const", "1"], tmp.path()), 0);
    let t = csv(&tmp.path().join("value.csv"));
    assert_eq!(t.column("value").unwrap(), vec![1.0]);
    assert_eq!(t.column("std_error").unwrap(), vec![0.0]);
}

#[test]
fn manifest_lists_exactly_the_files_written() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mkv(&["study-chaos", "--N", "8,16", "--batches", "2", "--steps", "8"], tmp.path()), 0);
    let m = manifest(tmp.path());
    let listed: BTreeSet<String> = m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap().to_string()).collect();
    let on_disk: BTreeSet<String> =
        std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).filter(|f| f != "manifest.json").collect();
    assert_eq!(listed, on_disk);
    assert_eq!(m["seed"], 0);
    assert_eq!(m["steps"], 8);
    assert!(m["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
}

#[test]
fn limit_study_table_has_one_row_per_population() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mkv(&["study-limit", "--problem", "lq1d", "--N", "64,128,256,512", "--seed", "7", "--batches", "16", "--steps", "10"], tmp.path()), 0);
    let t = csv(&tmp.path().join("limit.csv"));
    assert_eq!(t.column("N").unwrap(), vec![64.0, 128.0, 256.0, 512.0]);
    let s = csv(&tmp.path().join("summary.csv"));
    assert!(s.rows.iter().any(|r| r[0] == "decreasing" && (r[1] == "true" || r[1] == "false")));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "problem = \"zero\"\nseed = 3\nsteps = 4\nbatches = 2\ng_const = 2.5\n").unwrap();
    let out = tmp.path().join("a");
    assert_eq!(mkv(&["estimate", "--config", cfg.to_str().unwrap(), "--seed", "9"], &out), 0);
    let m = manifest(&out);
    assert_eq!((m["seed"].as_u64(), m["steps"].as_u64(), m["batches"].as_u64()), (Some(9), Some(4), Some(2)));
    assert_eq!(csv(&out.join("value.csv")).column("value").unwrap(), vec![2.5]);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(mkv(&["study-continuity", "--N", "16", "--batches", "4", "--steps", "8", "--seed", "5"], &a), 0);
    let cfg = a.join("config.toml");
    assert_eq!(mkv(&["study-continuity", "--config", cfg.to_str().unwrap()], &b), 0);
    assert_eq!(std::fs::read(a.join("continuity.csv")).unwrap(), std::fs::read(b.join("continuity.csv")).unwrap());
}

#[test]
fn optimized_policy_round_trips_through_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("opt"), tmp.path().join("est"));
    assert_eq!(mkv(&["optimize", "--N", "16", "--batches", "4", "--steps", "8", "--budget", "64", "--seed", "2"], &a), 0);
    let policy = a.join("policy.toml");
    assert_eq!(mkv(&["estimate", "--config", policy.to_str().unwrap(), "--N", "16", "--batches", "4", "--steps", "8", "--seed", "2"], &b), 0);
    let best = csv(&a.join("result.csv")).rows.iter().find(|r| r[0] == "value").unwrap()[1].parse::<f64>().unwrap();
    assert_eq!(csv(&b.join("value.csv")).column("value").unwrap(), vec![best]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(mkv(&["frobnicate"], &p.join("u1")), 1);
    assert_eq!(mkv(&["estimate", "--no-such-flag"], &p.join("u2")), 1);
    assert_eq!(mkv(&["estimate", "--problem", "nope"], &p.join("u3")), 1);

    let bad = p.join("bad.toml");
    std::fs::write(&bad, "[lq]\nr = -1.0\n").unwrap();
    assert_eq!(mkv(&["validate", "--config", bad.to_str().unwrap()], &p.join("v")), 2);

    let explode = p.join("explode.toml");
    std::fs::write(&explode, "steps = 2\n[lq]\na = 10000.0\n[policy]\nkind = \"constant\"\naction = [0.0]\n").unwrap();
    assert_eq!(mkv(&["estimate", "--config", explode.to_str().unwrap(), "--N", "4", "--batches", "1"], &p.join("x")), 3);
}
