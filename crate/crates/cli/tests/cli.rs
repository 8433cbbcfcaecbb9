use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restriction-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let mut listed: Vec<String> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    listed.sort();
    let mut present: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f != "manifest.json")
        .collect();
    present.sort();
    assert_eq!(listed, present);
}

#[test]
fn verify_default_config_passes_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("verify");
    let o = lab(&["verify", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(out.join("verify.csv")).unwrap();
    let status = reader.headers().unwrap().iter().position(|h| h == "status").unwrap();
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert!(rows.len() >= 10);
    for r in &rows {
        assert_eq!(&r[status], "pass", "{r:?}");
    }
    assert_manifest_complete(&out);
    assert_eq!(manifest(&out)["subcommand"], "verify");
}

#[test]
fn plate_estimate_has_flat_critical_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("est");
    let cfg = config_path("plate.json");
    let o = lab(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(out.join("estimate.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "n",
            "R",
            "q",
            "family",
            "lhs",
            "normalizer",
            "ratio",
            "slope",
            "residual",
            "seed"
        ]
    );
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let slope: f64 = rows[0][7].parse().unwrap();
    assert!(slope.abs() <= 0.1, "slope {slope}");
    assert!(out.join("estimate.json").exists());
    assert_manifest_complete(&out);
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = lab(&[
        "estimate",
        "--config",
        "/definitely/not/here.json",
        "--out",
        "/tmp/unused-lab-out",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.json"), "{}", stderr(&o));
}

#[test]
fn invalid_config_reports_a_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(
        tmp.path(),
        "bad.json",
        "{\n  \"n\": 2,\n  \"R\": [64, 96],\n  \"q\": 2,\n  \"family\": \"plate\"\n}\n",
    );
    let o = lab(&[
        "plate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json:3:"), "{}", stderr(&o));
    assert!(!tmp.path().join("o").exists(), "no work before validation");

    let broken = write(tmp.path(), "broken.json", "{\n  \"n\": 2,\n  \"R\" [64]\n}\n");
    let o = lab(&["plate", "--config", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.json:3:"), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "random.json",
        r#"{"n": 1, "R": [64, 128, 256], "q": 2, "family": "random", "seed": 3}"#,
    );
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = lab(&[
            "estimate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(out.join("estimate.csv")).unwrap(), manifest(&out))
    };
    let (a, ma) = run("a", "5");
    let (b, _) = run("b", "5");
    let (c, _) = run("c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(ma["seed"], 5);
    assert!(ma["timestamp"].as_str().is_some());
}

#[test]
fn incidence_writes_one_chain_row_per_inequality_and_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "inc.json",
        r#"{"n": 2, "R": [64], "q": 2, "family": "random", "budgets": {"configurations": 3, "tubes_per_family": 20}}"#,
    );
    let out = tmp.path().join("inc");
    let o = lab(&[
        "incidence",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<_> = csv::Reader::from_path(out.join("chain.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect();
    let per_config = rows.iter().filter(|r| &r[1] == "0").count();
    assert!(per_config > 0);
    assert_eq!(rows.len(), 3 * per_config);
    let config: Value = serde_json::from_str(&fs::read_to_string(out.join("configuration_R64.json")).unwrap()).unwrap();
    assert_eq!(config.as_array().unwrap().len(), 2);
    assert_manifest_complete(&out);
}

const HEADER: &str = "n,R,q,family,lhs,normalizer,ratio,slope,residual,seed\n";

#[test]
fn plotdata_single_report_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let report = write(
        tmp.path(),
        "a.csv",
        &format!("{HEADER}2,64.0,2.0,plate,1.0,2.0,0.5,-0.25,0.01,1\n2,128.0,2.0,plate,1.0,2.5,0.4,-0.25,0.01,1\n"),
    );
    let out = tmp.path().join("plot");
    let o = lab(&["plotdata", report.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("plotdata.csv")).unwrap(),
        "experiment,R,q,ratio,slope\nplate-n2,64.0,2.0,0.5,-0.25\nplate-n2,128.0,2.0,0.4,-0.25\n"
    );
    assert_manifest_complete(&out);
}

#[test]
fn plotdata_unions_disjoint_scales_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(
        tmp.path(),
        "a.csv",
        &format!("{HEADER}2,256.0,2.0,plate,1,1,0.3,-0.2,0,1\n"),
    );
    let b = write(
        tmp.path(),
        "b.csv",
        &format!("{HEADER}2,64.0,2.0,plate,1,1,0.5,-0.2,0,1\n"),
    );
    let out = tmp.path().join("plot");
    let o = lab(&[
        "plotdata",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("plotdata.csv")).unwrap();
    let scales: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(scales, ["64.0", "256.0"]);
}

#[test]
fn plotdata_rejects_malformed_rows_and_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(
        tmp.path(),
        "bad.csv",
        &format!("{HEADER}2,64.0,2.0,plate,1,1,0.5,-0.2,0,1\n2,oops,2.0,plate,1,1,0.5,-0.2,0,1\n"),
    );
    let o = lab(&[
        "plotdata",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("bad.csv:3"), "{}", stderr(&o));

    let other = write(tmp.path(), "other.csv", "check,value,threshold,status\nx,1,1,pass\n");
    let o = lab(&[
        "plotdata",
        other.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("schema mismatch"), "{}", stderr(&o));
}
