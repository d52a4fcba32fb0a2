use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn parsnav(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parsnav"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = parsnav(
        &["run", "--estimator", "eskf", "--duration", "20", "--seed", "3", "--out", "res"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["epochs.csv", "report.json", "rmse_table.csv"] {
        assert!(dir.path().join("res").join(f).is_file(), "missing {f}");
    }
    let text = stdout(&o);
    assert!(text.contains("ESKF+NT"), "{text}");
    assert!(text.contains("post-handover horizontal RMSE"), "{text}");
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = parsnav(
            &["run", "--kernel", "tukey", "--duration", "12", "--seed", "9", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("epochs.csv")).unwrap();
    assert!(!read("a").is_empty());
    assert_eq!(read("a"), read("b"));
}

#[test]
fn config_file_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("fgo.toml"),
        r#"seed = 2
output = "fgo"

[scenario]
preset = "aoa-baro"
duration = 15.0

[estimator]
kind = "fgo"
kernel = "gm"
lag = 1.5
"#,
    )
    .unwrap();
    let o = parsnav(&["run", "--config", "fgo.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = parsnav(
        &["run", "--preset", "aoa-baro", "--duration", "15", "--seed", "2", "--estimator", "eskf", "--out", "eskf"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = parsnav(
        &["compare", "fgo/report.json", "eskf/report.json", "--out", "table.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("FGO+GM") && text.contains("ESKF+NT"), "{text}");
    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "{csv}");
}

#[test]
fn compare_rejects_mismatched_schedules() {
    let dir = tempfile::tempdir().unwrap();
    for (d, out) in [("12", "short"), ("18", "long")] {
        let o = parsnav(&["run", "--estimator", "eskf", "--duration", d, "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = parsnav(&["compare", "short/report.json", "long/report.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schedule"), "{}", stderr(&o));
}

#[test]
fn generate_writes_a_reloadable_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = parsnav(&["generate", "--preset", "aoa-range", "--duration", "12", "--out", "scen"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["scenario.toml", "truth.csv", "events.csv"] {
        assert!(dir.path().join("scen").join(f).is_file(), "missing {f}");
    }
    fs::write(
        dir.path().join("from_file.toml"),
        "output = \"ff\"\n[scenario]\nfile = \"scen/scenario.toml\"\n[estimator]\nkind = \"eskf\"\n",
    )
    .unwrap();
    let o = parsnav(&["run", "--config", "from_file.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("ff/report.json").is_file());
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[scenario]\npreset = \"aoa-range\"\n[estimator]\nkind = \"fgo\"\nkernel = \"nt\"\n", "estimator.kernel"),
        ("[scenario]\npreset = \"nowhere\"\n[estimator]\nkind = \"eskf\"\n", "unknown preset"),
        ("[scenario]\npreset = \"aoa-range\"\n[estimator]\nkind = \"eskf\"\nlag = 2.0\n", "estimator.lag"),
        ("[scenario]\npreset = \"aoa-range\"\ncolour = 1\n[estimator]\nkind = \"eskf\"\n", "colour"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let name = format!("bad{i}.toml");
        fs::write(dir.path().join(&name), text).unwrap();
        let o = parsnav(&["run", "--config", &name], dir.path());
        assert_eq!(o.status.code(), Some(2), "case {i}");
        assert!(stderr(&o).contains(needle), "case {i}: {}", stderr(&o));
    }
    let o = parsnav(&["run", "--outlier-probability", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("outlier_probability"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = parsnav(&["selftest"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"), "{}", stdout(&o));
}
