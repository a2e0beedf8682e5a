//! End-to-end smoke test of the CLI: simulate -> sample -> fit -> baseline ->
//! gof -> report on a 20-sender x 10-receiver synthetic world, driven by one
//! config file, plus determinism and error-path checks.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_srem")
}

fn run_ok(args: &[&str], dir: &Path) -> String {
    let out = Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Write the synthetic world: strata, receivers, native range, distance,
/// attribute, group, and dyadic tables.
fn write_fixture(dir: &Path) {
    let n_senders = 20;
    let n_receivers = 10;
    let mut strata = String::from("sender,stratum\n");
    for i in 0..n_senders {
        let g = if i < 8 { "ins" } else { "plt" };
        strata.push_str(&format!("s{i:02},{g}\n"));
    }
    std::fs::write(dir.join("strata.csv"), strata).unwrap();

    let mut receivers = String::from("receiver\n");
    for j in 0..n_receivers {
        receivers.push_str(&format!("r{j:02}\n"));
    }
    std::fs::write(dir.join("receivers.csv"), receivers).unwrap();

    // every sender starts out in one region so distance covariates are defined
    let mut native = String::from("sender,receiver\n");
    for i in 0..n_senders {
        native.push_str(&format!("s{i:02},r{:02}\n", i % n_receivers));
    }
    // one unknown row: must be dropped, not fatal
    native.push_str("ghost_species,r00\n");
    std::fs::write(dir.join("native.csv"), native).unwrap();

    let mut dist = String::from("region_a,region_b,value\n");
    for a in 0..n_receivers {
        for b in (a + 1)..n_receivers {
            let d = ((a as f64 - b as f64).abs() * 0.35) + 0.08;
            dist.push_str(&format!("r{a:02},r{b:02},{d}\n"));
        }
    }
    std::fs::write(dir.join("distance.csv"), dist).unwrap();

    let mut temp = String::from("region,year,value\n");
    for j in 0..n_receivers {
        temp.push_str(&format!("r{j:02},1900,{}\n", 5.0 + 2.0 * j as f64));
    }
    std::fs::write(dir.join("temperature.csv"), temp).unwrap();

    let mut groups = String::from("region,group\n");
    for j in 0..n_receivers {
        let g = match j % 3 {
            0 => "empireA",
            1 => "empireB",
            _ => "independent",
        };
        groups.push_str(&format!("r{j:02},{g}\n"));
    }
    std::fs::write(dir.join("groups.csv"), groups).unwrap();

    let mut flows = String::from("sender,receiver,year,value\n");
    for i in 0..n_senders {
        for j in 0..n_receivers {
            let v = ((i * 7 + j * 13) % 23) as f64 / 23.0 - 0.5;
            flows.push_str(&format!("s{i:02},r{j:02},1900,{v}\n"));
        }
    }
    std::fs::write(dir.join("flows.csv"), flows).unwrap();
}

fn write_config(dir: &Path) -> PathBuf {
    let config = r#"
seed = 424242
out = "out"

[paths]
strata = "strata.csv"
receivers = "receivers.csv"
native_range = "native.csv"
events = "out/replications/rep_000.events.csv"

[[tables]]
name = "dist"
kind = "distance"
path = "distance.csv"

[[tables]]
name = "temp"
kind = "receiver_attribute"
path = "temperature.csv"

[[tables]]
name = "colonial"
kind = "group"
path = "groups.csv"

[[tables]]
name = "flows"
kind = "dyadic"
path = "flows.csv"

[[covariates]]
name = "distance"
kind = "min_over_invaded"
table = "dist"
transform = "log1p"

[[covariates]]
name = "temp_diff"
kind = "min_abs_diff_over_invaded"
table = "temp"

[[covariates]]
name = "colonial_ties"
kind = "group_indicator"
table = "colonial"

[[covariates]]
name = "flow"
kind = "static_dyadic"
table = "flows"

[[covariates]]
name = "co_invasion"
kind = "last_arrival"
relabel_rare = true

[model]
m = 2
matched = true
criterion = "reml"

[[model.terms]]
name = "temp_effect"
kind = "linear"
covariate = "temp_diff"

[[model.terms]]
name = "flow_effect"
kind = "linear"
covariate = "flow"

[[model.terms]]
name = "distance_effect"
kind = "time_varying"
covariate = "distance"
k = 5

[[model.terms]]
name = "invasiveness"
kind = "random_effect"
factor = "sender"
heteroscedastic_by_stratum = true

[[model.terms]]
name = "co_invasion_effect"
kind = "random_effect"
factor = "co_invasion"

[simulation]
n_reps = 2
window = [1920, 1980]

[simulation.truth]
linear = [["temp_diff", -0.05], ["flow", 0.4]]
time_varying = [["distance", [[1920, -0.3], [1980, -0.8]]]]

[simulation.truth.baseline]
ins = [[1920, 0.02], [1980, 0.05]]
plt = [[1920, 0.015], [1980, 0.03]]

[[simulation.truth.random_effects]]
factor = "sender"
sd_by_stratum = { ins = 0.6, plt = 0.3 }

[report]
grid_points = 25
candidates = [
  ["temp_effect", "flow_effect", "distance_effect", "invasiveness"],
  ["temp_effect", "flow_effect", "distance_effect"],
  ["temp_effect", "distance_effect"],
  ["temp_effect", "flow_effect"],
]
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    write_config(dir);

    run_ok(&["simulate", "--config", "run.toml"], dir);
    let rep0 = dir.join("out/replications/rep_000.events.csv");
    assert!(rep0.exists());
    let events = std::fs::read_to_string(&rep0).unwrap();
    assert!(events.lines().count() > 30, "simulation produced too few events");
    assert!(dir.join("out/simulate_summary.json").exists());
    assert!(dir.join("out/simulate.manifest.json").exists());

    run_ok(&["sample", "--config", "run.toml"], dir);
    assert!(dir.join("out/dataset.csv").exists());
    assert!(dir.join("out/dataset.csv.meta.json").exists());
    // unknown native row was dropped and recorded, not fatal
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/sample.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["load_report"]["native_unknown_dropped"], 1);

    run_ok(&["fit", "--config", "run.toml"], dir);
    assert!(dir.join("out/fit.json").exists());
    assert!(dir.join("out/curve_distance_effect.csv").exists());

    run_ok(&["baseline", "--config", "run.toml"], dir);
    let baseline = std::fs::read_to_string(dir.join("out/baseline.csv")).unwrap();
    assert!(baseline.lines().any(|l| l.contains("matched")));
    assert!(baseline.lines().any(|l| l.contains("pooled")));
    assert!(baseline.lines().any(|l| l.starts_with("ins,")));
    assert!(baseline.lines().any(|l| l.starts_with("plt,")));

    run_ok(&["gof", "--config", "run.toml"], dir);
    let gof = std::fs::read_to_string(dir.join("out/gof.csv")).unwrap();
    assert!(gof.lines().count() > 5);
    assert!(dir.join("out/gof_summary.json").exists());

    run_ok(&["report", "--config", "run.toml"], dir);
    let table = std::fs::read_to_string(dir.join("out/report_aic.csv")).unwrap();
    // header + exactly 4 candidate rows, exactly one marked best
    assert_eq!(table.lines().count(), 5);
    let best_rows = table.lines().filter(|l| l.ends_with(",true")).count();
    assert_eq!(best_rows, 1);
    assert!(dir.join("out/report.json").exists());
}

#[test]
fn fit_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    write_config(dir);
    run_ok(&["simulate", "--config", "run.toml"], dir);
    run_ok(&["sample", "--config", "run.toml"], dir);
    run_ok(&["fit", "--config", "run.toml"], dir);
    let first = std::fs::read(dir.join("out/fit.json")).unwrap();
    run_ok(&["fit", "--config", "run.toml"], dir);
    let second = std::fs::read(dir.join("out/fit.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn sampling_is_reproducible_across_m_prefixes() {
    // the first control of each event is the same for m = 2 and m = 3
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    write_config(dir);
    run_ok(&["simulate", "--config", "run.toml"], dir);
    run_ok(&["sample", "--config", "run.toml"], dir);
    let m2 = std::fs::read_to_string(dir.join("out/dataset.csv")).unwrap();
    run_ok(&["sample", "--config", "run.toml", "--m", "3", "--out", "out3"], dir);
    let m3 = std::fs::read_to_string(dir.join("out3/dataset.csv")).unwrap();
    let controls = |text: &str, every: usize| -> Vec<String> {
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let ctrl_idx = header.iter().position(|h| *h == "ctrl_sender").unwrap();
        text.lines()
            .skip(1)
            .step_by(every)
            .map(|l| l.split(',').nth(ctrl_idx).unwrap().to_string())
            .collect()
    };
    assert_eq!(controls(&m2, 1), controls(&m3, 2));
}

#[test]
fn validation_errors_exit_nonzero_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    write_config(dir);
    // sample before simulate: events file missing
    let out = Command::new(bin())
        .args(["sample", "--config", "run.toml", "--json-errors"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.trim()).expect("stderr is one JSON object");
    assert!(parsed["error"].as_str().unwrap().contains("does not exist"));
}
