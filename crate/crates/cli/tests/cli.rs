//! End-to-end checks of the command-line surface: exit codes, report
//! determinism, schema diagnostics, scenario generation determinism, and
//! counterexample files that validate and replay.

use std::path::Path;
use std::process::Command;

use mboxverify::scenario::ScenarioParams;
use mboxverify::{verify, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mboxverify"))
}

fn gen_into(scenario: &str, params: &ScenarioParams, dir: &Path) {
    mboxverify::write_scenario(scenario, params, dir).unwrap();
}

#[test]
fn verify_exit_codes() {
    let ok = tempfile::tempdir().unwrap();
    gen_into("enterprise", &ScenarioParams::default(), ok.path());
    let status = bin()
        .args([
            "verify",
            "--network",
            ok.path().join("network.json").to_str().unwrap(),
            "--invariants",
            ok.path().join("invariants.json").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0), "correct enterprise config holds");

    let bad = tempfile::tempdir().unwrap();
    gen_into(
        "enterprise",
        &ScenarioParams { delete_rules: 3, ..Default::default() },
        bad.path(),
    );
    let status = bin()
        .args([
            "verify",
            "--network",
            bad.path().join("network.json").to_str().unwrap(),
            "--invariants",
            bad.path().join("invariants.json").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1), "deleted rules violate");

    // An SMT engine without any solver available is an input error.
    let status = bin()
        .args([
            "verify",
            "--network",
            ok.path().join("network.json").to_str().unwrap(),
            "--invariants",
            ok.path().join("invariants.json").to_str().unwrap(),
            "--engine",
            "smt-bounded",
            "--solver-cmd",
            "",
        ])
        .env_remove("MBOXVERIFY_SOLVER")
        .env("PATH", "/nonexistent")
        .status()
        .unwrap();
    assert!(status.code().unwrap_or(0) >= 3, "missing solver is an error: {status:?}");

    // Schema violations carry pointer-style paths and exit >= 3.
    let broken = tempfile::tempdir().unwrap();
    std::fs::write(
        broken.path().join("network.json"),
        r#"{"universe":{"addresses":["a"],"ports":["p"]},"hosts":[{"id":"H","address":"nope"}]}"#,
    )
    .unwrap();
    std::fs::write(broken.path().join("invariants.json"), "[]").unwrap();
    let out = bin()
        .args([
            "verify",
            "--network",
            broken.path().join("network.json").to_str().unwrap(),
            "--invariants",
            broken.path().join("invariants.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.code().unwrap_or(0) >= 3);
}



/// Strips `wall_ms` fields recursively; everything else must be identical
/// across runs.
fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("wall_ms");
            for (_, val) in map.iter_mut() {
                strip_timing(val);
            }
        }
        serde_json::Value::Array(items) => {
            for i in items {
                strip_timing(i);
            }
        }
        _ => {}
    }
}

#[test]
fn report_is_deterministic_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    gen_into(
        "enterprise",
        &ScenarioParams { subnets: 6, delete_rules: 1, seed: 3, ..Default::default() },
        dir.path(),
    );
    let cfg = RunConfig::default();
    let run = || {
        let (report, net) =
            verify(&dir.path().join("network.json"), &dir.path().join("invariants.json"), &cfg)
                .unwrap();
        report.to_json(&net)
    };
    let mut a = run();
    let mut b = run();
    strip_timing(&mut a);
    strip_timing(&mut b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap(),
        "reports must be byte-identical after stripping timing"
    );
}

#[test]
fn generation_is_deterministic_per_seed() {
    let p = ScenarioParams { subnets: 5, delete_rules: 2, seed: 11, ..Default::default() };
    let a = mboxverify::scenario::gen_scenario("enterprise", &p).unwrap();
    let b = mboxverify::scenario::gen_scenario("enterprise", &p).unwrap();
    for ((fa, ca), (fb, cb)) in a.files.iter().zip(b.files.iter()) {
        assert_eq!(fa, fb);
        assert_eq!(ca, cb, "file {fa} differs between runs");
    }
    let p2 = ScenarioParams { seed: 12, ..p };
    let c = mboxverify::scenario::gen_scenario("enterprise", &p2).unwrap();
    assert_ne!(
        a.files[0].1, c.files[0].1,
        "different seeds should delete different rules"
    );
}

#[test]
fn counterexample_files_validate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    gen_into(
        "enterprise",
        &ScenarioParams { subnets: 3, delete_rules: 1, seed: 7, ..Default::default() },
        dir.path(),
    );
    let out = dir.path().join("results");
    let cfg = RunConfig { out_dir: Some(out.clone()), ..Default::default() };
    let (report, _net) =
        verify(&dir.path().join("network.json"), &dir.path().join("invariants.json"), &cfg)
            .unwrap();
    assert_eq!(report.exit_code(), 1);

    // Load the trace back and check it against the network and invariant.
    let loaded = mboxverify::schema::load_network(&dir.path().join("network.json")).unwrap();
    let invariants =
        mboxverify::schema::load_invariants(&dir.path().join("invariants.json"), &loaded.net)
            .unwrap();
    let mut checked = 0;
    for entry in std::fs::read_dir(out.join("counterexamples")).unwrap() {
        let path = entry.unwrap().path();
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let trace = mboxverify_core::trace::Trace::from_json(&raw, &loaded.net).unwrap();
        assert!(mboxverify_core::trace::validate_trace(&trace, &loaded.net).is_empty());
        let name = path.file_name().unwrap().to_str().unwrap().replace(".trace.json", "");
        let inv = invariants.iter().find(|i| i.name == name).expect("invariant for trace");
        assert!(mboxverify_core::bmc::replay(&loaded.net, &trace, inv).unwrap());
        checked += 1;
    }
    assert!(checked >= 1);
}

#[test]
fn gen_rejects_invalid_params() {
    let err = match mboxverify::scenario::gen_scenario(
        "multi_tenant",
        &ScenarioParams { tenants: 1, ..Default::default() },
    ) {
        Err(e) => e,
        Ok(_) => panic!("one tenant must be rejected"),
    };
    assert!(err.to_string().contains("tenants"));
    assert!(mboxverify::scenario::gen_scenario("bogus", &ScenarioParams::default()).is_err());
}

#[test]
fn classify_subcommand_reports_builtin() {
    let out = bin().args(["classify", "--model", "content_cache"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("origin-agnostic"), "{stdout}");
}

#[test]
fn encode_subcommand_writes_script() {
    let dir = tempfile::tempdir().unwrap();
    gen_into("redundant", &ScenarioParams::default(), dir.path());
    let out_file = dir.path().join("enc.smt2");
    let out = bin()
        .args([
            "encode",
            "--network",
            dir.path().join("network.json").to_str().unwrap(),
            "--invariants",
            dir.path().join("invariants.json").to_str().unwrap(),
            "--mode",
            "bounded",
            "--depth",
            "4",
            "--out",
            out_file.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let script = std::fs::read_to_string(&out_file).unwrap();
    assert!(script.contains("(set-logic QF_UFLIA)"));
    assert!(script.contains("(assert"));
}

/// Report completeness: every declared invariant appears in exactly one
/// group; member counts sum to the invariant count.
#[test]
fn report_covers_every_invariant_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    gen_into(
        "multi_tenant",
        &ScenarioParams { tenants: 3, ..Default::default() },
        dir.path(),
    );
    let (report, _net) = verify(
        &dir.path().join("network.json"),
        &dir.path().join("invariants.json"),
        &RunConfig { jobs: 4, ..Default::default() },
    )
    .unwrap();
    let total: usize = report.groups.iter().map(|g| g.group.members.len()).sum();
    assert_eq!(total, report.invariant_count);
    let mut seen = std::collections::BTreeSet::new();
    for g in &report.groups {
        for m in &g.group.members {
            assert!(seen.insert(m.name.clone()), "{} appears twice", m.name);
        }
    }
}

/// A general middlebox disables slicing with a full-network fallback.
#[test]
fn general_middlebox_falls_back_to_full_network() {
    let dir = tempfile::tempdir().unwrap();
    gen_into("isp_ids", &ScenarioParams::default(), dir.path());
    // Override the class hint to general.
    let mut net_json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("network.json")).unwrap(),
    )
    .unwrap();
    for m in net_json["middleboxes"].as_array_mut().unwrap() {
        m["class_hint"] = serde_json::json!("general");
    }
    std::fs::write(
        dir.path().join("network.json"),
        serde_json::to_string_pretty(&net_json).unwrap(),
    )
    .unwrap();
    let (report, _net) = verify(
        &dir.path().join("network.json"),
        &dir.path().join("invariants.json"),
        &RunConfig::default(),
    )
    .unwrap();
    assert!(report.groups.iter().all(|g| g.slice.is_none()));
    assert!(report
        .groups
        .iter()
        .all(|g| g.slice_fallback.as_deref().unwrap_or("").contains("full network")));
    // Verdicts are still produced.
    assert_eq!(report.exit_code(), 0);
}

/// The combined engine agrees with itself when a solver is present.
#[test]
fn engine_both_produces_verdicts() {
    let solver = std::process::Command::new("sh")
        .arg("-c")
        .arg("command -v z3")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    if !solver {
        eprintln!("SKIP: no solver for engine=both");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    gen_into("redundant", &ScenarioParams { break_backup: true, ..Default::default() }, dir.path());
    let cfg = RunConfig {
        engine: mboxverify::EngineKind::Both,
        solver_cmd: Some("z3 -in".into()),
        depth: 6,
        max_failures: Some(1),
        solver_timeout_s: 120,
        ..Default::default()
    };
    let (report, _net) =
        verify(&dir.path().join("network.json"), &dir.path().join("invariants.json"), &cfg)
            .unwrap();
    assert_eq!(report.exit_code(), 1, "both engines agree on the violation");
}
