//! End-to-end runs of the `rpm` binary against a pre-recorded replay
//! store, exercising every subcommand offline.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use rpm_pipeline::gateway::{GatewayMode, LlmGateway};
use rpm_pipeline::harness::run_experiment;

mod common;
use common::{survey_config, survey_transport, write_survey_dataset};

fn rpm_command() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rpm"))
}

fn run_ok(command: &mut Command) -> String {
    let output = command.output().expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout).to_string();
    let stderr = String::from_utf8_lossy(&output.stderr).to_string();
    assert!(
        output.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

/// Records the scripted survey run, then drives every CLI subcommand in
/// replay mode with no live backend available.
#[tokio::test]
async fn cli_subcommands_run_offline_against_the_replay_store() {
    let store = tempfile::TempDir::new().unwrap();
    let work = tempfile::TempDir::new().unwrap();
    let dataset_path = work.path().join("survey.json");
    write_survey_dataset(&dataset_path);

    // Seed the store by recording a scripted full run.
    let record_artifacts = work.path().join("record-artifacts");
    let record_config = survey_config(
        &dataset_path,
        &record_artifacts,
        store.path(),
        GatewayMode::Record,
    );
    let gateway =
        LlmGateway::with_transport(record_config.backend.clone(), Arc::new(survey_transport()));
    run_experiment(&record_config, &gateway, true)
        .await
        .unwrap();

    // CLI config: replay mode, fresh artifact dir.
    let cli_artifacts = work.path().join("cli-artifacts");
    let cli_config = survey_config(
        &dataset_path,
        &cli_artifacts,
        store.path(),
        GatewayMode::Replay,
    );
    let config_path = work.path().join("run.toml");
    std::fs::write(&config_path, toml::to_string(&cli_config).unwrap()).unwrap();

    // build-factors for a single user
    let stdout = run_ok(
        rpm_command()
            .arg("build-factors")
            .arg("--config")
            .arg(&config_path)
            .arg("--user")
            .arg("GroupA"),
    );
    assert!(stdout.contains("built GroupA"), "{stdout}");
    assert!(cli_artifacts.join("factors/GroupA.json").exists());

    // build-memory for every user
    let stdout = run_ok(
        rpm_command()
            .arg("build-memory")
            .arg("--config")
            .arg(&config_path),
    );
    assert!(stdout.contains("memory examples"), "{stdout}");
    for user in ["GroupA", "GroupB", "GroupC"] {
        assert!(cli_artifacts.join(format!("memory/{user}.jsonl")).exists());
    }

    // infer on one held-out query (its responses are in the store)
    let task = rpm_pipeline::dataset::builtin_task("goqa").unwrap();
    let split =
        rpm_pipeline::dataset::load_dataset(&task, Path::new(&dataset_path), &cli_config.dataset)
            .unwrap();
    let target = &split.users[0].test[0];
    let query_path = work.path().join("query.txt");
    std::fs::write(&query_path, &target.query).unwrap();
    let record_path = work.path().join("prediction.json");
    run_ok(
        rpm_command()
            .arg("infer")
            .arg("--config")
            .arg(&config_path)
            .arg("--user")
            .arg("GroupA")
            .arg("--query-file")
            .arg(&query_path)
            .arg("--retriever")
            .arg("feature_cosine")
            .arg("--k")
            .arg("3")
            .arg("--out")
            .arg(&record_path),
    );
    let record: rpm_core::domain::PredictionRecord =
        serde_json::from_str(&std::fs::read_to_string(&record_path).unwrap()).unwrap();
    assert_eq!(record.answer, "A");
    assert_eq!(record.retrieved.len(), 3);
    assert!(!record.ledger.is_empty());

    // eval writes a report
    let report_path = work.path().join("report.json");
    let stdout = run_ok(
        rpm_command()
            .arg("eval")
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(&report_path),
    );
    assert!(stdout.contains("accuracy"), "{stdout}");
    let report: rpm_pipeline::harness::MetricReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.total_items, 12);
    assert!(report.metrics.contains_key("accuracy"));

    // report pretty-prints the saved file
    let stdout = run_ok(
        rpm_command()
            .arg("report")
            .arg("--report")
            .arg(&report_path),
    );
    assert!(stdout.contains("cost split"), "{stdout}");
    assert!(stdout.contains("GroupB"), "{stdout}");
}
