//! The checked-in schemas under `schemas/` must match the types. Run with
//! `UPDATE_SCHEMAS=1` to regenerate them.

use std::path::PathBuf;

use moelab::api;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

#[test]
fn schemas_are_current() {
    let update = std::env::var_os("UPDATE_SCHEMAS").is_some();
    let mut stale = vec![];
    for (name, schema) in api::schemas() {
        let path = dir().join(format!("{name}.v1.json"));
        let text = serde_json::to_string_pretty(&schema).unwrap() + "\n";
        if update {
            std::fs::write(&path, &text).unwrap();
        } else if std::fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            stale.push(name);
        }
    }
    assert!(
        stale.is_empty(),
        "stale schemas (rerun with UPDATE_SCHEMAS=1): {stale:?}"
    );
}

#[test]
fn fixtures_carry_every_required_job_field() {
    let schema = api::schemas()
        .into_iter()
        .find(|(n, _)| *n == "training-job-spec")
        .unwrap()
        .1;
    let required: Vec<&str> = schema["required"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for f in api::FIXTURES {
        let job: serde_json::Value = serde_json::from_str(f.json).unwrap();
        for key in &required {
            assert!(job.get(key).is_some(), "{} lacks {key}", f.name);
        }
    }
}
