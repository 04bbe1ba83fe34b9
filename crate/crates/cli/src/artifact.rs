use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use casemix::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub const EFFECTS: &str = "effects.json";
pub const RECON: &str = "recon_cov.json";
pub const PSEUDO: &str = "pseudo.json";
pub const SIGMA: &str = "sigma.json";
pub const POSTERIOR: &str = "posterior.json";
pub const DRAWS: &str = "draws.csv";
pub const FOREST: &str = "forest.csv";

/// How an artifact was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub args: Vec<String>,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    pub kind: String,
    pub invocation: Invocation,
    pub payload: T,
}

pub fn write<T: Serialize>(dir: &Path, name: &str, invocation: &Invocation, payload: T) -> Result<()> {
    let art = Artifact {
        schema_version: SCHEMA_VERSION,
        kind: name.trim_end_matches(".json").to_string(),
        invocation: invocation.clone(),
        payload,
    };
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    serde_json::to_writer_pretty(&mut w, &art)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads an artifact written by an earlier step, naming the step to run
/// when the file is absent.
pub fn read<T: DeserializeOwned>(dir: &Path, name: &str, producer: &str) -> Result<Artifact<T>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Validation(format!(
            "missing artifact {}: run `casemix {producer}` first",
            path.display()
        )));
    }
    let raw: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    let version = raw.get("schema_version").and_then(serde_json::Value::as_u64);
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Validation(format!(
            "{}: schema version {} does not match {SCHEMA_VERSION}; rerun `casemix {producer}`",
            path.display(),
            version.map_or("absent".to_string(), |v| v.to_string())
        )));
    }
    serde_json::from_value(raw).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv() -> Invocation {
        Invocation { args: vec!["casemix".into()], seed: 3, version: "0".into() }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), SIGMA, &inv(), vec![1.0, 2.0]).unwrap();
        let a: Artifact<Vec<f64>> = read(dir.path(), SIGMA, "variance").unwrap();
        assert_eq!(a.payload, vec![1.0, 2.0]);
        assert_eq!(a.kind, "sigma");
        assert_eq!(a.invocation, inv());
    }

    #[test]
    fn missing_file_names_path_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let err = read::<Vec<f64>>(dir.path(), SIGMA, "variance").unwrap_err().to_string();
        assert!(err.contains("sigma.json") && err.contains("casemix variance"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(SIGMA),
            r#"{"schema_version": 0, "kind": "sigma", "invocation": {"args": [], "seed": 0, "version": ""}, "payload": []}"#,
        )
        .unwrap();
        let err = read::<Vec<f64>>(dir.path(), SIGMA, "variance").unwrap_err().to_string();
        assert!(err.contains("schema version 0"), "{err}");
    }
}
