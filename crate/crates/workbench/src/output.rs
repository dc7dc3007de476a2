//! Output collection and metadata headers.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::config::Job;
use crate::WorkbenchError;

/// Files, warnings and summary lines produced by one job.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub summary: Vec<String>,
}

impl Report {
    pub fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.warnings.contains(&msg) {
            self.warnings.push(msg);
        }
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, WorkbenchError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| WorkbenchError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// `#` comment block echoing the job so a CSV is self-describing.
pub fn csv_header(job: &Job, command: &str, mode: Option<&str>) -> String {
    let mut out = format!(
        "# generator = squeezeshape {}\n# command = {command}\n# seed = {}\n",
        env!("CARGO_PKG_VERSION"),
        job.config.detection.seed
    );
    if let Some(mode) = mode {
        out.push_str(&format!("# mode = {mode}\n"));
    }
    out.push_str("# config:\n");
    for line in job.config.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str(&format!("#   {line}\n"));
        }
    }
    out
}

/// JSON document with the same provenance fields as [`csv_header`].
pub fn json_document(job: &Job, command: &str, body: Map<String, Value>) -> String {
    let mut doc = Map::new();
    doc.insert(
        "generator".into(),
        Value::String(format!("squeezeshape {}", env!("CARGO_PKG_VERSION"))),
    );
    doc.insert("command".into(), Value::String(command.into()));
    doc.insert("seed".into(), Value::from(job.config.detection.seed));
    doc.insert("config".into(), Value::String(job.config.to_toml()));
    doc.extend(body);
    let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("json serializes");
    s.push('\n');
    s
}
