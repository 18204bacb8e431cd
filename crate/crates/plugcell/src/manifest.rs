//! `plugins-to-run` manifest: UTF-8 NDJSON, one plugin entry per line,
//! `#`-prefixed lines ignored.

use std::collections::BTreeMap;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("line {line}: {cause}")]
    Parse { line: usize, cause: String },
    #[error("duplicate plugin name `{0}`")]
    DuplicateName(String),
}

/// Where a plugin's bytes come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PluginSource {
    /// `store:<id>` — an executable in the local plugin store.
    Store(String),
    /// `http://host:port/path` — fetched during the fetch window.
    Url(String),
}

impl PluginSource {
    pub fn parse(raw: &str) -> Result<Self, String> {
        if let Some(id) = raw.strip_prefix("store:") {
            if id.is_empty() {
                return Err("empty store id".into());
            }
            return Ok(PluginSource::Store(id.to_string()));
        }
        if raw.starts_with("http://") {
            return Ok(PluginSource::Url(raw.to_string()));
        }
        Err(format!("unsupported source `{raw}` (expected store:<id> or http://…)"))
    }

    pub fn as_str(&self) -> String {
        match self {
            PluginSource::Store(id) => format!("store:{id}"),
            PluginSource::Url(u) => u.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawEntry {
    name: String,
    source: String,
    #[serde(default)]
    args: BTreeMap<String, serde_json::Value>,
    freq_s: f64,
    /// Optional SHA-256 pin; fetched bytes must match.
    #[serde(default)]
    digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginEntry {
    pub name: String,
    pub source: PluginSource,
    pub args: BTreeMap<String, serde_json::Value>,
    pub freq_s: f64,
    pub pinned_digest: Option<String>,
}

impl PluginEntry {
    /// Per-plugin wall-clock timeout; `args.timeout_s` overrides the default.
    pub fn timeout_s(&self) -> f64 {
        self.args
            .get("timeout_s")
            .and_then(|v| v.as_f64())
            .filter(|t| *t > 0.0)
            .unwrap_or(10.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PluginManifest {
    pub entries: Vec<PluginEntry>,
}

/// Parse manifest bytes. An empty file is a valid, empty manifest.
pub fn parse_manifest(bytes: &[u8]) -> Result<PluginManifest, ManifestError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ManifestError::Parse {
        line: 0,
        cause: format!("not UTF-8: {e}"),
    })?;
    let mut entries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(trimmed).map_err(|e| ManifestError::Parse {
            line: lineno,
            cause: e.to_string(),
        })?;
        if raw.name.is_empty() {
            return Err(ManifestError::Parse {
                line: lineno,
                cause: "empty plugin name".into(),
            });
        }
        if !(raw.freq_s > 0.0) {
            return Err(ManifestError::Parse {
                line: lineno,
                cause: format!("freq_s must be positive, got {}", raw.freq_s),
            });
        }
        let source = PluginSource::parse(&raw.source).map_err(|cause| ManifestError::Parse {
            line: lineno,
            cause,
        })?;
        if !seen.insert(raw.name.clone()) {
            return Err(ManifestError::DuplicateName(raw.name));
        }
        entries.push(PluginEntry {
            name: raw.name,
            source,
            args: raw.args,
            freq_s: raw.freq_s,
            pinned_digest: raw.digest,
        });
    }
    Ok(PluginManifest { entries })
}

/// Render a manifest back to its NDJSON form.
pub fn render_manifest(m: &PluginManifest) -> String {
    let mut out = String::new();
    for e in &m.entries {
        let raw = RawEntry {
            name: e.name.clone(),
            source: e.source.as_str(),
            args: e.args.clone(),
            freq_s: e.freq_s,
            digest: e.pinned_digest.clone(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("manifest entries serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_single_entry() {
        let m = parse_manifest(br#"{"name":"procs","source":"store:procs","freq_s":5}"#).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].name, "procs");
        assert_eq!(m.entries[0].source, PluginSource::Store("procs".into()));
        assert_eq!(m.entries[0].freq_s, 5.0);
        assert_eq!(m.entries[0].timeout_s(), 10.0);
    }

    #[test]
    fn empty_file_is_an_empty_manifest() {
        assert!(parse_manifest(b"").unwrap().entries.is_empty());
        assert!(parse_manifest(b"\n# just a comment\n\n").unwrap().entries.is_empty());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let bytes = br#"{"name":"procs","source":"store:a","freq_s":1}
{"name":"procs","source":"store:b","freq_s":1}"#;
        assert!(matches!(
            parse_manifest(bytes),
            Err(ManifestError::DuplicateName(name)) if name == "procs"
        ));
    }

    #[test]
    fn bad_lines_carry_their_line_number() {
        let bytes = b"{\"name\":\"a\",\"source\":\"store:a\",\"freq_s\":1}\nnot json\n";
        match parse_manifest(bytes) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_manifest(br#"{"name":"a","source":"store:a","freq_s":0}"#) {
            Err(ManifestError::Parse { line, cause }) => {
                assert_eq!(line, 1);
                assert!(cause.contains("freq_s"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn timeout_override_comes_from_args() {
        let m = parse_manifest(
            br#"{"name":"slow","source":"store:slow","freq_s":1,"args":{"timeout_s":2.5}}"#,
        )
        .unwrap();
        assert_eq!(m.entries[0].timeout_s(), 2.5);
    }

    #[test]
    fn round_trips_through_render() {
        let bytes = br#"{"name":"procs","source":"store:procs","freq_s":5,"args":{"k":"v"}}
{"name":"web","source":"http://127.0.0.1:8099/p","freq_s":2,"digest":"abc123"}"#;
        let m = parse_manifest(bytes).unwrap();
        let rendered = render_manifest(&m);
        assert_eq!(parse_manifest(rendered.as_bytes()).unwrap(), m);
    }
}
