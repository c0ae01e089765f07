//! Path roots, run manifests and the small file formats shared by commands.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use impress_core::corpus::{load_corpus, CorpusFormat, Report};

#[derive(Debug, Clone, Default)]
pub struct Roots {
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

fn under(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

impl Roots {
    pub fn data(&self, p: &Path) -> PathBuf {
        under(&self.data, p)
    }

    /// `toy:` references are not paths and pass through untouched.
    pub fn checkpoint(&self, p: &Path) -> PathBuf {
        if p.to_str().is_some_and(|s| s.starts_with("toy:")) {
            return p.to_path_buf();
        }
        under(&self.checkpoints, p)
    }
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest<T> {
    pub command: String,
    pub version: String,
    pub created_at: String,
    pub seed: Option<u64>,
    pub args: T,
    pub outputs: Vec<String>,
}

pub fn write_manifest<T: Serialize>(path: &Path, command: &str, seed: Option<u64>, args: &T, outputs: &[&Path]) -> anyhow::Result<()> {
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
        seed,
        args,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(path, &m)
}

/// Manifest path for a single-file output: `<out>.manifest.json`.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn create(path: &Path) -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
    ensure_parent(path)?;
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn open(path: &Path) -> anyhow::Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(std::io::BufReader::new(f))
}

pub fn read_to_string(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Loads a corpus, warning about (and skipping) invalid records.
pub fn reports(path: &Path) -> anyhow::Result<Vec<Report>> {
    let loaded = load_corpus(path, CorpusFormat::from_path(path))?;
    for issue in &loaded.issues {
        tracing::warn!(%issue, "skipped record");
    }
    Ok(loaded.reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub report_id: String,
    pub impression: String,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub truncated: bool,
}

pub fn write_generated(path: &Path, records: &[GeneratedRecord]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Generated impressions keyed by report id; duplicate ids are an error.
pub fn read_generated(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GeneratedRecord = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if out.insert(r.report_id.clone(), r.impression).is_some() {
            bail!("{} line {}: duplicate report id {}", path.display(), i + 1, r.report_id);
        }
    }
    Ok(out)
}

/// One number per line; blank lines are skipped.
pub fn read_values(path: &Path) -> anyhow::Result<Vec<f64>> {
    read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .with_context(|| format!("{} line {}: not a number: {l:?}", path.display(), i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_only_prefix_relative_paths() {
        let roots = Roots {
            data: Some("/data".into()),
            checkpoints: Some("/ckpt".into()),
        };
        assert_eq!(roots.data(Path::new("a.jsonl")), PathBuf::from("/data/a.jsonl"));
        assert_eq!(roots.data(Path::new("/abs/a.jsonl")), PathBuf::from("/abs/a.jsonl"));
        assert_eq!(roots.checkpoint(Path::new("run1")), PathBuf::from("/ckpt/run1"));
        assert_eq!(roots.checkpoint(Path::new("toy:tiny")), PathBuf::from("toy:tiny"));
        assert_eq!(Roots::default().data(Path::new("x")), PathBuf::from("x"));
    }

    #[test]
    fn generated_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        let recs = vec![
            GeneratedRecord {
                report_id: "A".into(),
                impression: "x".into(),
                score: Some(-0.5),
                truncated: false,
            },
            GeneratedRecord {
                report_id: "A".into(),
                impression: "y".into(),
                score: None,
                truncated: true,
            },
        ];
        write_generated(&p, &recs[..1]).unwrap();
        assert_eq!(read_generated(&p).unwrap()["A"], "x");
        write_generated(&p, &recs).unwrap();
        assert!(read_generated(&p).is_err());
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/t.csv")), PathBuf::from("out/t.csv.manifest.json"));
    }
}
