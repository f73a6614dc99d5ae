//! Text containers for graphs and dataset manifests.
//!
//! Graph file layout:
//!
//! ```text
//! OTGDL-GRAPH
//! version 1
//! n <int> d <int>
//! <n lines of d floats>      features, row-major
//! <n lines of n floats>      structure, row-major
//! meta <key> <value>         zero or more
//! ```
//!
//! Floats are written with 17 significant digits so reading back is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{validate_graph, Graph, Standardizer};

pub const GRAPH_MAGIC: &str = "OTGDL-GRAPH";
pub const GRAPH_VERSION: u32 = 1;

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn graph_to_string(g: &Graph) -> String {
    let (n, d) = (g.n(), g.d());
    let mut s = String::with_capacity(24 * n * (n + d) + 64);
    let _ = writeln!(s, "{GRAPH_MAGIC}");
    let _ = writeln!(s, "version {GRAPH_VERSION}");
    let _ = writeln!(s, "n {n} d {d}");
    for m in [&g.features, &g.structure] {
        for row in m.rows() {
            let line: Vec<String> = row.iter().map(|&x| format_f64(x)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    for (k, v) in &g.meta {
        let _ = writeln!(s, "meta {k} {v}");
    }
    s
}

pub fn write_graph(g: &Graph, path: &Path) -> Result<()> {
    validate_graph(g)?;
    write_atomic(path, graph_to_string(g).as_bytes())
}

pub fn read_graph(path: &Path) -> Result<Graph> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_graph(&text, &path.display().to_string())
}

pub fn parse_graph(text: &str, source_name: &str) -> Result<Graph> {
    let perr = |line: usize, msg: String| Error::Parse { source_name: source_name.to_string(), line, msg };
    let lines: Vec<&str> = text.lines().collect();
    let get = |i: usize| -> Result<&str> {
        lines.get(i).copied().ok_or_else(|| perr(i + 1, "unexpected end of file".into()))
    };

    if get(0)?.trim() != GRAPH_MAGIC {
        return Err(perr(1, format!("expected magic `{GRAPH_MAGIC}`")));
    }
    let version_line = get(1)?;
    let version = match version_line.split_whitespace().collect::<Vec<_>>()[..] {
        ["version", v] => v.parse::<u32>().map_err(|e| perr(2, format!("bad version: {e}")))?,
        _ => return Err(perr(2, "expected `version <int>`".into())),
    };
    if version != GRAPH_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: GRAPH_VERSION });
    }
    let (n, d) = match get(2)?.split_whitespace().collect::<Vec<_>>()[..] {
        ["n", n, "d", d] => (
            n.parse::<usize>().map_err(|e| perr(3, format!("bad n: {e}")))?,
            d.parse::<usize>().map_err(|e| perr(3, format!("bad d: {e}")))?,
        ),
        _ => return Err(perr(3, "expected `n <int> d <int>`".into())),
    };
    if n == 0 || d == 0 {
        return Err(perr(3, "n and d must be positive".into()));
    }

    let read_rows = |start: usize, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut m = Array2::zeros((rows, cols));
        for r in 0..rows {
            let ln = start + r;
            let line = get(ln)?;
            let mut count = 0;
            for (c, tok) in line.split_whitespace().enumerate() {
                if c >= cols {
                    return Err(perr(ln + 1, format!("expected {cols} values, found more")));
                }
                m[[r, c]] = tok.parse::<f64>().map_err(|e| perr(ln + 1, format!("bad float `{tok}`: {e}")))?;
                count += 1;
            }
            if count != cols {
                return Err(perr(ln + 1, format!("expected {cols} values, found {count}")));
            }
        }
        Ok(m)
    };
    let features = read_rows(3, n, d)?;
    let structure = read_rows(3 + n, n, n)?;

    let mut g = Graph::new(features, structure);
    for (i, line) in lines.iter().enumerate().skip(3 + 2 * n) {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("meta ")
            .ok_or_else(|| perr(i + 1, "expected `meta <key> <value>`".into()))?;
        let (k, v) = rest.split_once(' ').ok_or_else(|| perr(i + 1, "meta line needs a key and a value".into()))?;
        g.meta.insert(k.to_string(), v.to_string());
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    pub contrast_id: String,
    pub split: Split,
}

/// Dataset index. Paths are stored relative to the manifest's directory.
///
/// Besides entry lines `path subject contrast split`, two optional directives
/// are understood: `template <path>` and `stat <dim> <mean> <std>` (train-split
/// feature statistics used for z-scoring at load time).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub template_path: Option<PathBuf>,
    pub standardizer: Option<Standardizer>,
}

impl DatasetManifest {
    /// Subjects may not appear in more than one split.
    pub fn check_splits(&self) -> Result<()> {
        let mut seen: std::collections::HashMap<&str, Split> = Default::default();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.subject_id, e.split) {
                if prev != e.split {
                    return Err(Error::InvalidConfig(format!(
                        "subject {} appears in both {} and {}",
                        e.subject_id,
                        prev.as_str(),
                        e.split.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut s = String::new();
    if let Some(t) = &m.template_path {
        let _ = writeln!(s, "template {}", t.display());
    }
    if let Some(st) = &m.standardizer {
        for (i, (mu, sd)) in st.mean.iter().zip(&st.std).enumerate() {
            let _ = writeln!(s, "stat {i} {} {}", format_f64(*mu), format_f64(*sd));
        }
    }
    for e in &m.entries {
        let _ = writeln!(s, "{} {} {} {}", e.path.display(), e.subject_id, e.contrast_id, e.split.as_str());
    }
    s
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.check_splits()?;
    write_atomic(path, manifest_to_string(m).as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse { source_name: name.clone(), line, msg };
    let mut m = DatasetManifest::default();
    let mut stats: Vec<(usize, f64, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[..] {
            [] => {}
            [first, ..] if first.starts_with('#') => {}
            ["template", p] => m.template_path = Some(PathBuf::from(p)),
            ["stat", dim, mu, sd] => {
                let dim = dim.parse::<usize>().map_err(|e| perr(i + 1, format!("bad dim: {e}")))?;
                let mu = mu.parse::<f64>().map_err(|e| perr(i + 1, format!("bad mean: {e}")))?;
                let sd = sd.parse::<f64>().map_err(|e| perr(i + 1, format!("bad std: {e}")))?;
                stats.push((dim, mu, sd));
            }
            [p, subject, contrast, split] => {
                let split = Split::parse(split).ok_or_else(|| perr(i + 1, format!("unknown split `{split}`")))?;
                m.entries.push(ManifestEntry {
                    path: PathBuf::from(p),
                    subject_id: subject.to_string(),
                    contrast_id: contrast.to_string(),
                    split,
                });
            }
            _ => return Err(perr(i + 1, "expected `path subject_id contrast_id split`".into())),
        }
    }
    if !stats.is_empty() {
        stats.sort_by_key(|s| s.0);
        if stats.iter().enumerate().any(|(i, s)| s.0 != i) {
            return Err(perr(0, "stat lines must cover dims 0..d exactly once".into()));
        }
        m.standardizer = Some(Standardizer {
            mean: stats.iter().map(|s| s.1).collect(),
            std: stats.iter().map(|s| s.2).collect(),
        });
    }
    m.check_splits()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_graph() -> Graph {
        let mut g = Graph::new(
            array![[0.1, -2.5e-17], [1.0 / 3.0, f64::MIN_POSITIVE]],
            array![[0.0, std::f64::consts::PI], [std::f64::consts::PI, 0.0]],
        );
        g.set_meta("subject_id", "s01");
        g.set_meta("note", "two words");
        g
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.graph");
        let g = sample_graph();
        write_graph(&g, &p).unwrap();
        let h = read_graph(&p).unwrap();
        assert_eq!(g, h);
        for (a, b) in g.features.iter().zip(h.features.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = graph_to_string(&sample_graph());
        let cut: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_graph(&cut, "x"), Err(Error::Parse { line: 5, .. })));
        let half_row = &text[..text.find("\n3.").unwrap() + 3];
        assert!(matches!(parse_graph(half_row, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = graph_to_string(&sample_graph()).replace("version 1", "version 999");
        assert!(matches!(parse_graph(&text, "x"), Err(Error::VersionMismatch { found: 999, .. })));
    }

    #[test]
    fn write_refuses_invalid_graph() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = sample_graph();
        g.structure[[0, 1]] = 9.0;
        assert!(write_graph(&g, &dir.path().join("bad.graph")).is_err());
    }

    #[test]
    fn manifest_round_trip_and_split_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        let mut m = DatasetManifest {
            entries: vec![
                ManifestEntry { path: "a.graph".into(), subject_id: "s0".into(), contrast_id: "c0".into(), split: Split::Train },
                ManifestEntry { path: "b.graph".into(), subject_id: "s1".into(), contrast_id: "c0".into(), split: Split::Test },
            ],
            template_path: Some("template.graph".into()),
            standardizer: Some(Standardizer { mean: vec![0.5, -1.0], std: vec![2.0, 0.25] }),
        };
        write_manifest(&m, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
        m.entries[1].subject_id = "s0".into();
        assert!(m.check_splits().is_err());
    }
}
