//! In-memory corpus loaded from a manifest: one sample per (subject, contrast)
//! holding its native-geometry graph and, when present, its common-geometry
//! projection.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Standardizer, META_GEOMETRY};
use crate::io::{read_graph, read_manifest, Split};

#[derive(Clone, Debug)]
pub struct Sample {
    pub subject: String,
    pub contrast: String,
    pub split: Split,
    pub native: Graph,
    pub common: Option<Graph>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub template: Option<Graph>,
}

impl Dataset {
    /// Reads every graph listed in the manifest and z-scores features with
    /// the manifest's statistics when it carries them.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        manifest.check_splits()?;
        let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let prep = |g: Graph| -> Result<Graph> {
            match &manifest.standardizer {
                Some(s) => s.apply(&g),
                None => Ok(g),
            }
        };
        let template = match &manifest.template_path {
            Some(p) => Some(prep(read_graph(&root.join(p))?)?),
            None => None,
        };
        let mut grouped: BTreeMap<(String, String), Sample> = BTreeMap::new();
        for e in &manifest.entries {
            let g = prep(read_graph(&root.join(&e.path))?)?;
            let key = (e.subject_id.clone(), e.contrast_id.clone());
            let common = g.meta.get(META_GEOMETRY).is_some_and(|v| v == "common");
            let slot = grouped.entry(key).or_insert_with(|| Sample {
                subject: e.subject_id.clone(),
                contrast: e.contrast_id.clone(),
                split: e.split,
                native: Graph::new(Default::default(), Default::default()),
                common: None,
            });
            if common {
                slot.common = Some(g);
            } else {
                slot.native = g;
            }
        }
        let mut samples = Vec::with_capacity(grouped.len());
        for ((subject, contrast), s) in grouped {
            if s.native.n() == 0 {
                return Err(Error::InvalidConfig(format!("{subject}/{contrast} has no native-geometry graph")));
            }
            samples.push(s);
        }
        Ok(Self { samples, template })
    }

    pub fn from_samples(samples: Vec<Sample>, template: Option<Graph>) -> Self {
        Self { samples, template }
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct contrast ids.
    pub fn contrasts(&self) -> Vec<String> {
        let mut v: Vec<String> = self.samples.iter().map(|s| s.contrast.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let mut v: Vec<String> = self.samples.iter().map(|s| s.subject.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map(|s| s.native.d()).unwrap_or(0)
    }

    /// Template graph, or the common geometry of the first sample that has one.
    pub fn common_geometry(&self) -> Result<Graph> {
        if let Some(t) = &self.template {
            return Ok(t.clone());
        }
        self.samples
            .iter()
            .find_map(|s| s.common.clone())
            .ok_or_else(|| Error::InvalidConfig("dataset has neither a template nor common-geometry graphs".into()))
    }
}

/// Fits z-scoring statistics on the native graphs of one split.
pub fn fit_standardizer(samples: &[&Sample]) -> Result<Standardizer> {
    Standardizer::fit(samples.iter().map(|s| &s.native))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, SynthConfig};

    #[test]
    fn loads_generated_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_template: 30, n_subjects: 5, ..SynthConfig::default() };
        gen_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(ds.len(), 15);
        assert_eq!(ds.contrasts(), vec!["c0", "c1", "c2"]);
        assert_eq!(ds.subjects().len(), 5);
        assert!(ds.samples.iter().all(|s| s.common.as_ref().is_some_and(|c| c.n() == 30)));
        let t = ds.common_geometry().unwrap();
        assert_eq!(t.n(), 30);

        // train-split natives are z-scored: pooled mean 0, std 1 per channel
        let train = ds.split(Split::Train);
        let s = fit_standardizer(&train).unwrap();
        for (m, sd) in s.mean.iter().zip(&s.std) {
            assert!(m.abs() < 1e-10, "{m}");
            assert!((sd - 1.0).abs() < 1e-10, "{sd}");
        }
    }

    #[test]
    fn missing_manifest() {
        let err = Dataset::load(Path::new("/nonexistent/manifest.txt")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
