//! Binary container for trained models.
//!
//! Layout, all integers little-endian: the magic `OTGDLCKPT`, a `u32` format
//! version, then length-prefixed (`u32`) strings for the model kind and the
//! run config snapshot, a `u32` count of metadata string pairs, and a `u32`
//! count of arrays, each stored as a name, `u64` rows, `u64` cols and
//! `rows * cols` row-major `f64` values.

use std::path::Path;

use ndarray::Array2;

use crate::dictionary::{DictionaryModel, Variant};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::predictor::{PredictorConfig, PredictorParams, PARAMS_VERSION};

pub const MAGIC: &[u8; 9] = b"OTGDLCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const KIND_PREDICTOR: &str = "predictor";
pub const KIND_DICTIONARY: &str = "dictionary";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Array2<f64>)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let kind = r.string("kind")?;
        let config = r.string("config")?;
        let n_meta = r.u32("metadata count")?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.string("metadata key")?, r.string("metadata value")?));
        }
        let n_arrays = r.u32("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..n_arrays {
            let name = r.string("array name")?;
            let (rows, cols) = (r.u64("rows")? as usize, r.u64("cols")? as usize);
            let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
            let len = len.ok_or_else(|| Error::CorruptCheckpoint(format!("array {name} is too large")))?;
            let data = r.take(len, &name)?;
            let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
            arrays.push((name, Array2::from_shape_vec((rows, cols), values).expect("length checked")));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, config, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing metadata {key}")))
    }

    fn meta_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?.parse().map_err(|_| Error::CorruptCheckpoint(format!("metadata {key} is not a number")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CorruptCheckpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

pub fn predictor_checkpoint(p: &PredictorParams, config: &str) -> Checkpoint {
    let c = &p.config;
    let meta = [
        ("params_version", p.version.to_string()),
        ("n_embed_layers", c.n_embed_layers.to_string()),
        ("gcn_hidden", c.gcn_hidden.to_string()),
        ("node_out_dim", c.node_out_dim.to_string()),
        ("alpha_embed_dim", c.alpha_embed_dim.to_string()),
        ("mlp_hidden", c.mlp_hidden.to_string()),
        ("temperature", c.temperature.to_string()),
        ("head_balancing_steps", c.head_balancing_steps.to_string()),
        ("inference_balancing_steps", c.inference_balancing_steps.to_string()),
        ("affinity_bandwidth", c.affinity_bandwidth.to_string()),
        ("feature_dim", c.feature_dim.to_string()),
    ];
    Checkpoint {
        kind: KIND_PREDICTOR.into(),
        config: config.into(),
        meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        arrays: p.tensors.clone(),
    }
}

pub fn predictor_from_checkpoint(ck: &Checkpoint) -> Result<PredictorParams> {
    ck.expect_kind(KIND_PREDICTOR)?;
    let version: u32 = ck.meta_num("params_version")?;
    if version != PARAMS_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: PARAMS_VERSION });
    }
    let config = PredictorConfig {
        n_embed_layers: ck.meta_num("n_embed_layers")?,
        gcn_hidden: ck.meta_num("gcn_hidden")?,
        node_out_dim: ck.meta_num("node_out_dim")?,
        alpha_embed_dim: ck.meta_num("alpha_embed_dim")?,
        mlp_hidden: ck.meta_num("mlp_hidden")?,
        temperature: ck.meta_num("temperature")?,
        head_balancing_steps: ck.meta_num("head_balancing_steps")?,
        inference_balancing_steps: ck.meta_num("inference_balancing_steps")?,
        affinity_bandwidth: ck.meta_num("affinity_bandwidth")?,
        feature_dim: ck.meta_num("feature_dim")?,
    };
    let p = PredictorParams { config, version, tensors: ck.arrays.clone() };
    p.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(p)
}

pub fn dictionary_checkpoint(m: &DictionaryModel, config: &str) -> Checkpoint {
    let meta = [
        ("variant", m.variant.as_str().to_string()),
        ("k", m.k.to_string()),
        ("n", m.n.to_string()),
        ("d", m.d.to_string()),
    ];
    let mut arrays = vec![("structure".to_string(), m.structure.clone())];
    arrays.extend(m.tensors.iter().cloned());
    Checkpoint {
        kind: KIND_DICTIONARY.into(),
        config: config.into(),
        meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        arrays,
    }
}

pub fn dictionary_from_checkpoint(ck: &Checkpoint) -> Result<DictionaryModel> {
    ck.expect_kind(KIND_DICTIONARY)?;
    let variant = Variant::parse(ck.meta("variant")?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let (first, rest) = ck.arrays.split_first().ok_or_else(|| Error::CorruptCheckpoint("no arrays".into()))?;
    if first.0 != "structure" {
        return Err(Error::CorruptCheckpoint("first array must be the structure".into()));
    }
    let m = DictionaryModel {
        variant,
        structure: first.1.clone(),
        k: ck.meta_num("k")?,
        n: ck.meta_num("n")?,
        d: ck.meta_num("d")?,
        tensors: rest.to_vec(),
    };
    m.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::shortest_paths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_predictor(seed: u64) -> PredictorParams {
        let cfg = PredictorConfig { gcn_hidden: 5, node_out_dim: 3, mlp_hidden: 7, ..Default::default() };
        let mut p = PredictorParams::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in p.tensors.iter_mut() {
            t.mapv_inplace(|x| x + rng.random_range(-1.0..1.0) * 1e-300f64.max(rng.random::<f64>()));
        }
        p
    }

    #[test]
    fn predictor_round_trip_is_bit_exact() {
        let p = small_predictor(3);
        let ck = predictor_checkpoint(&p, "seed 3\n");
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let q = predictor_from_checkpoint(&back).unwrap();
        for ((_, a), (_, b)) in p.tensors.iter().zip(&q.tensors) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(q, p);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn dictionary_round_trip() {
        let mut adj = Array2::zeros((4, 4));
        for i in 0..3 {
            adj[[i, i + 1]] = 1.0;
            adj[[i + 1, i]] = 1.0;
        }
        let atoms = vec![Array2::from_elem((4, 2), 0.25), Array2::from_elem((4, 2), -1.5)];
        let m = DictionaryModel::from_atoms(Variant::SoftbinMlp, &atoms, shortest_paths(&adj).unwrap(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.ckpt");
        dictionary_checkpoint(&m, "").save(&path).unwrap();
        let back = dictionary_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(predictor_from_checkpoint(&Checkpoint::load(&path).unwrap()).is_err());
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = predictor_checkpoint(&small_predictor(1), "").to_bytes();
        for cut in [3, 12, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut bumped = bytes.clone();
        bumped[9..13].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bumped), Err(Error::VersionMismatch { found: 2, expected: 1 })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPTX\x01\x00\x00\x00"), Err(Error::CorruptCheckpoint(_))));
    }
}
