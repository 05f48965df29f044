//! Versioned checkpoint container.
//!
//! Layout: `DPCK`, format version (u32 LE), header length (u64 LE), a JSON
//! header describing every array, then the arrays as little-endian f32.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{AdamWConfig, BnStats, OptimizerState, Tensor};

pub const MAGIC: &[u8; 4] = b"DPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration snapshot in config-file syntax.
    pub config: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<(AdamWConfig, OptimizerState<f32>)>,
    /// Completed training steps.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
enum Kind {
    Param,
    BatchNorm,
    FirstMoment,
    SecondMoment,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    step: usize,
    optimizer: Option<(AdamWConfig, u64)>,
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob: Vec<f32> = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: &str, kind: Kind, shape: Vec<usize>, data: &[f32]| {
            entries.push(Entry {
                name: name.to_string(),
                kind,
                shape,
                offset: blob.len(),
                len: data.len(),
            });
            blob.extend_from_slice(data);
        };
        for (name, t) in self.params.params() {
            push(name, Kind::Param, t.shape().to_vec(), t.data());
        }
        for (name, s) in self.params.bn_entries() {
            let mut v = s.running_mean.clone();
            v.extend_from_slice(&s.running_var);
            v.push(s.eps);
            v.push(s.momentum);
            push(name, Kind::BatchNorm, vec![s.running_mean.len()], &v);
        }
        if let Some((_, st)) = &self.optimizer {
            for (name, m) in &st.first {
                push(name, Kind::FirstMoment, vec![m.len()], m);
            }
            for (name, v) in &st.second {
                push(name, Kind::SecondMoment, vec![v.len()], v);
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|(c, s)| (*c, s.step)),
            entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Invariant(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, None, m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing DPCK magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let raw = &bytes[16 + hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values".into()));
        }
        let blob: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for e in header.entries {
            let data = blob
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad(format!("entry `{}` runs past the data section", e.name)))?
                .to_vec();
            match e.kind {
                Kind::Param => {
                    let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("entry `{}`: {err}", e.name)))?;
                    params.insert(e.name, t);
                }
                Kind::BatchNorm => {
                    let c = e.shape.first().copied().unwrap_or(0);
                    if data.len() != 2 * c + 2 {
                        return Err(bad(format!("batch-norm entry `{}` has {} values", e.name, data.len())));
                    }
                    params.insert_bn_stats(
                        e.name,
                        BnStats {
                            running_mean: data[..c].to_vec(),
                            running_var: data[c..2 * c].to_vec(),
                            eps: data[2 * c],
                            momentum: data[2 * c + 1],
                        },
                    );
                }
                Kind::FirstMoment => {
                    first.insert(e.name, data);
                }
                Kind::SecondMoment => {
                    second.insert(e.name, data);
                }
            }
        }
        let optimizer = header.optimizer.map(|(cfg, step)| (cfg, OptimizerState { step, first, second }));
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        params.insert_conv("a.conv.weight", 3, 2, 3, &mut rng);
        params.insert_bn("a.bn", 3);
        params.bn_stats_mut("a.bn").unwrap().running_mean = vec![0.1, -0.2, f32::MIN_POSITIVE];
        let mut st = OptimizerState::default();
        st.step = 7;
        st.first.insert("a.conv.weight".into(), vec![0.5; 54]);
        st.second.insert("a.conv.weight".into(), vec![0.25; 54]);
        Checkpoint {
            config: "[train]\nseed = 3\n".into(),
            params,
            optimizer: Some((AdamWConfig::default(), st)),
            step: 7,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), ck);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(b"nope", p), Err(Error::Format { .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 6);
        assert!(Checkpoint::from_bytes(&bytes, p).is_err());
    }
}
