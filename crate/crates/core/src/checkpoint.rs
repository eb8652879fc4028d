//! Checkpoint archive: magic, manifest length (u64 LE), JSON manifest, then
//! every tensor as raw f64 LE in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ParamState;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Outer episodes completed.
    pub episodes_done: usize,
    pub best_val_accuracy: Option<f64>,
    pub params: ParamState,
    pub buffers: ParamState,
    pub adam: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    episodes_done: usize,
    best_val_accuracy: Option<f64>,
    adam: Option<AdamMeta>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 4] = ["params", "buffers", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> Vec<(&'static str, &ParamState)> {
        let mut g = vec![(GROUPS[0], &self.params), (GROUPS[1], &self.buffers)];
        if let Some(a) = &self.adam {
            g.push((GROUPS[2], &a.m));
            g.push((GROUPS[3], &a.v));
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let groups = self.groups();
        let tensors = groups
            .iter()
            .flat_map(|(g, ps)| {
                ps.iter().map(move |(n, t)| TensorEntry {
                    group: g.to_string(),
                    name: n.to_owned(),
                    shape: t.shape().to_vec(),
                })
            })
            .collect();
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            episodes_done: self.episodes_done,
            best_val_accuracy: self.best_val_accuracy,
            adam: self.adam.as_ref().map(|a| AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(
            16 + json.len() + 8 * groups.iter().map(|(_, p)| p.num_scalars()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, ps) in groups {
            for (_, t) in ps.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| fail("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        cur.read_exact(&mut len)
            .map_err(|_| fail("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if cur.len() < len {
            return Err(fail("truncated manifest".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&cur[..len]).map_err(|e| fail(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {} unsupported",
                manifest.version
            )));
        }
        cur = &cur[len..];
        let mut states: Vec<ParamState> = (0..GROUPS.len()).map(|_| ParamState::new()).collect();
        for e in &manifest.tensors {
            let gi = GROUPS
                .iter()
                .position(|g| *g == e.group)
                .ok_or_else(|| fail(format!("unknown tensor group `{}`", e.group)))?;
            let n: usize = e.shape.iter().product();
            if cur.len() < 8 * n {
                return Err(fail(format!("truncated data for `{}`", e.name)));
            }
            let data = cur[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cur = &cur[8 * n..];
            states[gi].insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        if !cur.is_empty() {
            return Err(fail(format!("{} trailing bytes", cur.len())));
        }
        let v = states.pop().expect("four groups");
        let m = states.pop().expect("four groups");
        let buffers = states.pop().expect("four groups");
        let params = states.pop().expect("four groups");
        let adam = manifest.adam.map(|a| Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            m,
            v,
        });
        Ok(Self {
            config: manifest.config,
            episodes_done: manifest.episodes_done,
            best_val_accuracy: manifest.best_val_accuracy,
            params,
            buffers,
            adam,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}
