//! Binary checkpoints, little-endian:
//! `"EMOC"`, version `0x01`, `u32` metadata length, UTF-8 JSON metadata,
//! `u32` blob count, then per blob `u32` name length, name,
//! `u32` rows, `u32` cols, `f64[rows*cols]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dims, Modality};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel, QualityEma};
use crate::graphnets::{GraphNet, GraphNetSpec};
use crate::numerics::{ParamStore, RngStream, Tensor2};
use crate::sync::SyncModel;
use crate::trainer::pipeline::{AblationFlags, Stage, TrainLog, TrainedSystem};
use crate::trainer::HyperParams;

const MAGIC: &[u8; 4] = b"EMOC";
const VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    hp: HyperParams,
    flags: AblationFlags,
    class_names: Vec<String>,
    dims: Dims,
    stages: Vec<Stage>,
    /// `(d_video, d_audio)` of the sync encoders.
    sync_dims: Option<(usize, usize)>,
    ema: Vec<Option<f64>>,
    log: TrainLog,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what} = {v} exceeds u32")))
}

fn named_stores(sys: &TrainedSystem) -> Vec<(&'static str, &ParamStore)> {
    let mut out = Vec::new();
    if let Some(s) = &sys.sync {
        out.push(("sync", &s.store));
    }
    if let Some(n) = &sys.teacher {
        out.push(("teacher", &n.store));
    }
    if let Some(n) = &sys.audio {
        out.push(("audio", &n.store));
    }
    if let Some(n) = &sys.visual {
        out.push(("visual", &n.store));
    }
    if let Some(f) = &sys.fusion {
        out.push(("fusion", &f.store));
    }
    out
}

pub fn encode_checkpoint(sys: &TrainedSystem) -> Result<Vec<u8>> {
    let meta = Meta {
        hp: sys.hp.clone(),
        flags: sys.flags,
        class_names: sys.class_names.clone(),
        dims: sys.dims,
        stages: sys.stages.clone(),
        sync_dims: sys.sync.as_ref().map(|s| s.input_dims()),
        ema: sys.ema.values.clone(),
        log: sys.log.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32_of(json.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&json);
    let stores = named_stores(sys);
    let count: usize = stores.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&u32_of(count, "blob count")?.to_le_bytes());
    for (net, store) in stores {
        for p in store.params() {
            let name = format!("{net}/{}", p.name);
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (r, c) = p.value.shape();
            out.extend_from_slice(&u32_of(r, "rows")?.to_le_bytes());
            out.extend_from_slice(&u32_of(c, "cols")?.to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Rebuilds each network from the metadata and copies parameters by name.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedSystem> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let meta_len = r.u32("metadata length")?;
    let meta_at = r.pos;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
        offset: meta_at as u64,
        message: format!("bad metadata: {e}"),
    })?;
    let count = r.u32("blob count")?;
    let mut blobs: std::collections::BTreeMap<String, ParamStore> = Default::default();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| Error::Format {
            offset: at as u64,
            message: "parameter name is not UTF-8".into(),
        })?;
        let (net, param) = name.split_once('/').ok_or_else(|| Error::Format {
            offset: at as u64,
            message: format!("parameter name `{name}` lacks a network prefix"),
        })?;
        let (net, param) = (net.to_string(), param.to_string());
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let raw = r.take(rows * cols * 8, "parameter data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        blobs.entry(net).or_default().add(param, Tensor2::from_vec(rows, cols, data)?, false)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after the last blob".into(),
        });
    }

    let hp = meta.hp;
    let classes = meta.class_names.len();
    let dims = meta.dims;
    let mut rng = RngStream::new(0);
    let load = |store: &mut ParamStore, net: &str| -> Result<()> {
        let src = blobs
            .get(net)
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{net}` parameters")))?;
        store.load_from(src)
    };
    let sync = match meta.sync_dims {
        Some((dv, da)) => {
            let mut m = SyncModel::new(dv, da, hp.sync_dim, &mut rng);
            load(&mut m.store, "sync")?;
            Some(m)
        }
        None => None,
    };
    let net = |spec: GraphNetSpec, name: &str, rng: &mut RngStream| -> Result<Option<GraphNet>> {
        if !blobs.contains_key(name) {
            return Ok(None);
        }
        let mut n = GraphNet::new(spec, rng)?;
        load(&mut n.store, name)?;
        Ok(Some(n))
    };
    let teacher = net(
        GraphNetSpec::teacher(dims.text, hp.hidden_dim, classes, hp.gat_heads),
        "teacher",
        &mut rng,
    )?;
    let audio = net(
        GraphNetSpec::student(Modality::Audio, dims.audio, hp.hidden_dim, classes, hp.gat_heads)?,
        "audio",
        &mut rng,
    )?;
    let visual = net(
        GraphNetSpec::student(Modality::Visual, dims.visual, hp.hidden_dim, classes, hp.gat_heads)?,
        "visual",
        &mut rng,
    )?;
    let fusion = if blobs.contains_key("fusion") {
        let cfg = FusionConfig::from_hyper(&hp, vec![hp.hidden_dim; Modality::ALL.len()], classes);
        let mut f = FusionModel::new(cfg, &mut rng)?;
        load(&mut f.store, "fusion")?;
        Some(f)
    } else {
        None
    };
    let ema = QualityEma {
        decay: hp.quality_ema,
        values: meta.ema,
    };
    Ok(TrainedSystem {
        hp,
        flags: meta.flags,
        class_names: meta.class_names,
        dims,
        stages: meta.stages,
        sync,
        teacher,
        audio,
        visual,
        fusion,
        ema,
        log: meta.log,
    })
}

pub fn save_checkpoint(path: &Path, sys: &TrainedSystem) -> Result<()> {
    std::fs::write(path, encode_checkpoint(sys)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedSystem> {
    decode_checkpoint(&std::fs::read(path)?)
}
