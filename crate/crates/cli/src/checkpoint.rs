//! Checkpoint files (`.ctdn`): the model architecture, its parameters, the
//! iteration count, and optionally the optimizer state, in one
//! self-describing little-endian binary file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           4 bytes  "CTDN"
//! version         u16      currently 1
//! arch kind       u8       0 = hrnet, 1 = unet
//! config length   u32      byte length of the canonical config string
//! config          ...      UTF-8 canonical architecture description
//! config hash     u64      FNV-1a of the canonical config string
//! iteration       u64
//! dtype           u8       0 = f32, 1 = f64 (parameter storage)
//! param count     u32
//! per parameter:
//!   name length   u32
//!   name          ...      UTF-8
//!   shape         4 x u32  n, c, h, w
//!   data          ...      n*c*h*w elements, little-endian
//! optimizer flag  u8       0 = absent, 1 = present
//! if present:
//!   step count    u64
//!   per parameter: first moments as f64, then second moments as f64
//! ```
//!
//! Save -> load -> save is byte-identical; the stored hash must match the
//! stored config, so a mangled or mismatched architecture never loads.

use std::path::Path;

use ctdf_core::error::{Error, Result};
use ctdf_core::graph::{
    build_hrnet, build_unet, ArchDescriptor, HrnetConfig, ModelGraph, UnetConfig,
};
use ctdf_core::optim::AdamState;
use ctdf_core::tensor::{DType, Shape4, Tensor};

pub const MAGIC: &[u8; 4] = b"CTDN";
pub const VERSION: u16 = 1;

/// A checkpoint loaded back into memory.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    /// The architecture rebuilt from its stored config, parameters restored
    /// bit-exactly.
    pub graph: ModelGraph,
    /// Training iteration the checkpoint was taken at.
    pub iteration: u64,
    /// Optimizer state, when the checkpoint carried one.
    pub adam: Option<AdamState>,
}

fn arch_kind(arch: &ArchDescriptor) -> Result<u8> {
    match arch {
        ArchDescriptor::Hrnet(_) => Ok(0),
        ArchDescriptor::Unet(_) => Ok(1),
        ArchDescriptor::Custom(_) => Err(Error::Unsupported(
            "custom graphs cannot be checkpointed: their structure is not \
             reconstructible from a config string"
                .into(),
        )),
    }
}

fn dtype_byte(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn tensor_bytes(t: &Tensor, buf: &mut Vec<u8>) {
    match t.dtype() {
        DType::F32 => {
            for &v in t.as_slice::<f32>().expect("dtype checked") {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.as_slice::<f64>().expect("dtype checked") {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn checkpoint_bytes(
    graph: &ModelGraph,
    iteration: u64,
    adam: Option<&AdamState>,
) -> Result<Vec<u8>> {
    let kind = arch_kind(graph.arch())?;
    let config = graph.arch().canonical_string();
    let dtype = graph.dtype();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind);
    push_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());
    push_u64(&mut buf, graph.config_hash());
    push_u64(&mut buf, iteration);
    buf.push(dtype_byte(dtype));
    push_u32(&mut buf, graph.params().len() as u32);
    for (i, tensor) in graph.params().tensors().iter().enumerate() {
        let name = graph.params().name(i);
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        let s = tensor.shape();
        for dim in [s.n, s.c, s.h, s.w] {
            push_u32(&mut buf, dim as u32);
        }
        tensor_bytes(tensor, &mut buf);
    }
    match adam {
        None => buf.push(0),
        Some(state) => {
            let (m, v, t) = state.raw();
            if m.len() != graph.params().len() {
                return Err(Error::Contract(format!(
                    "optimizer state covers {} parameters, model has {}",
                    m.len(),
                    graph.params().len()
                )));
            }
            buf.push(1);
            push_u64(&mut buf, t);
            for (mi, vi) in m.iter().zip(v) {
                for &x in mi {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                for &x in vi {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

/// Writes a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    graph: &ModelGraph,
    iteration: u64,
    adam: Option<&AdamState>,
) -> Result<()> {
    let bytes = checkpoint_bytes(graph, iteration, adam)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sequential little-endian reader with bounds checking.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what} ({} bytes left, {n} needed)",
                    self.data.len() - self.pos
                ),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.bytes(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(self.path, format!("{what} is not valid UTF-8")))
    }
}

/// Parses `key=value` fields of a canonical architecture string.
fn canonical_fields<'a>(body: &'a [&'a str], path: &Path) -> Result<Vec<(&'a str, &'a str)>> {
    body.iter()
        .map(|part| {
            part.split_once('=').ok_or_else(|| {
                Error::format(path, format!("malformed config field {part:?}"))
            })
        })
        .collect()
}

fn parse_arch(kind: u8, config: &str, path: &Path) -> Result<ArchDescriptor> {
    let parts: Vec<&str> = config.split(';').collect();
    let (head, body) = parts
        .split_first()
        .ok_or_else(|| Error::format(path, "empty config string"))?;
    let fields = canonical_fields(body, path)?;
    let get = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::format(path, format!("config is missing field {key:?}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|e| Error::format(path, format!("config field {key:?}: {e}")))
    };
    let float = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|e| Error::format(path, format!("config field {key:?}: {e}")))
    };
    match (kind, *head) {
        (0, "hrnet") => {
            let channels = get("channels")?
                .split(',')
                .map(|s| {
                    s.parse::<usize>().map_err(|e| {
                        Error::format(path, format!("config field \"channels\": {e}"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            Ok(ArchDescriptor::Hrnet(HrnetConfig {
                branches: num("branches")?,
                channels,
                stages: num("stages")?,
                convs_per_stage: num("convs_per_stage")?,
                in_eps: float("in_eps")?,
            }))
        }
        (1, "unet") => Ok(ArchDescriptor::Unet(UnetConfig {
            input_size: num("input_size")?,
            init_channels: num("init_channels")?,
            max_channels: num("max_channels")?,
            in_eps: float("in_eps")?,
        })),
        (k, h) => Err(Error::format(
            path,
            format!("architecture kind {k} does not match config head {h:?}"),
        )),
    }
}

fn read_dtype(byte: u8, path: &Path) -> Result<DType> {
    match byte {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        other => Err(Error::format(path, format!("unknown dtype byte {other}"))),
    }
}

/// Reads a checkpoint and rebuilds the model.
///
/// The stored configuration is revalidated against its stored hash, the
/// architecture is rebuilt from the configuration, and every parameter is
/// restored bit-exactly (names and shapes must match what the architecture
/// defines).
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0, path };

    if cur.bytes(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic (not a checkpoint file)"));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let kind = cur.u8("arch kind")?;
    let config = cur.string("config string")?;
    let stored_hash = cur.u64("config hash")?;
    let arch = parse_arch(kind, &config, path)?;
    if arch.canonical_string() != config {
        return Err(Error::format(
            path,
            "config string does not round-trip through the parsed architecture",
        ));
    }
    let computed = ctdf_core::graph::fnv1a64(config.as_bytes());
    if computed != stored_hash {
        return Err(Error::format(
            path,
            format!(
                "config hash mismatch: stored {stored_hash:#018x}, computed {computed:#018x}"
            ),
        ));
    }

    let iteration = cur.u64("iteration")?;
    let dtype = read_dtype(cur.u8("dtype")?, path)?;

    // Rebuild the architecture, then overwrite the freshly initialized
    // parameters with the stored ones. The init seed is irrelevant.
    let mut graph = match &arch {
        ArchDescriptor::Hrnet(c) => build_hrnet(c, 0, dtype)?,
        ArchDescriptor::Unet(c) => build_unet(c, 0, dtype)?,
        ArchDescriptor::Custom(_) => unreachable!("parse_arch never yields custom"),
    };

    let n_params = cur.u32("parameter count")? as usize;
    if n_params != graph.params().len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {n_params} parameters, architecture defines {}",
                graph.params().len()
            ),
        ));
    }
    let elem = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    for i in 0..n_params {
        let name = cur.string("parameter name")?;
        if name != graph.params().name(i) {
            return Err(Error::format(
                path,
                format!(
                    "parameter {i} is named {name:?}, architecture defines {:?}",
                    graph.params().name(i)
                ),
            ));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("parameter shape")? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        if shape != graph.params().tensors()[i].shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name:?} has shape {shape:?}, architecture defines {:?}",
                    graph.params().tensors()[i].shape()
                ),
            ));
        }
        let len = shape.n * shape.c * shape.h * shape.w;
        let raw = cur.bytes(len * elem, "parameter data")?;
        let tensor = match dtype {
            DType::F32 => {
                let vals: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(shape, vals)?
            }
            DType::F64 => {
                let vals: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(shape, vals)?
            }
        };
        graph.params_mut().tensors_mut()[i] = tensor;
    }

    let adam = match cur.u8("optimizer flag")? {
        0 => None,
        1 => {
            let t = cur.u64("optimizer step count")?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for i in 0..n_params {
                let len = graph.params().tensors()[i].len();
                let read_vec = |cur: &mut Cursor| -> Result<Vec<f64>> {
                    Ok(cur
                        .bytes(len * 8, "optimizer moments")?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect())
                };
                m.push(read_vec(&mut cur)?);
                v.push(read_vec(&mut cur)?);
            }
            Some(AdamState::from_raw(graph.params().tensors(), m, v, t)?)
        }
        other => {
            return Err(Error::format(
                path,
                format!("optimizer flag must be 0 or 1, got {other}"),
            ));
        }
    };

    if cur.pos != data.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after checkpoint payload", data.len() - cur.pos),
        ));
    }

    Ok(LoadedCheckpoint { graph, iteration, adam })
}

/// Errors unless the checkpointed architecture matches `expected`.
pub fn require_matching_arch(loaded: &LoadedCheckpoint, expected: &ArchDescriptor) -> Result<()> {
    let expected_hash = ctdf_core::graph::fnv1a64(expected.canonical_string().as_bytes());
    if loaded.graph.config_hash() != expected_hash {
        return Err(Error::Config(format!(
            "checkpoint architecture ({}) does not match the configured model ({})",
            loaded.graph.arch().canonical_string(),
            expected.canonical_string()
        )));
    }
    Ok(())
}
