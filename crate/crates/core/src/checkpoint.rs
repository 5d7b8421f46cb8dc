//! Single-file container for network weights and cached datasets.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "SPKCKPT\0" | version | meta_len | meta (UTF-8 JSON) | record_count
//! record: name_len | name | ndim | dims... | values (f32 LE, product(dims))
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::neuron::{NeuronConfig, SurrogateSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPKCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: String,
    pub records: Vec<Record>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION as usize);
        put(&mut out, self.meta.len());
        out.extend_from_slice(self.meta.as_bytes());
        put(&mut out, self.records.len());
        for r in &self.records {
            put(&mut out, r.name.len());
            out.extend_from_slice(r.name.as_bytes());
            put(&mut out, r.shape.len());
            for &d in &r.shape {
                put(&mut out, d);
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(8, "magic")? != MAGIC {
            return Err(Error::format(path, "not a checkpoint container (bad magic)"));
        }
        let version = cur.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let meta_len = cur.u32("metadata length")?;
        let meta = cur.utf8(meta_len, "metadata")?;
        let count = cur.u32("record count")?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u32("record name length")?;
            let name = cur.utf8(name_len, "record name")?;
            let ndim = cur.u32("record rank")?;
            let shape = (0..ndim)
                .map(|_| cur.u32("record extent"))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = cur
                .take(numel * 4, "record values")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            records.push(Record {
                name,
                shape,
                values,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Container { meta, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::format(self.path, format!("truncated while reading {what}")))?;
        self.pos += n;
        Ok(chunk)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let path = self.path;
        std::str::from_utf8(self.take(n, what)?)
            .map(str::to_string)
            .map_err(|_| Error::format(path, format!("{what} is not UTF-8")))
    }
}

/// Metadata stored with network weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub network: NetworkSpec,
    pub neuron: NeuronConfig,
    pub surrogate: SurrogateSpec,
    /// Side heads were removed.
    pub stripped: bool,
    /// Input normalization the network was trained with.
    pub normalization: Option<Normalization>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Meta {
    Network(CheckpointMeta),
    Dataset { classes: usize, split: Split },
}

fn to_record(name: &str, shape: &[usize], values: &[f64]) -> Record {
    Record {
        name: name.to_string(),
        shape: shape.to_vec(),
        values: values.iter().map(|&v| v as f32).collect(),
    }
}

fn network_container(net: &Network, normalization: Option<&Normalization>) -> Container {
    let meta = Meta::Network(CheckpointMeta {
        network: net.spec().clone(),
        neuron: net.neuron().clone(),
        surrogate: *net.surrogate(),
        stripped: net.side_head_count() == 0 && net.spec().mode.has_side_heads(),
        normalization: normalization.cloned(),
    });
    let mut records: Vec<Record> = net
        .params()
        .iter()
        .map(|(_, p)| to_record(&p.name, p.value.shape(), p.value.data()))
        .collect();
    for (name, values) in net.buffers() {
        records.push(to_record(&name, &[values.len()], &values));
    }
    Container {
        meta: serde_json::to_string(&meta).expect("metadata serializes"),
        records,
    }
}

pub fn save_network(net: &Network, normalization: Option<&Normalization>, path: &Path) -> Result<()> {
    network_container(net, normalization).write(path)
}

/// Rebuilds a network from a checkpoint. Weights are rounded to `f32` on
/// save, so a loaded network matches the saved one only to single precision.
pub fn load_network(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let container = Container::read(path)?;
    let meta = match serde_json::from_str::<Meta>(&container.meta) {
        Ok(Meta::Network(m)) => m,
        Ok(Meta::Dataset { .. }) => {
            return Err(Error::format(path, "container holds a dataset, not a network"))
        }
        Err(e) => return Err(Error::format(path, format!("bad metadata: {e}"))),
    };
    let mut net = Network::build(meta.network.clone(), meta.neuron.clone(), meta.surrogate, 0)?;
    if meta.stripped {
        net = net.strip_heads();
    }
    let names: Vec<(String, Vec<usize>)> = net
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (id, (name, shape)) in names.into_iter().enumerate() {
        let rec = container
            .record(&name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))?;
        if rec.shape != shape {
            return Err(Error::Mismatch(format!(
                "parameter {name}: checkpoint shape {:?}, network shape {shape:?}",
                rec.shape
            )));
        }
        let values = rec.values.iter().map(|&v| f64::from(v)).collect();
        net.params_mut().get_mut(crate::autodiff::ParamId(id)).value = Tensor::new(shape, values)?;
    }
    for (name, current) in net.buffers() {
        let rec = container
            .record(&name)
            .ok_or_else(|| Error::Mismatch(format!("missing buffer {name}")))?;
        if rec.shape != [current.len()] {
            return Err(Error::Mismatch(format!(
                "buffer {name}: checkpoint shape {:?}, network shape [{}]",
                rec.shape,
                current.len()
            )));
        }
        let values: Vec<f64> = rec.values.iter().map(|&v| f64::from(v)).collect();
        net.set_buffer(&name, &values)?;
    }
    net.set_training(false);
    Ok((net, meta))
}

/// Copies a checkpoint without the side-head records (`head.l.*`, `l < n`).
pub fn strip_checkpoint(src: &Path, dst: &Path) -> Result<()> {
    let container = Container::read(src)?;
    let mut meta = match serde_json::from_str::<Meta>(&container.meta) {
        Ok(Meta::Network(m)) => m,
        _ => return Err(Error::format(src, "not a network checkpoint")),
    };
    let n = meta.network.n();
    let side = |name: &str| (1..n).any(|l| name.starts_with(&format!("head.{l}.")));
    meta.stripped = meta.network.mode.has_side_heads();
    Container {
        meta: serde_json::to_string(&Meta::Network(meta)).expect("metadata serializes"),
        records: container.records.into_iter().filter(|r| !side(&r.name)).collect(),
    }
    .write(dst)
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let labels: Vec<f64> = d.labels.iter().map(|&l| l as f64).collect();
    Container {
        meta: serde_json::to_string(&Meta::Dataset {
            classes: d.classes,
            split: d.split,
        })
        .expect("metadata serializes"),
        records: vec![
            to_record("images", d.images.shape(), d.images.data()),
            to_record("labels", &[labels.len()], &labels),
        ],
    }
    .write(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let container = Container::read(path)?;
    let Ok(Meta::Dataset { classes, split }) = serde_json::from_str::<Meta>(&container.meta) else {
        return Err(Error::format(path, "container does not hold a dataset"));
    };
    let get = |name: &str| {
        container
            .record(name)
            .ok_or_else(|| Error::format(path, format!("missing record {name}")))
    };
    let images = get("images")?;
    let labels = get("labels")?;
    let images = Tensor::new(
        images.shape.clone(),
        images.values.iter().map(|&v| f64::from(v)).collect(),
    )?;
    let labels = labels.values.iter().map(|&v| v as usize).collect();
    Dataset::new(images, labels, classes, split)
}

/// True when the file starts with the container magic.
pub fn is_container(path: &Path) -> bool {
    use std::io::Read;
    let mut buf = [0u8; 8];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .is_ok()
        && &buf == MAGIC
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BlockSpec, Mode};

    fn net(mode: Mode) -> Network {
        let spec = NetworkSpec {
            in_channels: 1,
            input_size: [4, 4],
            classes: 3,
            timesteps: 2,
            mode,
            blocks: vec![BlockSpec::plain(1, 3, 1), BlockSpec::plain(3, 3, 2)],
        };
        Network::build(spec, NeuronConfig::default(), SurrogateSpec::default(), 9).unwrap()
    }

    #[test]
    fn container_round_trip() {
        let c = Container {
            meta: "{}".into(),
            records: vec![Record {
                name: "a".into(),
                shape: vec![2, 1],
                values: vec![1.5, -0.25],
            }],
        };
        let bytes = c.to_bytes();
        assert_eq!(Container::from_bytes(&bytes, Path::new("m")).unwrap(), c);
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                Container::from_bytes(&bytes[..cut], Path::new("m")),
                Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn network_round_trip_and_strip() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.ckpt");
        let stripped = dir.path().join("stripped.ckpt");
        let n = net(Mode::Shortcut);
        save_network(&n, None, &full).unwrap();
        strip_checkpoint(&full, &stripped).unwrap();
        let (a, _) = load_network(&full).unwrap();
        let (b, meta) = load_network(&stripped).unwrap();
        assert!(meta.stripped);
        assert!(std::fs::metadata(&stripped).unwrap().len() < std::fs::metadata(&full).unwrap().len());
        assert_eq!(b.side_head_count(), 0);
        let x = Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64 * 0.3).sin() * 3.0);
        assert_eq!(a.forward_infer(&x).unwrap(), b.forward_infer(&x).unwrap());
    }

    #[test]
    fn missing_parameter_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_network(&net(Mode::Vanilla), None, &path).unwrap();
        let mut c = Container::read(&path).unwrap();
        c.records.retain(|r| r.name != "block.2.bn1.gamma");
        c.write(&path).unwrap();
        let err = load_network(&path).unwrap_err().to_string();
        assert!(err.contains("block.2.bn1.gamma"), "{err}");
    }

    #[test]
    fn dataset_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let d = Dataset::new(
            Tensor::from_fn(&[3, 1, 2, 2], |i| i as f64 / 16.0),
            vec![2, 0, 1],
            3,
            Split::Test,
        )
        .unwrap();
        save_dataset(&d, &path).unwrap();
        assert!(is_container(&path));
        assert_eq!(load_dataset(&path).unwrap(), d);
    }
}
