//! Binary container shared by weights and physics artifacts.
//!
//! Layout: `SPDE` magic, u16 version, u32 manifest length, UTF-8 manifest,
//! little-endian f64 blobs in manifest order, u64 FNV-1a of the blob bytes.
//! Manifest lines are `kind <tag>`, `meta <text>` and
//! `<role> <name> <f64|c128> <d0,d1,..>`.

use std::path::Path;

use super::network::Network;
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::physics::{BlurKernel, CoilMaps, KernelKind, SamplingMask};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"SPDE";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub role: String,
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: String,
    pub meta: Vec<String>,
    pub entries: Vec<Entry>,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Record {
            kind: kind.to_string(),
            meta: vec![],
            entries: vec![],
        }
    }

    pub fn push(&mut self, role: &str, name: &str, tensor: Tensor) {
        self.entries.push(Entry {
            role: role.to_string(),
            name: name.to_string(),
            tensor,
        });
    }

    pub fn entry(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Format(format!("{} record has no entry `{name}`", self.kind)))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a `{kind}` record, found `{}`", self.kind)));
        }
        Ok(())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn dtype_tag(d: DType) -> &'static str {
    match d {
        DType::Real => "f64",
        DType::Complex => "c128",
    }
}

pub fn encode(record: &Record) -> Vec<u8> {
    let mut manifest = format!("kind {}\n", record.kind);
    for m in &record.meta {
        manifest.push_str(&format!("meta {m}\n"));
    }
    let mut blob = Vec::new();
    for e in &record.entries {
        let dims: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            e.role,
            e.name,
            dtype_tag(e.tensor.dtype()),
            dims.join(",")
        ));
        for v in e.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(18 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&fnv1a64(&blob).to_le_bytes());
    out
}

struct Declared {
    role: String,
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

pub fn decode(bytes: &[u8]) -> Result<Record> {
    if bytes.len() < 10 {
        return Err(Error::Checksum(format!("file truncated to {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[10..];
    if body.len() < mlen {
        return Err(Error::Checksum("file truncated inside the manifest".into()));
    }
    let manifest = std::str::from_utf8(&body[..mlen])
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;

    let mut kind = None;
    let mut meta = vec![];
    let mut declared = vec![];
    for line in manifest.lines() {
        if let Some(k) = line.strip_prefix("kind ") {
            kind = Some(k.to_string());
        } else if let Some(m) = line.strip_prefix("meta ") {
            meta.push(m.to_string());
        } else {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("manifest line `{line}`")));
            }
            let dtype = match f[2] {
                "f64" => DType::Real,
                "c128" => DType::Complex,
                other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
            };
            let shape = f[3]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad shape in `{line}`")))?;
            declared.push(Declared {
                role: f[0].to_string(),
                name: f[1].to_string(),
                dtype,
                shape,
            });
        }
    }
    let kind = kind.ok_or_else(|| Error::Format("manifest has no kind line".into()))?;

    let blob_len: usize = declared
        .iter()
        .map(|d| d.shape.iter().product::<usize>() * d.dtype.width() * 8)
        .sum();
    let rest = &body[mlen..];
    if rest.len() < blob_len + 8 {
        return Err(Error::Checksum(format!(
            "file truncated: {} data bytes present, {} declared plus checksum",
            rest.len(),
            blob_len
        )));
    }
    if rest.len() > blob_len + 8 {
        return Err(Error::ManifestShape {
            what: "tensor data".into(),
            detail: format!("manifest declares {blob_len} bytes, file holds {}", rest.len() - 8),
        });
    }
    let blob = &rest[..blob_len];
    let stored = u64::from_le_bytes(rest[blob_len..].try_into().expect("8 bytes"));
    if stored != fnv1a64(blob) {
        return Err(Error::Checksum("blob checksum does not match".into()));
    }

    let mut entries = Vec::with_capacity(declared.len());
    let mut offset = 0;
    for d in declared {
        let n = d.shape.iter().product::<usize>() * d.dtype.width();
        let data = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        entries.push(Entry {
            role: d.role,
            name: d.name,
            tensor: Tensor::with_dtype(&d.shape, d.dtype, data)?,
        });
    }
    Ok(Record { kind, meta, entries })
}

pub fn write_record(path: impl AsRef<Path>, record: &Record) -> Result<()> {
    std::fs::write(path, encode(record))?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>) -> Result<Record> {
    decode(&std::fs::read(path)?)
}

pub fn network_to_record(net: &Network) -> Record {
    let mut r = Record::new("network");
    for l in net.spec().layers() {
        r.meta.push(format!("layer {l}"));
    }
    for p in net.params() {
        r.push("param", &p.name, p.value.clone());
    }
    for (name, t) in net.buffers() {
        r.push("buffer", name, t.clone());
    }
    r
}

pub fn network_from_record(r: &Record) -> Result<Network> {
    r.expect_kind("network")?;
    let layers = r
        .meta
        .iter()
        .filter_map(|m| m.strip_prefix("layer "))
        .map(|l| l.parse::<LayerSpec>())
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec::new(layers)?;
    let pick = |role: &str| -> Vec<(String, Tensor)> {
        r.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    };
    Network::from_parts(spec, pick("param"), pick("buffer"))
}

pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_record(path, &network_to_record(net))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network> {
    network_from_record(&read_record(path)?)
}

pub fn mask_to_record(mask: &SamplingMask) -> Record {
    let mut r = Record::new("mask");
    r.meta.push(format!("rate={} acs={}", mask.rate(), mask.acs_lines()));
    let cols = mask.columns().iter().map(|&b| b as u8 as f64).collect();
    r.push("tensor", "columns", Tensor::new(&[mask.width()], cols).expect("1-d"));
    r
}

pub fn mask_from_record(r: &Record) -> Result<SamplingMask> {
    r.expect_kind("mask")?;
    let meta = r.meta.first().ok_or_else(|| Error::Format("mask record lacks meta".into()))?;
    let mut rate = None;
    let mut acs = None;
    for kv in meta.split_whitespace() {
        match kv.split_once('=') {
            Some(("rate", v)) => rate = v.parse::<f64>().ok(),
            Some(("acs", v)) => acs = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (Some(rate), Some(acs)) = (rate, acs) else {
        return Err(Error::Format(format!("mask meta `{meta}`")));
    };
    let cols = r.entry("columns")?.data().iter().map(|&v| v != 0.0).collect();
    Ok(SamplingMask::from_columns(cols, rate, acs))
}

pub fn kernel_to_record(k: &BlurKernel) -> Record {
    let mut r = Record::new("kernel");
    r.meta.push(k.kind().name().to_string());
    r.push("tensor", "weights", k.weights().clone());
    r
}

pub fn kernel_from_record(r: &Record) -> Result<BlurKernel> {
    r.expect_kind("kernel")?;
    let kind = r
        .meta
        .first()
        .and_then(|m| KernelKind::parse(m))
        .ok_or_else(|| Error::Format("kernel record lacks a kind".into()))?;
    BlurKernel::new(r.entry("weights")?.clone(), kind)
}

pub fn coil_maps_to_record(maps: &CoilMaps) -> Record {
    let mut r = Record::new("coil_maps");
    r.push("tensor", "maps", maps.tensor().clone());
    r
}

pub fn coil_maps_from_record(r: &Record) -> Result<CoilMaps> {
    r.expect_kind("coil_maps")?;
    CoilMaps::new(r.entry("maps")?.clone())
}

pub fn images_to_record(images: &Tensor) -> Record {
    let mut r = Record::new("images");
    r.push("tensor", "images", images.clone());
    r
}

pub fn images_from_record(r: &Record) -> Result<Tensor> {
    r.expect_kind("images")?;
    Ok(r.entry("images")?.clone())
}
