//! Binary checkpoints: a magic tag, a format version, JSON metadata, then
//! named little-endian `f32` tensors until end of file.
//!
//! ```text
//! "TSCD" | u32 version | u64 meta_len | meta JSON
//! repeated: u32 name_len | name | u32 rank | u64 dims[rank] | f32 data[∏dims]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserParams, LoraAdapter, LoraFactor, Role, Student};
use crate::error::{Error, Result};
use crate::feedback::RewardModel;
use crate::nn::{Linear, Mlp};

pub const MAGIC: &[u8; 4] = b"TSCD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `denoiser`, `student` or `reward`.
    pub kind: String,
    #[serde(default)]
    pub denoiser: Option<DenoiserConfig>,
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default)]
    pub guidance_input: bool,
    #[serde(default)]
    pub adapter: Option<AdapterMeta>,
    /// Pipeline steps that produced the weights, oldest first.
    #[serde(default)]
    pub provenance: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            denoiser: None,
            role: None,
            guidance_input: false,
            adapter: None,
            provenance: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(format_err(format!("tensor {} has {} values for dims {:?}", t.name, t.data.len(), t.dims)));
            }
            out.write_all(&(t.name.len() as u32).to_le_bytes())?;
            out.write_all(t.name.as_bytes())?;
            out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                out.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let meta_len = cur.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
        let mut tensors = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(|| format_err("tensor too large"))?;
            let raw = cur.take(count.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| format_err(format!("missing tensor {name}")))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        let t = self.tensor(name)?;
        if t.dims.len() != 2 {
            return Err(format_err(format!("{name} is not a matrix")));
        }
        Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone()).map_err(|e| format_err(e.to_string()))
    }

    fn vector(&self, name: &str) -> Result<Array1<f32>> {
        let t = self.tensor(name)?;
        if t.dims.len() != 1 {
            return Err(format_err(format!("{name} is not a vector")));
        }
        Ok(Array1::from(t.data.clone()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn push_matrix(out: &mut Vec<Tensor>, name: String, m: &Array2<f32>) {
    out.push(Tensor { name, dims: m.shape().to_vec(), data: m.iter().copied().collect() });
}

fn push_mlp(out: &mut Vec<Tensor>, prefix: &str, net: &Mlp<f32>) {
    for (i, l) in net.layers.iter().enumerate() {
        push_matrix(out, format!("{prefix}.{i}.weight"), &l.weight);
        out.push(Tensor { name: format!("{prefix}.{i}.bias"), dims: vec![l.bias.len()], data: l.bias.to_vec() });
    }
}

fn read_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp<f32>> {
    let mut layers = Vec::new();
    while ck.tensors.iter().any(|t| t.name == format!("{prefix}.{}.weight", layers.len())) {
        let i = layers.len();
        let weight = ck.matrix(&format!("{prefix}.{i}.weight"))?;
        let bias = ck.vector(&format!("{prefix}.{i}.bias"))?;
        if bias.len() != weight.nrows() {
            return Err(format_err(format!("layer {i}: bias/weight mismatch")));
        }
        layers.push(Linear { weight, bias });
    }
    if layers.is_empty() {
        return Err(format_err(format!("no layers under {prefix}")));
    }
    if layers.windows(2).any(|w| w[0].outputs() != w[1].inputs()) {
        return Err(format_err("layer sizes do not chain"));
    }
    Ok(Mlp { layers })
}

fn denoiser_meta(p: &DenoiserParams<f32>, kind: &str) -> CheckpointMeta {
    CheckpointMeta {
        denoiser: Some(p.config.clone()),
        role: Some(p.role),
        guidance_input: p.guidance_input,
        ..CheckpointMeta::new(kind)
    }
}

fn denoiser_tensors(p: &DenoiserParams<f32>, out: &mut Vec<Tensor>) {
    push_mlp(out, "net", &p.net);
    push_matrix(out, "cond_embedding".into(), &p.cond_embedding);
}

fn read_denoiser(ck: &Checkpoint) -> Result<DenoiserParams<f32>> {
    let config = ck.meta.denoiser.clone().ok_or_else(|| format_err("metadata lacks the denoiser config"))?;
    let net = read_mlp(ck, "net")?;
    if net.layers.iter().map(|l| l.outputs()).collect::<Vec<_>>() != config.layer_sizes()[1..] || net.input_dim() != config.input_dim() {
        return Err(format_err("weights do not match the stored denoiser config"));
    }
    let cond_embedding = ck.matrix("cond_embedding")?;
    if cond_embedding.shape() != [config.num_classes + 1, config.cond_dim] {
        return Err(format_err("condition embedding shape"));
    }
    Ok(DenoiserParams {
        config,
        role: ck.meta.role.unwrap_or(Role::Teacher),
        guidance_input: ck.meta.guidance_input,
        net,
        cond_embedding,
    })
}

pub fn denoiser_checkpoint(p: &DenoiserParams<f32>, provenance: &[&str]) -> Checkpoint {
    let mut tensors = Vec::new();
    denoiser_tensors(p, &mut tensors);
    let mut meta = denoiser_meta(p, "denoiser");
    meta.provenance = provenance.iter().map(|s| s.to_string()).collect();
    Checkpoint { meta, tensors }
}

pub fn student_checkpoint(s: &Student<f32>, provenance: &[&str]) -> Checkpoint {
    let mut tensors = Vec::new();
    denoiser_tensors(&s.base, &mut tensors);
    let mut meta = denoiser_meta(&s.base, "student");
    if let Some(a) = &s.adapter {
        meta.adapter = Some(AdapterMeta { rank: a.rank, alpha: a.alpha });
        for (i, f) in a.factors.iter().enumerate() {
            push_matrix(&mut tensors, format!("lora.{i}.a"), &f.a);
            push_matrix(&mut tensors, format!("lora.{i}.b"), &f.b);
        }
    }
    meta.provenance = provenance.iter().map(|s| s.to_string()).collect();
    Checkpoint { meta, tensors }
}

/// Student (base plus optional adapter) from any denoiser or student checkpoint.
pub fn student_from_checkpoint(ck: &Checkpoint) -> Result<Student<f32>> {
    let base = read_denoiser(ck)?;
    let Some(meta) = &ck.meta.adapter else {
        return Ok(Student::full(base));
    };
    let factors = (0..base.net.layers.len())
        .map(|i| Ok(LoraFactor { a: ck.matrix(&format!("lora.{i}.a"))?, b: ck.matrix(&format!("lora.{i}.b"))? }))
        .collect::<Result<Vec<_>>>()?;
    let adapter = LoraAdapter { rank: meta.rank, alpha: meta.alpha, factors };
    Student::with_adapter(base, adapter)
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<DenoiserParams<f32>> {
    student_from_checkpoint(ck)?.merged()
}

pub fn reward_checkpoint(m: &RewardModel) -> Checkpoint {
    let mut tensors = Vec::new();
    push_mlp(&mut tensors, "reward", &m.net.cast());
    let mut meta = CheckpointMeta::new("reward");
    meta.extra = serde_json::json!({ "data_dim": m.data_dim, "num_classes": m.num_classes });
    Checkpoint { meta, tensors }
}

pub fn reward_from_checkpoint(ck: &Checkpoint) -> Result<RewardModel> {
    let net = read_mlp(ck, "reward")?.cast();
    let get = |k: &str| {
        ck.meta.extra.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| format_err(format!("metadata lacks {k}")))
    };
    let (data_dim, num_classes) = (get("data_dim")?, get("num_classes")?);
    if net.input_dim() != data_dim + num_classes + 1 {
        return Err(format_err("reward network input size"));
    }
    Ok(RewardModel { net, data_dim, num_classes })
}
