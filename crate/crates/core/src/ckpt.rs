//! Checkpoint container: a minimal binary format holding named f64
//! tensors, quantizer states and a JSON metadata block, integrity-checked
//! by a trailing SHA-256 over everything before it. Byte layout is
//! documented in docs/formats.md.
//!
//! Loading rebuilds the model from the embedded ModelConfig and then
//! copies payloads into place, so a round trip reproduces forward outputs
//! bit-exactly, including BN running statistics and quantizer steps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectorModel, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::{QuantKind, QuantSpec};

const MAGIC: &[u8; 4] = b"ZSQD";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub epoch: u32,
    /// sorted map so serialization is canonical
    pub metrics: BTreeMap<String, f64>,
    pub model: ModelConfig,
    pub quant: Option<QuantSpec>,
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("name '{name}' too long")));
    }
    put_u16(buf, name.len() as u16);
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_name(buf, name)?;
    buf.push(DTYPE_F64);
    if shape.len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("tensor '{name}' rank {}", shape.len())));
    }
    buf.push(shape.len() as u8);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// (name, shape, payload) triples in the canonical save order.
fn tensor_entries(model: &DetectorModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for b in &model.blocks {
        out.push((format!("{}.w", b.name), b.w.shape().to_vec(), b.w.data().to_vec()));
        if let Some(bias) = &b.bias {
            out.push((format!("{}.b", b.name), bias.shape().to_vec(), bias.data().to_vec()));
        }
        if let Some(bn) = &b.bn {
            let c = bn.gamma.data().len();
            out.push((format!("{}.bn.gamma", b.name), vec![c], bn.gamma.data().to_vec()));
            out.push((format!("{}.bn.beta", b.name), vec![c], bn.beta.data().to_vec()));
            out.push((format!("{}.bn.running_mean", b.name), vec![c], bn.running_mean.clone()));
            out.push((format!("{}.bn.running_var", b.name), vec![c], bn.running_var.clone()));
        }
    }
    out
}

pub fn save_checkpoint(model: &DetectorModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let meta_json = serde_json::to_vec(meta)?;
    put_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);

    let tensors = tensor_entries(model);
    put_u32(&mut buf, tensors.len() as u32);
    for (name, shape, data) in &tensors {
        put_tensor(&mut buf, name, shape, data)?;
    }

    let quant_layers = model.quant.as_ref().map(|q| q.layers.as_slice()).unwrap_or(&[]);
    put_u32(&mut buf, 2 * quant_layers.len() as u32);
    for lq in quant_layers {
        let block_name = model.blocks[lq.block].name;
        for (suffix, q) in [("weight", &lq.weight), ("act", &lq.act)] {
            put_name(&mut buf, &format!("{block_name}.{suffix}"))?;
            buf.push(lq.block as u8);
            buf.push(q.bits as u8);
            buf.push(match q.kind {
                QuantKind::Weight => 0,
                QuantKind::Activation => 1,
            });
            buf.push(q.initialized as u8);
            buf.push(q.offset.is_some() as u8);
            buf.extend_from_slice(&q.step.data()[0].to_le_bytes());
            if let Some(off) = &q.offset {
                buf.extend_from_slice(&off.data()[0].to_le_bytes());
            }
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| {
        Error::Checkpoint(format!("{}: write failed: {e}", path.display()))
    })?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated reading {what} at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("sized")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("sized")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("sized")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: non-utf8 name at byte {}",
                self.path.display(),
                self.pos - len
            ))
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorModel, CheckpointMeta)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes is no checkpoint",
            path.display(),
            bytes.len()
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }

    let meta_len = r.u32("metadata length")? as usize;
    let meta_raw = r.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_raw)
        .map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?;

    let mut model = DetectorModel::new(meta.model.clone())?;
    if let Some(spec) = meta.quant {
        model.attach_quantizers(spec)?;
    }

    let expected: Vec<String> = tensor_entries(&model).into_iter().map(|(n, _, _)| n).collect();
    let tensor_count = r.u32("tensor count")? as usize;
    let mut seen: Vec<String> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.name()?;
        if seen.contains(&name) {
            return Err(Error::Checkpoint(format!(
                "{}: tensor name collision '{name}'",
                path.display()
            )));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' dtype {dtype} unsupported",
                path.display()
            )));
        }
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("payload")?);
        }
        store_tensor(&mut model, &name, &shape, &data, path)?;
        seen.push(name);
    }
    for name in &expected {
        if !seen.contains(name) {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' missing",
                path.display()
            )));
        }
    }
    if seen.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors, model wants {}",
            path.display(),
            seen.len(),
            expected.len()
        )));
    }

    let quant_count = r.u32("quantizer count")? as usize;
    let model_quant_count = model.quant.as_ref().map(|q| 2 * q.layers.len()).unwrap_or(0);
    if quant_count != model_quant_count {
        return Err(Error::Checkpoint(format!(
            "{}: {quant_count} quantizer entries, config wants {model_quant_count}",
            path.display()
        )));
    }
    for _ in 0..quant_count {
        let name = r.name()?;
        let block = r.u8("quantizer block")? as usize;
        let bits = r.u8("bits")? as u32;
        let kind = match r.u8("kind")? {
            0 => QuantKind::Weight,
            1 => QuantKind::Activation,
            k => {
                return Err(Error::Checkpoint(format!(
                    "{}: quantizer '{name}' kind {k}",
                    path.display()
                )))
            }
        };
        let initialized = r.u8("initialized")? != 0;
        let has_offset = r.u8("offset flag")? != 0;
        let step = r.f64("step")?;
        let offset = if has_offset { Some(r.f64("offset")?) } else { None };

        let quant = model.quant.as_mut().expect("count checked above");
        let lq = quant
            .layers
            .iter_mut()
            .find(|l| l.block == block)
            .ok_or_else(|| {
                Error::Checkpoint(format!("{}: quantizer '{name}' block {block}", path.display()))
            })?;
        let q = match kind {
            QuantKind::Weight => &mut lq.weight,
            QuantKind::Activation => &mut lq.act,
        };
        if q.bits != bits || q.offset.is_some() != has_offset {
            return Err(Error::Checkpoint(format!(
                "{}: quantizer '{name}' disagrees with config (bits {bits} vs {})",
                path.display(),
                q.bits
            )));
        }
        q.step.data_mut()[0] = step;
        if let (Some(slot), Some(v)) = (q.offset.as_mut(), offset) {
            slot.data_mut()[0] = v;
        }
        q.initialized = initialized;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            body.len() - r.pos
        )));
    }
    Ok((model, meta))
}

fn store_tensor(
    model: &mut DetectorModel,
    name: &str,
    shape: &[usize],
    data: &[f64],
    path: &Path,
) -> Result<()> {
    let (block_name, field) = name.split_once('.').ok_or_else(|| {
        Error::Checkpoint(format!("{}: unqualified tensor '{name}'", path.display()))
    })?;
    let block = model
        .blocks
        .iter_mut()
        .find(|b| b.name == block_name)
        .ok_or_else(|| {
            Error::Checkpoint(format!("{}: unknown block in '{name}'", path.display()))
        })?;
    let fill = |slot: &mut [f64]| -> Result<()> {
        if slot.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' has {} values, model wants {}",
                path.display(),
                data.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(data);
        Ok(())
    };
    match field {
        "w" => {
            if block.w.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor '{name}' shape {shape:?}, model wants {:?}",
                    path.display(),
                    block.w.shape()
                )));
            }
            fill(block.w.data_mut())
        }
        "b" => {
            let bias = block.bias.as_mut().ok_or_else(|| {
                Error::Checkpoint(format!("{}: block has no bias for '{name}'", path.display()))
            })?;
            fill(bias.data_mut())
        }
        "bn.gamma" | "bn.beta" | "bn.running_mean" | "bn.running_var" => {
            let bn = block.bn.as_mut().ok_or_else(|| {
                Error::Checkpoint(format!("{}: block has no bn for '{name}'", path.display()))
            })?;
            match field {
                "bn.gamma" => fill(bn.gamma.data_mut()),
                "bn.beta" => fill(bn.beta.data_mut()),
                "bn.running_mean" => fill(&mut bn.running_mean),
                _ => fill(&mut bn.running_var),
            }
        }
        _ => Err(Error::Checkpoint(format!(
            "{}: unknown tensor field '{name}'",
            path.display()
        ))),
    }
}
