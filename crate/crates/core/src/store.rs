//! Single-file checkpoints for base models, adapters, heads and whole
//! stacks.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..4             | magic `PEFT`                              |
//! | 4..8             | format version, `u32`                     |
//! | 8..16            | header length `H`, `u64`                  |
//! | 16..16+H         | UTF-8 JSON header                         |
//! | 16+H..           | tensor payload, `f32` row-major, in       |
//! |                  | header manifest order, no padding         |

use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig};
use crate::data::{write_atomic, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{BaseModel, ClassifierHead, ModelConfig};
use crate::stacking::{AdapterStack, Slot, SlotKind};
use crate::tensor::{HasParams, Tensor};

pub const MAGIC: &[u8; 4] = b"PEFT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// FNV-1a 64 over the compact JSON of the config, whose field order is
/// fixed by the type.
pub fn fingerprint(config: &ModelConfig) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(
        serde_json::to_string(config)
            .expect("config serializes")
            .as_bytes(),
    );
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Base,
    Adapter,
    Head,
    Stack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub slot: String,
    pub frozen: bool,
    pub adapter: AdapterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    /// Hex of [`fingerprint`] of `model`.
    pub fingerprint: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<SlotEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    fn new(kind: Kind, model: &ModelConfig) -> Self {
        Self {
            kind,
            fingerprint: format!("{:016x}", fingerprint(model)),
            model: model.clone(),
            adapter: None,
            slots: Vec::new(),
            task: None,
            tensors: Vec::new(),
        }
    }

    pub fn fingerprint_value(&self) -> Result<u64> {
        u64::from_str_radix(&self.fingerprint, 16)
            .map_err(|_| Error::Checkpoint(format!("malformed fingerprint {:?}", self.fingerprint)))
    }

    pub fn payload_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum()
    }
}

fn encode(mut header: Header, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    header.tensors = tensors
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the preamble and header and slices the payload into named
/// tensors.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<f32>)>)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Checkpoint(format!(
            "file of {} bytes is shorter than the preamble",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..hend])?;
    if header.fingerprint_value()? != fingerprint(&header.model) {
        return Err(Error::Checkpoint(
            "header fingerprint does not match its model config".into(),
        ));
    }
    let payload = &bytes[hend..];
    if payload.len() != header.payload_len() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest needs {}",
            payload.len(),
            header.payload_len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut at = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * n;
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok((header, tensors))
}

fn expect_kind(header: &Header, kind: Kind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            header.kind
        )));
    }
    Ok(())
}

fn check_base(header: &Header, base: &ModelConfig) -> Result<()> {
    let expected = fingerprint(base);
    let found = header.fingerprint_value()?;
    if expected != found {
        return Err(Error::Fingerprint { expected, found });
    }
    Ok(())
}

fn strip<T>(prefix: &str, tensors: Vec<(String, T)>) -> Result<Vec<(String, T)>> {
    tensors
        .into_iter()
        .map(
            |(n, t)| match n.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                Some(rest) => Ok((rest.to_string(), t)),
                None => Err(Error::Checkpoint(format!(
                    "tensor {n} lacks prefix {prefix}"
                ))),
            },
        )
        .collect()
}

// ---- base ---------------------------------------------------------------

pub fn base_bytes(base: &BaseModel<f32>) -> Result<Vec<u8>> {
    encode(Header::new(Kind::Base, &base.config), &base.params())
}

pub fn base_from_bytes(bytes: &[u8]) -> Result<BaseModel<f32>> {
    let (header, tensors) = decode(bytes)?;
    expect_kind(&header, Kind::Base)?;
    BaseModel::from_named(header.model, strip("base", tensors)?)
}

pub fn save_base(base: &BaseModel<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &base_bytes(base)?)
}

pub fn load_base(path: &Path) -> Result<BaseModel<f32>> {
    base_from_bytes(&read(path)?)
}

// ---- adapter ------------------------------------------------------------

/// Adapter tensors only, tagged with the fingerprint of `base`.
pub fn adapter_bytes(adapter: &Adapter<f32>, base: &ModelConfig) -> Result<Vec<u8>> {
    adapter.check_compatible(base)?;
    let mut h = Header::new(Kind::Adapter, base);
    h.adapter = Some(adapter.config());
    encode(h, &adapter.params())
}

/// Loads an adapter for `base`, rejecting files written for another base
/// configuration.
pub fn adapter_from_bytes(bytes: &[u8], base: &ModelConfig) -> Result<Adapter<f32>> {
    let (header, tensors) = decode(bytes)?;
    expect_kind(&header, Kind::Adapter)?;
    check_base(&header, base)?;
    let config = header
        .adapter
        .ok_or_else(|| Error::Checkpoint("adapter file lacks its config".into()))?;
    Adapter::from_named(&config, base, tensors)
}

pub fn save_adapter(adapter: &Adapter<f32>, base: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &adapter_bytes(adapter, base)?)
}

pub fn load_adapter(path: &Path, base: &ModelConfig) -> Result<Adapter<f32>> {
    adapter_from_bytes(&read(path)?, base)
}

// ---- head ---------------------------------------------------------------

pub fn head_bytes(head: &ClassifierHead<f32>, base: &ModelConfig) -> Result<Vec<u8>> {
    let mut h = Header::new(Kind::Head, base);
    h.task = Some(head.task.clone());
    encode(h, &head.params())
}

pub fn head_from_bytes(bytes: &[u8], base: &ModelConfig) -> Result<ClassifierHead<f32>> {
    let (header, tensors) = decode(bytes)?;
    expect_kind(&header, Kind::Head)?;
    check_base(&header, base)?;
    head_from_parts(header.task, base, tensors)
}

fn head_from_parts(
    task: Option<TaskSpec>,
    base: &ModelConfig,
    tensors: Vec<(String, Tensor<f32>)>,
) -> Result<ClassifierHead<f32>> {
    let task = task.ok_or_else(|| Error::Checkpoint("head without a task".into()))?;
    let mut head = ClassifierHead::init(task, base.d_model, 0);
    let slots = head.params_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "head needs {} tensors, found {}",
            slots.len(),
            tensors.len()
        )));
    }
    for ((name, dst), (tn, t)) in slots.into_iter().zip(tensors) {
        if name != tn || dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "unexpected head tensor {tn} {:?}",
                t.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(head)
}

// ---- stack --------------------------------------------------------------

/// Both adapter slots with their freeze flags plus the head.
pub fn stack_bytes(stack: &AdapterStack<f32>, base: &ModelConfig) -> Result<Vec<u8>> {
    let mut h = Header::new(Kind::Stack, base);
    for (kind, a) in stack.adapters() {
        a.check_compatible(base)?;
        let frozen = stack.slot(kind).map_or(false, |s| s.frozen);
        h.slots.push(SlotEntry {
            slot: kind.prefix().into(),
            frozen,
            adapter: a.config(),
        });
    }
    h.task = stack.head.as_ref().map(|hd| hd.task.clone());
    encode(h, &stack.params())
}

pub fn stack_from_bytes(bytes: &[u8], base: &ModelConfig) -> Result<AdapterStack<f32>> {
    let (header, tensors) = decode(bytes)?;
    expect_kind(&header, Kind::Stack)?;
    check_base(&header, base)?;
    let mut rest = tensors;
    let mut stack = AdapterStack::empty();
    for entry in &header.slots {
        let kind = match entry.slot.as_str() {
            "domain" => SlotKind::Domain,
            "downstream" => SlotKind::Downstream,
            other => return Err(Error::Checkpoint(format!("unknown slot {other}"))),
        };
        let n = entry.adapter.param_shapes(base).len();
        if rest.len() < n {
            return Err(Error::Checkpoint(format!(
                "slot {} is missing tensors",
                entry.slot
            )));
        }
        let tail = rest.split_off(n);
        let mine = std::mem::replace(&mut rest, tail);
        let adapter = Adapter::from_named(&entry.adapter, base, strip(kind.prefix(), mine)?)?;
        let slot = Some(Slot::new(adapter, entry.frozen));
        match kind {
            SlotKind::Domain => stack.domain = slot,
            SlotKind::Downstream => stack.downstream = slot,
        }
    }
    if header.task.is_some() {
        stack.head = Some(head_from_parts(header.task, base, rest)?);
    } else if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing tensors",
            rest.len()
        )));
    }
    Ok(stack)
}

pub fn save_stack(stack: &AdapterStack<f32>, base: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &stack_bytes(stack, base)?)
}

pub fn load_stack(path: &Path, base: &ModelConfig) -> Result<AdapterStack<f32>> {
    stack_from_bytes(&read(path)?, base)
}

/// Header of any checkpoint file, without materialising tensors.
pub fn read_header(path: &Path) -> Result<Header> {
    Ok(decode(&read(path)?)?.0)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
