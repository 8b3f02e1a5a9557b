//! Single-file checkpoints: a JSON manifest line (names, shapes,
//! architecture, gate ordering, format version) followed by raw
//! little-endian 64-bit float arrays in manifest order. Loading
//! reproduces every tensor bit-exactly.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{FgnnError, Result};
use crate::model::{Architecture, ModelParams};
use crate::train::{AdamSlot, AdamState};

const FORMAT_VERSION: u32 = 1;
const GATE_ORDER: &str = "reset,update,candidate";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Manifest {
    format_version: u32,
    gate_order: String,
    vocab_size: usize,
    arch: Architecture,
    tensors: Vec<TensorEntry>,
    adam: Option<AdamManifest>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct AdamManifest {
    step: u64,
    /// Slot names; each carries two arrays (first and second moments)
    /// shaped like the matching parameter.
    slots: Vec<String>,
}

/// Write parameters (and optionally optimizer state) to one file.
pub fn save(params: &ModelParams, state: Option<&AdamState>, path: &Path) -> Result<()> {
    let named = params.named_parameters();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        gate_order: GATE_ORDER.to_string(),
        vocab_size: params.vocab_size(),
        arch: params.arch.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        adam: state.map(|s| AdamManifest {
            step: s.step,
            slots: s.slots.iter().map(|slot| slot.name.clone()).collect(),
        }),
    };

    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &manifest)?;
    out.write_all(b"\n")?;
    for (_, tensor) in &named {
        write_array(&mut out, tensor.values())?;
    }
    if let Some(state) = state {
        for slot in &state.slots {
            write_array(&mut out, &slot.m)?;
            write_array(&mut out, &slot.v)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint back; the architecture and vocabulary size come
/// from the manifest.
pub fn load(path: &Path) -> Result<(ModelParams, Option<AdamState>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| FgnnError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);

    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read_exact(&mut byte) {
            Ok(()) if byte[0] == b'\n' => break,
            Ok(()) => header.push(byte[0]),
            Err(_) => return Err(FgnnError::Integrity("manifest line truncated".into())),
        }
    }
    let manifest: Manifest = serde_json::from_slice(&header)
        .map_err(|e| FgnnError::Integrity(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FgnnError::Integrity(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    if manifest.gate_order != GATE_ORDER {
        return Err(FgnnError::Integrity(format!(
            "unexpected gate order '{}'",
            manifest.gate_order
        )));
    }

    // Build the parameter structure for this architecture, then fill
    // every tensor from the file.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(&manifest.arch, manifest.vocab_size, &mut rng)?;
    {
        let mut named = params.named_parameters_mut();
        if named.len() != manifest.tensors.len() {
            return Err(FgnnError::Integrity(format!(
                "manifest lists {} tensors, architecture has {}",
                manifest.tensors.len(),
                named.len()
            )));
        }
        for ((name, tensor), entry) in named.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(FgnnError::Integrity(format!(
                    "tensor {}: expected {:?}, manifest has {} {:?}",
                    name,
                    tensor.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            read_array_into(&mut reader, tensor, &entry.name)?;
        }
    }

    let state = match &manifest.adam {
        None => None,
        Some(adam) => {
            let mut slots = Vec::with_capacity(adam.slots.len());
            let named = params.named_parameters();
            if adam.slots.len() != named.len() {
                return Err(FgnnError::Integrity(
                    "optimizer slots do not match parameters".into(),
                ));
            }
            for (slot_name, (param_name, tensor)) in adam.slots.iter().zip(&named) {
                if slot_name != param_name {
                    return Err(FgnnError::Integrity(format!(
                        "optimizer slot {slot_name} does not match parameter {param_name}"
                    )));
                }
                let mut m = vec![0.0; tensor.numel()];
                let mut v = vec![0.0; tensor.numel()];
                read_exact_f64(&mut reader, &mut m, &format!("adam.m.{slot_name}"))?;
                read_exact_f64(&mut reader, &mut v, &format!("adam.v.{slot_name}"))?;
                slots.push(AdamSlot {
                    name: slot_name.clone(),
                    m,
                    v,
                });
            }
            Some(AdamState {
                slots,
                step: adam.step,
            })
        }
    };

    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(FgnnError::Integrity(
            "unexpected trailing bytes after the last tensor".into(),
        ));
    }
    Ok((params, state))
}

fn write_array(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for &v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array_into(reader: &mut impl Read, tensor: &mut Tensor, name: &str) -> Result<()> {
    let mut buffer = vec![0.0; tensor.numel()];
    read_exact_f64(reader, &mut buffer, name)?;
    tensor.values_mut().copy_from_slice(&buffer);
    Ok(())
}

fn read_exact_f64(reader: &mut impl Read, into: &mut [f64], section: &str) -> Result<()> {
    let mut bytes = vec![0u8; into.len() * 8];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| FgnnError::Integrity(format!("section {section}: unexpected end of file")))?;
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        into[i] = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
    }
    Ok(())
}

use rand::SeedableRng;
