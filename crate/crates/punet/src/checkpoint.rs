//! Checkpoint serialization.
//!
//! Layout: an 8-byte magic, a version word, a length-prefixed JSON header
//! (architecture spec, dtype, optional normalizer, and a name/shape manifest),
//! then the raw little-endian buffers in manifest order. Round-trips are
//! bitwise exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{build_network, ArchitectureSpec, Network, StateEntry};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PUNETCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormalizerData {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub arch: ArchitectureSpec,
    pub dtype: Dtype,
    normalizer: Option<NormalizerData>,
    pub entries: Vec<ManifestEntry>,
}

fn gather<E: Scalar>(net: &Network<E>) -> Vec<(ManifestEntry, Tensor<E>)> {
    net.state()
        .into_iter()
        .map(|(name, entry)| match entry {
            StateEntry::Param(p) => {
                let value = p.value();
                (
                    ManifestEntry {
                        name,
                        shape: value.shape().to_vec(),
                        trainable: true,
                    },
                    value,
                )
            }
            StateEntry::Buffer(b) => {
                let value = b.borrow().clone();
                (
                    ManifestEntry {
                        name,
                        shape: value.shape().to_vec(),
                        trainable: false,
                    },
                    value,
                )
            }
        })
        .collect()
}

/// Serializes a network (and optionally its input normalizer) to bytes.
pub fn save_bytes<E: Scalar>(net: &Network<E>, normalizer: Option<&Normalizer<E>>) -> Vec<u8> {
    let state = gather(net);
    let header = Header {
        arch: net.spec().clone(),
        dtype: E::DTYPE,
        normalizer: normalizer.map(|n| NormalizerData {
            mean: n.mean.iter().map(|v| v.as_f64()).collect(),
            std: n.std.iter().map(|v| v.as_f64()).collect(),
        }),
        entries: state.iter().map(|(e, _)| e.clone()).collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let payload_len: usize = state.iter().map(|(_, t)| t.numel() * E::BYTES).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in &state {
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_file<E: Scalar>(
    net: &Network<E>,
    normalizer: Option<&Normalizer<E>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, save_bytes(net, normalizer))?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint header overruns the file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..end])
        .map_err(|e| Error::Format(format!("checkpoint header is not valid JSON: {e}")))?;
    Ok((header, end))
}

/// Reads the header without touching the payload.
pub fn peek_header(bytes: &[u8]) -> Result<Header> {
    parse_header(bytes).map(|(h, _)| h)
}

/// Restores state into an already-built network. The checkpoint must match
/// the network's architecture, dtype, and every manifest shape.
pub fn load_into<E: Scalar>(net: &Network<E>, bytes: &[u8]) -> Result<Option<Normalizer<E>>> {
    let (header, mut offset) = parse_header(bytes)?;
    if header.dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype.as_str(),
            E::DTYPE.as_str()
        )));
    }
    if &header.arch != net.spec() {
        return Err(Error::Format(format!(
            "checkpoint architecture {:?} does not match the target network {:?}",
            header.arch,
            net.spec()
        )));
    }
    let state = net.state();
    if state.len() != header.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, network expects {}",
            header.entries.len(),
            state.len()
        )));
    }
    for ((name, entry), manifest) in state.into_iter().zip(header.entries.iter()) {
        if name != manifest.name {
            return Err(Error::Format(format!(
                "manifest entry '{}' does not match network state '{}'",
                manifest.name, name
            )));
        }
        let numel: usize = manifest.shape.iter().product();
        let nbytes = numel * E::BYTES;
        if offset + nbytes > bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint payload truncated at entry '{}'",
                manifest.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes[offset..offset + nbytes].chunks_exact(E::BYTES) {
            data.push(E::read_le(chunk));
        }
        offset += nbytes;
        let tensor = Tensor::new(manifest.shape.clone(), data)?;
        match entry {
            StateEntry::Param(p) => {
                if p.shape() != manifest.shape {
                    return Err(Error::Format(format!(
                        "shape mismatch for '{}': checkpoint {:?}, network {:?}",
                        manifest.name,
                        manifest.shape,
                        p.shape()
                    )));
                }
                p.set_value(tensor);
            }
            StateEntry::Buffer(b) => *b.borrow_mut() = tensor,
        }
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }
    Ok(header.normalizer.map(|n| Normalizer {
        mean: n.mean.into_iter().map(E::from_f64).collect(),
        std: n.std.into_iter().map(E::from_f64).collect(),
    }))
}

/// Builds a network from the embedded spec and restores its state.
pub fn load_network<E: Scalar>(bytes: &[u8]) -> Result<(Network<E>, Option<Normalizer<E>>)> {
    let header = peek_header(bytes)?;
    let net = build_network::<E>(&header.arch)?;
    let normalizer = load_into(&net, bytes)?;
    Ok((net, normalizer))
}

pub fn load_file<E: Scalar>(path: impl AsRef<Path>) -> Result<(Network<E>, Option<Normalizer<E>>)> {
    let bytes = std::fs::read(path)?;
    load_network(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let spec = ArchitectureSpec::by_name("pure20", 10).unwrap();
        let net: Network<f32> = build_network(&spec).unwrap();
        net.init_parameters(42);
        let norm = Normalizer {
            mean: vec![0.49f32, 0.48, 0.44],
            std: vec![0.2, 0.21, 0.26],
        };
        let bytes = save_bytes(&net, Some(&norm));

        let (restored, norm2) = load_network::<f32>(&bytes).unwrap();
        assert_eq!(restored.spec(), net.spec());
        for ((_, a), (_, b)) in net.parameters().iter().zip(restored.parameters().iter()) {
            for (x, y) in a.value().data().iter().zip(b.value().data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(norm2.unwrap(), norm);
        // serializing again gives identical bytes
        assert_eq!(save_bytes(&restored, Some(&norm)), bytes);
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let a: Network<f32> =
            build_network(&ArchitectureSpec::by_name("pure20", 10).unwrap()).unwrap();
        let b: Network<f32> =
            build_network(&ArchitectureSpec::by_name("resnet20", 10).unwrap()).unwrap();
        let bytes = save_bytes(&a, None);
        assert!(matches!(load_into(&b, &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let a: Network<f32> =
            build_network(&ArchitectureSpec::by_name("pure20", 10).unwrap()).unwrap();
        let bytes = save_bytes(&a, None);
        assert!(matches!(load_network::<f64>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a: Network<f32> =
            build_network(&ArchitectureSpec::by_name("pure20", 10).unwrap()).unwrap();
        let mut bytes = save_bytes(&a, None);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(load_network::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(
            load_network::<f32>(b"not a checkpoint"),
            Err(Error::Format(_))
        ));
    }
}
