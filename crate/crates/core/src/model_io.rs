//! On-disk model format: a JSON manifest plus a raw little-endian `f32`
//! blob, and activation fixtures in the same convention.
//!
//! Manifest (keys are written sorted):
//!
//! ```json
//! {
//!   "blob_crc32": 123456789,
//!   "format_version": 1,
//!   "input_shape": [3, 224, 224],
//!   "layers": [
//!     {"kind": "conv", "length": 7168, "name": "conv1_1", "offset": 0,
//!      "params": {"in_channels": 3, "kernel_h": 3, "kernel_w": 3, "out_channels": 64, "pad": 1, "stride": 1}},
//!     {"kind": "relu", "length": 0, "name": "relu1_1", "offset": 7168, "params": {}},
//!     {"kind": "maxpool", "length": 0, "name": "pool1", "offset": 7168, "params": {"size": 2, "stride": 2}}
//!   ],
//!   "normalization": {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]}
//! }
//! ```
//!
//! `offset` and `length` are in bytes. A conv entry covers its weights in
//! `[out, in, kh, kw]` row-major order immediately followed by its bias.
//! `blob_crc32` is the IEEE CRC-32 of the whole blob.
//!
//! Fixture manifest:
//!
//! ```json
//! {"blob": "fixture.bin", "entries": [{"layer_name": "input", "length": 602112, "offset": 0, "shape": [3, 224, 224]}, ...],
//!  "format_version": 1}
//! ```
//!
//! `blob` is resolved relative to the fixture manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ConvParams, LayerKind, LayerSpec, NetworkSpec, Normalization};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Largest per-layer deviation a fixture may show and still pass.
pub const FIXTURE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub normalization: NormalizationEntry,
    pub layers: Vec<LayerEntry>,
    pub blob_crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationEntry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub kind: String,
    pub name: String,
    pub params: BTreeMap<String, usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureManifest {
    pub format_version: u32,
    pub blob: String,
    pub entries: Vec<FixtureEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub layer_name: String,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Serializes with keys in sorted order and a trailing newline.
fn to_sorted_json<S: Serialize>(value: &S) -> Result<String> {
    // serde_json::Value maps are BTreeMaps, so routing through Value sorts keys.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn push_f32s<T: Real>(blob: &mut Vec<u8>, values: &[T]) {
    for v in values {
        blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Builds the manifest and blob bytes for a network without touching disk.
pub fn encode_model<T: Real>(net: &NetworkSpec<T>) -> Result<(ModelManifest, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let offset = blob.len() as u64;
        let mut params = BTreeMap::new();
        match &layer.kind {
            LayerKind::Conv(p) => {
                let s = p.weights.shape();
                params.insert("out_channels".into(), s[0]);
                params.insert("in_channels".into(), s[1]);
                params.insert("kernel_h".into(), s[2]);
                params.insert("kernel_w".into(), s[3]);
                params.insert("stride".into(), p.stride);
                params.insert("pad".into(), p.pad);
                push_f32s(&mut blob, p.weights.data());
                push_f32s(&mut blob, p.bias.data());
            }
            LayerKind::Relu => {}
            LayerKind::MaxPool { size, stride } => {
                params.insert("size".into(), *size);
                params.insert("stride".into(), *stride);
            }
        }
        layers.push(LayerEntry {
            kind: layer.kind.tag().to_string(),
            name: layer.name.clone(),
            params,
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let norm = net.normalization();
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape(),
        normalization: NormalizationEntry {
            mean: norm.mean.clone(),
            std: norm.std.clone(),
        },
        layers,
        blob_crc32: crc32(&blob),
    };
    Ok((manifest, blob))
}

pub fn save_model<T: Real>(net: &NetworkSpec<T>, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let (manifest, blob) = encode_model(net)?;
    fs::write(blob_path, &blob)?;
    fs::write(manifest_path, to_sorted_json(&manifest)?)?;
    Ok(())
}

pub fn load_model(manifest_path: &Path, blob_path: &Path) -> Result<NetworkSpec<f32>> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let blob = fs::read(blob_path)?;
    decode_model(&manifest, &blob, manifest_path)
}

fn read_f32s(blob: &[u8], start: usize, count: usize) -> Vec<f32> {
    blob[start..start + 4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn check_span(name: &str, offset: u64, length: u64, blob_len: usize) -> Result<()> {
    let end = offset.checked_add(length).unwrap_or(u64::MAX);
    if end > blob_len as u64 {
        return Err(Error::OffsetOutOfRange {
            name: name.to_string(),
            offset,
            end,
            blob_len: blob_len as u64,
        });
    }
    Ok(())
}

pub fn decode_model(manifest: &ModelManifest, blob: &[u8], source: &Path) -> Result<NetworkSpec<f32>> {
    let malformed = |detail: String| Error::Manifest {
        path: source.to_path_buf(),
        detail,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    for l in &manifest.layers {
        check_span(&l.name, l.offset, l.length, blob.len())?;
    }
    let actual = crc32(blob);
    if actual != manifest.blob_crc32 {
        return Err(Error::Checksum {
            expected: manifest.blob_crc32,
            actual,
        });
    }
    let mut spans: Vec<(u64, u64, &str)> = manifest
        .layers
        .iter()
        .filter(|l| l.length > 0)
        .map(|l| (l.offset, l.offset + l.length, l.name.as_str()))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(malformed(format!(
                "entries `{}` and `{}` overlap in the blob",
                pair[0].2, pair[1].2
            )));
        }
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        let param = |key: &str| {
            l.params
                .get(key)
                .copied()
                .ok_or_else(|| malformed(format!("layer `{}` is missing param `{key}`", l.name)))
        };
        let kind = match l.kind.as_str() {
            "conv" => {
                let (k, c, kh, kw) = (
                    param("out_channels")?,
                    param("in_channels")?,
                    param("kernel_h")?,
                    param("kernel_w")?,
                );
                let nw = k * c * kh * kw;
                let expected = 4 * (nw + k) as u64;
                if l.length != expected {
                    return Err(Error::Validation(format!(
                        "layer `{}`: declared shape [{k},{c},{kh},{kw}] + bias needs {expected} bytes, entry has {}",
                        l.name, l.length
                    )));
                }
                let start = l.offset as usize;
                LayerKind::Conv(ConvParams {
                    weights: Tensor::new(vec![k, c, kh, kw], read_f32s(blob, start, nw))?,
                    bias: Tensor::new(vec![k], read_f32s(blob, start + 4 * nw, k))?,
                    stride: param("stride")?,
                    pad: param("pad")?,
                })
            }
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool {
                size: param("size")?,
                stride: param("stride")?,
            },
            other => return Err(malformed(format!("layer `{}` has unknown kind `{other}`", l.name))),
        };
        if !matches!(kind, LayerKind::Conv(_)) && l.length != 0 {
            return Err(malformed(format!("layer `{}` has no weights but length {}", l.name, l.length)));
        }
        layers.push(LayerSpec {
            name: l.name.clone(),
            kind,
        });
    }
    let normalization = Normalization {
        mean: manifest.normalization.mean.clone(),
        std: manifest.normalization.std.clone(),
    };
    NetworkSpec::new(manifest.input_shape, normalization, layers)
}

/// Writes `tensors` as a fixture: `manifest_path` plus a blob file next to it.
pub fn save_fixture<T: Real>(manifest_path: &Path, blob_name: &str, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        push_f32s(&mut blob, t.data());
        entries.push(FixtureEntry {
            layer_name: name.clone(),
            offset,
            length: blob.len() as u64 - offset,
            shape: t.shape().to_vec(),
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    fs::write(dir.join(blob_name), &blob)?;
    let manifest = FixtureManifest {
        format_version: FORMAT_VERSION,
        blob: blob_name.to_string(),
        entries,
    };
    fs::write(manifest_path, to_sorted_json(&manifest)?)?;
    Ok(())
}

/// Fixture written from a forward pass of `net` on `x` (input plus every layer).
pub fn fixture_from_forward<T: Real>(net: &NetworkSpec<T>, x: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let trace = net.forward_with_trace(x)?;
    let mut out = vec![("input".to_string(), x.clone())];
    out.extend(trace.iter().map(|(n, t)| (n.to_string(), t.clone())));
    Ok(out)
}

pub fn load_fixture(manifest_path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: FixtureManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        check_span(&e.layer_name, e.offset, e.length, blob.len())?;
        let count: usize = e.shape.iter().product();
        if e.length != 4 * count as u64 {
            return Err(Error::Manifest {
                path: manifest_path.to_path_buf(),
                detail: format!(
                    "entry `{}` has shape {:?} but length {}",
                    e.layer_name, e.shape, e.length
                ),
            });
        }
        let data = read_f32s(&blob, e.offset as usize, count);
        out.push((e.layer_name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeviation {
    pub layer: String,
    pub max_abs_deviation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureReport {
    pub fixture: PathBuf,
    pub layers: Vec<LayerDeviation>,
}

impl FixtureReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| !l.passed).map(|l| l.layer.as_str()).collect()
    }
}

/// Runs `net` on the fixture's `input` entry and compares every other entry
/// against the layer output of the same name.
pub fn verify_fixture<T: Real>(net: &NetworkSpec<T>, fixture_path: &Path) -> Result<FixtureReport> {
    let entries = load_fixture(fixture_path)?;
    let input = entries
        .iter()
        .find(|(n, _)| n == "input")
        .map(|(_, t)| t.cast::<T>())
        .ok_or_else(|| Error::MissingFixtureLayer("input".into()))?;
    for (name, _) in &entries {
        if name != "input" {
            net.layer_index(name).map_err(|_| Error::MissingFixtureLayer(name.clone()))?;
        }
    }
    let trace = net.forward_with_trace(&input)?;
    let mut layers = Vec::new();
    for (name, expected) in entries.iter().filter(|(n, _)| n != "input") {
        let actual = trace.get(name).expect("layer checked above");
        let dev = if actual.shape() != expected.shape() {
            f64::INFINITY
        } else {
            actual
                .data()
                .iter()
                .zip(expected.data())
                .map(|(a, e)| (a.as_f64() - *e as f64).abs())
                .fold(0.0, f64::max)
        };
        layers.push(LayerDeviation {
            layer: name.clone(),
            max_abs_deviation: dev,
            passed: dev <= FIXTURE_TOLERANCE,
        });
    }
    Ok(FixtureReport {
        fixture: fixture_path.to_path_buf(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_toy_color_net, build_toy_deep_net};

    /// Bitwise reflected CRC-32 (polynomial 0xEDB88320), independent of crc32fast.
    fn reference_crc32(bytes: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in bytes {
            crc ^= b as u32;
            for _ in 0..8 {
                let mask = (crc & 1).wrapping_neg();
                crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
            }
        }
        !crc
    }

    #[test]
    fn crc_matches_reference() {
        assert_eq!(reference_crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        let (m, blob) = encode_model(&build_toy_deep_net(1)).unwrap();
        assert_eq!(m.blob_crc32, reference_crc32(&blob));
    }

    #[test]
    fn round_trip_and_byte_identical_saves() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_toy_color_net();
        let (m1, b1) = (dir.path().join("a.json"), dir.path().join("a.bin"));
        let (m2, b2) = (dir.path().join("b.json"), dir.path().join("b.bin"));
        save_model(&net, &m1, &b1).unwrap();
        let loaded = load_model(&m1, &b1).unwrap();
        assert_eq!(loaded, net);
        save_model(&loaded, &m2, &b2).unwrap();
        assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

        let x = Tensor::full(&[3, 64, 64], 0.4f32);
        let ta = net.forward_with_trace(&x).unwrap();
        let tb = loaded.forward_with_trace(&x).unwrap();
        for ((_, a), (_, b)) in ta.iter().zip(tb.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn manifest_keys_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&build_toy_color_net(), &m, &b).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        let top: Vec<usize> = ["\"blob_crc32\"", "\"format_version\"", "\"input_shape\"", "\"layers\"", "\"normalization\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(top.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn truncated_blob_is_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&build_toy_color_net(), &m, &b).unwrap();
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_model(&m, &b), Err(Error::OffsetOutOfRange { .. })));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&build_toy_color_net(), &m, &b).unwrap();

        let mut bytes = fs::read(&b).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&b, &bytes).unwrap();
        assert!(matches!(load_model(&m, &b), Err(Error::Checksum { .. })));
        bytes[5] ^= 0x40;
        fs::write(&b, &bytes).unwrap();

        fs::write(dir.path().join("bad.json"), "{\"format_version\": 1").unwrap();
        assert!(matches!(load_model(&dir.path().join("bad.json"), &b), Err(Error::Manifest { .. })));

        let mut manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
        manifest.layers[0].params.insert("out_channels".into(), 5);
        assert!(matches!(decode_model(&manifest, &bytes, &m), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_network_is_rejected() {
        let bad = NetworkSpec::<f32>::new([3, 8, 8], Normalization::identity(3), vec![]);
        assert!(matches!(bad, Err(Error::Validation(_))));
    }

    #[test]
    fn fixture_self_check_and_perturbation() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_toy_deep_net(0).with_input_shape([3, 16, 16]).unwrap();
        let mut rng = crate::rng::SplitMix64::new(3);
        let x = Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.next_signed() as f32).collect()).unwrap();
        let mut tensors = fixture_from_forward(&net, &x).unwrap();
        let path = dir.path().join("fx.json");
        save_fixture(&path, "fx.bin", &tensors).unwrap();
        let report = verify_fixture(&net, &path).unwrap();
        assert!(report.passed());
        assert!(report.layers.iter().all(|l| l.max_abs_deviation == 0.0));

        let idx = tensors.iter().position(|(n, _)| n == "conv2_1").unwrap();
        tensors[idx].1.data_mut()[10] += 1.0;
        save_fixture(&path, "fx.bin", &tensors).unwrap();
        let report = verify_fixture(&net, &path).unwrap();
        assert!(!report.passed());
        assert!(report.flagged().contains(&"conv2_1"));

        tensors.push(("conv9_9".into(), Tensor::zeros(&[1])));
        save_fixture(&path, "fx.bin", &tensors).unwrap();
        assert!(matches!(verify_fixture(&net, &path), Err(Error::MissingFixtureLayer(_))));
    }
}
