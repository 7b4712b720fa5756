//! On-disk container: one JSON header line plus little-endian f32 payloads.
//!
//! Checkpoints, datasets, and pair sets all share the layout:
//!
//! ```text
//! {"version":1,"role":"...","config":{...},"tensors":[{name,shape,offset,len},...]}\n
//! <f32 LE payload, tensors in directory order>
//! ```
//!
//! The header is a single compact-JSON line (human-inspectable with `head`),
//! offsets are byte positions from the payload start, and round-trips are
//! byte-identical. Loads treat the bytes as untrusted: structural
//! inconsistencies, truncation, version drift, and non-finite payloads are
//! rejected with distinct error kinds, and nothing is allocated beyond the
//! actual input size.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::classifier::{Classifier, ClassifierConfig};
use crate::data::{DatasetMeta, LabeledDataset, PairDataset};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::ContainerError;
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
/// Upper bound on the header line; anything longer is rejected outright.
const MAX_HEADER_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
    /// Byte length (4 * element count).
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    role: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A parsed container: role, config echo, and named tensors in file order.
#[derive(Debug, Clone)]
pub struct Container {
    pub role: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(role: &str, config: serde_json::Value) -> Self {
        Container {
            role: role.to_string(),
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serialize to bytes (header line + payload).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.numel() * 4) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            version: CONTAINER_VERSION,
            role: self.role.clone(),
            config: self.config.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a container from untrusted bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let newline = bytes
            .iter()
            .take(MAX_HEADER_BYTES)
            .position(|&b| b == b'\n')
            .ok_or_else(|| ContainerError::BadHeader("no header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
        if header.version != CONTAINER_VERSION {
            return Err(ContainerError::VersionMismatch {
                found: header.version,
                supported: CONTAINER_VERSION,
            });
        }
        let payload = &bytes[newline + 1..];

        // Validate the directory before touching the payload: offsets must be
        // exactly sequential and lengths must agree with the shapes.
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.name.is_empty() {
                return Err(ContainerError::BadHeader("empty tensor name".into()));
            }
            let mut numel: u64 = 1;
            for &d in &e.shape {
                if d == 0 {
                    return Err(ContainerError::BadHeader(format!(
                        "tensor `{}` has a zero extent",
                        e.name
                    )));
                }
                numel = numel
                    .checked_mul(d as u64)
                    .ok_or_else(|| ContainerError::BadHeader(format!(
                        "tensor `{}` shape overflows",
                        e.name
                    )))?;
            }
            let byte_len = numel
                .checked_mul(4)
                .ok_or_else(|| ContainerError::BadHeader(format!(
                    "tensor `{}` length overflows",
                    e.name
                )))?;
            if e.len != byte_len {
                return Err(ContainerError::BadHeader(format!(
                    "tensor `{}` length {} disagrees with shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            if e.offset != expected_offset {
                return Err(ContainerError::BadHeader(format!(
                    "tensor `{}` offset {} is not sequential (expected {expected_offset})",
                    e.name, e.offset
                )));
            }
            expected_offset = expected_offset.checked_add(byte_len).ok_or_else(|| {
                ContainerError::BadHeader("payload length overflows".into())
            })?;
        }
        let found = payload.len() as u64;
        if found < expected_offset {
            return Err(ContainerError::Truncated {
                expected: expected_offset,
                found,
            });
        }
        if found > expected_offset {
            return Err(ContainerError::BadHeader(format!(
                "{} trailing payload bytes",
                found - expected_offset
            )));
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| ContainerError::BadHeader(err.to_string()))?;
            if !t.is_all_finite() {
                return Err(ContainerError::Invariant(format!(
                    "tensor `{}` contains non-finite values",
                    e.name
                )));
            }
            tensors.push((e.name.clone(), t));
        }
        Ok(Container {
            role: header.role,
            config: header.config,
            tensors,
        })
    }

    pub fn expect_role(&self, expected: &str) -> Result<(), ContainerError> {
        if self.role != expected {
            return Err(ContainerError::RoleMismatch {
                found: self.role.clone(),
                expected: expected.to_string(),
            });
        }
        Ok(())
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("container")
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// typed wrappers
// ---------------------------------------------------------------------------

fn params_to_container(role: &str, config: serde_json::Value, params: &ParamStore) -> Container {
    let mut c = Container::new(role, config);
    for (name, t) in params.iter() {
        c.push_tensor(name, t.clone());
    }
    c
}

fn container_to_params(c: &Container) -> ParamStore {
    let mut params = ParamStore::new();
    for (name, t) in &c.tensors {
        params.insert(name, t.clone());
    }
    params
}

pub fn save_classifier(path: &Path, model: &Classifier) -> Result<(), ContainerError> {
    let config = serde_json::to_value(model.config()).expect("config serializes");
    params_to_container("classifier", config, model.params()).save(path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier, ContainerError> {
    classifier_from_container(&Container::load(path)?)
}

pub fn classifier_from_container(c: &Container) -> Result<Classifier, ContainerError> {
    c.expect_role("classifier")?;
    let config: ClassifierConfig = serde_json::from_value(c.config.clone())
        .map_err(|e| ContainerError::BadHeader(format!("classifier config: {e}")))?;
    Classifier::from_params(config, container_to_params(c))
        .map_err(|e| ContainerError::Invariant(e.to_string()))
}

pub fn save_denoiser(path: &Path, model: &Denoiser) -> Result<(), ContainerError> {
    let config = serde_json::to_value(model.config()).expect("config serializes");
    params_to_container("denoiser", config, model.params()).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser, ContainerError> {
    denoiser_from_container(&Container::load(path)?)
}

pub fn denoiser_from_container(c: &Container) -> Result<Denoiser, ContainerError> {
    c.expect_role("denoiser")?;
    let config: DenoiserConfig = serde_json::from_value(c.config.clone())
        .map_err(|e| ContainerError::BadHeader(format!("denoiser config: {e}")))?;
    Denoiser::from_params(config, container_to_params(c))
        .map_err(|e| ContainerError::Invariant(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetConfig {
    meta: DatasetMeta,
    classes: usize,
    labels: Vec<usize>,
}

fn stack_images(images: &[Tensor]) -> Tensor {
    let per = images[0].shape().to_vec();
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&per);
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(shape, data).expect("stacked shape")
}

fn unstack_images(stacked: &Tensor, what: &str) -> Result<Vec<Tensor>, ContainerError> {
    let shape = stacked.shape();
    if shape.len() != 4 {
        return Err(ContainerError::Invariant(format!(
            "`{what}` must be (N,C,H,W), got {shape:?}"
        )));
    }
    let n = shape[0];
    let per: Vec<usize> = shape[1..].to_vec();
    let stride: usize = per.iter().product();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let data = stacked.data()[i * stride..(i + 1) * stride].to_vec();
        out.push(Tensor::new(per.clone(), data).expect("slice shape"));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, data: &LabeledDataset) -> Result<(), ContainerError> {
    let config = serde_json::to_value(DatasetConfig {
        meta: data.meta.clone(),
        classes: data.classes,
        labels: data.labels.clone(),
    })
    .expect("config serializes");
    let mut c = Container::new("dataset", config);
    c.push_tensor("images", stack_images(&data.images));
    c.save(path)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, ContainerError> {
    dataset_from_container(&Container::load(path)?)
}

pub fn dataset_from_container(c: &Container) -> Result<LabeledDataset, ContainerError> {
    c.expect_role("dataset")?;
    let config: DatasetConfig = serde_json::from_value(c.config.clone())
        .map_err(|e| ContainerError::BadHeader(format!("dataset config: {e}")))?;
    let stacked = c
        .tensor("images")
        .ok_or_else(|| ContainerError::BadHeader("missing `images` tensor".into()))?;
    let images = unstack_images(stacked, "images")?;
    if images.len() != config.labels.len() {
        return Err(ContainerError::Invariant(format!(
            "{} images but {} labels",
            images.len(),
            config.labels.len()
        )));
    }
    if config.classes < 2 {
        return Err(ContainerError::Invariant("classes must be >= 2".into()));
    }
    if config.labels.iter().any(|&l| l >= config.classes) {
        return Err(ContainerError::Invariant("label out of class range".into()));
    }
    for (i, img) in images.iter().enumerate() {
        if !img.in_unit_range() {
            return Err(ContainerError::Invariant(format!(
                "image {i} outside [0,1]"
            )));
        }
    }
    Ok(LabeledDataset {
        images,
        labels: config.labels,
        classes: config.classes,
        meta: config.meta,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PairsConfig {
    labels: Vec<usize>,
    epsilon: f32,
    attack_kind: String,
    shadow_id: String,
}

pub fn save_pairs(path: &Path, pairs: &PairDataset) -> Result<(), ContainerError> {
    let config = serde_json::to_value(PairsConfig {
        labels: pairs.labels.clone(),
        epsilon: pairs.epsilon,
        attack_kind: pairs.attack_kind.clone(),
        shadow_id: pairs.shadow_id.clone(),
    })
    .expect("config serializes");
    let mut c = Container::new("pairs", config);
    c.push_tensor("clean", stack_images(&pairs.clean));
    c.push_tensor("adv", stack_images(&pairs.adversarial));
    c.save(path)
}

pub fn load_pairs(path: &Path) -> Result<PairDataset, ContainerError> {
    pairs_from_container(&Container::load(path)?)
}

pub fn pairs_from_container(c: &Container) -> Result<PairDataset, ContainerError> {
    c.expect_role("pairs")?;
    let config: PairsConfig = serde_json::from_value(c.config.clone())
        .map_err(|e| ContainerError::BadHeader(format!("pairs config: {e}")))?;
    let clean = unstack_images(
        c.tensor("clean")
            .ok_or_else(|| ContainerError::BadHeader("missing `clean` tensor".into()))?,
        "clean",
    )?;
    let adversarial = unstack_images(
        c.tensor("adv")
            .ok_or_else(|| ContainerError::BadHeader("missing `adv` tensor".into()))?,
        "adv",
    )?;
    let pairs = PairDataset {
        clean,
        adversarial,
        labels: config.labels,
        epsilon: config.epsilon,
        attack_kind: config.attack_kind,
        shadow_id: config.shadow_id,
    };
    pairs
        .validate()
        .map_err(|e| ContainerError::Invariant(e.to_string()))?;
    Ok(pairs)
}

/// A bundle of adversarial examples keyed by input id (written next to each
/// outcomes CSV so constraint sweeps can re-check every emitted AE).
pub fn save_ae_bundle(
    path: &Path,
    records: &[crate::attack::AttackRecord],
    config: serde_json::Value,
) -> Result<(), ContainerError> {
    let mut c = Container::new("ae-bundle", config);
    for r in records {
        if let Some(ae) = &r.outcome.adversarial {
            c.push_tensor(&format!("ae/{}", r.input_id), ae.clone());
        }
    }
    c.save(path)
}

pub fn load_ae_bundle(path: &Path) -> Result<Vec<(usize, Tensor)>, ContainerError> {
    let c = Container::load(path)?;
    c.expect_role("ae-bundle")?;
    let mut out = Vec::with_capacity(c.tensors.len());
    for (name, t) in c.tensors {
        let id: usize = name
            .strip_prefix("ae/")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ContainerError::BadHeader(format!("bad AE key `{name}`")))?;
        out.push((id, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ArchKind;
    use crate::data::{gen_synthetic_dataset, SynthKind};

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut c = Container::new("dataset", serde_json::json!({"k": 1}));
        c.push_tensor("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.25, 1e-7]).unwrap());
        c.push_tensor("b", Tensor::new(vec![3], vec![0.0, 0.5, -0.5]).unwrap());
        let bytes = c.to_bytes();
        let loaded = Container::from_bytes(&bytes).unwrap();
        let again = loaded.to_bytes();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncation_is_a_distinct_error() {
        let mut c = Container::new("dataset", serde_json::json!({}));
        c.push_tensor("a", Tensor::full(&[8], 1.0));
        let bytes = c.to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            Container::from_bytes(cut),
            Err(ContainerError::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut c = Container::new("dataset", serde_json::json!({}));
        c.push_tensor("a", Tensor::full(&[2], 1.0));
        let bytes = c.to_bytes();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
            .replace("\"version\":1", "\"version\":9");
        let mut patched = text.into_bytes();
        patched.push(b'\n');
        patched.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap() + 1..]);
        assert!(matches!(
            Container::from_bytes(&patched),
            Err(ContainerError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn unknown_role_is_rejected_by_typed_loads() {
        let mut c = Container::new("mystery", serde_json::json!({}));
        c.push_tensor("a", Tensor::full(&[2], 1.0));
        let bytes = c.to_bytes();
        let loaded = Container::from_bytes(&bytes).unwrap();
        assert!(matches!(
            classifier_from_container(&loaded),
            Err(ContainerError::RoleMismatch { .. })
        ));
        assert!(matches!(
            dataset_from_container(&loaded),
            Err(ContainerError::RoleMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_header_is_not_a_crash() {
        assert!(matches!(
            Container::from_bytes(b"not json\nxxxx"),
            Err(ContainerError::BadHeader(_))
        ));
        assert!(matches!(
            Container::from_bytes(b""),
            Err(ContainerError::BadHeader(_))
        ));
        assert!(matches!(
            Container::from_bytes(&[0xff, 0xfe, 0x00]),
            Err(ContainerError::BadHeader(_))
        ));
    }

    #[test]
    fn non_finite_payload_is_an_invariant_error() {
        let mut c = Container::new("dataset", serde_json::json!({}));
        c.push_tensor("a", Tensor::full(&[2], 1.0));
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(ContainerError::Invariant(_))
        ));
    }

    #[test]
    fn classifier_checkpoint_roundtrips_bit_exactly() {
        let model = Classifier::build(
            ClassifierConfig {
                arch: ArchKind::CnnB,
                channels: 3,
                size: 8,
                classes: 4,
            },
            17,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_classifier(&path, &model).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(model.params(), loaded.params());
        assert_eq!(model.config(), loaded.config());
        // save -> load -> save produces identical bytes
        let path2 = dir.path().join("model2.ckpt");
        save_classifier(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn denoiser_checkpoint_roundtrips() {
        let den = Denoiser::build(
            DenoiserConfig {
                channels: 1,
                size: 8,
                base_width: 8,
                depth: 1,
                time_dim: 16,
            },
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("den.ckpt");
        save_denoiser(&path, &den).unwrap();
        let loaded = load_denoiser(&path).unwrap();
        assert_eq!(den.params(), loaded.params());
    }

    #[test]
    fn dataset_roundtrips_and_validates() {
        let data = gen_synthetic_dataset(SynthKind::Blobs, 20, 4, 3, 8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        save_dataset(&path, &data).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.images, data.images);
        assert_eq!(loaded.meta, data.meta);
    }

    #[test]
    fn pairs_load_checks_epsilon_ball() {
        let clean = vec![Tensor::full(&[1, 4, 4], 0.5)];
        let adv = vec![Tensor::full(&[1, 4, 4], 0.55)];
        let pairs = PairDataset {
            clean,
            adversarial: adv,
            labels: vec![1],
            epsilon: 16.0 / 255.0,
            attack_kind: "pgd".into(),
            shadow_id: "shadow".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.bin");
        save_pairs(&path, &pairs).unwrap();
        let loaded = load_pairs(&path).unwrap();
        assert_eq!(loaded.len(), 1);

        // Corrupt the stored epsilon to something smaller than the actual
        // perturbation: the load must reject it.
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..nl].to_vec()).unwrap();
        let patched = header.replacen("\"epsilon\":0.0627", "\"epsilon\":0.0001", 1);
        assert_ne!(header, patched, "patch must hit the epsilon field");
        let mut out = patched.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&bytes[nl + 1..]);
        assert!(matches!(
            Container::from_bytes(&out).and_then(|c| pairs_from_container(&c)),
            Err(ContainerError::Invariant(_))
        ));
    }
}
