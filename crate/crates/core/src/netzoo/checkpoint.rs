//! Checkpoint and tensor-archive files.
//!
//! On disk an archive is one line of compact JSON (the header) terminated
//! by `\n`, followed by the raw payload: every tensor's values as
//! little-endian IEEE-754 doubles. Header entries record each tensor's name,
//! shape and byte offset into the payload. Checkpoints are archives whose
//! header also embeds the network spec and its fingerprint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{infer, ActShape, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

/// Named tensors plus optional network spec and free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub spec: Option<NetworkSpec>,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            fingerprint: self.spec.as_ref().map(NetworkSpec::fingerprint),
            spec: self.spec.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(offset as usize);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, detail: String| Error::Format {
            what: "tensor archive",
            offset: offset as u64,
            detail,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt(bytes.len(), "missing header terminator".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt(e.column().saturating_sub(1), e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fmt(
                0,
                format!(
                    "unsupported format version {} (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        if let (Some(spec), Some(fp)) = (&header.spec, &header.fingerprint) {
            if spec.fingerprint() != *fp {
                return Err(fmt(0, "spec fingerprint does not match embedded spec".into()));
            }
        }
        let payload = &bytes[nl + 1..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(fmt(
                    nl + 1 + payload.len(),
                    format!("tensor {} needs payload bytes {start}..{end}", e.name),
                ));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| fmt(nl + 1 + start, err.to_string()))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(fmt(0, format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Self {
            spec: header.spec,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    Mean,
    Var,
}

impl ParamRole {
    /// Parameters zeroed by bias removal (batchnorm beta and running mean included).
    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::Beta | ParamRole::Mean)
    }

    fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::Mean => "mean",
            ParamRole::Var => "var",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Fan-in for weight initialization.
    pub fan_in: usize,
}

/// Name of a parameter at op path `path` (top-level index, then body index).
pub fn param_name(path: &[usize], role: ParamRole) -> String {
    let mut s: String = path.iter().map(|i| format!("{i}.")).collect();
    s.push_str(role.suffix());
    s
}

fn collect_slots(layers: &[LayerSpec], mut shape: ActShape, prefix: &[usize], out: &mut Vec<ParamSlot>) {
    for (i, layer) in layers.iter().enumerate() {
        let mut path = prefix.to_vec();
        path.push(i);
        let mut push = |role, shape: Vec<usize>, fan_in| {
            out.push(ParamSlot {
                name: param_name(&path, role),
                shape,
                role,
                fan_in,
            })
        };
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let cin = shape.features();
                push(
                    ParamRole::Weight,
                    vec![*out_channels, cin, *kernel, *kernel],
                    cin * kernel * kernel,
                );
                if *bias {
                    push(ParamRole::Bias, vec![*out_channels], 0);
                }
            }
            LayerSpec::Dense { units, bias } => {
                let k = shape.features();
                push(ParamRole::Weight, vec![*units, k], k);
                if *bias {
                    push(ParamRole::Bias, vec![*units], 0);
                }
            }
            LayerSpec::BatchNorm { .. } => {
                let c = shape.features();
                for role in [ParamRole::Gamma, ParamRole::Beta, ParamRole::Mean, ParamRole::Var] {
                    push(role, vec![c], 0);
                }
            }
            LayerSpec::Residual { body } => collect_slots(body, shape, &path, out),
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => {}
        }
        shape = infer(layer, shape).expect("spec validated before slot collection");
    }
}

/// Every parameter the spec requires, in op order.
pub fn param_slots(spec: &NetworkSpec) -> Result<Vec<ParamSlot>> {
    let layout = spec.layout()?;
    let mut out = Vec::new();
    collect_slots(&spec.layers, layout.input, &[], &mut out);
    Ok(out)
}

/// A network spec together with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    spec: NetworkSpec,
    params: BTreeMap<String, Tensor>,
}

/// Initialization knobs for [`build_network_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct InitOptions {
    /// Standard deviation of Gaussian bias/beta initialization (0 gives zero biases).
    pub bias_std: f64,
    /// Standard deviation of batchnorm running-mean initialization.
    pub bn_stat_std: f64,
}

/// He-initialized weights, zero biases, identity batchnorm; deterministic in `seed`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Checkpoint> {
    build_network_with(spec, seed, InitOptions::default())
}

pub fn build_network_with(spec: &NetworkSpec, seed: u64, opts: InitOptions) -> Result<Checkpoint> {
    let slots = param_slots(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let gaussian = |std: f64, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; n];
        }
        let d = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    for slot in slots {
        let n = slot.shape.iter().product();
        let data = match slot.role {
            ParamRole::Weight => gaussian((2.0 / slot.fan_in as f64).sqrt(), n, &mut rng),
            ParamRole::Bias | ParamRole::Beta => gaussian(opts.bias_std, n, &mut rng),
            ParamRole::Mean => gaussian(opts.bn_stat_std, n, &mut rng),
            ParamRole::Gamma => vec![1.0; n],
            ParamRole::Var => {
                if opts.bn_stat_std == 0.0 {
                    vec![1.0; n]
                } else {
                    gaussian(opts.bn_stat_std, n, &mut rng)
                        .into_iter()
                        .map(|v| 1.0 + v.abs())
                        .collect()
                }
            }
        };
        params.insert(slot.name, Tensor::new(slot.shape, data)?);
    }
    Checkpoint::new(spec.clone(), params)
}

impl Checkpoint {
    /// Validates that `params` fill exactly the slots required by `spec`.
    pub fn new(spec: NetworkSpec, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let slots = param_slots(&spec)?;
        for slot in &slots {
            match params.get(&slot.name) {
                None => return Err(Error::invalid(format!("missing parameter {}", slot.name))),
                Some(t) if t.shape() != slot.shape.as_slice() => {
                    return Err(Error::shape(
                        "checkpoint",
                        slot.name.clone(),
                        format!("expected {:?}, got {:?}", slot.shape, t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if params.len() != slots.len() {
            let extra = params
                .keys()
                .find(|k| !slots.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid(format!("parameter {extra} has no slot in the spec")));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        param_slots(&self.spec).expect("validated at construction")
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                name.to_string(),
                format!("expected {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            spec: Some(self.spec.clone()),
            meta: BTreeMap::new(),
            tensors: self.params.clone(),
        }
    }

    pub fn from_archive(archive: TensorArchive) -> Result<Self> {
        let spec = archive.spec.ok_or_else(|| Error::Format {
            what: "checkpoint",
            offset: 0,
            detail: "header has no network spec".into(),
        })?;
        Self::new(spec, archive.tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(TensorArchive::load(path)?)
    }
}
