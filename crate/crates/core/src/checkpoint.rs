//! Checkpoint files: a one-line JSON header carrying a SHA-256 of the body,
//! followed by the JSON body. Any byte change in the body fails the load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::fcrn::{Fcrn, FcrnConfig, NormStats};
use crate::pesqnet::{PesqNet, PesqNetConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fcrn,
    Pesqnet,
}

/// Shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.as_standard_layout().iter().copied().collect(),
        }
    }
}

impl TryFrom<TensorData> for Tensor {
    type Error = Error;
    fn try_from(d: TensorData) -> Result<Tensor> {
        Tensor::from_shape_vec(ndarray::IxDyn(&d.shape), d.data)
            .map_err(|e| Error::Checkpoint(format!("tensor shape {:?}: {e}", d.shape)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: TensorData,
}

pub fn params_to_records(p: &ParamSet) -> Vec<NamedTensor> {
    p.names()
        .iter()
        .zip(p.tensors())
        .map(|(n, t)| NamedTensor {
            name: n.clone(),
            tensor: t.into(),
        })
        .collect()
}

pub fn params_from_records(records: Vec<NamedTensor>) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for r in records {
        if p.get(&r.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", r.name)));
        }
        p.insert(&r.name, r.tensor.try_into()?);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub norm_stats: Option<NormStats>,
    pub params: Vec<NamedTensor>,
    /// Optimizer and schedule state for resuming; absent in final models.
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    sha256: String,
}

impl Checkpoint {
    pub fn from_fcrn(m: &Fcrn, stats: &NormStats) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Fcrn,
            config: serde_json::to_value(&m.cfg)?,
            norm_stats: Some(stats.clone()),
            params: params_to_records(&m.params),
            train_state: None,
        })
    }

    pub fn from_pesqnet(m: &PesqNet) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Pesqnet,
            config: serde_json::to_value(&m.cfg)?,
            norm_stats: None,
            params: params_to_records(&m.params),
            train_state: None,
        })
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "holds a {:?} model, expected {:?}",
                self.kind, kind
            )));
        }
        Ok(())
    }

    /// Rebuilds the model; the stored tensors must match the layout that the
    /// stored configuration produces.
    pub fn to_fcrn(&self) -> Result<(Fcrn, NormStats)> {
        self.expect_kind(ModelKind::Fcrn)?;
        let cfg: FcrnConfig = serde_json::from_value(self.config.clone())?;
        let reference = Fcrn::new(cfg.clone(), 0)?;
        let params = params_from_records(self.params.clone())?;
        if !params.same_layout(&reference.params) {
            return Err(Error::Checkpoint("parameters do not match the stored FCRN config".into()));
        }
        let stats = self
            .norm_stats
            .clone()
            .ok_or_else(|| Error::Checkpoint("FCRN checkpoint without normalization stats".into()))?;
        if stats.n_bins != cfg.n_bins {
            return Err(Error::Checkpoint("normalization stats do not match config".into()));
        }
        Ok((Fcrn { cfg, params }, stats))
    }

    pub fn to_pesqnet(&self) -> Result<PesqNet> {
        self.expect_kind(ModelKind::Pesqnet)?;
        let cfg: PesqNetConfig = serde_json::from_value(self.config.clone())?;
        let reference = PesqNet::new(cfg.clone(), 0)?;
        let params = params_from_records(self.params.clone())?;
        if !params.same_layout(&reference.params) {
            return Err(Error::Checkpoint("parameters do not match the stored PESQNet config".into()));
        }
        Ok(PesqNet { cfg, params })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let body = serde_json::to_string(ckpt)?;
    let header = serde_json::to_string(&Header {
        format_version: FORMAT_VERSION,
        sha256: hex::encode(Sha256::digest(body.as_bytes())),
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, format!("{header}\n{body}"))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {}", path.display())));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (head, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header =
        serde_json::from_str(head).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {}, this build reads {FORMAT_VERSION}",
            header.format_version
        )));
    }
    if hex::encode(Sha256::digest(body.as_bytes())) != header.sha256 {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    serde_json::from_str(body).map_err(|e| Error::Checkpoint(format!("bad body: {e}")))
}
