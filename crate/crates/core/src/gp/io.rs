//! Versioned text serialization of a trained channel (hyperparameters, standardizers, training
//! data, `alpha`, and optionally the Subset-of-Data selection).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GpDataset, GpModel, KernelParams};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFile {
    pub format_version: u32,
    pub channel: String,
    pub params: KernelParams,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_shift: f64,
    pub target_scale: f64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sod_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sod_threshold_factor: Option<f64>,
}

impl ChannelFile {
    pub fn from_model(channel: &str, model: &GpModel) -> Self {
        let ds = model.dataset();
        Self {
            format_version: MODEL_FORMAT_VERSION,
            channel: channel.to_string(),
            params: model.params().clone(),
            input_shift: ds.input_shift().to_vec(),
            input_scale: ds.input_scale().to_vec(),
            target_shift: ds.target_shift(),
            target_scale: ds.target_scale(),
            inputs: ds
                .inputs()
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            targets: ds.targets().iter().copied().collect(),
            alpha: model.alpha().iter().copied().collect(),
            sod_indices: None,
            sod_threshold_factor: None,
        }
    }

    pub fn dataset(&self) -> Result<GpDataset> {
        let t = self.inputs.len();
        let d = self.inputs.first().map_or(0, Vec::len);
        if self.inputs.iter().any(|r| r.len() != d) {
            return Err(Error::Parse("ragged input rows".into()));
        }
        let flat: Vec<f64> = self.inputs.iter().flatten().copied().collect();
        GpDataset::with_standardizers(
            DMatrix::from_row_slice(t, d, &flat),
            DVector::from_vec(self.targets.clone()),
            self.input_shift.clone(),
            self.input_scale.clone(),
            self.target_shift,
            self.target_scale,
        )
    }

    pub fn to_model(&self) -> Result<GpModel> {
        GpModel::from_parts(
            self.params.clone(),
            self.dataset()?,
            DVector::from_vec(self.alpha.clone()),
        )
    }
}

pub fn save_channel_file(path: &Path, file: &ChannelFile) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(file)?)?;
    Ok(())
}

pub fn load_channel_file(path: &Path) -> Result<ChannelFile> {
    let file: ChannelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported model format version {}",
            file.format_version
        )));
    }
    Ok(file)
}
