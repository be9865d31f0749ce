//! Dataset directory format: a human-readable `manifest.json` next to one
//! packed `tensors.bin`.
//!
//! The binary file holds little-endian 32-bit floats (ids are 32-bit ints),
//! concatenated in the order the manifest's `tensor_order` states: codebook,
//! mixing weights (per hidden layer its matrix then bias, then the final
//! projection), then per block the group matrix, latents, content ids,
//! observations, and transformed observations. Loading widens back to f64,
//! so save -> load -> save reproduces both files byte for byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::GroupElement;
use crate::numkit::Matrix;

use super::{
    ActionBlock, ContentCodebook, DatasetConfig, InjectivityRecord, MixingNetwork, Splits,
    SyntheticDataset, MIXING_SLOPE,
};

const FORMAT_VERSION: u32 = 1;
const MANIFEST_NAME: &str = "manifest.json";
const TENSORS_NAME: &str = "tensors.bin";
const TENSOR_ORDER: &[&str] = &[
    "codebook",
    "mixing_layer_weights_and_biases",
    "mixing_final_projection",
    "per_block:group_matrix,latents,content_ids,observations,observations_transformed",
];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DatasetConfig,
    splits: Splits,
    injectivity: InjectivityRecord,
    mixing_slope: f64,
    tensor_order: Vec<String>,
    total_pairs: usize,
}

struct TensorWriter<W: Write> {
    out: W,
}

impl<W: Write> TensorWriter<W> {
    fn floats(&mut self, values: &[f64]) -> Result<()> {
        for &v in values {
            self.out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    fn ints(&mut self, values: &[u32]) -> Result<()> {
        for &v in values {
            self.out.write_all(&(v as i32).to_le_bytes())?;
        }
        Ok(())
    }
}

struct TensorReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> TensorReader<'a> {
    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count * 4;
        if self.offset + need > self.bytes.len() {
            return Err(Error::Format(format!(
                "tensor file truncated: wanted {} bytes at offset {}, have {}",
                need,
                self.offset,
                self.bytes.len()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let at = self.offset + i * 4;
            let raw: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
            out.push(f32::from_le_bytes(raw) as f64);
        }
        self.offset += need;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, self.floats(rows * cols)?))
    }

    fn ints(&mut self, count: usize) -> Result<Vec<u32>> {
        let need = count * 4;
        if self.offset + need > self.bytes.len() {
            return Err(Error::Format(format!(
                "tensor file truncated: wanted {} bytes at offset {}, have {}",
                need,
                self.offset,
                self.bytes.len()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let at = self.offset + i * 4;
            let raw: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
            let v = i32::from_le_bytes(raw);
            if v < 0 {
                return Err(Error::Format(format!("negative content id {}", v)));
            }
            out.push(v as u32);
        }
        self.offset += need;
        Ok(out)
    }
}

/// Writes `manifest.json` and `tensors.bin` into `dir`, creating it.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ds.config.clone(),
        splits: ds.splits.clone(),
        injectivity: ds.injectivity.clone(),
        mixing_slope: ds.mixing.slope,
        tensor_order: TENSOR_ORDER.iter().map(|s| s.to_string()).collect(),
        total_pairs: ds.total_pairs(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_NAME), json)?;

    let file = fs::File::create(dir.join(TENSORS_NAME))?;
    let mut w = TensorWriter {
        out: BufWriter::new(file),
    };
    w.floats(ds.codebook.vectors().data())?;
    for (weights, biases) in ds.mixing.layer_weights.iter().zip(&ds.mixing.layer_biases) {
        w.floats(weights.data())?;
        w.floats(biases)?;
    }
    w.floats(ds.mixing.final_projection.data())?;
    for block in &ds.blocks {
        w.floats(block.element.matrix.data())?;
        w.floats(block.latents.data())?;
        w.ints(&block.content_ids)?;
        w.floats(block.observations.data())?;
        w.floats(block.observations_transformed.data())?;
    }
    w.out.flush()?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let bytes = fs::read(dir.join(TENSORS_NAME))?;
    let mut r = TensorReader {
        bytes: &bytes,
        offset: 0,
    };
    let width = cfg.n_style + cfg.d_content;
    let codebook = ContentCodebook::new(r.matrix(cfg.codebook_size, cfg.d_content)?);
    let mut layer_weights = Vec::with_capacity(cfg.mixing_hidden_layers);
    let mut layer_biases = Vec::with_capacity(cfg.mixing_hidden_layers);
    for _ in 0..cfg.mixing_hidden_layers {
        layer_weights.push(r.matrix(width, width)?);
        layer_biases.push(r.floats(width)?);
    }
    let final_projection = r.matrix(cfg.obs_dim, width)?;
    let mixing = MixingNetwork {
        layer_weights,
        layer_biases,
        final_projection,
        slope: if manifest.mixing_slope > 0.0 {
            manifest.mixing_slope
        } else {
            MIXING_SLOPE
        },
        n_style: cfg.n_style,
        d_content: cfg.d_content,
    };
    let mut blocks = Vec::with_capacity(cfg.actions);
    for _ in 0..cfg.actions {
        let g = r.matrix(cfg.n_style, cfg.n_style)?;
        // Stored matrices were rounded to f32, which moves orthogonality
        // residuals past the fresh-sampling tolerances, so the element is
        // rebuilt without revalidation; the manifest vouches for it.
        let element = GroupElement {
            kind: cfg.group_kind(),
            matrix: g,
        };
        let latents = r.matrix(cfg.pairs_per_action, cfg.n_style)?;
        let content_ids = r.ints(cfg.pairs_per_action)?;
        if let Some(&bad) = content_ids
            .iter()
            .find(|&&id| id as usize >= cfg.codebook_size)
        {
            return Err(Error::Format(format!(
                "content id {} outside codebook of size {}",
                bad, cfg.codebook_size
            )));
        }
        let observations = r.matrix(cfg.pairs_per_action, cfg.obs_dim)?;
        let observations_transformed = r.matrix(cfg.pairs_per_action, cfg.obs_dim)?;
        blocks.push(ActionBlock {
            element,
            latents,
            content_ids,
            observations,
            observations_transformed,
            noise_sigma: cfg.noise_sigma,
        });
    }
    if r.offset != bytes.len() {
        return Err(Error::Format(format!(
            "tensor file has {} trailing bytes",
            bytes.len() - r.offset
        )));
    }
    Ok(SyntheticDataset {
        config: cfg,
        mixing,
        injectivity: manifest.injectivity,
        codebook,
        blocks,
        splits: manifest.splits,
    })
}
