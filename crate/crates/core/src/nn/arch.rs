use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Normalization applied after each hidden linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    None,
    GroupNorm { groups: usize },
}

/// Shape of a feedforward classifier.
///
/// Each hidden layer is `linear -> [group norm] -> relu`; the output layer is
/// a plain linear map producing `num_classes` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub norm: Norm,
}

/// Offsets of one layer's tensors inside the flat parameter vector.
///
/// Canonical order per layer: weight (row-major, `out x in`), bias, then
/// norm scale and norm shift when the layer is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: usize,
    pub bias: usize,
    /// `(scale offset, shift offset, groups)` for normalized hidden layers.
    pub norm: Option<(usize, usize, usize)>,
    pub end: usize,
}

impl ArchDescriptor {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        norm: Norm,
    ) -> Result<Self> {
        let arch = ArchDescriptor {
            input_dim,
            hidden_dims,
            num_classes,
            norm,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArch(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::InvalidArch(format!("hidden layer {i} has width 0")));
        }
        if let Norm::GroupNorm { groups } = self.norm {
            if groups == 0 {
                return Err(Error::InvalidArch("group count must be positive".into()));
            }
            for (i, &h) in self.hidden_dims.iter().enumerate() {
                if h % groups != 0 {
                    return Err(Error::InvalidArch(format!(
                        "hidden layer {i} width {h} is not divisible by {groups} groups"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-layer offsets in canonical order; the last entry is the output layer.
    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut layers = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut offset = 0;
        let mut in_dim = self.input_dim;
        let widths = self
            .hidden_dims
            .iter()
            .map(|&h| (h, true))
            .chain(std::iter::once((self.num_classes, false)));
        for (out_dim, hidden) in widths {
            let weight = offset;
            let bias = weight + out_dim * in_dim;
            let mut end = bias + out_dim;
            let norm = match self.norm {
                Norm::GroupNorm { groups } if hidden => {
                    let scale = end;
                    end += 2 * out_dim;
                    Some((scale, scale + out_dim, groups))
                }
                _ => None,
            };
            layers.push(LayerLayout {
                in_dim,
                out_dim,
                weight,
                bias,
                norm,
                end,
            });
            offset = end;
            in_dim = out_dim;
        }
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |l| l.end)
    }
}
