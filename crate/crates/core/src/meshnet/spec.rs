use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::KernelShape;

/// Dilation pattern of the seven hidden layers of the reference architecture.
pub const MESHNET_DILATIONS: [usize; 7] = [1, 1, 1, 2, 4, 8, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::Config(format!("unknown nonlinearity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filters: usize,
    /// Kernel half-extents; a 3³ kernel has `[1, 1, 1]`.
    pub half: [usize; 3],
    pub padding: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn kernel(&self) -> KernelShape {
        KernelShape {
            half: self.half,
            dilation: self.dilation,
            padding: self.padding,
        }
    }
}

/// Ordered layer descriptions of a shape-preserving dilated network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Hidden 3³ ReLU layers of `width` filters with the given dilations,
    /// followed by a 1³ softmax classifier.
    pub fn meshnet(
        input_channels: usize,
        classes: usize,
        width: usize,
        dilations: &[usize],
    ) -> Self {
        let mut layers: Vec<LayerSpec> = dilations
            .iter()
            .map(|&l| LayerSpec {
                filters: width,
                half: [1, 1, 1],
                padding: l,
                dilation: l,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec {
            filters: classes,
            half: [0, 0, 0],
            padding: 0,
            dilation: 1,
            activation: Activation::Softmax,
        });
        Self {
            input_channels,
            classes,
            layers,
        }
    }

    /// Seven hidden layers, dilations 1,1,1,2,4,8,1, 16 filters, 5 classes.
    pub fn meshnet_mini() -> Self {
        Self::meshnet(1, 5, 16, &MESHNET_DILATIONS)
    }

    /// The full-width reference network: 96 filters, 50 classes.
    pub fn meshnet_full() -> Self {
        Self::meshnet(1, 50, 96, &MESHNET_DILATIONS)
    }

    pub fn tiny(input_channels: usize, classes: usize, width: usize, dilations: &[usize]) -> Self {
        Self::meshnet(input_channels, classes, width, dilations)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 || self.classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        let Some(last) = self.layers.last() else {
            return bad("network has no layers".into());
        };
        if last.activation != Activation::Softmax
            || last.filters != self.classes
            || last.half != [0, 0, 0]
            || last.padding != 0
        {
            return bad(format!(
                "final layer must be a 1³ softmax with {} filters and no padding",
                self.classes
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.filters == 0 || l.dilation == 0 {
                return bad(format!("layer {i}: filters and dilation must be positive"));
            }
            if i + 1 < self.layers.len() && l.activation != Activation::Relu {
                return bad(format!("layer {i}: only the final layer may use softmax"));
            }
            if l.half.iter().any(|&a| l.padding != l.dilation * a) && l.half != [0, 0, 0] {
                return bad(format!(
                    "layer {i}: padding {} does not preserve shape for dilation {} and half-extents {:?}",
                    l.padding, l.dilation, l.half
                ));
            }
            if l.half == [0, 0, 0] && l.padding != 0 {
                return bad(format!("layer {i}: 1³ kernels take no padding"));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.layers[layer - 1].filters
        }
    }

    pub fn weight_shape(&self, layer: usize) -> Vec<usize> {
        let l = &self.layers[layer];
        let e = l.kernel().extent();
        vec![l.filters, self.in_channels(layer), e[0], e[1], e[2]]
    }

    /// `(name, shape)` for every parameter tensor, weight then bias per layer.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), self.weight_shape(i)));
            out.push((format!("layer{i}.bias"), vec![l.filters]));
        }
        out
    }

    pub fn num_weights(&self) -> usize {
        self.tensor_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Same-padding halo: how far a voxel's receptive field reaches.
    pub fn receptive_radius(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.dilation * l.half.iter().copied().max().unwrap_or(0))
            .sum()
    }

    pub fn to_metadata(&self) -> Vec<(String, String)> {
        let mut out = vec![
            (
                "spec.input_channels".to_string(),
                self.input_channels.to_string(),
            ),
            ("spec.classes".to_string(), self.classes.to_string()),
            ("spec.layers".to_string(), self.layers.len().to_string()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("spec.layer.{i}"),
                format!(
                    "{},{},{},{},{},{},{}",
                    l.filters, l.half[0], l.half[1], l.half[2], l.padding, l.dilation, l.activation
                ),
            ));
        }
        out
    }

    pub fn from_metadata(fields: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Metadata(format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| Error::Metadata(format!("`{k}`: {e}")))
        };
        let input_channels = num("spec.input_channels")?;
        let classes = num("spec.classes")?;
        let count = num("spec.layers")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let key = format!("spec.layer.{i}");
            let raw = get(&key)?;
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != 7 {
                return Err(Error::Metadata(format!(
                    "`{key}` has {} fields",
                    parts.len()
                )));
            }
            let n = |j: usize| -> Result<usize> {
                parts[j]
                    .parse()
                    .map_err(|e| Error::Metadata(format!("`{key}` field {j}: {e}")))
            };
            layers.push(LayerSpec {
                filters: n(0)?,
                half: [n(1)?, n(2)?, n(3)?],
                padding: n(4)?,
                dilation: n(5)?,
                activation: parts[6]
                    .parse()
                    .map_err(|e: Error| Error::Metadata(e.to_string()))?,
            });
        }
        let spec = Self {
            input_channels,
            classes,
            layers,
        };
        spec.validate()
            .map_err(|e| Error::Metadata(format!("invalid network spec: {e}")))?;
        Ok(spec)
    }
}
