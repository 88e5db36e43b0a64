use std::fmt;
use std::str::FromStr;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelFamily {
    Dense,
    Conv,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Dense => "dense",
            ModelFamily::Conv => "conv",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(ModelFamily::Dense),
            "conv" => Ok(ModelFamily::Conv),
            other => Err(ModelError::Architecture(format!("unknown model family '{other}'"))),
        }
    }
}

/// Fully connected autoencoder: `depth` blocks of (dense `hidden` + BN +
/// ReLU) on each side of a linear `latent` bottleneck, and a linear output
/// layer back to `input_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseAeSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub latent: usize,
}

impl DenseAeSpec {
    /// 640 → 512×4 → 8 → 512×4 → 640.
    pub fn standard() -> Self {
        Self {
            input_dim: 640,
            hidden: 512,
            depth: 4,
            latent: 8,
        }
    }

    /// Widths of every dense layer's output, in order.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.hidden; self.depth];
        w.push(self.latent);
        w.extend(std::iter::repeat_n(self.hidden, self.depth));
        w.push(self.input_dim);
        w
    }
}

/// One encoder convolution; the decoder mirrors it with a transposed
/// convolution of the same kernel and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    /// (mel axis, time axis)
    pub stride: (usize, usize),
}

/// Convolutional autoencoder.
///
/// Encoder: same-padded conv + BN + ReLU per [`ConvLayerSpec`]. Bottleneck:
/// a valid conv with `latent` filters whose kernel spans the whole final
/// feature map, flattened to a `latent`-vector. Decoder: dense back to the
/// final encoder map + BN + ReLU, then transposed convolutions mirroring the
/// encoder (BN + ReLU on all but the last, which is linear).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvAeSpec {
    /// `[channels, mel, time]`
    pub input: [usize; 3],
    pub layers: Vec<ConvLayerSpec>,
    pub latent: usize,
}

impl ConvAeSpec {
    pub fn standard() -> Self {
        let layer = |filters, kernel, stride| ConvLayerSpec {
            filters,
            kernel,
            stride,
        };
        Self {
            input: [1, 128, 32],
            layers: vec![
                layer(32, 5, (2, 1)),
                layer(64, 5, (2, 1)),
                layer(128, 5, (2, 2)),
                layer(256, 3, (2, 2)),
                layer(512, 3, (2, 2)),
            ],
            latent: 40,
        }
    }

    /// Input shape followed by every encoder activation shape.
    pub fn encoder_chain(&self) -> Vec<[usize; 3]> {
        let mut chain = vec![self.input];
        for l in &self.layers {
            let [_, h, w] = *chain.last().expect("non-empty");
            chain.push([l.filters, h.div_ceil(l.stride.0), w.div_ceil(l.stride.1)]);
        }
        chain
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Dense(DenseAeSpec),
    Conv(ConvAeSpec),
}

impl Architecture {
    pub fn family(&self) -> ModelFamily {
        match self {
            Architecture::Dense(_) => ModelFamily::Dense,
            Architecture::Conv(_) => ModelFamily::Conv,
        }
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Dense(d) => vec![d.input_dim],
            Architecture::Conv(c) => c.input.to_vec(),
        }
    }

    /// Compact text form stored in checkpoints, e.g.
    /// `dense:640,512,4,8` or `conv:1x128x32;32/5/2x1,...;40`.
    pub fn descriptor(&self) -> String {
        match self {
            Architecture::Dense(d) => {
                format!("dense:{},{},{},{}", d.input_dim, d.hidden, d.depth, d.latent)
            }
            Architecture::Conv(c) => {
                let layers: Vec<String> = c
                    .layers
                    .iter()
                    .map(|l| format!("{}/{}/{}x{}", l.filters, l.kernel, l.stride.0, l.stride.1))
                    .collect();
                format!(
                    "conv:{}x{}x{};{};{}",
                    c.input[0],
                    c.input[1],
                    c.input[2],
                    layers.join(","),
                    c.latent
                )
            }
        }
    }

    pub fn parse_descriptor(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::Architecture(format!("bad architecture descriptor '{s}'"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let pair = |t: &str, sep: char| -> Result<(usize, usize), ModelError> {
            let (a, b) = t.split_once(sep).ok_or_else(bad)?;
            Ok((num(a)?, num(b)?))
        };
        let (kind, body) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "dense" => {
                let v: Vec<usize> = body.split(',').map(num).collect::<Result<_, _>>()?;
                let [input_dim, hidden, depth, latent] = v[..] else {
                    return Err(bad());
                };
                Ok(Architecture::Dense(DenseAeSpec {
                    input_dim,
                    hidden,
                    depth,
                    latent,
                }))
            }
            "conv" => {
                let parts: Vec<&str> = body.split(';').collect();
                let [input, layers, latent] = parts[..] else {
                    return Err(bad());
                };
                let dims: Vec<usize> = input.split('x').map(num).collect::<Result<_, _>>()?;
                let input: [usize; 3] = dims.try_into().map_err(|_| bad())?;
                let layers = layers
                    .split(',')
                    .filter(|l| !l.is_empty())
                    .map(|l| {
                        let f: Vec<&str> = l.split('/').collect();
                        let [filters, kernel, stride] = f[..] else {
                            return Err(bad());
                        };
                        Ok(ConvLayerSpec {
                            filters: num(filters)?,
                            kernel: num(kernel)?,
                            stride: pair(stride, 'x')?,
                        })
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                Ok(Architecture::Conv(ConvAeSpec {
                    input,
                    layers,
                    latent: num(latent)?,
                }))
            }
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_conv_chain() {
        assert_eq!(
            ConvAeSpec::standard().encoder_chain(),
            vec![[1, 128, 32], [32, 64, 32], [64, 32, 32], [128, 16, 16], [256, 8, 8], [512, 4, 4]]
        );
    }

    #[test]
    fn dense_widths() {
        assert_eq!(
            DenseAeSpec::standard().widths(),
            vec![512, 512, 512, 512, 8, 512, 512, 512, 512, 640]
        );
    }

    #[test]
    fn descriptors_round_trip() {
        for arch in [
            Architecture::Dense(DenseAeSpec::standard()),
            Architecture::Conv(ConvAeSpec::standard()),
        ] {
            assert_eq!(Architecture::parse_descriptor(&arch.descriptor()).unwrap(), arch);
        }
        assert_eq!(
            Architecture::Conv(ConvAeSpec::standard()).descriptor(),
            "conv:1x128x32;32/5/2x1,64/5/2x1,128/5/2x2,256/3/2x2,512/3/2x2;40"
        );
        assert!(Architecture::parse_descriptor("dense:1,2").is_err());
        assert!(Architecture::parse_descriptor("rnn:4").is_err());
    }
}
