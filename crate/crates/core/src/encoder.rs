//! Embedding networks.
//!
//! Two encoder families map raw items to m-dimensional embeddings: an MLP
//! for feature vectors (with an optional single hidden ReLU layer) and a
//! small conv stack for images (3x3 conv + ReLU + 2x2 average pool per
//! block, global average pooling at the end). Weights initialize from a
//! fan-in-scaled uniform; biases start at zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Scalar, Tensor};

/// Architecture description; serializable so checkpoints can rebuild the
/// network before loading weights.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp {
        input_dim: usize,
        /// `None` means a single linear layer.
        hidden: Option<usize>,
    },
    Conv {
        height: usize,
        width: usize,
        channels: usize,
        /// Output channels per conv block; 3 or 4 blocks.
        blocks: Vec<usize>,
    },
}

impl EncoderKind {
    /// Shape every input batch must have (without the leading batch axis).
    pub fn item_shape(&self) -> Vec<usize> {
        match self {
            EncoderKind::Mlp { input_dim, .. } => vec![*input_dim],
            EncoderKind::Conv {
                height,
                width,
                channels,
                ..
            } => vec![*height, *width, *channels],
        }
    }
}

/// One affine stage: a weight tensor and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters<T = f64> {
    kind: EncoderKind,
    layers: Vec<Layer<T>>,
    m: usize,
}

/// Expected (weight, bias) shapes for a given architecture and output dim.
fn layer_shapes(kind: &EncoderKind, m: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    match kind {
        EncoderKind::Mlp { input_dim, hidden } => {
            if *input_dim == 0 || m == 0 {
                return Err(Error::InvalidArgument(
                    "encoder dimensions must be positive".into(),
                ));
            }
            Ok(match hidden {
                None => vec![(vec![*input_dim, m], vec![m])],
                Some(h) => vec![
                    (vec![*input_dim, *h], vec![*h]),
                    (vec![*h, m], vec![m]),
                ],
            })
        }
        EncoderKind::Conv {
            height,
            width,
            channels,
            blocks,
        } => {
            if !(3..=4).contains(&blocks.len()) {
                return Err(Error::InvalidArgument(format!(
                    "conv encoder wants 3 or 4 blocks, got {}",
                    blocks.len()
                )));
            }
            let shrink = 1usize << blocks.len();
            if height % shrink != 0 || width % shrink != 0 || *channels == 0 {
                return Err(Error::InvalidArgument(format!(
                    "image extents {height}x{width}x{channels} must divide by 2^{} for pooling",
                    blocks.len()
                )));
            }
            if *blocks.last().unwrap() != m {
                return Err(Error::InvalidArgument(format!(
                    "last conv block has {} channels but the embedding dim is {m}",
                    blocks.last().unwrap()
                )));
            }
            let mut cin = *channels;
            let mut shapes = Vec::new();
            for &cout in blocks {
                if cout == 0 {
                    return Err(Error::InvalidArgument("conv block with 0 channels".into()));
                }
                shapes.push((vec![3, 3, cin, cout], vec![cout]));
                cin = cout;
            }
            Ok(shapes)
        }
    }
}

/// Fan-in of a weight tensor: rows for matrices, kernel volume for convs.
fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        4 => shape[0] * shape[1] * shape[2],
        _ => unreachable!("encoder weights are rank 2 or 4"),
    }
}

/// Fresh encoder with weights drawn uniformly from
/// +/- 1/sqrt(fan_in), deterministic in `seed`.
pub fn init_encoder<T: Scalar>(
    kind: EncoderKind,
    m: usize,
    seed: u64,
) -> Result<EncoderParameters<T>> {
    let shapes = layer_shapes(&kind, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(shapes.len());
    for (w_shape, b_shape) in shapes {
        let bound = 1.0 / (fan_in(&w_shape) as f64).sqrt();
        let len: usize = w_shape.iter().product();
        let data: Vec<T> = (0..len)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        layers.push(Layer {
            weight: Tensor::from_vec(w_shape, data)?,
            bias: Tensor::zeros(&b_shape),
        });
    }
    Ok(EncoderParameters { kind, layers, m })
}

impl<T: Scalar> EncoderParameters<T> {
    /// Single linear layer fixed to the identity: embeddings equal inputs.
    pub fn identity_mlp(dim: usize) -> Self {
        let mut eye = vec![T::zero(); dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = T::one();
        }
        EncoderParameters {
            kind: EncoderKind::Mlp {
                input_dim: dim,
                hidden: None,
            },
            layers: vec![Layer {
                weight: Tensor::from_vec(vec![dim, dim], eye).unwrap(),
                bias: Tensor::zeros(&[dim]),
            }],
            m: dim,
        }
    }

    /// Rebuilds parameters from flat tensors in [`Self::parameters`] order,
    /// validating shapes against the architecture.
    pub fn from_parameters(kind: EncoderKind, m: usize, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = layer_shapes(&kind, m)?;
        if tensors.len() != 2 * shapes.len() {
            return Err(Error::BadCheckpoint(format!(
                "encoder expects {} tensors, got {}",
                2 * shapes.len(),
                tensors.len()
            )));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        let mut it = tensors.into_iter();
        for (w_shape, b_shape) in shapes {
            let weight = it.next().unwrap();
            let bias = it.next().unwrap();
            if weight.shape() != w_shape.as_slice() || bias.shape() != b_shape.as_slice() {
                return Err(Error::BadCheckpoint(format!(
                    "encoder tensor shapes {:?}/{:?} do not match architecture {:?}/{:?}",
                    weight.shape(),
                    bias.shape(),
                    w_shape,
                    b_shape
                )));
            }
            layers.push(Layer { weight, bias });
        }
        Ok(EncoderParameters { kind, layers, m })
    }

    pub fn kind(&self) -> &EncoderKind {
        &self.kind
    }

    /// Embedding dimension m.
    pub fn output_dim(&self) -> usize {
        self.m
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Parameter tensors in a stable order: weight then bias per layer.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    /// Names parallel to [`Self::parameters`].
    pub fn parameter_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("encoder.{i}.weight"), format!("encoder.{i}.bias")])
            .collect()
    }

    /// Replaces all parameters; shapes must match the existing ones.
    pub fn set_parameters(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let current = self.parameters();
        if tensors.len() != current.len() {
            return Err(Error::InvalidArgument(format!(
                "encoder has {} parameters, got {}",
                current.len(),
                tensors.len()
            )));
        }
        for (new, old) in tensors.iter().zip(&current) {
            if new.shape() != old.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_parameters",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        for layer in self.layers.iter_mut() {
            layer.weight = it.next().unwrap();
            layer.bias = it.next().unwrap();
        }
        Ok(())
    }

    /// Registers all parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape<T>) -> EncoderVars {
        EncoderVars {
            kind: self.kind.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| (tape.input(&l.weight), tape.input(&l.bias)))
                .collect(),
        }
    }
}

/// Tape handles for a registered encoder.
pub struct EncoderVars {
    kind: EncoderKind,
    layers: Vec<(Var, Var)>,
}

impl EncoderVars {
    /// Parameter handles in [`EncoderParameters::parameters`] order.
    pub fn parameter_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Runs the encoder on a batch already on the tape. Accepts [B, D] for MLPs
/// and [B, H, W, C] for conv stacks; returns [B, m].
pub fn encode_on<T: Scalar>(tape: &mut Tape<T>, enc: &EncoderVars, batch: Var) -> Result<Var> {
    let got = tape.value(batch)?.shape().to_vec();
    let want = enc.kind.item_shape();
    if got.len() != want.len() + 1 || got[1..] != want[..] {
        return Err(Error::ShapeExpectation {
            op: "encode",
            expected: format!("[B{}]", want.iter().map(|d| format!(", {d}")).collect::<String>()),
            got,
        });
    }
    match enc.kind {
        EncoderKind::Mlp { .. } => {
            let mut x = batch;
            let last = enc.layers.len() - 1;
            for (i, &(w, b)) in enc.layers.iter().enumerate() {
                x = tape.matmul(x, w)?;
                x = tape.add(x, b)?;
                if i < last {
                    x = tape.relu(x)?;
                }
            }
            Ok(x)
        }
        EncoderKind::Conv { .. } => {
            let mut x = batch;
            for &(w, b) in &enc.layers {
                x = tape.conv2d_same(x, w)?;
                x = tape.add(x, b)?;
                x = tape.relu(x)?;
                x = tape.avg_pool2(x)?;
            }
            tape.global_avg_pool(x)
        }
    }
}

/// Convenience wrapper running [`encode_on`] on a throwaway tape.
pub fn encode<T: Scalar>(params: &EncoderParameters<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let enc = params.register(&mut tape);
    let b = tape.input(batch);
    let out = encode_on(&mut tape, &enc, b)?;
    Ok(tape.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mlp_passes_features_through() {
        let params = EncoderParameters::<f64>::identity_mlp(4);
        let batch = Tensor::from_rows(&[
            vec![0.5, -1.0, 2.0, 3.25],
            vec![7.0, 0.125, -9.5, 1.0],
        ])
        .unwrap();
        let out = encode(&params, &batch).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn mlp_batch_keeps_leading_axis() {
        let params = init_encoder::<f64>(
            EncoderKind::Mlp {
                input_dim: 16,
                hidden: Some(32),
            },
            64,
            9,
        )
        .unwrap();
        let batch = Tensor::zeros(&[80, 16]);
        let out = encode(&params, &batch).unwrap();
        assert_eq!(out.shape(), &[80, 64]);
    }

    #[test]
    fn init_is_seed_deterministic_and_fan_in_bounded() {
        let kind = EncoderKind::Mlp {
            input_dim: 9,
            hidden: Some(4),
        };
        let a = init_encoder::<f64>(kind.clone(), 6, 5).unwrap();
        let b = init_encoder::<f64>(kind.clone(), 6, 5).unwrap();
        let c = init_encoder::<f64>(kind, 6, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        // First layer fan-in 9: weights within +/- 1/3. Biases zero.
        for &w in a.layers()[0].weight.data() {
            assert!(w.abs() <= 1.0 / 3.0);
        }
        assert!(a.layers()[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_zero_image_embeds_to_zero() {
        let params = init_encoder::<f64>(
            EncoderKind::Conv {
                height: 16,
                width: 16,
                channels: 3,
                blocks: vec![4, 8, 6],
            },
            6,
            2,
        )
        .unwrap();
        let batch = Tensor::zeros(&[2, 16, 16, 3]);
        let out = encode(&params, &batch).unwrap();
        assert_eq!(out.shape(), &[2, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_mismatched_batches() {
        let params = EncoderParameters::<f64>::identity_mlp(4);
        let err = encode(&params, &Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(err.to_string().contains("[2, 5]"), "{err}");
    }

    #[test]
    fn conv_config_is_validated() {
        // Two blocks: too few.
        assert!(init_encoder::<f64>(
            EncoderKind::Conv { height: 16, width: 16, channels: 3, blocks: vec![4, 8] },
            8,
            0
        )
        .is_err());
        // 10 is not divisible by 2^3.
        assert!(init_encoder::<f64>(
            EncoderKind::Conv { height: 10, width: 16, channels: 3, blocks: vec![4, 8, 8] },
            8,
            0
        )
        .is_err());
        // Last block must equal m.
        assert!(init_encoder::<f64>(
            EncoderKind::Conv { height: 16, width: 16, channels: 3, blocks: vec![4, 8, 8] },
            16,
            0
        )
        .is_err());
    }

    #[test]
    fn parameter_round_trip_by_name() {
        let kind = EncoderKind::Mlp {
            input_dim: 3,
            hidden: Some(5),
        };
        let params = init_encoder::<f64>(kind.clone(), 2, 1).unwrap();
        let names = params.parameter_names();
        assert_eq!(
            names,
            vec![
                "encoder.0.weight",
                "encoder.0.bias",
                "encoder.1.weight",
                "encoder.1.bias"
            ]
        );
        let tensors: Vec<Tensor<f64>> = params.parameters().into_iter().cloned().collect();
        let rebuilt = EncoderParameters::from_parameters(kind, 2, tensors).unwrap();
        assert_eq!(params, rebuilt);
    }
}
