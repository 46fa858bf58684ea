//! Prototype-based classification head.
//!
//! Class prototypes are mean support embeddings. A query is scored by the
//! softmax of its negated distances to the prototypes, and the episode loss
//! is the negative log likelihood of the true classes. Everything runs on a
//! [`Tape`] so the head is differentiable; pure wrappers evaluate values
//! only.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Scalar, Tensor};

/// Distance used between queries and prototypes. Squared Euclidean is the
/// default; plain Euclidean is its elementwise square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    SqEuclidean,
    Euclidean,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 2] = [DistanceKind::SqEuclidean, DistanceKind::Euclidean];

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::SqEuclidean => "sq_euclidean",
            DistanceKind::Euclidean => "euclidean",
        }
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceKind::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::UnknownDistance(s.to_string()))
    }
}

/// Class prototypes: mean over the shot axis. `z_s` is [n, k, m], the
/// result is [n, m].
pub fn prototypes_on<T: Scalar>(tape: &mut Tape<T>, z_s: Var) -> Result<Var> {
    let shape = tape.value(z_s)?.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeExpectation {
            op: "prototypes",
            expected: "[way, shot, dim]".into(),
            got: shape.to_vec(),
        });
    }
    tape.mean_axis(z_s, 1)
}

/// Class probabilities for shared queries. `queries` is [Q, m], `protos`
/// [n, m]; returns [Q, n] softmax rows over negated distances.
pub fn classify_on<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    protos: Var,
    distance: DistanceKind,
) -> Result<Var> {
    let mut d = tape.euclidean_sq(queries, protos)?;
    if distance == DistanceKind::Euclidean {
        d = tape.sqrt(d)?;
    }
    let logits = tape.scale(d, -T::one())?;
    tape.softmax(logits, 1)
}

/// Class probabilities when each candidate class has its own adapted query
/// set. `queries` is [n, Q, m] (row i holds the queries as adapted toward
/// class i), `protos` [n, m]; the class-i distance column reads block i
/// against prototype i. Returns [Q, n].
pub fn classify_per_class_on<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    protos: Var,
    distance: DistanceKind,
) -> Result<Var> {
    let q_shape = tape.value(queries)?.shape().to_vec();
    let p_shape = tape.value(protos)?.shape().to_vec();
    if q_shape.len() != 3 || p_shape.len() != 2 || q_shape[0] != p_shape[0] || q_shape[2] != p_shape[1]
    {
        return Err(Error::ShapeMismatch {
            op: "classify_per_class",
            lhs: q_shape,
            rhs: p_shape,
        });
    }
    let (n, m) = (p_shape[0], p_shape[1]);
    let protos3 = tape.reshape(protos, vec![n, 1, m])?;
    let neg = tape.scale(protos3, -T::one())?;
    let diff = tape.add(queries, neg)?;
    let sq = tape.mul(diff, diff)?;
    let mut d = tape.sum_axis(sq, 2)?;
    if distance == DistanceKind::Euclidean {
        d = tape.sqrt(d)?;
    }
    let by_query = tape.transpose_last(d)?;
    let logits = tape.scale(by_query, -T::one())?;
    tape.softmax(logits, 1)
}

/// Mean negative log likelihood of the true classes. `probs` is [Q, n].
pub fn episode_loss_on<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll_loss(probs, labels)
}

/// Value-level [`prototypes_on`].
pub fn prototypes<T: Scalar>(z_s: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.input(z_s);
    let p = prototypes_on(&mut tape, v)?;
    Ok(tape.value(p)?.clone())
}

/// Value-level [`classify_on`].
pub fn classify<T: Scalar>(
    queries: &Tensor<T>,
    protos: &Tensor<T>,
    distance: DistanceKind,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (q, p) = (tape.input(queries), tape.input(protos));
    let out = classify_on(&mut tape, q, p, distance)?;
    Ok(tape.value(out)?.clone())
}

/// Value-level [`episode_loss_on`].
pub fn episode_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.input(probs);
    let loss = episode_loss_on(&mut tape, p, labels)?;
    Ok(tape.value(loss)?.item()?.as_f64())
}

/// Fraction of queries whose most probable class is the true one. Ties
/// resolve to the lowest class index so the result is deterministic.
pub fn episode_accuracy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeExpectation {
            op: "episode_accuracy",
            expected: "[queries, way]".into(),
            got: shape.to_vec(),
        });
    }
    let (rows, way) = (shape[0], shape[1]);
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "episode_accuracy",
            lhs: vec![rows],
            rhs: vec![labels.len()],
        });
    }
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        if label >= way {
            return Err(Error::LabelOutOfRange { label, way });
        }
        let lane = &probs.data()[row * way..(row + 1) * way];
        let mut best = 0usize;
        for (i, v) in lane.iter().enumerate() {
            if *v > lane[best] {
                best = i;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}
