//! Cross-adaptive attention blocks.
//!
//! The building block is single-head scaled dot-product attention. Two
//! residual wirings sit on top of it:
//!
//! - the self-residual block adds the (projected) queries back onto the
//!   attention output, then applies a ReLU feed-forward residual and an
//!   optional layer norm;
//! - the cross-residual block instead averages the attention scores over the
//!   query-side axis, forms an attention-pooled prototype from the values,
//!   and adds that prototype onto the (projected) keys. The adapted output
//!   therefore has the keys' shape, not the queries'.
//!
//! [`co_adapt`] applies the cross-residual block in both directions around
//! the support/query boundary of an episode through one shared parameter
//! set, with reduced modes for ablations. Support adaptation attends every
//! query against each class's supports; query adaptation attends each
//! class's supports against the queries, and the per-class score rows are
//! averaged over classes so queries stay label-agnostic (a per-class
//! alternative is available behind [`QueryAggregation::PerClass`]).
//!
//! All heavy math runs on a [`Tape`], so everything here is differentiable
//! end to end; `*_tensors` wrappers exist for callers that only want values.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Scalar, Tensor, LAYER_NORM_EPS};

// ── Parameters ──────────────────────────────────────────────────────────

/// Weights of one attention block: four m x m projections and the affine
/// layer-norm pair. One instance serves both adaptation directions.
#[derive(Debug, Clone, PartialEq)]
pub struct MabParameters<T = f64> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    /// Layer norm on the block output; ignored when `parametric` is false.
    pub use_norm: bool,
    /// When false the block is parameter-free: projections and the
    /// feed-forward map degenerate to the identity and the norm is skipped.
    pub parametric: bool,
}

impl<T: Scalar> MabParameters<T> {
    /// Parameter-free block (identity projections, no norm). Carries no
    /// trainable tensors.
    pub fn identity(m: usize) -> Self {
        let mut eye = vec![T::zero(); m * m];
        for i in 0..m {
            eye[i * m + i] = T::one();
        }
        let eye = Tensor::from_vec(vec![m, m], eye).unwrap();
        MabParameters {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            norm_gain: Tensor::full(&[m], T::one()),
            norm_bias: Tensor::zeros(&[m]),
            use_norm: false,
            parametric: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.norm_gain.shape()[0]
    }

    /// Trainable tensors: the four projections plus the norm affine when
    /// enabled, and nothing at all in the parameter-free configuration.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        if !self.parametric {
            return Vec::new();
        }
        let mut out = vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        if self.use_norm {
            out.push(&self.norm_gain);
            out.push(&self.norm_bias);
        }
        out
    }

    /// Names parallel to [`Self::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        if !self.parametric {
            return Vec::new();
        }
        let mut names = vec![
            "mab.w_q".to_string(),
            "mab.w_k".to_string(),
            "mab.w_v".to_string(),
            "mab.w_o".to_string(),
        ];
        if self.use_norm {
            names.push("mab.norm_gain".to_string());
            names.push("mab.norm_bias".to_string());
        }
        names
    }

    /// Total trainable scalar count; zero in the parameter-free form.
    pub fn trainable_len(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn set_trainable(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let expected = self.trainable().len();
        if tensors.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "attention block has {expected} trainable tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        if self.parametric {
            for slot in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
                let new = it.next().unwrap();
                if new.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set_trainable",
                        lhs: slot.shape().to_vec(),
                        rhs: new.shape().to_vec(),
                    });
                }
                *slot = new;
            }
            if self.use_norm {
                for slot in [&mut self.norm_gain, &mut self.norm_bias] {
                    let new = it.next().unwrap();
                    if new.shape() != slot.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "set_trainable",
                            lhs: slot.shape().to_vec(),
                            rhs: new.shape().to_vec(),
                        });
                    }
                    *slot = new;
                }
            }
        }
        Ok(())
    }

    /// Registers the block on a tape. The same handle set is reused for
    /// every direction, which is what makes the module shared.
    pub fn register(&self, tape: &mut Tape<T>) -> MabVars {
        if !self.parametric {
            return MabVars::Identity;
        }
        MabVars::Parametric {
            w_q: tape.input(&self.w_q),
            w_k: tape.input(&self.w_k),
            w_v: tape.input(&self.w_v),
            w_o: tape.input(&self.w_o),
            norm: self
                .use_norm
                .then(|| (tape.input(&self.norm_gain), tape.input(&self.norm_bias))),
        }
    }
}

/// Fresh trainable block: projections from a fan-in-scaled uniform, norm
/// gain at one and bias at zero. Deterministic in `seed`.
pub fn init_mab<T: Scalar>(m: usize, seed: u64) -> Result<MabParameters<T>> {
    if m == 0 {
        return Err(Error::InvalidArgument("embedding dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (m as f64).sqrt();
    let mut draw = |shape: &[usize]| -> Tensor<T> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    };
    Ok(MabParameters {
        w_q: draw(&[m, m]),
        w_k: draw(&[m, m]),
        w_v: draw(&[m, m]),
        w_o: draw(&[m, m]),
        norm_gain: Tensor::full(&[m], T::one()),
        norm_bias: Tensor::zeros(&[m]),
        use_norm: true,
        parametric: true,
    })
}

/// Tape handles for a registered block.
#[derive(Debug, Clone, Copy)]
pub enum MabVars {
    Parametric {
        w_q: Var,
        w_k: Var,
        w_v: Var,
        w_o: Var,
        norm: Option<(Var, Var)>,
    },
    Identity,
}

impl MabVars {
    /// Handles in [`MabParameters::trainable`] order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        match self {
            MabVars::Identity => Vec::new(),
            MabVars::Parametric {
                w_q,
                w_k,
                w_v,
                w_o,
                norm,
            } => {
                let mut vars = vec![*w_q, *w_k, *w_v, *w_o];
                if let Some((g, b)) = norm {
                    vars.push(*g);
                    vars.push(*b);
                }
                vars
            }
        }
    }
}

// ── Attention primitive ─────────────────────────────────────────────────

/// Scaled dot-product attention. `q` is [..., r, m], `k` and `v` are
/// [..., s, m] (batch axes broadcast). Returns the output [..., r, m] and
/// the score matrix [..., r, s]; score rows are a softmax, so each sums
/// to one.
pub fn attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let m = feature_dim(tape, q)?;
    if feature_dim(tape, k)? != m || feature_dim(tape, v)? != m {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: tape.value(q)?.shape().to_vec(),
            rhs: tape.value(k)?.shape().to_vec(),
        });
    }
    let kt = tape.transpose_last(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::one() / T::from_f64((m as f64).sqrt()))?;
    let axis = tape.value(scaled)?.rank() - 1;
    let scores = tape.softmax(scaled, axis)?;
    let out = tape.matmul(scores, v)?;
    Ok((out, scores))
}

/// Value-level [`attention_on`].
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let (vq, vk, vv) = (tape.input(q), tape.input(k), tape.input(v));
    let (out, scores) = attention_on(&mut tape, vq, vk, vv)?;
    Ok((tape.value(out)?.clone(), tape.value(scores)?.clone()))
}

fn feature_dim<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<usize> {
    let shape = tape.value(v)?.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeExpectation {
            op: "attention",
            expected: "rank >= 2".into(),
            got: shape.to_vec(),
        });
    }
    Ok(*shape.last().unwrap())
}

fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Option<Var>) -> Result<Var> {
    match w {
        Some(w) => tape.matmul(x, w),
        None => Ok(x),
    }
}

fn mab_weights(mab: &MabVars) -> (Option<Var>, Option<Var>, Option<Var>, Option<Var>, Option<(Var, Var)>) {
    match mab {
        MabVars::Identity => (None, None, None, None, None),
        MabVars::Parametric {
            w_q,
            w_k,
            w_v,
            w_o,
            norm,
        } => (Some(*w_q), Some(*w_k), Some(*w_v), Some(*w_o), *norm),
    }
}

/// Feed-forward residual and optional norm shared by both block variants:
/// `maybe_norm(x + relu(f_o(x)))`.
fn residual_stage<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w_o: Option<Var>,
    norm: Option<(Var, Var)>,
) -> Result<Var> {
    let f = project(tape, x, w_o)?;
    let r = tape.relu(f)?;
    let pre = tape.add(x, r)?;
    match norm {
        Some((gain, bias)) => tape.layer_norm(pre, gain, bias, T::from_f64(LAYER_NORM_EPS)),
        None => Ok(pre),
    }
}

/// Residual stage of the parameter-free mode: the rectifier and norm are
/// dropped, so the output is just `x + f_o(x)`, a plain doubling under
/// identity weights.
fn plain_residual_stage<T: Scalar>(tape: &mut Tape<T>, x: Var, w_o: Option<Var>) -> Result<Var> {
    let f = project(tape, x, w_o)?;
    tape.add(x, f)
}

// ── Self-residual block ─────────────────────────────────────────────────

/// Attention block with the query-side residual: the output keeps the
/// queries' shape. In the parameter-free degeneration with a single row v
/// this evaluates to `2v + relu(2v)`.
pub fn mab_original_on<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mab: &MabVars,
) -> Result<Var> {
    let (w_q, w_k, w_v, w_o, norm) = mab_weights(mab);
    let qp = project(tape, q, w_q)?;
    let kp = project(tape, k, w_k)?;
    let vp = project(tape, v, w_v)?;
    let (att, _) = attention_on(tape, qp, kp, vp)?;
    let phi_o = tape.add(att, qp)?;
    residual_stage(tape, phi_o, w_o, norm)
}

/// Value-level [`mab_original_on`].
pub fn mab_original<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    params: &MabParameters<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mab = params.register(&mut tape);
    let (vq, vk, vv) = (tape.input(q), tape.input(k), tape.input(v));
    let out = mab_original_on(&mut tape, vq, vk, vv, &mab)?;
    Ok(tape.value(out)?.clone())
}

// ── Cross-residual block ────────────────────────────────────────────────

/// Outputs of one cross-residual application, as tape handles.
pub struct CadVars {
    /// Adapted keys, same shape as K.
    pub adapted: Var,
    /// Attention-pooled prototype, key axis collapsed to 1.
    pub prototype: Var,
    /// Raw attention scores [..., r, s].
    pub raw_scores: Var,
    /// Scores after query-side averaging [..., 1, s].
    pub pooled_scores: Var,
}

/// Mean over `axis` that keeps the axis as extent 1, so downstream matmuls
/// see a row vector.
fn mean_keepdim<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let mut shape = tape.value(x)?.shape().to_vec();
    shape[axis] = 1;
    let reduced = tape.mean_axis(x, axis)?;
    tape.reshape(reduced, shape)
}

/// The cross-residual block on explicit operands: scores are averaged over
/// `pool_axes` in order, the pooled row weights the values into a
/// prototype, and the prototype is added back onto the (projected) keys
/// before the shared residual stage. K and V must be the same tensor.
fn cad_adapt<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mab: &MabVars,
    pool_axes: &[usize],
    plain: bool,
) -> Result<CadVars> {
    if k != v && tape.value(k)? != tape.value(v)? {
        return Err(Error::KeyValueMismatch);
    }
    let (w_q, w_k, w_v, w_o, norm) = mab_weights(mab);
    let qp = project(tape, q, w_q)?;
    let kp = project(tape, k, w_k)?;
    let vp = project(tape, v, w_v)?;
    let (_, raw_scores) = attention_on(tape, qp, kp, vp)?;
    let mut pooled = raw_scores;
    for &axis in pool_axes {
        pooled = mean_keepdim(tape, pooled, axis)?;
    }
    let prototype = tape.matmul(pooled, vp)?;
    let phi_hat = tape.add(kp, prototype)?;
    let adapted = if plain {
        plain_residual_stage(tape, phi_hat, w_o)?
    } else {
        residual_stage(tape, phi_hat, w_o, norm)?
    };
    Ok(CadVars {
        adapted,
        prototype,
        raw_scores,
        pooled_scores: pooled,
    })
}

/// Cross-residual block: adapts K = V toward the queries. `avg_axis` is the
/// query-side axis of the score matrix (rank - 2 for a plain [r, s] score).
/// Returns (adapted, prototype, raw scores, pooled scores).
pub fn mab_cad_on<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mab: &MabVars,
    avg_axis: usize,
) -> Result<CadVars> {
    let rank = tape.value(q)?.rank();
    if avg_axis + 1 >= rank {
        return Err(Error::AxisOutOfRange {
            op: "mab_cad",
            axis: avg_axis,
            rank,
        });
    }
    cad_adapt(tape, q, k, v, mab, &[avg_axis], false)
}

/// Value-level [`mab_cad_on`].
pub fn mab_cad<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    params: &MabParameters<T>,
    avg_axis: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let mab = params.register(&mut tape);
    let (vq, vk, vv) = (tape.input(q), tape.input(k), tape.input(v));
    let out = mab_cad_on(&mut tape, vq, vk, vv, &mab, avg_axis)?;
    Ok((
        tape.value(out.adapted)?.clone(),
        tape.value(out.prototype)?.clone(),
        tape.value(out.raw_scores)?.clone(),
        tape.value(out.pooled_scores)?.clone(),
    ))
}

// ── Episode-level co-adaptation ─────────────────────────────────────────

/// Which parts of the episode get adapted before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Both directions through the shared block.
    Full,
    /// Adapt supports toward the queries only.
    SupportOnly,
    /// Adapt queries toward the supports only.
    QueryOnly,
    /// Plain self-attention on each side; no cross-direction flow.
    SelfOnly,
    /// Identity: the episode passes through untouched.
    None,
    /// Both directions, parameter-free: identity projections and a doubled
    /// cross residual with no rectifier or norm.
    Nonparam,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 6] = [
        AdaptMode::Full,
        AdaptMode::SupportOnly,
        AdaptMode::QueryOnly,
        AdaptMode::SelfOnly,
        AdaptMode::None,
        AdaptMode::Nonparam,
    ];

    /// Whether the mode trains attention weights.
    pub fn is_parametric(self) -> bool {
        !matches!(self, AdaptMode::None | AdaptMode::Nonparam)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::Full => "full",
            AdaptMode::SupportOnly => "support_only",
            AdaptMode::QueryOnly => "query_only",
            AdaptMode::SelfOnly => "self_only",
            AdaptMode::None => "none",
            AdaptMode::Nonparam => "nonparam",
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// How query-side scores collapse across classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAggregation {
    /// Per-class score rows are averaged into one row; every query receives
    /// the same prototype and stays label-agnostic.
    #[default]
    MeanOverClasses,
    /// Keep one adapted query set per candidate class; classification then
    /// compares each class's adapted queries against that class's
    /// prototype.
    PerClass,
}

impl QueryAggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryAggregation::MeanOverClasses => "mean_over_classes",
            QueryAggregation::PerClass => "per_class",
        }
    }
}

impl std::fmt::Display for QueryAggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QueryAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_over_classes" => Ok(QueryAggregation::MeanOverClasses),
            "per_class" => Ok(QueryAggregation::PerClass),
            other => Err(Error::InvalidArgument(format!(
                "unknown query aggregation {other:?} (expected mean_over_classes or per_class)"
            ))),
        }
    }
}

/// Adapted query embeddings: one shared set, or one per candidate class.
pub enum QueryAdapted {
    /// [Q, m].
    Shared(Var),
    /// [n, Q, m].
    PerClass(Var),
}

/// Tape handles produced by [`co_adapt_on`]. Score fields are present only
/// for the modes that compute them.
pub struct AdaptationVars {
    /// [n, k, m].
    pub z_s_adapted: Var,
    pub z_q_adapted: QueryAdapted,
    /// [n, Q, k]: every query against each class's supports.
    pub scores_support: Option<Var>,
    /// [n, k, Q]: each class's supports against every query.
    pub scores_query: Option<Var>,
    /// [n, 1, k].
    pub pooled_support: Option<Var>,
    /// [1, 1, Q] (shared) or [n, 1, Q] (per class).
    pub pooled_query: Option<Var>,
    /// [n, 1, m].
    pub proto_support: Option<Var>,
    /// [1, 1, m] (shared) or [n, 1, m] (per class).
    pub proto_query: Option<Var>,
}

/// Adapts an episode's embeddings. `z_s` is [n, k, m], `z_q` is [Q, m].
/// Both directions read the original embeddings; nothing is chained.
pub fn co_adapt_on<T: Scalar>(
    tape: &mut Tape<T>,
    z_s: Var,
    z_q: Var,
    mab: &MabVars,
    mode: AdaptMode,
    aggregation: QueryAggregation,
) -> Result<AdaptationVars> {
    let s_shape = tape.value(z_s)?.shape().to_vec();
    let q_shape = tape.value(z_q)?.shape().to_vec();
    if s_shape.len() != 3 || q_shape.len() != 2 || s_shape[2] != q_shape[1] {
        return Err(Error::ShapeMismatch {
            op: "co_adapt",
            lhs: s_shape,
            rhs: q_shape,
        });
    }
    let (big_q, m) = (q_shape[0], q_shape[1]);
    if let MabVars::Parametric { w_q, .. } = mab {
        let pm = tape.value(*w_q)?.shape()[0];
        if pm != m {
            return Err(Error::ShapeMismatch {
                op: "co_adapt",
                lhs: vec![m],
                rhs: vec![pm],
            });
        }
    }
    match mode {
        AdaptMode::None => Ok(AdaptationVars {
            z_s_adapted: z_s,
            z_q_adapted: QueryAdapted::Shared(z_q),
            scores_support: None,
            scores_query: None,
            pooled_support: None,
            pooled_query: None,
            proto_support: None,
            proto_query: None,
        }),
        AdaptMode::SelfOnly => {
            // Each class's supports self-attend; queries self-attend as one
            // set. Same shared block, query-side residual.
            let zs_new = mab_original_on(tape, z_s, z_s, z_s, mab)?;
            let zq_new = mab_original_on(tape, z_q, z_q, z_q, mab)?;
            Ok(AdaptationVars {
                z_s_adapted: zs_new,
                z_q_adapted: QueryAdapted::Shared(zq_new),
                scores_support: None,
                scores_query: None,
                pooled_support: None,
                pooled_query: None,
                proto_support: None,
                proto_query: None,
            })
        }
        AdaptMode::Full | AdaptMode::SupportOnly | AdaptMode::QueryOnly | AdaptMode::Nonparam => {
            // The parameter-free mode strips the block down to the bare
            // cross residual: no projections, no rectifier, no norm.
            let plain = mode == AdaptMode::Nonparam;
            let mab = if plain { &MabVars::Identity } else { mab };
            let zq3 = tape.reshape(z_q, vec![1, big_q, m])?;

            let support_side = if mode != AdaptMode::QueryOnly {
                // Queries attend against each class's supports; scores
                // [n, Q, k] pool over the query axis.
                Some(cad_adapt(tape, zq3, z_s, z_s, mab, &[1], plain)?)
            } else {
                None
            };

            let query_side = if mode != AdaptMode::SupportOnly {
                // Supports attend against the queries; scores [n, k, Q]
                // pool over the shot axis, then (by default) over classes.
                let pool: &[usize] = match aggregation {
                    QueryAggregation::MeanOverClasses => &[1, 0],
                    QueryAggregation::PerClass => &[1],
                };
                Some(cad_adapt(tape, z_s, zq3, zq3, mab, pool, plain)?)
            } else {
                None
            };

            let z_s_adapted = support_side.as_ref().map_or(z_s, |c| c.adapted);
            let z_q_adapted = match &query_side {
                None => QueryAdapted::Shared(z_q),
                Some(c) => match aggregation {
                    QueryAggregation::MeanOverClasses => {
                        // [1, Q, m] back to [Q, m].
                        QueryAdapted::Shared(tape.reshape(c.adapted, vec![big_q, m])?)
                    }
                    QueryAggregation::PerClass => QueryAdapted::PerClass(c.adapted),
                },
            };
            Ok(AdaptationVars {
                z_s_adapted,
                z_q_adapted,
                scores_support: support_side.as_ref().map(|c| c.raw_scores),
                pooled_support: support_side.as_ref().map(|c| c.pooled_scores),
                proto_support: support_side.as_ref().map(|c| c.prototype),
                scores_query: query_side.as_ref().map(|c| c.raw_scores),
                pooled_query: query_side.as_ref().map(|c| c.pooled_scores),
                proto_query: query_side.as_ref().map(|c| c.prototype),
            })
        }
    }
}

/// Value-level adaptation output with the score tensors squeezed to their
/// documented shapes.
pub struct AdaptationResult<T = f64> {
    /// [n, k, m].
    pub z_s_adapted: Tensor<T>,
    /// [Q, m]; identical to the input in support-only and identity modes.
    pub z_q_adapted: Tensor<T>,
    /// [n, Q, m], only under [`QueryAggregation::PerClass`].
    pub z_q_adapted_per_class: Option<Tensor<T>>,
    /// [n, Q, k].
    pub scores_support: Option<Tensor<T>>,
    /// [n, k, Q].
    pub scores_query: Option<Tensor<T>>,
    /// [n, k]: support pooling weights, each row a convex combination.
    pub pooled_support: Option<Tensor<T>>,
    /// [Q] (shared) or [n, Q] (per class).
    pub pooled_query: Option<Tensor<T>>,
    /// [n, m]: one attention-pooled prototype per class.
    pub proto_support: Option<Tensor<T>>,
    /// [m] (shared) or [n, m] (per class).
    pub proto_query: Option<Tensor<T>>,
}

/// Runs [`co_adapt_on`] on a throwaway tape and extracts values.
pub fn co_adapt<T: Scalar>(
    z_s: &Tensor<T>,
    z_q: &Tensor<T>,
    params: &MabParameters<T>,
    mode: AdaptMode,
    aggregation: QueryAggregation,
) -> Result<AdaptationResult<T>> {
    let mut tape = Tape::new();
    let mab = params.register(&mut tape);
    let (vs, vq) = (tape.input(z_s), tape.input(z_q));
    let vars = co_adapt_on(&mut tape, vs, vq, &mab, mode, aggregation)?;

    let value = |v: Var| -> Result<Tensor<T>> { Ok(tape.value(v)?.clone()) };
    let squeeze_first_two = |t: Tensor<T>| -> Tensor<T> {
        // [a, 1, b] -> [a, b] and [1, 1, b] -> [b].
        let shape = t.shape().to_vec();
        let new = if shape[0] == 1 {
            vec![shape[2]]
        } else {
            vec![shape[0], shape[2]]
        };
        t.reshaped(new).expect("squeeze cannot change length")
    };

    let (z_q_adapted, z_q_adapted_per_class) = match vars.z_q_adapted {
        QueryAdapted::Shared(v) => (value(v)?, None),
        QueryAdapted::PerClass(v) => (z_q.clone(), Some(value(v)?)),
    };
    Ok(AdaptationResult {
        z_s_adapted: value(vars.z_s_adapted)?,
        z_q_adapted,
        z_q_adapted_per_class,
        scores_support: vars.scores_support.map(&value).transpose()?,
        scores_query: vars.scores_query.map(&value).transpose()?,
        pooled_support: vars
            .pooled_support
            .map(&value)
            .transpose()?
            .map(&squeeze_first_two),
        pooled_query: vars
            .pooled_query
            .map(&value)
            .transpose()?
            .map(&squeeze_first_two),
        proto_support: vars
            .proto_support
            .map(&value)
            .transpose()?
            .map(&squeeze_first_two),
        proto_query: vars
            .proto_query
            .map(&value)
            .transpose()?
            .map(&squeeze_first_two),
    })
}
