//! Active weighted mapping unit: infers per-input weights for the merge
//! paths of a residual or dense block from their pooled channel
//! descriptors, and applies them.
//!
//! The inference chain is sigmoid(W2 relu(W1 z + b1) + b2) followed by a
//! per-row sum-to-one normalization of the sigmoid outputs. Gradients flow
//! through the whole expression, including the normalization denominator.

use std::cell::{Cell, RefCell};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Param, ParamGroup, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AwmMode {
    /// Weights inferred from the input; parameters receive gradients.
    Active,
    /// Weights still inferred from the input, but the optimizer must not
    /// update this unit's parameters.
    Frozen,
    /// Inference bypassed; every path gets weight 1/n exactly.
    FixedEqual,
}

/// Per-forward record of the weights one unit produced.
#[derive(Clone, Debug)]
pub struct LambdaRecord {
    /// Normalized weights, one row per batch image, one column per path.
    pub lambda: Tensor,
    /// Raw sigmoid outputs before normalization (absent in fixed_equal mode).
    pub raw: Option<Tensor>,
}

pub struct AwmUnit {
    n_paths: usize,
    channel_dims: Vec<usize>,
    reduction: usize,
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
    mode: Cell<AwmMode>,
    last: RefCell<Option<LambdaRecord>>,
}

/// He-normal (fan-in) initialization, shared with conv/FC layers.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

impl AwmUnit {
    /// `channel_dims` are the per-path channel counts C1..Cn; `reduction`
    /// is the hidden width e with 2 < e < sum(Ci).
    pub fn new(
        name: &str,
        channel_dims: &[usize],
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<AwmUnit> {
        let n_paths = channel_dims.len();
        if n_paths < 2 {
            return Err(Error::invalid(format!(
                "awm unit needs at least 2 paths, got {n_paths}"
            )));
        }
        let total: usize = channel_dims.iter().sum();
        if reduction <= 2 || reduction >= total {
            return Err(Error::invalid(format!(
                "awm reduction width {reduction} outside (2, {total})"
            )));
        }
        Ok(AwmUnit {
            n_paths,
            channel_dims: channel_dims.to_vec(),
            reduction,
            w1: Param::new(
                format!("{name}.w1"),
                ParamGroup::Awm,
                he_normal(rng, &[reduction, total], total),
            ),
            b1: Param::new(format!("{name}.b1"), ParamGroup::Awm, Tensor::zeros(&[reduction])),
            w2: Param::new(
                format!("{name}.w2"),
                ParamGroup::Awm,
                he_normal(rng, &[n_paths, reduction], reduction),
            ),
            b2: Param::new(format!("{name}.b2"), ParamGroup::Awm, Tensor::zeros(&[n_paths])),
            mode: Cell::new(AwmMode::Active),
            last: RefCell::new(None),
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn channel_dims(&self) -> &[usize] {
        &self.channel_dims
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn mode(&self) -> AwmMode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: AwmMode) {
        self.mode.set(mode);
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    /// Trainable parameter count: e*sum(C) + e + n*e + n.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Last weights inferred by any forward pass through this unit.
    pub fn last_lambda(&self) -> Option<LambdaRecord> {
        self.last.borrow().clone()
    }

    /// Pool each path to its channel descriptor and concatenate in path
    /// order: n tensors BxCixHxW -> Bx(sum Ci).
    pub fn embed_paths(&self, paths: &[Var]) -> Result<Var> {
        if paths.len() != self.n_paths {
            return Err(Error::invalid(format!(
                "expected {} paths, got {}",
                self.n_paths,
                paths.len()
            )));
        }
        let (b0, _, h0, w0) = paths[0].value().dims4("embed_paths")?;
        for (p, &c) in paths.iter().zip(&self.channel_dims) {
            let (pb, pc, ph, pw) = p.value().dims4("embed_paths")?;
            if pc != c {
                return Err(Error::shape("embed_paths channels", &[c], &[pc]));
            }
            if pb != b0 || ph != h0 || pw != w0 {
                return Err(Error::shape("embed_paths spatial", &[b0, c, h0, w0], p.shape()));
            }
        }
        let pooled: Vec<Var> = paths
            .iter()
            .map(ops::global_avg_pool)
            .collect::<Result<_>>()?;
        ops::concat_features(&pooled)
    }

    /// lambda = normalize(sigmoid(W2 relu(W1 z + b1) + b2)) per batch row.
    /// The result is recorded in `last_lambda`.
    pub fn infer_weights(&self, z: &Var) -> Result<Var> {
        if self.mode.get() == AwmMode::FixedEqual {
            return Err(Error::invalid("infer_weights called in fixed_equal mode"));
        }
        let total: usize = self.channel_dims.iter().sum();
        let (_, zw) = z.value().dims2("infer_weights")?;
        if zw != total {
            return Err(Error::shape("infer_weights input", &[0, total], z.shape()));
        }
        let h = ops::relu(&ops::fully_connected(z, &Var::param(&self.w1), &Var::param(&self.b1))?);
        let s = ops::sigmoid(&ops::fully_connected(&h, &Var::param(&self.w2), &Var::param(&self.b2))?);
        let lambda = ops::normalize_rows(&s)?;
        *self.last.borrow_mut() = Some(LambdaRecord {
            lambda: lambda.value().clone(),
            raw: Some(s.value().clone()),
        });
        Ok(lambda)
    }

    /// Weight vector for a batch under the current mode: either inferred
    /// from the paths' descriptors, or the constant 1/n in fixed_equal.
    pub fn weights_for(&self, paths: &[Var]) -> Result<Var> {
        let batch = paths
            .first()
            .ok_or_else(|| Error::invalid("weights_for: empty path list"))?
            .shape()[0];
        if self.mode.get() == AwmMode::FixedEqual {
            let lambda = Tensor::full(&[batch, self.n_paths], 1.0 / self.n_paths as f64);
            *self.last.borrow_mut() = Some(LambdaRecord { lambda: lambda.clone(), raw: None });
            return Ok(Var::leaf(lambda));
        }
        let z = self.embed_paths(paths)?;
        self.infer_weights(&z)
    }

    /// Merge a residual pair: lambda1 * f + lambda2 * x (n_paths == 2).
    pub fn merge_sum(&self, f: &Var, x: &Var) -> Result<Var> {
        if self.n_paths != 2 {
            return Err(Error::invalid("merge_sum requires a 2-path unit"));
        }
        let lambda = self.weights_for(&[f.clone(), x.clone()])?;
        ops::weighted_merge_sum(f, x, &lambda)
    }

    /// Merge dense-block bundles: concatenate lambda_i-scaled paths.
    pub fn merge_concat(&self, paths: &[Var]) -> Result<Var> {
        let lambda = self.weights_for(paths)?;
        ops::weighted_merge_concat(paths, &lambda)
    }
}
