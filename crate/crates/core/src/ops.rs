//! The forgery-oriented operator space.
//!
//! Candidate operations are central difference convolutions in separable and
//! dilated form, plus the skip connection. Names follow
//! `<Family>_<k>x<k>_<theta>` (e.g. `SepCDC_3x3_0.5`) or a bare keyword.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm, DepthwiseCdc, FactorizedReduce, Mode, Pointwise};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SepCdc,
    DilCdc,
    Skip,
    PoolMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationKind {
    pub family: Family,
    pub kernel: usize,
    pub dilation: usize,
    pub theta: f64,
}

const SKIP_NAME: &str = "skip_connect";
const POOL_NAME: &str = "max_pool_3x3";

impl OperationKind {
    pub const SKIP: OperationKind = OperationKind { family: Family::Skip, kernel: 1, dilation: 1, theta: 0.0 };
    pub const MAX_POOL: OperationKind = OperationKind { family: Family::PoolMax, kernel: 3, dilation: 1, theta: 0.0 };

    pub fn sep_cdc(kernel: usize, theta: f64) -> Result<Self> {
        Self::conv(Family::SepCdc, kernel, 1, theta)
    }

    pub fn dil_cdc(kernel: usize, theta: f64) -> Result<Self> {
        Self::conv(Family::DilCdc, kernel, 2, theta)
    }

    fn conv(family: Family, kernel: usize, dilation: usize, theta: f64) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Parse { token: format!("{kernel}x{kernel}"), reason: "kernel size must be odd".into() });
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Parse { token: theta.to_string(), reason: "theta must lie in [0, 1]".into() });
        }
        Ok(OperationKind { family, kernel, dilation, theta })
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self.family, Family::SepCdc | Family::DilCdc)
    }

    /// Build the layer stack for `channels` channels at `stride`.
    pub fn instantiate(&self, channels: usize, stride: usize, affine: bool, store: &mut ParamStore, rng: &mut Rng) -> Result<LayerStack> {
        if channels == 0 {
            return Err(Error::invalid("operation needs at least one channel"));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("unsupported stride {stride}")));
        }
        let mut layers = Vec::new();
        match self.family {
            Family::SepCdc => {
                for s in [stride, 1] {
                    layers.push(Layer::Relu);
                    layers.push(Layer::Depthwise(DepthwiseCdc::new(channels, self.kernel, s, 1, self.theta, store, rng)));
                    layers.push(Layer::Pointwise(Pointwise::new(channels, channels, 1, store, rng)));
                    layers.push(Layer::BatchNorm(BatchNorm::new(channels, affine, store)));
                }
            }
            Family::DilCdc => {
                layers.push(Layer::Relu);
                layers.push(Layer::Depthwise(DepthwiseCdc::new(channels, self.kernel, stride, self.dilation, self.theta, store, rng)));
                layers.push(Layer::Pointwise(Pointwise::new(channels, channels, 1, store, rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(channels, affine, store)));
            }
            Family::Skip => {
                if stride == 2 {
                    layers.push(Layer::Reduce(FactorizedReduce::new(channels, channels, affine, store, rng)?));
                }
            }
            Family::PoolMax => {
                layers.push(Layer::MaxPool { stride });
                layers.push(Layer::BatchNorm(BatchNorm::new(channels, affine, store)));
            }
        }
        Ok(LayerStack { kind: *self, channels, stride, layers })
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.family {
            Family::Skip => return f.write_str(SKIP_NAME),
            Family::PoolMax => return f.write_str(POOL_NAME),
            Family::SepCdc => "SepCDC",
            Family::DilCdc => "DilCDC",
        };
        let mut theta = format!("{}", self.theta);
        if !theta.contains('.') {
            theta.push_str(".0");
        }
        write!(f, "{prefix}_{k}x{k}_{theta}", k = self.kernel)
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        parse_kind(name)
    }
}

/// Parse an operation name; `parse_kind(s)?.to_string() == s` for every accepted `s`.
pub fn parse_kind(name: &str) -> Result<OperationKind> {
    let bad = |token: &str, reason: &str| Error::Parse { token: token.into(), reason: reason.into() };
    match name {
        SKIP_NAME => return Ok(OperationKind::SKIP),
        POOL_NAME => return Ok(OperationKind::MAX_POOL),
        _ => {}
    }
    let mut parts = name.split('_');
    let (Some(family), Some(size), Some(theta), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad(name, "expected <Family>_<k>x<k>_<theta> or a keyword"));
    };
    let (k1, k2) = size.split_once('x').ok_or_else(|| bad(size, "kernel size must look like 3x3"))?;
    let k: usize = k1.parse().map_err(|_| bad(k1, "kernel size is not an integer"))?;
    let k_again: usize = k2.parse().map_err(|_| bad(k2, "kernel size is not an integer"))?;
    if k != k_again || k == 0 {
        return Err(bad(size, "kernel must be square and non-empty"));
    }
    let theta_value: f64 = theta.parse().map_err(|_| bad(theta, "theta is not a number"))?;
    let kind = match family {
        "SepCDC" => OperationKind::sep_cdc(k, theta_value)?,
        "DilCDC" => OperationKind::dil_cdc(k, theta_value)?,
        other => return Err(bad(other, "unknown operation family")),
    };
    if kind.to_string() != name {
        return Err(bad(theta, "non-canonical spelling"));
    }
    Ok(kind)
}

/// Ordered, duplicate-free list of candidate operations. Position indexes the
/// architecture logits of every edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorRegistry {
    ops: Vec<OperationKind>,
}

pub const DEFAULT_OPERATIONS: [&str; 9] = [
    "skip_connect",
    "SepCDC_3x3_0.0",
    "SepCDC_3x3_0.5",
    "SepCDC_3x3_0.7",
    "SepCDC_3x3_1.0",
    "SepCDC_5x5_0.7",
    "DilCDC_3x3_0.5",
    "DilCDC_3x3_0.7",
    "DilCDC_5x5_0.7",
];

impl Default for OperatorRegistry {
    fn default() -> Self {
        Self::from_names(DEFAULT_OPERATIONS).expect("default registry is valid")
    }
}

impl OperatorRegistry {
    pub fn new(ops: Vec<OperationKind>) -> Result<Self> {
        if ops.len() < 3 {
            return Err(Error::invalid(format!("registry needs at least 3 operations, got {}", ops.len())));
        }
        let names: Vec<String> = ops.iter().map(|o| o.name()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate operation `{n}`")));
            }
        }
        Ok(OperatorRegistry { ops })
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let ops = names.into_iter().map(|n| parse_kind(n.as_ref())).collect::<Result<Vec<_>>>()?;
        Self::new(ops)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[OperationKind] {
        &self.ops
    }

    pub fn get(&self, i: usize) -> OperationKind {
        self.ops[i]
    }

    pub fn names(&self) -> Vec<String> {
        self.ops.iter().map(|o| o.name()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.ops.iter().position(|o| o.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Relu,
    Depthwise(DepthwiseCdc),
    Pointwise(Pointwise),
    BatchNorm(BatchNorm),
    MaxPool { stride: usize },
    Reduce(FactorizedReduce),
}

/// Parameterized realization of one [`OperationKind`]; maps C channels to C channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub kind: OperationKind,
    pub channels: usize,
    pub stride: usize,
    layers: Vec<Layer>,
}

impl LayerStack {
    /// Run on `x`, whose channels are the `subset` of this stack's channels
    /// (all of them when `None`).
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, subset: Option<&[usize]>, mode: Mode) -> Result<Var> {
        self.forward_with(tape, store, x, None, subset, mode)
    }

    /// Like [`LayerStack::forward`]; `rectified`, when given, is `relu(x)` and
    /// replaces a leading relu so that stacks sharing an input compute it once.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rectified: Option<Var>,
        subset: Option<&[usize]>,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        let mut layers = self.layers.iter_mut().peekable();
        if let Some(r) = rectified {
            match layers.peek_mut() {
                Some(Layer::Relu) => {
                    layers.next();
                    h = r;
                }
                Some(Layer::Reduce(fr)) => {
                    h = fr.forward_rectified(tape, store, r, subset, mode)?;
                    layers.next();
                }
                _ => {}
            }
        }
        for layer in layers {
            h = match layer {
                Layer::Relu => tape.relu(h)?,
                Layer::Depthwise(dw) => dw.forward(tape, store, h, subset)?,
                Layer::Pointwise(pw) => pw.forward(tape, store, h, subset, subset)?,
                Layer::BatchNorm(bn) => bn.forward(tape, store, h, subset, mode)?,
                Layer::MaxPool { stride } => tape.max_pool(h, 3, *stride, 1)?,
                Layer::Reduce(fr) => fr.forward(tape, store, h, subset, mode)?,
            };
        }
        Ok(h)
    }

    /// Whether the stack starts by rectifying its input.
    pub fn starts_with_relu(&self) -> bool {
        matches!(self.layers.first(), Some(Layer::Relu | Layer::Reduce(_)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Depthwise(dw) => ids.push(dw.weight),
                Layer::Pointwise(pw) => ids.push(pw.weight),
                Layer::BatchNorm(bn) => ids.extend(bn.param_ids()),
                Layer::Reduce(fr) => ids.extend(fr.param_ids()),
                Layer::Relu | Layer::MaxPool { .. } => {}
            }
        }
        ids
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).numel()).sum()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// Names of all layers, for diagnostics.
pub fn describe(stack: &LayerStack) -> Vec<&'static str> {
    stack
        .layers
        .iter()
        .map(|l| match l {
            Layer::Relu => "relu",
            Layer::Depthwise(_) => "depthwise_cdc",
            Layer::Pointwise(_) => "pointwise",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Reduce(_) => "factorized_reduce",
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn parses_named_examples() {
        let k = parse_kind("SepCDC_3x3_0.5").unwrap();
        assert_eq!(k.family, Family::SepCdc);
        assert_eq!((k.kernel, k.dilation, k.theta), (3, 1, 0.5));
        assert_eq!(parse_kind("skip_connect").unwrap().family, Family::Skip);
        let d = parse_kind("DilCDC_5x5_0.7").unwrap();
        assert_eq!((d.family, d.kernel, d.dilation), (Family::DilCdc, 5, 2));
    }

    #[test]
    fn rejects_malformed_names() {
        let err = parse_kind("SepCDC_2x2_0.5").unwrap_err();
        assert!(matches!(err, Error::Parse { ref token, .. } if token == "2x2"), "{err:?}");
        assert!(parse_kind("SepCDC_3x5_0.5").is_err());
        assert!(parse_kind("SepCDC_3x3_1.5").is_err());
        assert!(parse_kind("SepCDC_3x3_0.50").is_err());
        assert!(parse_kind("Foo_3x3_0.5").is_err());
        assert!(parse_kind("SepCDC_3x3").is_err());
        assert!(parse_kind("").is_err());
    }

    #[test]
    fn default_registry_round_trips() {
        let reg = OperatorRegistry::default();
        assert_eq!(reg.len(), 9);
        for name in DEFAULT_OPERATIONS {
            assert_eq!(parse_kind(name).unwrap().to_string(), name);
        }
        assert_eq!(reg.position("SepCDC_3x3_0.7"), Some(3));
    }

    #[test]
    fn registry_invariants() {
        assert!(OperatorRegistry::from_names(["skip_connect", "SepCDC_3x3_0.5"]).is_err());
        assert!(OperatorRegistry::from_names(["skip_connect", "skip_connect", "SepCDC_3x3_0.5"]).is_err());
    }

    #[test]
    fn skip_stride_one_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1, 0);
        let mut stack = OperationKind::SKIP.instantiate(4, 1, false, &mut store, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[2, 4, 5, 5], |i| i as f64 * 0.1 - 3.0);
        let xv = tape.constant(x.clone());
        let y = stack.forward(&mut tape, &store, xv, None, Mode::Train).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn parameter_count_ignores_theta() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1, 0);
        let a = OperationKind::sep_cdc(3, 0.0).unwrap().instantiate(16, 1, true, &mut store, &mut r).unwrap();
        let b = OperationKind::sep_cdc(3, 0.7).unwrap().instantiate(16, 1, true, &mut store, &mut r).unwrap();
        assert_eq!(a.num_params(&store), b.num_params(&store));
        assert_eq!(a.num_params(&store), 2 * (16 * 9 + 16 * 16 + 32));
    }

    #[test]
    fn stack_layouts() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1, 0);
        let sep = OperationKind::sep_cdc(3, 0.5).unwrap().instantiate(4, 2, false, &mut store, &mut r).unwrap();
        assert_eq!(
            describe(&sep),
            vec!["relu", "depthwise_cdc", "pointwise", "batch_norm", "relu", "depthwise_cdc", "pointwise", "batch_norm"]
        );
        let skip2 = OperationKind::SKIP.instantiate(4, 2, false, &mut store, &mut r).unwrap();
        assert_eq!(describe(&skip2), vec!["factorized_reduce"]);
        assert!(OperationKind::SKIP.instantiate(4, 3, false, &mut store, &mut r).is_err());
    }
}
