//! DNN model graphs: layers in topological order, each classified as an
//! element-wise, block-wise, row-wise or global operator layer and split into
//! operators along its output partition axis.

mod random;
mod text;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::opset::RangeSet;
use crate::tensor::{self, Tensor, TensorSpec};

pub use random::{random_model, RandomModelConfig};
pub use text::{
    decode_bundle, encode_bundle, model_to_text, model_weights, parse_model, WeightSource,
};

/// Text of the bundled demo model, a VGG-style network on 3x512x512 input.
pub const DEMO_MODEL: &str = include_str!("../../assets/demo.hpm");

pub fn demo_model() -> ModelGraph {
    parse_model(DEMO_MODEL, WeightSource::Dir(std::path::Path::new(".")))
        .expect("bundled model is valid")
}

/// Producer of a tensor: the raw model input or a layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Input,
    Layer(usize),
}

impl Source {
    pub fn layer(self) -> Option<usize> {
        match self {
            Source::Input => None,
            Source::Layer(i) => Some(i),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Input => write!(f, "input"),
            Source::Layer(i) => write!(f, "{}", i),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Source::Input => s.serialize_str("input"),
            Source::Layer(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(i) => Ok(Source::Layer(i as usize)),
            Raw::Name(n) if n == "input" => Ok(Source::Input),
            Raw::Name(n) => Err(serde::de::Error::custom(format!("unknown source {:?}", n))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Silu,
}

/// Sliding-window parameters as (height, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Window {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Window {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    fn validate(&self) -> Result<()> {
        let pairs = [self.kernel, self.stride, self.dilation];
        if pairs.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Model(format!(
                "kernel/stride/dilation must be >= 1: {:?}",
                self
            )));
        }
        let ext_h = self.dilation.0 * (self.kernel.0 - 1);
        let ext_w = self.dilation.1 * (self.kernel.1 - 1);
        if self.padding.0 > ext_h || self.padding.1 > ext_w {
            return Err(Error::Model(format!(
                "padding {:?} exceeds dilated kernel extent ({}, {})",
                self.padding, ext_h, ext_w
            )));
        }
        Ok(())
    }

    /// Output length of one spatial axis, `None` when the window does not fit.
    pub fn out_len(input: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = input + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub window: Window,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out_channels, in_channels, kh, kw]` flattened.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Activation(Activation),
    Conv2d(Conv2d),
    MaxPool2d(Window),
    /// `input[R, K] x weight[K, N] (+ bias[N])`; without a weight the right-hand
    /// side is the second parent's output.
    MatMul {
        weight: Option<Tensor>,
        bias: Option<Tensor>,
    },
    /// Element-wise sum with a constant of the same shape, or with a second parent.
    Add {
        constant: Option<Tensor>,
    },
    /// Along the last axis.
    Softmax,
    /// Reshape to `[1, numel]`.
    Flatten,
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Activation(Activation::Relu) => "relu",
            LayerOp::Activation(Activation::Sigmoid) => "sigmoid",
            LayerOp::Activation(Activation::Silu) => "silu",
            LayerOp::Conv2d(_) => "conv2d",
            LayerOp::MaxPool2d(_) => "maxpool2d",
            LayerOp::MatMul { .. } => "matmul",
            LayerOp::Add { .. } => "add",
            LayerOp::Softmax => "softmax",
            LayerOp::Flatten => "flatten",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerOp::MatMul { weight: None, .. } | LayerOp::Add { constant: None } => 2,
            _ => 1,
        }
    }

    fn intrinsic_class(&self) -> OpClass {
        match self {
            LayerOp::Activation(_) => OpClass::ElementWise,
            LayerOp::Conv2d(_) | LayerOp::MaxPool2d(_) => OpClass::BlockWise,
            LayerOp::MatMul { .. } | LayerOp::Add { .. } => OpClass::RowWise,
            LayerOp::Softmax | LayerOp::Flatten => OpClass::Global,
        }
    }
}

/// Local/global operator taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    ElementWise,
    BlockWise,
    RowWise,
    Global,
}

impl OpClass {
    pub fn is_local(self) -> bool {
        self != OpClass::Global
    }
}

/// Unvalidated layer as written by a model author.
#[derive(Clone, Debug)]
pub struct LayerDef {
    pub name: String,
    pub op: LayerOp,
    pub parents: Vec<Source>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: usize,
    pub name: String,
    pub op: LayerOp,
    pub class: OpClass,
    pub parents: Vec<Source>,
    /// Shape of each parent's output, in `parents` order.
    pub input_specs: Vec<TensorSpec>,
    pub output_spec: TensorSpec,
    /// `|OP_i|`
    pub operator_count: usize,
    group: usize,
}

impl Layer {
    pub fn input_spec(&self) -> &TensorSpec {
        &self.input_specs[0]
    }

    pub fn is_global(&self) -> bool {
        self.class == OpClass::Global
    }

    /// Output partition-axis range covered by operator `j`.
    pub fn op_range(&self, j: usize) -> Range<usize> {
        op_range(
            self.output_spec.axis_len(),
            self.operator_count,
            self.group,
            j,
        )
    }

    /// Output axis index and the slice each operator covers.
    pub fn partition_axis(&self) -> Result<(usize, Vec<Range<usize>>)> {
        if self.is_global() {
            return Err(Error::Invalid(format!(
                "layer {} ({}) is global and has no partition axis",
                self.id,
                self.op.name()
            )));
        }
        let slices = (0..self.operator_count).map(|j| self.op_range(j)).collect();
        Ok((self.output_spec.partition_axis(), slices))
    }

    /// Estimated floating-point work for the whole layer.
    pub fn flops(&self) -> f64 {
        let out = self.output_spec.numel() as f64;
        match &self.op {
            LayerOp::Conv2d(c) => {
                out * (c.in_channels * c.window.kernel.0 * c.window.kernel.1) as f64 * 2.0
            }
            LayerOp::MaxPool2d(w) => out * (w.kernel.0 * w.kernel.1) as f64,
            LayerOp::MatMul { .. } => {
                let k = *self.input_spec().dims().last().unwrap_or(&1) as f64;
                out * k * 2.0
            }
            LayerOp::Activation(Activation::Relu) | LayerOp::Add { .. } => out,
            LayerOp::Activation(_) => out * 4.0,
            LayerOp::Softmax => out * 5.0,
            LayerOp::Flatten => out * 0.25,
        }
    }
}

fn op_range(axis_len: usize, count: usize, group: usize, j: usize) -> Range<usize> {
    if count == 1 {
        return 0..axis_len;
    }
    let start = j * group;
    start..(start + group).min(axis_len)
}

/// Immutable, validated model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    input_spec: TensorSpec,
    layers: Vec<Layer>,
    children: Vec<Vec<usize>>,
    input_children: Vec<usize>,
    group: usize,
    input_ops: usize,
}

impl ModelGraph {
    /// Validates shapes and topology and classifies every layer. `group` merges
    /// that many adjacent partition indices into one operator.
    pub fn new(
        name: &str,
        input_spec: TensorSpec,
        defs: Vec<LayerDef>,
        group: usize,
    ) -> Result<Self> {
        if group == 0 {
            return Err(Error::Invalid("operator group size must be >= 1".into()));
        }
        if input_spec.rank() > 3 {
            return Err(Error::Shape(format!(
                "model input must have rank 1..=3, got {}",
                input_spec
            )));
        }
        if defs.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        let mut layers: Vec<Layer> = Vec::with_capacity(defs.len());
        for (id, def) in defs.into_iter().enumerate() {
            if def.parents.len() != def.op.arity() {
                return Err(Error::Model(format!(
                    "layer {} ({}) expects {} input(s), got {}",
                    def.name,
                    def.op.name(),
                    def.op.arity(),
                    def.parents.len()
                )));
            }
            let mut input_specs = Vec::new();
            for p in &def.parents {
                match p {
                    Source::Input => input_specs.push(input_spec.clone()),
                    Source::Layer(pid) if *pid < id => {
                        input_specs.push(layers[*pid].output_spec.clone())
                    }
                    Source::Layer(pid) => {
                        return Err(Error::Model(format!(
                            "cyclic graph: layer {} ({}) consumes layer {} which is not earlier in topological order",
                            id, def.name, pid
                        )))
                    }
                }
            }
            let output_spec = infer_output(&def, &input_specs).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {} ({}): {}", id, def.name, m)),
                other => other,
            })?;
            if output_spec.rank() > 3 {
                return Err(Error::Shape(format!(
                    "layer {} ({}) output {} has rank > 3",
                    id, def.name, output_spec
                )));
            }
            let mut class = def.op.intrinsic_class();
            // a one-row matrix has nothing to split
            if class == OpClass::RowWise && input_specs[0].axis_len() == 1 {
                class = OpClass::Global;
            }
            let mut operator_count = 1;
            if class.is_local() {
                operator_count = output_spec.axis_len().div_ceil(group);
                if operator_count == 1 {
                    class = OpClass::Global;
                }
            }
            layers.push(Layer {
                id,
                name: def.name,
                op: def.op,
                class,
                parents: def.parents,
                input_specs,
                output_spec,
                operator_count,
                group,
            });
        }
        let mut children = vec![Vec::new(); layers.len()];
        let mut input_children = Vec::new();
        for l in &layers {
            for p in &l.parents {
                match p {
                    Source::Input => input_children.push(l.id),
                    Source::Layer(pid) => children[*pid].push(l.id),
                }
            }
        }
        for c in children.iter_mut() {
            c.dedup();
        }
        input_children.dedup();
        let last = layers.len() - 1;
        for (id, ch) in children.iter().enumerate() {
            if id != last && ch.is_empty() {
                return Err(Error::Model(format!(
                    "layer {} ({}) has no consumer; only the final layer may be a sink",
                    id, layers[id].name
                )));
            }
        }
        if input_children.is_empty() {
            return Err(Error::Model("no layer consumes the model input".into()));
        }
        let input_ops = input_spec.axis_len().div_ceil(group);
        Ok(ModelGraph {
            name: name.to_string(),
            input_spec,
            layers,
            children,
            input_children,
            group,
            input_ops,
        })
    }

    pub fn input_spec(&self) -> &TensorSpec {
        &self.input_spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> &Layer {
        &self.layers[id]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn final_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn output_spec(&self) -> &TensorSpec {
        &self.layers[self.final_layer()].output_spec
    }

    pub fn raw_input_bytes(&self) -> u64 {
        self.input_spec.bytes()
    }

    /// Consumers of a source, ascending.
    pub fn children(&self, src: Source) -> &[usize] {
        match src {
            Source::Input => &self.input_children,
            Source::Layer(i) => &self.children[i],
        }
    }

    pub fn spec_of(&self, src: Source) -> &TensorSpec {
        match src {
            Source::Input => &self.input_spec,
            Source::Layer(i) => &self.layers[i].output_spec,
        }
    }

    /// Operator count of a source. The raw input is sliced like a local layer.
    pub fn ops_of(&self, src: Source) -> usize {
        match src {
            Source::Input => self.input_ops,
            Source::Layer(i) => self.layers[i].operator_count,
        }
    }

    pub fn op_range(&self, src: Source, j: usize) -> Range<usize> {
        op_range(
            self.spec_of(src).axis_len(),
            self.ops_of(src),
            self.group,
            j,
        )
    }

    /// Partition-axis indices covered by a set of operators.
    pub fn ops_to_axis(&self, src: Source, ops: &RangeSet) -> RangeSet {
        let mut out = RangeSet::new();
        for r in ops.ranges() {
            if r.is_empty() {
                continue;
            }
            let a = self.op_range(src, r.start).start;
            let b = self.op_range(src, r.end - 1).end;
            out.insert(a..b);
        }
        out
    }

    /// Operators whose slice intersects the given axis indices.
    pub fn axis_to_ops(&self, src: Source, axis: &RangeSet) -> RangeSet {
        let count = self.ops_of(src);
        let mut out = RangeSet::new();
        for r in axis.ranges() {
            if r.is_empty() {
                continue;
            }
            if count == 1 {
                out.insert(0..1);
                continue;
            }
            let a = r.start / self.group;
            let b = (r.end - 1) / self.group + 1;
            out.insert(a..b.min(count));
        }
        out
    }

    /// Payload bytes of the given operators' outputs.
    pub fn ops_bytes(&self, src: Source, ops: &RangeSet) -> u64 {
        let rows = self.ops_to_axis(src, ops).len() as u64;
        rows * self.spec_of(src).row_elems() as u64 * 4
    }

    /// Runs the whole model on one device with the reference kernels.
    pub fn infer_local(&self, input: &Tensor) -> Result<Tensor> {
        if input.spec() != &self.input_spec {
            return Err(Error::Shape(format!(
                "model input is {}, got {}",
                self.input_spec,
                input.spec()
            )));
        }
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for layer in &self.layers {
            let inputs: Vec<&Tensor> = layer
                .parents
                .iter()
                .map(|p| match p {
                    Source::Input => input,
                    Source::Layer(i) => outputs[*i].as_ref().expect("topological order"),
                })
                .collect();
            for t in &inputs {
                if !t.all_finite() {
                    return Err(Error::NonFinite(layer.id));
                }
            }
            outputs[layer.id] = Some(tensor::run_layer_full(layer, &inputs)?);
            // free intermediates nobody else reads
            for p in &layer.parents {
                if let Source::Layer(pid) = p {
                    if self.children[*pid].iter().all(|&c| c <= layer.id) {
                        outputs[*pid] = None;
                    }
                }
            }
        }
        Ok(outputs.pop().flatten().expect("final layer output"))
    }
}

fn infer_output(def: &LayerDef, inputs: &[TensorSpec]) -> Result<TensorSpec> {
    let x = &inputs[0];
    match &def.op {
        LayerOp::Activation(_) | LayerOp::Softmax => Ok(x.clone()),
        LayerOp::Flatten => TensorSpec::new(vec![1, x.numel()]),
        LayerOp::Add { constant } => {
            let other = match constant {
                Some(c) => c.spec(),
                None => &inputs[1],
            };
            if other != x {
                return Err(Error::Shape(format!("add of {} and {}", x, other)));
            }
            Ok(x.clone())
        }
        LayerOp::Conv2d(c) => {
            c.window.validate()?;
            let (h, w) = spatial(x)?;
            if x.dims()[0] != c.in_channels {
                return Err(Error::Shape(format!(
                    "conv expects {} input channels, got {}",
                    c.in_channels,
                    x.dims()[0]
                )));
            }
            let (kh, kw) = c.window.kernel;
            let wdims = [c.out_channels, c.in_channels, kh, kw];
            if c.weight.dims() != wdims {
                return Err(Error::Shape(format!(
                    "conv weight {} should be {:?}",
                    c.weight.spec(),
                    wdims
                )));
            }
            if let Some(b) = &c.bias {
                if b.dims() != [c.out_channels] {
                    return Err(Error::Shape(format!("conv bias {}", b.spec())));
                }
            }
            let (ho, wo) = window_out(&c.window, h, w)?;
            TensorSpec::new(vec![c.out_channels, ho, wo])
        }
        LayerOp::MaxPool2d(win) => {
            win.validate()?;
            let (h, w) = spatial(x)?;
            let (ho, wo) = window_out(win, h, w)?;
            TensorSpec::new(vec![x.dims()[0], ho, wo])
        }
        LayerOp::MatMul { weight, bias } => {
            if x.rank() != 2 {
                return Err(Error::Shape(format!("matmul input must be 2-D, got {}", x)));
            }
            let k = x.dims()[1];
            let rhs = match weight {
                Some(w) => w.spec().clone(),
                None => inputs[1].clone(),
            };
            if rhs.rank() != 2 || rhs.dims()[0] != k {
                return Err(Error::Shape(format!("matmul {} x {}", x, rhs)));
            }
            let n = rhs.dims()[1];
            if let Some(b) = bias {
                if b.dims() != [n] {
                    return Err(Error::Shape(format!("matmul bias {}", b.spec())));
                }
            }
            TensorSpec::new(vec![x.dims()[0], n])
        }
    }
}

fn spatial(x: &TensorSpec) -> Result<(usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W] input, got {}", x)));
    }
    Ok((x.dims()[1], x.dims()[2]))
}

fn window_out(w: &Window, h: usize, wd: usize) -> Result<(usize, usize)> {
    let ho = Window::out_len(h, w.kernel.0, w.stride.0, w.padding.0, w.dilation.0);
    let wo = Window::out_len(wd, w.kernel.1, w.stride.1, w.padding.1, w.dilation.1);
    let (ho, wo) = match (ho, wo) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "window {:?} does not fit {}x{}",
                w, h, wd
            )))
        }
    };
    // every output position must read at least one real input element
    let blind = |out: usize, len: usize, k: usize, s: usize, p: usize, d: usize| {
        (0..out).any(|o| {
            (0..k).all(|t| {
                let pos = (o * s + t * d) as isize - p as isize;
                pos < 0 || pos as usize >= len
            })
        })
    };
    if blind(ho, h, w.kernel.0, w.stride.0, w.padding.0, w.dilation.0)
        || blind(wo, wd, w.kernel.1, w.stride.1, w.padding.1, w.dilation.1)
    {
        return Err(Error::Shape(format!(
            "window {:?} has outputs that see only padding on {}x{}",
            w, h, wd
        )));
    }
    Ok((ho, wo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(ic: usize, oc: usize, win: Window) -> LayerOp {
        let (kh, kw) = win.kernel;
        LayerOp::Conv2d(Conv2d {
            window: win,
            in_channels: ic,
            out_channels: oc,
            weight: Tensor::zeros(TensorSpec::new(vec![oc, ic, kh, kw]).unwrap()),
            bias: None,
        })
    }

    fn def(name: &str, op: LayerOp, parents: Vec<Source>) -> LayerDef {
        LayerDef {
            name: name.into(),
            op,
            parents,
        }
    }

    #[test]
    fn conv_relu_softmax_chain() {
        let g = ModelGraph::new(
            "t",
            TensorSpec::new(vec![1, 8, 8]).unwrap(),
            vec![
                def(
                    "c",
                    conv(1, 1, Window::square(3, 1, 1)),
                    vec![Source::Input],
                ),
                def(
                    "r",
                    LayerOp::Activation(Activation::Relu),
                    vec![Source::Layer(0)],
                ),
                def("s", LayerOp::Softmax, vec![Source::Layer(1)]),
            ],
            1,
        )
        .unwrap();
        let classes: Vec<_> = g.layers().iter().map(|l| l.class).collect();
        assert_eq!(
            classes,
            vec![OpClass::BlockWise, OpClass::ElementWise, OpClass::Global]
        );
        let counts: Vec<_> = g.layers().iter().map(|l| l.operator_count).collect();
        assert_eq!(counts, vec![8, 8, 1]);
    }

    #[test]
    fn single_row_matmul_is_global() {
        let w = Tensor::zeros(TensorSpec::new(vec![64, 10]).unwrap());
        let g = ModelGraph::new(
            "t",
            TensorSpec::new(vec![1, 64]).unwrap(),
            vec![def(
                "fc",
                LayerOp::MatMul {
                    weight: Some(w),
                    bias: None,
                },
                vec![Source::Input],
            )],
            1,
        )
        .unwrap();
        assert_eq!(g.layer(0).class, OpClass::Global);
        assert_eq!(g.layer(0).operator_count, 1);
    }

    #[test]
    fn strided_conv_shape() {
        let g = ModelGraph::new(
            "t",
            TensorSpec::new(vec![1, 8, 8]).unwrap(),
            vec![def(
                "c",
                conv(1, 2, Window::square(2, 2, 0)),
                vec![Source::Input],
            )],
            1,
        )
        .unwrap();
        assert_eq!(g.layer(0).output_spec.dims(), &[2, 4, 4]);
        assert_eq!(g.layer(0).operator_count, 4);
    }

    #[test]
    fn partition_axis_examples() {
        let g = ModelGraph::new(
            "t",
            TensorSpec::new(vec![1, 8, 8]).unwrap(),
            vec![
                def(
                    "r",
                    LayerOp::Activation(Activation::Relu),
                    vec![Source::Input],
                ),
                def(
                    "p",
                    LayerOp::MaxPool2d(Window::square(2, 2, 0)),
                    vec![Source::Layer(0)],
                ),
                def("f", LayerOp::Flatten, vec![Source::Layer(1)]),
            ],
            1,
        )
        .unwrap();
        let (axis, slices) = g.layer(0).partition_axis().unwrap();
        assert_eq!(axis, 1);
        assert_eq!(slices.len(), 8);
        assert!(slices.iter().all(|r| r.len() == 1));
        let (axis, slices) = g.layer(1).partition_axis().unwrap();
        assert_eq!((axis, slices.len()), (1, 4));
        assert!(g.layer(2).partition_axis().is_err());

        let w = Tensor::zeros(TensorSpec::new(vec![8, 32]).unwrap());
        let g = ModelGraph::new(
            "m",
            TensorSpec::new(vec![16, 8]).unwrap(),
            vec![def(
                "mm",
                LayerOp::MatMul {
                    weight: Some(w),
                    bias: None,
                },
                vec![Source::Input],
            )],
            1,
        )
        .unwrap();
        let (axis, slices) = g.layer(0).partition_axis().unwrap();
        assert_eq!((axis, slices.len()), (0, 16));
    }

    #[test]
    fn grouping_merges_rows() {
        let g = ModelGraph::new(
            "t",
            TensorSpec::new(vec![1, 10, 4]).unwrap(),
            vec![def(
                "r",
                LayerOp::Activation(Activation::Relu),
                vec![Source::Input],
            )],
            4,
        )
        .unwrap();
        let (_, slices) = g.layer(0).partition_axis().unwrap();
        assert_eq!(slices, vec![0..4, 4..8, 8..10]);
        assert_eq!(
            g.axis_to_ops(Source::Layer(0), &RangeSet::from_range(3..5)),
            RangeSet::from_range(0..2)
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = ModelGraph::new(
            "t",
            TensorSpec::new(vec![2, 8, 8]).unwrap(),
            vec![def(
                "c",
                conv(3, 1, Window::square(3, 1, 1)),
                vec![Source::Input],
            )],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn forward_reference_is_cycle() {
        let err = ModelGraph::new(
            "t",
            TensorSpec::new(vec![4, 4]).unwrap(),
            vec![
                def(
                    "a",
                    LayerOp::Activation(Activation::Relu),
                    vec![Source::Layer(1)],
                ),
                def(
                    "b",
                    LayerOp::Activation(Activation::Relu),
                    vec![Source::Layer(0)],
                ),
            ],
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("cyclic"), "{err}");
    }

    #[test]
    fn slices_partition_output() {
        for group in 1..5 {
            let g = ModelGraph::new(
                "t",
                TensorSpec::new(vec![2, 11, 3]).unwrap(),
                vec![def(
                    "r",
                    LayerOp::Activation(Activation::Silu),
                    vec![Source::Input],
                )],
                group,
            )
            .unwrap();
            let l = g.layer(0);
            let mut covered = RangeSet::new();
            let mut total = 0;
            for j in 0..l.operator_count {
                let r = l.op_range(j);
                total += r.len();
                covered.insert(r);
            }
            assert_eq!(total, 11);
            assert_eq!(covered, RangeSet::full(11));
        }
    }
}
