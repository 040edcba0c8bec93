//! Reference operator kernels.
//!
//! Every local operator is evaluated through one row-window routine that reads
//! its input through a view of a contiguous row range. A full-tensor run is
//! the special case where the view spans every row, so fragment results are
//! bit-identical to the matching slice of a full run: same loops, same
//! summation order (bias, then input channel, kernel row, kernel column).

use std::ops::Range;

use crate::error::{Error, Result};
use crate::lop;
use crate::model::{Activation, Conv2d, Layer, LayerOp, Source, Window};
use crate::tensor::{Fragment, Tensor, TensorSpec};

/// Input rows `[row0, row0 + rows)` of a tensor whose partition axis has
/// `full_len` entries.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f32],
    spec: &'a TensorSpec,
    row0: usize,
    rows: usize,
    full_len: usize,
}

impl<'a> View<'a> {
    fn whole(t: &'a Tensor) -> Self {
        let n = t.spec().axis_len();
        View {
            data: t.data(),
            spec: t.spec(),
            row0: 0,
            rows: n,
            full_len: n,
        }
    }

    fn of(f: &'a Fragment, full_len: usize) -> Self {
        View {
            data: f.tensor.data(),
            spec: f.tensor.spec(),
            row0: f.range.start,
            rows: f.len(),
            full_len,
        }
    }

    fn covers(&self, r: &Range<usize>) -> bool {
        r.is_empty() || (self.row0 <= r.start && r.end <= self.row0 + self.rows)
    }

    /// Element `(outer, row, inner)` with `row` in full-tensor coordinates.
    #[inline]
    fn at(&self, outer: usize, row: usize, inner: usize) -> f32 {
        let inner_n = self.spec.inner();
        self.data[(outer * self.rows + (row - self.row0)) * inner_n + inner]
    }
}

/// Runs a layer on whole input tensors.
pub fn run_layer_full(layer: &Layer, inputs: &[&Tensor]) -> Result<Tensor> {
    check_inputs(layer, inputs.iter().map(|t| t.spec()))?;
    match &layer.op {
        LayerOp::Softmax => Ok(softmax(inputs[0])),
        LayerOp::Flatten => Tensor::new(layer.output_spec.clone(), inputs[0].data().to_vec()),
        _ => {
            let views: Vec<View> = inputs.iter().map(|t| View::whole(t)).collect();
            rows(layer, &views, 0..layer.output_spec.axis_len())
        }
    }
}

/// Computes output rows `out` of a layer from partial inputs, one fragment
/// per parent. Global layers require whole-tensor fragments.
pub fn run_layer_fragment(
    layer: &Layer,
    inputs: &[Fragment],
    out: Range<usize>,
) -> Result<Fragment> {
    if inputs.len() != layer.input_specs.len() {
        return Err(Error::Shape(format!(
            "layer {} takes {} inputs, got {}",
            layer.id,
            layer.input_specs.len(),
            inputs.len()
        )));
    }
    for (f, want) in inputs.iter().zip(&layer.input_specs) {
        if f.tensor.spec().with_axis_len(want.axis_len()) != *want || f.range.end > want.axis_len()
        {
            return Err(Error::Shape(format!(
                "layer {} expects slices of {}, got {} at {:?}",
                layer.id,
                want,
                f.tensor.spec(),
                f.range
            )));
        }
    }
    let out_len = layer.output_spec.axis_len();
    if out.start >= out.end || out.end > out_len {
        return Err(Error::Fragment(format!(
            "layer {}: output range {:?} outside 0..{}",
            layer.id, out, out_len
        )));
    }
    if layer.is_global() {
        if inputs
            .iter()
            .zip(&layer.input_specs)
            .any(|(f, s)| f.range != (0..s.axis_len()))
        {
            return Err(Error::Fragment(format!(
                "layer {} is global and needs whole inputs",
                layer.id
            )));
        }
        let whole: Vec<&Tensor> = inputs.iter().map(|f| &f.tensor).collect();
        let t = run_layer_full(layer, &whole)?;
        let t = if out == (0..out_len) {
            t
        } else {
            t.slice_axis(out.clone())?
        };
        return Fragment::new(Source::Layer(layer.id), out, out_len, t);
    }
    let needed = lop::required_rows(layer, out.clone())?;
    let views: Vec<View> = inputs
        .iter()
        .zip(&layer.input_specs)
        .map(|(f, s)| View::of(f, s.axis_len()))
        .collect();
    for ((v, need), p) in views.iter().zip(&needed).zip(&layer.parents) {
        if !v.covers(need) {
            return Err(Error::Fragment(format!(
                "layer {}: input from {} covers rows {}..{}, needs {:?}",
                layer.id,
                p,
                v.row0,
                v.row0 + v.rows,
                need
            )));
        }
    }
    let t = rows(layer, &views, out.clone())?;
    Fragment::new(Source::Layer(layer.id), out, out_len, t)
}

fn check_inputs<'a>(layer: &Layer, specs: impl Iterator<Item = &'a TensorSpec>) -> Result<()> {
    let got: Vec<&TensorSpec> = specs.collect();
    if got.len() != layer.input_specs.len() {
        return Err(Error::Shape(format!(
            "layer {} takes {} inputs, got {}",
            layer.id,
            layer.input_specs.len(),
            got.len()
        )));
    }
    for (g, want) in got.iter().zip(&layer.input_specs) {
        if *g != want {
            return Err(Error::Shape(format!(
                "layer {} expects input {}, got {}",
                layer.id, want, g
            )));
        }
    }
    Ok(())
}

/// Output rows `out` of a local layer.
fn rows(layer: &Layer, inputs: &[View], out: Range<usize>) -> Result<Tensor> {
    let spec = layer.output_spec.with_axis_len(out.len());
    let data = match &layer.op {
        LayerOp::Activation(a) => map_rows(&inputs[0], &out, |v| activate(*a, v)),
        LayerOp::Add { constant } => match constant {
            Some(c) => zip_rows(&inputs[0], &View::whole(c), &out),
            None => zip_rows(&inputs[0], &inputs[1], &out),
        },
        LayerOp::Conv2d(c) => conv2d(&inputs[0], c, &layer.output_spec, &out),
        LayerOp::MaxPool2d(w) => maxpool2d(&inputs[0], w, &layer.output_spec, &out),
        LayerOp::MatMul { weight, bias } => {
            let rhs = match weight {
                Some(w) => View::whole(w),
                None => inputs[1],
            };
            if rhs.rows != rhs.full_len {
                return Err(Error::Fragment(format!(
                    "layer {}: matmul right-hand side must be whole",
                    layer.id
                )));
            }
            matmul(&inputs[0], &rhs, bias.as_ref(), &out)
        }
        LayerOp::Softmax | LayerOp::Flatten => {
            return Err(Error::Invalid(format!(
                "layer {} is not row-local",
                layer.id
            )))
        }
    };
    Tensor::new(spec, data)
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
fn activate(a: Activation, v: f32) -> f32 {
    match a {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Sigmoid => sigmoid(v),
        Activation::Silu => v * sigmoid(v),
    }
}

fn map_rows(x: &View, out: &Range<usize>, f: impl Fn(f32) -> f32) -> Vec<f32> {
    let (outer, inner) = (x.spec.outer(), x.spec.inner());
    let mut data = Vec::with_capacity(outer * out.len() * inner);
    for o in 0..outer {
        for r in out.clone() {
            for i in 0..inner {
                data.push(f(x.at(o, r, i)));
            }
        }
    }
    data
}

fn zip_rows(a: &View, b: &View, out: &Range<usize>) -> Vec<f32> {
    let (outer, inner) = (a.spec.outer(), a.spec.inner());
    let mut data = Vec::with_capacity(outer * out.len() * inner);
    for o in 0..outer {
        for r in out.clone() {
            for i in 0..inner {
                data.push(a.at(o, r, i) + b.at(o, r, i));
            }
        }
    }
    data
}

/// Input coordinate of kernel tap `k` for output coordinate `o`, if in bounds.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, dil: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k * dil) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

fn conv2d(x: &View, c: &Conv2d, out_spec: &TensorSpec, out: &Range<usize>) -> Vec<f32> {
    let w = &c.window;
    let (kh, kw) = w.kernel;
    let (in_h, in_w) = (x.full_len, x.spec.dims()[2]);
    let wo = out_spec.dims()[2];
    let weight = c.weight.data();
    let mut data = Vec::with_capacity(c.out_channels * out.len() * wo);
    for oc in 0..c.out_channels {
        let b = c.bias.as_ref().map_or(0.0, |b| b.data()[oc]);
        for r in out.clone() {
            for col in 0..wo {
                let mut acc = b;
                for ic in 0..c.in_channels {
                    for ky in 0..kh {
                        let Some(y) = tap(r, ky, w.stride.0, w.padding.0, w.dilation.0, in_h)
                        else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(xx) =
                                tap(col, kx, w.stride.1, w.padding.1, w.dilation.1, in_w)
                            else {
                                continue;
                            };
                            let wi = ((oc * c.in_channels + ic) * kh + ky) * kw + kx;
                            acc += weight[wi] * x.at(ic, y, xx);
                        }
                    }
                }
                data.push(acc);
            }
        }
    }
    data
}

fn maxpool2d(x: &View, w: &Window, out_spec: &TensorSpec, out: &Range<usize>) -> Vec<f32> {
    let (kh, kw) = w.kernel;
    let (ch, in_h, in_w) = (x.spec.dims()[0], x.full_len, x.spec.dims()[2]);
    let wo = out_spec.dims()[2];
    let mut data = Vec::with_capacity(ch * out.len() * wo);
    for c in 0..ch {
        for r in out.clone() {
            for col in 0..wo {
                let mut acc = f32::NEG_INFINITY;
                for ky in 0..kh {
                    let Some(y) = tap(r, ky, w.stride.0, w.padding.0, w.dilation.0, in_h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(xx) = tap(col, kx, w.stride.1, w.padding.1, w.dilation.1, in_w)
                        else {
                            continue;
                        };
                        let v = x.at(c, y, xx);
                        if v > acc {
                            acc = v;
                        }
                    }
                }
                data.push(acc);
            }
        }
    }
    data
}

fn matmul(a: &View, b: &View, bias: Option<&Tensor>, out: &Range<usize>) -> Vec<f32> {
    let k = a.spec.dims()[1];
    let n = b.spec.dims()[1];
    let bd = b.data;
    let mut data = Vec::with_capacity(out.len() * n);
    for r in out.clone() {
        for j in 0..n {
            let mut acc = bias.map_or(0.0, |t| t.data()[j]);
            for kk in 0..k {
                acc += a.at(0, r, kk) * bd[kk * n + j];
            }
            data.push(acc);
        }
    }
    data
}

fn softmax(x: &Tensor) -> Tensor {
    let last = *x.dims().last().unwrap_or(&1);
    let mut data = Vec::with_capacity(x.data().len());
    for row in x.data().chunks(last) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f32 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(x.spec().clone(), data).expect("same shape")
}

/// Assembles rows `needed` of one source's output from fragments.
///
/// Fragments may overlap where operators were computed on both endpoints;
/// overlapping rows must agree bit for bit.
pub fn combine(
    fragments: &[&Fragment],
    needed: Range<usize>,
    full: &TensorSpec,
) -> Result<Fragment> {
    let Some(first) = fragments.first() else {
        return Err(Error::Fragment(format!(
            "no fragments to cover {:?}",
            needed
        )));
    };
    let source = first.source;
    if needed.is_empty() || needed.end > full.axis_len() {
        return Err(Error::Fragment(format!("bad target range {:?}", needed)));
    }
    let (outer, inner) = (full.outer(), full.inner());
    let rows = needed.len();
    let mut data = vec![0f32; outer * rows * inner];
    let mut filled = vec![false; rows];
    for f in fragments {
        if f.source != source {
            return Err(Error::Fragment(format!(
                "mixing fragments of {} and {}",
                source, f.source
            )));
        }
        if f.tensor.spec().with_axis_len(full.axis_len()) != *full {
            return Err(Error::Shape(format!(
                "fragment {} does not belong to {}",
                f.tensor.spec(),
                full
            )));
        }
        let lo = f.range.start.max(needed.start);
        let hi = f.range.end.min(needed.end);
        for r in lo..hi {
            let dst_row = r - needed.start;
            let src_row = r - f.range.start;
            for o in 0..outer {
                let src = &f.tensor.data()[(o * f.len() + src_row) * inner..][..inner];
                let dst = &mut data[(o * rows + dst_row) * inner..][..inner];
                if filled[dst_row] {
                    if src
                        .iter()
                        .zip(dst.iter())
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                    {
                        return Err(Error::Fragment(format!(
                            "conflicting duplicate values for row {} of {}",
                            r, source
                        )));
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
            filled[dst_row] = true;
        }
    }
    if let Some(gap) = filled.iter().position(|f| !f) {
        return Err(Error::Fragment(format!(
            "gap in coverage of {}: row {} of {:?} missing",
            source,
            needed.start + gap,
            needed
        )));
    }
    let t = Tensor::new(full.with_axis_len(rows), data)?;
    Fragment::new(source, needed, full.axis_len(), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerDef, ModelGraph};

    fn one_layer(input: &[usize], op: LayerOp) -> ModelGraph {
        ModelGraph::new(
            "t",
            TensorSpec::new(input.to_vec()).unwrap(),
            vec![LayerDef {
                name: "l".into(),
                op,
                parents: vec![Source::Input],
            }],
            1,
        )
        .unwrap()
    }

    #[test]
    fn relu_values() {
        let g = one_layer(&[3], LayerOp::Activation(Activation::Relu));
        let x = Tensor::from_dims(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = run_layer_full(g.layer(0), &[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let g = one_layer(&[1, 2], LayerOp::Softmax);
        let x = Tensor::from_dims(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = run_layer_full(g.layer(0), &[&x]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn pointwise_conv_doubles() {
        let conv = Conv2d {
            window: Window::square(1, 1, 0),
            in_channels: 1,
            out_channels: 1,
            weight: Tensor::from_dims(&[1, 1, 1, 1], vec![2.0]).unwrap(),
            bias: None,
        };
        let g = one_layer(&[1, 2, 2], LayerOp::Conv2d(conv));
        let x = Tensor::from_dims(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let y = run_layer_full(g.layer(0), &[&x]).unwrap();
        assert_eq!(y.data(), &[2.0; 4]);
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let conv = Conv2d {
            window: Window::square(3, 1, 1),
            in_channels: 2,
            out_channels: 3,
            weight: Tensor::from_dims(&[3, 2, 3, 3], (0..54).map(|v| v as f32 - 20.0).collect())
                .unwrap(),
            bias: None,
        };
        let g = one_layer(&[2, 5, 5], LayerOp::Conv2d(conv));
        let y = run_layer_full(
            g.layer(0),
            &[&Tensor::zeros(TensorSpec::new(vec![2, 5, 5]).unwrap())],
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fragment_needs_halo() {
        let conv = Conv2d {
            window: Window::square(3, 1, 1),
            in_channels: 1,
            out_channels: 1,
            weight: Tensor::from_dims(&[1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            bias: None,
        };
        let g = one_layer(&[1, 8, 8], LayerOp::Conv2d(conv));
        let x = Tensor::from_dims(&[1, 8, 8], (0..64).map(|v| v as f32).collect()).unwrap();
        let full = run_layer_full(g.layer(0), &[&x]).unwrap();
        let frag = Fragment::new(Source::Input, 1..5, 8, x.slice_axis(1..5).unwrap()).unwrap();
        assert!(!frag.top_edge && !frag.bottom_edge);
        let out = run_layer_fragment(g.layer(0), std::slice::from_ref(&frag), 2..4).unwrap();
        assert!(out.tensor.bit_eq(&full.slice_axis(2..4).unwrap()));
        // rows [1,5) cannot produce output row 4
        assert!(run_layer_fragment(g.layer(0), &[frag], 2..5).is_err());
    }

    #[test]
    fn combine_halves_overlaps_and_gaps() {
        let spec = TensorSpec::new(vec![2, 8, 3]).unwrap();
        let x = Tensor::new(spec.clone(), (0..48).map(|v| v as f32).collect()).unwrap();
        let part = |r: Range<usize>| {
            Fragment::new(Source::Layer(0), r.clone(), 8, x.slice_axis(r).unwrap()).unwrap()
        };
        let (a, b) = (part(0..4), part(4..8));
        assert!(combine(&[&a, &b], 0..8, &spec).unwrap().tensor.bit_eq(&x));
        let (c, d) = (part(0..5), part(3..8));
        assert!(combine(&[&c, &d], 0..8, &spec).unwrap().tensor.bit_eq(&x));
        let e = part(0..3);
        assert!(
            matches!(combine(&[&e, &b], 0..8, &spec), Err(Error::Fragment(m)) if m.contains("gap"))
        );
        let mut bad = part(3..8);
        bad.tensor.data_mut()[0] += 1.0;
        assert!(
            matches!(combine(&[&c, &bad], 0..8, &spec), Err(Error::Fragment(m)) if m.contains("conflicting"))
        );
    }
}
