//! Local operator dependency analysis: which parent operators a set of
//! operators reads, and what has to cross the link as a consequence.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerOp, ModelGraph, OpClass, Source};
use crate::opset::RangeSet;

/// A set of operators of one layer (robot set, server set or a transfer set).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSet {
    pub layer: usize,
    pub ops: RangeSet,
}

impl OperatorSet {
    pub fn new(graph: &ModelGraph, layer: usize, ops: RangeSet) -> Result<Self> {
        let n = graph.layer(layer).operator_count;
        if ops.end().is_some_and(|e| e > n) {
            return Err(Error::Invalid(format!(
                "operators {} outside 0..{} of layer {}",
                ops, n, layer
            )));
        }
        Ok(OperatorSet { layer, ops })
    }
}

/// Partition-axis indices of each parent's output that a set of operators reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputRegion {
    pub parts: Vec<(Source, RangeSet)>,
}

impl InputRegion {
    pub fn of(&self, src: Source) -> Option<&RangeSet> {
        self.parts.iter().find(|(s, _)| *s == src).map(|(_, r)| r)
    }
}

/// Input rows each parent must supply so that output rows `out` can be
/// computed. Global layers read every parent in full. Block-wise layers read
/// the tightest row range containing every in-bounds kernel tap.
pub fn required_rows(layer: &Layer, out: Range<usize>) -> Result<Vec<Range<usize>>> {
    let whole = |i: usize| 0..layer.input_specs[i].axis_len();
    if out.is_empty() {
        return Ok(layer.parents.iter().map(|_| 0..0).collect());
    }
    if layer.class == OpClass::Global {
        return Ok((0..layer.parents.len()).map(whole).collect());
    }
    let rows = match &layer.op {
        LayerOp::Conv2d(c) => vec![window_rows(
            out,
            c.window.kernel.0,
            c.window.stride.0,
            c.window.padding.0,
            c.window.dilation.0,
            layer.input_specs[0].axis_len(),
        )],
        LayerOp::MaxPool2d(w) => vec![window_rows(
            out,
            w.kernel.0,
            w.stride.0,
            w.padding.0,
            w.dilation.0,
            layer.input_specs[0].axis_len(),
        )],
        LayerOp::MatMul { weight: None, .. } => vec![out, whole(1)],
        LayerOp::Add { constant: None } => vec![out.clone(), out],
        _ => vec![out],
    };
    Ok(rows)
}

fn window_rows(
    out: Range<usize>,
    k: usize,
    s: usize,
    p: usize,
    d: usize,
    len: usize,
) -> Range<usize> {
    let mut lo = usize::MAX;
    let mut hi = 0;
    for o in out {
        for t in 0..k {
            let pos = (o * s + t * d) as isize - p as isize;
            if pos >= 0 && (pos as usize) < len {
                lo = lo.min(pos as usize);
                hi = hi.max(pos as usize + 1);
            }
        }
    }
    if lo == usize::MAX {
        0..0
    } else {
        lo..hi
    }
}

/// Region of each parent that operators `ops` of a local layer depend on.
pub fn required_input(graph: &ModelGraph, layer: usize, ops: &RangeSet) -> Result<InputRegion> {
    let l = graph.layer(layer);
    if l.is_global() {
        return Err(Error::Invalid(format!(
            "layer {} is global; it reads its parents in full",
            layer
        )));
    }
    if ops.is_empty() {
        return Err(Error::Invalid(format!(
            "empty operator set for layer {}",
            layer
        )));
    }
    OperatorSet::new(graph, layer, ops.clone())?;
    Ok(region(graph, l, ops))
}

fn region(graph: &ModelGraph, l: &Layer, ops: &RangeSet) -> InputRegion {
    let mut parts: Vec<(Source, RangeSet)> =
        l.parents.iter().map(|p| (*p, RangeSet::new())).collect();
    for r in graph.ops_to_axis(Source::Layer(l.id), ops).ranges() {
        let rows = required_rows(l, r).expect("validated layer");
        for (part, need) in parts.iter_mut().zip(rows) {
            part.1.insert(need);
        }
    }
    InputRegion {
        parts: merge_same_source(parts),
    }
}

fn merge_same_source(parts: Vec<(Source, RangeSet)>) -> Vec<(Source, RangeSet)> {
    let mut out: Vec<(Source, RangeSet)> = Vec::new();
    for (s, r) in parts {
        match out.iter_mut().find(|(t, _)| *t == s) {
            Some((_, acc)) => acc.union_with(&r),
            None => out.push((s, r)),
        }
    }
    out
}

/// Parent operators whose outputs feed `ops` of `layer`, per distinct parent.
///
/// A layer listing the same parent twice (`add x x`) gets one entry.
pub fn parent_ops(graph: &ModelGraph, layer: usize, ops: &RangeSet) -> Vec<(Source, RangeSet)> {
    let l = graph.layer(layer);
    if ops.is_empty() {
        return merge_same_source(l.parents.iter().map(|p| (*p, RangeSet::new())).collect());
    }
    region(graph, l, ops)
        .parts
        .into_iter()
        .map(|(src, rows)| {
            let ops = graph.axis_to_ops(src, &rows);
            (src, ops)
        })
        .collect()
}

/// Operators crossing the link for one parent edge of a layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTransfer {
    pub source: Source,
    /// Server to robot (`M`).
    pub to_robot: RangeSet,
    /// Robot to server (`N`).
    pub to_server: RangeSet,
}

/// Transfer sets of layer `i` given every layer's robot and server operator
/// sets. The raw input lives on the robot.
pub fn transfer_sets(
    graph: &ModelGraph,
    i: usize,
    x: &[RangeSet],
    y: &[RangeSet],
) -> Result<Vec<EdgeTransfer>> {
    let full = RangeSet::full(graph.layer(i).operator_count);
    if x[i].union(&y[i]) != full {
        return Err(Error::Coverage {
            layer: i,
            msg: format!("robot {} and server {} do not cover {}", x[i], y[i], full),
        });
    }
    let need_r = parent_ops(graph, i, &x[i]);
    let need_s = parent_ops(graph, i, &y[i]);
    Ok(need_r
        .into_iter()
        .zip(need_s)
        .map(|((src, nr), (_, ns))| {
            let (held_r, held_s) = match src {
                Source::Input => (RangeSet::full(graph.ops_of(Source::Input)), RangeSet::new()),
                Source::Layer(p) => (x[p].clone(), y[p].clone()),
            };
            EdgeTransfer {
                source: src,
                to_robot: nr.difference(&held_r),
                to_server: ns.difference(&held_s),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Conv2d, LayerDef, Window};
    use crate::tensor::{run_layer_fragment, run_layer_full, Fragment, Tensor, TensorSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_op(ic: usize, oc: usize, win: Window, rng: &mut ChaCha8Rng) -> LayerOp {
        let (kh, kw) = win.kernel;
        let n = oc * ic * kh * kw;
        LayerOp::Conv2d(Conv2d {
            window: win,
            in_channels: ic,
            out_channels: oc,
            weight: Tensor::from_dims(
                &[oc, ic, kh, kw],
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            bias: Some(
                Tensor::from_dims(&[oc], (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            ),
        })
    }

    fn graph(input: &[usize], ops: Vec<(LayerOp, Vec<Source>)>) -> ModelGraph {
        let defs = ops
            .into_iter()
            .enumerate()
            .map(|(i, (op, parents))| LayerDef {
                name: format!("l{}", i),
                op,
                parents,
            })
            .collect();
        ModelGraph::new("t", TensorSpec::new(input.to_vec()).unwrap(), defs, 1).unwrap()
    }

    fn conv3(h: usize) -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        graph(
            &[1, h, h],
            vec![(
                conv_op(1, 1, Window::square(3, 1, 1), &mut rng),
                vec![Source::Input],
            )],
        )
    }

    fn random_tensor(spec: &TensorSpec, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            spec.clone(),
            (0..spec.numel())
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    /// Input rows whose perturbation changes output rows `out`.
    fn sensitive_rows(g: &ModelGraph, x: &Tensor, out: Range<usize>) -> Vec<usize> {
        let l = g.layer(0);
        let base = run_layer_full(l, &[x])
            .unwrap()
            .slice_axis(out.clone())
            .unwrap();
        let spec = x.spec();
        (0..spec.axis_len())
            .filter(|&r| {
                let mut y = x.clone();
                let (outer, inner, len) = (spec.outer(), spec.inner(), spec.axis_len());
                for o in 0..outer {
                    for i in 0..inner {
                        y.data_mut()[(o * len + r) * inner + i] += 1000.0;
                    }
                }
                let got = run_layer_full(l, &[&y])
                    .unwrap()
                    .slice_axis(out.clone())
                    .unwrap();
                !got.bit_eq(&base)
            })
            .collect()
    }

    #[test]
    fn relu_region_is_identity() {
        let g = graph(
            &[1, 8, 8],
            vec![(LayerOp::Activation(Activation::Relu), vec![Source::Input])],
        );
        let r = required_input(&g, 0, &RangeSet::from_range(2..5)).unwrap();
        assert_eq!(r.of(Source::Input).unwrap(), &RangeSet::from_range(2..5));
        let p = parent_ops(&g, 0, &RangeSet::from_range(3..4));
        assert_eq!(p, vec![(Source::Input, RangeSet::from_range(3..4))]);
    }

    #[test]
    fn conv_halo_rows() {
        let g = conv3(8);
        let r = required_input(&g, 0, &RangeSet::from_range(2..4)).unwrap();
        assert_eq!(r.of(Source::Input).unwrap(), &RangeSet::from_range(1..5));
        // oracle: perturbation sensitivity of the full run
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(g.input_spec(), &mut rng);
        assert_eq!(sensitive_rows(&g, &x, 2..4), vec![1, 2, 3, 4]);
        assert_eq!(sensitive_rows(&g, &x, 0..1), vec![0, 1]);
        assert_eq!(
            parent_ops(&g, 0, &RangeSet::from_range(0..1)),
            vec![(Source::Input, RangeSet::from_range(0..2))]
        );
    }

    #[test]
    fn matmul_rows_and_replicated_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_tensor(&TensorSpec::new(vec![8, 4]).unwrap(), &mut rng);
        let g = graph(
            &[16, 8],
            vec![(
                LayerOp::MatMul {
                    weight: Some(b),
                    bias: None,
                },
                vec![Source::Input],
            )],
        );
        let r = required_input(&g, 0, &RangeSet::from_range(0..4)).unwrap();
        assert_eq!(r.of(Source::Input).unwrap(), &RangeSet::from_range(0..4));
        let a = random_tensor(g.input_spec(), &mut rng);
        let full = run_layer_full(g.layer(0), &[&a]).unwrap();
        let frag = Fragment::new(Source::Input, 0..4, 16, a.slice_axis(0..4).unwrap()).unwrap();
        let out = run_layer_fragment(g.layer(0), &[frag], 0..4).unwrap();
        assert!(out.tensor.bit_eq(&full.slice_axis(0..4).unwrap()));
    }

    #[test]
    fn global_needs_everything() {
        let g = graph(
            &[1, 8, 8],
            vec![
                (LayerOp::Activation(Activation::Relu), vec![Source::Input]),
                (LayerOp::Softmax, vec![Source::Layer(0)]),
            ],
        );
        assert!(required_input(&g, 1, &RangeSet::from_range(0..1)).is_err());
        assert_eq!(
            parent_ops(&g, 1, &RangeSet::from_range(0..1)),
            vec![(Source::Layer(0), RangeSet::full(8))]
        );
    }

    #[test]
    fn transfer_set_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = graph(
            &[1, 8, 8],
            vec![
                (LayerOp::Activation(Activation::Relu), vec![Source::Input]),
                (
                    conv_op(1, 1, Window::square(3, 1, 1), &mut rng),
                    vec![Source::Layer(0)],
                ),
                (LayerOp::Flatten, vec![Source::Layer(1)]),
            ],
        );
        let all = RangeSet::full(8);
        let none = RangeSet::new();
        // fully local
        let x = vec![all.clone(), all.clone(), RangeSet::full(1)];
        let y = vec![none.clone(), none.clone(), none.clone()];
        let t = transfer_sets(&g, 1, &x, &y).unwrap();
        assert!(t[0].to_robot.is_empty() && t[0].to_server.is_empty());
        // halo row from the server
        let x = vec![
            RangeSet::from_range(0..4),
            RangeSet::from_range(0..4),
            none.clone(),
        ];
        let y = vec![
            RangeSet::from_range(4..8),
            RangeSet::from_range(4..8),
            RangeSet::full(1),
        ];
        let t = transfer_sets(&g, 1, &x, &y).unwrap();
        assert_eq!(t[0].to_robot, RangeSet::from_range(4..5));
        assert_eq!(t[0].to_server, RangeSet::from_range(3..4));
        // global on the server needs the robot's half
        let x = vec![
            RangeSet::from_range(0..4),
            RangeSet::from_range(0..4),
            none.clone(),
        ];
        let t = transfer_sets(&g, 2, &x, &y).unwrap();
        assert_eq!(t[0].to_server, RangeSet::from_range(0..4));
        assert!(t[0].to_robot.is_empty());
        // server share of the raw input must be shipped
        let t = transfer_sets(&g, 0, &x, &y).unwrap();
        assert_eq!(t[0].to_server, RangeSet::from_range(4..8));
        // coverage violation
        let bad = vec![
            RangeSet::from_range(0..3),
            RangeSet::from_range(0..4),
            none.clone(),
        ];
        assert!(matches!(
            transfer_sets(&g, 0, &bad, &y),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn self_add_has_one_parent_entry() {
        let g = graph(
            &[6, 3],
            vec![
                (LayerOp::Activation(Activation::Silu), vec![Source::Input]),
                (
                    LayerOp::Add { constant: None },
                    vec![Source::Layer(0), Source::Layer(0)],
                ),
            ],
        );
        assert_eq!(
            parent_ops(&g, 1, &RangeSet::from_range(1..3)),
            vec![(Source::Layer(0), RangeSet::from_range(1..3))]
        );
    }

    fn window_strategy(
    ) -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, bool, u64)> {
        // (h, k, s, p, d, w, pool, seed)
        (
            3usize..14,
            1usize..5,
            1usize..4,
            0usize..4,
            1usize..3,
            2usize..6,
            any::<bool>(),
            any::<u64>(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        /// Fragments built from exactly the required region reproduce the
        /// full run bit for bit, and trimming the region by one row on either
        /// side changes some output value.
        #[test]
        fn block_region_sound_and_minimal((h, k, s, p, d, w, pool, seed) in window_strategy(), a in 0usize..16, len in 1usize..6) {
            let p = p.min(d * (k - 1));
            let win = Window { kernel: (k, k), stride: (s, s), padding: (p, p), dilation: (d, d) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = if pool { LayerOp::MaxPool2d(win) } else { conv_op(2, 2, win, &mut rng) };
            let defs = vec![LayerDef { name: "b".into(), op, parents: vec![Source::Input] }];
            let g = match ModelGraph::new("t", TensorSpec::new(vec![2, h, w]).unwrap(), defs, 1) {
                Ok(g) => g,
                Err(_) => return Ok(()),
            };
            let l = g.layer(0);
            if l.is_global() {
                return Ok(());
            }
            let out_len = l.output_spec.axis_len();
            let a = a % out_len;
            let out = a..(a + len).min(out_len);
            let x = random_tensor(g.input_spec(), &mut rng);
            let need = required_rows(l, out.clone()).unwrap().remove(0);
            let sensitive = sensitive_rows(&g, &x, out.clone());
            prop_assert_eq!(need.clone(), sensitive[0]..sensitive[sensitive.len() - 1] + 1);

            let full = run_layer_full(l, &[&x]).unwrap();
            let frag = Fragment::new(Source::Input, need.clone(), h, x.slice_axis(need.clone()).unwrap()).unwrap();
            let got = run_layer_fragment(l, &[frag], out.clone()).unwrap();
            prop_assert!(got.tensor.bit_eq(&full.slice_axis(out.clone()).unwrap()));

            for shrunk in [need.start + 1..need.end, need.start..need.end - 1] {
                if shrunk.is_empty() { continue; }
                let frag = Fragment::new(Source::Input, shrunk.clone(), h, x.slice_axis(shrunk).unwrap()).unwrap();
                prop_assert!(run_layer_fragment(l, &[frag], out.clone()).is_err());
            }
        }

        #[test]
        fn region_matches_closed_form_without_dilation(h in 4usize..20, k in 1usize..5, s in 1usize..4, p in 0usize..3, a in 0usize..20, len in 1usize..5) {
            let p = p.min(k - 1);
            let Some(out_len) = Window::out_len(h, k, s, p, 1) else { return Ok(()) };
            let a = a % out_len;
            let b = (a + len).min(out_len);
            let got = window_rows(a..b, k, s, p, 1, h);
            let lo = (a * s) as isize - p as isize;
            let hi = ((b - 1) * s) as isize - p as isize + k as isize;
            prop_assert_eq!(got, lo.max(0) as usize..(hi.min(h as isize)) as usize);
        }
    }
}
