//! Seeded generator of small, valid models for property tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, Conv2d, LayerDef, LayerOp, ModelGraph, Source, Window};
use crate::tensor::{Tensor, TensorSpec};

#[derive(Clone, Debug)]
pub struct RandomModelConfig {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_channels: usize,
    /// Upper bound on input height and width (or rows of a 2-D input).
    pub max_extent: usize,
    /// Allow `add` layers joining two earlier outputs.
    pub branches: bool,
    pub group: usize,
}

impl Default for RandomModelConfig {
    fn default() -> Self {
        RandomModelConfig {
            min_layers: 2,
            max_layers: 8,
            max_channels: 4,
            max_extent: 10,
            branches: true,
            group: 1,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n = dims.iter().product();
    Tensor::from_dims(dims, (0..n).map(|_| rng.gen_range(-b..=b)).collect()).expect("valid dims")
}

#[derive(Clone, Copy)]
enum Kind {
    Conv,
    Pool,
    Act,
    Add,
    Flatten,
    MatMul,
    Softmax,
}

/// A random model with between `min_layers` and `max_layers` layers.
///
/// Feature-map models mix conv, pooling, activations and residual adds and may
/// end in a flatten/matmul head; matrix models chain matmuls.
pub fn random_model(seed: u64, cfg: &RandomModelConfig) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.gen_range(cfg.min_layers.max(1)..=cfg.max_layers.max(cfg.min_layers.max(1)));
    let ext = cfg.max_extent.max(2);
    let input = if rng.gen_bool(0.75) {
        let c = rng.gen_range(1..=cfg.max_channels.max(1));
        TensorSpec::new(vec![c, rng.gen_range(2..=ext), rng.gen_range(2..=ext)]).unwrap()
    } else {
        TensorSpec::new(vec![rng.gen_range(2..=ext), rng.gen_range(1..=6)]).unwrap()
    };

    let mut defs: Vec<LayerDef> = Vec::new();
    let mut specs: Vec<(Source, TensorSpec)> = vec![(Source::Input, input.clone())];
    while defs.len() < n_layers {
        let (prev, x) = specs.last().cloned().unwrap();
        let remaining = n_layers - defs.len();
        let partners: Vec<Source> = specs[..specs.len() - 1]
            .iter()
            .filter(|(_, s)| *s == x)
            .map(|(src, _)| *src)
            .collect();
        let mut kinds = vec![Kind::Act];
        if x.rank() == 3 {
            kinds.extend([Kind::Conv, Kind::Conv, Kind::Pool]);
            if remaining <= 3 {
                kinds.push(Kind::Flatten);
            }
        } else {
            kinds.extend([Kind::MatMul, Kind::MatMul]);
            if remaining == 1 {
                kinds.push(Kind::Softmax);
            }
        }
        if cfg.branches && !partners.is_empty() {
            kinds.push(Kind::Add);
        }
        let kind = *kinds.choose(&mut rng).unwrap();
        let name = format!("l{}", defs.len());
        let (op, parents) = match kind {
            Kind::Act => {
                let a = *[Activation::Relu, Activation::Sigmoid, Activation::Silu]
                    .choose(&mut rng)
                    .unwrap();
                (LayerOp::Activation(a), vec![prev])
            }
            Kind::Conv | Kind::Pool => {
                let (h, w) = (x.dims()[1], x.dims()[2]);
                let k = *[1usize, 2, 3].choose(&mut rng).unwrap();
                let d = if k > 1 && rng.gen_bool(0.2) { 2 } else { 1 };
                let s = if rng.gen_bool(0.3) { 2 } else { 1 };
                let p = rng.gen_range(0..=d * (k - 1) / 2);
                let win = Window {
                    kernel: (k, k),
                    stride: (s, s),
                    padding: (p, p),
                    dilation: (d, d),
                };
                let fits = super::window_out(&win, h, w).is_ok();
                if !fits {
                    (LayerOp::Activation(Activation::Relu), vec![prev])
                } else if matches!(kind, Kind::Pool) {
                    (LayerOp::MaxPool2d(win), vec![prev])
                } else {
                    let ic = x.dims()[0];
                    let oc = rng.gen_range(1..=cfg.max_channels.max(1));
                    let fan = ic * k * k;
                    let conv = Conv2d {
                        window: win,
                        in_channels: ic,
                        out_channels: oc,
                        weight: uniform(&mut rng, &[oc, ic, k, k], fan),
                        bias: rng.gen_bool(0.7).then(|| uniform(&mut rng, &[oc], fan)),
                    };
                    (LayerOp::Conv2d(conv), vec![prev])
                }
            }
            Kind::Add => {
                let other = *partners.choose(&mut rng).unwrap();
                (LayerOp::Add { constant: None }, vec![prev, other])
            }
            Kind::Flatten => (LayerOp::Flatten, vec![prev]),
            Kind::MatMul => {
                let k = x.dims()[1];
                let n = rng.gen_range(1..=8);
                let op = LayerOp::MatMul {
                    weight: Some(uniform(&mut rng, &[k, n], k)),
                    bias: rng.gen_bool(0.5).then(|| uniform(&mut rng, &[n], k)),
                };
                (op, vec![prev])
            }
            Kind::Softmax => (LayerOp::Softmax, vec![prev]),
        };
        let def = LayerDef { name, op, parents };
        let spec = super::infer_output(&def, &parent_specs(&specs, &def.parents))
            .expect("generator only emits fitting layers");
        defs.push(def);
        specs.push((Source::Layer(defs.len() - 1), spec));
    }
    ModelGraph::new(&format!("random-{}", seed), input, defs, cfg.group.max(1))
        .expect("generator produces valid models")
}

fn parent_specs(specs: &[(Source, TensorSpec)], parents: &[Source]) -> Vec<TensorSpec> {
    parents
        .iter()
        .map(|p| {
            specs
                .iter()
                .find(|(s, _)| s == p)
                .map(|(_, t)| t.clone())
                .unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn many_seeds_are_valid_and_deterministic() {
        let cfg = RandomModelConfig::default();
        for seed in 0..200 {
            let g = random_model(seed, &cfg);
            assert!((2..=8).contains(&g.len()));
            assert_eq!(g, random_model(seed, &cfg));
        }
    }
}
