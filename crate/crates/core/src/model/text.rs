//! Line-oriented model description format.
//!
//! ```text
//! hpmodel 1
//! name demo
//! input 3 32 32
//! group 1
//! weights seed 42            # or: weights file w.bin  |  weights inline
//! layer conv0 conv2d in=input out=16 kernel=3 stride=1 padding=1
//! layer relu0 relu in=conv0
//! layer res add in=relu0,conv0
//! layer flat flatten in=res
//! layer fc matmul in=flat out=10
//! layer prob softmax in=fc
//! ```
//!
//! Parameters are stored in a blob under `<layer>.weight`, `<layer>.bias` and
//! `<layer>.const`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Activation, Conv2d, LayerDef, LayerOp, ModelGraph, Source, Window};
use crate::error::{Error, Result};
use crate::tensor::blob::Blob;
use crate::tensor::{Tensor, TensorSpec};

const HEADER: &str = "hpmodel 1";

/// Where layer parameters come from when parsing.
pub enum WeightSource<'a> {
    /// Resolve `weights file ...` relative to this directory.
    Dir(&'a Path),
    /// Parameters supplied by the caller (`weights inline`).
    Blob(&'a Blob),
}

enum WeightMode {
    Seed(u64),
    File(String),
    Inline,
}

struct Params<'a> {
    line: usize,
    kv: HashMap<&'a str, &'a str>,
}

impl<'a> Params<'a> {
    fn get(&self, k: &str) -> Option<&'a str> {
        self.kv.get(k).copied()
    }

    fn usize_or(&self, k: &str, default: Option<usize>) -> Result<usize> {
        match self.get(k) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::parse(self.line, format!("{}={} is not an integer", k, v))),
            None => default.ok_or_else(|| Error::parse(self.line, format!("missing {}=", k))),
        }
    }

    fn pair_or(&self, k: &str, default: Option<(usize, usize)>) -> Result<(usize, usize)> {
        let Some(v) = self.get(k) else {
            return default.ok_or_else(|| Error::parse(self.line, format!("missing {}=", k)));
        };
        let bad = || Error::parse(self.line, format!("{}={} is not N or NxM", k, v));
        match v.split_once('x') {
            Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
            None => {
                let n = v.parse().map_err(|_| bad())?;
                Ok((n, n))
            }
        }
    }

    fn bool_or(&self, k: &str, default: bool) -> Result<bool> {
        match self.get(k) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::parse(
                self.line,
                format!("{}={} is not a boolean", k, v),
            )),
        }
    }
}

/// What a layer needs from the weight store, resolved after shapes are known.
enum Pending {
    Conv {
        win: Window,
        ic: Option<usize>,
        oc: usize,
        bias: bool,
    },
    Pool(Window),
    Act(Activation),
    MatMul {
        out: Option<usize>,
        bias: bool,
    },
    Add {
        constant: bool,
    },
    Softmax,
    Flatten,
}

struct WeightStore<'a> {
    mode: WeightMode,
    blob: Option<Blob>,
    external: Option<&'a Blob>,
    rng: ChaCha8Rng,
}

impl WeightStore<'_> {
    fn fetch(&mut self, line: usize, name: &str, dims: &[usize], bound: f32) -> Result<Tensor> {
        let spec = TensorSpec::new(dims.to_vec())?;
        match self.mode {
            WeightMode::Seed(_) => {
                let data = (0..spec.numel())
                    .map(|_| self.rng.gen_range(-bound..=bound))
                    .collect();
                Tensor::new(spec, data)
            }
            WeightMode::File(_) | WeightMode::Inline => {
                let blob = self.external.or(self.blob.as_ref()).ok_or_else(|| {
                    Error::parse(line, "inline weights requested but no weight blob supplied")
                })?;
                let t = blob.get(name).ok_or_else(|| {
                    Error::parse(line, format!("weight '{}' missing from blob", name))
                })?;
                if t.spec() != &spec {
                    return Err(Error::Shape(format!(
                        "weight '{}' is {}, layer needs {}",
                        name,
                        t.spec(),
                        spec
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

/// Parses a model description and loads or synthesizes its parameters.
pub fn parse_model(text: &str, weights: WeightSource<'_>) -> Result<ModelGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        Some((n, h)) => {
            return Err(Error::parse(
                n,
                format!("expected '{}', got '{}'", HEADER, h),
            ))
        }
        None => return Err(Error::parse(1, "empty model description")),
    }

    let mut name = String::from("model");
    let mut input: Option<TensorSpec> = None;
    let mut group = 1usize;
    let mut mode: Option<WeightMode> = None;
    let mut layer_lines: Vec<(usize, &str)> = Vec::new();

    for (n, line) in lines {
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap_or("");
        let rest: Vec<&str> = toks.collect();
        match key {
            "name" => name = rest.join(" "),
            "input" => {
                let dims = rest
                    .iter()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| Error::parse(n, format!("bad dim '{}'", t)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                input = Some(TensorSpec::new(dims).map_err(|e| Error::parse(n, e.to_string()))?);
            }
            "group" => {
                group = rest
                    .first()
                    .and_then(|t| t.parse().ok())
                    .filter(|&g| g >= 1)
                    .ok_or_else(|| Error::parse(n, "group needs a positive integer"))?
            }
            "weights" => {
                mode = Some(match rest.as_slice() {
                    ["seed", s] => WeightMode::Seed(
                        s.parse()
                            .map_err(|_| Error::parse(n, "weights seed needs an integer"))?,
                    ),
                    ["file", f] => WeightMode::File(f.to_string()),
                    ["inline"] => WeightMode::Inline,
                    _ => {
                        return Err(Error::parse(
                            n,
                            "expected 'weights seed N', 'weights file F' or 'weights inline'",
                        ))
                    }
                })
            }
            "layer" => layer_lines.push((n, line)),
            other => return Err(Error::parse(n, format!("unknown directive '{}'", other))),
        }
    }
    let input = input.ok_or_else(|| Error::parse(1, "missing 'input' directive"))?;
    let mode = mode.unwrap_or(WeightMode::Seed(0));

    let mut ids: HashMap<&str, usize> = HashMap::new();
    for (idx, (n, line)) in layer_lines.iter().enumerate() {
        let lname = line
            .split_whitespace()
            .nth(1)
            .ok_or_else(|| Error::parse(*n, "layer needs a name"))?;
        if lname == "input" || ids.insert(lname, idx).is_some() {
            return Err(Error::parse(
                *n,
                format!("duplicate or reserved layer name '{}'", lname),
            ));
        }
    }

    let (blob, external) = match (&mode, &weights) {
        (WeightMode::File(f), WeightSource::Dir(dir)) => (Some(Blob::read(&dir.join(f))?), None),
        (WeightMode::File(_), WeightSource::Blob(b))
        | (WeightMode::Inline, WeightSource::Blob(b)) => (None, Some(*b)),
        _ => (None, None),
    };
    let seed = if let WeightMode::Seed(s) = mode { s } else { 0 };
    let mut store = WeightStore {
        mode,
        blob,
        external,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    // shapes are needed to size parameters, so build incrementally
    let mut defs: Vec<LayerDef> = Vec::new();
    let mut out_specs: Vec<TensorSpec> = Vec::new();
    for (idx, (n, line)) in layer_lines.iter().enumerate() {
        let n = *n;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::parse(n, "expected: layer NAME OP in=PARENT ..."));
        }
        let lname = toks[1];
        let mut kv = HashMap::new();
        for t in &toks[3..] {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::parse(n, format!("expected key=value, got '{}'", t)))?;
            kv.insert(k, v);
        }
        let p = Params { line: n, kv };
        let parents = p
            .get("in")
            .ok_or_else(|| Error::parse(n, "missing in="))?
            .split(',')
            .map(|r| match r {
                "input" => Ok(Source::Input),
                other => match ids.get(other) {
                    Some(&pid) if pid < idx => Ok(Source::Layer(pid)),
                    Some(_) => Err(Error::Model(format!(
                        "cyclic graph: layer '{}' (line {}) consumes later layer '{}'",
                        lname, n, other
                    ))),
                    None => Err(Error::parse(n, format!("unknown parent '{}'", other))),
                },
            })
            .collect::<Result<Vec<_>>>()?;
        let pending = match toks[2] {
            "relu" => Pending::Act(Activation::Relu),
            "sigmoid" => Pending::Act(Activation::Sigmoid),
            "silu" => Pending::Act(Activation::Silu),
            "softmax" => Pending::Softmax,
            "flatten" => Pending::Flatten,
            "conv2d" => Pending::Conv {
                win: Window {
                    kernel: p.pair_or("kernel", None)?,
                    stride: p.pair_or("stride", Some((1, 1)))?,
                    padding: p.pair_or("padding", Some((0, 0)))?,
                    dilation: p.pair_or("dilation", Some((1, 1)))?,
                },
                ic: p
                    .get("in_channels")
                    .map(|_| p.usize_or("in_channels", None))
                    .transpose()?,
                oc: p.usize_or("out", None)?,
                bias: p.bool_or("bias", true)?,
            },
            "maxpool2d" => {
                let kernel = p.pair_or("kernel", None)?;
                Pending::Pool(Window {
                    kernel,
                    stride: p.pair_or("stride", Some(kernel))?,
                    padding: p.pair_or("padding", Some((0, 0)))?,
                    dilation: p.pair_or("dilation", Some((1, 1)))?,
                })
            }
            "matmul" => Pending::MatMul {
                out: p.get("out").map(|_| p.usize_or("out", None)).transpose()?,
                bias: p.bool_or("bias", parents.len() == 1)?,
            },
            "add" => Pending::Add {
                constant: p.bool_or("const", parents.len() == 1)?,
            },
            other => return Err(Error::parse(n, format!("unknown layer op '{}'", other))),
        };
        let x = match parents[0] {
            Source::Input => input.clone(),
            Source::Layer(i) => out_specs[i].clone(),
        };
        let op = match pending {
            Pending::Act(a) => LayerOp::Activation(a),
            Pending::Softmax => LayerOp::Softmax,
            Pending::Flatten => LayerOp::Flatten,
            Pending::Pool(w) => LayerOp::MaxPool2d(w),
            Pending::Conv { win, ic, oc, bias } => {
                let ic = ic.unwrap_or(x.dims()[0]);
                let fan_in = (ic * win.kernel.0 * win.kernel.1).max(1);
                let bound = 1.0 / (fan_in as f32).sqrt();
                let weight = store.fetch(
                    n,
                    &format!("{}.weight", lname),
                    &[oc, ic, win.kernel.0, win.kernel.1],
                    bound,
                )?;
                let bias = if bias {
                    Some(store.fetch(n, &format!("{}.bias", lname), &[oc], bound)?)
                } else {
                    None
                };
                LayerOp::Conv2d(Conv2d {
                    window: win,
                    in_channels: ic,
                    out_channels: oc,
                    weight,
                    bias,
                })
            }
            Pending::MatMul { out, bias } => {
                let k = *x.dims().last().unwrap_or(&1);
                let bound = 1.0 / (k as f32).sqrt();
                let weight = match (parents.len(), out) {
                    (1, Some(o)) => {
                        Some(store.fetch(n, &format!("{}.weight", lname), &[k, o], bound)?)
                    }
                    (1, None) => return Err(Error::parse(n, "matmul with one input needs out=")),
                    (_, _) => None,
                };
                let ncols = match (&weight, parents.get(1)) {
                    (Some(w), _) => w.dims()[1],
                    (None, Some(Source::Layer(i))) => *out_specs[*i].dims().last().unwrap_or(&1),
                    (None, _) => *input.dims().last().unwrap_or(&1),
                };
                let bias = if bias {
                    Some(store.fetch(n, &format!("{}.bias", lname), &[ncols], bound)?)
                } else {
                    None
                };
                LayerOp::MatMul { weight, bias }
            }
            Pending::Add { constant } => {
                let c = if constant && parents.len() == 1 {
                    Some(store.fetch(n, &format!("{}.const", lname), x.dims(), 1.0)?)
                } else {
                    None
                };
                LayerOp::Add { constant: c }
            }
        };
        let def = LayerDef {
            name: lname.to_string(),
            op,
            parents,
        };
        let specs: Vec<TensorSpec> = def
            .parents
            .iter()
            .map(|p| match p {
                Source::Input => input.clone(),
                Source::Layer(i) => out_specs[*i].clone(),
            })
            .collect();
        let spec = super::infer_output(&def, &specs).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("layer {} (line {}): {}", lname, n, m)),
            other => other,
        })?;
        out_specs.push(spec);
        defs.push(def);
    }
    ModelGraph::new(&name, input, defs, group)
}

/// Canonical description with `weights inline`; pair with [`model_weights`].
pub fn model_to_text(g: &ModelGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", HEADER);
    let _ = writeln!(s, "name {}", g.name);
    let dims: Vec<String> = g
        .input_spec()
        .dims()
        .iter()
        .map(|d| d.to_string())
        .collect();
    let _ = writeln!(s, "input {}", dims.join(" "));
    let _ = writeln!(s, "group {}", g.group());
    let _ = writeln!(s, "weights inline");
    for l in g.layers() {
        let parents: Vec<String> = l
            .parents
            .iter()
            .map(|p| match p {
                Source::Input => "input".to_string(),
                Source::Layer(i) => g.layer(*i).name.clone(),
            })
            .collect();
        let _ = write!(
            s,
            "layer {} {} in={}",
            l.name,
            l.op.name(),
            parents.join(",")
        );
        let pair = |(a, b): (usize, usize)| format!("{}x{}", a, b);
        match &l.op {
            LayerOp::Conv2d(c) => {
                let _ = write!(
                    s,
                    " out={} kernel={} stride={} padding={} dilation={} bias={}",
                    c.out_channels,
                    pair(c.window.kernel),
                    pair(c.window.stride),
                    pair(c.window.padding),
                    pair(c.window.dilation),
                    c.bias.is_some()
                );
            }
            LayerOp::MaxPool2d(w) => {
                let _ = write!(
                    s,
                    " kernel={} stride={} padding={} dilation={}",
                    pair(w.kernel),
                    pair(w.stride),
                    pair(w.padding),
                    pair(w.dilation)
                );
            }
            LayerOp::MatMul { weight, bias } => {
                if let Some(w) = weight {
                    let _ = write!(s, " out={}", w.dims()[1]);
                }
                let _ = write!(s, " bias={}", bias.is_some());
            }
            LayerOp::Add { constant } => {
                let _ = write!(s, " const={}", constant.is_some());
            }
            _ => {}
        }
        s.push('\n');
    }
    s
}

/// All layer parameters under their canonical names, in layer order.
pub fn model_weights(g: &ModelGraph) -> Blob {
    let mut b = Blob::new();
    for l in g.layers() {
        match &l.op {
            LayerOp::Conv2d(c) => {
                b.push(format!("{}.weight", l.name), c.weight.clone());
                if let Some(bias) = &c.bias {
                    b.push(format!("{}.bias", l.name), bias.clone());
                }
            }
            LayerOp::MatMul { weight, bias } => {
                if let Some(w) = weight {
                    b.push(format!("{}.weight", l.name), w.clone());
                }
                if let Some(bias) = bias {
                    b.push(format!("{}.bias", l.name), bias.clone());
                }
            }
            LayerOp::Add { constant: Some(c) } => b.push(format!("{}.const", l.name), c.clone()),
            _ => {}
        }
    }
    b
}

/// Self-contained binary form: description, manifest and parameter data, each
/// prefixed by a little-endian u32 length.
pub fn encode_bundle(g: &ModelGraph) -> Vec<u8> {
    let text = model_to_text(g);
    let (manifest, data) = model_weights(g).to_parts();
    let mut out = Vec::with_capacity(text.len() + manifest.len() + data.len() + 12);
    for part in [text.as_bytes(), manifest.as_bytes(), &data] {
        out.extend_from_slice(&(part.len() as u32).to_le_bytes());
        out.extend_from_slice(part);
    }
    out
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelGraph> {
    let mut parts = Vec::with_capacity(3);
    let mut pos = 0usize;
    for _ in 0..3 {
        if pos + 4 > bytes.len() {
            return Err(Error::Protocol("truncated model bundle".into()));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len > bytes.len() {
            return Err(Error::Protocol("truncated model bundle".into()));
        }
        parts.push(&bytes[pos..pos + len]);
        pos += len;
    }
    let text = std::str::from_utf8(parts[0])
        .map_err(|_| Error::Protocol("model text is not UTF-8".into()))?;
    let manifest = std::str::from_utf8(parts[1])
        .map_err(|_| Error::Protocol("manifest is not UTF-8".into()))?;
    let blob = Blob::from_parts(manifest, parts[2])?;
    parse_model(text, WeightSource::Blob(&blob))
}

impl ModelGraph {
    /// SHA-256 of the canonical bundle, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(encode_bundle(self)))
    }

    pub fn load(path: &Path) -> Result<ModelGraph> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        parse_model(&text, WeightSource::Dir(dir))
    }

    /// Same model with a different operator group size.
    pub fn regrouped(&self, group: usize) -> Result<ModelGraph> {
        let defs = self
            .layers()
            .iter()
            .map(|l| LayerDef {
                name: l.name.clone(),
                op: l.op.clone(),
                parents: l.parents.clone(),
            })
            .collect();
        ModelGraph::new(&self.name, self.input_spec().clone(), defs, group)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OpClass;

    const DEMO: &str = "hpmodel 1
name t
input 1 8 8
weights seed 3
layer c conv2d in=input out=4 kernel=3 padding=1
layer r relu in=c
layer a add in=r,c
layer p maxpool2d in=a kernel=2
layer f flatten in=p
layer fc matmul in=f out=5
layer s softmax in=fc
";

    #[test]
    fn parses_and_classifies() {
        let g = parse_model(DEMO, WeightSource::Dir(Path::new("."))).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(g.layer(2).parents, vec![Source::Layer(1), Source::Layer(0)]);
        assert_eq!(g.layer(3).output_spec.dims(), &[4, 4, 4]);
        assert_eq!(g.layer(5).class, OpClass::Global);
        assert_eq!(g.output_spec().dims(), &[1, 5]);
    }

    #[test]
    fn seeded_weights_are_deterministic() {
        let a = parse_model(DEMO, WeightSource::Dir(Path::new("."))).unwrap();
        let b = parse_model(DEMO, WeightSource::Dir(Path::new("."))).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = parse_model(
            &DEMO.replace("seed 3", "seed 4"),
            WeightSource::Dir(Path::new(".")),
        )
        .unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn bundle_round_trip_preserves_checksum() {
        let g = parse_model(DEMO, WeightSource::Dir(Path::new("."))).unwrap();
        let back = decode_bundle(&encode_bundle(&g)).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.checksum(), g.checksum());
    }

    #[test]
    fn file_weights_load() {
        let g = parse_model(DEMO, WeightSource::Dir(Path::new("."))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model_weights(&g).write(&dir.path().join("w.bin")).unwrap();
        let text = model_to_text(&g).replace("weights inline", "weights file w.bin");
        let path = dir.path().join("m.hpm");
        std::fs::write(&path, text).unwrap();
        let back = ModelGraph::load(&path).unwrap();
        assert_eq!(back.checksum(), g.checksum());
    }

    #[test]
    fn errors_are_reported() {
        let bad_op = DEMO.replace("relu in=c", "gelu in=c");
        assert!(matches!(
            parse_model(&bad_op, WeightSource::Dir(Path::new("."))),
            Err(Error::Parse { .. })
        ));
        let cyc = DEMO.replace("layer r relu in=c", "layer r relu in=a");
        let err = parse_model(&cyc, WeightSource::Dir(Path::new("."))).unwrap_err();
        assert!(err.to_string().contains("cyclic"), "{err}");
        let mismatch = DEMO.replace("layer a add in=r,c", "layer a add in=r,p");
        assert!(parse_model(&mismatch, WeightSource::Dir(Path::new("."))).is_err());
    }
}
