use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input { channels: usize },
    Conv(ConvSpec),
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    Relu,
    Add,
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv(_) => "conv",
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::Output => "output",
        }
    }

    /// Whether the input-to-output map acts channel-wise (a diagonal map).
    pub fn is_elementwise(&self) -> bool {
        matches!(self, LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::Add)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: &str, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn input(id: &str, channels: usize) -> Self {
        Self::new(id, LayerKind::Input { channels }, &[])
    }

    pub fn conv(id: &str, from: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(
            id,
            LayerKind::Conv(ConvSpec {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding: kernel / 2,
                bias: true,
            }),
            &[from],
        )
    }

    pub fn bn(id: &str, from: &str, channels: usize) -> Self {
        Self::new(
            id,
            LayerKind::BatchNorm {
                channels,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            &[from],
        )
    }

    pub fn relu(id: &str, from: &str) -> Self {
        Self::new(id, LayerKind::Relu, &[from])
    }

    pub fn add(id: &str, a: &str, b: &str) -> Self {
        Self::new(id, LayerKind::Add, &[a, b])
    }

    pub fn output(id: &str, from: &str) -> Self {
        Self::new(id, LayerKind::Output, &[from])
    }

    /// Parameter names and shapes owned by this layer, in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match &self.kind {
            LayerKind::Conv(c) => {
                let mut v = vec![(
                    format!("{}.weight", self.id),
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                )];
                if c.bias {
                    v.push((format!("{}.bias", self.id), vec![c.out_channels]));
                }
                v
            }
            LayerKind::BatchNorm { channels, .. } => vec![
                (format!("{}.gamma", self.id), vec![*channels]),
                (format!("{}.beta", self.id), vec![*channels]),
            ],
            _ => vec![],
        }
    }

    /// Non-trainable state (running statistics).
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match &self.kind {
            LayerKind::BatchNorm { channels, .. } => vec![
                (format!("{}.running_mean", self.id), vec![*channels]),
                (format!("{}.running_var", self.id), vec![*channels]),
            ],
            _ => vec![],
        }
    }
}

impl fmt::Display for LayerSpec {
    /// Single-line text form used in weight-file manifests.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.id, self.kind.name())?;
        match &self.kind {
            LayerKind::Input { channels } => write!(f, " channels={channels}")?,
            LayerKind::Conv(c) => write!(
                f,
                " in={} out={} k={} s={} p={} bias={}",
                c.in_channels, c.out_channels, c.kernel, c.stride, c.padding, c.bias as u8
            )?,
            LayerKind::BatchNorm {
                channels,
                eps,
                momentum,
            } => write!(f, " channels={channels} eps={eps:e} momentum={momentum:e}")?,
            _ => {}
        }
        if !self.inputs.is_empty() {
            write!(f, " inputs={}", self.inputs.join(","))?;
        }
        Ok(())
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("layer line `{line}`: {what}"));
        let mut parts = line.split_whitespace();
        let id = parts.next().ok_or_else(|| bad("missing id"))?.to_string();
        let kind = parts.next().ok_or_else(|| bad("missing kind"))?;
        let mut kv = HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| bad(&format!("missing `{k}`")))?
                .parse()
                .map_err(|_| bad(&format!("bad `{k}`")))
        };
        let real = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| bad(&format!("missing `{k}`")))?
                .parse()
                .map_err(|_| bad(&format!("bad `{k}`")))
        };
        let kind = match kind {
            "input" => LayerKind::Input {
                channels: num("channels")?,
            },
            "conv" => LayerKind::Conv(ConvSpec {
                in_channels: num("in")?,
                out_channels: num("out")?,
                kernel: num("k")?,
                stride: num("s")?,
                padding: num("p")?,
                bias: num("bias")? != 0,
            }),
            "bn" => LayerKind::BatchNorm {
                channels: num("channels")?,
                eps: real("eps")?,
                momentum: real("momentum")?,
            },
            "relu" => LayerKind::Relu,
            "add" => LayerKind::Add,
            "output" => LayerKind::Output,
            other => return Err(bad(&format!("unknown layer kind `{other}`"))),
        };
        let inputs = kv
            .get("inputs")
            .map(|s| s.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        Ok(LayerSpec { id, kind, inputs })
    }
}

/// Validated layer DAG, stored in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    index: HashMap<String, usize>,
    channels: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, l) in layers.iter().enumerate() {
            if index.insert(l.id.clone(), i).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate layer id `{}`", l.id)));
            }
        }
        for l in &layers {
            for p in &l.inputs {
                if !index.contains_key(p) {
                    return Err(Error::InvalidSpec(format!(
                        "layer `{}` refers to unknown predecessor `{p}`",
                        l.id
                    )));
                }
            }
            let arity_ok = match l.kind {
                LayerKind::Input { .. } => l.inputs.is_empty(),
                LayerKind::Add => l.inputs.len() >= 2,
                _ => l.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::InvalidSpec(format!(
                    "layer `{}` ({}) has {} inputs",
                    l.id,
                    l.kind.name(),
                    l.inputs.len()
                )));
            }
        }
        let inputs: Vec<_> = layers.iter().filter(|l| matches!(l.kind, LayerKind::Input { .. })).collect();
        let outputs: Vec<_> = layers.iter().filter(|l| matches!(l.kind, LayerKind::Output)).collect();
        if inputs.len() != 1 || outputs.len() != 1 {
            return Err(Error::InvalidSpec(format!(
                "need exactly one input and one output layer, found {} and {}",
                inputs.len(),
                outputs.len()
            )));
        }

        // Kahn's algorithm, preferring declaration order among ready layers.
        let n = layers.len();
        let mut indegree: Vec<usize> = layers.iter().map(|l| l.inputs.len()).collect();
        let mut succ: Vec<Vec<usize>> = vec![vec![]; n];
        for (i, l) in layers.iter().enumerate() {
            for p in &l.inputs {
                succ[index[p]].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &s in &succ[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<_> = (0..n)
                .filter(|i| !order.contains(i))
                .map(|i| layers[i].id.clone())
                .collect();
            return Err(Error::InvalidSpec(format!("cycle through layers {stuck:?}")));
        }

        let input_id = inputs[0].id.clone();
        let output_id = outputs[0].id.clone();
        let forward = reach(&input_id, &layers, &index, &succ, true);
        let backward = reach(&output_id, &layers, &index, &succ, false);
        for l in &layers {
            if !forward.contains(&l.id) || !backward.contains(&l.id) {
                return Err(Error::InvalidSpec(format!(
                    "layer `{}` is not on a path from input to output",
                    l.id
                )));
            }
        }

        let mut sorted: Vec<LayerSpec> = order.iter().map(|&i| layers[i].clone()).collect();
        let index: HashMap<String, usize> =
            sorted.iter().enumerate().map(|(i, l)| (l.id.clone(), i)).collect();
        let mut channels = vec![0usize; n];
        for (i, l) in sorted.iter_mut().enumerate() {
            let pred: Vec<usize> = l.inputs.iter().map(|p| channels[index[p]]).collect();
            channels[i] = match &l.kind {
                LayerKind::Input { channels } => *channels,
                LayerKind::Conv(c) => {
                    if pred[0] != c.in_channels {
                        return Err(Error::InvalidSpec(format!(
                            "conv `{}` expects {} input channels but receives {}",
                            l.id, c.in_channels, pred[0]
                        )));
                    }
                    if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                        return Err(Error::InvalidSpec(format!("conv `{}` has a zero size", l.id)));
                    }
                    c.out_channels
                }
                LayerKind::BatchNorm { channels, eps, .. } => {
                    if pred[0] != *channels {
                        return Err(Error::InvalidSpec(format!(
                            "bn `{}` has {} channels but receives {}",
                            l.id, channels, pred[0]
                        )));
                    }
                    if !(*eps > 0.0) {
                        return Err(Error::InvalidSpec(format!("bn `{}` needs eps > 0", l.id)));
                    }
                    *channels
                }
                LayerKind::Add => {
                    if pred.iter().any(|&c| c != pred[0]) {
                        return Err(Error::InvalidSpec(format!(
                            "add `{}` joins mismatched channel counts {pred:?}",
                            l.id
                        )));
                    }
                    pred[0]
                }
                LayerKind::Relu | LayerKind::Output => pred[0],
            };
        }
        Ok(NetworkSpec {
            layers: sorted,
            index,
            channels,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.index.get(id).map(|&i| &self.layers[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Channel count of a layer's output feature map.
    pub fn channels_out(&self, id: &str) -> Option<usize> {
        self.index.get(id).map(|&i| self.channels[i])
    }

    pub fn input_layer(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Input { .. }))
            .expect("validated")
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Output))
            .expect("validated")
    }

    pub fn input_channels(&self) -> usize {
        self.channels[self.index[&self.input_layer().id]]
    }

    pub fn output_channels(&self) -> usize {
        self.channels[self.index[&self.output_layer().id]]
    }

    /// Layers consuming the output of `id`.
    pub fn successors(&self, id: &str) -> Vec<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| l.inputs.iter().any(|p| p == id))
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(|l| l.buffer_shapes()).collect()
    }
}

fn reach(
    start: &str,
    layers: &[LayerSpec],
    index: &HashMap<String, usize>,
    succ: &[Vec<usize>],
    forward: bool,
) -> HashSet<String> {
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([index[start]]);
    while let Some(i) = queue.pop_front() {
        if !seen.insert(layers[i].id.clone()) {
            continue;
        }
        if forward {
            queue.extend(succ[i].iter().copied());
        } else {
            queue.extend(layers[i].inputs.iter().map(|p| index[p]));
        }
    }
    seen
}
