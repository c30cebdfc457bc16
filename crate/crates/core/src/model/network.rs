use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerKind, LayerSpec, NetworkSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// A layer DAG together with its parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Parameter>,
    buffers: IndexMap<String, Tensor>,
}

/// Parameter handles on one tape, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct ParamVars(IndexMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.0.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Result of one recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Updated running statistics (train mode only), keyed by buffer name.
    pub running_stats: Vec<(String, Tensor)>,
}

impl Network {
    /// Kaiming (fan-in) normal init for conv weights, zero biases, unit BN
    /// scale, zero BN shift, and running statistics (0, 1).
    pub fn new(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in spec.layers() {
            for (name, shape) in layer.param_shapes() {
                let n: usize = shape.iter().product();
                let value = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    Tensor::new(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                        .expect("shape matches")
                } else if name.ends_with(".gamma") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                params.push(Parameter {
                    name,
                    value,
                    grad: None,
                });
            }
        }
        let buffers = default_buffers(&spec);
        Network {
            spec,
            params,
            buffers,
        }
    }

    /// Assemble from explicit tensors, checking every shape against the network spec.
    pub fn from_parts(
        spec: NetworkSpec,
        params: Vec<(String, Tensor)>,
        buffers: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let expected = spec.param_shapes();
        check_names("parameter", &expected, &params)?;
        let expected_buf = spec.buffer_shapes();
        let buffers = if buffers.is_empty() {
            default_buffers(&spec)
        } else {
            check_names("buffer", &expected_buf, &buffers)?;
            buffers.into_iter().collect()
        };
        Ok(Network {
            spec,
            params: params
                .into_iter()
                .map(|(name, value)| Parameter {
                    name,
                    value,
                    grad: None,
                })
                .collect(),
            buffers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid("set_buffer", format!("no buffer `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_buffer",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Write back running statistics produced by a train-mode forward pass.
    pub fn apply_running_stats(&mut self, stats: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in stats {
            self.set_buffer(&name, t)?;
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Put parameters on the tape. With `trainable = false` they are
    /// recorded as constants and receive no gradient.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let mut vars = IndexMap::new();
        for p in &self.params {
            let v = if trainable {
                tape.param(&p.name, p.value.clone())?
            } else {
                tape.constant(p.value.clone())
            };
            vars.insert(p.name.clone(), v);
        }
        Ok(ParamVars(vars))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Forward> {
        let vars = self.register(tape, true)?;
        self.forward_with(tape, &vars, x, mode)
    }

    /// Record a forward pass using already-registered parameter handles, so
    /// the same weights can be applied several times on one tape.
    pub fn forward_with(&self, tape: &mut Tape, vars: &ParamVars, x: Var, mode: Mode) -> Result<Forward> {
        let input = self.spec.input_layer();
        let shape = tape.value(x)?.shape().to_vec();
        let want = self.spec.input_channels();
        if shape.len() != 4 || shape[1] != want {
            return Err(Error::Layer {
                layer: input.id.clone(),
                detail: format!("expected input [N, {want}, H, W], got {shape:?}"),
            });
        }
        let mut values: HashMap<&str, Var> = HashMap::new();
        let mut running_stats = Vec::new();
        for layer in self.spec.layers() {
            let pred = |i: usize| values[layer.inputs[i].as_str()];
            let out = match &layer.kind {
                LayerKind::Input { .. } => Ok(x),
                LayerKind::Output => Ok(pred(0)),
                LayerKind::Relu => tape.relu(pred(0)),
                LayerKind::Conv(c) => {
                    let w = param_var(vars, layer, "weight")?;
                    let b = if c.bias {
                        Some(param_var(vars, layer, "bias")?)
                    } else {
                        None
                    };
                    tape.conv2d(pred(0), w, b, c.stride, c.padding)
                }
                LayerKind::BatchNorm { eps, momentum, .. } => {
                    let gamma = param_var(vars, layer, "gamma")?;
                    let beta = param_var(vars, layer, "beta")?;
                    let rm = &self.buffers[&format!("{}.running_mean", layer.id)];
                    let rv = &self.buffers[&format!("{}.running_var", layer.id)];
                    tape.batch_norm(pred(0), gamma, beta, rm, rv, mode, *momentum, *eps)
                        .map(|(v, stats)| {
                            if let Some((m, s)) = stats {
                                running_stats.push((format!("{}.running_mean", layer.id), m));
                                running_stats.push((format!("{}.running_var", layer.id), s));
                            }
                            v
                        })
                }
                LayerKind::Add => {
                    let mut acc = Ok(pred(0));
                    for i in 1..layer.inputs.len() {
                        acc = acc.and_then(|a| tape.add(a, pred(i)));
                    }
                    acc
                }
            };
            let out = out.map_err(|e| Error::Layer {
                layer: layer.id.clone(),
                detail: e.to_string(),
            })?;
            values.insert(layer.id.as_str(), out);
        }
        Ok(Forward {
            output: values[self.spec.output_layer().id.as_str()],
            running_stats,
        })
    }

    /// Eval-mode forward pass without gradients.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.constant(x.clone());
        let out = self.forward_with(&mut tape, &vars, xv, Mode::Eval)?.output;
        Ok(tape.value(out)?.clone())
    }
}

fn param_var(vars: &ParamVars, layer: &LayerSpec, suffix: &str) -> Result<Var> {
    let name = format!("{}.{suffix}", layer.id);
    vars.get(&name).ok_or_else(|| Error::Layer {
        layer: layer.id.clone(),
        detail: format!("parameter `{name}` was not registered"),
    })
}

fn default_buffers(spec: &NetworkSpec) -> IndexMap<String, Tensor> {
    spec.buffer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".running_var") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            (name, t)
        })
        .collect()
}

fn check_names(what: &str, expected: &[(String, Vec<usize>)], got: &[(String, Tensor)]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::ManifestShape {
            what: format!("{what} list"),
            detail: format!("expected {} entries, got {}", expected.len(), got.len()),
        });
    }
    for ((name, shape), (gname, t)) in expected.iter().zip(got) {
        if name != gname {
            return Err(Error::ManifestShape {
                what: format!("{what} `{gname}`"),
                detail: format!("expected `{name}` at this position"),
            });
        }
        if shape.as_slice() != t.shape() {
            return Err(Error::ManifestShape {
                what: format!("{what} `{name}`"),
                detail: format!("layer spec implies {shape:?}, tensor is {:?}", t.shape()),
            });
        }
    }
    Ok(())
}

/// Residual denoiser: head conv, `blocks` x (conv-bn-relu-conv-bn + skip),
/// tail conv, plus a global skip when input and output channels agree.
pub fn residual_cnn_spec(channels: usize, blocks: usize, in_ch: usize, out_ch: usize) -> Result<NetworkSpec> {
    let mut layers = vec![
        LayerSpec::input("input", in_ch),
        LayerSpec::conv("head", "input", in_ch, channels, 3),
    ];
    let mut prev = "head".to_string();
    for b in 0..blocks {
        let p = format!("block{b}");
        layers.push(LayerSpec::conv(&format!("{p}.conv1"), &prev, channels, channels, 3));
        layers.push(LayerSpec::bn(&format!("{p}.bn1"), &format!("{p}.conv1"), channels));
        layers.push(LayerSpec::relu(&format!("{p}.relu"), &format!("{p}.bn1")));
        layers.push(LayerSpec::conv(&format!("{p}.conv2"), &format!("{p}.relu"), channels, channels, 3));
        layers.push(LayerSpec::bn(&format!("{p}.bn2"), &format!("{p}.conv2"), channels));
        layers.push(LayerSpec::add(&format!("{p}.add"), &prev, &format!("{p}.bn2")));
        prev = format!("{p}.add");
    }
    layers.push(LayerSpec::conv("tail", &prev, channels, out_ch, 3));
    if in_ch == out_ch {
        layers.push(LayerSpec::add("skip", "input", "tail"));
        layers.push(LayerSpec::output("output", "skip"));
    } else {
        layers.push(LayerSpec::output("output", "tail"));
    }
    NetworkSpec::new(layers)
}

pub fn build_residual_cnn(channels: usize, blocks: usize, in_ch: usize, out_ch: usize, seed: u64) -> Result<Network> {
    Ok(Network::new(residual_cnn_spec(channels, blocks, in_ch, out_ch)?, seed))
}

/// Plain chain `Conv1 -> BN1 -> Conv2 -> BN2` used for small structural examples.
pub fn conv_bn_chain_spec(in_ch: usize, mid: usize, out_ch: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(vec![
        LayerSpec::input("Input", in_ch),
        LayerSpec::conv("Conv1", "Input", in_ch, mid, 3),
        LayerSpec::bn("BN1", "Conv1", mid),
        LayerSpec::conv("Conv2", "BN1", mid, out_ch, 3),
        LayerSpec::bn("BN2", "Conv2", out_ch),
        LayerSpec::output("Output", "BN2"),
    ])
}
