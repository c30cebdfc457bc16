use std::collections::HashMap;

use super::network::Network;
use super::spec::LayerKind;
use crate::error::{Error, Result};

/// Floating-point operations for one forward pass on a single `height x width`
/// image. Multiply and add count separately; BN counts as one affine
/// scale-and-shift per element, ReLU and each addition as one op per element.
pub fn count_flops(net: &Network, height: usize, width: usize) -> Result<u64> {
    let spec = net.spec();
    let mut dims: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut total = 0u64;
    for layer in spec.layers() {
        let (h, w) = match layer.inputs.first() {
            Some(p) => dims[p.as_str()],
            None => (height, width),
        };
        let c = spec.channels_out(&layer.id).expect("layer in spec") as u64;
        let out = match &layer.kind {
            LayerKind::Conv(cs) => {
                let span = |n: usize| -> Result<usize> {
                    let padded = n + 2 * cs.padding;
                    if padded < cs.kernel {
                        return Err(Error::Layer {
                            layer: layer.id.clone(),
                            detail: format!("input extent {n} smaller than kernel {}", cs.kernel),
                        });
                    }
                    Ok((padded - cs.kernel) / cs.stride + 1)
                };
                let (ho, wo) = (span(h)?, span(w)?);
                let pixels = (ho * wo) as u64;
                let k2 = (cs.kernel * cs.kernel) as u64;
                total += 2 * cs.in_channels as u64 * cs.out_channels as u64 * pixels * k2;
                if cs.bias {
                    total += cs.out_channels as u64 * pixels;
                }
                (ho, wo)
            }
            LayerKind::BatchNorm { .. } => {
                total += 2 * c * (h * w) as u64;
                (h, w)
            }
            LayerKind::Relu => {
                total += c * (h * w) as u64;
                (h, w)
            }
            LayerKind::Add => {
                total += (layer.inputs.len() as u64 - 1) * c * (h * w) as u64;
                (h, w)
            }
            LayerKind::Input { .. } | LayerKind::Output => (h, w),
        };
        dims.insert(layer.id.as_str(), out);
    }
    Ok(total)
}

pub fn count_params(net: &Network) -> usize {
    net.count_params()
}
