use mbdl_prune::autodiff::Tape;
use mbdl_prune::model::io::{self, decode, encode};
use mbdl_prune::model::{
    build_residual_cnn, conv_bn_chain_spec, count_flops, residual_cnn_spec, LayerKind, LayerSpec,
    Network, NetworkSpec,
};
use mbdl_prune::physics::{gaussian_kernel, make_cartesian_mask, CoilMaps};
use mbdl_prune::{DType, Error, Mode, Tensor};
use tempfile::tempdir;

fn single_conv(bias: bool) -> Network {
    let mut conv = LayerSpec::conv("c", "in", 2, 4, 3);
    if let LayerKind::Conv(c) = &mut conv.kind {
        c.bias = bias;
    }
    let spec = NetworkSpec::new(vec![LayerSpec::input("in", 2), conv, LayerSpec::output("out", "c")]).unwrap();
    Network::new(spec, 0)
}

#[test]
fn single_conv_param_count() {
    assert_eq!(single_conv(true).count_params(), 4 * 2 * 3 * 3 + 4);
    assert_eq!(single_conv(false).count_params(), 72);
}

#[test]
fn residual_param_count_closed_form() {
    // head 2->8, two blocks of two 8->8 convs and two BNs, tail 8->2
    let head = 8 * 2 * 9 + 8;
    let block = 2 * (8 * 8 * 9 + 8) + 2 * (8 + 8);
    let tail = 2 * 8 * 9 + 2;
    let net = build_residual_cnn(8, 2, 2, 2, 1).unwrap();
    assert_eq!(net.count_params(), head + 2 * block + tail);
    let enumerated: usize = net.params().iter().map(|p| p.value.shape().iter().product::<usize>()).sum();
    assert_eq!(net.count_params(), enumerated);
    assert_eq!(build_residual_cnn(20, 2, 2, 2, 1).unwrap().count_params(), 15382);
}

#[test]
fn zero_parameters_give_identity() {
    let mut net = build_residual_cnn(6, 2, 2, 2, 3).unwrap();
    for p in net.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let x = Tensor::randn(&[2, 2, 7, 5], DType::Real, 1.0, 4);
    let y = net.infer(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn denoiser_preserves_shape_and_is_deterministic() {
    let a = build_residual_cnn(8, 2, 2, 2, 11).unwrap();
    let b = build_residual_cnn(8, 2, 2, 2, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_residual_cnn(8, 2, 2, 2, 12).unwrap());
    let x = Tensor::randn(&[3, 2, 8, 8], DType::Real, 1.0, 5);
    let y1 = a.infer(&x).unwrap();
    let y2 = a.infer(&x).unwrap();
    assert_eq!(y1.shape(), x.shape());
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn shape_errors_name_the_layer() {
    let net = build_residual_cnn(4, 1, 2, 2, 0).unwrap();
    let err = net.infer(&Tensor::zeros(&[1, 3, 8, 8])).unwrap_err();
    assert!(matches!(err, Error::Layer { ref layer, .. } if layer == "input"), "{err}");

    let mut c = LayerSpec::conv("valid", "in", 1, 1, 3);
    if let LayerKind::Conv(cs) = &mut c.kind {
        cs.padding = 0;
    }
    let spec = NetworkSpec::new(vec![LayerSpec::input("in", 1), c, LayerSpec::output("out", "valid")]).unwrap();
    let err = Network::new(spec, 0).infer(&Tensor::zeros(&[1, 1, 2, 2])).unwrap_err();
    assert!(matches!(err, Error::Layer { ref layer, .. } if layer == "valid"), "{err}");
}

#[test]
fn train_mode_updates_running_stats() {
    let mut net = build_residual_cnn(4, 1, 1, 1, 2).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 1, 6, 6], DType::Real, 1.0, 3));
    let fwd = net.forward(&mut tape, x, Mode::Train).unwrap();
    assert_eq!(fwd.running_stats.len(), 4);
    let before = net.buffer("block0.bn1.running_var").unwrap().clone();
    net.apply_running_stats(fwd.running_stats).unwrap();
    assert_ne!(net.buffer("block0.bn1.running_var").unwrap(), &before);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
    assert!(net.forward(&mut tape, x, Mode::Eval).unwrap().running_stats.is_empty());
}

#[test]
fn flops_of_single_conv() {
    let net = single_conv(true);
    assert_eq!(count_flops(&net, 8, 8).unwrap(), 2 * 2 * 4 * 64 * 9 + 4 * 64);
}

#[test]
fn flops_scale_with_pixels() {
    let net = build_residual_cnn(8, 2, 2, 2, 0).unwrap();
    let small = count_flops(&net, 8, 6).unwrap();
    assert_eq!(count_flops(&net, 16, 12).unwrap(), 4 * small);
    assert_eq!(count_flops(&net, 24, 6).unwrap(), 3 * small);
}

#[test]
fn conv_bn_chain_builds() {
    let spec = conv_bn_chain_spec(1, 4, 3).unwrap();
    assert_eq!(spec.layers().len(), 6);
    assert_eq!(residual_cnn_spec(4, 3, 2, 1).unwrap().output_channels(), 1);
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("net.spde");
    let mut net = build_residual_cnn(5, 2, 2, 2, 9).unwrap();
    net.set_buffer("block1.bn2.running_mean", Tensor::randn(&[5], DType::Real, 1.0, 1)).unwrap();
    io::save_weights(&net, &path).unwrap();
    let back = io::load_weights(&path).unwrap();
    assert_eq!(back, net);
    for (a, b) in net.params().iter().zip(back.params()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn truncated_file_is_a_checksum_error() {
    let bytes = encode(&io::network_to_record(&build_residual_cnn(4, 1, 2, 2, 0).unwrap()));
    for cut in [bytes.len() - 1, bytes.len() - 100, 12, 5] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Checksum(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 20] ^= 1;
    assert!(matches!(decode(&flipped), Err(Error::Checksum(_))));
}

#[test]
fn manifest_edits_are_shape_errors() {
    let net = build_residual_cnn(12, 1, 2, 2, 0).unwrap();
    let bytes = encode(&io::network_to_record(&net));

    // layer attribute edited, blob untouched
    let edit = |from: &str, to: &str| -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = bytes.windows(from.len()).position(|w| w == from.as_bytes()).unwrap();
        let mut b = bytes.clone();
        b[at..at + from.len()].copy_from_slice(to.as_bytes());
        b
    };
    let r = io::network_from_record(&decode(&edit("head conv in=2 out=12", "head conv in=2 out=11")).unwrap());
    assert!(matches!(r, Err(Error::InvalidSpec(_)) | Err(Error::ManifestShape { .. })), "{r:?}");
    let r = io::network_from_record(
        &decode(&edit("in=12 out=2 k=3 s=1 p=1 bias=1", "in=11 out=2 k=3 s=1 p=1 bias=1")).unwrap(),
    );
    assert!(r.is_err());

    // declared tensor shape edited, blob untouched
    let r = decode(&edit("param head.weight f64 12,2,3,3", "param head.weight f64 11,2,3,3"));
    assert!(matches!(r, Err(Error::ManifestShape { .. })), "{r:?}");
}

#[test]
fn channel_edit_in_conv_and_bn_is_a_manifest_shape_error() {
    // consistent layer edit (conv out and the following BN) but stale tensors
    let net = build_residual_cnn(12, 1, 2, 2, 0).unwrap();
    let mut rec = io::network_to_record(&net);
    for m in rec.meta.iter_mut() {
        if m.starts_with("layer tail ") {
            *m = m.replace("out=2", "out=1");
        }
        if m.starts_with("layer input ") {
            *m = m.replace("channels=2", "channels=1");
        }
        if m.starts_with("layer head ") {
            *m = m.replace("in=2", "in=1");
        }
    }
    let r = io::network_from_record(&decode(&encode(&rec)).unwrap());
    assert!(matches!(r, Err(Error::ManifestShape { .. })), "{r:?}");
}

#[test]
fn version_mismatch() {
    let mut bytes = encode(&io::network_to_record(&build_residual_cnn(3, 1, 1, 1, 0).unwrap()));
    bytes[4] = 9;
    assert!(matches!(decode(&bytes), Err(Error::Version { found: 9, expected: 1 })));
}

#[test]
fn physics_artifacts_round_trip() {
    let mask = make_cartesian_mask(32, 0.25, 0.1, 4).unwrap();
    let r = decode(&encode(&io::mask_to_record(&mask))).unwrap();
    assert_eq!(io::mask_from_record(&r).unwrap(), mask);

    let k = gaussian_kernel(5, 1.2, 1.5, 0.3).unwrap();
    let r = decode(&encode(&io::kernel_to_record(&k))).unwrap();
    assert_eq!(io::kernel_from_record(&r).unwrap(), k);

    let maps = CoilMaps::synthetic(3, 8, 8, 1).unwrap();
    let r = decode(&encode(&io::coil_maps_to_record(&maps))).unwrap();
    assert_eq!(io::coil_maps_from_record(&r).unwrap().tensor(), maps.tensor());

    let imgs = Tensor::randn(&[2, 4, 4], DType::Complex, 1.0, 2);
    let r = decode(&encode(&io::images_to_record(&imgs))).unwrap();
    assert_eq!(io::images_from_record(&r).unwrap(), imgs);
    assert!(io::mask_from_record(&r).is_err());
}
