use mbdl_prune::bench::{
    degradation_pct, prepare_seed, read_metrics, run_experiment, synth_phantom, time_inference, ExperimentConfig,
    MetricsRow, Problem, METRICS_HEADER,
};
use mbdl_prune::finetune::StrategyKind;
use mbdl_prune::metrics::{psnr, ssim};
use mbdl_prune::model::{build_residual_cnn, count_flops, count_params};
use mbdl_prune::prune::prune_network;
use mbdl_prune::Error;

#[test]
fn phantom_contracts() {
    let a = synth_phantom(32, 5, 7).unwrap();
    assert_eq!(a, synth_phantom(32, 5, 7).unwrap());
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.image.shape(), &[32, 32]);

    let b = synth_phantom(32, 5, 8).unwrap();
    let mad = a.image.sub(&b.image).unwrap().data().iter().map(|v| v.abs()).sum::<f64>() / 1024.0;
    assert!(mad > 1e-3, "{mad}");

    assert!(synth_phantom(15, 3, 0).is_err());

    let z = a.with_phase(3);
    assert!(z.abs().max_abs_diff(&a.image).unwrap() < 1e-12);
}

#[test]
fn metric_examples_on_phantoms() {
    let a = synth_phantom(24, 4, 1).unwrap().image;
    let b = synth_phantom(24, 4, 2).unwrap().image;
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let shifted = a.map(|v| v + 0.1);
    assert!((psnr(&shifted, &a, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let (s1, s2) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
    assert!((s1 - s2).abs() <= 1e-12);
    assert!((-1.0..=1.0).contains(&s1));
}

fn tiny_config(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        "image_size = 16\ncomplexity = 3\ncoils = 2\nsampling_rate = 0.375\nacs_fraction = 0.125\n\
         channels = 4\nblocks = 1\nunroll_depth = 2\ntrain_epochs = 2\nepochs = 2\nbatch_size = 2\n\
         train_size = 2\nfinetune_size = 2\neval_size = 2\nratios = 0, 0.25, 0.5\nstrategies = sv, sc, ss\n\
         baseline_ratios = 0.5\nbaseline_strategies = ss, sv\nseeds = 3\nsave_weights = true\nout_dir = {}\n",
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn timing_contract_and_flop_proxy() {
    let cfg = tiny_config(std::path::Path::new("unused"));
    let data = prepare_seed(&cfg, 0).unwrap();
    let net = build_residual_cnn(4, 1, 2, 2, 0).unwrap();
    let y = &data.eval.measurements[0];
    assert!(time_inference(&net, &data.op, &data.solver, y, 2, 0).is_err());
    let t = time_inference(&net, &data.op, &data.solver, y, 3, 0).unwrap();
    assert!(t.std_ms >= 0.0 && t.mean_ms > 0.0);

    let big = build_residual_cnn(20, 2, 2, 2, 0).unwrap();
    let (pruned, _) = prune_network(&big, 0.65).unwrap();
    assert!(count_flops(&pruned, 64, 64).unwrap() < count_flops(&big, 64, 64).unwrap());
}

#[test]
fn sweep_rows_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let rows = run_experiment(&cfg).unwrap();

    // 1 baseline + 2 ratios × (none + 3 strategies) + 2 random baselines
    assert_eq!(rows.len(), 1 + 2 * 4 + 2);
    assert_eq!(read_metrics(dir.path().join("metrics.csv")).unwrap().len(), rows.len());
    let header = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), METRICS_HEADER.join(","));
    for name in [
        "config.txt",
        "summary.csv",
        "trace_s3_r0_none.csv",
        "train_s3_r0_none.csv",
        "weights_s3_r0_none.spde",
        "prune_report_s3_r25_none.csv",
        "prune_report_s3_r50_none.csv",
        "trace_s3_r50_ss.csv",
        "train_s3_r25_sc.csv",
        "weights_s3_r50_random-ss.spde",
    ] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }

    let base = &rows[0];
    assert_eq!((base.nominal_ratio, base.strategy.as_str()), (0.0, "none"));
    assert_eq!(base.degradation_pct, 0.0);
    assert_eq!(base.speedup, 1.0);
    assert_eq!(base.achieved_ratio, 0.0);

    let mut last_flops = base.flops;
    for r in &rows[1..] {
        assert!(r.params < base.params);
        assert!(r.achieved_ratio > r.nominal_ratio, "{}", r.tag);
        let recomputed = degradation_pct(base.psnr, r.psnr);
        assert!((recomputed - r.degradation_pct).abs() < 1e-12);
        assert!(r.flops <= last_flops);
        if r.strategy == "none" {
            last_flops = r.flops;
        }
    }

    let at = |ratio: f64, s: &str| -> &MetricsRow {
        rows.iter().find(|r| r.nominal_ratio == ratio && r.strategy == s).unwrap()
    };
    for s in ["ss", "sv"] {
        let random = at(0.5, &format!("random-{s}"));
        let tuned = at(0.5, s);
        assert_eq!(random.params, tuned.params);
        assert!((random.delta_db.unwrap() - (tuned.psnr - random.psnr)).abs() < 1e-12);
    }
    assert!(rows.iter().filter(|r| !r.strategy.starts_with("random")).all(|r| r.delta_db.is_none()));

    // the CSV round trip keeps PSNR to the printed precision
    let back = read_metrics(dir.path().join("metrics.csv")).unwrap();
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.tag, b.tag);
        assert!((a.psnr - b.psnr).abs() < 1e-8);
    }

    // identical config and seed reproduce the PSNR columns
    let again = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.out_dir = again.path().to_path_buf();
    cfg2.save_weights = false;
    let rows2 = run_experiment(&cfg2).unwrap();
    for (a, b) in rows.iter().zip(&rows2) {
        assert_eq!(a.tag, b.tag);
        assert!((a.psnr - b.psnr).abs() <= 1e-6);
    }
}

#[test]
fn divergence_is_stage_tagged_and_csv_flushed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.set("solver", "pnp").unwrap();
    cfg.gamma = Some(1e10);
    let err = run_experiment(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert!(stage.starts_with("train"), "{stage}"),
        other => panic!("unexpected {other}"),
    }
    assert!(matches!(err.root(), Error::Divergence(_)));
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn super_resolution_sweep_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.problem = Problem::Sr;
    cfg.kernel_size = 5;
    cfg.ratios = vec![0.5];
    cfg.strategies = vec![StrategyKind::SelfSupervised];
    cfg.baseline_ratios.clear();
    cfg.validate().unwrap();
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.psnr.is_finite()));
    assert_eq!(rows[0].params, count_params(&build_residual_cnn(4, 1, 1, 1, 0).unwrap()));
}
