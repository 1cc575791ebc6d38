use proptest::prelude::*;
use relgate::adapter::{read_trace_csv, run, write_trace_csv, ControllerSpec};
use relgate::config::{AdapterConfig, Preset};
use relgate::experiment::{self, ExperimentConfig};
use relgate::matrix::Matrix;
use relgate::model::{clean_accuracy, decode_params, encode_params, params_manifest, ModelState, ParamsManifest, TrainConfig};
use relgate::streams::{DegradedManifest, OrderingMode, StreamSpec};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        train_samples: 800,
        clean_samples: 800,
        train: TrainConfig {
            epochs: 120,
            ..TrainConfig::default()
        },
        stream: StreamSpec {
            batches: 40,
            batch_size: 32,
            ..StreamSpec::default()
        },
        write_traces: false,
        s_targets: vec![0.6, 0.3],
        ..ExperimentConfig::default()
    }
}

#[test]
fn degraded_sources_persist_and_reload_bit_exactly() {
    let cfg = small();
    let src = experiment::train_seed_source(&cfg, 1).unwrap();
    let levels = experiment::source_levels(&cfg, &src).unwrap();
    assert_eq!(levels.len(), 2);
    for l in &levels {
        let blob = encode_params(l.state.source());
        let manifest = l.manifest.clone().unwrap();
        let back = DegradedManifest::from_toml(&manifest.to_toml()).unwrap();
        assert_eq!(back, manifest);
        let pm = ParamsManifest::from_json(&params_manifest(l.state.source()).to_json()).unwrap();
        assert_eq!(pm.sha256, manifest.sha256);
        let reloaded = pm.verify(&blob).unwrap();
        assert_eq!(&reloaded, l.state.source());
        let acc = clean_accuracy(&reloaded, &src.clean).unwrap();
        assert_eq!(acc, manifest.achieved_s);
        assert!((acc - l.s_target.unwrap()).abs() <= cfg.calibration_tol);
    }
}

#[test]
fn uniform_source_gives_zero_reliability_everywhere() {
    let cfg = small();
    let src = experiment::train_seed_source(&cfg, 2).unwrap();
    let mut p = src.source.source().clone();
    p.output = Matrix::zeros(p.output.rows(), p.output.cols());
    let stream = cfg.stream_for(2, OrderingMode::Correlated).generate().unwrap();
    let ac = Preset::GatedFull.apply(&AdapterConfig {
        eta: 0.01,
        batch_size: 32,
        ..AdapterConfig::default()
    });
    let trace = run(&stream, ModelState::from_source(p), &ac, &ControllerSpec::None).unwrap();
    assert_eq!(trace.records.len(), 40);
    assert!(trace.records.iter().all(|r| r.r_src == 0.0 && r.l_anch == 0.0 && r.lambda_eff == 0.0));
}

#[test]
fn gated_run_trace_is_well_formed_and_round_trips() {
    let cfg = small();
    let src = experiment::train_seed_source(&cfg, 3).unwrap();
    let stream = cfg.stream_for(3, OrderingMode::Iid).generate().unwrap();
    let ac = Preset::GatedFullController.apply(&AdapterConfig {
        eta: 0.01,
        batch_size: 32,
        ..AdapterConfig::default()
    });
    let spec = ControllerSpec::gated(ControllerSpec::periodic(10), 0.4);
    let trace = run(&stream, src.source.clone(), &ac, &spec).unwrap();
    assert!(trace.aborted.is_none());
    for r in &trace.records {
        assert!((0.0..=1.0).contains(&r.r_src));
        assert!((0.0..=100.0).contains(&r.err));
        assert!(r.lambda_eff <= ac.lambda * r.r_src * (1.0 + ac.alpha + ac.beta * std::f64::consts::LN_2) + 1e-12);
        assert!(r.eta_eff >= ac.eta * ac.eta_min - 1e-15 && r.eta_eff <= ac.eta + 1e-15);
    }
    let mut buf = Vec::new();
    write_trace_csv(&trace, &mut buf).unwrap();
    let back = read_trace_csv(buf.as_slice()).unwrap();
    let mut again = Vec::new();
    write_trace_csv(&back, &mut again).unwrap();
    assert_eq!(buf, again);
    assert_eq!(back.resets(), trace.resets());
}

#[test]
fn grid_summary_lists_every_level_and_reads_back_as_error_points() {
    let mut cfg = small();
    cfg.methods = vec!["gated-full".into(), "ungated-full".into()];
    cfg.orderings = vec![OrderingMode::Iid, OrderingMode::Correlated];
    let out = experiment::run_grid(&cfg).unwrap();
    assert_eq!(out.runs.len(), 2 * 2 * 2);
    assert_eq!(out.manifests.len(), 2);
    let mut buf = Vec::new();
    experiment::write_summary(&out.runs, &mut buf).unwrap();
    let pts = relgate::analysis::read_error_points(buf.as_slice()).unwrap();
    assert_eq!(pts.len(), 8);
    let h = relgate::analysis::harm_slope_by_ordering(&pts, "gated-full").unwrap();
    assert_eq!(h.per_ordering.len(), 2);
    assert_eq!((h.s_min, h.s_max), (0.3, 0.6));
    let ungated: Vec<_> = out.runs.iter().filter(|r| r.method == "ungated-full").collect();
    assert!(ungated.iter().all(|r| r.trace.records.iter().all(|x| x.r_src == 1.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn param_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_params(&bytes);
    }

    #[test]
    fn config_parser_never_panics(text in "\\PC{0,200}") {
        let _ = ExperimentConfig::from_toml(&text);
        let _ = StreamSpec::from_toml(&text);
    }

    #[test]
    fn truncated_param_blobs_are_rejected(cut in 1usize..64) {
        let cfg = small();
        let p = relgate::model::ParameterSet::random(&cfg.architecture, &mut relgate::numerics::SeededRng::new(9)).unwrap();
        let blob = encode_params(&p);
        let n = blob.len().saturating_sub(cut);
        prop_assert!(decode_params(&blob[..n]).is_err());
    }
}
