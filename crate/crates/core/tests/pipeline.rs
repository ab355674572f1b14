use std::sync::Arc;

use frisbi::io;
use frisbi::metrics::{evaluate, EvalConfig};
use frisbi::nets::{FlowConfig, FlowModel};
use frisbi::numeric::{Matrix, RngStream, StreamId};
use frisbi::ot::mixture_weights_batch;
use frisbi::pipeline::{
    amortize, amortized_posterior, infer, sparsify, train_npe, train_transfer, AmortizeConfig,
    JointLossConfig, NpeConfig, TrainedPipeline,
};
use frisbi::simulate::{make_bundle, BundleSizes, SimulatorConfig};

fn stack(xs: impl Iterator<Item = Vec<f64>>) -> Matrix {
    let rows: Vec<Vec<f64>> = xs.collect();
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn tiny_pipeline_end_to_end() {
    let sizes = BundleSizes {
        n_sbi: 150,
        n_u: 40,
        n_ot: 40,
        n_calib_pool: 10,
        n_test: 8,
    };
    let bundle = make_bundle(&sizes, &SimulatorConfig::default(), (0.1, 0.5), 3).unwrap();

    let flow = FlowConfig::default();
    let npe_cfg = NpeConfig {
        epochs: 3,
        ..NpeConfig::default()
    };
    let models = train_npe(&bundle.d_sbi, &flow, &npe_cfg, 11).unwrap();
    assert_eq!(models.report.epoch_losses.len(), 3);

    let transfer_cfg = JointLossConfig {
        epochs: 2,
        ..JointLossConfig::default()
    };
    let outcome = train_transfer(&bundle.d_u, &bundle.d_ot, &bundle.d_calib, &models.nse, &transfer_cfg, 12).unwrap();
    assert_eq!(outcome.sim_embeddings.rows(), sizes.n_ot + sizes.n_calib_pool);

    let z = outcome
        .encoder
        .encode_batch(&stack(bundle.d_u.iter().map(|o| o.x.as_slice().to_vec())))
        .unwrap();
    let alpha = mixture_weights_batch(&z, &outcome.sim_embeddings, transfer_cfg.gamma).unwrap();
    for i in 0..alpha.rows() {
        let s: f64 = alpha.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let am_cfg = AmortizeConfig {
        epochs: 1,
        ..AmortizeConfig::default()
    };
    let w = sparsify(&alpha, am_cfg.weight_floor, am_cfg.max_atoms).unwrap();
    let (q, report) = amortize(&z, &w, &outcome.sim_embeddings, &models.npe, &flow, &am_cfg, 13).unwrap();
    assert!(!report.diverged);

    let pipeline = TrainedPipeline {
        nse: models.nse.clone(),
        npe: Arc::new(models.npe.clone()),
        real_encoder: outcome.encoder.clone(),
        amortizer: Arc::new(q),
        sim_embeddings: outcome.sim_embeddings.clone(),
        gamma: transfer_cfg.gamma,
    };
    let mut rng = RngStream::new(5, StreamId::FlowSampling);
    let inf = infer(&bundle.d_test[0].x, &pipeline, 64, &mut rng).unwrap();
    assert_eq!(inf.samples.len(), 64);
    assert!(inf.samples.iter().all(|t| t.in_box()));

    let posts: Vec<_> = bundle
        .d_test
        .iter()
        .map(|o| amortized_posterior(&pipeline.real_encoder, &pipeline.amortizer, &o.x).unwrap())
        .collect();
    let truths: Vec<_> = bundle.d_test.iter().map(|o| o.theta).collect();
    let a = evaluate(&posts, &truths, &EvalConfig::default(), 9).unwrap();
    let b = evaluate(&posts, &truths, &EvalConfig::default(), 9).unwrap();
    assert_eq!(a, b);
    assert!(a.lpp.is_finite());
    assert!(a.acauc.abs() <= 0.5);

    // The amortizer survives a checkpoint round trip bit for bit.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.ckpt.json");
    io::save_checkpoint(&path, pipeline.amortizer.to_checkpoint(), "h").unwrap();
    let back = FlowModel::from_checkpoint(&io::load_checkpoint(&path, "h").unwrap(), flow).unwrap();
    let ctx = z.row(0).to_vec();
    let t = truths[0];
    assert_eq!(
        back.log_prob(&t, &ctx).unwrap().to_bits(),
        pipeline.amortizer.log_prob(&t, &ctx).unwrap().to_bits()
    );
    assert!(io::load_checkpoint(&path, "other").is_err());
}
