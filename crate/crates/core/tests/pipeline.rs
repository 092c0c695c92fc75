//! End-to-end behaviour of the trainer, evaluation and dataset I/O on small streams.

use ike_core::eval::GalleryRule;
use ike_core::harness::preset_order;
use ike_core::synth::{generate, load_dataset, load_train_csv, write_dataset, StreamData, SyntheticSpec};
use ike_core::trainer::{
    run_sequence, run_sequence_with, train_camera, train_joint_upperbound, Hyperparams, SequenceConfig, TrainState,
    Variant,
};
use ike_core::IkeError;

const WIDTHS: [usize; 4] = [16, 16, 16, 16];

fn small(n_cameras: usize, seed: u64) -> StreamData {
    generate(&SyntheticSpec {
        n_global: 40,
        n_cameras,
        ids_per_camera: 16,
        images_per_id: 4,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn quick() -> Hyperparams {
    Hyperparams {
        epochs: 3,
        lr_step_epochs: 2,
        batch_size: 16,
        lr: 1e-3,
        ..Hyperparams::default()
    }
}

fn config(variant: Variant, order: Vec<usize>, hyper: Hyperparams) -> SequenceConfig {
    SequenceConfig {
        run_id: "t".into(),
        variant,
        order,
        order_name: None,
        hyper,
        widths: WIDTHS.to_vec(),
        seed: 4,
        gallery: GalleryRule::CrossCamera,
    }
}

#[test]
fn zero_epochs_leave_the_encoder_untouched() {
    let data = small(2, 1);
    let hyper = Hyperparams { epochs: 0, ..quick() };
    let mut state = TrainState::new(data.input_dim(), &WIDTHS, hyper, 0).unwrap();
    let before = state.historical_encoder.clone();
    let out = train_camera(&mut state, &data.train[0], Variant::Ike).unwrap();
    assert!(out.batches.is_empty());
    assert_eq!(state.historical_encoder.snapshot(), before.snapshot());
    assert_eq!(state.historical_memory.len(), data.train[0].n_ids());
}

#[test]
fn baseline_never_uses_history_terms() {
    let data = small(3, 2);
    let out = run_sequence(&data, &config(Variant::Baseline, vec![0, 1, 2], quick())).unwrap();
    for cam in &out.cameras {
        assert!(cam.association.iter().all(|m| m.is_none()));
        for b in &cam.batches {
            assert_eq!((b.id_hist, b.kd, b.mkd), (0.0, 0.0, 0.0));
            assert_eq!(b.total, b.id);
        }
    }
    // Without association every camera appends all of its identities.
    let n: Vec<usize> = data.train.iter().map(|c| c.n_ids()).collect();
    assert_eq!(out.report.nh_trajectory, vec![n[0], n[0] + n[1], n[0] + n[1] + n[2]]);
}

#[test]
fn history_terms_are_active_from_the_second_camera() {
    let data = small(2, 3);
    let out = run_sequence(&data, &config(Variant::Ike, vec![0, 1], quick())).unwrap();
    assert!(out.cameras[0].batches.iter().all(|b| b.kd == 0.0 && b.id_hist == 0.0));
    assert!(out.cameras[1].batches.iter().any(|b| b.kd > 0.0 && b.mkd > 0.0 && b.id_hist > 0.0));
    let d = run_sequence(&data, &config(Variant::IkeD, vec![0, 1], quick())).unwrap();
    assert!(d.cameras[1].batches.iter().all(|b| b.mkd == 0.0));
}

#[test]
fn every_variant_trains_the_first_camera_identically() {
    let data = small(2, 5);
    let reference = run_sequence(&data, &config(Variant::Baseline, vec![1, 0], quick())).unwrap();
    for v in Variant::ALL {
        let out = run_sequence(&data, &config(v, vec![1, 0], quick())).unwrap();
        assert_eq!(out.report.per_camera_map[0], reference.report.per_camera_map[0], "{v}");
        assert_eq!(out.cameras[0].batches, reference.cameras[0].batches, "{v}");
    }
}

#[test]
fn single_camera_scores_agree() {
    let data = small(1, 6);
    let hyper = Hyperparams { epochs: 2, ..quick() };
    let mut cfg = config(Variant::Ike, vec![0], hyper);
    // No cross-camera pair exists in a one-camera stream.
    assert!(matches!(run_sequence(&data, &cfg), Err(IkeError::EmptyGallery)));
    cfg.gallery = GalleryRule::ExcludeSelf;
    let out = run_sequence(&data, &cfg).unwrap();
    assert_eq!(out.report.fmap, out.report.mean_map);
    assert!(out.report.is_consistent());
}

#[test]
fn runs_are_deterministic() {
    let data = small(3, 7);
    let cfg = config(Variant::Ike, vec![2, 0, 1], quick());
    let a = run_sequence(&data, &cfg).unwrap();
    let b = run_sequence(&data, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.state.historical_encoder.snapshot(), b.state.historical_encoder.snapshot());
    assert_eq!(a.state.historical_memory, b.state.historical_memory);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(run_sequence(&data, &other).unwrap().report.per_camera_map, a.report.per_camera_map);
}

#[test]
fn memory_never_shrinks_and_stays_unit() {
    let data = small(4, 8);
    for v in Variant::ALL {
        let out = run_sequence(&data, &config(v, vec![0, 1, 2, 3], quick())).unwrap();
        assert!(out.report.nh_trajectory.windows(2).all(|w| w[0] <= w[1]), "{v}");
        assert!(out.state.historical_memory.max_norm_error() < 1e-9);
        assert!(out.report.per_camera_map.iter().all(|m| (0.0..=1.0).contains(m)));
    }
}

#[test]
fn all_presets_complete() {
    let data = small(6, 9);
    let hyper = Hyperparams { epochs: 1, ..quick() };
    for name in ["T1", "T2", "T3", "T4", "T5"] {
        let order = preset_order(name).unwrap();
        let out = run_sequence(&data, &config(Variant::Ike, order.clone(), hyper.clone())).unwrap();
        assert_eq!(out.report.order, order);
        assert_eq!(out.report.per_camera_map.len(), 6);
        assert_eq!(out.report.fmap, out.report.per_camera_map[5]);
    }
}

#[test]
fn observer_sees_every_camera() {
    let data = small(3, 10);
    let mut seen = Vec::new();
    run_sequence_with(&data, &config(Variant::IkeU, vec![1, 2, 0], quick()), &mut |k, s| {
        seen.push((k, s.step));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(0, 1), (1, 2), (2, 3)]);
}

#[test]
fn bad_order_is_rejected() {
    let data = small(3, 11);
    let err = run_sequence(&data, &config(Variant::Ike, vec![0, 0, 1], quick())).unwrap_err();
    assert!(matches!(err, IkeError::Config(_)));
}

#[test]
fn joint_training_separates_clean_identities() {
    let data = generate(&SyntheticSpec {
        n_global: 30,
        n_cameras: 3,
        ids_per_camera: 30,
        images_per_id: 3,
        noise: 0.0,
        camera_shift: 0.0,
        seed: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let hyper = Hyperparams { epochs: 5, ..quick() };
    let (_, map) = train_joint_upperbound(&data, &hyper, &WIDTHS, 0, GalleryRule::CrossCamera).unwrap();
    assert!(map >= 0.99, "upper bound {map}");
}

#[test]
fn feature_files_round_trip() {
    let data = small(3, 13);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back, data);
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    std::fs::write(&path, "camera,local_id,global_id,f0,f1\n0,0,3,1.0,0.0\n0,1,4,abc,1.0\n").unwrap();
    match load_train_csv(&path, 2, false) {
        Err(IkeError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "camera,local_id,global_id,f0\n0,0,3,1.0\n").unwrap();
    assert!(matches!(
        load_train_csv(&path, 2, false),
        Err(IkeError::DimensionMismatch { expected: 2, found: 1, .. })
    ));
}
