use super::*;
use crate::volume::{synthesize, SyntheticConfig};

pub(crate) fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.input_side = 16;
    c.model.patch_side = 8;
    c.model.enc_dim = 16;
    c.model.enc_blocks = 1;
    c.model.enc_heads = 2;
    c.model.dec_dim = 8;
    c.model.dec_blocks = 1;
    c.model.dec_heads = 2;
    c.model.predictor_hidden = 8;
    c.loss.perceptual_widths = vec![4, 4];
    c.schedule.total_epochs = 4;
    c.schedule.warmup_epochs = 1;
    c.train.batch_size = 2;
    c.train.seed = 11;
    c.data.crop_side = 16;
    c
}

fn volumes<T: Real>(n: usize) -> Vec<Volume<T>> {
    synthesize::<T>(&SyntheticConfig::new(n, 16, 3))
        .unwrap()
        .into_iter()
        .map(|r| r.volume)
        .collect()
}

#[test]
fn log_csv_round_trip() {
    let log = TrainLog {
        rows: vec![LogRow {
            epoch: 2,
            step: 7,
            lr: 1e-3 / 3.0,
            lambda1: 0.0099,
            l_rec: 0.1 + 0.2,
            l_per: 1e-12,
            l_edge: 3.5,
            l_cl: -0.25,
            total: 4.0,
            wall_ms: 12.5,
        }],
    };
    let text = log.to_csv();
    assert!(text.starts_with(TRAINLOG_HEADER));
    assert_eq!(TrainLog::from_csv(&text).unwrap(), log);
    assert!(TrainLog::from_csv("epoch,step\n").is_err());
}

#[test]
fn epoch_order_is_a_permutation_and_depends_on_epoch() {
    let a = epoch_order(1, 0, 9);
    let mut s = a.clone();
    s.sort_unstable();
    assert_eq!(s, (0..9).collect::<Vec<_>>());
    assert_ne!(a, epoch_order(1, 1, 9));
    assert_eq!(a, epoch_order(1, 0, 9));
}

#[test]
fn views_use_independent_plans() {
    let cfg = tiny_config();
    let v = &volumes::<f64>(2)[0];
    let [(a, pa), (b, pb)] = sample_views(&cfg, v, 0, 0).unwrap();
    assert_ne!(a.voxels, b.voxels);
    assert_eq!(pa.hidden.len(), pb.hidden.len());
    assert_ne!(pa.seed, pb.seed);
    let [(a2, _), _] = sample_views(&cfg, v, 0, 0).unwrap();
    assert_eq!(a.voxels, a2.voxels);
}

#[test]
fn rows_are_ordered_and_finite_with_partial_batches() {
    let cfg = tiny_config();
    let out = train::<f64>(&cfg, &volumes(5), TrainOptions::default()).unwrap();
    // 5 volumes at batch 2: three steps per epoch, the last one partial.
    assert_eq!(out.log.rows.len(), 12);
    for (i, r) in out.log.rows.iter().enumerate() {
        assert_eq!((r.epoch, r.step), (i / 3, i as u64));
        assert!([r.lr, r.l_rec, r.l_per, r.l_edge, r.l_cl, r.total].iter().all(|x| x.is_finite()));
    }
    assert_eq!(out.checkpoint.meta.next_epoch, 4);
    assert_eq!(out.checkpoint.meta.step, 12);
}

#[test]
fn repeated_run_is_bit_identical_and_resume_matches() {
    let cfg = tiny_config();
    let vols = volumes::<f64>(4);
    let a = train::<f64>(&cfg, &vols, TrainOptions::default()).unwrap();
    let b = train::<f64>(&cfg, &vols, TrainOptions::default()).unwrap();
    assert!(a.log.same_trajectory(&b.log));
    assert_eq!(a.checkpoint.params, b.checkpoint.params);

    let dir = tempfile::tempdir().unwrap();
    let first = train::<f64>(
        &cfg,
        &vols,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_before: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let (_, ck) = load_run::<f64>(&dir.path().join("checkpoints/final.vckpt")).unwrap();
    assert_eq!(ck.meta.next_epoch, 2);
    let second = train::<f64>(
        &cfg,
        &vols,
        TrainOptions {
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap();
    let mut joined = first.log.clone();
    joined.rows.extend(second.log.rows);
    assert!(joined.same_trajectory(&a.log));
    assert_eq!(second.checkpoint.params, a.checkpoint.params);
    let on_disk = TrainLog::read(&dir.path().join("trainlog.csv")).unwrap();
    assert!(on_disk.same_trajectory(&first.log));
}

#[test]
fn divergence_reports_recent_rows() {
    let mut cfg = tiny_config();
    cfg.schedule.base_lr = 1e30;
    cfg.schedule.total_epochs = 30;
    match train::<f32>(&cfg, &volumes(4), TrainOptions::default()) {
        Err(TrainError::Divergence { rows, .. }) => {
            assert!(!rows.is_empty() && rows.len() <= 10);
            assert!(!rows.last().unwrap().total.is_finite() || rows.iter().all(|r| r.total.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.rows.len())),
    }
}

#[test]
fn reconstruct_zeroes_hidden_patches_and_stays_finite() {
    let cfg = tiny_config();
    let model = MaskedVit3d::new(cfg.model.clone()).unwrap();
    let params = model.init_params::<f64>(0);
    let v = &volumes::<f64>(2)[1];
    let r = reconstruct(&model, &params, v, 0.75, 5).unwrap();
    assert_eq!(r.plan.hidden.len(), 6);
    let masked_tokens = patchify(&r.masked, 8).unwrap();
    let orig = patchify(v, 8).unwrap();
    for i in 0..8 {
        let row = &masked_tokens.data()[i * 512..(i + 1) * 512];
        if r.plan.hidden.contains(&i) {
            assert!(row.iter().all(|&x| x == 0.0));
        } else {
            assert_eq!(row, &orig.data()[i * 512..(i + 1) * 512]);
        }
    }
    assert!(r.reconstruction.voxels.iter().all(|x| x.is_finite()));
    assert_eq!(r.reconstruction.dims, [16; 3]);
}

#[test]
fn paper_plan_hides_1296_of_1728_patches() {
    let cfg = crate::model::ModelConfig::paper();
    let plan = make_mask_plan(cfg.num_patches(), 0.75, 1).unwrap();
    assert_eq!((cfg.num_patches(), plan.hidden.len()), (1728, 1296));
}
