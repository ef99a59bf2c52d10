use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Graph, Tensor};
use crate::volume::Volume;

fn tiny() -> ModelConfig {
    ModelConfig {
        input_side: 8,
        patch_side: 4,
        channels: 1,
        enc_dim: 12,
        enc_blocks: 2,
        enc_heads: 2,
        dec_dim: 8,
        dec_blocks: 1,
        dec_heads: 2,
        mask_ratio: 0.75,
        predictor_hidden: 16,
        mlp_ratio: 2,
    }
}

fn random_volume(cfg: &ModelConfig, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.channels * cfg.input_side.pow(3);
    Volume::new(cfg.channels, [cfg.input_side; 3], (0..n).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

fn cls_of(model: &MaskedVit3d, params: &ParamStore<f64>, v: &Volume<f64>, order: &[usize]) -> Vec<f64> {
    let input = model.model_input(v).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let enc = model.encode_tokens(&mut g, &p, &input, order).unwrap();
    g.value(enc.cls).data().to_vec()
}

#[test]
fn configs_validate() {
    ModelConfig::paper().validate().unwrap();
    ModelConfig::desk().validate().unwrap();
    let bad = ModelConfig {
        enc_heads: 5,
        ..ModelConfig::desk()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        input_side: 30,
        ..ModelConfig::desk()
    };
    assert!(bad.validate().is_err());
    assert_eq!(ModelConfig::paper().num_patches(), 1728);
    assert_eq!(ModelConfig::paper().patch_voxels(), 2048);
}

#[test]
fn mask_token_is_one_shared_vector_and_positions_are_not_params() {
    let model = MaskedVit3d::new(ModelConfig::desk()).unwrap();
    let masks: Vec<_> = model.layout.specs.iter().filter(|s| s.name.contains("mask_token")).collect();
    assert_eq!(masks.len(), 1);
    assert_eq!(masks[0].shape, vec![1, 32]);
    assert!(model.layout.specs.iter().all(|s| !s.name.contains("pos")));
}

#[test]
fn encoder_token_count_follows_plan() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(1);
    let input = model.model_input(&random_volume(&cfg, 2)).unwrap();
    let plan = make_mask_plan(8, 0.75, 3).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let enc = model.encode(&mut g, &p, &input, &plan).unwrap();
    assert_eq!(g.shape(enc.all), &[plan.visible.len() + 1, 12]);
    assert_eq!(g.shape(enc.tokens), &[plan.visible.len(), 12]);
}

#[test]
fn different_plans_give_different_cls() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(4);
    let v = random_volume(&cfg, 5);
    let a = cls_of(&model, &params, &v, &[0, 1, 2, 3]);
    let b = cls_of(&model, &params, &v, &[4, 5, 6, 7]);
    assert_ne!(a, b);
}

#[test]
fn cls_is_invariant_to_visible_token_order() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(6);
    let v = random_volume(&cfg, 7);
    let a = cls_of(&model, &params, &v, &[1, 3, 4, 6]);
    let b = cls_of(&model, &params, &v, &[6, 1, 4, 3]);
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(diff <= 1e-5 * norm, "diff {diff} norm {norm}");
}

#[test]
fn decode_covers_full_volume_and_reaches_mask_token() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(8);
    let v = random_volume(&cfg, 9);
    let input = model.model_input(&v).unwrap();

    for plan in [make_mask_plan(8, 0.5, 10).unwrap(), MaskPlan::all_visible(8)] {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let enc = model.encode(&mut g, &p, &input, &plan).unwrap();
        let rec = model.decode(&mut g, &p, &enc, &plan).unwrap();
        let vol = unpatchify_var(&mut g, rec, &cfg).unwrap();
        assert_eq!(g.shape(vol), &[1, 8, 8, 8]);
        assert!(g.value(vol).all_finite());

        let target = g.constant(input.clone());
        let d = g.sub(rec, target).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(p.var(model.mask_token_id()));
        let nonzero = grad.is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
        assert_eq!(nonzero, !plan.hidden.is_empty());
    }
}

#[test]
fn plan_mismatch_is_rejected() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(1);
    let input = model.model_input(&random_volume(&cfg, 1)).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let wrong = make_mask_plan(27, 0.5, 1).unwrap();
    assert!(model.encode(&mut g, &p, &input, &wrong).is_err());
    let plan = make_mask_plan(8, 0.5, 1).unwrap();
    let other = make_mask_plan(8, 0.5, 2).unwrap();
    let enc = model.encode(&mut g, &p, &input, &plan).unwrap();
    if other.visible != plan.visible {
        assert!(model.decode(&mut g, &p, &enc, &other).is_err());
    }
    let wrong_vol = Volume::<f64>::zeros(1, [16; 3]);
    assert!(model.extract_features(&params, &wrong_vol).is_err());
}

#[test]
fn features_are_deterministic_with_enc_dim_length() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg.clone()).unwrap();
    let params = model.init_params::<f64>(11);
    let v = random_volume(&cfg, 12);
    let a = model.extract_features(&params, &v).unwrap();
    let b = model.extract_features(&params, &v).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a, b);
    assert_eq!(model.init_params::<f64>(11), params);
}

#[test]
fn predictor_shape_and_zero_init() {
    let cfg = tiny();
    let model = MaskedVit3d::new(cfg).unwrap();
    let mut params = model.init_params::<f64>(13);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(Tensor::from_f64(&[1, 12], &[0.3; 12]).unwrap());
    let out = model.predictor_head(&mut g, &p, f).unwrap();
    assert_eq!(g.shape(out), &[1, 12]);

    let (w, b) = model.predictor_out_ids();
    params.get_mut(w).data_mut().fill(0.0);
    params.get_mut(b).data_mut().fill(0.0);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(Tensor::from_f64(&[1, 12], &[0.3; 12]).unwrap());
    let out = model.predictor_head(&mut g, &p, f).unwrap();
    assert!(g.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let model = MaskedVit3d::new(tiny()).unwrap();
    let params = model.init_params::<f64>(14);
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let eval = |xs: &[f64]| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f = g.param(Tensor::from_f64(&[1, 12], xs).unwrap());
        let out = model.predictor_head(&mut g, &p, f).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum(sq);
        (g, f, loss)
    };
    let (mut g, f, loss) = eval(&x);
    g.backward(loss).unwrap();
    let grad = g.grad(f).unwrap();
    let h = 1e-5;
    for i in 0..12 {
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[i] += h;
        dn[i] -= h;
        let (gu, _, lu) = eval(&up);
        let (gd, _, ld) = eval(&dn);
        let fd = (gu.value(lu).item() - gd.value(ld).item()) / (2.0 * h);
        let an = grad.data()[i];
        assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{i}: {fd} vs {an}");
    }
}

#[test]
fn masked_encoder_attention_cost_is_below_thirty_percent() {
    let cfg = ModelConfig::paper();
    let k = cfg.num_patches();
    let visible = k - hidden_count(k, 0.75);
    let ratio = encoder_attention_macs(&cfg, visible) as f64 / encoder_attention_macs(&cfg, k) as f64;
    assert!(ratio < 0.3, "{ratio}");
}

#[test]
fn hidden_frequency_is_uniform() {
    let (k, p, draws) = (64, 0.75, 10_000);
    let mut counts = [0usize; 64];
    for s in 0..draws {
        for &i in &make_mask_plan(k, p, s).unwrap().hidden {
            counts[i] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - p).abs() <= 0.02, "{f}");
    }
}
