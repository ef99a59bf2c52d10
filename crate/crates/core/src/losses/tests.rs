use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{make_mask_plan, ModelConfig};
use crate::tensor::Tensor;

fn random_volume(channels: usize, dims: [usize; 3], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Volume<f64> {
    let n = channels * dims.iter().product::<usize>();
    Volume::new(channels, dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Replicate-padded brute-force Sobel magnitude.
fn sobel_oracle(v: &Volume<f64>) -> Vec<f64> {
    let bank = SobelBank::new();
    let [d, h, w] = v.dims;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(v.voxels.len());
    for c in 0..v.channels {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut norm2 = 0.0;
                    for axis in 0..3 {
                        let k = bank.kernel(axis);
                        let mut acc = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                for e in 0..3 {
                                    let zz = clamp(z as isize + a as isize - 1, d);
                                    let yy = clamp(y as isize + b as isize - 1, h);
                                    let xx = clamp(x as isize + e as isize - 1, w);
                                    acc += v.get(c, zz, yy, xx) * k[(a * 3 + b) * 3 + e];
                                }
                            }
                        }
                        norm2 += acc * acc;
                    }
                    out.push(f64::max(norm2, 0.0).sqrt());
                }
            }
        }
    }
    out
}

#[test]
fn sobel_kernels_are_zero_sum_axis_permutations() {
    let bank = SobelBank::new();
    for axis in 0..3 {
        assert_eq!(bank.kernel(axis).iter().sum::<f64>(), 0.0);
    }
    let (kx, ky, kz) = (bank.kernel(0), bank.kernel(1), bank.kernel(2));
    for a in 0..3 {
        for b in 0..3 {
            for e in 0..3 {
                let at = |k: &[f64], i: usize, j: usize, l: usize| k[(i * 3 + j) * 3 + l];
                assert_eq!(at(kx, a, b, e), at(ky, a, e, b));
                assert_eq!(at(kx, a, b, e), at(kz, e, b, a));
            }
        }
    }
    assert_eq!(kx[(1 * 3 + 1) * 3 + 2], 0.125);
    assert_eq!(kx[(1 * 3 + 1) * 3], -0.125);
    let raw = SobelBank::with_scale(SobelScale::Raw);
    assert_eq!(raw.kernel(0)[(1 * 3 + 1) * 3 + 2], 4.0);
    for (u, r) in bank.kernels().data().iter().zip(raw.kernels().data()) {
        assert_eq!(u * 32.0, *r);
    }
}

#[test]
fn sobel_constant_is_zero_and_ramp_is_flat_inside() {
    let v = Volume::<f64>::new(1, [5, 6, 7], vec![42.0; 210]).unwrap();
    assert!(sobel3d(&v).unwrap().voxels.iter().all(|&e| e == 0.0));

    let dims = [6, 6, 6];
    let mut ramp = Volume::<f64>::zeros(1, dims);
    for z in 0..6 {
        for y in 0..6 {
            for x in 0..6 {
                let i = ramp.index(0, z, y, x);
                ramp.voxels[i] = 3.0 * x as f64;
            }
        }
    }
    let e = sobel3d(&ramp).unwrap();
    // A unit-gain kernel returns the slope itself away from the x borders.
    for z in 0..6 {
        for y in 0..6 {
            for x in 1..5 {
                assert_eq!(e.get(0, z, y, x), 3.0);
            }
        }
    }
}

#[test]
fn sobel_matches_oracle_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let shapes = [(1, [6, 6, 6]), (2, [3, 4, 5]), (1, [7, 3, 6])];
    for i in 0..21 {
        let (c, dims) = shapes[i % shapes.len()];
        let v = random_volume(c, dims, -10.0, 10.0, &mut rng);
        assert_eq!(sobel3d(&v).unwrap().voxels, sobel_oracle(&v), "instance {i}");
    }
    assert!(sobel3d(&Volume::<f64>::zeros(1, [2, 5, 5])).is_err());
}

#[test]
fn reconstruction_loss_examples_and_oracle() {
    let z = Volume::<f64>::zeros(2, [3, 3, 3]);
    let ones = z.map_voxels(|_| 1.0);
    assert_eq!(reconstruction_loss(&z, &z).unwrap(), 0.0);
    assert_eq!(reconstruction_loss(&z, &ones).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random_volume(2, [4, 3, 5], 0.0, 255.0, &mut rng);
        let b = random_volume(2, [4, 3, 5], 0.0, 255.0, &mut rng);
        let mut acc = 0.0;
        for (x, y) in a.voxels.iter().zip(&b.voxels) {
            acc += (x - y) * (x - y);
        }
        assert_eq!(reconstruction_loss(&a, &b).unwrap(), acc / a.voxels.len() as f64);
    }
    assert!(reconstruction_loss(&z, &Volume::zeros(1, [3, 3, 3])).is_err());
}

#[test]
fn edge_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_volume(1, [5, 5, 5], 0.0, 255.0, &mut rng);
    let b = random_volume(1, [5, 5, 5], 0.0, 255.0, &mut rng);
    assert_eq!(edge_loss(&a, &a).unwrap(), 0.0);
    let c1 = a.map_voxels(|_| 10.0);
    let c2 = a.map_voxels(|_| 200.0);
    assert_eq!(edge_loss(&c1, &c2).unwrap(), 0.0);
    let composed = reconstruction_loss(&sobel3d(&a).unwrap(), &sobel3d(&b).unwrap()).unwrap();
    assert_eq!(edge_loss(&a, &b).unwrap(), composed);
}

#[test]
fn perceptual_loss_zero_deterministic_and_monotone() {
    let net = PerceptualNet::<f64>::new(1, &[4, 6, 8], 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = random_volume(1, [4, 8, 8], 0.0, 1.0, &mut rng);
    let dir = random_volume(1, [4, 8, 8], -1.0, 1.0, &mut rng);
    assert_eq!(perceptual_loss(&base, &base, &net, PerceptualAxes::Axial).unwrap(), 0.0);

    let again = PerceptualNet::<f64>::new(1, &[4, 6, 8], 11).unwrap();
    assert_eq!(net, again);
    let mut prev = 0.0;
    for step in 1..=6 {
        let eps = 1e-3 * step as f64;
        let mut other = base.clone();
        other.voxels.iter_mut().zip(&dir.voxels).for_each(|(x, d)| *x += eps * d);
        let l1 = perceptual_loss(&base, &other, &net, PerceptualAxes::Axial).unwrap();
        let l2 = perceptual_loss(&base, &other, &again, PerceptualAxes::Axial).unwrap();
        assert_eq!(l1, l2);
        assert!(l1 > prev, "step {step}: {l1} <= {prev}");
        prev = l1;
    }
    let cube = random_volume(1, [8, 8, 8], 0.0, 1.0, &mut rng);
    assert!(perceptual_loss(&cube, &cube.map_voxels(|x| x * 0.5), &net, PerceptualAxes::All).unwrap() > 0.0);
    assert!(perceptual_loss(&cube, &base, &net, PerceptualAxes::Axial).is_err());
}

#[test]
fn contrastive_examples_and_symmetry() {
    let f = [1.0f64, -2.0, 0.5];
    assert!((contrastive_loss(&f, &f).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(contrastive_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert!(contrastive_loss::<f64>(&[0.0, 0.0], &[0.0, 0.0]).unwrap().is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (l1, l2) = (contrastive_loss(&a, &b).unwrap(), contrastive_loss(&b, &a).unwrap());
        assert!((l1 - l2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&l1));
    }
}

#[test]
fn stopped_targets_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = |n| Tensor::from_f64(&[n], &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let values: Vec<Tensor<f64>> = (0..4).map(|_| t(8)).collect();
    for stop in [true, false] {
        let mut g = Graph::new();
        let [p1, z1, p2, z2] = [0, 1, 2, 3].map(|i| g.param(values[i].clone()));
        let l = symmetric_negative_cosine(&mut g, p1, z1, p2, z2, stop).unwrap();
        g.backward(l).unwrap();
        for z in [z1, z2] {
            let grad = g.grad(z);
            let zero = grad.as_ref().is_none_or(|t| t.data().iter().all(|&x| x == 0.0));
            assert_eq!(zero, stop);
        }
        for p in [p1, p2] {
            assert!(g.grad(p).unwrap().data().iter().any(|&x| x != 0.0));
        }
    }
}

fn tiny_setup() -> (MaskedVit3d, PerceptualNet<f64>, Volume<f64>, Volume<f64>) {
    let cfg = ModelConfig {
        input_side: 8,
        patch_side: 4,
        channels: 1,
        enc_dim: 12,
        enc_blocks: 1,
        enc_heads: 2,
        dec_dim: 6,
        dec_blocks: 1,
        dec_heads: 2,
        mask_ratio: 0.5,
        predictor_hidden: 8,
        mlp_ratio: 2,
    };
    let model = MaskedVit3d::new(cfg).unwrap();
    let net = PerceptualNet::new(1, &[2, 3], 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let v1 = random_volume(1, [8; 3], 0.0, 255.0, &mut rng);
    let v2 = random_volume(1, [8; 3], 0.0, 255.0, &mut rng);
    (model, net, v1, v2)
}

#[test]
fn report_total_recomputes_and_gradients_match_finite_differences() {
    let (model, net, v1, v2) = tiny_setup();
    let params = model.init_params::<f64>(2);
    let (plan1, plan2) = (make_mask_plan(8, 0.5, 1).unwrap(), make_mask_plan(8, 0.5, 2).unwrap());
    let sobel = SobelBank::new();
    let w = LossWeights {
        lambda1: 0.01,
        lambda2: 10.0,
    };
    for cfg in [
        LossConfig::default(),
        LossConfig {
            rec_target: RecTarget::Hidden,
            decode_both: true,
            feature: FeatureSource::Mean,
            predictor: false,
            perceptual_axes: PerceptualAxes::All,
            ..LossConfig::default()
        },
        LossConfig {
            feature: FeatureSource::Mean,
            ..LossConfig::default()
        },
    ] {
        let ctx = LossContext {
            model: &model,
            net: &net,
            sobel: &sobel,
            cfg: &cfg,
        };
        let pair = ViewPair {
            view1: &v1,
            view2: &v2,
            plan1: &plan1,
            plan2: &plan2,
        };
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let out = total_loss(&mut g, &p, &ctx, &pair, w).unwrap();
        let (loss, report) = (out.loss, out.report);
        let (f1, f2) = out.features.unwrap();
        let targets = (g.value(f1).clone(), g.value(f2).clone());
        let eval = |ps: &crate::model::ParamStore<f64>| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let frozen = Some((&targets.0, &targets.1));
            total_loss_frozen(&mut g, &p, &ctx, &pair, w, frozen).unwrap().report.total
        };
        assert_eq!(eval(&params), report.total);
        assert!((report.total - report.recompute_total()).abs() < 1e-9);
        assert!(report.l_rec > 0.0 && report.l_per > 0.0 && report.l_edge > 0.0);
        g.backward(loss).unwrap();
        let grads = p.grads(&g);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        for (i, grad) in grads.iter().enumerate() {
            let j = rng.random_range(0..grad.len());
            let mut up = params.clone();
            up.tensors[i].data_mut()[j] += h;
            let mut dn = params.clone();
            dn.tensors[i].data_mut()[j] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = grad.data()[j];
            let scale = fd.abs().max(an.abs());
            assert!(
                scale < 1e-9 || (fd - an).abs() / scale < 1e-4,
                "{} [{j}]: fd {fd} vs analytic {an}",
                params.names[i]
            );
        }
    }
}

#[test]
fn rec_only_skips_other_terms() {
    let (model, net, v1, v2) = tiny_setup();
    let params = model.init_params::<f64>(2);
    let plan = make_mask_plan(8, 0.5, 1).unwrap();
    let cfg = LossConfig::rec_only();
    let ctx = LossContext {
        model: &model,
        net: &net,
        sobel: &SobelBank::new(),
        cfg: &cfg,
    };
    let pair = ViewPair {
        view1: &v1,
        view2: &v2,
        plan1: &plan,
        plan2: &plan,
    };
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let w = LossWeights {
        lambda1: 0.01,
        lambda2: 10.0,
    };
    let r = total_loss(&mut g, &p, &ctx, &pair, w).unwrap().report;
    assert_eq!((r.l_per, r.l_edge, r.l_cl), (0.0, 0.0, 0.0));
    assert_eq!(r.total, r.l_rec);
}

