use candle_core::{DType, Device, Tensor, Var};
use lpl_core::autoencoder::{AutoencoderModel, FeaturePyramid};
use lpl_core::diffusion::to_f64_vec;
use lpl_core::lpl::*;
use lpl_core::outlier::LayerMask;
use lpl_core::LabError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::normals;

type Dims = (usize, usize, usize, usize);

const SHAPES: [Dims; 3] = [(2, 3, 8, 8), (2, 2, 16, 16), (2, 2, 32, 32)];

fn t4(v: &[f64], d: Dims) -> Tensor {
    Tensor::from_vec(v.to_vec(), d, &Device::Cpu).unwrap()
}

fn random_layers(rng: &mut ChaCha8Rng, scale: f64) -> Vec<Vec<f64>> {
    SHAPES.iter().map(|&(b, c, h, w)| normals(rng, b * c * h * w).iter().map(|v| v * scale).collect()).collect()
}

fn pyramid(layers: &[Vec<f64>]) -> FeaturePyramid {
    FeaturePyramid { features: layers.iter().zip(SHAPES).map(|(v, d)| t4(v, d)).collect() }
}

fn random_mask(rng: &mut ChaCha8Rng, d: Dims, p_drop: f64) -> LayerMask {
    let mut m = LayerMask::full(d.0, d.1, d.2, d.3);
    for k in m.keep.iter_mut() {
        if rng.random_bool(p_drop) {
            *k = 0;
        }
    }
    m
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Per-plane loop: statistics of `phi_hat` over kept positions, then the masked squared
/// difference averaged over channels and positions, summed over layers with `omega`.
fn loss_oracle(phi: &[Vec<f64>], phi_hat: &[Vec<f64>], masks: &[LayerMask], omega: &[f64], floor: f64) -> f64 {
    let mut total = 0.0;
    for (l, &(b, c, h, w)) in SHAPES.iter().enumerate() {
        let hw = h * w;
        let mut layer = 0.0;
        for bi in 0..b {
            let mut acc = 0.0;
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let keep = &masks[l].keep[off..off + hw];
                let kept: Vec<usize> = (0..hw).filter(|&i| keep[i] == 1).collect();
                if kept.is_empty() {
                    continue;
                }
                let n = kept.len() as f64;
                let mu = kept.iter().map(|&i| phi_hat[l][off + i]).sum::<f64>() / n;
                let var = kept.iter().map(|&i| (phi_hat[l][off + i] - mu).powi(2)).sum::<f64>() / n;
                let sigma = var.max(floor * floor).sqrt();
                acc += kept.iter().map(|&i| ((phi[l][off + i] - phi_hat[l][off + i]) / sigma).powi(2)).sum::<f64>();
            }
            layer += acc / (c * hw) as f64;
        }
        total += omega[l] * layer / b as f64;
    }
    total
}

fn omega() -> Vec<f64> {
    depth_weights(&SHAPES.iter().map(|d| d.2).collect::<Vec<_>>(), DepthWeighting::ProseInverseUpscale).unwrap()
}

#[test]
fn matches_plane_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let phi = random_layers(&mut rng, 1.0);
    let phi_hat = random_layers(&mut rng, 2.0);
    let masks: Vec<LayerMask> = SHAPES.iter().map(|&d| random_mask(&mut rng, d, 0.1)).collect();
    let om = omega();
    let cfg = LplConfig::default();
    let terms = lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi_hat), &masks, &om, 2, &cfg).unwrap();
    let want = loss_oracle(&phi, &phi_hat, &masks, &om, cfg.std_floor);
    let got = scalar(&terms.loss);
    assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
    assert!((terms.per_layer.iter().sum::<f64>() - got).abs() < 1e-12);
    assert_eq!(terms.gated, 2);
}

#[test]
fn identical_features_give_zero_for_every_weighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let phi = random_layers(&mut rng, 1.0);
    let masks: Vec<LayerMask> = SHAPES.iter().map(|&d| random_mask(&mut rng, d, 0.05)).collect();
    for policy in [DepthWeighting::ProseInverseUpscale, DepthWeighting::Uniform, DepthWeighting::LiteralExponential] {
        let om = depth_weights(&[8, 16, 32], policy).unwrap();
        let terms = lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi), &masks, &om, 2, &LplConfig::default()).unwrap();
        assert_eq!(scalar(&terms.loss), 0.0);
    }
    // the standardized pair is identical too
    let (a, b) = standardize_shared(&t4(&phi[0], SHAPES[0]), &t4(&phi[0], SHAPES[0]), &t4(&phi[0], SHAPES[0]).ones_like().unwrap(), 1e-6, false)
        .unwrap();
    assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
}

#[test]
fn total_loss_examples() {
    let d = Tensor::new(0.5f64, &Device::Cpu).unwrap();
    let l = Tensor::new(0.25f64, &Device::Cpu).unwrap();
    assert_eq!(scalar(&total_loss(&d, &l, 3.0).unwrap()), 1.25);
    assert_eq!(scalar(&total_loss(&d, &l, 0.0).unwrap()), 0.5);
}

#[test]
fn masked_spike_does_not_move_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let phi = random_layers(&mut rng, 1.0);
    let phi_hat = random_layers(&mut rng, 1.0);
    let mut spiked = phi_hat.clone();
    spiked[1][5 * 16 + 7] = 1e3;
    let om = omega();
    let cfg = LplConfig::default();
    let masks = detect_masks(&pyramid(&spiked), 32, &cfg).unwrap();
    assert_eq!(masks[1].keep[5 * 16 + 7], 0);
    let clean = scalar(&lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi_hat), &masks, &om, 2, &cfg).unwrap().loss);
    let dirty = scalar(&lpl_from_pyramids(&pyramid(&phi), &pyramid(&spiked), &masks, &om, 2, &cfg).unwrap().loss);
    assert!((clean - dirty).abs() < 1e-6, "{clean} vs {dirty}");

    let full: Vec<LayerMask> = SHAPES.iter().map(|&(b, c, h, w)| LayerMask::full(b, c, h, w)).collect();
    let clean = scalar(&lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi_hat), &full, &om, 2, &cfg).unwrap().loss);
    let dirty = scalar(&lpl_from_pyramids(&pyramid(&phi), &pyramid(&spiked), &full, &om, 2, &cfg).unwrap().loss);
    assert!((clean - dirty).abs() > 1e-3, "{clean} vs {dirty}");
}

#[test]
fn non_finite_features_name_layer_and_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let phi = random_layers(&mut rng, 1.0);
    let mut bad = phi.clone();
    bad[1][(2 + 1) * 256 + 3] = f64::NAN; // sample 1, channel 1 of layer 2
    let masks: Vec<LayerMask> = SHAPES.iter().map(|&(b, c, h, w)| LayerMask::full(b, c, h, w)).collect();
    match lpl_from_pyramids(&pyramid(&phi), &pyramid(&bad), &masks, &omega(), 2, &LplConfig::default()) {
        Err(e @ LabError::Numerical(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("layer 2") && msg.contains("channel 1"), "{msg}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn empty_channels_are_counted_and_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let phi = random_layers(&mut rng, 1.0);
    let phi_hat = random_layers(&mut rng, 1.0);
    let mut masks: Vec<LayerMask> = SHAPES.iter().map(|&(b, c, h, w)| LayerMask::full(b, c, h, w)).collect();
    masks[0].keep[..64].fill(0);
    masks[2].keep[3 * 1024..4 * 1024].fill(0);
    let om = omega();
    let terms = lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi_hat), &masks, &om, 2, &LplConfig::default()).unwrap();
    assert_eq!(terms.empty_channels, 2);
    let want = loss_oracle(&phi, &phi_hat, &masks, &om, 1e-6);
    assert!((scalar(&terms.loss) - want).abs() < 1e-12);
    assert!(terms.kept_fraction[0] < 1.0 && terms.kept_fraction[1] == 1.0);
}

#[test]
fn detached_gradient_matches_frozen_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let phi = random_layers(&mut rng, 1.0);
    let phi_hat = random_layers(&mut rng, 1.5);
    let masks: Vec<LayerMask> = SHAPES.iter().map(|&d| random_mask(&mut rng, d, 0.1)).collect();
    let om = omega();
    let cfg = LplConfig::default();
    assert!(cfg.detach_stats);
    let vars: Vec<Var> = phi_hat.iter().zip(SHAPES).map(|(v, d)| Var::from_tensor(&t4(v, d)).unwrap()).collect();
    let hat = FeaturePyramid { features: vars.iter().map(|v| v.as_tensor().clone()).collect() };
    let terms = lpl_from_pyramids(&pyramid(&phi), &hat, &masks, &om, 2, &cfg).unwrap();
    let grads = terms.loss.backward().unwrap();
    for (l, &(b, c, h, w)) in SHAPES.iter().enumerate() {
        let g = to_f64_vec(grads.get(vars[l].as_tensor()).unwrap()).unwrap();
        let hw = h * w;
        for plane in 0..b * c {
            let off = plane * hw;
            let keep = &masks[l].keep[off..off + hw];
            let kept: Vec<usize> = (0..hw).filter(|&i| keep[i] == 1).collect();
            let n = kept.len() as f64;
            let mu = kept.iter().map(|&i| phi_hat[l][off + i]).sum::<f64>() / n;
            let var = kept.iter().map(|&i| (phi_hat[l][off + i] - mu).powi(2)).sum::<f64>() / n;
            for i in 0..hw {
                // with mu and sigma held fixed, d/dphi_hat of (phi - phi_hat)^2 / sigma^2
                let want = if keep[i] == 1 {
                    -2.0 * om[l] * (phi[l][off + i] - phi_hat[l][off + i]) / var / (c * hw * b) as f64
                } else {
                    0.0
                };
                assert!((g[off + i] - want).abs() < 1e-12, "layer {l} plane {plane} pos {i}: {} vs {want}", g[off + i]);
            }
        }
    }
}

#[test]
fn gating_through_the_decoder() {
    let ae = AutoencoderModel::random(9, 32, DType::F32).unwrap();
    let cfg = LplConfig { base_resolution: 32, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let z0 = Tensor::from_vec(normals(&mut rng, 2 * 256).iter().map(|&v| v as f32).collect(), (2, 4, 8, 8), &Device::Cpu).unwrap();
    let hat = Tensor::from_vec(normals(&mut rng, 2 * 256).iter().map(|&v| v as f32).collect(), (2, 4, 8, 8), &Device::Cpu).unwrap();
    let off = latent_perceptual_loss(&ae, &cfg, &z0, &hat, &[false, false], None).unwrap();
    assert_eq!(scalar(&off.loss), 0.0);
    assert_eq!(off.gated, 0);
    let one = latent_perceptual_loss(&ae, &cfg, &z0, &hat, &[true, false], None).unwrap();
    let both = latent_perceptual_loss(&ae, &cfg, &z0, &hat, &[true, true], None).unwrap();
    assert_eq!(one.gated, 1);
    assert!(scalar(&one.loss) > 0.0 && scalar(&both.loss) > scalar(&one.loss));
    assert!(matches!(latent_perceptual_loss(&ae, &cfg, &z0, &hat, &[true], None), Err(LabError::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_nonnegative_and_oracle_consistent(seed in any::<u64>(), scale in 0.01f64..100.0, p_drop in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_layers(&mut rng, scale);
        let phi_hat = random_layers(&mut rng, scale);
        let masks: Vec<LayerMask> = SHAPES.iter().map(|&d| random_mask(&mut rng, d, p_drop)).collect();
        let om = omega();
        let got = scalar(&lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi_hat), &masks, &om, 2, &LplConfig::default()).unwrap().loss);
        let want = loss_oracle(&phi, &phi_hat, &masks, &om, 1e-6);
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() <= 1e-10 * want.max(1.0));
    }

    #[test]
    fn invariant_to_shared_affine_maps(seed in any::<u64>(), a in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_layers(&mut rng, 1.0);
        let phi_hat = random_layers(&mut rng, 1.0);
        let masks: Vec<LayerMask> = SHAPES.iter().map(|&(b, c, h, w)| LayerMask::full(b, c, h, w)).collect();
        let map = |ls: &[Vec<f64>]| -> Vec<Vec<f64>> { ls.iter().map(|v| v.iter().map(|x| a * x + shift).collect()).collect() };
        let om = omega();
        let cfg = LplConfig::default();
        let base = scalar(&lpl_from_pyramids(&pyramid(&phi), &pyramid(&phi_hat), &masks, &om, 2, &cfg).unwrap().loss);
        let moved = scalar(&lpl_from_pyramids(&pyramid(&map(&phi)), &pyramid(&map(&phi_hat)), &masks, &om, 2, &cfg).unwrap().loss);
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
    }
}
