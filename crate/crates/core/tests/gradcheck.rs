use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fusehar_core::encoder::{Encoder, EncoderRegistry};
use fusehar_core::fusion::{cross_entropy_loss, cross_entropy_with_grad, MlpHead, MlpHeadConfig};
use fusehar_core::nn::gradcheck::{check, GradCheckReport};
use fusehar_core::nn::Mode;
use fusehar_core::params::{Gradients, ModelParams};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + 3) % classes).collect()
}

/// Loss of `head(encoder(x))` and its gradients for both parameter sets.
fn loss_and_grads(
    enc: &dyn Encoder,
    ep: &ModelParams,
    head: &MlpHead,
    hp: &ModelParams,
    x: &ArrayD<f64>,
    y: &[usize],
) -> (f64, Gradients, Gradients) {
    let (feat, tape) = enc.forward(ep, x.clone(), &mut Mode::Eval).unwrap();
    let (logits, htape) = head.forward(hp, &feat).unwrap();
    let (loss, dl) = cross_entropy_with_grad(&logits.values, y).unwrap();
    let mut hg = Gradients::new();
    let dfeat = head.backward(hp, htape, dl, &mut hg).unwrap();
    let mut eg = Gradients::new();
    enc.backward(ep, tape, dfeat, &mut eg).unwrap();
    (loss, eg, hg)
}

fn encoder_loss(
    enc: &dyn Encoder,
    ep: &ModelParams,
    head: &MlpHead,
    hp: &ModelParams,
    x: &ArrayD<f64>,
    y: &[usize],
) -> f64 {
    let (feat, _) = enc.forward(ep, x.clone(), &mut Mode::Eval).unwrap();
    cross_entropy_loss(&head.forward(hp, &feat).unwrap().0.values, y).unwrap()
}

fn assert_report(name: &str, r: &GradCheckReport) {
    println!(
        "{name}: {}/{} coordinates within {TOL} (worst {:.2e})",
        r.passed, r.checked, r.worst_relative_error
    );
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.pass_fraction() >= 0.95,
        "{name}: pass fraction {:.3}",
        r.pass_fraction()
    );
}

fn check_encoder(kind: &str, config: serde_json::Value, x: ArrayD<f64>, per_tensor: usize) {
    let enc = EncoderRegistry::default().build(kind, &config).unwrap();
    let ep = enc.init(11).unwrap();
    let head = MlpHead::new(MlpHeadConfig {
        in_dim: enc.feature_dim(),
        hidden_dim: 8,
        num_classes: 4,
    })
    .unwrap();
    let hp = head.init(12);
    let y = labels(x.shape()[0], 4);
    let (_, eg, hg) = loss_and_grads(enc.as_ref(), &ep, &head, &hp, &x, &y);

    let r = check(
        &ep,
        &eg,
        |p| encoder_loss(enc.as_ref(), p, &head, &hp, &x, &y),
        STEP,
        TOL,
        per_tensor,
    );
    assert_report(&format!("{kind} encoder"), &r);
    let r = check(
        &hp,
        &hg,
        |p| encoder_loss(enc.as_ref(), &ep, &head, p, &x, &y),
        STEP,
        TOL,
        per_tensor,
    );
    assert_report(&format!("{kind} head"), &r);
}

#[test]
fn imu_encoder_gradients_match_finite_differences() {
    let config = json!({
        "in_channels": 2,
        "block_channels": [4, 4, 4],
        "kernel_sizes": [5, 3, 3],
        "min_input_len": 64,
    });
    check_encoder("imu_cnn1d", config, random(&[3, 2, 64], 1), 40);
}

#[test]
fn mini3d_gradients_match_finite_differences() {
    let config = json!({
        "input_shape": [4, 8, 8],
        "block_channels": [3, 4, 4],
    });
    check_encoder("mini3d", config, random(&[2, 4, 8, 8, 3], 2), 30);
}

#[test]
fn mlp_head_gradients_match_finite_differences() {
    let head = MlpHead::new(MlpHeadConfig {
        in_dim: 6,
        hidden_dim: 10,
        num_classes: 5,
    })
    .unwrap();
    let hp = head.init(3);
    let feats = random(&[7, 6], 4).into_dimensionality().unwrap();
    let y = labels(7, 5);
    let loss =
        |p: &ModelParams, f: &Array2<f64>| cross_entropy_loss(&head.forward(p, f).unwrap().0.values, &y).unwrap();

    let (logits, tape) = head.forward(&hp, &feats).unwrap();
    let (_, dl) = cross_entropy_with_grad(&logits.values, &y).unwrap();
    let mut g = Gradients::new();
    let dfeat = head.backward(&hp, tape, dl, &mut g).unwrap();
    assert_report("mlp head", &check(&hp, &g, |p| loss(p, &feats), STEP, TOL, 1000));

    // input gradient, one coordinate at a time
    let mut passed = 0;
    for idx in 0..feats.len() {
        let (i, j) = (idx / 6, idx % 6);
        let mut up = feats.clone();
        up[[i, j]] += STEP;
        let mut down = feats.clone();
        down[[i, j]] -= STEP;
        let numeric = (loss(&hp, &up) - loss(&hp, &down)) / (2.0 * STEP);
        if fusehar_core::nn::gradcheck::relative_error(dfeat[[i, j]], numeric) <= TOL {
            passed += 1;
        }
    }
    assert!(passed as f64 >= 0.95 * feats.len() as f64, "{passed}/{}", feats.len());
}

#[test]
fn frozen_groups_receive_no_gradient() {
    let enc = EncoderRegistry::default()
        .build(
            "mini3d",
            &json!({"input_shape": [4, 8, 8], "block_channels": [3, 4, 4]}),
        )
        .unwrap();
    let mut ep = enc.init(5).unwrap();
    ep.set_trainable(&["Block_3".to_string()]).unwrap();
    let head = MlpHead::new(MlpHeadConfig {
        in_dim: enc.feature_dim(),
        hidden_dim: 8,
        num_classes: 4,
    })
    .unwrap();
    let hp = head.init(6);
    let x = random(&[2, 4, 8, 8, 3], 7);
    let (_, eg, _) = loss_and_grads(enc.as_ref(), &ep, &head, &hp, &x, &[0, 1]);
    let groups: Vec<&str> = eg.iter().map(|(g, _, _)| g).collect();
    assert!(!groups.is_empty());
    assert!(groups.iter().all(|&g| g == "Block_3"), "{groups:?}");
}
