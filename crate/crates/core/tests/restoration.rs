use dpssm_core::modulation::DegradationEmbedding;
use dpssm_core::params::Params;
use dpssm_core::restoration::{heb, DpmambaNet, RestorationConfig};
use dpssm_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block_count(c: usize, n: usize, emb: usize) -> usize {
    let di = 2 * c;
    let norm = 2 * c;
    let in_proj = 2 * (di * c + di);
    let dwconv = di * 9 + di;
    let dt = di * di + di;
    let bc = 2 * n * di;
    let ssm = di * n + di;
    let heads = (di * emb + di) + 2 * (n * emb + n);
    let out = c * di + c;
    norm + in_proj + dwconv + dt + bc + ssm + heads + out + 1
}

#[test]
fn toy_parameter_count_matches_hand_count() {
    let cfg = RestorationConfig::default();
    let net = DpmambaNet::new(cfg.clone(), 0).unwrap();
    let (cin, n, emb) = (3, 8, 512);
    let w = [8, 16, 32, 64];
    let mut expect = 9 * cin * w[0] + w[0];
    for i in 0..3 {
        expect += 4 * w[i] * w[i + 1] + w[i + 1];
        expect += w[i + 1] * 4 * w[i] + 4 * w[i];
        expect += 2 * w[i] * w[i] + w[i];
        expect += 2 * block_count(w[i], n, emb);
    }
    expect += block_count(w[3], n, emb) + block_count(w[0], n, emb);
    expect += 9 * w[0] * cin + cin;
    assert_eq!(net.param_count(), expect);
}

#[test]
fn bottleneck_of_a_48_pixel_input() {
    let net = DpmambaNet::new(RestorationConfig::default(), 0).unwrap();
    assert_eq!(net.bottleneck_shape(48, 48), [64, 6, 6]);
    let x = Tensor::full(&[3, 48, 48], 0.5);
    let e = DegradationEmbedding::from_vec(vec![0.0; 512]).unwrap();
    assert_eq!(net.forward_tensor(&x, &e).unwrap(), x);
    assert!(net.forward_tensor(&Tensor::zeros(&[3, 44, 48]), &e).is_err());
}

fn micro_net(seed: u64) -> (DpmambaNet, DegradationEmbedding) {
    let cfg = RestorationConfig {
        in_channels: 1,
        widths: [2, 2, 2],
        state_dim: 2,
        embed_dim: 3,
        ..Default::default()
    };
    let mut net = DpmambaNet::new(cfg, seed).unwrap();
    // Move away from the identity start so every parameter matters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (_, t) in net.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    (net, DegradationEmbedding::from_vec(vec![0.4, -0.3, 0.2]).unwrap())
}

#[test]
fn micro_net_gradients_match_finite_differences() {
    let (net, e) = micro_net(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
    let up = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut rng);
    let grads = net.backward(&x, &e, &up).unwrap();
    assert_eq!(grads.len(), net.params.len());

    let objective = |p: &Params| {
        let n = DpmambaNet::from_params(net.config.clone(), p.clone()).unwrap();
        let y = n.forward_tensor(&x, &e).unwrap();
        y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut coords: Vec<(String, usize)> = net
        .params
        .iter()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i)))
        .collect();
    coords.shuffle(&mut rng);
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for (name, i) in coords.into_iter().take(32) {
        let h = 1e-5;
        let mut a = net.params.clone();
        a.get_mut(&name).unwrap().data_mut()[i] += h;
        let mut b = net.params.clone();
        b.get_mut(&name).unwrap().data_mut()[i] -= h;
        num.push((objective(&a) - objective(&b)) / (2.0 * h));
        ana.push(grads.get(&name).unwrap().data()[i]);
    }
    let num = Tensor::new(&[32], num).unwrap();
    let ana = Tensor::new(&[32], ana).unwrap();
    assert!(num.max_abs() > 0.0);
    assert!(ana.rel_err(&num) <= 1e-3, "rel err {}", ana.rel_err(&num));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heb_keeps_means_and_scales_detail(
        vals in prop::collection::vec(-3.0f64..3.0, 2 * 5 * 4),
        alpha in 0.0f64..3.0,
    ) {
        let f = Tensor::new(&[2, 5, 4], vals).unwrap();
        let out = heb(&f, alpha).unwrap();
        let detail = |t: &Tensor, c: usize| -> (f64, f64) {
            let plane = &t.data()[c * 20..(c + 1) * 20];
            let m = plane.iter().sum::<f64>() / 20.0;
            (m, plane.iter().map(|v| (v - m) * (v - m)).sum())
        };
        for c in 0..2 {
            let (m0, e0) = detail(&f, c);
            let (m1, e1) = detail(&out, c);
            prop_assert!((m0 - m1).abs() <= 1e-12);
            prop_assert!((e1 - (1.0 + alpha).powi(2) * e0).abs() <= 1e-9 * e0.max(1.0));
        }
    }
}
