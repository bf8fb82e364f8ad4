use dpssm_core::ssm::{scan_sequential, ScanInputs, ScanOptions, SsmParams};
use dpssm_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Energy in the upper half of the one-sided spectrum, by direct summation.
fn high_band_energy(y: &[f64]) -> f64 {
    let n = y.len();
    let tau = std::f64::consts::TAU;
    (n / 4..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in y.iter().enumerate() {
                let ph = tau * (k * t) as f64 / n as f64;
                re += v * ph.cos();
                im -= v * ph.sin();
            }
            re * re + im * im
        })
        .sum()
}

fn scalar_response(a: f64, delta: f64, x: &[f64]) -> Vec<f64> {
    let len = x.len();
    let params = SsmParams::new(Tensor::full(&[1, 1], a), Tensor::zeros(&[1])).unwrap();
    let inputs = ScanInputs {
        x: Tensor::new(&[1, len, 1], x.to_vec()).unwrap(),
        delta: Tensor::full(&[1, len, 1], delta),
        b: Tensor::ones(&[1, len, 1]),
        c: Tensor::ones(&[1, len, 1]),
    };
    scan_sequential(&params, &inputs, &ScanOptions::default()).unwrap().y.into_data()
}

#[test]
fn smaller_steps_smooth_white_noise() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..256).map(|_| StandardNormal.sample(&mut rng)).collect();
        for a in [-0.5, -1.0, -4.0] {
            let energies: Vec<f64> = [1.0, 0.3, 0.1, 0.03, 0.01]
                .iter()
                .map(|&d| high_band_energy(&scalar_response(a, d, &x)))
                .collect();
            for w in energies.windows(2) {
                assert!(w[1] <= w[0], "a={a} seed={seed}: {energies:?}");
            }
        }
    }
}

fn instance(seed: u64, len: usize, d: usize, n: usize) -> (SsmParams, ScanInputs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SsmParams::new(
        Tensor::uniform(&[d, n], -3.0, -0.05, &mut rng),
        Tensor::uniform(&[d], -1.0, 1.0, &mut rng),
    )
    .unwrap();
    let inputs = ScanInputs {
        x: Tensor::uniform(&[1, len, d], -1.0, 1.0, &mut rng),
        delta: Tensor::uniform(&[1, len, d], 0.01, 2.0, &mut rng),
        b: Tensor::uniform(&[1, len, n], -1.0, 1.0, &mut rng),
        c: Tensor::uniform(&[1, len, n], -1.0, 1.0, &mut rng),
    };
    (params, inputs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn future_inputs_never_reach_the_past(
        seed in 0u64..10_000,
        len in 2usize..60,
        d in 1usize..4,
        n in 1usize..4,
        j_frac in 0.0f64..1.0,
        bump in -3.0f64..3.0,
    ) {
        let (params, inputs) = instance(seed, len, d, n);
        let j = 1 + ((len - 1) as f64 * j_frac) as usize % (len - 1);
        let opts = ScanOptions::default();
        let base = scan_sequential(&params, &inputs, &opts).unwrap().y;
        let mut moved = inputs.clone();
        for c in 0..d {
            moved.x.data_mut()[j * d + c] += bump;
        }
        let y = scan_sequential(&params, &moved, &opts).unwrap().y;
        prop_assert_eq!(&base.data()[..j * d], &y.data()[..j * d]);
    }

    #[test]
    fn states_respect_the_geometric_bound(seed in 0u64..10_000, len in 1usize..400) {
        // D = 0 and C = e_k read out h_k directly.
        let (mut params, mut inputs) = instance(seed, len, 1, 1);
        params.d = Tensor::zeros(&[1]);
        inputs.c = Tensor::ones(&[1, len, 1]);
        let y = scan_sequential(&params, &inputs, &ScanOptions::default()).unwrap().y;
        let a = params.a.data()[0];
        let (mut drive, mut decay) = (0.0f64, 0.0f64);
        for t in 0..len {
            let dt = inputs.delta.data()[t];
            let gain = (dt * a).exp_m1() / a;
            drive = drive.max((gain * inputs.b.data()[t] * inputs.x.data()[t]).abs());
            decay = decay.max((dt * a).exp());
        }
        let bound = drive / (1.0 - decay);
        prop_assert!(y.max_abs() <= bound * (1.0 + 1e-12));
    }
}
