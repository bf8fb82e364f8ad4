//! Sequential recurrence and work-efficient parallel scan.
//!
//! The recurrence `h_i = Ā_i h_{i−1} + B̄_i x_i` is a prefix product under
//! the associative operator on affine maps
//! `(a₁, b₁) ∘ (a₂, b₂) = (a₂·a₁, a₂·b₁ + b₂)` (apply the left map first).
//! [`scan_parallel`] evaluates that prefix with a Blelloch up-sweep /
//! down-sweep over a power-of-two padded buffer.

use rayon::prelude::*;
use rayon::ThreadPool;

use super::discretize::input_gain;
use super::{ScanDims, ScanInputs, ScanOptions, ScanOutput, SsmParams};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Affine map `h ↦ a·h + b`.
pub type ScanPair = (f64, f64);

pub const IDENTITY: ScanPair = (1.0, 0.0);

/// Compose two affine maps, `p` applied first.
#[inline]
pub fn combine(p: ScanPair, q: ScanPair) -> ScanPair {
    (q.0 * p.0, q.0 * p.1 + q.1)
}

pub fn scan_sequential(
    params: &SsmParams,
    inputs: &ScanInputs,
    opts: &ScanOptions,
) -> Result<ScanOutput> {
    let dims = inputs.validate(params)?;
    opts.check_initial(&dims)?;
    let ScanDims {
        batch,
        len,
        d_inner,
        n,
    } = dims;
    let (x, dt, bm, cm) = (
        inputs.x.data(),
        inputs.delta.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let (a, skip) = (params.a.data(), params.d.data());
    let mut y = vec![0.0; batch * len * d_inner];
    let mut last = vec![0.0; batch * d_inner * n];
    let mut h = vec![0.0; n];
    for b in 0..batch {
        for d in 0..d_inner {
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = opts.h0(b, d, k, &dims);
            }
            let arow = &a[d * n..(d + 1) * n];
            for i in 0..len {
                let t = (b * len + i) * d_inner + d;
                let (step, xv) = (dt[t], x[t]);
                let row = (b * len + i) * n;
                let mut acc = 0.0;
                for k in 0..n {
                    let a_bar = (step * arow[k]).exp();
                    let b_bar = input_gain(arow[k], step, opts.discretization) * bm[row + k];
                    h[k] = a_bar * h[k] + b_bar * xv;
                    acc += cm[row + k] * h[k];
                }
                y[t] = acc + skip[d] * xv;
            }
            last[(b * d_inner + d) * n..(b * d_inner + d + 1) * n].copy_from_slice(&h);
        }
    }
    finish(y, last, &dims, opts)
}

fn finish(y: Vec<f64>, last: Vec<f64>, dims: &ScanDims, opts: &ScanOptions) -> Result<ScanOutput> {
    let y = Tensor::new(&[dims.batch, dims.len, dims.d_inner], y)?.ensure_finite("scan")?;
    let final_state = if opts.keep_final_state {
        Some(Tensor::new(&[dims.batch, dims.d_inner, dims.n], last)?.ensure_finite("scan")?)
    } else {
        None
    };
    Ok(ScanOutput { y, final_state })
}

/// Blelloch scan of `work` in place, leaving the *exclusive* prefix of
/// each position. `work.len()` must be a power of two.
fn blelloch_exclusive(work: &mut [ScanPair], parallel: bool) {
    let p = work.len();
    debug_assert!(p.is_power_of_two());
    let up = |chunk: &mut [ScanPair]| {
        let s = chunk.len();
        chunk[s - 1] = combine(chunk[s / 2 - 1], chunk[s - 1]);
    };
    let down = |chunk: &mut [ScanPair]| {
        let s = chunk.len();
        let left = chunk[s / 2 - 1];
        chunk[s / 2 - 1] = chunk[s - 1];
        chunk[s - 1] = combine(chunk[s - 1], left);
    };
    let mut s = 2;
    while s <= p {
        if parallel {
            work.par_chunks_mut(s).with_min_len(64).for_each(up);
        } else {
            work.chunks_mut(s).for_each(up);
        }
        s <<= 1;
    }
    work[p - 1] = IDENTITY;
    let mut s = p;
    while s >= 2 {
        if parallel {
            work.par_chunks_mut(s).with_min_len(64).for_each(down);
        } else {
            work.chunks_mut(s).for_each(down);
        }
        s >>= 1;
    }
}

/// Run the parallel scan on a freshly built pool with `workers` threads.
pub fn scan_parallel(
    params: &SsmParams,
    inputs: &ScanInputs,
    opts: &ScanOptions,
    workers: usize,
) -> Result<ScanOutput> {
    let pool = build_pool(workers)?;
    scan_parallel_in(&pool, params, inputs, opts)
}

pub fn build_pool(workers: usize) -> Result<ThreadPool> {
    if workers == 0 {
        return invalid("worker count must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Parallel scan inside an existing pool. Lanes `(batch, channel)` are
/// distributed over the pool; when there are fewer lanes than workers the
/// sweeps inside each lane are split instead. The combine tree is fixed by
/// the padded length alone, so results do not depend on the worker count.
pub fn scan_parallel_in(
    pool: &ThreadPool,
    params: &SsmParams,
    inputs: &ScanInputs,
    opts: &ScanOptions,
) -> Result<ScanOutput> {
    let dims = inputs.validate(params)?;
    opts.check_initial(&dims)?;
    let ScanDims {
        batch,
        len,
        d_inner,
        n,
    } = dims;
    let padded = len.next_power_of_two();
    let lanes = batch * d_inner;
    let (x, dt, bm, cm) = (
        inputs.x.data(),
        inputs.delta.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let (a, skip) = (params.a.data(), params.d.data());

    let lane = |lane: usize, split_sweeps: bool| -> (Vec<f64>, Vec<f64>) {
        let (b, d) = (lane / d_inner, lane % d_inner);
        let mut acc = vec![0.0; len];
        let mut last = vec![0.0; n];
        let mut elems = vec![IDENTITY; len];
        let mut work = vec![IDENTITY; padded];
        for k in 0..n {
            let ak = a[d * n + k];
            for (i, e) in elems.iter_mut().enumerate() {
                let t = (b * len + i) * d_inner + d;
                let step = dt[t];
                *e = (
                    (step * ak).exp(),
                    input_gain(ak, step, opts.discretization) * bm[(b * len + i) * n + k] * x[t],
                );
            }
            work[..len].copy_from_slice(&elems);
            work[len..].fill(IDENTITY);
            blelloch_exclusive(&mut work, split_sweeps);
            let h0 = opts.h0(b, d, k, &dims);
            let mut h = 0.0;
            for i in 0..len {
                let (pa, pb) = combine(work[i], elems[i]);
                h = pa * h0 + pb;
                acc[i] += cm[(b * len + i) * n + k] * h;
            }
            last[k] = h;
        }
        let y = (0..len)
            .map(|i| acc[i] + skip[d] * x[(b * len + i) * d_inner + d])
            .collect();
        (y, last)
    };

    let results: Vec<(Vec<f64>, Vec<f64>)> = pool.install(|| {
        let split = lanes < rayon::current_num_threads() && padded >= 4096;
        (0..lanes)
            .into_par_iter()
            .map(|l| lane(l, split))
            .collect()
    });

    let mut y = vec![0.0; batch * len * d_inner];
    let mut last = vec![0.0; batch * d_inner * n];
    for (l, (ly, lh)) in results.into_iter().enumerate() {
        let (b, d) = (l / d_inner, l % d_inner);
        for (i, v) in ly.into_iter().enumerate() {
            y[(b * len + i) * d_inner + d] = v;
        }
        last[l * n..(l + 1) * n].copy_from_slice(&lh);
    }
    finish(y, last, &dims, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::Discretization;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, batch: usize, len: usize, d: usize, n: usize) -> (SsmParams, ScanInputs) {
        let a = Tensor::uniform(&[d, n], -3.0, -0.1, rng);
        let params = SsmParams::new(a, Tensor::uniform(&[d], -1.0, 1.0, rng)).unwrap();
        let inputs = ScanInputs {
            x: Tensor::uniform(&[batch, len, d], -1.0, 1.0, rng),
            delta: Tensor::uniform(&[batch, len, d], 0.01, 0.5, rng),
            b: Tensor::uniform(&[batch, len, n], -1.0, 1.0, rng),
            c: Tensor::uniform(&[batch, len, n], -1.0, 1.0, rng),
        };
        (params, inputs)
    }

    fn scalar_case(len: usize, x: f64) -> (SsmParams, ScanInputs) {
        let params = SsmParams::new(Tensor::full(&[1, 1], -1.0), Tensor::zeros(&[1])).unwrap();
        let inputs = ScanInputs {
            x: Tensor::full(&[1, len, 1], x),
            delta: Tensor::full(&[1, len, 1], 0.1),
            b: Tensor::ones(&[1, len, 1]),
            c: Tensor::ones(&[1, len, 1]),
        };
        (params, inputs)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (p, i) = scalar_case(5, 0.0);
        let out = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_unrolls() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (p, i) = random_case(&mut rng, 1, 1, 1, 1);
        let out = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
        let (a, dt) = (p.a.data()[0], i.delta.data()[0]);
        let b_bar = (dt * a).exp_m1() / a * i.b.data()[0];
        let xv = i.x.data()[0];
        let expected = i.c.data()[0] * b_bar * xv + p.d.data()[0] * xv;
        assert!((out.y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn geometric_series_closed_form() {
        let (p, i) = scalar_case(3, 1.0);
        let out = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
        let a_bar = (-0.1f64).exp();
        let b_bar = 1.0 - a_bar;
        for k in 0..3 {
            let expected: f64 = b_bar * (0..=k).map(|j| a_bar.powi(j as i32)).sum::<f64>();
            assert!((out.y.data()[k] - expected).abs() <= 1e-15);
        }
    }

    #[test]
    fn single_step_parallel_is_bitwise_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (p, i) = random_case(&mut rng, 2, 1, 3, 4);
        let s = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
        let q = scan_parallel(&p, &i, &ScanOptions::default(), 2).unwrap();
        assert_eq!(s.y.data(), q.y.data());
    }

    #[test]
    fn parallel_matches_sequential_at_odd_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (p, i) = random_case(&mut rng, 1, 257, 3, 4);
        let opts = ScanOptions {
            keep_final_state: true,
            ..Default::default()
        };
        let s = scan_sequential(&p, &i, &opts).unwrap();
        let q = scan_parallel(&p, &i, &opts, 4).unwrap();
        assert!(q.y.rel_err(&s.y) <= 1e-10);
        let (hs, hq) = (s.final_state.unwrap(), q.final_state.unwrap());
        assert!(hq.rel_err(&hs) <= 1e-10);
    }

    #[test]
    fn initial_state_and_simplified_mode_agree_across_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (p, i) = random_case(&mut rng, 2, 33, 2, 3);
        let opts = ScanOptions {
            discretization: Discretization::Simplified,
            initial_state: Some(Tensor::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng)),
            keep_final_state: true,
        };
        let s = scan_sequential(&p, &i, &opts).unwrap();
        let q = scan_parallel(&p, &i, &opts, 3).unwrap();
        assert!(q.y.rel_err(&s.y) <= 1e-10);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (p, i) = random_case(&mut rng, 1, 5000, 1, 2);
        let one = scan_parallel(&p, &i, &ScanOptions::default(), 1).unwrap();
        let many = scan_parallel(&p, &i, &ScanOptions::default(), 4).unwrap();
        assert_eq!(one.y.data(), many.y.data());
    }

    #[test]
    fn errors_on_bad_inputs() {
        let (p, mut i) = scalar_case(3, 1.0);
        i.delta.data_mut()[1] = 0.0;
        assert!(scan_sequential(&p, &i, &ScanOptions::default()).is_err());
        let (p, mut i) = scalar_case(3, 1.0);
        i.b = Tensor::ones(&[1, 2, 1]);
        assert!(scan_parallel(&p, &i, &ScanOptions::default(), 1).is_err());
    }

    #[test]
    fn causality_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (p, i) = random_case(&mut rng, 1, 40, 2, 3);
        let base = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
        let j = 25;
        let mut bumped = i.clone();
        for d in 0..2 {
            bumped.x.data_mut()[j * 2 + d] += 3.0;
        }
        let out = scan_sequential(&p, &bumped, &ScanOptions::default()).unwrap();
        assert_eq!(&base.y.data()[..j * 2], &out.y.data()[..j * 2]);
        assert_ne!(base.y.data()[j * 2], out.y.data()[j * 2]);
    }

    #[test]
    fn state_stays_within_geometric_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..10 {
            let len = rng.gen_range(50..400);
            let (p, i) = random_case(&mut rng, 1, len, 2, 3);
            // C = one-hot on state k exposes h[k] directly.
            for k in 0..3 {
                let mut probe = i.clone();
                probe.c = Tensor::from_fn(&[1, len, 3], |t| if t % 3 == k { 1.0 } else { 0.0 });
                let params = SsmParams::new(p.a.clone(), Tensor::zeros(&[2])).unwrap();
                let out = scan_sequential(&params, &probe, &ScanOptions::default()).unwrap();
                for d in 0..2 {
                    let a = p.a.data()[d * 3 + k];
                    let mut max_a = 0.0f64;
                    let mut max_u = 0.0f64;
                    for t in 0..len {
                        let step = i.delta.data()[t * 2 + d];
                        max_a = max_a.max((step * a).exp());
                        max_u = max_u.max((input_gain(a, step, Discretization::Zoh) * i.b.data()[t * 3 + k] * i.x.data()[t * 2 + d]).abs());
                    }
                    let bound = max_u / (1.0 - max_a);
                    for t in 0..len {
                        assert!(out.y.data()[t * 2 + d].abs() <= bound * (1.0 + 1e-12));
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn combine_is_associative(v in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let (p, q, r) = ((v[0], v[1]), (v[2], v[3]), (v[4], v[5]));
            let left = combine(combine(p, q), r);
            let right = combine(p, combine(q, r));
            prop_assert!((left.0 - right.0).abs() <= 1e-12);
            prop_assert!((left.1 - right.1).abs() <= 1e-12);
        }

        #[test]
        fn parallel_equals_sequential(seed in 0u64..10_000, len in 1usize..300, d in 1usize..4, n in 1usize..5, workers in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, i) = random_case(&mut rng, 2, len, d, n);
            let s = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
            let q = scan_parallel(&p, &i, &ScanOptions::default(), workers).unwrap();
            prop_assert!(q.y.rel_err(&s.y) <= 1e-10);
        }
    }
}
