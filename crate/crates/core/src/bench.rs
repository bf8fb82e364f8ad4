//! Scan benchmark: every configuration is checked against the sequential
//! recurrence before any timing is recorded.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::modulation::quantile;
use crate::ssm::scan::build_pool;
use crate::ssm::{scan_parallel_in, scan_sequential, ScanInputs, ScanOptions, ScanOutput, SsmParams};
use crate::tensor::Tensor;

pub const CORRECTNESS_TOL: f64 = 1e-10;
pub const MIN_REPS: usize = 20;
const WARMUP: usize = 2;

/// A scan implementation under test, run inside the given pool.
pub type ScanImpl = dyn Fn(&SsmParams, &ScanInputs, &ScanOptions, &ThreadPool) -> Result<ScanOutput> + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchCase {
    pub len: usize,
    pub d_inner: usize,
    pub n: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub d_inner: usize,
    pub n: usize,
    pub workers: usize,
    pub variant: &'static str,
    pub reps: usize,
    pub median_ns_per_elem: f64,
    pub p95_ns_per_elem: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaseOutcome {
    Timed { rel_err: f64, rows: Vec<BenchRow> },
    /// The candidate disagreed with the sequential oracle; nothing was timed.
    Refused { case: BenchCase, rel_err: f64 },
}

pub fn random_instance(case: &BenchCase, seed: u64) -> Result<(SsmParams, ScanInputs)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let BenchCase { len, d_inner, n, .. } = *case;
    let params = SsmParams::new(
        Tensor::uniform(&[d_inner, n], -2.0, -0.1, &mut rng),
        Tensor::uniform(&[d_inner], -1.0, 1.0, &mut rng),
    )?;
    let inputs = ScanInputs {
        x: Tensor::uniform(&[1, len, d_inner], -1.0, 1.0, &mut rng),
        delta: Tensor::uniform(&[1, len, d_inner], 0.01, 0.5, &mut rng),
        b: Tensor::uniform(&[1, len, n], -1.0, 1.0, &mut rng),
        c: Tensor::uniform(&[1, len, n], -1.0, 1.0, &mut rng),
    };
    Ok((params, inputs))
}

fn time_reps(reps: usize, elems: usize, mut run: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..WARMUP {
        run()?;
    }
    let mut ns = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        ns.push(start.elapsed().as_nanos() as f64 / elems as f64);
    }
    ns.sort_by(f64::total_cmp);
    Ok((quantile(&ns, 0.5), quantile(&ns, 0.95)))
}

/// Verify `candidate` against the sequential oracle, then time both.
pub fn bench_case(case: &BenchCase, reps: usize, seed: u64, candidate: &ScanImpl) -> Result<CaseOutcome> {
    if reps < MIN_REPS {
        return invalid(format!("at least {MIN_REPS} repetitions are required, got {reps}"));
    }
    if case.len == 0 || case.d_inner == 0 || case.n == 0 || case.workers == 0 {
        return invalid(format!("bad benchmark case {case:?}"));
    }
    let (params, inputs) = random_instance(case, seed)?;
    let opts = ScanOptions::default();
    let pool = build_pool(case.workers)?;
    let oracle = scan_sequential(&params, &inputs, &opts)?;
    let rel_err = match candidate(&params, &inputs, &opts, &pool) {
        Ok(out) if out.y.shape() == oracle.y.shape() => out.y.rel_err(&oracle.y),
        _ => f64::INFINITY,
    };
    if !(rel_err <= CORRECTNESS_TOL) {
        return Ok(CaseOutcome::Refused { case: *case, rel_err });
    }
    let elems = case.len * case.d_inner * case.n;
    let (seq_med, seq_p95) = time_reps(reps, elems, || scan_sequential(&params, &inputs, &opts).map(|_| ()))?;
    let (par_med, par_p95) = time_reps(reps, elems, || candidate(&params, &inputs, &opts, &pool).map(|_| ()))?;
    let row = |variant, median_ns_per_elem, p95_ns_per_elem| BenchRow {
        len: case.len,
        d_inner: case.d_inner,
        n: case.n,
        workers: case.workers,
        variant,
        reps,
        median_ns_per_elem,
        p95_ns_per_elem,
    };
    Ok(CaseOutcome::Timed {
        rel_err,
        rows: vec![row("sequential", seq_med, seq_p95), row("parallel", par_med, par_p95)],
    })
}

/// The engine's own parallel scan as a [`ScanImpl`].
pub fn parallel_scan(params: &SsmParams, inputs: &ScanInputs, opts: &ScanOptions, pool: &ThreadPool) -> Result<ScanOutput> {
    scan_parallel_in(pool, params, inputs, opts)
}

pub const CSV_HEADER: &str = "L,d_inner,N,workers,variant,reps,median_ns_per_elem,p95_ns_per_elem";

pub fn csv_row(r: &BenchRow) -> String {
    format!(
        "{},{},{},{},{},{},{:.3},{:.3}",
        r.len, r.d_inner, r.n, r.workers, r.variant, r.reps, r.median_ns_per_elem, r.p95_ns_per_elem
    )
}

/// Element operations of one scan layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCount {
    /// State updates `h ← Ā·h + B̄·x` (2 mul, 1 add) and readout
    /// `y += C·h` (1 mul, 1 add) per `(t, d, n)`.
    pub scan: u64,
    /// `C ← α_C·C` per `(t, n)`; zero for the unmodulated variant.
    pub modulation: u64,
    /// Adding the two directions' outputs per `(t, d)`.
    pub merge: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.scan + self.modulation + self.merge
    }
}

const OPS_PER_UPDATE: u64 = 5;

/// One forward pass with a modulated readout.
pub fn op_count_single(len: usize, d_inner: usize, n: usize) -> OpCount {
    let (l, d, n) = (len as u64, d_inner as u64, n as u64);
    OpCount {
        scan: OPS_PER_UPDATE * l * d * n,
        modulation: l * n,
        merge: 0,
    }
}

/// Forward and reverse passes, outputs summed.
pub fn op_count_bidirectional(len: usize, d_inner: usize, n: usize) -> OpCount {
    let (l, d, n) = (len as u64, d_inner as u64, n as u64);
    OpCount {
        scan: 2 * OPS_PER_UPDATE * l * d * n,
        modulation: 0,
        merge: l * d,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCountReport {
    pub len: usize,
    pub d_inner: usize,
    pub n: usize,
    pub single: OpCount,
    pub bidirectional: OpCount,
    pub scan_ratio: f64,
    pub total_ratio: f64,
}

pub fn op_count_report(len: usize, d_inner: usize, n: usize) -> OpCountReport {
    let single = op_count_single(len, d_inner, n);
    let bidirectional = op_count_bidirectional(len, d_inner, n);
    OpCountReport {
        len,
        d_inner,
        n,
        single,
        bidirectional,
        scan_ratio: bidirectional.scan as f64 / single.scan as f64,
        total_ratio: bidirectional.total() as f64 / single.total() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_candidate_is_timed() {
        let case = BenchCase {
            len: 33,
            d_inner: 2,
            n: 3,
            workers: 2,
        };
        match bench_case(&case, MIN_REPS, 1, &parallel_scan).unwrap() {
            CaseOutcome::Timed { rel_err, rows } => {
                assert!(rel_err <= CORRECTNESS_TOL);
                assert_eq!(rows.len(), 2);
                assert!(rows.iter().all(|r| r.p95_ns_per_elem >= r.median_ns_per_elem));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_candidate_is_refused() {
        let case = BenchCase {
            len: 16,
            d_inner: 2,
            n: 2,
            workers: 1,
        };
        let broken = |p: &SsmParams, i: &ScanInputs, o: &ScanOptions, pool: &ThreadPool| {
            let mut out = parallel_scan(p, i, o, pool)?;
            out.y.data_mut()[5] += 1e-6;
            Ok(out)
        };
        assert!(matches!(bench_case(&case, MIN_REPS, 2, &broken).unwrap(), CaseOutcome::Refused { .. }));
        let failing = |_: &SsmParams, _: &ScanInputs, _: &ScanOptions, _: &ThreadPool| invalid("nope");
        assert!(matches!(bench_case(&case, MIN_REPS, 2, &failing).unwrap(), CaseOutcome::Refused { .. }));
        assert!(bench_case(&case, 5, 2, &parallel_scan).is_err());
    }

    #[test]
    fn op_counts() {
        let r = op_count_report(1024, 16, 16);
        assert_eq!(r.scan_ratio, 2.0);
        assert_eq!(r.single.modulation, 1024 * 16);
        assert!(r.total_ratio < 2.0 && r.total_ratio > 1.9);
    }
}
