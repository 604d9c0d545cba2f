//! Dense-versus-compact latency measurement behind an equivalence gate.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compile::{CompactModel, PrunedStructure};
use crate::error::{Error, Result};
use crate::model::MaskableEncoder;
use crate::train::EQUIVALENCE_TOLERANCE;

pub const MIN_WARMUP: usize = 20;
pub const MIN_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Seeds the random probe and timing inputs.
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(batch_size: usize, seq_len: usize) -> Self {
        Self {
            batch_size,
            seq_len,
            warmup: MIN_WARMUP,
            iters: MIN_ITERS,
            seed: 0,
        }
    }
}

/// Wall-clock seconds per forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles of `samples`.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((p * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Self {
            median: q(0.5),
            p10: q(0.1),
            p90: q(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyResult {
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub iters: usize,
    pub dense: LatencyStats,
    pub compact: LatencyStats,
    /// `dense.median / compact.median`
    pub speedup: f64,
    /// Max-abs logit difference found by the probe gate.
    pub probe_diff: f32,
}

pub fn random_batch(rng: &mut impl Rng, vocab: usize, batch: usize, seq: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

/// Max-abs logit difference between the masked full-size model under
/// `structure` and its compact form. Errors when above tolerance.
pub fn equivalence_gate(
    reference: &MaskableEncoder,
    structure: &PrunedStructure,
    compact: &CompactModel,
    probe: &[Vec<usize>],
) -> Result<f32> {
    let masked = reference.logits(&structure.to_mask_values(&reference.config), probe)?;
    let diff = masked.max_abs_diff(&compact.logits(probe)?);
    if !(diff <= EQUIVALENCE_TOLERANCE) {
        return Err(Error::EquivalenceGate {
            max_abs_diff: diff,
            tolerance: EQUIVALENCE_TOLERANCE,
        });
    }
    Ok(diff)
}

/// Times the unpruned `reference` against `compact`, alternating the two on
/// identical inputs. Refuses to measure unless the compact model reproduces
/// the masked reference on a probe batch.
pub fn bench(
    reference: &MaskableEncoder,
    structure: &PrunedStructure,
    compact: &CompactModel,
    spec: &BenchSpec,
) -> Result<LatencyResult> {
    if spec.warmup < MIN_WARMUP || spec.iters < MIN_ITERS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_WARMUP} warmup and {MIN_ITERS} measured iterations"
        )));
    }
    if spec.batch_size == 0 || spec.seq_len == 0 || spec.seq_len > reference.config.max_seq {
        return Err(Error::InvalidArgument(format!(
            "batch {} x seq {} (max_seq {})",
            spec.batch_size, spec.seq_len, reference.config.max_seq
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = reference.config.vocab;
    let probe = random_batch(&mut rng, vocab, spec.batch_size, spec.seq_len);
    let probe_diff = equivalence_gate(reference, structure, compact, &probe)?;
    let dense = CompactModel::dense(reference)?;
    let input = random_batch(&mut rng, vocab, spec.batch_size, spec.seq_len);

    let time = |m: &CompactModel| -> Result<f64> {
        let t0 = Instant::now();
        let out = m.logits(&input)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(out);
        Ok(dt)
    };
    for _ in 0..spec.warmup {
        time(&dense)?;
        time(compact)?;
    }
    let mut td = Vec::with_capacity(spec.iters);
    let mut tc = Vec::with_capacity(spec.iters);
    for i in 0..spec.iters {
        // alternate which side goes first so drift hits both equally
        if i % 2 == 0 {
            td.push(time(&dense)?);
            tc.push(time(compact)?);
        } else {
            tc.push(time(compact)?);
            td.push(time(&dense)?);
        }
    }
    let dense = LatencyStats::from_samples(&td);
    let compact = LatencyStats::from_samples(&tc);
    Ok(LatencyResult {
        batch_size: spec.batch_size,
        seq_len: spec.seq_len,
        warmup: spec.warmup,
        iters: spec.iters,
        speedup: dense.median / compact.median,
        dense,
        compact,
        probe_diff,
    })
}
