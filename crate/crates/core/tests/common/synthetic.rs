//! Segmentation of generated recordings scored against their planted labels.

use std::time::{Duration, Instant};

use scenereplay::eval::{evaluate_segmentation, pool_segmentation, SegmentationEval, DEFAULT_TOLERANCE};
use scenereplay::recording::{prepare, StubEmbedding};
use scenereplay::segmentation::{segment, similarity_series, SceneList, SegmentationParams};
use scenereplay::synth::{generate, SynthParams};

#[derive(Debug)]
pub struct SuiteOutcome {
    pub recordings: usize,
    pub actions: usize,
    pub pooled: SegmentationEval,
    /// Largest change jitter causes in any similarity value.
    pub max_noise: f64,
    pub elapsed: Duration,
}

pub fn run_suite(first_seed: u64, count: usize) -> Result<SuiteOutcome, String> {
    let started = Instant::now();
    let params = SynthParams::default();
    let clean_params = SynthParams {
        jitter: 0,
        ..params.clone()
    };
    let backend = StubEmbedding::default();
    let seg_params = SegmentationParams::default();
    let mut evals = Vec::with_capacity(count);
    let mut actions = 0;
    let mut max_noise: f64 = 0.0;
    for seed in first_seed..first_seed + count as u64 {
        let s = generate(seed, &params).map_err(|e| format!("seed {seed}: {e}"))?;
        let rec = prepare(&s.recording, &backend).map_err(|e| format!("seed {seed}: {e}"))?;
        let seg = segment(&rec, &s.ocr, &seg_params).map_err(|e| format!("seed {seed}: {e}"))?;

        let clean = generate(seed, &clean_params).map_err(|e| format!("seed {seed}: {e}"))?;
        let clean = prepare(&clean.recording, &backend).map_err(|e| format!("seed {seed}: {e}"))?;
        let clean = similarity_series(&clean).map_err(|e| format!("seed {seed}: {e}"))?;
        for (a, b) in seg.series.values.iter().zip(&clean.values) {
            max_noise = max_noise.max((a - b).abs());
        }

        actions += s.truth.scenes.len();
        evals.push(evaluate_segmentation(&SceneList::from_scenes(&seg.scenes), &s.truth, DEFAULT_TOLERANCE));
    }
    Ok(SuiteOutcome {
        recordings: count,
        actions,
        pooled: pool_segmentation(&evals, DEFAULT_TOLERANCE),
        max_noise,
        elapsed: started.elapsed(),
    })
}
