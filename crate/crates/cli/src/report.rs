//! JSON manifests written by the segment and bench commands.

use serde::Serialize;

use lsmvos_core::pipeline::RunCounters;

#[derive(Serialize)]
pub struct ConfigEcho {
    pub k: usize,
    pub n: usize,
    pub theta: f32,
    pub use_long: bool,
    pub use_short: bool,
    pub use_prev_mask: bool,
}

#[derive(Serialize)]
#[serde(untagged)]
pub enum WeightsSource {
    File { path: String },
    Seed { seed: u64 },
}

#[derive(Serialize)]
pub struct TimingBlock {
    pub shared_ms_mean: f64,
    pub object_ms_mean: f64,
    pub total_ms_mean: f64,
    pub fps: f64,
}

impl TimingBlock {
    pub fn from_counters(c: &RunCounters) -> Self {
        let frames = c.frames.max(1) as f64;
        TimingBlock {
            shared_ms_mean: c.shared_ms / frames,
            object_ms_mean: c.object_ms / frames,
            total_ms_mean: c.total_ms / frames,
            fps: if c.total_ms > 0.0 {
                c.frames as f64 / (c.total_ms / 1e3)
            } else {
                0.0
            },
        }
    }
}

#[derive(Serialize)]
pub struct CounterBlock {
    pub frames_segmented: u64,
    pub shared_invocations: u64,
    pub object_invocations: u64,
    pub per_frame_total_ms: Vec<f64>,
}

impl CounterBlock {
    pub fn from_counters(c: &RunCounters) -> Self {
        CounterBlock {
            frames_segmented: c.frames,
            shared_invocations: c.shared_invocations,
            object_invocations: c.object_invocations,
            per_frame_total_ms: c.per_frame.iter().map(|f| f.total_ms).collect(),
        }
    }
}

#[derive(Serialize)]
pub struct SegmentManifest {
    pub command: &'static str,
    pub data: String,
    pub set: String,
    pub sequence: String,
    pub weights: WeightsSource,
    pub threads: Option<usize>,
    pub config: ConfigEcho,
    pub frames: usize,
    pub objects: Vec<u8>,
    pub counters: CounterBlock,
    pub timing: TimingBlock,
}

#[derive(Serialize)]
pub struct MicroBench {
    pub short_term_pair_ms: f64,
    pub long_term_pair_ms: f64,
}

#[derive(Serialize)]
pub struct ScalingRow {
    pub objects: usize,
    pub frames_segmented: u64,
    pub shared_invocations: u64,
    pub object_invocations: u64,
    pub mean_frame_ms: f64,
    pub per_frame_ms: Vec<f64>,
}

#[derive(Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// R² of the least-squares line of mean frame time vs object count.
    pub r_squared: f64,
}

#[derive(Serialize)]
pub struct BenchManifest {
    pub command: &'static str,
    pub width: usize,
    pub height: usize,
    pub objects: usize,
    pub frames: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub counters: CounterBlock,
    pub timing: TimingBlock,
    pub micro: MicroBench,
    pub scaling: Option<ScalingTable>,
}

/// R² of a least-squares affine fit y = a + b·x.
pub fn linear_fit_r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    if sxx == 0.0 {
        return 0.0;
    }
    let b = sxy / sxx;
    let a = mean_y - b * mean_x;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (a + b * p.0)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if ss_tot == 0.0 {
        return 1.0;
    }
    1.0 - ss_res / ss_tot
}
