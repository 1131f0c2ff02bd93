//! Implementations of the four subcommands.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};

use lsmvos_core::dataio::{self, weights, WeightsContainer};
use lsmvos_core::encoder::{branch, encode, pad_to_multiple};
use lsmvos_core::matching::{
    downsample_mask, long_term_match_pair, short_term_match_pair, MatchConfig,
};
use lsmvos_core::metrics;
use lsmvos_core::pipeline::{
    self, AblationConfig, ModelParams, PipelineConfig, RunCounters,
};
use lsmvos_core::{selftest, synthetic, LabelMap};

use crate::report::*;
use crate::{BenchArgs, EvalArgs, SegmentArgs};

fn load_model(
    weights_path: &Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<(ModelParams, WeightsSource)> {
    let (container, source) = match (weights_path, seed) {
        (Some(path), _) => (
            WeightsContainer::load(path).context("loading weights container")?,
            WeightsSource::File {
                path: path.display().to_string(),
            },
        ),
        (None, Some(seed)) => (
            weights::seeded_init(seed).context("building seeded weights")?,
            WeightsSource::Seed { seed },
        ),
        (None, None) => bail!("either --weights or --seed is required"),
    };
    let model = ModelParams::from_container(&container).context("assembling model parameters")?;
    Ok((model, source))
}

pub fn segment(args: SegmentArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    let cfg = PipelineConfig {
        match_cfg: MatchConfig::default(),
        ablation: AblationConfig {
            use_long: !args.disable_long,
            use_short: !args.disable_short,
            use_prev_mask: !args.disable_prev_mask,
        },
        theta: args.theta,
    };
    cfg.validate().context("invalid configuration")?;

    let handle = dataio::load_sequence(&args.data, &args.set, &args.seq)
        .context("loading sequence")?;
    let (model, source) = load_model(&args.weights, args.seed)?;
    let ann0 = handle
        .annotation_path(0)
        .expect("load_sequence guarantees a frame-0 annotation");
    let labels0 = dataio::read_label_map(ann0).context("reading first-frame annotation")?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let frame_count = handle.frame_count();
    let (maps, counters) = pipeline::run_sequence(
        frame_count,
        |t| dataio::load_frame(handle.frame_path(t)),
        &labels0,
        &model,
        &cfg,
    )
    .context("running the sequence")?;

    for (t, map) in maps.iter().enumerate() {
        let stem = handle
            .frame_path(t)
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("{t:05}"));
        let path = args.out.join(format!("{stem}.png"));
        dataio::write_label_map(&path, map)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let manifest = SegmentManifest {
        command: "segment",
        data: args.data.display().to_string(),
        set: args.set.clone(),
        sequence: args.seq.clone(),
        weights: source,
        threads,
        config: ConfigEcho {
            k: cfg.match_cfg.k,
            n: cfg.match_cfg.n,
            theta: cfg.theta,
            use_long: cfg.ablation.use_long,
            use_short: cfg.ablation.use_short,
            use_prev_mask: cfg.ablation.use_prev_mask,
        },
        frames: frame_count,
        objects: labels0.object_ids(),
        counters: CounterBlock::from_counters(&counters),
        timing: TimingBlock::from_counters(&counters),
    };
    let manifest_path = args.out.join("run_manifest.json");
    write_json(&manifest_path, &manifest)?;

    println!(
        "segmented {} frames of `{}` ({} objects) -> {}",
        frame_count,
        args.seq,
        manifest.objects.len(),
        args.out.display()
    );
    println!(
        "shared stage {:.1} ms/frame, per-object stage {:.1} ms/frame, {:.2} fps",
        manifest.timing.shared_ms_mean, manifest.timing.object_ms_mean, manifest.timing.fps
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let mut stems: Vec<String> = std::fs::read_dir(&args.gt)
        .with_context(|| format!("reading {}", args.gt.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    stems.sort();
    if stems.len() < 3 {
        bail!(
            "need at least 3 annotated frames (first and last are excluded), found {}",
            stems.len()
        );
    }

    let first = dataio::read_label_map(&args.gt.join(format!("{}.png", stems[0])))?;
    let object_ids = first.object_ids();
    if object_ids.is_empty() {
        bail!("ground truth frame 0 has no objects");
    }
    let tol = metrics::default_boundary_tolerance(first.width(), first.height());

    // first and last annotated frames are excluded by benchmark convention
    let mut scores = Vec::new();
    for (idx, stem) in stems.iter().enumerate().skip(1).take(stems.len() - 2) {
        let gt = dataio::read_label_map(&args.gt.join(format!("{stem}.png")))?;
        let pred_path = args.pred.join(format!("{stem}.png"));
        let pred = dataio::read_label_map(&pred_path)
            .with_context(|| format!("missing or unreadable prediction {}", pred_path.display()))?;
        for &id in &object_ids {
            let gm = gt.binary_mask(id);
            let pm = pred.binary_mask(id);
            scores.push(metrics::FrameScore {
                frame: idx,
                object: id,
                j: metrics::region_similarity(&pm, &gm)?,
                f: metrics::contour_accuracy(&pm, &gm, tol)?,
            });
        }
    }

    let report = metrics::aggregate(&scores, None)?;
    write_json(&args.report, &report)?;
    println!(
        "evaluated {} frames x {} objects: J {:.4}  F {:.4}  J&F {:.4}",
        stems.len() - 2,
        object_ids.len(),
        report.global.j_mean,
        report.global.f_mean,
        report.global.jf_mean
    );
    println!("report written to {}", args.report.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .context("size must look like 854x480")?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn bench_run(
    width: usize,
    height: usize,
    objects: usize,
    frames: usize,
    seed: u64,
    model: &ModelParams,
) -> anyhow::Result<(RunCounters, LabelMap)> {
    let clip = synthetic::clip(width, height, frames + 1, objects, seed)?;
    let cfg = PipelineConfig::default();
    let (maps, counters) = pipeline::run_sequence(
        frames + 1,
        |t| Ok(clip.frames[t].clone()),
        &clip.labels0,
        model,
        &cfg,
    )?;
    Ok((counters, maps.into_iter().next_back().expect("one map per frame")))
}

pub fn bench(args: BenchArgs, threads: Option<usize>) -> anyhow::Result<ExitCode> {
    let (width, height) = parse_size(&args.size)?;
    if args.frames == 0 {
        bail!("--frames must be at least 1");
    }
    let container = weights::seeded_init(args.seed)?;
    let model = ModelParams::from_container(&container)?;

    println!(
        "bench: {width}x{height}, {} objects, {} frames, seed {}",
        args.objects, args.frames, args.seed
    );
    let (counters, _) = bench_run(width, height, args.objects, args.frames, args.seed, &model)?;
    let timing = TimingBlock::from_counters(&counters);
    println!(
        "  shared stage  {:>9.2} ms/frame\n  object stage  {:>9.2} ms/frame\n  end-to-end    {:>9.2} ms/frame  ({:.2} fps)",
        timing.shared_ms_mean, timing.object_ms_mean, timing.total_ms_mean, timing.fps
    );

    // isolated operator timings on real features of this frame size
    let clip = synthetic::clip(width, height, 2, args.objects, args.seed)?;
    let (padded0, _) = pad_to_multiple(&clip.frames[0])?;
    let (padded1, _) = pad_to_multiple(&clip.frames[1])?;
    let f0 = branch(&encode(&padded0, &model.encoder)?, &model.branch)?;
    let f1 = branch(&encode(&padded1, &model.encoder)?, &model.branch)?;
    let (ph, pw) = f0.local_feat.extents();
    let gate = {
        let mask = clip.labels0.to_gate_tensor(1);
        let (padded, _) = pad_to_multiple(&mask)?;
        downsample_mask(&padded, 8)?
    };
    let cfg = MatchConfig::default();
    let reps = 3;
    let t0 = Instant::now();
    for _ in 0..reps {
        short_term_match_pair(&f1.local_feat, &f0.local_feat, &gate, &cfg)?;
    }
    let short_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    let t0 = Instant::now();
    for _ in 0..reps {
        long_term_match_pair(&f1.global_feat, &f0.global_feat, &gate, &cfg)?;
    }
    let long_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!(
        "  short-term pair {short_ms:.2} ms, long-term pair {long_ms:.2} ms (features {pw}x{ph})"
    );

    let scaling = if args.scale_objects {
        let mut rows = Vec::new();
        let mut points = Vec::new();
        for k in [1usize, 2, 4, 8] {
            let (c, _) = bench_run(width, height, k, args.frames, args.seed, &model)?;
            let mean = c.total_ms / c.frames.max(1) as f64;
            println!(
                "  K={k}: {:.2} ms/frame over {} frames (shared stage ran {} times)",
                mean, c.frames, c.shared_invocations
            );
            points.push((k as f64, mean));
            rows.push(ScalingRow {
                objects: k,
                frames_segmented: c.frames,
                shared_invocations: c.shared_invocations,
                object_invocations: c.object_invocations,
                mean_frame_ms: mean,
                per_frame_ms: c.per_frame.iter().map(|f| f.total_ms).collect(),
            });
        }
        let r2 = linear_fit_r_squared(&points);
        println!("  frame time vs K linear fit: R^2 = {r2:.4}");
        Some(ScalingTable {
            rows,
            r_squared: r2,
        })
    } else {
        None
    };

    let manifest = BenchManifest {
        command: "bench",
        width,
        height,
        objects: args.objects,
        frames: args.frames,
        seed: args.seed,
        threads,
        counters: CounterBlock::from_counters(&counters),
        timing,
        micro: MicroBench {
            short_term_pair_ms: short_ms,
            long_term_pair_ms: long_ms,
        },
        scaling,
    };
    if let Some(path) = &args.report {
        write_json(path, &manifest)?;
        println!("report written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn selftest() -> anyhow::Result<ExitCode> {
    let start = Instant::now();
    let results = selftest::run_all();
    let name_width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut all_passed = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {:<name_width$}  {}", r.name, r.detail);
        all_passed &= r.passed;
    }
    println!(
        "{} of {} checks passed in {:.1} s",
        results.iter().filter(|r| r.passed).count(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
