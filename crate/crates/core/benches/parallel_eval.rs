//! Parallel vs sequential execution of per-clip work: label propagation plus
//! J/F scoring, and dataset generation. Build with `--no-default-features` to
//! see both arms fall back to the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use segfuse::cycletrack::{build_cycle, propagate_masks, CycleConfig};
use segfuse::metrics::ClipEvaluation;
use segfuse::parallel::{self, Execution};
use segfuse::synthdata::{generate_clip, generate_dataset_with, SceneConfig, SplitSizes, VideoClip};
use std::hint::black_box;

const ARMS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scene(seed: u64) -> SceneConfig {
    SceneConfig {
        image_size: [64, 64],
        n_fruits: [1, 3],
        fruit_radius: [6.0, 12.0],
        motion_amplitude: 0.5,
        clip_length: 12,
        seed,
        ..SceneConfig::default()
    }
}

fn propagate_and_score(c: &mut Criterion) {
    let model = build_cycle(
        &CycleConfig {
            image_size: 64,
            feature_channels: 8,
            encoder_depth: 2,
            patch_size: 32,
            ..CycleConfig::default()
        },
        0,
    )
    .unwrap();
    let clips: Vec<VideoClip> = (0..8).map(|s| generate_clip(&scene(s)).unwrap()).collect();
    let eval = |clip: &VideoClip| {
        let gt = clip.masks().unwrap();
        let pred = propagate_masks(&model, &gt[0], clip, model.config.top_k).unwrap();
        ClipEvaluation::compute(&clip.id, &pred, gt, 1).unwrap().iou
    };
    let mut group = c.benchmark_group("propagate_and_score_8_clips");
    group.sample_size(10);
    for (name, exec) in ARMS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(parallel::map(exec, &clips, eval)))
        });
    }
    group.finish();
}

fn generate(c: &mut Criterion) {
    let sizes = SplitSizes {
        n_train_images: 12,
        n_val_images: 6,
        n_unlabelled_clips: 4,
        n_test_clips: 4,
        divisor: 1,
        frame_stride: 4,
    };
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(10);
    for (name, exec) in ARMS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(generate_dataset_with(&scene(7), &sizes, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, propagate_and_score, generate);
criterion_main!(benches);
