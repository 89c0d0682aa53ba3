//! Trains the toy flow on synthetic shapes and prints mean IoU on held-out
//! shapes for each starting point. Usage: `toy_trend [train_count] [epochs]`.

use std::time::Instant;

use geoforge::flow::{train_toy, ConditionVector, FlowConfig, SurrogateSpec, TrainConfig};
use geoforge::metrics::voxel_iou;
use geoforge::voxel::{lod_prior, synth_shape, LodLevel};

const N: usize = 64;
const HELD_OUT: u64 = 24;
const HELD_OUT_SEED: u64 = 100_000;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let train: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(TrainConfig::default().epochs);

    let corpus = (0..train)
        .map(|s| {
            let grid = synth_shape(s, N);
            ConditionVector::infer(&grid).map(|c| (grid, c))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let started = Instant::now();
    let config = TrainConfig { epochs, ..TrainConfig::default() };
    let model = train_toy(&corpus, SurrogateSpec::default_for(N), &config)?;
    println!("trained in {:.1}s, loss history {:?}", started.elapsed().as_secs_f64(), model.loss_history);

    let mut sums = [0.0; 4];
    for s in 0..HELD_OUT {
        let gt = synth_shape(HELD_OUT_SEED + s, N);
        let cond = ConditionVector::infer(&gt)?;
        let flow = FlowConfig { seed: s, ..FlowConfig::default() };
        sums[0] += voxel_iou(&model.generate(None, Some(&cond), &flow)?, &gt)?;
        for (i, lod) in LodLevel::ALL.iter().enumerate() {
            let prior = lod_prior(&gt, *lod)?;
            sums[i + 1] += voxel_iou(&model.generate(Some(&prior), Some(&cond), &flow)?, &gt)?;
        }
    }
    let means = sums.map(|s| s / HELD_OUT as f64);
    println!("mean IoU  noise {:.3}  lod0 {:.3}  lod1 {:.3}  lod2 {:.3}", means[0], means[1], means[2], means[3]);
    Ok(())
}
