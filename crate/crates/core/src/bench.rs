//! Timing of stream generation across window sizes and substep counts.

use std::fmt::Write as _;
use std::time::Instant;

use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::model::{AdaBovDenoiser, DenoiserConfig};
use crate::rng::{normal_tensor, SeedStreams, Stream};
use crate::stream::{init_stream, run, GenerationConfig};
use crate::tensor::Tensor;

/// Eight spatial sites with one-dimensional heads, which pushes as much of a
/// pass into attention scores as this architecture allows. Per-token layers
/// still cost more than temporal attention at L = 8, so the measured L-ratio
/// sits below the pure `(L + 1)²` trend.
pub fn attention_dominated_config() -> DenoiserConfig {
    DenoiserConfig {
        frame_h: 4,
        frame_w: 8,
        channels: 1,
        patch_h: 2,
        patch_w: 2,
        hidden: 16,
        depth: 1,
        heads: 16,
        window: 8,
        bov_enabled: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub window: usize,
    pub substeps: usize,
    /// Median over repeats.
    pub seconds_per_frame: f64,
    /// Counted, not timed.
    pub evals_per_frame: f64,
}

/// Thread cap from `BOV_THREADS`, defaulting to 1.
pub fn thread_cap() -> usize {
    std::env::var("BOV_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

fn one_repeat(
    model: &AdaBovDenoiser<f32>,
    window: usize,
    substeps: usize,
    frames: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = SeedStreams::new(seed).stream(Stream::Aux);
    let shape = model.config().frame_shape();
    let cond: Vec<Tensor<f32>> = (0..=window).map(|_| normal_tensor(&shape, &mut rng)).collect();
    let cfg = GenerationConfig { window, substeps, frames, seed, ..Default::default() };
    let mut st = init_stream(&cond, cfg, VarianceSchedule::standard())?;
    // warm-up iteration outside the timed region
    run(&mut st, model, 1)?;
    let evals0 = st.evals();
    let t = Instant::now();
    run(&mut st, model, frames)?;
    let secs = t.elapsed().as_secs_f64() / frames as f64;
    Ok((secs, (st.evals() - evals0) as f64 / frames as f64))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per frame for every `(L, n)` pair. Repeats are interleaved
/// across pairs so slow phases of the machine hit every pair alike.
pub fn bench(
    model: &AdaBovDenoiser<f32>,
    windows: &[usize],
    substeps: &[usize],
    frames: usize,
    repeats: usize,
    threads: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if frames == 0 || repeats == 0 || windows.is_empty() || substeps.is_empty() {
        return Err(Error::Config("bench needs at least one L, one n, one frame and one repeat".into()));
    }
    let pairs: Vec<(usize, usize)> = windows.iter().flat_map(|&l| substeps.iter().map(move |&n| (l, n))).collect();
    let threads = threads.clamp(1, repeats);
    let sweep = |r: usize| -> Result<Vec<(f64, f64)>> {
        pairs.iter().map(|&(l, n)| one_repeat(model, l, n, frames, seed.wrapping_add(r as u64))).collect()
    };
    let sweeps: Vec<Vec<(f64, f64)>> = if threads == 1 {
        (0..repeats).map(sweep).collect::<Result<_>>()?
    } else {
        let sweep = &sweep;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| s.spawn(move || (t..repeats).step_by(threads).map(sweep).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("bench thread panicked")).collect::<Result<Vec<_>>>()
        })?
    };
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, &(l, n))| BenchRow {
            window: l,
            substeps: n,
            seconds_per_frame: median(sweeps.iter().map(|s| s[i].0).collect()),
            evals_per_frame: sweeps[0][i].1,
        })
        .collect())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,n,seconds_per_frame,evals_per_frame\n");
    for r in rows {
        writeln!(s, "{},{},{:.9},{}", r.window, r.substeps, r.seconds_per_frame, r.evals_per_frame)
            .expect("writing to a String");
    }
    s
}
