//! Summary statistics over generated frames and CSV helpers.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub frames: usize,
    pub pixels: usize,
    pub mean: f64,
    /// Population variance over all pixels of all frames.
    pub variance: f64,
    /// Mean cosine similarity of adjacent frames.
    pub consistency: f64,
    /// Mean absolute adjacent-frame difference.
    pub dynamic_degree: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 && bb == 0.0 {
        1.0
    } else if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

pub fn frame_stats(frames: &[Tensor<f32>]) -> Result<EvalStats> {
    let first = frames.first().ok_or_else(|| Error::Config("no frames to evaluate".into()))?;
    if frames.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::Data("frames differ in shape".into()));
    }
    let pixels = frames.len() * first.len();
    let mean = frames.iter().flat_map(|f| f.data()).map(|&x| x as f64).sum::<f64>() / pixels as f64;
    let variance =
        frames.iter().flat_map(|f| f.data()).map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / pixels as f64;
    let pairs = frames.len().saturating_sub(1);
    let (consistency, dynamic_degree) = if pairs == 0 {
        (1.0, 0.0)
    } else {
        let c = frames.windows(2).map(|w| cosine(w[0].data(), w[1].data())).sum::<f64>() / pairs as f64;
        let d = frames
            .windows(2)
            .map(|w| w[0].data().iter().zip(w[1].data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>())
            .sum::<f64>()
            / (pairs * first.len()) as f64;
        (c, d)
    };
    Ok(EvalStats { frames: frames.len(), pixels, mean, variance, consistency, dynamic_degree })
}

pub fn eval_csv(stats: &EvalStats, predicted_variance: Option<f64>) -> String {
    let mut s = String::from("frames,pixels,mean,variance,consistency,dynamic_degree");
    if predicted_variance.is_some() {
        s.push_str(",predicted_variance");
    }
    s.push('\n');
    write!(
        s,
        "{},{},{:.8},{:.8},{:.8},{:.8}",
        stats.frames, stats.pixels, stats.mean, stats.variance, stats.consistency, stats.dynamic_degree
    )
    .expect("writing to a String");
    if let Some(p) = predicted_variance {
        write!(s, ",{p:.8}").expect("writing to a String");
    }
    s.push('\n');
    s
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{},{l:.8}", i + 1).expect("writing to a String");
    }
    s
}
