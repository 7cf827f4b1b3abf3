use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::report::csv_document;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::store::Session;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Encoder frames per sequence.
    pub frames: usize,
    pub ms_per_seq: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Wall-clock time of one batch through the encoder stack alone, in ms.
fn encoder_batch_ms(model: &Model, inputs: &[Tensor]) -> Result<f64> {
    let start = Instant::now();
    for h in inputs {
        let mut s = Session::eval(model.store());
        let hv = s.graph.constant(h.clone());
        let out = model.encode(&mut s, hv, h.dim(0), None)?;
        std::hint::black_box(s.graph.value(out));
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Median encoder time per sequence for each length in `frames`.
///
/// Inputs are random `[T×d]` encoder activations; the subsampler and
/// classifier are excluded. Runs on the calling thread.
pub fn time_inference(
    model: &Model,
    frames: &[usize],
    batch: usize,
    repeats: usize,
    warmup: usize,
) -> Result<Vec<Timing>> {
    if batch == 0 || repeats == 0 {
        return Err(Error::contract(
            "time_inference",
            "batch and repeats must be positive",
        ));
    }
    let d = model.config().width;
    let mut rng = rng::stream(0, 0xbe7c);
    let mut out = Vec::with_capacity(frames.len());
    for &t in frames {
        let inputs: Vec<Tensor> = (0..batch)
            .map(|_| Tensor::from_fn([t, d], |_| StandardNormal.sample(&mut rng)))
            .collect();
        for _ in 0..warmup {
            encoder_batch_ms(model, &inputs)?;
        }
        let mut runs = (0..repeats)
            .map(|_| encoder_batch_ms(model, &inputs))
            .collect::<Result<Vec<_>>>()?;
        out.push(Timing {
            frames: t,
            ms_per_seq: median(&mut runs) / batch as f64,
        });
    }
    Ok(out)
}

/// Plot-ready `T,ms` curve.
pub fn timings_csv(hash: &str, timings: &[Timing]) -> String {
    let rows: Vec<Vec<String>> = timings
        .iter()
        .map(|t| vec![t.frames.to_string(), format!("{:.6}", t.ms_per_seq)])
        .collect();
    csv_document(hash, &["T", "ms"], &rows)
}
