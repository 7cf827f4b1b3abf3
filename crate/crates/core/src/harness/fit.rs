use crate::error::{Error, Result};

/// Least-squares slope of `ln(time)` against `ln(T)`.
pub fn fit_scaling_exponent(frames: &[usize], times: &[f64]) -> Result<f64> {
    if frames.len() != times.len() {
        return Err(Error::Fit(format!(
            "{} lengths but {} times",
            frames.len(),
            times.len()
        )));
    }
    if frames.len() < 4 {
        return Err(Error::Fit(format!(
            "need at least 4 points, got {}",
            frames.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Fit(format!("non-positive time {t}")));
    }
    let lo = *frames.iter().min().unwrap();
    let hi = *frames.iter().max().unwrap();
    if lo == 0 || hi < 8 * lo {
        return Err(Error::Fit(format!(
            "lengths {lo}..{hi} must span at least 8x"
        )));
    }
    let xs: Vec<f64> = frames.iter().map(|&t| (t as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
