use crate::error::{contract, Result};
use crate::numerics::Tensor;

/// Weighted sum of per-task MSEs; also returns each task's MSE.
///
/// `preds[t][i]` and `targets[t][i]` are task `t`'s output and target for image `i`.
pub fn mtl_loss(preds: &[Vec<Tensor>], targets: &[Vec<Tensor>], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if preds.len() != targets.len() || preds.len() != weights.len() {
        return Err(contract!(
            "mtl_loss: {} predictions, {} targets, {} weights",
            preds.len(),
            targets.len(),
            weights.len()
        ));
    }
    let mut total = 0.0;
    let mut per_task = Vec::with_capacity(preds.len());
    for ((p, y), &w) in preds.iter().zip(targets).zip(weights) {
        let m = mse(p, y)?;
        total += w * m;
        per_task.push(m);
    }
    Ok((total, per_task))
}

/// Mean squared error over every element of a batch.
pub fn mse(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(contract!(
            "mse over {} predictions and {} targets",
            preds.len(),
            targets.len()
        ));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (p, y) in preds.iter().zip(targets) {
        sum += p.sub(y)?.norm_sq();
        count += p.len();
    }
    Ok(sum / count as f64)
}

/// Average signed relative change against single-task baselines, in percent.
///
/// `(1/T) sum_t (-1)^{l_t} (R_mtl - R_st) / R_st * 100`, where `l_t` is set
/// for metrics where lower is better.
pub fn delta_m(r_mtl: &[f64], r_st: &[f64], lower_is_better: &[bool]) -> Result<f64> {
    if r_mtl.len() != r_st.len() || r_mtl.len() != lower_is_better.len() || r_mtl.is_empty() {
        return Err(contract!(
            "delta_m needs equal non-empty lists, got {}, {} and {}",
            r_mtl.len(),
            r_st.len(),
            lower_is_better.len()
        ));
    }
    let mut acc = 0.0;
    for ((&m, &s), &low) in r_mtl.iter().zip(r_st).zip(lower_is_better) {
        if s == 0.0 {
            return Err(contract!("delta_m: single-task baseline of zero"));
        }
        let rel = (m - s) / s;
        acc += if low { -rel } else { rel };
    }
    Ok(100.0 * acc / r_mtl.len() as f64)
}

/// Two decimals with an explicit sign; exact zero prints as `0.00`.
pub fn format_delta_m(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "0.00" || s == "-0.00" {
        "0.00".into()
    } else if v > 0.0 {
        format!("+{s}")
    } else {
        s
    }
}
