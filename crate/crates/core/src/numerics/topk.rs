use crate::error::{Error, Result};

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::Argument(format!(
            "top-{k} requested from {} values",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}
