//! Balanced epoch sampling across source datasets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config, Result};

/// Draws `quota` indices from every source (without replacement unless allowed) and shuffles
/// the union. `quota = None` uses the smallest source size.
pub fn epoch(sources: &BTreeMap<String, Vec<usize>>, quota: Option<usize>, replacement: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if sources.is_empty() || sources.values().any(Vec::is_empty) {
        return Err(config("every source dataset needs at least one record"));
    }
    let smallest = sources.values().map(Vec::len).min().unwrap_or(0);
    let quota = quota.unwrap_or(smallest);
    if quota > smallest && !replacement {
        let (tag, n) = sources.iter().map(|(k, v)| (k.as_str(), v.len())).min_by_key(|&(_, n)| n).unwrap_or(("", 0));
        return Err(config(format!(
            "epoch quota {quota} exceeds source {tag:?} with {n} records; lower the quota or enable sampling with replacement"
        )));
    }
    let mut out = Vec::with_capacity(quota * sources.len());
    for ids in sources.values() {
        if replacement {
            out.extend((0..quota).map(|_| ids[rng.random_range(0..ids.len())]));
        } else {
            let mut ids = ids.clone();
            ids.shuffle(rng);
            out.extend_from_slice(&ids[..quota]);
        }
    }
    out.shuffle(rng);
    Ok(out)
}
