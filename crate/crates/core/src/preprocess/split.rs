use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::slices::{SliceRecord, Split};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    Volume,
    Slice,
}

/// Number of units sent to training: `round(ratio · n)`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Assign `split` on every record with a seeded shuffle. With
/// [`SplitUnit::Volume`] all slices of a volume land on the same side.
pub fn split_dataset(records: &mut [SliceRecord], ratio: f64, seed: u64, unit: SplitUnit) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CoreError::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match unit {
        SplitUnit::Volume => {
            let mut ids: Vec<String> = records
                .iter()
                .map(|r| r.volume_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            ids.shuffle(&mut rng);
            let n_train = train_count(ids.len(), ratio);
            let side: BTreeMap<String, Split> = ids
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id, if i < n_train { Split::Train } else { Split::Test }))
                .collect();
            for r in records.iter_mut() {
                r.split = Some(side[&r.volume_id]);
            }
        }
        SplitUnit::Slice => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut rng);
            let n_train = train_count(order.len(), ratio);
            for (rank, i) in order.into_iter().enumerate() {
                records[i].split = Some(if rank < n_train { Split::Train } else { Split::Test });
            }
        }
    }
    Ok(())
}
