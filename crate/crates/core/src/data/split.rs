use serde::{Deserialize, Serialize};

use crate::error::{Result, TigrError};
use crate::numerics::Rng;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffled split into train/validation/test by `fractions`.
///
/// Train and validation sizes are rounded; test takes the remainder.
pub fn split_dataset(ids: &[String], fractions: (f64, f64, f64), rng: &mut Rng) -> Result<DatasetSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(TigrError::config(
            "data.split",
            format!("fractions {a}, {b}, {c} must be in [0,1] and sum to 1"),
        ));
    }
    let mut shuffled = ids.to_vec();
    rng.shuffle(&mut shuffled);
    let n = shuffled.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
    })
}
