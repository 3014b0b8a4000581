use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{BasinDataset, LandUse};
use crate::error::{Error, Result};

/// Test years of the temporal held-out protocol.
pub const DEFAULT_TEST_YEARS: [i32; 7] = [1985, 1990, 1995, 2000, 2005, 2010, 2015];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPlan {
    TemporalHeldOut {
        test_years: Vec<i32>,
    },
    SpatialStratified {
        test_fraction: f64,
        #[serde(default = "yes")]
        stratify_by_land_use: bool,
        seed: u64,
    },
}

fn yes() -> bool {
    true
}

/// A set of (basin, day) rows: the product of a basin list and a day mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowSet {
    pub basins: Vec<usize>,
    pub day_mask: Vec<bool>,
}

impl RowSet {
    pub fn days(&self) -> impl Iterator<Item = usize> + '_ {
        self.day_mask.iter().enumerate().filter(|(_, m)| **m).map(|(t, _)| t)
    }

    pub fn n_days(&self) -> usize {
        self.day_mask.iter().filter(|m| **m).count()
    }

    pub fn len(&self) -> usize {
        self.basins.len() * self.n_days()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, basin: usize, day: usize) -> bool {
        self.day_mask.get(day).copied().unwrap_or(false) && self.basins.contains(&basin)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: RowSet,
    pub test: RowSet,
}

pub fn split(ds: &BasinDataset, plan: &SplitPlan) -> Result<Split> {
    let all_basins: Vec<usize> = (0..ds.basins.len()).collect();
    match plan {
        SplitPlan::TemporalHeldOut { test_years } => {
            let years: BTreeSet<i32> = ds.calendar.iter().map(chrono::Datelike::year).collect();
            if let Some(y) = test_years.iter().find(|y| !years.contains(y)) {
                return Err(Error::Split(format!("test year {y} is not in the calendar")));
            }
            let test_mask: Vec<bool> = (0..ds.n_days()).map(|t| test_years.contains(&ds.year_of(t))).collect();
            let train_mask = test_mask.iter().map(|m| !m).collect();
            Ok(Split {
                train: RowSet {
                    basins: all_basins.clone(),
                    day_mask: train_mask,
                },
                test: RowSet {
                    basins: all_basins,
                    day_mask: test_mask,
                },
            })
        }
        SplitPlan::SpatialStratified {
            test_fraction,
            stratify_by_land_use,
            seed,
        } => {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::Split(format!("test fraction {test_fraction} outside (0, 1)")));
            }
            let strata: Vec<Vec<usize>> = if *stratify_by_land_use {
                LandUse::ALL
                    .iter()
                    .map(|c| all_basins.iter().copied().filter(|&b| ds.basins[b].land_use == *c).collect())
                    .collect()
            } else {
                vec![all_basins.clone()]
            };
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut test = Vec::new();
            for (k, mut members) in strata.into_iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                if members.len() == 1 {
                    return Err(Error::Split(format!(
                        "stratum {} has a single basin and cannot supply a test basin",
                        if *stratify_by_land_use {
                            format!("{:?}", LandUse::ALL[k])
                        } else {
                            "all".to_string()
                        }
                    )));
                }
                let n_test = ((test_fraction * members.len() as f64).floor() as usize).max(1);
                members.shuffle(&mut rng);
                test.extend_from_slice(&members[..n_test]);
            }
            test.sort_unstable();
            let train: Vec<usize> = all_basins.into_iter().filter(|b| !test.contains(b)).collect();
            let every_day = vec![true; ds.n_days()];
            Ok(Split {
                train: RowSet {
                    basins: train,
                    day_mask: every_day.clone(),
                },
                test: RowSet {
                    basins: test,
                    day_mask: every_day,
                },
            })
        }
    }
}
