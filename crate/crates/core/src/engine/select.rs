//! `Select` strategies: which remaining support images serve as context
//! while one support image plays pseudo-query.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectStrategy {
    /// The full remaining support set (no selection).
    Identity,
    /// A random subset of size `j` from the remaining supports.
    RandomK(usize),
}

impl SelectStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(SelectStrategy::Identity);
        }
        if let Some(j) = s.strip_prefix("random_k:") {
            let j: usize = j
                .parse()
                .map_err(|_| Error::Config(format!("bad random_k size in '{}'", s)))?;
            return Ok(SelectStrategy::RandomK(j));
        }
        Err(Error::Config(format!(
            "unknown select strategy '{}', expected identity or random_k:<j>",
            s
        )))
    }

    pub fn describe(&self) -> String {
        match self {
            SelectStrategy::Identity => "identity".to_string(),
            SelectStrategy::RandomK(j) => format!("random_k:{}", j),
        }
    }

    pub fn validate(&self, support_size: usize) -> Result<()> {
        match self {
            SelectStrategy::Identity => Ok(()),
            SelectStrategy::RandomK(j) => {
                if *j == 0 || *j > support_size.saturating_sub(1) {
                    Err(Error::Config(format!(
                        "random_k size {} must satisfy 1 <= j <= N*K - 1 = {}",
                        j,
                        support_size.saturating_sub(1)
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Choose context indices from `0..support_size` excluding `exclude`.
    pub fn select(
        &self,
        support_size: usize,
        exclude: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let remaining: Vec<usize> = (0..support_size).filter(|i| *i != exclude).collect();
        if remaining.is_empty() {
            return Err(Error::Contract {
                op: "select",
                detail: format!(
                    "support set of size {} leaves no context for pseudo-query {}; \
                     use replicate_support to enlarge 1-shot episodes",
                    support_size, exclude
                ),
            });
        }
        let chosen = match self {
            SelectStrategy::Identity => remaining,
            SelectStrategy::RandomK(j) => {
                let mut pool = remaining;
                pool.shuffle(rng);
                pool.truncate(*j);
                pool.sort_unstable();
                pool
            }
        };
        validate_context(support_size, exclude, &chosen)?;
        Ok(chosen)
    }
}

/// Contract check: a context selection must be non-empty, in range, and
/// must never contain the pseudo-query itself.
pub fn validate_context(support_size: usize, exclude: usize, context: &[usize]) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Contract {
            op: "select",
            detail: "empty context selection".to_string(),
        });
    }
    for &i in context {
        if i >= support_size {
            return Err(Error::Contract {
                op: "select",
                detail: format!("context index {} out of range 0..{}", i, support_size),
            });
        }
        if i == exclude {
            return Err(Error::Contract {
                op: "select",
                detail: format!("context contains the pseudo-query index {}", i),
            });
        }
    }
    Ok(())
}
