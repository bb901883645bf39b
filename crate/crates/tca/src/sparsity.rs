//! Sparsity configurations: discrete distributions over per-block retain
//! counts {1, 2, 4, ..., b}, generated by a log-Gaussian sweep, plus the
//! decoding budget derived from a configuration.

use crate::error::{Result, TcaError};

/// The allowable per-block retain counts for block size `b`: the powers of
/// two 1, 2, 4, ..., b.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainCountSet {
    block_size: usize,
    counts: Vec<usize>,
}

impl RetainCountSet {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size < 2 || !block_size.is_power_of_two() {
            return Err(TcaError::invalid(
                "block_size",
                format!("must be a power of two >= 2, got {block_size}"),
            ));
        }
        let mut counts = Vec::new();
        let mut k = 1;
        while k <= block_size {
            counts.push(k);
            k *= 2;
        }
        Ok(RetainCountSet { block_size, counts })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// A sparsity policy for one head: probability `p_k` that a block keeps
/// `k` tokens, with the `p_k` normalized over the retain-count grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityConfig {
    grid: RetainCountSet,
    probs: Vec<f64>,
    mu: f64,
    sigma: f64,
}

impl SparsityConfig {
    /// Log-Gaussian configuration: `p_k` proportional to
    /// `exp(-(log2 k - mu)^2 / (2 sigma^2))`, normalized over the grid.
    pub fn make(block_size: usize, mu: f64, sigma: f64) -> Result<Self> {
        if sigma.is_nan() || sigma <= 0.0 || !sigma.is_finite() {
            return Err(TcaError::invalid(
                "sigma",
                format!("must be a positive finite number, got {sigma}"),
            ));
        }
        if !mu.is_finite() {
            return Err(TcaError::invalid("mu", format!("must be finite, got {mu}")));
        }
        let grid = RetainCountSet::new(block_size)?;
        let weights: Vec<f64> = grid
            .counts()
            .iter()
            .map(|&k| {
                let x = (k as f64).log2() - mu;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // all weights underflowed; mu is so far off the grid that the
            // nearest count should take all the mass
            let nearest = grid
                .counts()
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = ((a as f64).log2() - mu).abs();
                    let db = ((b as f64).log2() - mu).abs();
                    da.total_cmp(&db)
                })
                .expect("grid is nonempty");
            return SparsityConfig::point_mass(block_size, nearest);
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Ok(SparsityConfig {
            grid,
            probs,
            mu,
            sigma,
        })
    }

    /// Degenerate configuration putting all mass on one retain count.
    /// `point_mass(b, b)` is the dense policy: every block keeps all
    /// tokens.
    pub fn point_mass(block_size: usize, count: usize) -> Result<Self> {
        let grid = RetainCountSet::new(block_size)?;
        let Some(pos) = grid.counts().iter().position(|&k| k == count) else {
            return Err(TcaError::invalid(
                "count",
                format!("{count} is not in the retain-count grid for block size {block_size}"),
            ));
        };
        let mut probs = vec![0.0; grid.counts().len()];
        probs[pos] = 1.0;
        let mu = (count as f64).log2();
        Ok(SparsityConfig {
            grid,
            probs,
            mu,
            sigma: f64::MIN_POSITIVE,
        })
    }

    /// Rebuilds a configuration from serialized parts, revalidating the
    /// distribution invariants.
    pub fn from_parts(block_size: usize, mu: f64, sigma: f64, probs: Vec<f64>) -> Result<Self> {
        let grid = RetainCountSet::new(block_size)?;
        if probs.len() != grid.counts().len() {
            return Err(TcaError::invalid(
                "probs",
                format!(
                    "expected {} probabilities, got {}",
                    grid.counts().len(),
                    probs.len()
                ),
            ));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(TcaError::invalid("probs", "probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TcaError::invalid(
                "probs",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        Ok(SparsityConfig {
            grid,
            probs,
            mu,
            sigma,
        })
    }

    pub fn block_size(&self) -> usize {
        self.grid.block_size()
    }

    pub fn retain_counts(&self) -> &[usize] {
        self.grid.counts()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Mean retained tokens per block, `sum k * p_k`, in `[1, b]`.
    pub fn expected_budget(&self) -> f64 {
        self.grid
            .counts()
            .iter()
            .zip(&self.probs)
            .map(|(&k, &p)| k as f64 * p)
            .sum()
    }

    /// Per-block token budget used while decoding: the floor of the
    /// expected budget, clamped to at least 1 so a head never keeps zero
    /// tokens from a completed block.
    pub fn decode_budget(&self) -> usize {
        (self.expected_budget().floor() as usize).max(1)
    }
}

/// Ordered candidate configurations sweeping from efficiency-oriented to
/// accuracy-oriented.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    configs: Vec<SparsityConfig>,
}

impl CandidateSet {
    /// Generates `count` candidates for block size `b` by sweeping the
    /// log-space center from 0 to log2(b):
    /// `mu_i = log2(1 + (i-1)(b-1)/(count-1))` for i in 1..=count.
    pub fn generate(block_size: usize, count: usize, sigma: f64) -> Result<Self> {
        if count < 2 {
            return Err(TcaError::invalid(
                "candidates",
                format!("need at least 2 candidates, got {count}"),
            ));
        }
        let b = block_size as f64;
        let configs = (1..=count)
            .map(|i| {
                let mu = (1.0 + (i - 1) as f64 * (b - 1.0) / (count - 1) as f64).log2();
                SparsityConfig::make(block_size, mu, sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CandidateSet { configs })
    }

    /// Wraps an explicit candidate list, ordered sparsest to densest.
    pub fn from_configs(configs: Vec<SparsityConfig>) -> Result<Self> {
        if configs.is_empty() {
            return Err(TcaError::invalid("candidates", "candidate list is empty"));
        }
        if configs
            .windows(2)
            .any(|w| w[0].block_size() != w[1].block_size())
        {
            return Err(TcaError::invalid(
                "candidates",
                "all candidates must share one block size",
            ));
        }
        Ok(CandidateSet { configs })
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Candidate by 1-based index, matching the sweep numbering.
    pub fn get(&self, index: usize) -> Option<&SparsityConfig> {
        self.configs.get(index.checked_sub(1)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SparsityConfig> {
        self.configs.iter()
    }
}
