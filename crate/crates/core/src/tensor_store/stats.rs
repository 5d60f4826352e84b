//! Mergeable mean/variance accumulators.

use serde::{Deserialize, Serialize};

/// Count, mean and sum of squared deviations of a sample.
///
/// Two accumulators over disjoint samples merge into the accumulator of the
/// concatenated sample (Chan et al. pairwise update), so large tensors can be
/// reduced chunk by chunk.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl StreamStats {
    pub const EMPTY: StreamStats = StreamStats {
        count: 0,
        mean: 0.0,
        m2: 0.0,
    };

    /// Builds stats from raw parts. `m2` is clamped at zero.
    pub fn from_parts(count: u64, mean: f64, m2: f64) -> Self {
        if count == 0 {
            return Self::EMPTY;
        }
        StreamStats {
            count,
            mean,
            m2: m2.max(0.0),
        }
    }

    /// Corrected two-pass statistics of an in-memory slice.
    pub fn from_slice(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::EMPTY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let (sum_d, sum_d2) = values.iter().fold((0.0, 0.0), |(s, s2), &x| {
            let d = x - mean;
            (s + d, s2 + d * d)
        });
        // sum_d is the rounding residue of the mean; fold it back in.
        let mean = mean + sum_d / n;
        let m2 = sum_d2 - sum_d * sum_d / n;
        Self::from_parts(values.len() as u64, mean, m2)
    }

    /// Welford single-element update.
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &StreamStats) -> StreamStats {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let count = self.count + other.count;
        let n = count as f64;
        let delta = other.mean - self.mean;
        let mean = (na * self.mean + nb * other.mean) / n;
        let m2 = self.m2 + other.m2 + delta * delta * (na * nb / n);
        Self::from_parts(count, mean, m2)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Bessel-corrected variance; `None` below two samples.
    pub fn sample_variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn sample_std(&self) -> Option<f64> {
        self.sample_variance().map(f64::sqrt)
    }
}

impl FromIterator<f64> for StreamStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = StreamStats::EMPTY;
        for x in iter {
            s.push(x);
        }
        s
    }
}
