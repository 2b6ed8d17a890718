use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bin width: one hour.
pub const DEFAULT_BIN_WIDTH: i64 = 3600;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bin width must be positive, got {0}")]
pub struct BinWidthError(pub i64);

/// A half-open time interval `[start, start + width)` in seconds since the
/// Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeBin {
    pub start: i64,
    pub width: i64,
}

impl TimeBin {
    pub fn end(&self) -> i64 {
        self.start + self.width
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start && ts < self.end()
    }

    pub fn next(&self) -> TimeBin {
        TimeBin {
            start: self.end(),
            width: self.width,
        }
    }
}

/// Partitions the time line into fixed-width bins aligned on `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinConfig {
    epoch: i64,
    width: i64,
}

impl Default for BinConfig {
    fn default() -> Self {
        BinConfig {
            epoch: 0,
            width: DEFAULT_BIN_WIDTH,
        }
    }
}

impl BinConfig {
    pub fn new(width: i64) -> Result<Self, BinWidthError> {
        Self::with_epoch(0, width)
    }

    pub fn with_epoch(epoch: i64, width: i64) -> Result<Self, BinWidthError> {
        if width <= 0 {
            return Err(BinWidthError(width));
        }
        Ok(BinConfig { epoch, width })
    }

    pub fn width(&self) -> i64 {
        self.width
    }

    /// Index of the bin holding `ts`: `floor((ts - epoch) / width)`.
    pub fn index(&self, ts: i64) -> i64 {
        (ts - self.epoch).div_euclid(self.width)
    }

    pub fn bin_at(&self, index: i64) -> TimeBin {
        TimeBin {
            start: self.epoch + index * self.width,
            width: self.width,
        }
    }

    pub fn assign(&self, ts: i64) -> TimeBin {
        self.bin_at(self.index(ts))
    }
}
