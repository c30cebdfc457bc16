use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 1-D Cartesian undersampling pattern: one flag per phase-encode column,
/// constant along the readout axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    columns: Vec<bool>,
    rate: f64,
    acs_lines: usize,
}

impl SamplingMask {
    pub fn from_columns(columns: Vec<bool>, rate: f64, acs_lines: usize) -> Self {
        SamplingMask {
            columns,
            rate,
            acs_lines,
        }
    }

    pub fn full(width: usize) -> Self {
        SamplingMask {
            columns: vec![true; width],
            rate: 1.0,
            acs_lines: width,
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines
    }

    pub fn sampled(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    pub fn is_sampled(&self, column: usize) -> bool {
        self.columns[column]
    }

    /// Start index of the centred calibration block.
    pub fn acs_start(&self) -> usize {
        (self.width() - self.acs_lines.min(self.width())) / 2
    }
}

/// Centred block of `⌈acs_fraction·width⌉` calibration columns plus an
/// equispaced selection over the remaining columns, for a total of
/// `round(rate·width)` sampled columns. The seed only shifts the offset of
/// the equispaced comb.
pub fn make_cartesian_mask(width: usize, rate: f64, acs_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if width == 0 {
        return Err(Error::invalid("make_cartesian_mask", "width must be positive"));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(
            "make_cartesian_mask",
            format!("rate must lie in (0, 1), got {rate}"),
        ));
    }
    if !(0.0..1.0).contains(&acs_fraction) {
        return Err(Error::invalid(
            "make_cartesian_mask",
            format!("acs fraction must lie in [0, 1), got {acs_fraction}"),
        ));
    }
    let total = ((rate * width as f64).round() as usize).clamp(1, width);
    let acs = (acs_fraction * width as f64 - 1e-9).ceil().max(0.0) as usize;
    if acs > total {
        return Err(Error::invalid(
            "make_cartesian_mask",
            format!("{acs} calibration columns exceed the budget of {total} at rate {rate}"),
        ));
    }
    let mut columns = vec![false; width];
    let start = (width - acs) / 2;
    columns[start..start + acs].fill(true);
    let free: Vec<usize> = (0..width).filter(|&c| !columns[c]).collect();
    let remaining = total - acs;
    if remaining > 0 {
        let step = free.len() as f64 / remaining as f64;
        let offset = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..step);
        for i in 0..remaining {
            let k = ((offset + i as f64 * step).floor() as usize).min(free.len() - 1);
            columns[free[k]] = true;
        }
    }
    Ok(SamplingMask {
        columns,
        rate,
        acs_lines: acs,
    })
}
