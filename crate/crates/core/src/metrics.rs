//! Reconstruction metrics on 8-bit images.
//!
//! SSIM uses a uniform 8x8 window slid with stride 1 (the whole image when it
//! is smaller), `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` with `L = 255`, population
//! statistics, and is averaged over windows and channels.

use std::fmt;

use crate::error::{Error, Result};
use crate::pnm::Image;

const MAX: f64 = 255.0;
const WINDOW: usize = 8;

fn check(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::Image(format!(
            "cannot compare {}x{}x{} with {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (MAX * MAX / m).log10()
    })
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let c1 = (0.01 * MAX).powi(2);
    let c2 = (0.03 * MAX).powi(2);
    let wx = WINDOW.min(a.width);
    let wy = WINDOW.min(a.height);
    let n = (wx * wy) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for y0 in 0..=a.height - wy {
            for x0 in 0..=a.width - wx {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wy {
                    for x in x0..x0 + wx {
                        let p = a.sample(x, y, c) as f64;
                        let q = b.sample(x, y, c) as f64;
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricReport {
    pub fn compare(reference: &Image, test: &Image) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, test)?,
            ssim: ssim(reference, test)?,
            mse: mse(reference, test)?,
        })
    }

    /// Per-field mean over a non-empty list.
    pub fn average(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("no metric reports to average"));
        }
        let n = reports.len() as f64;
        Ok(Self {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.psnr.is_infinite() {
            write!(f, "psnr=inf")?;
        } else {
            write!(f, "psnr={:.4}", self.psnr)?;
        }
        write!(f, " ssim={:.6} mse={:.6}", self.ssim, self.mse)
    }
}
