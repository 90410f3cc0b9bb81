//! Sliding forecast windows over daily feature arrays.

use crate::error::{argument, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Forecast origins `o` whose inputs `o-T+1..=o` and targets `o+1..=o+K`
/// both fall inside days `lo..hi`.
pub fn origins_in(lo: usize, hi: usize, input_len: usize, horizon: usize) -> Vec<usize> {
    let first = lo + input_len - 1;
    if hi < horizon + 1 || first + horizon >= hi {
        return Vec::new();
    }
    (first..hi - horizon).collect()
}

fn mask_of<F: Scalar>(v: f32) -> (F, F) {
    if v.is_nan() {
        (F::zero(), F::zero())
    } else {
        (F::lit(v as f64), F::one())
    }
}

/// Daily `C x H x W` frames with `H x W` target maps (NaN = unsupervised).
#[derive(Debug, Clone)]
pub struct MapWindows {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub days: usize,
    /// `days x C x H x W`
    pub frames: Vec<f32>,
    /// `days x H x W`
    pub targets: Vec<f32>,
    pub origins: Vec<usize>,
    pub input_len: usize,
    pub horizon: usize,
}

impl MapWindows {
    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        if self.frames.len() != self.days * self.channels * plane || self.targets.len() != self.days * plane {
            return Err(argument("map windows: array sizes do not match dimensions"));
        }
        if self.input_len == 0 || self.horizon == 0 {
            return Err(argument("map windows: input_len and horizon must be positive"));
        }
        if let Some(o) = self.origins.iter().find(|&&o| o + 1 < self.input_len || o + self.horizon >= self.days) {
            return Err(argument(format!("map windows: origin {o} out of range")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Input frames (`T` tensors of `N x C x H x W`) for windows `idx`.
    pub fn inputs<F: Scalar>(&self, idx: &[usize]) -> Vec<Tensor<F>> {
        let fsz = self.channels * self.height * self.width;
        (0..self.input_len)
            .map(|t| {
                let mut data = Vec::with_capacity(idx.len() * fsz);
                for &i in idx {
                    let day = self.origins[i] + 1 + t - self.input_len;
                    data.extend(self.frames[day * fsz..(day + 1) * fsz].iter().map(|&v| F::lit(v as f64)));
                }
                Tensor::new(&[idx.len(), self.channels, self.height, self.width], data).expect("consistent size")
            })
            .collect()
    }

    /// Targets and masks (`K` tensors of `N x 1 x H x W` each).
    pub fn targets<F: Scalar>(&self, idx: &[usize]) -> (Vec<Tensor<F>>, Vec<Tensor<F>>) {
        let psz = self.height * self.width;
        let shape = [idx.len(), 1, self.height, self.width];
        (1..=self.horizon)
            .map(|k| {
                let mut t = Vec::with_capacity(idx.len() * psz);
                let mut m = Vec::with_capacity(idx.len() * psz);
                for &i in idx {
                    let day = self.origins[i] + k;
                    for &v in &self.targets[day * psz..(day + 1) * psz] {
                        let (tv, mv) = mask_of::<F>(v);
                        t.push(tv);
                        m.push(mv);
                    }
                }
                (Tensor::new(&shape, t).expect("size"), Tensor::new(&shape, m).expect("size"))
            })
            .unzip()
    }
}

/// Per-site daily feature vectors with site targets (NaN = unsupervised).
#[derive(Debug, Clone)]
pub struct SiteWindows {
    pub dim: usize,
    pub sites: usize,
    pub days: usize,
    /// `sites x days x dim`
    pub features: Vec<f32>,
    /// `sites x days`
    pub targets: Vec<f32>,
    /// `(site, origin)`
    pub windows: Vec<(usize, usize)>,
    pub input_len: usize,
    pub horizon: usize,
}

impl SiteWindows {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.sites * self.days * self.dim || self.targets.len() != self.sites * self.days {
            return Err(argument("site windows: array sizes do not match dimensions"));
        }
        if self.input_len == 0 || self.horizon == 0 {
            return Err(argument("site windows: input_len and horizon must be positive"));
        }
        if let Some(w) = self
            .windows
            .iter()
            .find(|&&(s, o)| s >= self.sites || o + 1 < self.input_len || o + self.horizon >= self.days)
        {
            return Err(argument(format!("site windows: window {w:?} out of range")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// `T` tensors of `N x dim`.
    pub fn inputs<F: Scalar>(&self, idx: &[usize]) -> Vec<Tensor<F>> {
        (0..self.input_len)
            .map(|t| {
                let mut data = Vec::with_capacity(idx.len() * self.dim);
                for &i in idx {
                    let (s, o) = self.windows[i];
                    let day = o + 1 + t - self.input_len;
                    let at = (s * self.days + day) * self.dim;
                    data.extend(self.features[at..at + self.dim].iter().map(|&v| F::lit(v as f64)));
                }
                Tensor::new(&[idx.len(), self.dim], data).expect("consistent size")
            })
            .collect()
    }

    /// Targets and mask, each `N x K`.
    pub fn targets<F: Scalar>(&self, idx: &[usize]) -> (Tensor<F>, Tensor<F>) {
        let mut t = Vec::with_capacity(idx.len() * self.horizon);
        let mut m = Vec::with_capacity(idx.len() * self.horizon);
        for &i in idx {
            let (s, o) = self.windows[i];
            for k in 1..=self.horizon {
                let (tv, mv) = mask_of::<F>(self.targets[s * self.days + o + k]);
                t.push(tv);
                m.push(mv);
            }
        }
        let shape = [idx.len(), self.horizon];
        (Tensor::new(&shape, t).expect("size"), Tensor::new(&shape, m).expect("size"))
    }
}
