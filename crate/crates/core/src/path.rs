//! Time-stamped control history.
//!
//! Controls are piecewise constant: sample `j` holds on `[start + jΔt, start + (j+1)Δt)`.
//! Querying exactly at the open right end returns the left limit (the last sample),
//! which is what the lift needs before the current control has been decided.

use crate::error::{Error, Result};

const ALIGN_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ControlPath {
    start: f64,
    step: f64,
    m: usize,
    capacity: usize,
    head: usize,
    len: usize,
    data: Vec<f64>,
}

impl ControlPath {
    /// An empty ring buffer keeping at most `capacity` samples.
    pub fn with_capacity(start: f64, step: f64, m: usize, capacity: usize) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidArgument(format!("control step must be positive, got {step}")));
        }
        if m == 0 || capacity == 0 {
            return Err(Error::InvalidArgument("control dimension and capacity must be positive".into()));
        }
        Ok(Self {
            start,
            step,
            m,
            capacity,
            head: 0,
            len: 0,
            data: vec![0.0; capacity * m],
        })
    }

    pub fn from_samples(start: f64, step: f64, samples: &[Vec<f64>]) -> Result<Self> {
        let m = samples.first().map(|s| s.len()).unwrap_or(0);
        let mut path = Self::with_capacity(start, step, m.max(1), samples.len().max(1))?;
        for s in samples {
            path.push(s)?;
        }
        Ok(path)
    }

    /// Constant control `u` on `[start, end)`.
    pub fn constant(start: f64, end: f64, step: f64, u: &[f64]) -> Result<Self> {
        let count = ((end - start) / step - ALIGN_EPS).ceil().max(1.0) as usize;
        let samples = vec![u.to_vec(); count];
        Self::from_samples(start, step, &samples)
    }

    /// Samples `f(t)` at the cell starts of `[start, end)`.
    pub fn from_fn(start: f64, end: f64, step: f64, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let count = ((end - start) / step - ALIGN_EPS).ceil().max(1.0) as usize;
        let samples: Vec<Vec<f64>> = (0..count).map(|j| f(start + j as f64 * step)).collect();
        Self::from_samples(start, step, &samples)
    }

    pub fn push(&mut self, u: &[f64]) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::DimensionMismatch {
                what: "control sample",
                expected: self.m,
                got: u.len(),
            });
        }
        let slot = if self.len < self.capacity {
            let s = (self.head + self.len) % self.capacity;
            self.len += 1;
            s
        } else {
            let s = self.head;
            self.head = (self.head + 1) % self.capacity;
            self.start += self.step;
            s
        };
        self.data[slot * self.m..(slot + 1) * self.m].copy_from_slice(u);
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn start_time(&self) -> f64 {
        self.start
    }

    pub fn end_time(&self) -> f64 {
        self.start + self.len as f64 * self.step
    }

    /// Sample `j` counted from the oldest retained one.
    pub fn sample(&self, j: usize) -> &[f64] {
        debug_assert!(j < self.len);
        let slot = (self.head + j) % self.capacity;
        &self.data[slot * self.m..(slot + 1) * self.m]
    }

    /// Sample `q ≥ 1` steps back from the end: `q = 1` is the most recent.
    pub fn lag(&self, q: usize) -> &[f64] {
        self.sample(self.len - q)
    }

    fn index_of(&self, t: f64) -> Option<usize> {
        if self.len == 0 {
            return None;
        }
        let x = (t - self.start) / self.step;
        if x < -ALIGN_EPS {
            return None;
        }
        let j = (x + ALIGN_EPS).floor().max(0.0) as usize;
        if j < self.len {
            Some(j)
        } else if (t - self.end_time()).abs() <= ALIGN_EPS * self.step.max(1.0) {
            Some(self.len - 1)
        } else {
            None
        }
    }

    pub fn value_at(&self, t: f64) -> Result<&[f64]> {
        self.index_of(t)
            .map(|j| self.sample(j))
            .ok_or(Error::InsufficientHistory {
                needed_from: t,
                needed_to: t,
                have_from: self.start,
                have_to: self.end_time(),
            })
    }

    /// Errors unless the path covers `[from, to]` (right end may be the open end).
    pub fn require_window(&self, from: f64, to: f64) -> Result<()> {
        let tol = ALIGN_EPS * self.step.max(1.0);
        if self.len == 0 || self.start > from + tol || self.end_time() < to - tol {
            return Err(Error::InsufficientHistory {
                needed_from: from,
                needed_to: to,
                have_from: self.start,
                have_to: self.end_time(),
            });
        }
        Ok(())
    }

    /// All samples, oldest first.
    pub fn to_samples(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|j| self.sample(j).to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_drops_oldest_and_advances_start() {
        let mut p = ControlPath::with_capacity(0.0, 0.5, 1, 3).unwrap();
        for v in 0..5 {
            p.push(&[v as f64]).unwrap();
        }
        assert_eq!(p.len(), 3);
        assert!((p.start_time() - 1.0).abs() < 1e-15);
        assert_eq!(p.sample(0), &[2.0]);
        assert_eq!(p.lag(1), &[4.0]);
        assert_eq!(p.value_at(1.7).unwrap(), &[3.0]);
        // open right end returns the left limit
        assert_eq!(p.value_at(2.5).unwrap(), &[4.0]);
        assert!(p.value_at(0.9).is_err());
        assert!(p.value_at(2.6).is_err());
    }

    #[test]
    fn window_check() {
        let p = ControlPath::constant(-1.0, 0.0, 0.1, &[1.0]).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.require_window(-1.0, 0.0).is_ok());
        assert!(p.require_window(-1.05, 0.0).is_err());
    }
}
