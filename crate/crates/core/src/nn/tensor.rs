use crate::error::{Error, Result};

/// Batch x time x channels array, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n: usize,
    t: usize,
    d: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, t: usize, d: usize) -> Self {
        Self {
            n,
            t,
            d,
            data: vec![0.0; n * t * d],
        }
    }

    pub fn from_vec(n: usize, t: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n * t * d == 0 || data.len() != n * t * d {
            return Err(Error::Shape(format!(
                "tensor {n}x{t}x{d} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { n, t, d, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.t, self.d)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, t: usize, c: usize) -> f64 {
        self.data[(b * self.t + t) * self.d + c]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, t: usize, c: usize) -> &mut f64 {
        &mut self.data[(b * self.t + t) * self.d + c]
    }

    /// The `t x d` block of sample `b`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let len = self.t * self.d;
        &self.data[b * len..(b + 1) * len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same data viewed with another shape of equal size.
    pub fn reshaped(self, n: usize, t: usize, d: usize) -> Result<Self> {
        Self::from_vec(n, t, d, self.data)
    }

    /// Rows `idx` gathered into a new batch.
    pub fn gather(&self, idx: &[usize]) -> Tensor3 {
        let len = self.t * self.d;
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Tensor3 {
            n: idx.len(),
            t: self.t,
            d: self.d,
            data,
        }
    }

    pub(crate) fn debug_assert_finite(&self, what: &str) {
        debug_assert!(self.data.iter().all(|v| v.is_finite()), "non-finite value in {what}");
    }
}
