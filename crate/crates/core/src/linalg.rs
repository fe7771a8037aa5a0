//! Small dense-vector kernels shared by every module.
//!
//! All reductions run in a fixed order so that results are reproducible
//! bit-for-bit regardless of how the caller parallelises the work.

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator of values.
pub fn ksum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// Dot product with four independent lanes. `dot(a, b)` and `dot(b, a)` are
/// bitwise identical.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of two slices, `None` if either has zero norm. Clamped to [-1, 1].
#[inline]
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`, accumulated with
/// weight `w` into `ga` and `gb`. Returns the cosine itself.
pub(crate) fn cosine_grad_into(a: &[f64], b: &[f64], w: f64, ga: &mut [f64], gb: &mut [f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ca = c / (na * na);
    let cb = c / (nb * nb);
    for k in 0..a.len() {
        ga[k] += w * (b[k] * inv - ca * a[k]);
        gb[k] += w * (a[k] * inv - cb * b[k]);
    }
    c
}

/// Scales `v` to unit norm in place. Leaves zero vectors untouched.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
