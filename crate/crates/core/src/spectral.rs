//! Periodic lattices with FFT-based differentiation, interpolation and resampling.
//!
//! Fields are stored row-major: the last axis varies fastest. Odd-order derivatives zero the
//! Nyquist mode so that real (and anti-hermitian) data stays real (anti-hermitian).

use std::sync::Arc;

use num_complex::Complex;
use num_traits::Zero;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::mat2::Mat2;
use crate::scalar::{lit, Scalar};

/// A periodic box `∏ [0, L_k)` sampled with `n_k` points per axis.
#[derive(Clone)]
pub struct Lattice<T: Scalar> {
    dims: Vec<usize>,
    periods: Vec<T>,
    fwd: Vec<Arc<dyn Fft<T>>>,
    inv: Vec<Arc<dyn Fft<T>>>,
}

impl<T: Scalar> std::fmt::Debug for Lattice<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lattice").field("dims", &self.dims).field("periods", &self.periods).finish()
    }
}

impl<T: Scalar> Lattice<T> {
    pub fn new(dims: &[usize], periods: &[T]) -> Self {
        assert_eq!(dims.len(), periods.len());
        let mut planner = FftPlanner::new();
        let fwd = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self { dims: dims.to_vec(), periods: periods.to_vec(), fwd, inv }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn periods(&self) -> &[T] {
        &self.periods
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid spacing along an axis.
    #[inline]
    pub fn spacing(&self, axis: usize) -> T {
        self.periods[axis] / T::from(self.dims[axis]).unwrap()
    }

    /// Volume of one grid cell.
    pub fn cell_volume(&self) -> T {
        (0..self.dims.len()).map(|a| self.spacing(a)).fold(T::one(), |a, b| a * b)
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }

    pub fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0; self.dims.len()];
        for a in (0..self.dims.len()).rev() {
            c[a] = idx % self.dims[a];
            idx /= self.dims[a];
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.dims).fold(0, |acc, (&c, &n)| acc * n + (c % n))
    }

    /// Signed integer frequency of FFT bin `j` on an axis of length `n`.
    #[inline]
    pub fn frequency(n: usize, j: usize) -> i64 {
        if j <= n / 2 {
            j as i64
        } else {
            j as i64 - n as i64
        }
    }

    /// Angular wavenumber of bin `j` along `axis`.
    #[inline]
    pub fn wavenumber(&self, axis: usize, j: usize) -> T {
        let n = self.dims[axis];
        T::from(Self::frequency(n, j)).unwrap() * T::TAU() / self.periods[axis]
    }

    #[inline]
    fn is_nyquist(n: usize, j: usize) -> bool {
        n % 2 == 0 && j == n / 2
    }

    /// Starting indices of every line along `axis`.
    fn line_starts(&self, axis: usize) -> Vec<usize> {
        let n = self.dims[axis];
        let stride = self.stride(axis);
        let outer: usize = self.dims[..axis].iter().product();
        let mut starts = Vec::with_capacity(outer * stride);
        for o in 0..outer {
            for i in 0..stride {
                starts.push(o * n * stride + i);
            }
        }
        starts
    }

    /// Applies a per-bin multiplier along one axis to a set of complex channels.
    fn apply_multiplier<F>(&self, channels: &mut [Vec<Complex<T>>], axis: usize, mult: F)
    where
        F: Fn(usize) -> Complex<T> + Sync,
    {
        let n = self.dims[axis];
        let stride = self.stride(axis);
        let starts = self.line_starts(axis);
        let norm = T::one() / T::from(n).unwrap();
        let fwd = &self.fwd[axis];
        let inv = &self.inv[axis];
        for ch in channels.iter_mut() {
            let data: &Vec<Complex<T>> = ch;
            let lines: Vec<Vec<Complex<T>>> = starts
                .par_iter()
                .map(|&s0| {
                    let mut buf: Vec<Complex<T>> = (0..n).map(|j| data[s0 + j * stride]).collect();
                    fwd.process(&mut buf);
                    for (j, v) in buf.iter_mut().enumerate() {
                        *v = *v * mult(j) * norm;
                    }
                    inv.process(&mut buf);
                    buf
                })
                .collect();
            for (line, &s0) in lines.iter().zip(&starts) {
                for (j, v) in line.iter().enumerate() {
                    ch[s0 + j * stride] = *v;
                }
            }
        }
    }

    fn derivative_multiplier(&self, axis: usize, order: u32) -> impl Fn(usize) -> Complex<T> + Sync {
        let n = self.dims[axis];
        let k: Vec<T> = (0..n).map(|j| self.wavenumber(axis, j)).collect();
        move |j| {
            if order % 2 == 1 && Self::is_nyquist(n, j) {
                return Complex::<T>::zero();
            }
            let ik = Complex::new(T::zero(), k[j]);
            let mut m = Complex::new(T::one(), T::zero());
            for _ in 0..order {
                m = m * ik;
            }
            m
        }
    }

    /// Spectral derivative of a complex field along `axis`.
    pub fn deriv_complex(&self, field: &[Complex<T>], axis: usize, order: u32) -> Vec<Complex<T>> {
        let mut ch = vec![field.to_vec()];
        let m = self.derivative_multiplier(axis, order);
        self.apply_multiplier(&mut ch, axis, m);
        ch.pop().unwrap()
    }

    /// Spectral derivative of a real field along `axis`.
    pub fn deriv_real(&self, field: &[T], axis: usize, order: u32) -> Vec<T> {
        let c: Vec<Complex<T>> = field.iter().map(|&x| Complex::new(x, T::zero())).collect();
        self.deriv_complex(&c, axis, order).into_iter().map(|z| z.re).collect()
    }

    /// Spectral derivative of a matrix field along `axis`.
    pub fn deriv_mat(&self, field: &[Mat2<T>], axis: usize) -> Vec<Mat2<T>> {
        let mut ch = split_channels(field);
        let m = self.derivative_multiplier(axis, 1);
        self.apply_multiplier(&mut ch, axis, m);
        merge_channels(&ch)
    }

    /// `∂̄ = ½(∂_0 + i ∂_1)` on a two-axis matrix field.
    pub fn dbar_mat(&self, field: &[Mat2<T>]) -> Vec<Mat2<T>> {
        assert_eq!(self.dims.len(), 2);
        let dx = self.deriv_mat(field, 0);
        let dy = self.deriv_mat(field, 1);
        let h = lit::<T>(0.5);
        let i = Complex::new(T::zero(), T::one());
        dx.iter().zip(&dy).map(|(a, b)| (*a + b.scale(i)).scale_re(h)).collect()
    }

    /// Fourth-order central difference along `axis` (periodic).
    pub fn deriv_fd4_mat(&self, field: &[Mat2<T>], axis: usize) -> Vec<Mat2<T>> {
        let n = self.dims[axis];
        let stride = self.stride(axis);
        let h = self.spacing(axis);
        let c1 = lit::<T>(8.0) / (lit::<T>(12.0) * h);
        let c2 = T::one() / (lit::<T>(12.0) * h);
        (0..field.len())
            .into_par_iter()
            .map(|idx| {
                let j = (idx / stride) % n;
                let base = idx - j * stride;
                let at = |off: isize| {
                    let jj = (j as isize + off).rem_euclid(n as isize) as usize;
                    field[base + jj * stride]
                };
                (at(1) - at(-1)).scale_re(c1) - (at(2) - at(-2)).scale_re(c2)
            })
            .collect()
    }

    /// Fourth-order central difference of a real field.
    pub fn deriv_fd4_real(&self, field: &[T], axis: usize) -> Vec<T> {
        let n = self.dims[axis];
        let stride = self.stride(axis);
        let h = self.spacing(axis);
        let c1 = lit::<T>(8.0) / (lit::<T>(12.0) * h);
        let c2 = T::one() / (lit::<T>(12.0) * h);
        (0..field.len())
            .map(|idx| {
                let j = (idx / stride) % n;
                let base = idx - j * stride;
                let at = |off: isize| {
                    let jj = (j as isize + off).rem_euclid(n as isize) as usize;
                    field[base + jj * stride]
                };
                (at(1) - at(-1)) * c1 - (at(2) - at(-2)) * c2
            })
            .collect()
    }

    /// Full forward transform over all axes (unnormalized).
    pub fn fft_forward(&self, field: &mut [Complex<T>]) {
        for axis in 0..self.dims.len() {
            self.transform_axis(field, axis, true);
        }
    }

    /// Full inverse transform over all axes, normalized so that it inverts `fft_forward`.
    pub fn fft_inverse(&self, field: &mut [Complex<T>]) {
        for axis in 0..self.dims.len() {
            self.transform_axis(field, axis, false);
        }
        let norm = T::one() / T::from(self.len()).unwrap();
        for v in field.iter_mut() {
            *v = *v * norm;
        }
    }

    fn transform_axis(&self, field: &mut [Complex<T>], axis: usize, forward: bool) {
        let n = self.dims[axis];
        let stride = self.stride(axis);
        let starts = self.line_starts(axis);
        let plan = if forward { &self.fwd[axis] } else { &self.inv[axis] };
        let data: &[Complex<T>] = field;
        let lines: Vec<Vec<Complex<T>>> = starts
            .par_iter()
            .map(|&s0| {
                let mut buf: Vec<Complex<T>> = (0..n).map(|j| data[s0 + j * stride]).collect();
                plan.process(&mut buf);
                buf
            })
            .collect();
        for (line, &s0) in lines.iter().zip(&starts) {
            for (j, v) in line.iter().enumerate() {
                field[s0 + j * stride] = *v;
            }
        }
    }

    /// Per-bin angular wavenumbers of a flat index in Fourier space.
    pub fn wavevector(&self, idx: usize) -> Vec<T> {
        self.coords(idx).iter().enumerate().map(|(a, &j)| self.wavenumber(a, j)).collect()
    }

    /// Whether any coordinate of the bin is a Nyquist bin.
    pub fn touches_nyquist(&self, idx: usize) -> bool {
        self.coords(idx).iter().enumerate().any(|(a, &j)| Self::is_nyquist(self.dims[a], j))
    }

    /// Mean of a real field.
    pub fn mean_real(&self, field: &[T]) -> T {
        let s: T = field.iter().copied().sum();
        s / T::from(field.len()).unwrap()
    }

    /// Mean of a matrix field.
    pub fn mean_mat(&self, field: &[Mat2<T>]) -> Mat2<T> {
        let mut acc = Mat2::zero();
        for m in field {
            acc += *m;
        }
        acc.scale_re(T::one() / T::from(field.len()).unwrap())
    }
}

/// Splits a matrix field into four complex channels (one per entry).
pub fn split_channels<T: Scalar>(field: &[Mat2<T>]) -> Vec<Vec<Complex<T>>> {
    (0..4).map(|k| field.iter().map(|m| m.e[k]).collect()).collect()
}

/// Inverse of [`split_channels`].
pub fn merge_channels<T: Scalar>(ch: &[Vec<Complex<T>>]) -> Vec<Mat2<T>> {
    (0..ch[0].len()).map(|i| Mat2::new(ch[0][i], ch[1][i], ch[2][i], ch[3][i])).collect()
}

/// Trigonometric interpolant of a real field on a periodic 2D grid.
#[derive(Clone, Debug)]
pub struct TrigInterp2<T: Scalar> {
    n: [usize; 2],
    periods: [T; 2],
    coeffs: Vec<Complex<T>>,
}

impl<T: Scalar> TrigInterp2<T> {
    pub fn new(lattice: &Lattice<T>, values: &[T]) -> Self {
        assert_eq!(lattice.dims().len(), 2);
        let mut c: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        lattice.fft_forward(&mut c);
        let norm = T::one() / T::from(c.len()).unwrap();
        for v in c.iter_mut() {
            *v = *v * norm;
        }
        let d = lattice.dims();
        let p = lattice.periods();
        Self { n: [d[0], d[1]], periods: [p[0], p[1]], coeffs: c }
    }

    /// Basis values `e^{i k x}` and their derivatives along one axis; Nyquist uses `cos`.
    fn basis(&self, axis: usize, x: T, order: u32) -> Vec<Complex<T>> {
        let n = self.n[axis];
        let l = self.periods[axis];
        (0..n)
            .map(|j| {
                let f = Lattice::<T>::frequency(n, j);
                let k = T::from(f).unwrap() * T::TAU() / l;
                if n % 2 == 0 && j == n / 2 {
                    // symmetric split of the Nyquist mode: cos(kx)
                    let kk = k.abs();
                    let v = match order % 4 {
                        0 => (kk * x).cos(),
                        1 => -(kk * x).sin() * kk,
                        2 => -(kk * x).cos() * kk * kk,
                        _ => (kk * x).sin() * kk * kk * kk,
                    };
                    Complex::new(v, T::zero())
                } else {
                    let e = Complex::new((k * x).cos(), (k * x).sin());
                    let mut m = Complex::new(T::one(), T::zero());
                    for _ in 0..order {
                        m = m * Complex::new(T::zero(), k);
                    }
                    e * m
                }
            })
            .collect()
    }

    /// Evaluates the interpolant (or a mixed derivative of orders `(os, ot)`) at a point.
    pub fn eval(&self, s: T, t: T, os: u32, ot: u32) -> T {
        let bs = self.basis(0, s, os);
        let bt = self.basis(1, t, ot);
        let n1 = self.n[1];
        let mut acc = Complex::<T>::zero();
        for (j, b0) in bs.iter().enumerate() {
            let row = &self.coeffs[j * n1..(j + 1) * n1];
            let mut r = Complex::<T>::zero();
            for (c, b1) in row.iter().zip(&bt) {
                r = r + *c * *b1;
            }
            acc = acc + r * *b0;
        }
        acc.re
    }
}

/// Spectral resampling of a matrix field given on a 2D periodic grid to a new resolution.
pub fn resample_mat2d<T: Scalar>(field: &[Mat2<T>], n_old: usize, n_new: usize) -> Vec<Mat2<T>> {
    if n_old == n_new {
        return field.to_vec();
    }
    let one = T::one();
    let src = Lattice::new(&[n_old, n_old], &[one, one]);
    let dst = Lattice::new(&[n_new, n_new], &[one, one]);
    let mut out_ch = Vec::with_capacity(4);
    for mut ch in split_channels(field) {
        src.fft_forward(&mut ch);
        let mut out = vec![Complex::<T>::zero(); n_new * n_new];
        let keep = n_old.min(n_new) / 2;
        for j0 in 0..n_old {
            let f0 = Lattice::<T>::frequency(n_old, j0);
            if f0.unsigned_abs() as usize >= keep {
                continue;
            }
            for j1 in 0..n_old {
                let f1 = Lattice::<T>::frequency(n_old, j1);
                if f1.unsigned_abs() as usize >= keep {
                    continue;
                }
                let d0 = f0.rem_euclid(n_new as i64) as usize;
                let d1 = f1.rem_euclid(n_new as i64) as usize;
                out[d0 * n_new + d1] = ch[j0 * n_old + j1];
            }
        }
        let scale = T::from(n_new * n_new).unwrap() / T::from(n_old * n_old).unwrap();
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        dst.fft_inverse(&mut out);
        out_ch.push(out);
    }
    merge_channels(&out_ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_band_limited_function_is_exact() {
        let lat = Lattice::<f64>::new(&[16, 8], &[1.0, 2.0]);
        let tau = std::f64::consts::TAU;
        let f: Vec<f64> = (0..lat.len())
            .map(|i| {
                let c = lat.coords(i);
                let s = c[0] as f64 / 16.0;
                let t = c[1] as f64 * 2.0 / 8.0;
                (tau * 3.0 * s).sin() * (tau * t / 2.0).cos()
            })
            .collect();
        let ds = lat.deriv_real(&f, 0, 1);
        for i in 0..lat.len() {
            let c = lat.coords(i);
            let s = c[0] as f64 / 16.0;
            let t = c[1] as f64 * 2.0 / 8.0;
            let exact = tau * 3.0 * (tau * 3.0 * s).cos() * (tau * t / 2.0).cos();
            assert!((ds[i] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_reproduces_band_limited_function() {
        let lat = Lattice::<f64>::new(&[12, 12], &[1.0, 1.0]);
        let tau = std::f64::consts::TAU;
        let h = |s: f64, t: f64| (tau * s).cos() * (tau * 2.0 * t).sin() + 0.3 * (tau * (s - t)).cos();
        let vals: Vec<f64> = (0..lat.len())
            .map(|i| {
                let c = lat.coords(i);
                h(c[0] as f64 / 12.0, c[1] as f64 / 12.0)
            })
            .collect();
        let it = TrigInterp2::new(&lat, &vals);
        for &(s, t) in &[(0.123, 0.77), (0.5, 0.01), (0.91, 0.33)] {
            assert!((it.eval(s, t, 0, 0) - h(s, t)).abs() < 1e-13);
            let hs = -tau * (tau * s).sin() * (tau * 2.0 * t).sin() - 0.3 * tau * (tau * (s - t)).sin();
            assert!((it.eval(s, t, 1, 0) - hs).abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_preserves_low_modes() {
        let tau = std::f64::consts::TAU;
        let make = |n: usize| -> Vec<Mat2<f64>> {
            (0..n * n)
                .map(|i| {
                    let x = (i / n) as f64 / n as f64;
                    let y = (i % n) as f64 / n as f64;
                    Mat2::i_sigma3((tau * x).sin() + 0.5 * (tau * (x + 2.0 * y)).cos())
                })
                .collect()
        };
        let up = resample_mat2d(&make(8), 8, 16);
        let exact = make(16);
        for (a, b) in up.iter().zip(&exact) {
            assert!((*a - *b).norm() < 1e-13);
        }
        let down = resample_mat2d(&make(16), 16, 8);
        for (a, b) in down.iter().zip(&make(8)) {
            assert!((*a - *b).norm() < 1e-13);
        }
    }
}
