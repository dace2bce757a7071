//! Binary grid files, little-endian, 8-byte fields.
//!
//! Fiber file: `u64 N_F`, `f64 period`, `u64 count = 2`, then for `A_x` and `A_y` every site in
//! row-major order as four complex entries `(re, im)`.
//!
//! Checkpoint: the same three header fields with `count = 4`, followed by `u64 N_B`, `f64 L_s`,
//! `f64 L_t`, `f64 ε`, `f64 c₀`, four `i64` windings (`[A_x|A_y][s|t]`), `N_B²` values of the
//! metric factor, then `Φ, Ψ, A_x, A_y` over `[s][t][x][y]`.

use std::io::{self, Read, Write};

use num_complex::Complex;

use crate::fiber::{fiber_lattice, FiberConnection};
use crate::hym::{Connection4D, WindingBackground};
use crate::mat2::Mat2;
use crate::scalar::{lit, to_f64, Scalar};

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_i64<W: Write>(w: &mut W, v: i64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_i64<R: Read>(r: &mut R) -> io::Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn put_mats<T: Scalar, W: Write>(w: &mut W, field: &[Mat2<T>]) -> io::Result<()> {
    for m in field {
        for z in &m.e {
            put_f64(w, to_f64(z.re))?;
            put_f64(w, to_f64(z.im))?;
        }
    }
    Ok(())
}

fn get_mats<T: Scalar, R: Read>(r: &mut R, n: usize) -> io::Result<Vec<Mat2<T>>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut e = [Complex::new(T::zero(), T::zero()); 4];
        for z in e.iter_mut() {
            let re = get_f64(r)?;
            let im = get_f64(r)?;
            *z = Complex::new(lit(re), lit(im));
        }
        out.push(Mat2 { e });
    }
    Ok(out)
}

fn check_grid(n: u64) -> io::Result<usize> {
    if n == 0 || n > 1 << 12 || !n.is_power_of_two() {
        return Err(bad(format!("grid size {n} is not a power of two in range")));
    }
    Ok(n as usize)
}

pub fn write_fiber<T: Scalar, W: Write>(w: &mut W, a: &FiberConnection<T>) -> io::Result<()> {
    put_u64(w, a.n() as u64)?;
    put_f64(w, to_f64(a.period()))?;
    put_u64(w, 2)?;
    put_mats(w, &a.full_x())?;
    put_mats(w, &a.full_y())
}

pub fn read_fiber<T: Scalar, R: Read>(r: &mut R) -> io::Result<FiberConnection<T>> {
    let n = check_grid(get_u64(r)?)?;
    let period = get_f64(r)?;
    if !(period > 0.0 && period.is_finite()) {
        return Err(bad("period must be positive"));
    }
    let count = get_u64(r)?;
    if count != 2 {
        return Err(bad(format!("fiber file must hold 2 components, found {count}")));
    }
    let ax = get_mats(r, n * n)?;
    let ay = get_mats(r, n * n)?;
    Ok(FiberConnection::from_full(fiber_lattice(n, lit(period)), &ax, &ay))
}

pub fn write_checkpoint<T: Scalar, W: Write>(w: &mut W, x: &Connection4D<T>) -> io::Result<()> {
    put_u64(w, x.nf() as u64)?;
    put_f64(w, 1.0)?;
    put_u64(w, 4)?;
    put_u64(w, x.nb() as u64)?;
    put_f64(w, to_f64(x.ls()))?;
    put_f64(w, to_f64(x.lt()))?;
    put_f64(w, to_f64(x.epsilon))?;
    put_f64(w, to_f64(x.c0))?;
    for row in &x.background.windings {
        for &v in row {
            put_i64(w, v)?;
        }
    }
    for v in &x.f {
        put_f64(w, to_f64(*v))?;
    }
    for field in &x.fields {
        put_mats(w, field)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: &mut R) -> io::Result<Connection4D<T>> {
    let nf = check_grid(get_u64(r)?)?;
    let period = get_f64(r)?;
    if period != 1.0 {
        return Err(bad("checkpoint fiber period must be 1"));
    }
    let count = get_u64(r)?;
    if count != 4 {
        return Err(bad(format!("checkpoint must hold 4 components, found {count}")));
    }
    let nb = check_grid(get_u64(r)?)?;
    let ls = get_f64(r)?;
    let lt = get_f64(r)?;
    let eps = get_f64(r)?;
    let c0 = get_f64(r)?;
    let mut windings = [[0i64; 2]; 2];
    for row in windings.iter_mut() {
        for v in row.iter_mut() {
            *v = get_i64(r)?;
        }
    }
    let mut f = Vec::with_capacity(nb * nb);
    for _ in 0..nb * nb {
        f.push(lit::<T>(get_f64(r)?));
    }
    let (ls, lt, eps) = (lit::<T>(ls), lit::<T>(lt), lit::<T>(eps));
    let mut x = Connection4D::zero(nb, nf, ls, lt, eps).with_metric(f).map_err(|e| bad(e.to_string()))?;
    x.c0 = lit(c0);
    let len = x.len();
    for axis in 0..4 {
        x.fields[axis] = get_mats(r, len)?;
    }
    x.with_background(WindingBackground::from_windings(windings, ls, lt)).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_smooth_field, AlgebraKind};
    use rand::SeedableRng;

    #[test]
    fn fiber_round_trip() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let lat = fiber_lattice::<f64>(8, 1.0);
        let ax = random_smooth_field(&mut rng, &[8, 8], &[0, 1], 2, 0.5, AlgebraKind::Su2);
        let ay = random_smooth_field(&mut rng, &[8, 8], &[0, 1], 2, 0.5, AlgebraKind::Su2);
        let a = FiberConnection::from_full(lat, &ax, &ay);
        let mut buf = vec![];
        write_fiber(&mut buf, &a).unwrap();
        assert_eq!(buf.len(), 24 + 2 * 64 * 64);
        let b: FiberConnection<f64> = read_fiber(&mut buf.as_slice()).unwrap();
        assert_eq!(a.full_x(), b.full_x());
        assert_eq!(a.full_y(), b.full_y());
    }

    #[test]
    fn checkpoint_round_trip() {
        let x = Connection4D::<f64>::zero(4, 4, 1.0, 1.0, 0.5)
            .with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0))
            .unwrap();
        let mut buf = vec![];
        write_checkpoint(&mut buf, &x).unwrap();
        let y: Connection4D<f64> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(y.background, x.background);
        assert_eq!(y.fields, x.fields);
        assert_eq!(y.epsilon, 0.5);
    }

    #[test]
    fn truncated_input_rejected() {
        let buf = [8u8, 0, 0, 0, 0, 0, 0, 0];
        assert!(read_fiber::<f64, _>(&mut buf.as_slice()).is_err());
    }
}
