//! Exact arithmetic in Z_p and in the negacyclic ring Z_p[x]/(x^n + 1).
//!
//! A prime `p` with `p = 1 (mod 2n)` makes the ring isomorphic to `n` copies
//! of Z_p. The isomorphism evaluates a polynomial at the odd powers of a
//! primitive `2n`-th root `psi`. Slots are laid out as a `2 x n/2` matrix:
//! slot `(row, col)` is the evaluation at `psi^(+-3^col)`, `+` for row 0 and
//! `-` for row 1. With this ordering the automorphism `x -> x^(3^-k)` shifts
//! every row right by `k` columns and `x -> x^(2n-1)` swaps the rows.

pub mod arith;
mod crt;
mod ntt;

pub use crt::{Crt, CrtModulus};
pub use ntt::RingContext;

use crate::error::{Error, Result};

/// Slot generator of the column rotation group.
pub const SLOT_GENERATOR: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrimeModulus {
    p: u64,
    n: usize,
}

impl PrimeModulus {
    pub fn new(p: u64, n: usize) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidParams(format!(
                "ring degree {n} is not a power of two >= 2"
            )));
        }
        if p >= 1 << 62 {
            return Err(Error::InvalidParams(format!("prime {p} exceeds 62 bits")));
        }
        if !arith::is_prime(p) {
            return Err(Error::InvalidParams(format!("{p} is not prime")));
        }
        if (p - 1) % (2 * n as u64) != 0 {
            return Err(Error::InvalidParams(format!(
                "{p} is not 1 mod {}, no order-{} root of unity",
                2 * n,
                2 * n
            )));
        }
        Ok(Self { p, n })
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingElement {
    p: u64,
    coeffs: Vec<u64>,
}

impl RingElement {
    pub fn new(p: u64, coeffs: Vec<u64>) -> Result<Self> {
        if !coeffs.len().is_power_of_two() {
            return Err(Error::Shape(format!(
                "{} coefficients is not a power of two",
                coeffs.len()
            )));
        }
        if let Some(c) = coeffs.iter().find(|&&c| c >= p) {
            return Err(Error::InvalidParams(format!("coefficient {c} not reduced mod {p}")));
        }
        Ok(Self { p, coeffs })
    }

    pub fn zero(p: u64, n: usize) -> Self {
        Self { p, coeffs: vec![0; n] }
    }

    pub fn from_signed(p: u64, values: &[i64]) -> Result<Self> {
        Self::new(
            p,
            values.iter().map(|&v| arith::reduce_signed(v as i128, p)).collect(),
        )
    }

    pub(crate) fn from_raw(p: u64, coeffs: Vec<u64>) -> Self {
        Self { p, coeffs }
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn n(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[u64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<u64> {
        self.coeffs
    }
}

/// The `n` slot values of a message, viewed row-major as a `2 x n/2` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotVector {
    p: u64,
    slots: Vec<u64>,
}

impl SlotVector {
    pub fn new(p: u64, slots: Vec<u64>) -> Result<Self> {
        if slots.len() < 2 || !slots.len().is_power_of_two() {
            return Err(Error::Shape(format!(
                "{} slots is not a power of two >= 2",
                slots.len()
            )));
        }
        if let Some(s) = slots.iter().find(|&&s| s >= p) {
            return Err(Error::InvalidParams(format!("slot {s} not reduced mod {p}")));
        }
        Ok(Self { p, slots })
    }

    pub fn from_signed(p: u64, values: &[i64]) -> Result<Self> {
        Self::new(
            p,
            values.iter().map(|&v| arith::reduce_signed(v as i128, p)).collect(),
        )
    }

    pub(crate) fn from_raw(p: u64, slots: Vec<u64>) -> Self {
        Self { p, slots }
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn n(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[u64] {
        &self.slots
    }

    pub fn into_slots(self) -> Vec<u64> {
        self.slots
    }

    /// Matrix cell of slot `i`: `(i / (n/2), i % (n/2))`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        let half = self.n() / 2;
        (i / half, i % half)
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.slots.iter().map(|&s| arith::centered(s, self.p)).collect()
    }

    /// Applies the rotation directly as a slot permutation.
    pub fn rotated(&self, rot: Rotation) -> Result<Self> {
        Ok(Self {
            p: self.p,
            slots: rot.permute(&self.slots)?,
        })
    }
}

/// A slot rotation in the `2 x n/2` view.
///
/// `Columns(k)` moves every row `k` columns to the right (negative `k` moves
/// left); `Rows` swaps the two rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rotation {
    Columns(i64),
    Rows,
}

impl Rotation {
    pub fn validate(self, n: usize) -> Result<()> {
        if let Rotation::Columns(k) = self {
            let half = n / 2;
            if k.unsigned_abs() as usize >= half.max(1) && k != 0 {
                return Err(Error::RotationOutOfRange { k, half });
            }
        }
        Ok(())
    }

    /// Decomposes into power-of-two column rotations (one per set bit of
    /// `|k|`, lowest first) or a single row rotation.
    pub fn primitive_steps(self, n: usize) -> Result<Vec<Rotation>> {
        self.validate(n)?;
        Ok(match self {
            Rotation::Rows => vec![Rotation::Rows],
            Rotation::Columns(k) => {
                let sign = k.signum();
                let mag = k.unsigned_abs();
                (0..64)
                    .filter(|b| mag >> b & 1 == 1)
                    .map(|b| Rotation::Columns(sign * (1i64 << b)))
                    .collect()
            }
        })
    }

    /// Galois element `t` of the automorphism `x -> x^t` realizing this rotation.
    pub fn galois_element(self, n: usize) -> Result<u64> {
        self.validate(n)?;
        let two_n = 2 * n as u64;
        Ok(match self {
            Rotation::Rows => two_n - 1,
            Rotation::Columns(k) => {
                let half = (n / 2) as i64;
                let e = (-k).rem_euclid(half.max(1)) as u64;
                arith::pow_mod(SLOT_GENERATOR, e, two_n)
            }
        })
    }

    /// Direct slot permutation of a `2 x n/2` matrix.
    pub fn permute<T: Copy>(self, slots: &[T]) -> Result<Vec<T>> {
        let n = slots.len();
        self.validate(n)?;
        let half = n / 2;
        Ok(match self {
            Rotation::Rows => {
                let mut out = slots[half..].to_vec();
                out.extend_from_slice(&slots[..half]);
                out
            }
            Rotation::Columns(k) => {
                let shift = k.rem_euclid(half as i64) as usize;
                let mut out = Vec::with_capacity(n);
                for row in 0..2 {
                    let base = row * half;
                    out.extend((0..half).map(|j| slots[base + (j + half - shift) % half]));
                }
                out
            }
        })
    }
}

/// Primes `q = 1 (mod 2n)` below `2^bits`, largest first.
pub fn ntt_primes(n: usize, bits: u32, count: usize) -> Vec<u64> {
    let step = 2 * n as u64;
    let mut q = ((1u64 << bits) - 1) / step * step + 1;
    let mut out = Vec::with_capacity(count);
    while out.len() < count && q > step {
        if arith::is_prime(q) {
            out.push(q);
        }
        q -= step;
    }
    out
}
