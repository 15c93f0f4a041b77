//! Scalar arithmetic in Z_p for word-sized moduli.

use crate::error::{Error, Result};

#[inline]
pub fn mul_mod(a: u64, b: u64, p: u64) -> u64 {
    ((a as u128 * b as u128) % p as u128) as u64
}

#[inline]
pub fn add_mod(a: u64, b: u64, p: u64) -> u64 {
    let s = a + b;
    if s >= p {
        s - p
    } else {
        s
    }
}

#[inline]
pub fn sub_mod(a: u64, b: u64, p: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + p - b
    }
}

#[inline]
pub fn neg_mod(a: u64, p: u64) -> u64 {
    if a == 0 {
        0
    } else {
        p - a
    }
}

pub fn pow_mod(mut base: u64, mut exp: u64, p: u64) -> u64 {
    let mut acc = 1 % p;
    base %= p;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, p);
        }
        base = mul_mod(base, base, p);
        exp >>= 1;
    }
    acc
}

/// Inverse via Fermat; `p` must be prime and `a` nonzero mod `p`.
pub fn inv_mod_prime(a: u64, p: u64) -> u64 {
    pow_mod(a, p - 2, p)
}

/// Inverse modulo an arbitrary modulus, `None` when `gcd(a, m) != 1`.
pub fn inv_mod(a: u64, m: u64) -> Option<u64> {
    let (mut old_r, mut r) = (a as i128 % m as i128, m as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    Some(old_s.rem_euclid(m as i128) as u64)
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Deterministic Miller-Rabin for all 64-bit inputs.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &b in &BASES {
        if n % b == 0 {
            return n == b;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A primitive root of unity of the given power-of-two order modulo prime `p`.
///
/// Candidates `x^((p-1)/order)` are tried for `x = 2, 3, ...`; the first one
/// whose `order/2` power is `-1` is returned.
pub fn find_root_of_unity(p: u64, order: u64) -> Result<u64> {
    if order == 0 || !order.is_power_of_two() || p < 2 || (p - 1) % order != 0 {
        return Err(Error::NoRootOfUnity { p, order });
    }
    if order == 1 {
        return Ok(1);
    }
    let cofactor = (p - 1) / order;
    for x in 2..p {
        let w = pow_mod(x, cofactor, p);
        if pow_mod(w, order / 2, p) == p - 1 {
            return Ok(w);
        }
    }
    Err(Error::NoRootOfUnity { p, order })
}

/// Maps a residue to the centered representative in `[-floor(p/2), floor(p/2)]`.
#[inline]
pub fn centered(x: u64, p: u64) -> i64 {
    if x > p / 2 {
        x as i64 - p as i64
    } else {
        x as i64
    }
}

#[inline]
pub fn reduce_signed(v: i128, p: u64) -> u64 {
    v.rem_euclid(p as i128) as u64
}
