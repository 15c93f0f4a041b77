use super::arith::{add_mod, inv_mod_prime, mul_mod, neg_mod, pow_mod, sub_mod};
use super::{PrimeModulus, RingElement, Rotation, SlotVector, SLOT_GENERATOR};
use crate::error::{Error, Result};

/// Precomputed tables for one `(p, n)` pair.
#[derive(Debug, Clone)]
pub struct RingContext {
    modulus: PrimeModulus,
    psi: u64,
    // psi^i, and n^-1 * psi^-i
    twist: Vec<u64>,
    untwist: Vec<u64>,
    omega: Vec<Twiddle>,
    omega_inv: Vec<Twiddle>,
    bitrev: Vec<usize>,
    // slot index -> evaluation index k, where the evaluation point is psi^(2k+1)
    slot_to_eval: Vec<usize>,
    inverted_rotation: bool,
}

#[derive(Debug, Clone, Copy)]
struct Twiddle {
    w: u64,
    shoup: u64,
}

impl Twiddle {
    fn new(w: u64, p: u64) -> Self {
        Self {
            w,
            shoup: (((w as u128) << 64) / p as u128) as u64,
        }
    }

    #[inline]
    fn mul(self, a: u64, p: u64) -> u64 {
        let q = ((a as u128 * self.shoup as u128) >> 64) as u64;
        let r = a.wrapping_mul(self.w).wrapping_sub(q.wrapping_mul(p));
        if r >= p {
            r - p
        } else {
            r
        }
    }
}

impl RingContext {
    pub fn new(modulus: PrimeModulus) -> Result<Self> {
        let (p, n) = (modulus.p(), modulus.n());
        let psi = super::arith::find_root_of_unity(p, 2 * n as u64)?;
        let psi_inv = inv_mod_prime(psi, p);
        let n_inv = inv_mod_prime(n as u64, p);
        let omega = mul_mod(psi, psi, p);
        let omega_inv = inv_mod_prime(omega, p);

        let powers = |base: u64, len: usize, scale: u64| {
            let mut acc = scale;
            (0..len)
                .map(|_| {
                    let cur = acc;
                    acc = mul_mod(acc, base, p);
                    cur
                })
                .collect::<Vec<_>>()
        };
        let twist = powers(psi, n, 1);
        let untwist = powers(psi_inv, n, n_inv);
        let omega_tab = powers(omega, n / 2, 1)
            .into_iter()
            .map(|w| Twiddle::new(w, p))
            .collect();
        let omega_inv_tab = powers(omega_inv, n / 2, 1)
            .into_iter()
            .map(|w| Twiddle::new(w, p))
            .collect();

        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();

        let two_n = 2 * n as u64;
        let half = n / 2;
        let mut slot_to_eval = vec![0; n];
        let mut g = 1u64;
        for col in 0..half {
            slot_to_eval[col] = ((g - 1) / 2) as usize;
            slot_to_eval[half + col] = ((two_n - g - 1) / 2) as usize;
            g = g * SLOT_GENERATOR % two_n;
        }

        Ok(Self {
            modulus,
            psi,
            twist,
            untwist,
            omega: omega_tab,
            omega_inv: omega_inv_tab,
            bitrev,
            slot_to_eval,
            inverted_rotation: false,
        })
    }

    /// Test hook: realizes every column rotation in the wrong direction.
    pub fn with_inverted_rotation(mut self) -> Self {
        self.inverted_rotation = true;
        self
    }

    pub fn modulus(&self) -> PrimeModulus {
        self.modulus
    }

    pub fn p(&self) -> u64 {
        self.modulus.p()
    }

    pub fn n(&self) -> usize {
        self.modulus.n()
    }

    /// The primitive `2n`-th root used for evaluation.
    pub fn psi(&self) -> u64 {
        self.psi
    }

    fn check(&self, len: usize, p: u64) -> Result<()> {
        if p != self.p() || len != self.n() {
            return Err(Error::ModulusMismatch(format!(
                "element (p={p}, n={len}) vs context (p={}, n={})",
                self.p(),
                self.n()
            )));
        }
        Ok(())
    }

    fn cyclic_transform(&self, a: &mut [u64], table: &[Twiddle]) {
        let n = a.len();
        let p = self.p();
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                a.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let u = a[start + j];
                    let v = table[j * step].mul(a[start + j + half], p);
                    a[start + j] = add_mod(u, v, p);
                    a[start + j + half] = sub_mod(u, v, p);
                }
            }
            len <<= 1;
        }
    }

    /// Evaluations `a(psi^(2k+1))` for `k = 0..n`, in natural order.
    pub fn ntt_forward(&self, coeffs: &[u64]) -> Vec<u64> {
        let p = self.p();
        let mut a: Vec<u64> = coeffs
            .iter()
            .zip(&self.twist)
            .map(|(&c, &t)| mul_mod(c, t, p))
            .collect();
        self.cyclic_transform(&mut a, &self.omega);
        a
    }

    /// Inverse of [`Self::ntt_forward`].
    pub fn ntt_inverse(&self, evals: &[u64]) -> Vec<u64> {
        let p = self.p();
        let mut a = evals.to_vec();
        self.cyclic_transform(&mut a, &self.omega_inv);
        for (x, &u) in a.iter_mut().zip(&self.untwist) {
            *x = mul_mod(*x, u, p);
        }
        a
    }

    pub fn mul(&self, a: &RingElement, b: &RingElement) -> Result<RingElement> {
        self.check(a.n(), a.p())?;
        self.check(b.n(), b.p())?;
        let p = self.p();
        let fa = self.ntt_forward(a.coeffs());
        let fb = self.ntt_forward(b.coeffs());
        let prod: Vec<u64> = fa.iter().zip(&fb).map(|(&x, &y)| mul_mod(x, y, p)).collect();
        Ok(RingElement::from_raw(p, self.ntt_inverse(&prod)))
    }

    pub fn add(&self, a: &RingElement, b: &RingElement) -> Result<RingElement> {
        self.check(a.n(), a.p())?;
        self.check(b.n(), b.p())?;
        let p = self.p();
        Ok(RingElement::from_raw(
            p,
            a.coeffs().iter().zip(b.coeffs()).map(|(&x, &y)| add_mod(x, y, p)).collect(),
        ))
    }

    pub fn scalar_mul(&self, a: &RingElement, c: u64) -> Result<RingElement> {
        self.check(a.n(), a.p())?;
        let p = self.p();
        Ok(RingElement::from_raw(
            p,
            a.coeffs().iter().map(|&x| mul_mod(x, c % p, p)).collect(),
        ))
    }

    pub fn encode(&self, v: &SlotVector) -> Result<RingElement> {
        self.check(v.n(), v.p())?;
        let mut evals = vec![0; self.n()];
        for (s, &x) in v.slots().iter().enumerate() {
            evals[self.slot_to_eval[s]] = x;
        }
        Ok(RingElement::from_raw(self.p(), self.ntt_inverse(&evals)))
    }

    pub fn decode(&self, e: &RingElement) -> Result<SlotVector> {
        self.check(e.n(), e.p())?;
        let evals = self.ntt_forward(e.coeffs());
        Ok(SlotVector::from_raw(
            self.p(),
            self.slot_to_eval.iter().map(|&k| evals[k]).collect(),
        ))
    }

    /// `a(x) -> a(x^t)` for odd `t`.
    pub fn automorphism(&self, a: &RingElement, t: u64) -> Result<RingElement> {
        self.check(a.n(), a.p())?;
        if t % 2 == 0 {
            return Err(Error::InvalidParams(format!("galois element {t} is even")));
        }
        let n = self.n();
        let two_n = 2 * n as u64;
        let p = self.p();
        let mut out = vec![0; n];
        for (i, &c) in a.coeffs().iter().enumerate() {
            let e = (i as u64 * (t % two_n)) % two_n;
            if e < n as u64 {
                out[e as usize] = c;
            } else {
                out[(e - n as u64) as usize] = neg_mod(c, p);
            }
        }
        Ok(RingElement::from_raw(p, out))
    }

    /// Realizes `rot` as one automorphism.
    pub fn galois_rotate(&self, a: &RingElement, rot: Rotation) -> Result<RingElement> {
        let rot = match rot {
            Rotation::Columns(k) if self.inverted_rotation => Rotation::Columns(-k),
            r => r,
        };
        let t = rot.galois_element(self.n())?;
        self.automorphism(a, t)
    }

    pub fn pow(&self, base: u64, exp: u64) -> u64 {
        pow_mod(base, exp, self.p())
    }
}
