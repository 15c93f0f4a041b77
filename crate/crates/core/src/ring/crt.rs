use std::sync::Arc;

use super::arith::{gcd, inv_mod, mul_mod, sub_mod};
use super::{PrimeModulus, RingContext};
use crate::error::{Error, Result};

/// Chinese remaindering over pairwise coprime word-sized moduli.
///
/// The composite must fit in 127 bits so that signed values in the centered
/// range are representable as `i128`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crt {
    moduli: Vec<u64>,
    composite: u128,
    // Garner constants: inverse of (m_0 * ... * m_{i-1}) mod m_i
    garner: Vec<u64>,
}

impl Crt {
    pub fn new(moduli: &[u64]) -> Result<Self> {
        if moduli.is_empty() {
            return Err(Error::InvalidParams("empty modulus list".into()));
        }
        for (i, &a) in moduli.iter().enumerate() {
            if a < 2 {
                return Err(Error::InvalidParams(format!("modulus {a} < 2")));
            }
            for &b in &moduli[i + 1..] {
                if gcd(a, b) != 1 {
                    return Err(Error::NotCoprime { a, b });
                }
            }
        }
        let mut composite: u128 = 1;
        for &m in moduli {
            composite = composite
                .checked_mul(m as u128)
                .filter(|c| *c < 1u128 << 127)
                .ok_or_else(|| Error::InvalidParams("composite modulus exceeds 127 bits".into()))?;
        }
        let mut garner = Vec::with_capacity(moduli.len());
        for (i, &m) in moduli.iter().enumerate() {
            let prefix = moduli[..i]
                .iter()
                .fold(1u64 % m, |acc, &q| mul_mod(acc, q % m, m));
            garner.push(inv_mod(prefix, m).expect("coprime moduli"));
        }
        Ok(Self {
            moduli: moduli.to_vec(),
            composite,
            garner,
        })
    }

    pub fn moduli(&self) -> &[u64] {
        &self.moduli
    }

    pub fn composite(&self) -> u128 {
        self.composite
    }

    /// Largest magnitude representable in the centered embedding.
    pub fn half(&self) -> u128 {
        self.composite / 2
    }

    pub fn split(&self, x: u128) -> Vec<u64> {
        self.moduli.iter().map(|&m| (x % m as u128) as u64).collect()
    }

    pub fn split_signed(&self, x: i128) -> Vec<u64> {
        self.moduli
            .iter()
            .map(|&m| x.rem_euclid(m as i128) as u64)
            .collect()
    }

    /// Garner mixed-radix reconstruction into `[0, composite)`.
    pub fn join(&self, residues: &[u64]) -> Result<u128> {
        if residues.len() != self.moduli.len() {
            return Err(Error::ModulusMismatch(format!(
                "{} residues for {} moduli",
                residues.len(),
                self.moduli.len()
            )));
        }
        let mut x: u128 = 0;
        let mut radix: u128 = 1;
        for (i, (&m, &r)) in self.moduli.iter().zip(residues).enumerate() {
            let cur = (x % m as u128) as u64;
            let digit = mul_mod(sub_mod(r % m, cur, m), self.garner[i], m);
            x += digit as u128 * radix;
            radix *= m as u128;
        }
        Ok(x)
    }

    pub fn join_signed(&self, residues: &[u64]) -> Result<i128> {
        let x = self.join(residues)?;
        Ok(if x > self.half() {
            x as i128 - self.composite as i128
        } else {
            x as i128
        })
    }
}

/// A list of NTT-friendly primes sharing one ring degree.
#[derive(Debug, Clone)]
pub struct CrtModulus {
    primes: Vec<PrimeModulus>,
    contexts: Vec<Arc<RingContext>>,
    crt: Crt,
}

impl CrtModulus {
    pub fn new(primes: &[u64], n: usize) -> Result<Self> {
        let mut seen = primes.to_vec();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::NotCoprime { a: w[0], b: w[1] });
        }
        let primes = primes
            .iter()
            .map(|&p| PrimeModulus::new(p, n))
            .collect::<Result<Vec<_>>>()?;
        let contexts = primes
            .iter()
            .map(|&m| RingContext::new(m).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let crt = Crt::new(&primes.iter().map(|m| m.p()).collect::<Vec<_>>())?;
        Ok(Self {
            primes,
            contexts,
            crt,
        })
    }

    /// Test hook forwarding [`RingContext::with_inverted_rotation`] to every limb.
    pub fn with_inverted_rotation(mut self) -> Self {
        self.contexts = self
            .contexts
            .into_iter()
            .map(|c| Arc::new((*c).clone().with_inverted_rotation()))
            .collect();
        self
    }

    pub fn n(&self) -> usize {
        self.primes[0].n()
    }

    pub fn primes(&self) -> &[PrimeModulus] {
        &self.primes
    }

    pub fn prime_values(&self) -> Vec<u64> {
        self.primes.iter().map(|m| m.p()).collect()
    }

    pub fn contexts(&self) -> &[Arc<RingContext>] {
        &self.contexts
    }

    pub fn crt(&self) -> &Crt {
        &self.crt
    }

    pub fn composite(&self) -> u128 {
        self.crt.composite()
    }
}
