//! Matrix-vector kernels over packed messages.
//!
//! Weights are always plaintext. Each kernel derives the plaintext vectors
//! it needs from a row-major [`WeightMatrix`] and the input representation.

use rayon::prelude::*;

use crate::backend::{Evaluator, Message, OpCounters};
use crate::error::{Error, Result};
use crate::repr::{pad_of, EncodedTensor, RepKind, Representation};
use crate::ring::Rotation;

/// Signed integer matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i128>,
    /// Slot of every column when the matrix feeds an interleaved vector.
    sigma: Option<Vec<usize>>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i128>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            sigma: None,
        })
    }

    pub fn from_rows(rows: &[Vec<i128>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Declares the column shuffle: column `j` is read from slot `sigma[j]`.
    pub fn with_permutation(mut self, sigma: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; sigma.iter().max().map_or(0, |m| m + 1)];
        if sigma.len() != self.cols || sigma.iter().any(|&s| std::mem::replace(&mut seen[s], true)) {
            return Err(Error::PermutationMismatch(
                "column permutation must list one distinct slot per column".into(),
            ));
        }
        self.sigma = Some(sigma);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[i128] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<i128> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn sigma(&self) -> Option<&[usize]> {
        self.sigma.as_deref()
    }

    pub fn apply(&self, v: &[i128]) -> Vec<i128> {
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn log2(x: usize) -> u64 {
    x.trailing_zeros() as u64
}

/// Multiplies by the plaintext `row` placed at `layout` and folds `pad`
/// slots into slot 0 with left rotate-adds of sizes 1, 2, ..., pad/2. When
/// `pad = n` the last fold is the row swap and every slot holds the sum.
pub fn dot_product(
    ev: &Evaluator,
    v: &Message,
    layout: &[usize],
    row: &[i128],
    pad: usize,
) -> Result<Message> {
    let n = ev.n();
    if !pad.is_power_of_two() || pad > n {
        return Err(Error::Shape(format!("pad {pad} is not a power of two <= {n}")));
    }
    if row.len() != layout.len() {
        return Err(Error::Shape(format!(
            "row of {} weights for {} coordinates",
            row.len(),
            layout.len()
        )));
    }
    if layout.iter().any(|&s| s >= pad) {
        return Err(Error::DirtySlots(format!("dot product over {pad} slots")));
    }
    let mut w = vec![0i128; n];
    for (&s, &x) in layout.iter().zip(row) {
        w[s] = x;
    }
    let mut acc = ev.mul_plain(v, &ev.encode_plain(&w)?)?;
    let mut size = 1;
    while size < pad {
        let rot = if size == n / 2 {
            Rotation::Rows
        } else {
            Rotation::Columns(-(size as i64))
        };
        let r = ev.rotate(&acc, rot)?;
        acc = ev.add(&acc, &r)?;
        size *= 2;
    }
    Ok(acc)
}

fn rowmajor(ev: &Evaluator, w: &WeightMatrix, v: &EncodedTensor) -> Result<EncodedTensor> {
    if w.cols != v.rep.len {
        return Err(Error::Shape(format!(
            "{}x{} matrix applied to a {}-vector",
            w.rows, w.cols, v.rep.len
        )));
    }
    let n = ev.n();
    let pad = v.rep.pad();
    let pad = if pad > n / 2 { n } else { pad };
    let input = v.single()?;
    let messages = (0..w.rows)
        .into_par_iter()
        .map(|i| dot_product(ev, input, &v.rep.layout, w.row(i), pad))
        .collect::<Result<Vec<_>>>()?;
    let valid = if pad == n { None } else { Some(0) };
    EncodedTensor::new(messages, Representation::sparse(w.rows, valid))
}

/// `r` dot products against a dense vector; the output is sparse.
pub fn matvec_dense_rowmajor(
    ev: &Evaluator,
    w: &WeightMatrix,
    v: &EncodedTensor,
) -> Result<EncodedTensor> {
    v.expect_kind(&[RepKind::Dense])?;
    if w.sigma.as_ref().is_some_and(|s| s != &v.rep.layout) {
        return Err(Error::PermutationMismatch(
            "shuffled matrix applied to a dense vector".into(),
        ));
    }
    rowmajor(ev, w, v)
}

/// Row-major product against an interleaved vector. The matrix must declare
/// the same column permutation the vector carries.
pub fn matvec_interleaved_rowmajor(
    ev: &Evaluator,
    w: &WeightMatrix,
    v: &EncodedTensor,
) -> Result<EncodedTensor> {
    v.expect_kind(&[RepKind::Interleaved, RepKind::Dense])?;
    let matches = match &w.sigma {
        Some(s) => s == &v.rep.layout,
        None => v.rep.is_identity(),
    };
    if !matches {
        return Err(Error::PermutationMismatch(
            "matrix columns are not shuffled to the vector's slot order".into(),
        ));
    }
    rowmajor(ev, w, v)
}

/// `sum_i v_i * c^i` over the columns of `W`; the output is dense.
pub fn matvec_sparse_colmajor(
    ev: &Evaluator,
    w: &WeightMatrix,
    v: &EncodedTensor,
) -> Result<EncodedTensor> {
    v.expect_kind(&[RepKind::Sparse])?;
    if v.rep.valid_slot.is_some() {
        return Err(Error::RepresentationMismatch {
            expected: "sparse values replicated in every slot".into(),
            found: "sparse value in a single slot".into(),
        });
    }
    if w.rows > ev.n() {
        return Err(Error::Capacity(format!("{} rows exceed n = {}", w.rows, ev.n())));
    }
    if w.cols != v.messages.len() || w.cols == 0 {
        return Err(Error::Shape(format!(
            "{} columns for {} sparse messages",
            w.cols,
            v.messages.len()
        )));
    }
    let terms = (0..w.cols)
        .into_par_iter()
        .map(|j| ev.mul_plain(&v.messages[j], &ev.encode_plain(&w.column(j))?))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = ev.add(&acc, t)?;
    }
    EncodedTensor::new(vec![acc], Representation::dense(w.rows))
}

/// Row-chunk product against a stacked vector. Call `t` handles rows
/// `t*copies .. (t+1)*copies`; row `c` of a call lands at slot
/// `c*pad + pad - 1` after right rotate-adds of sizes 1..pad/2. Outputs are
/// dirty: every other slot holds a partial sum.
pub fn matvec_stacked_rowmajor(
    ev: &Evaluator,
    w: &WeightMatrix,
    v: &EncodedTensor,
) -> Result<Vec<EncodedTensor>> {
    v.expect_kind(&[RepKind::Stacked])?;
    let n = ev.n();
    let (pad, copies) = (v.rep.stride, v.rep.copies);
    if pad == 0 || pad > n / 2 || pad * copies != n || pad_of(v.rep.span()) != pad {
        return Err(Error::Shape(format!(
            "stacked vector with {copies} copies at stride {pad} does not fill {n} slots"
        )));
    }
    if w.cols != v.rep.len {
        return Err(Error::Shape(format!(
            "{}x{} matrix applied to a {}-vector",
            w.rows, w.cols, v.rep.len
        )));
    }
    let input = v.single()?;
    let calls = w.rows.div_ceil(copies);
    (0..calls)
        .into_par_iter()
        .map(|t| {
            let rows: Vec<usize> = (t * copies..((t + 1) * copies).min(w.rows)).collect();
            let mut plain = vec![0i128; n];
            for (c, &i) in rows.iter().enumerate() {
                for (&s, &x) in v.rep.layout.iter().zip(w.row(i)) {
                    plain[c * pad + s] = x;
                }
            }
            let mut acc = ev.mul_plain(input, &ev.encode_plain(&plain)?)?;
            let mut size = 1;
            while size < pad {
                let r = ev.rotate(&acc, Rotation::Columns(size as i64))?;
                acc = ev.add(&acc, &r)?;
                size *= 2;
            }
            let layout = (0..rows.len()).map(|c| c * pad + pad - 1).collect();
            EncodedTensor::new(vec![acc], Representation::interleaved(layout).with_dirty(true))
        })
        .collect()
}

/// One output message per map: `sum_j w_j * m^j` over the tap messages.
pub fn conv_rowmajor(
    ev: &Evaluator,
    weights: &[Vec<i128>],
    x: &EncodedTensor,
) -> Result<Vec<EncodedTensor>> {
    x.expect_kind(&[RepKind::Convolution])?;
    let conv = x.rep.conv.as_ref().expect("convolution layout");
    weights
        .par_iter()
        .map(|w| {
            if w.len() != x.messages.len() || w.is_empty() {
                return Err(Error::Shape(format!(
                    "{} weights for {} window messages",
                    w.len(),
                    x.messages.len()
                )));
            }
            let mut acc = ev.mul_scalar(&x.messages[0], w[0])?;
            for (m, &wj) in x.messages.iter().zip(w).skip(1) {
                acc = ev.add(&acc, &ev.mul_scalar(m, wj)?)?;
            }
            EncodedTensor::new(vec![acc], Representation::interleaved(conv.positions.clone()))
        })
        .collect()
}

/// Weighted sums over per-feature messages: output `i` is
/// `sum w * x_j` over the `(j, w)` pairs in `terms[i]`.
pub fn matvec_simd(ev: &Evaluator, terms: &[Vec<(usize, i128)>], x: &EncodedTensor) -> Result<EncodedTensor> {
    x.expect_kind(&[RepKind::Simd])?;
    let messages = terms
        .par_iter()
        .map(|row| {
            let Some(&(j0, w0)) = row.first() else {
                return Err(Error::Shape("output with no input terms".into()));
            };
            let get = |j: usize| {
                x.messages
                    .get(j)
                    .ok_or_else(|| Error::Shape(format!("feature {j} out of range")))
            };
            let mut acc = ev.mul_scalar(get(j0)?, w0)?;
            for &(j, w) in &row[1..] {
                acc = ev.add(&acc, &ev.mul_scalar(get(j)?, w)?)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    EncodedTensor::new(messages, Representation::simd(terms.len(), x.rep.batch))
}

pub fn square_activation(ev: &Evaluator, m: &Message) -> Result<Message> {
    ev.square(m)
}

/// Squares every message of a tensor, keeping its representation.
pub fn square_tensor(ev: &Evaluator, t: &EncodedTensor) -> Result<EncodedTensor> {
    let messages = t
        .messages
        .par_iter()
        .map(|m| ev.square(m))
        .collect::<Result<Vec<_>>>()?;
    EncodedTensor::new(messages, t.rep.clone())
}

/// Closed-form operation counts of each kernel at ring degree `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelCostModel {
    pub n: usize,
}

impl KernelCostModel {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    /// Effective summation width of a row-major dot product over `span` slots.
    pub fn dot_pad(&self, span: usize) -> usize {
        let pad = pad_of(span);
        if pad > self.n / 2 {
            self.n
        } else {
            pad
        }
    }

    pub fn dot_product(&self, pad: usize) -> OpCounters {
        let d = log2(pad);
        let rows = u64::from(pad == self.n && self.n >= 2);
        OpCounters {
            ct_plain_mul: 1,
            rot_cols: d - rows,
            rot_rows: rows,
            rot_calls: d,
            add: d,
            ..Default::default()
        }
    }

    pub fn dense_rowmajor(&self, r: usize, pad: usize) -> OpCounters {
        scale(self.dot_product(pad), r as u64)
    }

    pub fn sparse_colmajor(&self, k: usize) -> OpCounters {
        OpCounters {
            ct_plain_mul: k as u64,
            add: k.saturating_sub(1) as u64,
            ..Default::default()
        }
    }

    pub fn stacked_calls(&self, r: usize, pad: usize) -> usize {
        (r * pad).div_ceil(self.n)
    }

    pub fn stacked_rowmajor(&self, r: usize, pad: usize) -> OpCounters {
        let d = log2(pad);
        let per_call = OpCounters {
            ct_plain_mul: 1,
            rot_cols: d,
            rot_calls: d,
            add: d,
            ..Default::default()
        };
        scale(per_call, self.stacked_calls(r, pad) as u64)
    }

    pub fn conv(&self, r: usize, maps: usize) -> OpCounters {
        OpCounters {
            scalar_mul: (r * maps) as u64,
            add: (r.saturating_sub(1) * maps) as u64,
            ..Default::default()
        }
    }

    /// `term_counts[i]` is the number of inputs feeding output `i`.
    pub fn simd(&self, term_counts: impl IntoIterator<Item = usize>) -> OpCounters {
        term_counts.into_iter().fold(OpCounters::default(), |c, t| OpCounters {
            scalar_mul: c.scalar_mul + t as u64,
            add: c.add + t.saturating_sub(1) as u64,
            ..c
        })
    }

    pub fn square(&self, messages: usize) -> OpCounters {
        OpCounters {
            ct_ct_mul: messages as u64,
            ..Default::default()
        }
    }
}

pub(crate) fn scale(c: OpCounters, k: u64) -> OpCounters {
    OpCounters {
        ct_ct_mul: c.ct_ct_mul * k,
        ct_plain_mul: c.ct_plain_mul * k,
        scalar_mul: c.scalar_mul * k,
        add: c.add * k,
        plain_add: c.plain_add * k,
        rot_cols: c.rot_cols * k,
        rot_rows: c.rot_rows * k,
        rot_calls: c.rot_calls * k,
        mask_mul: c.mask_mul * k,
        live_messages_peak: c.live_messages_peak,
    }
}
