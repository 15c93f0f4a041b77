//! Message representations and the conversions between them.
//!
//! Every [`EncodedTensor`] carries an explicit [`Representation`]: the slot
//! of each logical coordinate (`layout`, the interleave permutation), the
//! copy stride for stacked vectors, the window family for convolution
//! messages, and whether slots outside the layout may hold garbage.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Evaluator, Message, OpCounters};
use crate::error::{Error, Result};
use crate::ring::Rotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    Dense,
    Sparse,
    Stacked,
    Interleaved,
    Convolution,
    Simd,
}

/// Window family of a convolution representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayout {
    /// `windows[i][j]`: logical source index of tap `j` at window position
    /// `i`, `None` on padding.
    pub windows: Vec<Vec<Option<usize>>>,
    /// Slot of window position `i` in every message (the hybrid permutation).
    pub positions: Vec<usize>,
}

impl ConvLayout {
    pub fn taps(&self) -> usize {
        self.windows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Representation {
    pub kind: RepKind,
    /// Logical vector length.
    pub len: usize,
    /// Slot of logical coordinate `i` (copy 0 for stacked; empty for sparse/simd/convolution).
    pub layout: Vec<usize>,
    /// Stacked copies and their stride.
    pub copies: usize,
    pub stride: usize,
    /// Sparse: `None` when every slot holds the value, else the one valid slot.
    pub valid_slot: Option<usize>,
    pub conv: Option<ConvLayout>,
    /// SIMD: number of records packed per message.
    pub batch: usize,
    /// Slots outside `layout` may be nonzero.
    pub dirty: bool,
}

impl Representation {
    fn base(kind: RepKind, len: usize) -> Self {
        Self {
            kind,
            len,
            layout: Vec::new(),
            copies: 1,
            stride: 0,
            valid_slot: None,
            conv: None,
            batch: 1,
            dirty: false,
        }
    }

    pub fn dense(len: usize) -> Self {
        Self {
            layout: (0..len).collect(),
            stride: pad_of(len),
            ..Self::base(RepKind::Dense, len)
        }
    }

    /// Interleaved with the given permutation; identity layouts collapse to dense.
    pub fn interleaved(layout: Vec<usize>) -> Self {
        let len = layout.len();
        if is_identity(&layout) {
            return Self::dense(len);
        }
        let span = layout.iter().max().map_or(0, |m| m + 1);
        Self {
            layout,
            stride: pad_of(span),
            ..Self::base(RepKind::Interleaved, len)
        }
    }

    pub fn sparse(len: usize, valid_slot: Option<usize>) -> Self {
        Self {
            valid_slot,
            dirty: valid_slot.is_some(),
            ..Self::base(RepKind::Sparse, len)
        }
    }

    /// Window messages over a `len`-vector; window `i` sits at `positions[i]`.
    pub fn convolution(len: usize, windows: Vec<Vec<Option<usize>>>, positions: Vec<usize>) -> Self {
        Self {
            conv: Some(ConvLayout { windows, positions }),
            ..Self::base(RepKind::Convolution, len)
        }
    }

    pub fn simd(features: usize, batch: usize) -> Self {
        Self {
            batch,
            ..Self::base(RepKind::Simd, features)
        }
    }

    pub fn with_dirty(mut self, dirty: bool) -> Self {
        self.dirty = dirty;
        self
    }

    /// Smallest power of two covering the occupied slot range of one copy.
    pub fn pad(&self) -> usize {
        match self.kind {
            RepKind::Dense | RepKind::Interleaved | RepKind::Stacked => pad_of(self.span()),
            _ => pad_of(self.len),
        }
    }

    pub fn span(&self) -> usize {
        self.layout.iter().max().map_or(0, |m| m + 1)
    }

    pub fn is_identity(&self) -> bool {
        is_identity(&self.layout)
    }

    /// Number of messages this representation occupies.
    pub fn message_count(&self) -> usize {
        match self.kind {
            RepKind::Dense | RepKind::Interleaved | RepKind::Stacked => 1,
            RepKind::Sparse | RepKind::Simd => self.len,
            RepKind::Convolution => self.conv.as_ref().map_or(0, ConvLayout::taps),
        }
    }

    /// Logical values per message, as printed in traces.
    pub fn message_dim(&self) -> usize {
        match self.kind {
            RepKind::Dense | RepKind::Interleaved => self.len,
            RepKind::Stacked => self.len * self.copies,
            RepKind::Sparse => 1,
            RepKind::Simd => self.batch,
            RepKind::Convolution => self.conv.as_ref().map_or(0, |c| c.positions.len()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            RepKind::Dense => "dense",
            RepKind::Sparse => "sparse",
            RepKind::Interleaved => "interleave",
            RepKind::Simd => "simd",
            RepKind::Stacked if self.is_identity() => "stacked",
            RepKind::Stacked => "stacked-interleave",
            RepKind::Convolution => {
                let identity = self.conv.as_ref().is_none_or(|c| is_identity(&c.positions));
                if identity {
                    "convolution"
                } else {
                    "convolution-interleave"
                }
            }
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} {}", self.message_count(), self.message_dim(), self.label())
    }
}

pub(crate) fn pad_of(k: usize) -> usize {
    k.max(1).next_power_of_two()
}

fn is_identity(layout: &[usize]) -> bool {
    layout.iter().enumerate().all(|(i, &s)| i == s)
}

#[derive(Debug, Clone)]
pub struct EncodedTensor {
    pub messages: Vec<Message>,
    pub rep: Representation,
}

impl EncodedTensor {
    pub fn new(messages: Vec<Message>, rep: Representation) -> Result<Self> {
        if messages.len() != rep.message_count() {
            return Err(Error::RepresentationMismatch {
                expected: format!("{} messages for {}", rep.message_count(), rep.label()),
                found: format!("{} messages", messages.len()),
            });
        }
        Ok(Self { messages, rep })
    }

    /// The single message of a dense/interleaved/stacked tensor.
    pub fn single(&self) -> Result<&Message> {
        match self.messages.as_slice() {
            [m] => Ok(m),
            ms => Err(Error::RepresentationMismatch {
                expected: "one message".into(),
                found: format!("{} messages", ms.len()),
            }),
        }
    }

    pub fn expect_kind(&self, kinds: &[RepKind]) -> Result<()> {
        if kinds.contains(&self.rep.kind) {
            Ok(())
        } else {
            Err(Error::RepresentationMismatch {
                expected: format!("{kinds:?}"),
                found: self.rep.label().into(),
            })
        }
    }

    /// Decodes the logical vector (record 0 for SIMD).
    pub fn decode(&self, ev: &Evaluator) -> Vec<i128> {
        let rep = &self.rep;
        match rep.kind {
            RepKind::Dense | RepKind::Interleaved | RepKind::Stacked => {
                let slots = ev.lower(&self.messages[0]);
                rep.layout.iter().map(|&s| slots[s]).collect()
            }
            RepKind::Sparse => {
                let slot = rep.valid_slot.unwrap_or(0);
                self.messages.iter().map(|m| ev.lower(m)[slot]).collect()
            }
            RepKind::Simd => self.messages.iter().map(|m| ev.lower(m)[0]).collect(),
            RepKind::Convolution => {
                let conv = rep.conv.as_ref().expect("convolution layout");
                let mut out = vec![0i128; rep.len];
                for (j, m) in self.messages.iter().enumerate() {
                    let slots = ev.lower(m);
                    for (i, w) in conv.windows.iter().enumerate() {
                        if let Some(src) = w[j] {
                            out[src] = slots[conv.positions[i]];
                        }
                    }
                }
                out
            }
        }
    }

    /// Every record of a SIMD tensor, `records[i][j]` = feature `j` of record `i`.
    pub fn decode_simd_batch(&self, ev: &Evaluator) -> Result<Vec<Vec<i128>>> {
        self.expect_kind(&[RepKind::Simd])?;
        let lowered: Vec<Vec<i128>> = self.messages.iter().map(|m| ev.lower(m)).collect();
        Ok((0..self.rep.batch)
            .map(|i| lowered.iter().map(|f| f[i]).collect())
            .collect())
    }
}

/// Flattening order of an image into a logical vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelOrder {
    /// Channel, then row, then column.
    RowMajor,
    /// Channel, then stride phase, then subsampled row and column. Windows
    /// with the given stride land on a compact grid after masking.
    Polyphase { stride_h: usize, stride_w: usize },
}

/// An image of `channels x height x width` and a window sliding over its
/// zero-padded extension. Windows that run past the padded edge are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    /// Square window and stride, equal padding on every side.
    pub fn square(channels: usize, height: usize, width: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            channels,
            height,
            width,
            kernel_h: k,
            kernel_w: k,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel_h >= 1
            && self.kernel_w >= 1
            && self.stride_h >= 1
            && self.stride_w >= 1
            && self.channels >= 1
            && self.pad_h < self.kernel_h
            && self.pad_w < self.kernel_w
            && self.kernel_h <= self.height + 2 * self.pad_h
            && self.kernel_w <= self.width + 2 * self.pad_w;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "window {}x{} stride ({},{}) padding ({},{}) does not fit a {}x{} input",
                self.kernel_h,
                self.kernel_w,
                self.stride_h,
                self.stride_w,
                self.pad_h,
                self.pad_w,
                self.height,
                self.width
            )))
        }
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride_w + 1
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn taps(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Pixel `(c, y, x)` under tap `j` at window position `i`, or `None`
    /// when the tap falls on padding.
    pub fn source(&self, i: usize, j: usize) -> Option<(usize, usize, usize)> {
        let (oy, ox) = (i / self.out_w(), i % self.out_w());
        let per_c = self.kernel_h * self.kernel_w;
        let (c, rest) = (j / per_c, j % per_c);
        let (dy, dx) = (rest / self.kernel_w, rest % self.kernel_w);
        let y = (oy * self.stride_h + dy).checked_sub(self.pad_h)?;
        let x = (ox * self.stride_w + dx).checked_sub(self.pad_w)?;
        (y < self.height && x < self.width).then_some((c, y, x))
    }

    /// First tap that reads a real pixel at every window position.
    pub fn reference_tap(&self) -> Option<usize> {
        (0..self.taps()).find(|&j| (0..self.positions()).all(|i| self.source(i, j).is_some()))
    }

    pub fn polyphase(&self) -> PixelOrder {
        PixelOrder::Polyphase {
            stride_h: self.stride_h,
            stride_w: self.stride_w,
        }
    }
}

impl PixelOrder {
    fn grid(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match *self {
            PixelOrder::RowMajor => (1, 1, h, w),
            PixelOrder::Polyphase { stride_h, stride_w } => {
                (stride_h, stride_w, h.div_ceil(stride_h), w.div_ceil(stride_w))
            }
        }
    }

    /// Length of the flattened vector for a `c x h x w` image.
    pub fn flat_len(&self, c: usize, h: usize, w: usize) -> usize {
        let (sh, sw, gh, gw) = self.grid(h, w);
        c * sh * sw * gh * gw
    }

    pub fn index(&self, (c, y, x): (usize, usize, usize), h: usize, w: usize) -> usize {
        let (sh, sw, gh, gw) = self.grid(h, w);
        let phase = (y % sh) * sw + x % sw;
        c * sh * sw * gh * gw + phase * gh * gw + (y / sh) * gw + x / sw
    }

    /// Flattens a channel-major `c x h x w` image.
    pub fn flatten(&self, image: &[i128], c: usize, h: usize, w: usize) -> Result<Vec<i128>> {
        if image.len() != c * h * w {
            return Err(Error::Shape(format!(
                "image has {} values, expected {c}x{h}x{w}",
                image.len()
            )));
        }
        let mut out = vec![0; self.flat_len(c, h, w)];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[self.index((ch, y, x), h, w)] = image[(ch * h + y) * w + x];
                }
            }
        }
        Ok(out)
    }
}

pub fn encode_dense(ev: &Evaluator, v: &[i128]) -> Result<EncodedTensor> {
    if v.len() > ev.n() {
        return Err(Error::Capacity(format!("{} values exceed n = {}", v.len(), ev.n())));
    }
    EncodedTensor::new(vec![ev.lift(v)?], Representation::dense(v.len()))
}

/// Places `v[i]` at slot `layout[i]`.
pub fn encode_interleaved(ev: &Evaluator, v: &[i128], layout: Vec<usize>) -> Result<EncodedTensor> {
    if v.len() != layout.len() {
        return Err(Error::Shape("layout length differs from vector length".into()));
    }
    let mut slots = vec![0i128; ev.n()];
    let mut seen = HashSet::new();
    for (&x, &s) in v.iter().zip(&layout) {
        if s >= ev.n() || !seen.insert(s) {
            return Err(Error::Capacity(format!("slot {s} invalid or repeated")));
        }
        slots[s] = x;
    }
    EncodedTensor::new(vec![ev.lift(&slots)?], Representation::interleaved(layout))
}

pub fn encode_sparse(ev: &Evaluator, v: &[i128]) -> Result<EncodedTensor> {
    let n = ev.n();
    let messages = v
        .iter()
        .map(|&x| ev.lift(&vec![x; n]))
        .collect::<Result<Vec<_>>>()?;
    EncodedTensor::new(messages, Representation::sparse(v.len(), None))
}

/// One message per feature; slot `i` of message `j` holds feature `j` of record `i`.
pub fn encode_simd(ev: &Evaluator, batch: &[Vec<i128>]) -> Result<EncodedTensor> {
    if batch.is_empty() || batch.len() > ev.n() {
        return Err(Error::Capacity(format!(
            "batch of {} records for n = {}",
            batch.len(),
            ev.n()
        )));
    }
    let features = batch[0].len();
    if batch.iter().any(|r| r.len() != features) {
        return Err(Error::Shape("records of different lengths".into()));
    }
    let messages = (0..features)
        .map(|j| ev.lift(&batch.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    EncodedTensor::new(messages, Representation::simd(features, batch.len()))
}

/// Window family of `geom` over a vector flattened with `order`.
pub fn conv_windows(geom: &ConvGeometry, order: PixelOrder) -> Vec<Vec<Option<usize>>> {
    (0..geom.positions())
        .map(|i| {
            (0..geom.taps())
                .map(|j| geom.source(i, j).map(|px| order.index(px, geom.height, geom.width)))
                .collect()
        })
        .collect()
}

/// Client-side convolution encoding: message `j` holds tap `j` of every
/// window, window position `i` at slot `positions[i]` (identity by default).
/// Taps on padding hold zero.
pub fn encode_convolution(
    ev: &Evaluator,
    image: &[i128],
    geom: &ConvGeometry,
    positions: Option<Vec<usize>>,
) -> Result<EncodedTensor> {
    geom.validate()?;
    if image.len() != geom.input_len() {
        return Err(Error::Shape(format!(
            "image has {} values, geometry expects {}",
            image.len(),
            geom.input_len()
        )));
    }
    let positions = positions.unwrap_or_else(|| (0..geom.positions()).collect());
    if positions.len() != geom.positions() {
        return Err(Error::Shape("position map length differs from window count".into()));
    }
    if positions.iter().any(|&s| s >= ev.n()) {
        return Err(Error::Capacity(format!(
            "{} window positions do not fit in one message of {} slots",
            geom.positions(),
            ev.n()
        )));
    }
    let windows = conv_windows(geom, PixelOrder::RowMajor);
    let messages = (0..geom.taps())
        .into_par_iter()
        .map(|j| {
            let mut slots = vec![0i128; ev.n()];
            for (i, w) in windows.iter().enumerate() {
                if let Some(src) = w[j] {
                    slots[positions[i]] = image[src];
                }
            }
            ev.lift(&slots)
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = Representation {
        conv: Some(ConvLayout { windows, positions }),
        ..Representation::base(RepKind::Convolution, image.len())
    };
    EncodedTensor::new(messages, rep)
}

/// How [`dense_to_convolution`] turns one message into window messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedConvPlan {
    pub rep: Representation,
    /// Source slots selected for each tap.
    pub masks: Vec<Vec<usize>>,
    /// Left rotation applied to each masked tap.
    pub offsets: Vec<i64>,
}

/// Derives masks and shifts that move tap `j` of every window onto the
/// slot of the window's reference pixel (the first tap that is never
/// padding). Fails unless each tap is a uniform shift under the layout.
pub fn plan_dense_to_convolution(
    input: &Representation,
    geom: &ConvGeometry,
    order: PixelOrder,
    n: usize,
) -> Result<MaskedConvPlan> {
    if !matches!(input.kind, RepKind::Dense | RepKind::Interleaved) {
        return Err(Error::RepresentationMismatch {
            expected: "dense or interleave".into(),
            found: input.label().into(),
        });
    }
    geom.validate()?;
    let flat = order.flat_len(geom.channels, geom.height, geom.width);
    if input.len != flat {
        return Err(Error::Shape(format!(
            "dense input has {} values, geometry expects {flat}",
            input.len
        )));
    }
    if input.span() > n / 2 {
        return Err(Error::Capacity("dense input must fit in the first slot row".into()));
    }
    let reference = geom
        .reference_tap()
        .ok_or_else(|| Error::Shape("every tap touches padding somewhere".into()))?;
    let windows = conv_windows(geom, order);
    let slot = |logical: usize| input.layout[logical];
    let positions: Vec<usize> = windows
        .iter()
        .map(|w| slot(w[reference].expect("reference tap is never padding")))
        .collect();
    let mut masks = Vec::with_capacity(geom.taps());
    let mut offsets = Vec::with_capacity(geom.taps());
    for j in 0..geom.taps() {
        let mut offset = None;
        let mut mask = Vec::new();
        for (w, &p) in windows.iter().zip(&positions) {
            let Some(src) = w[j] else { continue };
            let s = slot(src);
            let o = s as i64 - p as i64;
            if *offset.get_or_insert(o) != o {
                return Err(Error::Shape(format!(
                    "tap {j} is not a uniform shift under this layout"
                )));
            }
            mask.push(s);
        }
        let offset = offset.unwrap_or(0);
        Rotation::Columns(-offset).validate(n)?;
        masks.push(mask);
        offsets.push(offset);
    }
    let rep = Representation {
        conv: Some(ConvLayout { windows, positions }),
        ..Representation::base(RepKind::Convolution, flat)
    };
    Ok(MaskedConvPlan { rep, masks, offsets })
}

/// Counters of one `rotate` call.
pub fn rotation_cost(rot: Rotation, n: usize) -> Result<OpCounters> {
    let steps = rot.primitive_steps(n)?;
    let rows = steps.iter().filter(|s| matches!(s, Rotation::Rows)).count() as u64;
    Ok(OpCounters {
        rot_rows: rows,
        rot_cols: steps.len() as u64 - rows,
        rot_calls: u64::from(!steps.is_empty()),
        ..Default::default()
    })
}

fn masks(count: usize) -> OpCounters {
    OpCounters {
        ct_plain_mul: count as u64,
        mask_mul: count as u64,
        ..Default::default()
    }
}

fn adds(count: usize) -> OpCounters {
    OpCounters {
        add: count as u64,
        ..Default::default()
    }
}

/// Counters of [`dense_to_convolution`].
pub fn dense_to_convolution_cost(plan: &MaskedConvPlan, n: usize) -> Result<OpCounters> {
    plan.offsets.iter().try_fold(masks(plan.masks.len()), |acc, &o| {
        Ok(acc.merged(&rotation_cost(Rotation::Columns(-o), n)?))
    })
}

/// Representation produced by [`stack_copies`].
pub fn stacked_rep(d: &Representation, copies: usize, n: usize) -> Result<Representation> {
    if !matches!(d.kind, RepKind::Dense | RepKind::Interleaved) {
        return Err(Error::RepresentationMismatch {
            expected: "dense or interleave".into(),
            found: d.label().into(),
        });
    }
    if d.dirty {
        return Err(Error::DirtySlots("stack_copies".into()));
    }
    let pad = d.pad();
    if !copies.is_power_of_two() || copies * pad > n || (copies > 1 && pad > n / 2) {
        return Err(Error::Capacity(format!(
            "{copies} copies of stride {pad} do not fit in {n} slots"
        )));
    }
    Ok(Representation {
        kind: RepKind::Stacked,
        copies,
        stride: pad,
        ..d.clone()
    })
}

/// Counters of [`stack_copies`].
pub fn stack_cost(pad: usize, copies: usize, n: usize) -> Result<OpCounters> {
    let mut c = OpCounters::default();
    let mut size = pad;
    while size < copies * pad {
        c = c.merged(&rotation_cost(rotation_for(size as i64, n), n)?).merged(&adds(1));
        size *= 2;
    }
    Ok(c)
}

/// Representation produced by [`combine_interleaved`]; fails on dirty parts
/// or colliding slots.
pub fn combined_rep(parts: &[Representation], offsets: &[i64], n: usize) -> Result<Representation> {
    if parts.is_empty() || parts.len() != offsets.len() {
        return Err(Error::Shape("one offset per part required".into()));
    }
    let mut layout = Vec::new();
    let mut used = HashSet::new();
    for (part, &off) in parts.iter().zip(offsets) {
        if !matches!(part.kind, RepKind::Dense | RepKind::Interleaved) {
            return Err(Error::RepresentationMismatch {
                expected: "dense or interleave".into(),
                found: part.label().into(),
            });
        }
        if part.dirty {
            return Err(Error::DirtySlots("combine_interleaved".into()));
        }
        let rot = rotation_for(off, n);
        rot.validate(n)?;
        for &s in &part.layout {
            let t = rotated_slot(s, rot, n);
            if !used.insert(t) {
                return Err(Error::SlotCollision { slot: t });
            }
            layout.push(t);
        }
    }
    Ok(Representation::interleaved(layout))
}

/// Common step when `offsets` is `0, s, 2s, ...` with more than one part.
fn progression_step(offsets: &[i64]) -> Option<i64> {
    let step = *offsets.get(1)?;
    (offsets[0] == 0 && offsets.iter().enumerate().all(|(i, &o)| o == i as i64 * step)).then_some(step)
}

/// Counters of [`combine_interleaved`].
pub fn combine_cost(offsets: &[i64], n: usize) -> Result<OpCounters> {
    let mut c = adds(offsets.len().saturating_sub(1));
    match progression_step(offsets) {
        Some(step) => {
            let r = rotation_cost(rotation_for(step, n), n)?;
            for _ in 1..offsets.len() {
                c = c.merged(&r);
            }
        }
        None => {
            for &o in offsets {
                c = c.merged(&rotation_cost(rotation_for(o, n), n)?);
            }
        }
    }
    Ok(c)
}

/// Counters of [`clean`] applied to `parts` messages.
pub fn clean_cost(parts: usize) -> OpCounters {
    masks(parts)
}

/// Counters of [`sparse_to_dense`].
pub fn sparse_to_dense_cost(valid_slot: Option<usize>, targets: &[usize], n: usize) -> Result<OpCounters> {
    let k = targets.len();
    let base = masks(k).merged(&adds(k.saturating_sub(1)));
    let Some(src) = valid_slot else { return Ok(base) };
    if consecutive_from(src, targets, n) {
        let r = rotation_cost(Rotation::Columns(1), n)?;
        return Ok((1..k).fold(base, |c, _| c.merged(&r)));
    }
    let half = n / 2;
    targets.iter().try_fold(base, |c, &t| {
        let mut c = c;
        if t / half != src / half {
            c = c.merged(&rotation_cost(Rotation::Rows, n)?);
        }
        let shift = (t % half) as i64 - (src % half) as i64;
        Ok(c.merged(&rotation_cost(Rotation::Columns(shift), n)?))
    })
}

fn consecutive_from(src: usize, targets: &[usize], n: usize) -> bool {
    targets.iter().enumerate().all(|(i, &t)| t == src + i) && src + targets.len() <= n / 2
}

fn rotation_for(shift: i64, n: usize) -> Rotation {
    if shift.unsigned_abs() as usize == n / 2 {
        Rotation::Rows
    } else {
        Rotation::Columns(shift)
    }
}

/// Slot reached by slot `s` after `rot`.
pub fn rotated_slot(s: usize, rot: Rotation, n: usize) -> usize {
    let half = n / 2;
    match rot {
        Rotation::Rows => (s + half) % n,
        Rotation::Columns(k) => {
            let (row, col) = (s / half, s % half);
            row * half + (col as i64 + k).rem_euclid(half as i64) as usize
        }
    }
}

/// Replicates a clean dense/interleaved vector `copies` times at stride
/// `pad` using `log2(copies)` doubling rotate-adds.
pub fn stack_copies(ev: &Evaluator, d: &EncodedTensor, copies: usize) -> Result<EncodedTensor> {
    let n = ev.n();
    let rep = stacked_rep(&d.rep, copies, n)?;
    let mut m = d.single()?.clone();
    let mut size = rep.stride;
    while size < copies * rep.stride {
        let r = ev.rotate(&m, rotation_for(size as i64, n))?;
        m = ev.add(&m, &r)?;
        size *= 2;
    }
    EncodedTensor::new(vec![m], rep)
}

/// Converts a dense image (flattened with `order`) into the convolution
/// representation with one mask multiplication per tap, each followed by
/// the rotation from [`plan_dense_to_convolution`].
pub fn dense_to_convolution(
    ev: &Evaluator,
    d: &EncodedTensor,
    geom: &ConvGeometry,
    order: PixelOrder,
) -> Result<EncodedTensor> {
    let plan = plan_dense_to_convolution(&d.rep, geom, order, ev.n())?;
    let input = d.single()?;
    let messages = plan
        .masks
        .par_iter()
        .zip(&plan.offsets)
        .map(|(mask, &offset)| {
            let masked = ev.mul_plain(input, &ev.encode_mask(mask)?)?;
            ev.rotate(&masked, Rotation::Columns(-offset))
        })
        .collect::<Result<Vec<_>>>()?;
    EncodedTensor::new(messages, plan.rep)
}

/// Zeroes every slot outside the layout of a single-message tensor.
pub fn clean(ev: &Evaluator, t: &EncodedTensor) -> Result<EncodedTensor> {
    t.expect_kind(&[RepKind::Dense, RepKind::Interleaved])?;
    let mask = ev.encode_mask(&t.rep.layout)?;
    let m = ev.mul_plain(t.single()?, &mask)?;
    EncodedTensor::new(vec![m], t.rep.clone().with_dirty(false))
}

/// Rotates part `i` by `offsets[i]` (positive = right) and sums, after
/// checking that the rotated active slots are pairwise disjoint. Offsets in
/// arithmetic progression are applied Horner-style, one rotation by the
/// common step per extra part.
pub fn combine_interleaved(
    ev: &Evaluator,
    parts: &[EncodedTensor],
    offsets: &[i64],
) -> Result<EncodedTensor> {
    let n = ev.n();
    let reps: Vec<Representation> = parts.iter().map(|p| p.rep.clone()).collect();
    let rep = combined_rep(&reps, offsets, n)?;
    let mut acc;
    if let Some(step) = progression_step(offsets) {
        acc = parts[parts.len() - 1].single()?.clone();
        for part in parts[..parts.len() - 1].iter().rev() {
            acc = ev.rotate(&acc, rotation_for(step, n))?;
            acc = ev.add(&acc, part.single()?)?;
        }
    } else {
        acc = ev.rotate(parts[0].single()?, rotation_for(offsets[0], n))?;
        for (part, &off) in parts.iter().zip(offsets).skip(1) {
            let r = ev.rotate(part.single()?, rotation_for(off, n))?;
            acc = ev.add(&acc, &r)?;
        }
    }
    EncodedTensor::new(vec![acc], rep)
}

/// Gathers sparse outputs into one message, value `i` at slot `targets[i]`.
///
/// Fully sparse parts need one mask per part. Parts valid only at one slot
/// are masked there and shifted into place; consecutive targets starting at
/// the valid slot use one rotation by one per extra part.
pub fn sparse_to_dense(
    ev: &Evaluator,
    parts: &EncodedTensor,
    targets: &[usize],
) -> Result<EncodedTensor> {
    parts.expect_kind(&[RepKind::Sparse])?;
    if targets.len() != parts.messages.len() || targets.is_empty() {
        return Err(Error::Shape("one target per sparse part required".into()));
    }
    let mut seen = HashSet::new();
    for &t in targets {
        if t >= ev.n() {
            return Err(Error::Capacity(format!("target slot {t} out of range")));
        }
        if !seen.insert(t) {
            return Err(Error::DuplicateTarget(t));
        }
    }
    let acc = match parts.rep.valid_slot {
        None => {
            let mut acc: Option<Message> = None;
            for (m, &t) in parts.messages.iter().zip(targets) {
                let masked = ev.mul_plain(m, &ev.encode_mask(&[t])?)?;
                acc = Some(match acc {
                    None => masked,
                    Some(a) => ev.add(&a, &masked)?,
                });
            }
            acc.expect("non-empty")
        }
        Some(src) => {
            let mask = ev.encode_mask(&[src])?;
            if consecutive_from(src, targets, ev.n()) {
                let last = parts.messages.len() - 1;
                let mut acc = ev.mul_plain(&parts.messages[last], &mask)?;
                for m in parts.messages[..last].iter().rev() {
                    acc = ev.rotate(&acc, Rotation::Columns(1))?;
                    acc = ev.add(&acc, &ev.mul_plain(m, &mask)?)?;
                }
                acc
            } else {
                let half = ev.n() / 2;
                let mut acc: Option<Message> = None;
                for (m, &t) in parts.messages.iter().zip(targets) {
                    let mut x = ev.mul_plain(m, &mask)?;
                    if t / half != src / half {
                        x = ev.rotate(&x, Rotation::Rows)?;
                    }
                    let shift = (t % half) as i64 - (src % half) as i64;
                    x = ev.rotate(&x, Rotation::Columns(shift))?;
                    acc = Some(match acc {
                        None => x,
                        Some(a) => ev.add(&a, &x)?,
                    });
                }
                acc.expect("non-empty")
            }
        }
    };
    EncodedTensor::new(vec![acc], Representation::interleaved(targets.to_vec()))
}
