//! Variable-precision operand decomposition.
//!
//! A matrix is tiled into array-sized blocks. Each block is turned into
//! integer codes, either by symmetric linear quantization (INT formats) or by
//! aligning every entry to a shared power-of-two exponent (FP formats). The
//! codes are then split into bit fields ("slices") that are small enough to be
//! stored in one device each.
//!
//! Signed codes use two's complement. The leading slice is always one bit
//! wide and carries significance `-2^(N-1)`, so every slice value is a
//! nonnegative integer and the sign is restored digitally.
//!
//! Worked example, `int4:1,1,2` on `q = -5`: the bit pattern `1011` splits
//! into slices `[1, 0, 3]` with significances `[-8, 4, 1]`, and
//! `-8*1 + 4*0 + 1*3 = -5`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Widest code a scheme may describe.
pub const MAX_TOTAL_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeFormat {
    /// Integer codes from per-block linear quantization.
    Int { bits: u32 },
    /// Shared-exponent alignment; `bits` names the source format only, the
    /// aligned mantissa width is the sum of the slice widths.
    Fp { bits: u32 },
}

/// Slice widths (most significant first) plus number format.
///
/// Text form: `int8:1,1,2,4`, `uint8:2,2,2,2`, `fp:16:1,1,2,4,4`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SliceScheme {
    format: SchemeFormat,
    widths: Vec<u32>,
    signed: bool,
}

impl SliceScheme {
    pub fn new(format: SchemeFormat, widths: Vec<u32>, signed: bool) -> Result<Self> {
        let scheme = Self { format, widths, signed };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn int(bits: u32, widths: &[u32]) -> Result<Self> {
        Self::new(SchemeFormat::Int { bits }, widths.to_vec(), true)
    }

    pub fn fp(bits: u32, widths: &[u32]) -> Result<Self> {
        Self::new(SchemeFormat::Fp { bits }, widths.to_vec(), true)
    }

    /// Signed integer scheme of `n` one-bit slices.
    pub fn one_bit(n: u32) -> Result<Self> {
        Self::int(n, &vec![1; n as usize])
    }

    /// Named presets: `int4`, `int8`, `fp16`, `bf16`, `fp32`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "int4" => Self::int(4, &[1, 1, 2]),
            "int8" => Self::int(8, &[1, 1, 2, 4]),
            "fp16" => Self::fp(16, &[1, 1, 2, 4, 4]),
            "bf16" => Self::fp(16, &[1, 2, 2, 4]),
            "fp32" => Self::fp(32, &[1, 1, 1, 2, 4, 4, 4, 4, 4]),
            other => Err(Error::Scheme(format!("unknown preset `{other}`"))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Scheme("at least one slice is required".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Scheme("slice widths must be >= 1".into()));
        }
        let total: u32 = self.widths.iter().sum();
        if total > MAX_TOTAL_BITS {
            return Err(Error::Scheme(format!("{total} bits exceed the {MAX_TOTAL_BITS}-bit limit")));
        }
        if self.signed && self.widths[0] != 1 {
            return Err(Error::Scheme("signed schemes need a leading 1-bit slice".into()));
        }
        match self.format {
            SchemeFormat::Int { bits } => {
                if bits != total {
                    return Err(Error::Scheme(format!("int{bits} widths sum to {total}")));
                }
                if self.signed && bits < 2 {
                    return Err(Error::Scheme("signed int needs at least 2 bits".into()));
                }
            }
            SchemeFormat::Fp { .. } => {
                if !self.signed {
                    return Err(Error::Scheme("fp schemes are signed".into()));
                }
                if total < 2 {
                    return Err(Error::Scheme("fp needs at least 2 effective bits".into()));
                }
            }
        }
        Ok(())
    }

    pub fn format(&self) -> SchemeFormat {
        self.format
    }

    pub fn widths(&self) -> &[u32] {
        &self.widths
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn is_fp(&self) -> bool {
        matches!(self.format, SchemeFormat::Fp { .. })
    }

    pub fn num_slices(&self) -> usize {
        self.widths.len()
    }

    /// Code width: total INT bits, or the aligned mantissa width for FP.
    pub fn total_bits(&self) -> u32 {
        self.widths.iter().sum()
    }

    pub fn effective_bits(&self) -> u32 {
        self.total_bits()
    }

    pub fn max_width(&self) -> u32 {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    /// Weight of each slice, most significant first.
    pub fn significances(&self) -> Vec<i64> {
        let total = self.total_bits();
        let mut below = total;
        self.widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                below -= w;
                if i == 0 && self.signed {
                    -(1i64 << (total - 1))
                } else {
                    1i64 << below
                }
            })
            .collect()
    }

    /// Inclusive range of representable codes.
    pub fn code_range(&self) -> (i64, i64) {
        let n = self.total_bits();
        if self.signed {
            (-(1i64 << (n - 1)), (1i64 << (n - 1)) - 1)
        } else {
            (0, (1i64 << n) - 1)
        }
    }

    /// Checks that every slice fits in `levels` distinct analog states.
    pub fn check_levels(&self, levels: u64, what: &str) -> Result<()> {
        let w = self.max_width();
        if w >= 64 || (1u64 << w) > levels {
            return Err(Error::Incompatible(format!(
                "{what}: a {w}-bit slice needs {} levels, only {levels} available",
                1u128 << w
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SliceScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths.iter().map(u32::to_string).collect();
        match self.format {
            SchemeFormat::Int { bits } => {
                let prefix = if self.signed { "int" } else { "uint" };
                write!(f, "{prefix}{bits}:{}", widths.join(","))
            }
            SchemeFormat::Fp { bits } => write!(f, "fp:{bits}:{}", widths.join(",")),
        }
    }
}

fn parse_widths(text: &str) -> Result<Vec<u32>> {
    text.split(',')
        .map(|w| {
            w.trim()
                .parse::<u32>()
                .map_err(|_| Error::Scheme(format!("bad slice width `{w}`")))
        })
        .collect()
}

impl FromStr for SliceScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        let parts: Vec<&str> = lower.split(':').collect();
        match parts.as_slice() {
            [name] => SliceScheme::preset(name),
            ["fp", bits, widths] => {
                let bits = bits
                    .parse::<u32>()
                    .map_err(|_| Error::Scheme(format!("bad fp width in `{s}`")))?;
                SliceScheme::fp(bits, &parse_widths(widths)?)
            }
            [head, widths] => {
                let (signed, digits) = if let Some(d) = head.strip_prefix("uint") {
                    (false, d)
                } else if let Some(d) = head.strip_prefix("int") {
                    (true, d)
                } else {
                    return Err(Error::Scheme(format!("unknown format in `{s}`")));
                };
                let bits = digits
                    .parse::<u32>()
                    .map_err(|_| Error::Scheme(format!("bad bit count in `{s}`")))?;
                SliceScheme::new(SchemeFormat::Int { bits }, parse_widths(widths)?, signed)
            }
            _ => Err(Error::Scheme(format!("cannot parse scheme `{s}`"))),
        }
    }
}

impl TryFrom<String> for SliceScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SliceScheme> for String {
    fn from(s: SliceScheme) -> String {
        s.to_string()
    }
}

/// Dense row-major matrix of integer codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn to_matrix(&self, scale: f64) -> Matrix {
        let data = self.data.iter().map(|&q| q as f64 * scale).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("shape preserved")
    }
}

/// Tiling of a matrix into equally sized, zero-padded blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub rows: usize,
    pub cols: usize,
    pub l_blk_m: usize,
    pub l_blk_n: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl BlockPlan {
    pub fn new(rows: usize, cols: usize, l_blk_m: usize, l_blk_n: usize) -> Result<Self> {
        if l_blk_m == 0 || l_blk_n == 0 {
            return Err(Error::param("block_size", "block dimensions must be >= 1"));
        }
        Ok(Self {
            rows,
            cols,
            l_blk_m,
            l_blk_n,
            grid_rows: rows.div_ceil(l_blk_m),
            grid_cols: cols.div_ceil(l_blk_n),
        })
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.grid_rows * self.l_blk_m, self.grid_cols * self.l_blk_n)
    }

    pub fn num_blocks(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Flat index of block `(br, bc)` in row-major block order.
    pub fn index(&self, br: usize, bc: usize) -> usize {
        br * self.grid_cols + bc
    }

    pub fn origin(&self, br: usize, bc: usize) -> (usize, usize) {
        (br * self.l_blk_m, bc * self.l_blk_n)
    }

    /// Rows and columns of block `(br, bc)` that lie inside the original matrix.
    pub fn extent(&self, br: usize, bc: usize) -> (usize, usize) {
        let (r0, c0) = self.origin(br, bc);
        (
            self.l_blk_m.min(self.rows - r0),
            self.l_blk_n.min(self.cols - c0),
        )
    }
}

/// Splits `x` into zero-padded `l_blk_m x l_blk_n` blocks in row-major block order.
pub fn partition_blocks(x: &Matrix, l_blk_m: usize, l_blk_n: usize) -> Result<(BlockPlan, Vec<Matrix>)> {
    let plan = BlockPlan::new(x.rows(), x.cols(), l_blk_m, l_blk_n)?;
    let mut blocks = Vec::with_capacity(plan.num_blocks());
    for br in 0..plan.grid_rows {
        for bc in 0..plan.grid_cols {
            let (r0, c0) = plan.origin(br, bc);
            blocks.push(x.window(r0, c0, l_blk_m, l_blk_n));
        }
    }
    Ok((plan, blocks))
}

/// Inverse of [`partition_blocks`]: stitches blocks and crops the padding.
pub fn reassemble_blocks(plan: &BlockPlan, blocks: &[Matrix]) -> Result<Matrix> {
    if blocks.len() != plan.num_blocks() {
        return Err(Error::dims(
            "reassemble_blocks",
            format!("{} blocks for a {}x{} grid", blocks.len(), plan.grid_rows, plan.grid_cols),
        ));
    }
    let mut out = Matrix::zeros(plan.rows, plan.cols);
    for br in 0..plan.grid_rows {
        for bc in 0..plan.grid_cols {
            let (r0, c0) = plan.origin(br, bc);
            out.set_window(r0, c0, &blocks[plan.index(br, bc)]);
        }
    }
    Ok(out)
}

fn check_finite(block: &Matrix, context: &'static str) -> Result<()> {
    if !block.is_finite() {
        return Err(Error::NonFinite {
            context,
        });
    }
    Ok(())
}

/// Symmetric linear quantization to signed `total_bits` codes.
///
/// `scale = max|block| / (2^(total_bits-1) - 1)`, or 1 for an all-zero block.
pub fn quantize_block_int(block: &Matrix, total_bits: u32) -> Result<(IntMatrix, f64)> {
    if !(2..=MAX_TOTAL_BITS).contains(&total_bits) {
        return Err(Error::param("total_bits", format!("must be in 2..={MAX_TOTAL_BITS}")));
    }
    check_finite(block, "quantize_block_int")?;
    let qmax = ((1i64 << (total_bits - 1)) - 1) as f64;
    quantize_with(block, qmax)
}

/// Unsigned variant for nonnegative blocks: codes in `[0, 2^total_bits - 1]`.
pub fn quantize_block_uint(block: &Matrix, total_bits: u32) -> Result<(IntMatrix, f64)> {
    if !(1..=MAX_TOTAL_BITS).contains(&total_bits) {
        return Err(Error::param("total_bits", format!("must be in 1..={MAX_TOTAL_BITS}")));
    }
    check_finite(block, "quantize_block_uint")?;
    if let Some(&neg) = block.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::OutOfRange {
            what: "unsigned operand",
            value: neg,
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    let qmax = ((1i64 << total_bits) - 1) as f64;
    quantize_with(block, qmax)
}

fn quantize_with(block: &Matrix, qmax: f64) -> Result<(IntMatrix, f64)> {
    let peak = block.max_abs();
    let scale = if peak == 0.0 { 1.0 } else { peak / qmax };
    let data = block
        .data()
        .iter()
        .map(|&v| ((v / scale).round()).clamp(-qmax, qmax) as i64)
        .collect();
    Ok((
        IntMatrix {
            rows: block.rows(),
            cols: block.cols(),
            data,
        },
        scale,
    ))
}

/// `floor(log2(|x|))` for finite nonzero `x`, computed from the bit pattern.
pub(crate) fn binary_exponent(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let field = ((bits >> 52) & 0x7ff) as i32;
    if field == 0 {
        // Subnormal: normalise by 2^64 first.
        binary_exponent(x * 2f64.powi(64)) - 64
    } else {
        field - 1023
    }
}

/// Block aligned to one shared exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrealignedBlock {
    pub codes: IntMatrix,
    /// Largest binary exponent among the entries (after overflow adjustment).
    pub shared_exponent: i32,
    /// Value of one code step, `2^(shared_exponent - (effective_bits - 2))`.
    pub scale: f64,
}

/// Aligns every entry to the block's largest binary exponent.
///
/// Codes are signed `effective_bits` two's-complement integers. The largest
/// magnitude lands in `[2^(B-2), 2^(B-1))`; if rounding pushes it to
/// `2^(B-1)` the shared exponent is raised by one so the half-step error
/// bound still holds.
pub fn prealign_block_fp(block: &Matrix, effective_bits: u32) -> Result<PrealignedBlock> {
    if !(2..=MAX_TOTAL_BITS).contains(&effective_bits) {
        return Err(Error::param("effective_bits", format!("must be in 2..={MAX_TOTAL_BITS}")));
    }
    check_finite(block, "prealign_block_fp")?;
    let peak = block.max_abs();
    if peak == 0.0 {
        return Ok(PrealignedBlock {
            codes: IntMatrix::zeros(block.rows(), block.cols()),
            shared_exponent: 0,
            scale: 1.0,
        });
    }
    let limit = (1i64 << (effective_bits - 1)) - 1;
    let mut e_max = binary_exponent(peak);
    loop {
        let scale_exp = e_max - (effective_bits as i32 - 2);
        let inv = 2f64.powi(-scale_exp);
        let data: Vec<i64> = block.data().iter().map(|&v| (v * inv).round() as i64).collect();
        if data.iter().all(|&a| a >= -limit - 1 && a <= limit) {
            return Ok(PrealignedBlock {
                codes: IntMatrix {
                    rows: block.rows(),
                    cols: block.cols(),
                    data,
                },
                shared_exponent: e_max,
                scale: 2f64.powi(scale_exp),
            });
        }
        e_max += 1;
    }
}

/// Integer codes of a block plus the factor that maps them back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBlock {
    pub codes: IntMatrix,
    pub scale: f64,
    pub shared_exponent: Option<i32>,
}

/// Quantizes or pre-aligns `block` according to `scheme`.
pub fn encode_block(block: &Matrix, scheme: &SliceScheme) -> Result<EncodedBlock> {
    match scheme.format() {
        SchemeFormat::Int { bits } => {
            let (codes, scale) = if scheme.signed() {
                quantize_block_int(block, bits)?
            } else {
                quantize_block_uint(block, bits)?
            };
            Ok(EncodedBlock {
                codes,
                scale,
                shared_exponent: None,
            })
        }
        SchemeFormat::Fp { .. } => {
            let p = prealign_block_fp(block, scheme.effective_bits())?;
            Ok(EncodedBlock {
                codes: p.codes,
                scale: p.scale,
                shared_exponent: Some(p.shared_exponent),
            })
        }
    }
}

/// One bit field of a code matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub width: u32,
    pub significance: i64,
    /// Row-major field values in `[0, 2^width - 1]`.
    pub values: Vec<u32>,
}

/// Splits codes into the scheme's bit fields, most significant first.
pub fn slice_signed(q: &IntMatrix, scheme: &SliceScheme) -> Result<Vec<Slice>> {
    let (lo, hi) = scheme.code_range();
    if let Some(&bad) = q.data.iter().find(|&&v| v < lo || v > hi) {
        return Err(Error::Overflow {
            value: bad,
            bits: scheme.total_bits(),
        });
    }
    let total = scheme.total_bits();
    let mask_all: u64 = if total == 64 { u64::MAX } else { (1u64 << total) - 1 };
    let sigs = scheme.significances();
    let mut shift = total;
    let mut out = Vec::with_capacity(scheme.num_slices());
    for (&w, &significance) in scheme.widths().iter().zip(&sigs) {
        shift -= w;
        let field_mask = (1u64 << w) - 1;
        let values = q
            .data
            .iter()
            .map(|&v| (((v as u64) & mask_all) >> shift & field_mask) as u32)
            .collect();
        out.push(Slice {
            width: w,
            significance,
            values,
        });
    }
    Ok(out)
}

/// Rebuilds integer codes from slices.
pub fn unslice(slices: &[Slice], rows: usize, cols: usize) -> IntMatrix {
    let mut out = IntMatrix::zeros(rows, cols);
    for s in slices {
        for (o, &v) in out.data.iter_mut().zip(&s.values) {
            *o += s.significance * i64::from(v);
        }
    }
    out
}

/// Integer dot results for every (input slice, weight slice) pair of one block product.
#[derive(Debug, Clone)]
pub struct PairResults {
    n_in: usize,
    n_w: usize,
    len: usize,
    results: Vec<Option<Vec<i64>>>,
}

impl PairResults {
    pub fn new(n_in: usize, n_w: usize, len: usize) -> Self {
        Self {
            n_in,
            n_w,
            len,
            results: vec![None; n_in * n_w],
        }
    }

    pub fn set(&mut self, input: usize, weight: usize, values: Vec<i64>) -> Result<()> {
        if values.len() != self.len {
            return Err(Error::dims(
                "PairResults::set",
                format!("{} values, expected {}", values.len(), self.len),
            ));
        }
        self.results[input * self.n_w + weight] = Some(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Shift-and-add over slice pairs: `sum_ij s_in[i] * s_w[j] * R_ij`, exact.
pub fn recombine(pairs: &PairResults, input_significances: &[i64], weight_significances: &[i64]) -> Result<Vec<i128>> {
    if input_significances.len() != pairs.n_in || weight_significances.len() != pairs.n_w {
        return Err(Error::dims(
            "recombine",
            format!(
                "{}x{} significances for {}x{} pairs",
                input_significances.len(),
                weight_significances.len(),
                pairs.n_in,
                pairs.n_w
            ),
        ));
    }
    let mut acc = vec![0i128; pairs.len];
    for (i, &si) in input_significances.iter().enumerate() {
        for (j, &sw) in weight_significances.iter().enumerate() {
            let r = pairs.results[i * pairs.n_w + j]
                .as_ref()
                .ok_or(Error::MissingPair { input: i, weight: j })?;
            let weight = i128::from(si) * i128::from(sw);
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += weight * i128::from(v);
            }
        }
    }
    Ok(acc)
}

/// Applies the input and weight block scales to recombined integers.
pub fn descale(values: &[i128], input_scale: f64, weight_scale: f64) -> Vec<f64> {
    let s = input_scale * weight_scale;
    values.iter().map(|&v| v as f64 * s).collect()
}

/// One encoded and sliced block.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedBlock {
    pub scale: f64,
    pub shared_exponent: Option<i32>,
    pub slices: Vec<Slice>,
}

/// A whole matrix tiled, encoded per block and sliced.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedBlockMatrix {
    pub plan: BlockPlan,
    pub scheme: SliceScheme,
    pub blocks: Vec<SlicedBlock>,
}

impl SlicedBlockMatrix {
    pub fn build(x: &Matrix, scheme: &SliceScheme, l_blk_m: usize, l_blk_n: usize) -> Result<Self> {
        let (plan, raw) = partition_blocks(x, l_blk_m, l_blk_n)?;
        let blocks = raw
            .iter()
            .map(|b| {
                let enc = encode_block(b, scheme)?;
                Ok(SlicedBlock {
                    scale: enc.scale,
                    shared_exponent: enc.shared_exponent,
                    slices: slice_signed(&enc.codes, scheme)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan,
            scheme: scheme.clone(),
            blocks,
        })
    }

    /// Real matrix represented by the codes (quantized/aligned `x`).
    pub fn reconstruct(&self) -> Result<Matrix> {
        let blocks: Vec<Matrix> = self
            .blocks
            .iter()
            .map(|b| unslice(&b.slices, self.plan.l_blk_m, self.plan.l_blk_n).to_matrix(b.scale))
            .collect();
        reassemble_blocks(&self.plan, &blocks)
    }
}
