//! Forward-only attention blocks: multi-head attention, confidence-aware
//! cross attention, the encoder block with FFN and attribute refinement, and
//! the dual-stream temporal step that shares one weight bundle.
//!
//! Weights are not trained here. [`EncoderWeights::init`] fills every matrix
//! from a seeded ChaCha8 stream so runs and fixtures are reproducible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::batch::PrimitiveBatch;
use crate::conf::ConfidenceConfig;
use crate::error::{invalid, Error, Result};
use crate::gaussian::{GaussianPrimitive, MIN_SCALE};
use crate::geometry::{Quat, Vec3};
use crate::grid::{as_format, eof_as_format};
use crate::scalar::{logit, sigmoid, Real};

pub const WTS_MAGIC: &[u8; 4] = b"TGSW";
pub const WTS_VERSION: u32 = 1;

/// Width of the refinement head output: Δμ (3), Δlog s (3), Δq (4),
/// Δlogit a (1), Δc (C-1).
pub fn refinement_width(classes: usize) -> usize {
    3 + 3 + 4 + 1 + (classes - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Real> {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub classes: usize,
    pub seed: u64,
    pub w_q: DMatrix<T>,
    pub w_k: DMatrix<T>,
    pub w_v: DMatrix<T>,
    pub w_o: DMatrix<T>,
    pub ffn_in: DMatrix<T>,
    pub ffn_in_bias: RowDVector<T>,
    pub ffn_out: DMatrix<T>,
    pub ffn_out_bias: RowDVector<T>,
    pub refine: DMatrix<T>,
    pub refine_bias: RowDVector<T>,
}

fn check_dims(d_model: usize, n_heads: usize, d_ff: usize, classes: usize) -> Result<()> {
    if d_model == 0 || n_heads == 0 || d_ff == 0 {
        return invalid("encoder dims must be positive");
    }
    if !d_model.is_multiple_of(n_heads) {
        return invalid(format!("d_model {d_model} not divisible by n_heads {n_heads}"));
    }
    if classes < 2 {
        return invalid("need at least one occupied class");
    }
    Ok(())
}

impl<T: Real> EncoderWeights<T> {
    /// Deterministic initialization.
    ///
    /// One ChaCha8 stream seeded with `seed` fills, in order, `w_q`, `w_k`,
    /// `w_v`, `w_o`, `ffn_in`, `ffn_out`, `refine`, each row-major. Every
    /// entry is `(2u - 1) / sqrt(d_model)` for `u` a uniform `f32` in
    /// `[0, 1)`, evaluated in `f32` so the weights are exactly representable
    /// in the `.wts` file. Biases start at zero.
    pub fn init(d_model: usize, n_heads: usize, d_ff: usize, classes: usize, seed: u64) -> Result<Self> {
        check_dims(d_model, n_heads, d_ff, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0f32 / (d_model as f32).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let vals: Vec<T> = (0..rows * cols)
                .map(|_| {
                    let u: f32 = rng.random();
                    T::of_f32((2.0 * u - 1.0) * scale)
                })
                .collect();
            DMatrix::from_row_slice(rows, cols, &vals)
        };
        let rw = refinement_width(classes);
        let w_q = draw(d_model, d_model);
        let w_k = draw(d_model, d_model);
        let w_v = draw(d_model, d_model);
        let w_o = draw(d_model, d_model);
        let ffn_in = draw(d_model, d_ff);
        let ffn_out = draw(d_ff, d_model);
        let refine = draw(d_model, rw);
        Ok(Self {
            d_model,
            n_heads,
            d_ff,
            classes,
            seed,
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_in,
            ffn_in_bias: RowDVector::zeros(d_ff),
            ffn_out,
            ffn_out_bias: RowDVector::zeros(d_model),
            refine,
            refine_bias: RowDVector::zeros(rw),
        })
    }

    /// Zeroes the refinement head so blocks update features only.
    pub fn without_refinement(mut self) -> Self {
        self.refine.fill(T::zero());
        self.refine_bias.fill(T::zero());
        self
    }

    fn matrices(&self) -> [&DMatrix<T>; 7] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ffn_in, &self.ffn_out, &self.refine]
    }

    /// Row-major f32 payload in file order.
    fn payload(&self) -> Vec<f32> {
        let mut out = Vec::new();
        let push_mat = |out: &mut Vec<f32>, m: &DMatrix<T>| {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)].as_f32());
                }
            }
        };
        let push_row = |out: &mut Vec<f32>, v: &RowDVector<T>| out.extend(v.iter().map(|x| x.as_f32()));
        push_mat(&mut out, &self.w_q);
        push_mat(&mut out, &self.w_k);
        push_mat(&mut out, &self.w_v);
        push_mat(&mut out, &self.w_o);
        push_mat(&mut out, &self.ffn_in);
        push_row(&mut out, &self.ffn_in_bias);
        push_mat(&mut out, &self.ffn_out);
        push_row(&mut out, &self.ffn_out_bias);
        push_mat(&mut out, &self.refine);
        push_row(&mut out, &self.refine_bias);
        out
    }

    /// Little-endian bytes of the f32 payload (no header).
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.payload().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.iter().all(|v| v.finite()))
            && [&self.ffn_in_bias, &self.ffn_out_bias, &self.refine_bias]
                .iter()
                .all(|b| b.iter().all(|v| v.finite()))
    }

    /// `.wts`: magic `TGSW`, version u32, d_model/n_heads/d_ff/classes as
    /// u32, seed u64, then the f32 payload in the order `w_q, w_k, w_v, w_o,
    /// ffn_in, ffn_in_bias, ffn_out, ffn_out_bias, refine, refine_bias`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(WTS_MAGIC)?;
        w.write_u32::<LittleEndian>(WTS_VERSION)?;
        for d in [self.d_model, self.n_heads, self.d_ff, self.classes] {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u64::<LittleEndian>(self.seed)?;
        for v in self.payload() {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof_as_format)?;
        if &magic != WTS_MAGIC {
            return Err(Error::Format(format!("bad wts magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof_as_format)?;
        if version != WTS_VERSION {
            return Err(Error::Format(format!("unsupported wts version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(eof_as_format)? as usize;
        }
        let [d_model, n_heads, d_ff, classes] = dims;
        check_dims(d_model, n_heads, d_ff, classes).map_err(as_format)?;
        let seed = r.read_u64::<LittleEndian>().map_err(eof_as_format)?;
        let mut next_mat = |rows: usize, cols: usize| -> Result<DMatrix<T>> {
            let mut vals = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                vals.push(T::of_f32(r.read_f32::<LittleEndian>().map_err(eof_as_format)?));
            }
            Ok(DMatrix::from_row_slice(rows, cols, &vals))
        };
        let rw = refinement_width(classes);
        let w_q = next_mat(d_model, d_model)?;
        let w_k = next_mat(d_model, d_model)?;
        let w_v = next_mat(d_model, d_model)?;
        let w_o = next_mat(d_model, d_model)?;
        let ffn_in = next_mat(d_model, d_ff)?;
        let ffn_in_bias = next_mat(1, d_ff)?;
        let ffn_out = next_mat(d_ff, d_model)?;
        let ffn_out_bias = next_mat(1, d_model)?;
        let refine = next_mat(d_model, rw)?;
        let refine_bias = next_mat(1, rw)?;
        let row = |m: DMatrix<T>| RowDVector::from_iterator(m.ncols(), m.iter().copied());
        Ok(Self {
            d_model,
            n_heads,
            d_ff,
            classes,
            seed,
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_in,
            ffn_in_bias: row(ffn_in_bias),
            ffn_out,
            ffn_out_bias: row(ffn_out_bias),
            refine,
            refine_bias: row(refine_bias),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Column-wise max-subtracted softmax in place; columns are contiguous.
fn softmax_columns<T: Real>(m: &mut DMatrix<T>) {
    let rows = m.nrows();
    for col in m.as_mut_slice().chunks_exact_mut(rows) {
        let max = col.iter().copied().fold(col[0], |a, b| a.max(b));
        let mut sum = T::zero();
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in col.iter_mut() {
            *v *= inv;
        }
    }
}

/// Multi-head attention without output projection: per head
/// `softmax(Q_h K_hᵀ / sqrt(d/h)) V_h`, heads concatenated.
pub fn mha<T: Real>(q: &DMatrix<T>, k: &DMatrix<T>, v: &DMatrix<T>, n_heads: usize) -> Result<DMatrix<T>> {
    let d = q.ncols();
    if k.nrows() == 0 {
        return invalid("attention over an empty key set");
    }
    if k.ncols() != d || v.ncols() != d || k.nrows() != v.nrows() {
        return invalid(format!(
            "attention shape mismatch: Q {}x{}, K {}x{}, V {}x{}",
            q.nrows(),
            d,
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        ));
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return invalid(format!("width {d} not divisible by {n_heads} heads"));
    }
    let dh = d / n_heads;
    let inv_sqrt = T::one() / T::of_usize(dh).sqrt();
    let mut out = DMatrix::zeros(q.nrows(), d);
    for h in 0..n_heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        // scores stored transposed (keys × queries) so each query's softmax is contiguous
        let mut scores = kh * qh.transpose() * inv_sqrt;
        softmax_columns(&mut scores);
        out.columns_mut(h * dh, dh).copy_from(&(vh.transpose() * scores).transpose());
    }
    Ok(out)
}

fn scale_rows<T: Real>(m: &mut DMatrix<T>, by: &[T]) {
    for (mut row, &s) in m.row_iter_mut().zip(by) {
        row *= s;
    }
}

/// Confidence-aware cross attention on raw feature matrices:
/// `(MHA(F_q W_q, F_kv W_k, (F_kv W_v) ⊙ c_kv) ⊙ c_q) W_o`.
pub fn cca_features<T: Real>(
    query: &DMatrix<T>,
    query_conf: &[T],
    keyval: &DMatrix<T>,
    keyval_conf: &[T],
    w: &EncoderWeights<T>,
) -> Result<DMatrix<T>> {
    if query.ncols() != w.d_model || keyval.ncols() != w.d_model {
        return invalid(format!("feature width must be {}", w.d_model));
    }
    if query.nrows() != query_conf.len() || keyval.nrows() != keyval_conf.len() {
        return invalid("confidence count does not match feature rows");
    }
    if query.nrows() == 0 || keyval.nrows() == 0 {
        return invalid("cross attention needs nonempty batches");
    }
    let q = query * &w.w_q;
    let k = keyval * &w.w_k;
    let mut v = keyval * &w.w_v;
    scale_rows(&mut v, keyval_conf);
    let mut heads = mha(&q, &k, &v, w.n_heads)?;
    scale_rows(&mut heads, query_conf);
    Ok(heads * &w.w_o)
}

pub fn cca<T: Real>(query: &PrimitiveBatch<T>, keyval: &PrimitiveBatch<T>, w: &EncoderWeights<T>) -> Result<DMatrix<T>> {
    cca_features(&query.features, &query.confidences, &keyval.features, &keyval.confidences, w)
}

fn add_row_bias<T: Real>(m: &mut DMatrix<T>, bias: &RowDVector<T>) {
    for mut row in m.row_iter_mut() {
        row += bias;
    }
}

/// `relu(x W_in + b_in) W_out + b_out`
pub fn ffn<T: Real>(x: &DMatrix<T>, w: &EncoderWeights<T>) -> DMatrix<T> {
    let mut hidden = x * &w.ffn_in;
    add_row_bias(&mut hidden, &w.ffn_in_bias);
    hidden.apply(|v| *v = v.max(T::zero()));
    let mut out = hidden * &w.ffn_out;
    add_row_bias(&mut out, &w.ffn_out_bias);
    out
}

const OPACITY_EPS: f64 = 1e-6;

/// Applies one row of refinement deltas. Attributes whose deltas are all
/// exactly zero are left untouched.
fn refine_primitive<T: Real>(g: &GaussianPrimitive<T>, delta: &[T]) -> GaussianPrimitive<T> {
    let zero = |s: &[T]| s.iter().all(|v| *v == T::zero());
    let mut out = g.clone();
    if !zero(&delta[0..3]) {
        out.mean += Vec3::new(delta[0], delta[1], delta[2]);
    }
    if !zero(&delta[3..6]) {
        for a in 0..3 {
            out.scale[a] = (g.scale[a].ln() + delta[3 + a]).exp().max(T::lit(MIN_SCALE));
        }
    }
    if !zero(&delta[6..10]) {
        let q = g.rotation.add(&Quat([delta[6], delta[7], delta[8], delta[9]]));
        if let Ok(n) = q.normalized() {
            out.rotation = n;
        }
    }
    if delta[10] != T::zero() {
        let eps = T::lit(OPACITY_EPS);
        let a = g.opacity.max(eps).min(T::one() - eps);
        out.opacity = sigmoid(logit(a) + delta[10]);
    }
    for (c, &d) in out.logits.iter_mut().zip(&delta[11..]) {
        *c += d;
    }
    out
}

/// One temporal encoder block: CCA + residual, FFN + residual, then the
/// refinement head turns the features into additive attribute deltas.
/// Confidences are recomputed from the refined primitives.
pub fn temporal_encoder_block<T: Real>(
    query: &PrimitiveBatch<T>,
    keyval: &PrimitiveBatch<T>,
    w: &EncoderWeights<T>,
    conf: &ConfidenceConfig,
) -> Result<PrimitiveBatch<T>> {
    if let Some(g) = query.primitives.iter().chain(&keyval.primitives).find(|g| g.num_classes() != w.classes) {
        return invalid(format!("primitive has {} classes, weights expect {}", g.num_classes(), w.classes));
    }
    let attended = cca(query, keyval, w)?;
    let x1 = &query.features + attended;
    let x2 = &x1 + ffn(&x1, w);
    let mut deltas = &x2 * &w.refine;
    add_row_bias(&mut deltas, &w.refine_bias);
    let primitives = query
        .primitives
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let row: Vec<T> = deltas.row(i).iter().copied().collect();
            refine_primitive(g, &row)
        })
        .collect();
    PrimitiveBatch::with_confidence(primitives, x2, conf)
}

/// Dual-stream temporal step with shared weights.
///
/// Stream A refines `current` attending to `history`, stream B the reverse;
/// both read the previous block's outputs. With an empty history the step
/// degenerates to self-attention over `current` and returns an empty history.
pub fn dte_step<T: Real>(
    current: &PrimitiveBatch<T>,
    history: &PrimitiveBatch<T>,
    w: &EncoderWeights<T>,
    n_blocks: usize,
    conf: &ConfidenceConfig,
) -> Result<(PrimitiveBatch<T>, PrimitiveBatch<T>)> {
    if current.is_empty() {
        return invalid("temporal step needs a nonempty current batch");
    }
    let mut cur = current.clone();
    if history.is_empty() {
        for _ in 0..n_blocks {
            cur = temporal_encoder_block(&cur, &cur, w, conf)?;
        }
        return Ok((cur, PrimitiveBatch::empty(current.d_model())));
    }
    let mut hist = history.clone();
    for _ in 0..n_blocks {
        let next_cur = temporal_encoder_block(&cur, &hist, w, conf)?;
        let next_hist = temporal_encoder_block(&hist, &cur, w, conf)?;
        cur = next_cur;
        hist = next_hist;
    }
    Ok((cur, hist))
}
