//! Digitization path: learnable codebook with nearest-neighbor mapping,
//! straight-through gradients, VQ/commitment losses, exponential-moving-
//! average codebook updates, and the 8-bit scalar baseline.

use crate::autodiff::{Tape, VarId};
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum QuantizerError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Number of consecutive starved updates before a codeword is re-seeded.
pub const DEAD_CODE_PATIENCE: usize = 100;

/// Learnable codeword table with EMA statistics.
#[derive(Clone, Debug)]
pub struct Codebook {
    /// `K x d` codewords.
    pub entries: Array2<f64>,
    /// Decayed assignment counts, one per codeword.
    pub ema_counts: Array1<f64>,
    /// Decayed assigned-vector sums, `K x d`.
    pub ema_sums: Array2<f64>,
    /// EMA decay factor.
    pub decay: f64,
    /// Laplace smoothing constant for the count normalization.
    pub smoothing: f64,
    /// Consecutive updates each codeword has spent starved.
    dead_streak: Vec<usize>,
    /// Stream for dead-code re-seeding.
    rng: ChaCha8Rng,
    seed: u64,
}

impl Codebook {
    /// Standard-Gaussian entries scaled by `1/sqrt(d)`; EMA state starts
    /// consistent (`counts = 1`, `sums = entries`), deterministic per seed.
    pub fn init(k: usize, dim: usize, seed: u64) -> Self {
        assert!(k >= 2, "codebook needs at least 2 entries");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let entries = Array2::from_shape_fn((k, dim), |_| {
            // Box-Muller from two uniforms
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
        });
        Codebook {
            ema_counts: Array1::ones(k),
            ema_sums: entries.clone(),
            entries,
            decay: 0.99,
            smoothing: 1e-5,
            dead_streak: vec![0; k],
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xdead_c0de),
            seed,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn codeword(&self, index: usize) -> Array2<f64> {
        self.entries.row(index).insert_axis(ndarray::Axis(0)).to_owned()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Outcome of nearest-neighbor quantization of one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub index: usize,
    /// The selected codeword as a `1 x d` row.
    pub codeword: Array2<f64>,
    /// The pre-quantization input, kept for the commitment term.
    pub commit_input: Array2<f64>,
}

/// Nearest codeword by Euclidean distance, ties to the lowest index.
pub fn quantize(x: &Array2<f64>, codebook: &Codebook) -> QuantizationResult {
    assert_eq!(x.nrows(), 1, "quantize expects a single row");
    assert_eq!(
        x.ncols(),
        codebook.dim(),
        "query dim {} != codebook dim {}",
        x.ncols(),
        codebook.dim()
    );
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (k, row) in codebook.entries.rows().into_iter().enumerate() {
        let dist: f64 = x
            .row(0)
            .iter()
            .zip(row.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    QuantizationResult {
        index: best,
        codeword: codebook.codeword(best),
        commit_input: x.clone(),
    }
}

/// Forward the codeword, backward the identity: the returned node carries
/// the value of `codeword`, and gradients flow unchanged into `x`. No
/// gradient reaches the codeword node.
pub fn straight_through(tape: &mut Tape, x: VarId, codeword: VarId) -> VarId {
    let delta = tape.sub(codeword, x);
    let delta = tape.detach(delta);
    tape.add(x, delta)
}

/// Squared-distance codebook and commitment losses as tape nodes:
/// `L_vq = ||sg[x] - e||^2` (gradient reaches the codeword only) and
/// `L_cm = ||x - sg[e]||^2` (gradient reaches the encoder side only).
pub fn vq_losses(tape: &mut Tape, x: VarId, codeword: VarId) -> (VarId, VarId) {
    let x_stopped = tape.detach(x);
    let diff_vq = tape.sub(x_stopped, codeword);
    let sq_vq = tape.square(diff_vq);
    let l_vq = tape.sum_all(sq_vq);

    let e_stopped = tape.detach(codeword);
    let diff_cm = tape.sub(x, e_stopped);
    let sq_cm = tape.square(diff_cm);
    let l_cm = tape.sum_all(sq_cm);
    (l_vq, l_cm)
}

impl Codebook {
    /// One EMA step over an assigned batch. Counts and sums decay toward
    /// the batch statistics; entries are the smoothed ratio. Codewords
    /// starved for [`DEAD_CODE_PATIENCE`] consecutive updates are re-seeded
    /// from a random batch vector.
    pub fn ema_update(&mut self, batch: &Array2<f64>, indices: &[usize]) {
        assert_eq!(batch.nrows(), indices.len(), "one index per batch row");
        let k = self.size();
        let gamma = self.decay;
        let mut counts = vec![0f64; k];
        let mut sums = Array2::zeros((k, self.dim()));
        for (row, &idx) in batch.rows().into_iter().zip(indices) {
            assert!(idx < k, "index {idx} outside codebook of size {k}");
            counts[idx] += 1.0;
            let mut target = sums.row_mut(idx);
            target += &row;
        }
        for ki in 0..k {
            self.ema_counts[ki] = gamma * self.ema_counts[ki] + (1.0 - gamma) * counts[ki];
        }
        self.ema_sums = gamma * &self.ema_sums + (1.0 - gamma) * &sums;

        let total: f64 = self.ema_counts.sum();
        let lambda = self.smoothing;
        for ki in 0..k {
            let smoothed =
                (self.ema_counts[ki] + lambda) * total / (total + k as f64 * lambda);
            let mut row = self.entries.row_mut(ki);
            for (e, m) in row.iter_mut().zip(self.ema_sums.row(ki)) {
                *e = m / smoothed;
            }
        }

        for ki in 0..k {
            if self.ema_counts[ki] < self.smoothing {
                self.dead_streak[ki] += 1;
            } else {
                self.dead_streak[ki] = 0;
            }
            if self.dead_streak[ki] >= DEAD_CODE_PATIENCE && batch.nrows() > 0 {
                let pick = self.rng.random_range(0..batch.nrows());
                self.entries.row_mut(ki).assign(&batch.row(pick));
                self.ema_sums.row_mut(ki).assign(&batch.row(pick));
                self.ema_counts[ki] = 1.0;
                self.dead_streak[ki] = 0;
            }
        }
    }
}

/// Split a `1 x d` row into `chunks` equal sub-vectors and quantize each
/// against the shared codebook (whose dim must be `d / chunks`).
pub fn quantize_chunks(
    x: &Array2<f64>,
    codebook: &Codebook,
    chunks: usize,
) -> Result<Vec<QuantizationResult>, QuantizerError> {
    let d = x.ncols();
    if chunks == 0 || !d.is_multiple_of(chunks) {
        return Err(QuantizerError::Argument(format!(
            "cannot split dim {d} into {chunks} equal chunks"
        )));
    }
    let sub = d / chunks;
    if codebook.dim() != sub {
        return Err(QuantizerError::Argument(format!(
            "codebook dim {} != chunk dim {sub}",
            codebook.dim()
        )));
    }
    Ok((0..chunks)
        .map(|c| {
            let part = x.slice(s![.., c * sub..(c + 1) * sub]).to_owned();
            quantize(&part, codebook)
        })
        .collect())
}

/// Reassemble a `1 x d` row from per-chunk codeword indices.
pub fn dequantize_indices(
    indices: &[usize],
    codebook: &Codebook,
) -> Result<Array2<f64>, QuantizerError> {
    let sub = codebook.dim();
    let mut out = Array2::zeros((1, sub * indices.len()));
    for (c, &idx) in indices.iter().enumerate() {
        if idx >= codebook.size() {
            return Err(QuantizerError::Argument(format!(
                "index {idx} outside codebook of size {}",
                codebook.size()
            )));
        }
        out.slice_mut(s![.., c * sub..(c + 1) * sub])
            .assign(&codebook.entries.row(idx));
    }
    Ok(out)
}

/// Uniform 256-level quantization per dimension with clamping. Bins have
/// width `(hi - lo) / 256`; values at `hi` land in the top bin.
pub fn scalar_quantize_8bit(
    x: &Array2<f64>,
    lo: f64,
    hi: f64,
) -> Result<Vec<u8>, QuantizerError> {
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(QuantizerError::Argument(format!("range [{lo}, {hi}] is empty")));
    }
    let width = (hi - lo) / 256.0;
    Ok(x.iter()
        .map(|&v| {
            let bin = ((v - lo) / width).floor();
            bin.clamp(0.0, 255.0) as u8
        })
        .collect())
}

/// Inverse of [`scalar_quantize_8bit`]: bin centers.
pub fn scalar_dequantize_8bit(
    symbols: &[u8],
    lo: f64,
    hi: f64,
) -> Result<Array2<f64>, QuantizerError> {
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(QuantizerError::Argument(format!("range [{lo}, {hi}] is empty")));
    }
    let width = (hi - lo) / 256.0;
    let data: Vec<f64> = symbols.iter().map(|&s| lo + (s as f64 + 0.5) * width).collect();
    Ok(Array2::from_shape_vec((1, data.len()), data).expect("row shape"))
}
