// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoder.
//!
//! Encoding computes `z = TopK(ReLU(W_enc (x - b_pre) + b_enc))`, decoding
//! computes `x_hat = W_dec z + b_dec`. Steering clamps one latent of the
//! dense pre-TopK vector and then re-runs the TopK selection, so a clamp
//! only survives when it ranks among the `k` largest entries.
//!
//! Parameters are stored as f32. Dot products accumulate in f64.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg;

const PARAM_MAGIC: &[u8; 8] = b"SAEPRM1\0";
const PARAM_VERSION: u32 = 1;

/// Learned dictionary and biases of a TopK SAE.
///
/// `w_enc` is `d_s x d_l` row-major. The decoder is kept as `d_s` contiguous
/// atoms of length `d_l` (atom `j` is column `j` of `W_dec`), which keeps
/// sparse decoding cache friendly; the file format still stores `W_dec`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    d_l: usize,
    d_s: usize,
    k: usize,
    pub(crate) w_enc: Vec<f32>,
    pub(crate) b_pre: Vec<f32>,
    pub(crate) b_enc: Vec<f32>,
    pub(crate) atoms: Vec<f32>,
    pub(crate) b_dec: Vec<f32>,
}

impl SaeParams {
    /// All-zero parameters.
    pub fn zeros(d_l: usize, d_s: usize, k: usize) -> Result<Self> {
        check_dims(d_l, d_s, k)?;
        Ok(Self {
            d_l,
            d_s,
            k,
            w_enc: vec![0.0; d_s * d_l],
            b_pre: vec![0.0; d_l],
            b_enc: vec![0.0; d_s],
            atoms: vec![0.0; d_s * d_l],
            b_dec: vec![0.0; d_l],
        })
    }

    /// Builds parameters from the textbook layout: `w_enc` is `d_s x d_l`
    /// row-major, `w_dec` is `d_l x d_s` row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d_l: usize,
        d_s: usize,
        k: usize,
        w_enc: Vec<f32>,
        b_pre: Vec<f32>,
        b_enc: Vec<f32>,
        w_dec: Vec<f32>,
        b_dec: Vec<f32>,
    ) -> Result<Self> {
        check_dims(d_l, d_s, k)?;
        if w_dec.len() != d_l * d_s {
            return Err(Error::invalid(format!(
                "w_dec has {} entries, expected {}",
                w_dec.len(),
                d_l * d_s
            )));
        }
        let atoms = transpose(&w_dec, d_l, d_s);
        let p = Self {
            d_l,
            d_s,
            k,
            w_enc,
            b_pre,
            b_enc,
            atoms,
            b_dec,
        };
        p.validate()?;
        Ok(p)
    }

    /// Input (host hidden) dimension.
    pub fn d_model(&self) -> usize {
        self.d_l
    }

    /// Number of latents.
    pub fn d_sae(&self) -> usize {
        self.d_s
    }

    /// TopK sparsity.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Returns a copy with a different sparsity level.
    pub fn with_k(mut self, k: usize) -> Result<Self> {
        check_dims(self.d_l, self.d_s, k)?;
        self.k = k;
        Ok(self)
    }

    pub fn encoder_row(&self, j: usize) -> &[f32] {
        &self.w_enc[j * self.d_l..(j + 1) * self.d_l]
    }

    pub fn encoder_row_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.w_enc[j * self.d_l..(j + 1) * self.d_l]
    }

    /// Dictionary direction of feature `j` (column `j` of `W_dec`).
    pub fn decoder_column(&self, j: usize) -> &[f32] {
        &self.atoms[j * self.d_l..(j + 1) * self.d_l]
    }

    pub fn decoder_column_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.atoms[j * self.d_l..(j + 1) * self.d_l]
    }

    pub fn b_pre(&self) -> &[f32] {
        &self.b_pre
    }
    pub fn b_pre_mut(&mut self) -> &mut [f32] {
        &mut self.b_pre
    }
    pub fn b_enc(&self) -> &[f32] {
        &self.b_enc
    }
    pub fn b_enc_mut(&mut self) -> &mut [f32] {
        &mut self.b_enc
    }
    pub fn b_dec(&self) -> &[f32] {
        &self.b_dec
    }
    pub fn b_dec_mut(&mut self) -> &mut [f32] {
        &mut self.b_dec
    }

    /// `W_dec` as a `d_l x d_s` row-major matrix.
    pub fn w_dec_row_major(&self) -> Vec<f32> {
        transpose(&self.atoms, self.d_s, self.d_l)
    }

    /// Checks shapes, `1 <= k <= d_s` and finiteness.
    pub fn validate(&self) -> Result<()> {
        check_dims(self.d_l, self.d_s, self.k)?;
        let shapes = [
            ("w_enc", self.w_enc.len(), self.d_s * self.d_l),
            ("b_pre", self.b_pre.len(), self.d_l),
            ("b_enc", self.b_enc.len(), self.d_s),
            ("w_dec", self.atoms.len(), self.d_s * self.d_l),
            ("b_dec", self.b_dec.len(), self.d_l),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::invalid(format!("{name} has {got} entries, expected {want}")));
            }
        }
        for (name, v) in [
            ("w_enc", &self.w_enc),
            ("b_pre", &self.b_pre),
            ("b_enc", &self.b_enc),
            ("w_dec", &self.atoms),
            ("b_dec", &self.b_dec),
        ] {
            if !linalg::all_finite(v) {
                return Err(Error::invalid(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// Serialises to the `SAEPRM1` binary layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(40 + 8 * self.d_s * self.d_l);
        w.bytes(PARAM_MAGIC);
        w.u32(PARAM_VERSION);
        w.u32(binio::to_u32(self.d_l, "d_l")?);
        w.u32(binio::to_u32(self.d_s, "d_s")?);
        w.u32(binio::to_u32(self.k, "k")?);
        w.end_header();
        w.f32s(&self.w_enc);
        w.f32s(&self.b_pre);
        w.f32s(&self.b_enc);
        w.f32s(&self.w_dec_row_major());
        w.f32s(&self.b_dec);
        Ok(w.finish())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "parameter file");
        r.preamble(PARAM_MAGIC, PARAM_VERSION)?;
        let d_l = r.u32()? as usize;
        let d_s = r.u32()? as usize;
        let k = r.u32()? as usize;
        let header_end = r.offset();
        check_dims(d_l, d_s, k).map_err(|e| Error::format(12, e.to_string()))?;
        let floats = (2 * d_s * d_l + 2 * d_l + d_s) as u64;
        r.expect_body_and_trailer(floats * 4)?;
        let w_enc = r.f32s(d_s * d_l)?;
        let b_pre = r.f32s(d_l)?;
        let b_enc = r.f32s(d_s)?;
        let w_dec = r.f32s(d_l * d_s)?;
        let b_dec = r.f32s(d_l)?;
        Self::new(d_l, d_s, k, w_enc, b_pre, b_enc, w_dec, b_dec).map_err(|e| Error::format(header_end, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

fn check_dims(d_l: usize, d_s: usize, k: usize) -> Result<()> {
    if d_l == 0 || d_s == 0 {
        return Err(Error::invalid(format!(
            "dimensions must be positive (d_l={d_l}, d_s={d_s})"
        )));
    }
    if k < 1 || k > d_s {
        return Err(Error::invalid(format!("k={k} must satisfy 1 <= k <= d_s={d_s}")));
    }
    Ok(())
}

fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Dense pre-TopK activations plus the sparse TopK selection of one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// `ReLU(W_enc (x - b_pre) + b_enc)`, possibly with steering clamps.
    pub z_pre: Vec<f32>,
    /// Selected feature indices, strictly increasing.
    pub active: Vec<usize>,
    /// Values aligned with `active`.
    pub values: Vec<f32>,
}

impl LatentState {
    /// Builds a state by running TopK over `z_pre`.
    pub fn from_pre(z_pre: Vec<f32>, k: usize) -> Result<Self> {
        let active = topk_select(&z_pre, k)?;
        let values = active.iter().map(|&j| z_pre[j]).collect();
        Ok(Self { z_pre, active, values })
    }

    /// Value of feature `j` after TopK (0 when inactive).
    pub fn value_of(&self, j: usize) -> f32 {
        match self.active.binary_search(&j) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    /// Scatters the sparse values into a dense `d_s` vector.
    pub fn dense(&self) -> Vec<f32> {
        let mut z = vec![0.0; self.z_pre.len()];
        for (&j, &v) in self.active.iter().zip(&self.values) {
            z[j] = v;
        }
        z
    }
}

/// Sparse vector over latent indices, indices strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub indices: Vec<usize>,
    pub values: Vec<f32>,
}

impl SparseVec {
    pub fn get(&self, j: usize) -> f32 {
        match self.indices.binary_search(&j) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }
}

/// Which tokens a steering clamp applies to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSet {
    /// Every token of the sequence, including tokens appended during generation.
    All,
    /// An explicit set of token positions.
    Only(BTreeSet<usize>),
}

impl TokenSet {
    pub fn contains(&self, t: usize) -> bool {
        match self {
            TokenSet::All => true,
            TokenSet::Only(s) => s.contains(&t),
        }
    }
}

/// Clamp latent `feature` to `value` on `tokens` before TopK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerSpec {
    pub tokens: TokenSet,
    pub feature: usize,
    pub value: f32,
}

impl SteerSpec {
    pub fn all_tokens(feature: usize, value: f32) -> Self {
        Self {
            tokens: TokenSet::All,
            feature,
            value,
        }
    }

    pub fn on_tokens(tokens: impl IntoIterator<Item = usize>, feature: usize, value: f32) -> Self {
        Self {
            tokens: TokenSet::Only(tokens.into_iter().collect()),
            feature,
            value,
        }
    }

    /// Checks `feature < d_s`, every token `< n_tokens`, and a finite value.
    pub fn validate(&self, d_s: usize, n_tokens: usize) -> Result<()> {
        if self.feature >= d_s {
            return Err(Error::invalid(format!(
                "steer feature {} out of range (d_s={d_s})",
                self.feature
            )));
        }
        if !self.value.is_finite() {
            return Err(Error::invalid("steer value must be finite"));
        }
        if let TokenSet::Only(s) = &self.tokens {
            if let Some(&t) = s.iter().next_back() {
                if t >= n_tokens {
                    return Err(Error::invalid(format!("steer token {t} out of range (T={n_tokens})")));
                }
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest strictly positive entries of `v`, returned in
/// increasing index order. Ties are broken toward the lower index.
pub fn topk_select(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > v.len() {
        return Err(Error::invalid(format!("topk k={k} must satisfy 1 <= k <= {}", v.len())));
    }
    let mut cand: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    if cand.len() > k {
        let rank =
            |a: &usize, b: &usize| -> Ordering { v[*b].partial_cmp(&v[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b)) };
        cand.select_nth_unstable_by(k - 1, rank);
        cand.truncate(k);
    }
    cand.sort_unstable();
    Ok(cand)
}

/// Dense pre-TopK activations `ReLU(W_enc (x - b_pre) + b_enc)`.
pub fn pre_activations(x: &[f32], params: &SaeParams) -> Result<Vec<f32>> {
    if x.len() != params.d_l {
        return Err(Error::invalid(format!(
            "input has {} dims, SAE expects {}",
            x.len(),
            params.d_l
        )));
    }
    let centered: Vec<f32> = x.iter().zip(&params.b_pre).map(|(a, b)| a - b).collect();
    Ok(params
        .w_enc
        .chunks_exact(params.d_l)
        .zip(&params.b_enc)
        .map(|(row, b)| {
            let p = (linalg::dot(row, &centered) + *b as f64) as f32;
            p.max(0.0)
        })
        .collect())
}

/// Encodes one token.
pub fn encode(x: &[f32], params: &SaeParams) -> Result<LatentState> {
    LatentState::from_pre(pre_activations(x, params)?, params.k)
}

/// Decodes a sparse latent, touching only active dictionary atoms.
pub fn decode(state: &LatentState, params: &SaeParams) -> Result<Vec<f32>> {
    decode_sparse(&state.active, &state.values, params)
}

/// [`decode`] without the final rounding to f32.
pub fn decode_f64(state: &LatentState, params: &SaeParams) -> Result<Vec<f64>> {
    decode_sparse_f64(&state.active, &state.values, params)
}

/// `sum_j values[j] * W_dec[:, indices[j]] + b_dec`.
pub fn decode_sparse(indices: &[usize], values: &[f32], params: &SaeParams) -> Result<Vec<f32>> {
    Ok(decode_sparse_f64(indices, values, params)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

fn decode_sparse_f64(indices: &[usize], values: &[f32], params: &SaeParams) -> Result<Vec<f64>> {
    if indices.len() != values.len() {
        return Err(Error::invalid("indices and values differ in length"));
    }
    let mut acc: Vec<f64> = params.b_dec.iter().map(|&v| v as f64).collect();
    for (&j, &z) in indices.iter().zip(values) {
        if j >= params.d_s {
            return Err(Error::invalid(format!(
                "active index {j} out of range (d_s={})",
                params.d_s
            )));
        }
        linalg::axpy(&mut acc, z as f64, params.decoder_column(j));
    }
    Ok(acc)
}

/// Clamps `z_pre[spec.feature] = spec.value`, then applies TopK.
///
/// The caller decides whether the current token belongs to `spec.tokens`.
pub fn steer(z_pre: &[f32], spec: &SteerSpec, k: usize) -> Result<LatentState> {
    steer_many(z_pre, &[(spec.feature, spec.value)], k)
}

/// Applies several clamps to one token before a single TopK pass.
pub fn steer_many(z_pre: &[f32], clamps: &[(usize, f32)], k: usize) -> Result<LatentState> {
    let mut z = z_pre.to_vec();
    for &(j, value) in clamps {
        if j >= z.len() {
            return Err(Error::invalid(format!(
                "steer feature {j} out of range (d_s={})",
                z.len()
            )));
        }
        z[j] = value;
    }
    LatentState::from_pre(z, k)
}

/// Gradient of a scalar objective with respect to the active latents, given
/// its gradient `g_xhat` with respect to the reconstruction.
///
/// The active set is held fixed (straight-through TopK), so the result is
/// `W_dec^T g_xhat` restricted to `active`; inactive coordinates are 0.
pub fn latent_gradient(g_xhat: &[f32], params: &SaeParams, active: &[usize]) -> Result<SparseVec> {
    if g_xhat.len() != params.d_l {
        return Err(Error::invalid(format!(
            "gradient has {} dims, SAE expects {}",
            g_xhat.len(),
            params.d_l
        )));
    }
    let mut indices = Vec::with_capacity(active.len());
    let mut values = Vec::with_capacity(active.len());
    for &j in active {
        if j >= params.d_s {
            return Err(Error::invalid(format!("active index {j} out of range")));
        }
        indices.push(j);
        values.push(linalg::dot(params.decoder_column(j), g_xhat) as f32);
    }
    Ok(SparseVec { indices, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(d_l: usize, d_s: usize, k: usize, seed: u64) -> SaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        SaeParams::new(d_l, d_s, k, g(d_s * d_l), g(d_l), g(d_s), g(d_l * d_s), g(d_l)).unwrap()
    }

    // Oracle: full sort by (value desc, index asc), keep positives.
    fn topk_oracle(v: &[f32], k: usize) -> BTreeSet<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
        idx.into_iter().take(k).filter(|&i| v[i] > 0.0).collect()
    }

    #[test]
    fn topk_examples() {
        assert!(topk_select(&[0.0, 0.0, 0.0], 2).unwrap().is_empty());
        assert_eq!(topk_select(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        let v = [2.0, 3.0, 0.5, 3.0, 1.0];
        let got = topk_select(&v, 3).unwrap();
        assert_eq!(got, vec![0, 1, 3]);
        assert_eq!(got.iter().copied().collect::<BTreeSet<_>>(), topk_oracle(&v, 3));
    }

    #[test]
    fn topk_rejects_bad_k() {
        assert!(matches!(topk_select(&[1.0], 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(topk_select(&[1.0], 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encode_identity_example() {
        let p = SaeParams::new(
            2,
            2,
            1,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
            vec![0.0; 2],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
        )
        .unwrap();
        let s = encode(&[1.0, -2.0], &p).unwrap();
        assert_eq!(s.active, vec![0]);
        assert_eq!(s.values, vec![1.0]);
    }

    #[test]
    fn encode_pre_bias_cancels() {
        let mut p = random_params(4, 6, 2, 3);
        p.b_enc_mut().iter_mut().for_each(|b| *b = 0.0);
        let x = p.b_pre().to_vec();
        let s = encode(&x, &p).unwrap();
        assert!(s.z_pre.iter().all(|&v| v == 0.0));
        assert!(s.active.is_empty());
    }

    #[test]
    fn encode_matches_dense_oracle() {
        let p = random_params(4, 6, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f32> = (0..4).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let s = encode(&x, &p).unwrap();
            // dense matmul in f64 with explicit loops
            let w = &p.w_enc;
            let pre: Vec<f32> = (0..6)
                .map(|j| {
                    let mut acc = 0f64;
                    for i in 0..4 {
                        acc += w[j * 4 + i] as f64 * (x[i] - p.b_pre[i]) as f64;
                    }
                    ((acc + p.b_enc[j] as f64) as f32).max(0.0)
                })
                .collect();
            for (a, b) in pre.iter().zip(&s.z_pre) {
                assert!((a - b).abs() < 1e-6);
            }
            let want = topk_oracle(&pre, 3);
            assert_eq!(s.active.iter().copied().collect::<BTreeSet<_>>(), want);
        }
    }

    #[test]
    fn encode_rejects_dim_mismatch() {
        let p = random_params(4, 6, 2, 1);
        assert!(matches!(encode(&[1.0; 3], &p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decode_examples() {
        let p = random_params(4, 6, 2, 7);
        let empty = LatentState {
            z_pre: vec![0.0; 6],
            active: vec![],
            values: vec![],
        };
        assert_eq!(decode(&empty, &p).unwrap(), p.b_dec().to_vec());

        let mut p0 = p.clone();
        p0.b_dec_mut().iter_mut().for_each(|v| *v = 0.0);
        let unit = LatentState {
            z_pre: vec![0.0; 6],
            active: vec![4],
            values: vec![1.0],
        };
        assert_eq!(decode(&unit, &p0).unwrap(), p0.decoder_column(4).to_vec());

        let bad = LatentState {
            z_pre: vec![0.0; 6],
            active: vec![6],
            values: vec![1.0],
        };
        assert!(decode(&bad, &p).is_err());
    }

    #[test]
    fn decode_matches_dense_matmul() {
        let p = random_params(5, 7, 3, 19);
        let w2 = p.w_dec_row_major();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let z_pre: Vec<f32> = (0..7).map(|_| rng.random_range(-1.0f32..2.0)).collect();
            let s = LatentState::from_pre(z_pre, 3).unwrap();
            let z = s.dense();
            let got = decode(&s, &p).unwrap();
            for r in 0..5 {
                let mut acc = p.b_dec[r] as f64;
                for c in 0..7 {
                    acc += w2[r * 7 + c] as f64 * z[c] as f64;
                }
                assert!((got[r] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn steer_examples() {
        let z = [3.0, 2.0, 1.0];
        let clamp0 = steer(&z, &SteerSpec::all_tokens(0, 0.0), 2).unwrap();
        assert_eq!(clamp0.active, vec![1, 2]);

        let z2 = [0.0, 2.0, 1.0];
        let base = LatentState::from_pre(z2.to_vec(), 2).unwrap();
        let noop = steer(&z2, &SteerSpec::all_tokens(0, 0.0), 2).unwrap();
        assert_eq!(noop.active, base.active);

        let dom = steer(&z, &SteerSpec::all_tokens(2, 10.0), 1).unwrap();
        assert_eq!(dom.active, vec![2]);
        assert_eq!(dom.values, vec![10.0]);

        assert!(steer(&z, &SteerSpec::all_tokens(3, 1.0), 1).is_err());
    }

    #[test]
    fn steer_spec_validation() {
        assert!(SteerSpec::on_tokens([0, 3], 1, 1.0).validate(4, 4).is_ok());
        assert!(SteerSpec::on_tokens([4], 1, 1.0).validate(4, 4).is_err());
        assert!(SteerSpec::all_tokens(4, 1.0).validate(4, 4).is_err());
        assert!(SteerSpec::all_tokens(0, f32::NAN).validate(4, 4).is_err());
    }

    #[test]
    fn latent_gradient_examples() {
        let p = random_params(4, 6, 2, 23);
        let zero = latent_gradient(&[0.0; 4], &p, &[1, 3]).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));

        let col = p.decoder_column(2).to_vec();
        let g = latent_gradient(&col, &p, &[2]).unwrap();
        let n2: f64 = col.iter().map(|&v| v as f64 * v as f64).sum();
        assert!((g.values[0] as f64 - n2).abs() < 1e-6);
        assert_eq!(g.get(0), 0.0);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        // objective: f(z) = <c, decode(z)>; df/dz_j = <c, atom_j>
        let p = random_params(6, 9, 4, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let z_pre: Vec<f32> = (0..9).map(|_| rng.random_range(0.1f32..2.0)).collect();
        let s = LatentState::from_pre(z_pre, 4).unwrap();
        let g = latent_gradient(&c, &p, &s.active).unwrap();
        let f = |vals: &[f32]| -> f64 {
            let xh = decode_sparse(&s.active, vals, &p).unwrap();
            xh.iter().zip(&c).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let h = 1e-2f32;
        for pos in 0..s.active.len() {
            let mut up = s.values.clone();
            let mut dn = s.values.clone();
            up[pos] += h;
            dn[pos] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h as f64);
            let an = g.values[pos] as f64;
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "fd={fd} an={an}");
        }
    }

    #[test]
    fn param_file_roundtrip_and_rejects() {
        let p = random_params(3, 5, 2, 41);
        let bytes = p.to_bytes().unwrap();
        let q = SaeParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes().unwrap(), bytes);
        assert_eq!(p, q);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SaeParams::from_bytes(&bad), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(SaeParams::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(SaeParams::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        for i in 0..24 {
            let mut m = bytes.clone();
            m[i] ^= 0x01;
            assert!(SaeParams::from_bytes(&m).is_err(), "header byte {i}");
        }
    }

    proptest! {
        #[test]
        fn topk_tie_break_is_total(vals in proptest::collection::vec(0u8..4, 1..24), k in 1usize..24) {
            let v: Vec<f32> = vals.iter().map(|&b| b as f32).collect();
            let k = k.min(v.len());
            let got: BTreeSet<usize> = topk_select(&v, k).unwrap().into_iter().collect();
            prop_assert_eq!(got, topk_oracle(&v, k));
        }

        #[test]
        fn decode_is_affine(seed in 0u64..1000, alpha in -3.0f32..3.0) {
            let p = random_params(4, 8, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let a: Vec<f32> = (0..8).map(|_| rng.random_range(0.0f32..2.0)).collect();
            let b: Vec<f32> = (0..8).map(|_| rng.random_range(0.0f32..2.0)).collect();
            let idx: Vec<usize> = (0..8).collect();
            let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let scaled: Vec<f32> = a.iter().map(|x| alpha * x).collect();
            let da = decode_sparse(&idx, &a, &p).unwrap();
            let db = decode_sparse(&idx, &b, &p).unwrap();
            let ds = decode_sparse(&idx, &sum, &p).unwrap();
            let dsc = decode_sparse(&idx, &scaled, &p).unwrap();
            for r in 0..4 {
                let bd = p.b_dec[r];
                prop_assert!(((ds[r] - bd) - ((da[r] - bd) + (db[r] - bd))).abs() < 1e-4);
                prop_assert!(((dsc[r] - bd) - alpha * (da[r] - bd)).abs() < 1e-4);
            }
        }

        #[test]
        fn steering_is_deterministic(seed in 0u64..1000, j in 0usize..8, value in -2.0f32..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..3.0).max(0.0)).collect();
            let spec = SteerSpec::all_tokens(j, value);
            prop_assert_eq!(steer(&z, &spec, 3).unwrap(), steer(&z, &spec, 3).unwrap());
        }
    }
}
