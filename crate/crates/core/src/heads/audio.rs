//! Chunk-wise attention-statistics regressor over acoustic frames.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Dense, LayerNorm, Module, ParamTape, Parameter};
use crate::numerics::{Graph, NodeId, Tensor};

/// Floor added under the weighted variance before the square root.
pub const POOL_VAR_EPS: f64 = 1e-9;

/// Architecture of the audio head: each feature window is cut into
/// `num_chunks` equal temporal chunks, each chunk is pooled to a
/// mean/std descriptor, and one shared head maps every descriptor to a
/// (valence, arousal) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioHeadConfig {
    /// Width of the frozen acoustic frame features.
    pub input_dim: usize,
    pub num_chunks: usize,
    pub head_dropout_p: f64,
}

impl Default for AudioHeadConfig {
    fn default() -> Self {
        AudioHeadConfig {
            input_dim: 1024,
            num_chunks: 4,
            head_dropout_p: 0.1,
        }
    }
}

impl AudioHeadConfig {
    /// Width of one pooled chunk descriptor: concatenated mean and std.
    pub fn pooled_dim(&self) -> usize {
        2 * self.input_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_chunks == 0 {
            return Err(Error::config("audio head: dims must be positive"));
        }
        if !(0.0..1.0).contains(&self.head_dropout_p) {
            return Err(Error::config(format!(
                "audio head: head_dropout_p {} outside [0, 1)",
                self.head_dropout_p
            )));
        }
        Ok(())
    }
}

/// Attentive statistics pooling: frame scores `s_t = w . tanh(V x_t)` are
/// softmax-normalized into weights `alpha`, and the chunk is summarized as
/// the weighted mean and weighted standard deviation
/// `sqrt(max(sum alpha (x - mu)^2, 0) + eps)`, concatenated to `[1 x 2D]`.
pub struct AttentionStatsPool {
    pub v: Parameter,
    pub w: Parameter,
}

impl AttentionStatsPool {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionStatsPool {
            v: Parameter::xavier(format!("{name}.v"), dim, dim, rng),
            w: Parameter::xavier(format!("{name}.w"), dim, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, chunk: NodeId) -> Result<NodeId> {
        let tc = g.value(chunk).rows();
        if tc == 0 {
            return Err(Error::shape("attention pool: empty chunk"));
        }
        let v = tape.bind(g, &self.v);
        let w = tape.bind(g, &self.w);
        let hidden = g.matmul(chunk, v)?;
        let hidden = g.tanh(hidden);
        let scores = g.matmul(hidden, w)?;
        let score_row = g.transpose(scores);
        let alpha_row = g.masked_softmax(score_row, Arc::new(vec![true; tc]))?;
        let alpha = g.transpose(alpha_row);

        let sum_row = g.leaf(Tensor::full(1, tc, 1.0));
        let weighted = g.mul_col(chunk, alpha)?;
        let mu = g.matmul(sum_row, weighted)?;
        let centered = g.sub_row(chunk, mu)?;
        let sq = g.mul(centered, centered)?;
        let weighted_sq = g.mul_col(sq, alpha)?;
        let var = g.matmul(sum_row, weighted_sq)?;
        // Every summand alpha_t (x-mu)^2 is nonnegative, so the IEEE sum is
        // too, and abs() implements the max(., 0) clamp exactly.
        let var = g.abs(var);
        let var = g.affine(var, 1.0, POOL_VAR_EPS);
        let sigma = g.sqrt(var);
        g.concat_cols(&[mu, sigma])
    }
}

impl Module for AttentionStatsPool {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.v, &self.w]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.v, &mut self.w]
    }
}

/// Per-second valence/arousal regressor: equal temporal chunks ->
/// [`AttentionStatsPool`] -> shared layer norm -> dropout -> dense ->
/// dense to 2, one output row per chunk.
pub struct AudioHead {
    pub cfg: AudioHeadConfig,
    pool: AttentionStatsPool,
    head_norm: LayerNorm,
    head_fc: Dense,
    head_out: Dense,
}

impl AudioHead {
    pub fn new(name: &str, cfg: AudioHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let pooled = cfg.pooled_dim();
        Ok(AudioHead {
            pool: AttentionStatsPool::new(&format!("{name}.pool"), cfg.input_dim, rng),
            head_norm: LayerNorm::new(&format!("{name}.head_norm"), pooled),
            head_fc: Dense::new(&format!("{name}.head_fc"), pooled, cfg.input_dim, rng),
            head_out: Dense::new(&format!("{name}.head_out"), cfg.input_dim, 2, rng),
            cfg,
        })
    }

    /// Pooled chunk descriptors (`num_chunks x 2D`) and per-chunk
    /// predictions (`num_chunks x 2`). Frame counts that do not divide
    /// evenly are padded by repeating the final frame.
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        segment: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (ts, d) = {
            let s = g.value(segment).shape();
            (s[0], s[1])
        };
        if d != self.cfg.input_dim {
            return Err(Error::shape(format!(
                "audio head expects {}-dim frames, got {d}",
                self.cfg.input_dim
            )));
        }
        if ts < self.cfg.num_chunks {
            return Err(Error::shape(format!(
                "audio head needs at least {} frames, got {ts}",
                self.cfg.num_chunks
            )));
        }
        let rem = ts % self.cfg.num_chunks;
        let x = if rem == 0 {
            segment
        } else {
            let last = g.slice_rows(segment, ts - 1, ts)?;
            let mut parts = vec![segment];
            parts.extend(std::iter::repeat(last).take(self.cfg.num_chunks - rem));
            g.concat_rows(&parts)?
        };
        let chunk_len = g.value(x).rows() / self.cfg.num_chunks;
        let mut pooled = Vec::with_capacity(self.cfg.num_chunks);
        for i in 0..self.cfg.num_chunks {
            let chunk = g.slice_rows(x, i * chunk_len, (i + 1) * chunk_len)?;
            pooled.push(self.pool.forward(g, tape, chunk)?);
        }
        let desc = g.concat_rows(&pooled)?;
        let h = self.head_norm.forward(g, tape, desc)?;
        let h = g.dropout(h, self.cfg.head_dropout_p);
        let h = self.head_fc.forward(g, tape, h)?;
        let out = self.head_out.forward(g, tape, h)?;
        Ok((desc, out))
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, segment: NodeId) -> Result<NodeId> {
        self.forward_parts(g, tape, segment).map(|(_, out)| out)
    }

    /// Deterministic eval-mode predictions for one feature window.
    pub fn predict(&self, segment: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let x = g.leaf(segment.clone());
        let out = self.forward(&mut g, &mut tape, x)?;
        Ok(g.value(out).clone())
    }
}

impl Module for AudioHead {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.pool.params();
        v.extend(self.head_norm.params());
        v.extend(self.head_fc.params());
        v.extend(self.head_out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.pool.params_mut();
        v.extend(self.head_norm.params_mut());
        v.extend(self.head_fc.params_mut());
        v.extend(self.head_out.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pool_once(pool: &AttentionStatsPool, chunk: &Tensor) -> Tensor {
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let c = g.leaf(chunk.clone());
        let out = pool.forward(&mut g, &mut tape, c).unwrap();
        g.value(out).clone()
    }

    fn tiny_cfg() -> AudioHeadConfig {
        AudioHeadConfig {
            input_dim: 3,
            num_chunks: 4,
            head_dropout_p: 0.1,
        }
    }

    #[test]
    fn uniform_attention_recovers_hand_computed_stats() {
        // Zeroed scorer -> equal scores -> uniform weights. For frames
        // [1] and [3]: mean 2, weighted variance 0.5*1 + 0.5*1 = 1.
        let mut r = rng(1);
        let mut pool = AttentionStatsPool::new("p", 1, &mut r);
        pool.v.value.fill(0.0);
        let chunk = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let out = pool_once(&pool, &chunk);
        assert_eq!(out.shape(), &[1, 2]);
        assert!((out.at(0, 0) - 2.0).abs() < 1e-12);
        assert!((out.at(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collapsed_attention_returns_single_frame_stats() {
        // A saturated scorer puts (numerically) all mass on frame 1, so
        // the mean is that frame and the std collapses to sqrt(eps).
        let mut r = rng(2);
        let mut pool = AttentionStatsPool::new("p", 1, &mut r);
        pool.v.value.fill(5.0);
        pool.w.value.fill(50.0);
        let chunk = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let out = pool_once(&pool, &chunk);
        assert!((out.at(0, 0) - 1.0).abs() < 1e-9);
        assert!(out.at(0, 1) < 1e-4);
        assert!(out.at(0, 1) >= POOL_VAR_EPS.sqrt());
    }

    #[test]
    fn single_frame_mean_is_exact_and_std_is_floor() {
        let mut r = rng(3);
        let pool = AttentionStatsPool::new("p", 2, &mut r);
        let chunk = Tensor::new(vec![1, 2], vec![0.7, -0.3]).unwrap();
        let out = pool_once(&pool, &chunk);
        assert_eq!(out.at(0, 0), 0.7);
        assert_eq!(out.at(0, 1), -0.3);
        assert_eq!(out.at(0, 2), POOL_VAR_EPS.sqrt());
        assert_eq!(out.at(0, 3), POOL_VAR_EPS.sqrt());
    }

    #[test]
    fn uniform_attention_matches_population_statistics() {
        // The variance floor shifts sigma by eps/(2 sigma), so the 1e-9
        // agreement with the plain population std needs sigma >= 0.5;
        // features spanning [-2, 2] put it near 1. The floored formula
        // itself must match to float precision.
        let mut r = rng(4);
        let mut pool = AttentionStatsPool::new("p", 3, &mut r);
        pool.v.value.fill(0.0);
        let chunk = Tensor::rand_uniform(7, 3, 2.0, &mut r);
        let out = pool_once(&pool, &chunk);
        for j in 0..3 {
            let mean: f64 = (0..7).map(|t| chunk.at(t, j)).sum::<f64>() / 7.0;
            let var: f64 = (0..7).map(|t| (chunk.at(t, j) - mean).powi(2)).sum::<f64>() / 7.0;
            assert!((out.at(0, j) - mean).abs() < 1e-9, "mean col {j}");
            assert!(
                (out.at(0, 3 + j) - var.sqrt()).abs() < 1e-9,
                "std col {j}: {} vs {}",
                out.at(0, 3 + j),
                var.sqrt()
            );
            assert!(
                (out.at(0, 3 + j) - (var + POOL_VAR_EPS).sqrt()).abs() < 1e-12,
                "floored std col {j}"
            );
        }
    }

    #[test]
    fn std_entries_are_never_negative() {
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            let pool = AttentionStatsPool::new("p", 4, &mut r);
            let chunk = Tensor::rand_uniform(6, 4, 2.0, &mut r);
            let out = pool_once(&pool, &chunk);
            for j in 0..4 {
                assert!(out.at(0, 4 + j) >= 0.0);
            }
        }
    }

    #[test]
    fn chunk_permutation_permutes_outputs() {
        let mut r = rng(5);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        let x = Tensor::rand_uniform(8, 3, 1.0, &mut r);
        // Rebuild the input with its length-2 chunks in order 2,0,3,1.
        let perm = [2usize, 0, 3, 1];
        let mut rows = Vec::new();
        for &c in &perm {
            rows.push(x.row(2 * c).to_vec());
            rows.push(x.row(2 * c + 1).to_vec());
        }
        let shuffled = Tensor::from_rows(&rows).unwrap();

        let base = head.predict(&x).unwrap();
        let moved = head.predict(&shuffled).unwrap();
        for (out_row, &src_chunk) in perm.iter().enumerate() {
            assert_eq!(moved.row(out_row), base.row(src_chunk), "chunk {src_chunk}");
        }
    }

    #[test]
    fn identical_chunks_give_identical_rows() {
        let mut r = rng(6);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        let pattern = Tensor::rand_uniform(3, 3, 1.0, &mut r);
        let mut rows = Vec::new();
        for _ in 0..4 {
            for t in 0..3 {
                rows.push(pattern.row(t).to_vec());
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let out = head.predict(&x).unwrap();
        for row in 1..4 {
            assert_eq!(out.row(row), out.row(0));
        }
    }

    #[test]
    fn uneven_frame_count_pads_with_final_frame() {
        let mut r = rng(7);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        let x = Tensor::rand_uniform(10, 3, 1.0, &mut r);
        let mut rows: Vec<Vec<f64>> = (0..10).map(|t| x.row(t).to_vec()).collect();
        rows.push(x.row(9).to_vec());
        rows.push(x.row(9).to_vec());
        let padded = Tensor::from_rows(&rows).unwrap();
        assert_eq!(
            head.predict(&x).unwrap().data(),
            head.predict(&padded).unwrap().data()
        );
    }

    #[test]
    fn output_is_one_pair_per_chunk() {
        let mut r = rng(8);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        let x = Tensor::rand_uniform(16, 3, 1.0, &mut r);
        let out = head.predict(&x).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
        assert!(out.all_finite());
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let mut r = rng(9);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        assert!(head.predict(&Tensor::zeros(3, 3)).is_err());
        assert!(head.predict(&Tensor::zeros(8, 2)).is_err());
    }

    #[test]
    fn eval_deterministic_and_train_seeded() {
        let mut r = rng(10);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        let x = Tensor::rand_uniform(12, 3, 1.0, &mut r);
        assert_eq!(
            head.predict(&x).unwrap().data(),
            head.predict(&x).unwrap().data()
        );
        let run = |seed: u64| {
            let mut g = Graph::train(seed);
            let mut tape = ParamTape::new();
            let xid = g.leaf(x.clone());
            let out = head.forward(&mut g, &mut tape, xid).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(3).data(), run(3).data());
        assert_ne!(run(3).data(), run(4).data());
    }

    #[test]
    fn pooled_descriptors_have_doubled_width() {
        let mut r = rng(11);
        let head = AudioHead::new("a", tiny_cfg(), &mut r).unwrap();
        let x = Tensor::rand_uniform(8, 3, 1.0, &mut r);
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let xid = g.leaf(x);
        let (desc, out) = head.forward_parts(&mut g, &mut tape, xid).unwrap();
        assert_eq!(g.value(desc).shape(), &[4, 6]);
        assert_eq!(g.value(out).shape(), &[4, 2]);
    }
}
