//! Sparse attention with multi-hop diffusion.
//!
//! Attention weights live on a sparse token graph (local window + global
//! tokens + random links). One-hop attention `AV` is widened to `𝒜V` with
//! `𝒜 = Σ_k α(1-α)^k A^k` via the personalized-pagerank power iteration
//! `Z_{k+1} = (1-α) A Z_k + α V`, which converges geometrically to `𝒜V`
//! without ever materializing a dense N×N matrix. A dense linear-solve
//! oracle and a tiled online-softmax kernel live here too; both serve as
//! independent reference routes for the sparse path.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Allowed (query, key) pairs stored as per-row sorted neighbor lists.
///
/// Invariants: every row contains its own index, the pattern is symmetric,
/// global tokens attend everywhere and are attended from everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePattern {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    window_radius: usize,
    global: Vec<usize>,
    random_links: usize,
    seed: u64,
}

impl SparsePattern {
    /// Build the union of a band of radius `window_radius`, global
    /// rows/columns for `global`, `random_links` seeded random symmetric
    /// links per row, and self-loops. Deterministic for a fixed seed.
    ///
    /// Random links are degree-capped on both endpoints so the stored
    /// pattern never exceeds `n*(2w+1+r) + 2n*|G|` pairs; a row may end up
    /// with fewer than `random_links` extras when its candidates are
    /// exhausted.
    pub fn build(
        n: usize,
        window_radius: usize,
        global: &[usize],
        random_links: usize,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("pattern needs n_tokens >= 1".into()));
        }
        for &g in global {
            if g >= n {
                return Err(Error::InvalidArgument(format!(
                    "global token {g} out of range for {n} tokens"
                )));
            }
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut adj = vec![false; n * n];
        let link = |rows: &mut Vec<Vec<usize>>, adj: &mut Vec<bool>, i: usize, j: usize| {
            if !adj[i * n + j] {
                adj[i * n + j] = true;
                adj[j * n + i] = true;
                rows[i].push(j);
                if i != j {
                    rows[j].push(i);
                }
            }
        };
        for i in 0..n {
            let lo = i.saturating_sub(window_radius);
            let hi = (i + window_radius).min(n - 1);
            for j in lo..=hi {
                link(&mut rows, &mut adj, i, j);
            }
        }
        for &g in global {
            for j in 0..n {
                link(&mut rows, &mut adj, g, j);
            }
        }

        if random_links > 0 {
            // Feasibility under the no-replacement rule, judged against the
            // structural (band + global) pattern. Rows that already attend
            // everywhere are exempt.
            for i in 0..n {
                let existing = rows[i].len();
                if existing < n && n - existing < random_links {
                    return Err(Error::InvalidArgument(format!(
                        "cannot place {random_links} random links without replacement: \
                         row {i} already has {existing} of {n} neighbors"
                    )));
                }
            }
            let mut rng = substream(seed, "pattern");
            let mut extra = vec![0usize; n];
            for i in 0..n {
                while extra[i] < random_links && rows[i].len() < n {
                    let candidates: Vec<usize> = (0..n)
                        .filter(|&j| !adj[i * n + j] && extra[j] < random_links)
                        .collect();
                    if candidates.is_empty() {
                        break;
                    }
                    let j = candidates[rng.gen_range(0..candidates.len())];
                    link(&mut rows, &mut adj, i, j);
                    extra[i] += 1;
                    extra[j] += 1;
                }
            }
        }

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_unstable();
            cols.extend_from_slice(row);
            row_ptr.push(cols.len());
        }
        Ok(SparsePattern {
            n,
            row_ptr,
            cols,
            window_radius,
            global: global.to_vec(),
            random_links,
            seed,
        })
    }

    /// Pattern where every token attends to every token.
    pub fn full(n: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * n);
        row_ptr.push(0);
        for _ in 0..n {
            cols.extend(0..n);
            row_ptr.push(cols.len());
        }
        SparsePattern {
            n,
            row_ptr,
            cols,
            window_radius: n,
            global: Vec::new(),
            random_links: 0,
            seed: 0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Number of stored (query, key) pairs.
    pub fn pair_count(&self) -> usize {
        self.cols.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }
}

/// Row-stochastic attention weights on a sparse pattern, one weight per
/// allowed pair.
#[derive(Debug, Clone)]
pub struct SparseAttentionMatrix<T> {
    pattern: Arc<SparsePattern>,
    weights: Vec<T>,
}

impl<T: Scalar> SparseAttentionMatrix<T> {
    /// Wrap raw weights, enforcing non-negativity and unit row sums.
    pub fn new(pattern: Arc<SparsePattern>, weights: Vec<T>) -> Result<Self> {
        if weights.len() != pattern.pair_count() {
            return Err(Error::InvalidArgument(format!(
                "weight count {} does not match pattern pair count {}",
                weights.len(),
                pattern.pair_count()
            )));
        }
        let tol = T::of(1e-9);
        for i in 0..pattern.n_tokens() {
            let mut sum = T::zero();
            for idx in pattern.row_range(i) {
                if weights[idx] < T::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "negative attention weight in row {i}"
                    )));
                }
                sum += weights[idx];
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(SparseAttentionMatrix { pattern, weights })
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn row_weights(&self, i: usize) -> &[T] {
        &self.weights[self.pattern.row_range(i)]
    }

    /// Dense N×N copy. Test and oracle use only.
    pub fn to_dense(&self) -> Tensor<T> {
        let n = self.pattern.n_tokens();
        let mut out = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for (idx, &j) in self.pattern.row_range(i).zip(self.pattern.neighbors(i)) {
                out.set2(i, j, self.weights[idx]);
            }
        }
        out
    }
}

/// Teleport probability and power-iteration step count for attention
/// diffusion.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionConfig<T> {
    pub teleport: T,
    pub steps: usize,
}

impl<T: Scalar> DiffusionConfig<T> {
    pub fn new(teleport: T, steps: usize) -> Result<Self> {
        if !(teleport > T::zero() && teleport <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "teleport must lie in (0, 1], got {teleport}"
            )));
        }
        Ok(DiffusionConfig { teleport, steps })
    }
}

/// Scaled-dot scores restricted to the pattern, softmax-normalized over
/// each neighborhood with per-row max subtraction. Returns one weight per
/// stored pair.
pub(crate) fn sparse_scores_kernel<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    pattern: &SparsePattern,
) -> Result<Vec<T>> {
    if q.shape() != k.shape() || q.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "sparse_scores",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if q.rows() != pattern.n_tokens() {
        return Err(Error::InvalidArgument(format!(
            "pattern covers {} tokens but Q has {} rows",
            pattern.n_tokens(),
            q.rows()
        )));
    }
    let d = q.cols();
    let scale = T::of_usize(d).sqrt().recip();
    let mut weights = vec![T::zero(); pattern.pair_count()];
    for i in 0..pattern.n_tokens() {
        let qi = q.row(i);
        let range = pattern.row_range(i);
        let mut m = T::neg_infinity();
        for (idx, &j) in range.clone().zip(pattern.neighbors(i)) {
            let mut dot = T::zero();
            for (&a, &b) in qi.iter().zip(k.row(j)) {
                dot += a * b;
            }
            let s = dot * scale;
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("sparse_scores row {i}"),
                    index: idx,
                });
            }
            weights[idx] = s;
            m = m.max(s);
        }
        let mut denom = T::zero();
        for idx in range.clone() {
            weights[idx] = (weights[idx] - m).exp();
            denom += weights[idx];
        }
        for idx in range {
            weights[idx] = weights[idx] / denom;
        }
    }
    Ok(weights)
}

/// out[i] = Σ_{j ∈ Ne(i)} w_ij · v[j].
pub(crate) fn sparse_apply_kernel<T: Scalar>(
    weights: &[T],
    v: &Tensor<T>,
    pattern: &SparsePattern,
) -> Tensor<T> {
    let (n, d) = (v.rows(), v.cols());
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let out_row = &mut out[i * d..(i + 1) * d];
        for (idx, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
            let w = weights[idx];
            for (o, &x) in out_row.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    Tensor::new(vec![n, d], out).expect("shape by construction")
}

/// Sparse attention scores per Eq.-style normalization over neighborhoods.
pub fn sparse_scores<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    pattern: &Arc<SparsePattern>,
) -> Result<SparseAttentionMatrix<T>> {
    let weights = sparse_scores_kernel(q, k, pattern)?;
    Ok(SparseAttentionMatrix {
        pattern: Arc::clone(pattern),
        weights,
    })
}

/// Run exactly `cfg.steps` power-iteration steps of
/// `Z_{k+1} = (1-α) A Z_k + α V` starting from `Z_0 = V`, recording the
/// max-abs delta of every step.
pub fn attention_diffusion_trace<T: Scalar>(
    a: &SparseAttentionMatrix<T>,
    v: &Tensor<T>,
    cfg: DiffusionConfig<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    DiffusionConfig::new(cfg.teleport, cfg.steps)?;
    if v.shape().len() != 2 || v.rows() != a.pattern.n_tokens() {
        return Err(Error::ShapeMismatch {
            op: "attention_diffusion",
            lhs: vec![a.pattern.n_tokens()],
            rhs: v.shape().to_vec(),
        });
    }
    let alpha = cfg.teleport;
    let keep = T::one() - alpha;
    let mut z = v.clone();
    let mut deltas = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let az = sparse_apply_kernel(a.weights(), &z, &a.pattern);
        let next = az.scale(keep).add(&v.scale(alpha))?;
        deltas.push(next.sub(&z)?.max_abs());
        z = next;
    }
    Ok((z, deltas))
}

/// `Z_K` from the diffusion power iteration; converges to `𝒜V`.
pub fn attention_diffusion<T: Scalar>(
    a: &SparseAttentionMatrix<T>,
    v: &Tensor<T>,
    cfg: DiffusionConfig<T>,
) -> Result<Tensor<T>> {
    attention_diffusion_trace(a, v, cfg).map(|(z, _)| z)
}

/// Exact `𝒜V` with `𝒜 = α (I - (1-α) A)^{-1}`, computed by dense Gaussian
/// elimination with partial pivoting. Reference route for tests; the
/// training path never materializes anything dense.
pub fn diffusion_oracle<T: Scalar>(
    a: &SparseAttentionMatrix<T>,
    v: &Tensor<T>,
    teleport: T,
) -> Result<Tensor<T>> {
    if !(teleport > T::zero() && teleport <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "teleport must lie in (0, 1], got {teleport}"
        )));
    }
    let n = a.pattern.n_tokens();
    if v.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "diffusion_oracle",
            lhs: vec![n],
            rhs: v.shape().to_vec(),
        });
    }
    let d = v.cols();
    let keep = T::one() - teleport;
    // M = I - (1-α) A, strictly diagonally dominant for α > 0.
    let mut m = a.to_dense().scale(-keep);
    for i in 0..n {
        let x = m.at2(i, i);
        m.set2(i, i, x + T::one());
    }
    // Solve M Z = α V for all right-hand sides at once.
    let mut rhs = v.scale(teleport);
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot = m.at2(col, col).abs();
        for r in col + 1..n {
            if m.at2(r, col).abs() > pivot {
                pivot = m.at2(r, col).abs();
                pivot_row = r;
            }
        }
        if pivot < T::of(1e-300) {
            return Err(Error::InvalidArgument(
                "singular diffusion system (is A row-stochastic?)".into(),
            ));
        }
        if pivot_row != col {
            for c in 0..n {
                let (a1, a2) = (m.at2(col, c), m.at2(pivot_row, c));
                m.set2(col, c, a2);
                m.set2(pivot_row, c, a1);
            }
            for c in 0..d {
                let (a1, a2) = (rhs.at2(col, c), rhs.at2(pivot_row, c));
                rhs.set2(col, c, a2);
                rhs.set2(pivot_row, c, a1);
            }
        }
        let inv = m.at2(col, col).recip();
        for r in col + 1..n {
            let f = m.at2(r, col) * inv;
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let val = m.at2(r, c) - f * m.at2(col, c);
                m.set2(r, c, val);
            }
            for c in 0..d {
                let val = rhs.at2(r, c) - f * rhs.at2(col, c);
                rhs.set2(r, c, val);
            }
        }
    }
    let mut z = Tensor::zeros(vec![n, d]);
    for r in (0..n).rev() {
        for c in 0..d {
            let mut acc = rhs.at2(r, c);
            for p in r + 1..n {
                acc -= m.at2(r, p) * z.at2(p, c);
            }
            z.set2(r, c, acc / m.at2(r, r));
        }
    }
    Ok(z)
}

/// Sparse scores followed by attention diffusion.
pub fn diffused_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pattern: &Arc<SparsePattern>,
    cfg: DiffusionConfig<T>,
) -> Result<Tensor<T>> {
    let a = sparse_scores(q, k, pattern)?;
    attention_diffusion(&a, v, cfg)
}

/// Exact dense attention `softmax(QK^T/√d) V` computed one key/value tile
/// at a time with a running row max and running normalizer. The N×N score
/// matrix is never materialized.
pub fn tiled_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tile: usize,
) -> Result<Tensor<T>> {
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be >= 1".into()));
    }
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "tiled_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (n, d) = (q.rows(), q.cols());
    let dv = v.cols();
    let scale = T::of_usize(d).sqrt().recip();
    let mut out = vec![T::zero(); n * dv];
    let mut scores = vec![T::zero(); tile];
    for i in 0..n {
        let qi = q.row(i);
        let mut m = T::neg_infinity();
        let mut l = T::zero();
        let mut acc = vec![T::zero(); dv];
        let mut t0 = 0;
        while t0 < n {
            let t1 = (t0 + tile).min(n);
            let mut tile_max = T::neg_infinity();
            for (s, j) in scores.iter_mut().zip(t0..t1) {
                let mut dot = T::zero();
                for (&a, &b) in qi.iter().zip(k.row(j)) {
                    dot += a * b;
                }
                *s = dot * scale;
                tile_max = tile_max.max(*s);
            }
            let m_new = m.max(tile_max);
            let rescale = if m.is_finite() { (m - m_new).exp() } else { T::zero() };
            l = l * rescale;
            for a in &mut acc {
                *a = *a * rescale;
            }
            for (s_idx, j) in (t0..t1).enumerate() {
                let p = (scores[s_idx] - m_new).exp();
                l += p;
                for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                    *a += p * x;
                }
            }
            m = m_new;
            t0 = t1;
        }
        for (o, a) in out[i * dv..(i + 1) * dv].iter_mut().zip(acc) {
            *o = a / l;
        }
    }
    Tensor::new(vec![n, dv], out)
}

/// Two-pass dense attention used as the tiled kernel's oracle.
pub fn naive_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let d = q.cols();
    let scale = T::of_usize(d).sqrt().recip();
    let scores = q.matmul(&k.transpose2()?)?.scale(scale);
    scores.softmax_rows()?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_stochastic(rng: &mut impl Rng, pattern: &Arc<SparsePattern>) -> SparseAttentionMatrix<f64> {
        let mut w = vec![0.0; pattern.pair_count()];
        for i in 0..pattern.n_tokens() {
            let range = pattern.row_range(i);
            let mut sum = 0.0;
            for idx in range.clone() {
                w[idx] = rng.gen_range(0.01..1.0);
                sum += w[idx];
            }
            for idx in range {
                w[idx] /= sum;
            }
        }
        SparseAttentionMatrix::new(Arc::clone(pattern), w).unwrap()
    }

    #[test]
    fn band_pattern_n3() {
        let p = SparsePattern::build(3, 1, &[], 0, 0).unwrap();
        assert_eq!(p.neighbors(0), &[0, 1]);
        assert_eq!(p.neighbors(1), &[0, 1, 2]);
        assert_eq!(p.neighbors(2), &[1, 2]);
    }

    #[test]
    fn global_token_rows() {
        let p = SparsePattern::build(5, 0, &[0], 0, 0).unwrap();
        assert_eq!(p.neighbors(0), &[0, 1, 2, 3, 4]);
        for i in 1..5 {
            assert!(p.contains(i, 0), "row {i} misses global token");
            assert!(p.contains(i, i), "row {i} misses self loop");
        }
    }

    #[test]
    fn pattern_deterministic_and_symmetric() {
        let a = SparsePattern::build(64, 2, &[], 2, 42).unwrap();
        let b = SparsePattern::build(64, 2, &[], 2, 42).unwrap();
        assert_eq!(a, b);
        // Exhaustive pair scan.
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(a.contains(i, j), a.contains(j, i), "asymmetry at ({i},{j})");
            }
            assert!(a.contains(i, i));
        }
        let c = SparsePattern::build(64, 2, &[], 2, 43).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn too_many_random_links_rejected() {
        assert!(SparsePattern::build(4, 1, &[], 3, 0).is_err());
    }

    #[test]
    fn pattern_pair_count_bound() {
        let (n, w, r) = (1024usize, 4usize, 2usize);
        let p = SparsePattern::build(n, w, &[0], r, 7).unwrap();
        assert!(p.pair_count() <= n * (2 * w + 1 + r) + 2 * n);
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let pattern = Arc::new(SparsePattern::build(6, 1, &[], 0, 0).unwrap());
        let q = Tensor::<f64>::zeros(vec![6, 4]);
        let k = rand_tensor(&mut substream(1, "t"), 6, 4);
        // With Q = 0 every score in a row ties, so weights are uniform.
        let a = sparse_scores(&q, &k, &pattern).unwrap();
        for i in 0..6 {
            let expect = 1.0 / pattern.neighbors(i).len() as f64;
            for &w in a.row_weights(i) {
                assert!((w - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_analytic_scores() {
        let pattern = Arc::new(SparsePattern::full(2));
        // d = 1 so scale = 1; q0·k0 = ln 3, q0·k1 = 0.
        let q = Tensor::new(vec![2, 1], vec![1.0f64, 0.0]).unwrap();
        let k = Tensor::new(vec![2, 1], vec![3.0f64.ln(), 0.0]).unwrap();
        let a = sparse_scores(&q, &k, &pattern).unwrap();
        assert!((a.row_weights(0)[0] - 0.75).abs() < 1e-12);
        assert!((a.row_weights(0)[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn full_pattern_matches_dense_softmax() {
        let mut rng = substream(5, "full");
        let n = 9;
        let pattern = Arc::new(SparsePattern::full(n));
        let q = rand_tensor(&mut rng, n, 4);
        let k = rand_tensor(&mut rng, n, 4);
        let a = sparse_scores(&q, &k, &pattern).unwrap().to_dense();
        let scale = 1.0 / (4.0f64).sqrt();
        let dense = q
            .matmul(&k.transpose2().unwrap())
            .unwrap()
            .scale(scale)
            .softmax_rows()
            .unwrap();
        assert!(a.sub(&dense).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn scores_rows_sum_to_one_and_sparse() {
        let mut rng = substream(6, "rowsum");
        let pattern = Arc::new(SparsePattern::build(24, 3, &[0], 2, 9).unwrap());
        let q = rand_tensor(&mut rng, 24, 8);
        let k = rand_tensor(&mut rng, 24, 8);
        let a = sparse_scores(&q, &k, &pattern).unwrap();
        for i in 0..24 {
            let sum: f64 = a.row_weights(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let dense = a.to_dense();
        for i in 0..24 {
            for j in 0..24 {
                if !pattern.contains(i, j) {
                    assert_eq!(dense.at2(i, j), 0.0, "weight outside pattern");
                }
            }
        }
    }

    #[test]
    fn diffusion_zero_steps_returns_v() {
        let pattern = Arc::new(SparsePattern::full(3));
        let mut rng = substream(2, "k0");
        let a = rand_stochastic(&mut rng, &pattern);
        let v = rand_tensor(&mut rng, 3, 2);
        let cfg = DiffusionConfig::new(0.3, 0).unwrap();
        assert_eq!(attention_diffusion(&a, &v, cfg).unwrap(), v);
    }

    #[test]
    fn diffusion_teleport_one_returns_v() {
        let pattern = Arc::new(SparsePattern::full(4));
        let mut rng = substream(3, "a1");
        let a = rand_stochastic(&mut rng, &pattern);
        let v = rand_tensor(&mut rng, 4, 3);
        let cfg = DiffusionConfig::new(1.0, 5).unwrap();
        let z = attention_diffusion(&a, &v, cfg).unwrap();
        assert!(z.sub(&v).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn diffusion_two_by_two_closed_form() {
        let pattern = Arc::new(SparsePattern::full(2));
        let a = SparseAttentionMatrix::new(Arc::clone(&pattern), vec![0.5f64, 0.5, 0.5, 0.5]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![1.0f64, 0.0]).unwrap();
        let cfg = DiffusionConfig::new(0.5, 30).unwrap();
        let z = attention_diffusion(&a, &v, cfg).unwrap();
        // 𝒜 = α(I-(1-α)A)^{-1} = [[0.75, 0.25], [0.25, 0.75]].
        assert!((z.at2(0, 0) - 0.75).abs() < 1e-6);
        assert!((z.at2(1, 0) - 0.25).abs() < 1e-6);
        let exact = diffusion_oracle(&a, &v, 0.5).unwrap();
        assert!((exact.at2(0, 0) - 0.75).abs() < 1e-12);
        assert!((exact.at2(1, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn oracle_identity_pattern() {
        // A = I: every row's only neighbor is itself.
        let pattern = Arc::new(SparsePattern::build(5, 0, &[], 0, 0).unwrap());
        let a = SparseAttentionMatrix::new(Arc::clone(&pattern), vec![1.0; 5]).unwrap();
        let mut rng = substream(4, "id");
        let v = rand_tensor(&mut rng, 5, 3);
        for alpha in [0.1, 0.5, 1.0] {
            let z = diffusion_oracle(&a, &v, alpha).unwrap();
            assert!(z.sub(&v).unwrap().max_abs() < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn power_iteration_obeys_geometric_bound() {
        let mut rng = substream(8, "geo");
        let pattern = Arc::new(SparsePattern::build(16, 2, &[0], 2, 3).unwrap());
        let a = rand_stochastic(&mut rng, &pattern);
        let v = rand_tensor(&mut rng, 16, 4);
        for alpha in [0.15, 0.5] {
            let exact = diffusion_oracle(&a, &v, alpha).unwrap();
            let init_err = v.sub(&exact).unwrap().max_abs();
            for steps in [1usize, 5, 20] {
                let cfg = DiffusionConfig::new(alpha, steps).unwrap();
                let z = attention_diffusion(&a, &v, cfg).unwrap();
                let err = z.sub(&exact).unwrap().max_abs();
                let bound = (1.0 - alpha).powi(steps as i32) * init_err;
                assert!(
                    err <= bound * (1.0 + 1e-9) + 1e-12,
                    "alpha {alpha} steps {steps}: err {err} bound {bound}"
                );
            }
        }
    }

    #[test]
    fn per_step_contraction() {
        let mut rng = substream(9, "contract");
        let pattern = Arc::new(SparsePattern::build(20, 2, &[], 1, 5).unwrap());
        let a = rand_stochastic(&mut rng, &pattern);
        let v = rand_tensor(&mut rng, 20, 3);
        let cfg = DiffusionConfig::new(0.2, 25).unwrap();
        let (_, deltas) = attention_diffusion_trace(&a, &v, cfg).unwrap();
        for w in deltas.windows(2) {
            assert!(w[1] <= 0.8 * w[0] + 1e-12, "contraction violated: {w:?}");
        }
    }

    #[test]
    fn diffusion_preserves_row_sums() {
        let mut rng = substream(10, "rows");
        let pattern = Arc::new(SparsePattern::build(12, 2, &[0], 1, 2).unwrap());
        let a = rand_stochastic(&mut rng, &pattern);
        // Every row of V sums to the same s; convex combinations preserve it.
        let s = 2.5;
        let mut v = rand_tensor(&mut rng, 12, 4);
        for i in 0..12 {
            let row_sum: f64 = v.row(i).iter().sum();
            let shift = (s - row_sum) / 4.0;
            for j in 0..4 {
                let x = v.at2(i, j) + shift;
                v.set2(i, j, x);
            }
        }
        let cfg = DiffusionConfig::new(0.3, 11).unwrap();
        let z = attention_diffusion(&a, &v, cfg).unwrap();
        for i in 0..12 {
            let row_sum: f64 = z.row(i).iter().sum();
            assert!((row_sum - s).abs() < 1e-9);
        }
    }

    #[test]
    fn diffused_attention_full_pattern_teleport_one() {
        let mut rng = substream(11, "da");
        let pattern = Arc::new(SparsePattern::full(5));
        let q = rand_tensor(&mut rng, 5, 3);
        let k = rand_tensor(&mut rng, 5, 3);
        let v = rand_tensor(&mut rng, 5, 3);
        let cfg = DiffusionConfig::new(1.0, 4).unwrap();
        let z = diffused_attention(&q, &k, &v, &pattern, cfg).unwrap();
        assert!(z.sub(&v).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn diffused_attention_small_alpha_single_step_approaches_av() {
        let mut rng = substream(12, "da2");
        let pattern = Arc::new(SparsePattern::full(4));
        let q = rand_tensor(&mut rng, 4, 2);
        let k = rand_tensor(&mut rng, 4, 2);
        let v = rand_tensor(&mut rng, 4, 2);
        let a = sparse_scores(&q, &k, &pattern).unwrap();
        let av = sparse_apply_kernel(a.weights(), &v, &pattern);
        let alpha = 1e-9;
        let cfg = DiffusionConfig::new(alpha, 1).unwrap();
        let z = diffused_attention(&q, &k, &v, &pattern, cfg).unwrap();
        assert!(z.sub(&av).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn diffused_attention_matches_composed_oracle() {
        let mut rng = substream(13, "da3");
        let pattern = Arc::new(SparsePattern::build(8, 2, &[0], 0, 1).unwrap());
        let q = rand_tensor(&mut rng, 8, 4);
        let k = rand_tensor(&mut rng, 8, 4);
        let v = rand_tensor(&mut rng, 8, 4);
        let cfg = DiffusionConfig::new(0.15, 40).unwrap();
        let z = diffused_attention(&q, &k, &v, &pattern, cfg).unwrap();
        let a = sparse_scores(&q, &k, &pattern).unwrap();
        let exact = diffusion_oracle(&a, &v, 0.15).unwrap();
        assert!(z.sub(&exact).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn tiled_single_tile_matches_naive() {
        let mut rng = substream(14, "tile1");
        let q = rand_tensor(&mut rng, 12, 6);
        let k = rand_tensor(&mut rng, 12, 6);
        let v = rand_tensor(&mut rng, 12, 5);
        let tiled = tiled_attention(&q, &k, &v, 12).unwrap();
        let naive = naive_attention(&q, &k, &v).unwrap();
        assert!(tiled.sub(&naive).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn tiled_zero_queries_average_values() {
        let mut rng = substream(15, "tile2");
        let n = 10;
        let q = Tensor::<f64>::zeros(vec![n, 4]);
        let k = rand_tensor(&mut rng, n, 4);
        let v = rand_tensor(&mut rng, n, 3);
        let out = tiled_attention(&q, &k, &v, 3).unwrap();
        for i in 0..n {
            for c in 0..3 {
                let mean: f64 = (0..n).map(|j| v.at2(j, c)).sum::<f64>() / n as f64;
                assert!((out.at2(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiled_matches_naive_across_tiles() {
        let mut rng = substream(16, "tile3");
        let (n, d) = (128, 16);
        let q = rand_tensor(&mut rng, n, d);
        let k = rand_tensor(&mut rng, n, d);
        let v = rand_tensor(&mut rng, n, d);
        let naive = naive_attention(&q, &k, &v).unwrap();
        for tile in [1usize, 7, 32, n, n + 5] {
            let tiled = tiled_attention(&q, &k, &v, tile).unwrap();
            assert!(
                tiled.sub(&naive).unwrap().max_abs() < 1e-10,
                "tile {tile} diverges"
            );
        }
    }
}
