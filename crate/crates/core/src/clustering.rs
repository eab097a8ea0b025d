//! Label-guided soft spherical K-Means over token embeddings.
//!
//! Tokens are softly assigned to centroids by a softmax over cosine
//! similarities, centroids are rebuilt as probability-weighted token sums,
//! and each centroid is then pulled towards the intent label embeddings by a
//! learnable convex weight `α`. The loop is unrolled on the tape, so
//! gradients reach the tokens, the label embeddings and `α` through every
//! iteration.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelSet, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::functional::cosine_similarity;
use crate::numerics::{Axis, Tape, Tensor, Var};

/// Soft token-to-centroid assignments (`n × k`) after `iteration` rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub probs: Tensor,
    pub iteration: usize,
}

impl AssignmentMatrix {
    /// Number of tokens whose largest assignment is to each centroid.
    pub fn hard_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.probs.cols()];
        for row in self.probs.iter_rows() {
            let best = argmax(row);
            counts[best] += 1;
        }
        counts
    }

    /// Soft mass `Σ_i p_{i,m}` per centroid.
    pub fn soft_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.probs.cols()];
        for row in self.probs.iter_rows() {
            mass.iter_mut().zip(row).for_each(|(m, p)| *m += p);
        }
        mass
    }
}

/// Final concept centroids with the guidance state that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    /// `k × d`.
    pub centroids: Tensor,
    pub alpha: f64,
    /// `k × L` alignment weights from the last iteration.
    pub label_weights: Tensor,
}

impl ConceptSet {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// Variants of the clustering update. The defaults follow the plain
/// formulation: centroid = unnormalized weighted token sum, alignment
/// weights normalized over centroids, no unit-length projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterOptions {
    pub iterations: usize,
    /// Divide each centroid by its soft mass `Σ_i p_{i,m}`.
    pub mass_normalized: bool,
    /// Normalize alignment weights over labels instead of over centroids.
    pub label_axis_weights: bool,
    /// Project centroids to unit length after each update.
    pub unit_centroids: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            iterations: 30,
            mass_normalized: false,
            label_axis_weights: false,
            unit_centroids: false,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Spherical K-Means++ seeding. Returns the indices of the `k` chosen tokens.
///
/// The first seed is uniform; each further seed is drawn with probability
/// proportional to `D(z)²`, `D(z) = 1 − max cos(z, c)` over chosen seeds.
/// Already chosen tokens are never drawn twice; if every remaining token has
/// zero distance, the next seed is uniform over the unchosen tokens.
pub fn seed_indices(tokens: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = tokens.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot seed k = {k} centroids from {n} tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;

    let mut min_dist = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = tokens.row_slice(*chosen.last().expect("non-empty"));
        for (i, row) in tokens.iter_rows().enumerate() {
            let d = (1.0 - cosine_similarity(row, last)?).max(0.0);
            min_dist[i] = min_dist[i].min(d);
        }
        let weights: Vec<f64> = (0..n)
            .map(|i| if taken[i] { 0.0 } else { min_dist[i] * min_dist[i] })
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(&mut rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        taken[next] = true;
    }
    Ok(chosen)
}

/// Seeded centroids as a `k × d` matrix.
pub fn seed_centroids(tokens: &TokenSequence, k: usize, seed: u64) -> Result<Tensor> {
    let idx = seed_indices(tokens.tokens(), k, seed)?;
    let rows: Vec<&[f64]> = idx.iter().map(|&i| tokens.tokens().row_slice(i)).collect();
    Tensor::from_rows(&rows)
}

/// `p_{i,m} = softmax_m cos(z_i, c_m)`, an `n × k` matrix.
pub fn soft_assign(tape: &mut Tape, tokens: Var, centroids: Var) -> Result<Var> {
    let sims = tape.cosine(tokens, centroids)?;
    tape.softmax(sims, Axis::Rows)
}

/// `c_m = Σ_i p_{i,m} z_i`, a `k × d` matrix.
pub fn update_centroids(tape: &mut Tape, tokens: Var, assignments: Var, opts: &ClusterOptions) -> Result<Var> {
    let pt = tape.transpose(assignments)?;
    let mut c = tape.matmul(pt, tokens)?;
    if opts.mass_normalized {
        let n = tape.shape(tokens)[0];
        let ones = tape.constant(Tensor::filled(n, 1, 1.0));
        let mass = tape.matmul(pt, ones)?;
        let inv = tape.recip(mass)?;
        c = tape.scale_rows(c, inv)?;
    }
    if opts.unit_centroids {
        let d = tape.shape(c)[1] as f64;
        let r = tape.rms_norm(c)?;
        c = tape.affine(r, 1.0 / d.sqrt(), 0.0)?;
    }
    Ok(c)
}

/// Blends centroids with label anchors.
///
/// `Weight_{i,m} = exp cos(c_m, y_i) / Σ_j exp cos(c_j, y_i)` (normalized
/// over centroids unless `label_axis_weights`), and
/// `c̃_m = α c_m + (1 − α) Σ_i Weight_{i,m} y_i`. Returns `(c̃, Weight)` with
/// the weights laid out `k × L`. `alpha` is a `1 × 1` variable.
pub fn label_guidance(tape: &mut Tape, centroids: Var, labels: Var, alpha: Var, opts: &ClusterOptions) -> Result<(Var, Var)> {
    let sims = tape.cosine(centroids, labels)?;
    let axis = if opts.label_axis_weights { Axis::Rows } else { Axis::Cols };
    let weights = tape.softmax(sims, axis)?;
    let anchor = tape.matmul(weights, labels)?;
    let kept = tape.scale_by(centroids, alpha)?;
    let one_minus = tape.affine(alpha, -1.0, 1.0)?;
    let pulled = tape.scale_by(anchor, one_minus)?;
    let blended = tape.add(kept, pulled)?;
    Ok((blended, weights))
}

/// Tape handles for the outputs of [`cluster`].
#[derive(Clone, Copy, Debug)]
pub struct ClusterTrace {
    pub centroids: Var,
    pub assignments: Var,
    pub label_weights: Var,
}

/// Seeds `k` centroids, then runs `opts.iterations` rounds of
/// assign → update → label guidance, recording everything on the tape.
pub fn cluster(tape: &mut Tape, tokens: Var, labels: Var, alpha: Var, k: usize, seed: u64, opts: &ClusterOptions) -> Result<ClusterTrace> {
    if opts.iterations == 0 {
        return Err(Error::invalid("clustering needs at least one iteration"));
    }
    let [_, d] = tape.shape(tokens);
    if tape.shape(labels)[1] != d {
        return Err(Error::dim(
            "cluster",
            format!("token width {d} vs label width {}", tape.shape(labels)[1]),
        ));
    }
    let idx = seed_indices(tape.value(tokens), k, seed)?;
    let mut centroids = tape.gather_rows(tokens, &idx)?;
    let mut assignments = None;
    let mut label_weights = None;
    for _ in 0..opts.iterations {
        let p = soft_assign(tape, tokens, centroids)?;
        let c = update_centroids(tape, tokens, p, opts)?;
        let (guided, w) = label_guidance(tape, c, labels, alpha, opts)?;
        centroids = guided;
        assignments = Some(p);
        label_weights = Some(w);
    }
    Ok(ClusterTrace {
        centroids,
        assignments: assignments.expect("at least one iteration"),
        label_weights: label_weights.expect("at least one iteration"),
    })
}

/// Value-level clustering of one token sequence with a fixed `α`.
pub fn cluster_values(tokens: &TokenSequence, labels: &LabelSet, k: usize, alpha: f64, seed: u64, opts: &ClusterOptions) -> Result<(ConceptSet, AssignmentMatrix)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut tape = Tape::new();
    let z = tape.constant(tokens.tokens().clone());
    let y = tape.constant(labels.embeddings().clone());
    let a = tape.constant(Tensor::scalar(alpha));
    let trace = cluster(&mut tape, z, y, a, k, seed, opts)?;
    Ok((
        ConceptSet {
            centroids: tape.value(trace.centroids).clone(),
            alpha,
            label_weights: tape.value(trace.label_weights).clone(),
        },
        AssignmentMatrix {
            probs: tape.value(trace.assignments).clone(),
            iteration: opts.iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_split, Split, SyntheticParams};
    use crate::numerics::{check_gradients, Coordinates};
    use rand_distr::StandardNormal;

    fn seq(rows: &[&[f64]]) -> TokenSequence {
        TokenSequence::new(Tensor::from_rows(rows).unwrap(), rows.len(), 0).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn assign(z: &Tensor, c: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (z, c) = (tape.constant(z.clone()), tape.constant(c.clone()));
        let p = soft_assign(&mut tape, z, c).unwrap();
        tape.value(p).clone()
    }

    #[test]
    fn seeding_k_equals_n_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..20 {
            let z = random_tensor(&mut rng, 6, 4);
            let mut idx = seed_indices(&z, 6, s).unwrap();
            idx.sort_unstable();
            assert_eq!(idx, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn seeding_single_centroid_is_uniform() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]]).unwrap();
        let mut counts = [0usize; 4];
        for s in 0..4000 {
            counts[seed_indices(&z, 1, s).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((800..1200).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn seeding_rejects_k_above_n() {
        let z = Tensor::zeros(3, 2);
        assert!(seed_indices(&z, 4, 0).is_err());
        assert!(seed_indices(&z, 0, 0).is_err());
    }

    /// Two tight antipodal clusters: D² within a cluster is ~0, across ~4.
    #[test]
    fn seeding_splits_antipodal_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rows = Vec::new();
        for sign in [1.0, -1.0] {
            for _ in 0..10 {
                let mut v: Vec<f64> = (0..4).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
                v[0] += sign;
                rows.push(v);
            }
        }
        let z = Tensor::from_rows(&rows).unwrap();
        let split = (0..1000u64)
            .filter(|&s| {
                let idx = seed_indices(&z, 2, s).unwrap();
                (idx[0] < 10) != (idx[1] < 10)
            })
            .count();
        assert!(split >= 990, "{split}/1000");
    }

    #[test]
    fn soft_assign_examples() {
        let eye = Tensor::identity(2);
        let p = assign(&eye, &eye);
        assert!((p.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((p.get(0, 1) - 0.26894).abs() < 1e-5);
        assert!((p.get(1, 1) - 0.73106).abs() < 1e-5);

        let z = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let one = assign(&z, &Tensor::row(&[0.3, 0.4]));
        assert!(one.data().iter().all(|&v| v == 1.0));

        let same = Tensor::from_rows(&[[0.3, 0.4]; 3]).unwrap();
        let p = assign(&z, &same);
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn update_examples() {
        let mut tape = Tape::new();
        let opts = ClusterOptions::default();
        let z = tape.constant(Tensor::row(&[0.5, -2.0]));
        let p = tape.constant(Tensor::scalar(1.0));
        let c = update_centroids(&mut tape, z, p, &opts).unwrap();
        assert_eq!(tape.value(c).data(), &[0.5, -2.0]);

        let zs = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]]).unwrap();
        let z = tape.constant(zs.clone());
        let half = tape.constant(Tensor::filled(3, 2, 0.5));
        let c = update_centroids(&mut tape, z, half, &opts).unwrap();
        for row in tape.value(c).iter_rows() {
            assert_eq!(row, &[1.5, 3.25]);
        }

        // hand-computed weighted sums
        let p = tape.constant(Tensor::from_rows(&[[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]]).unwrap());
        let c = update_centroids(&mut tape, z, p, &opts).unwrap();
        let v = tape.value(c);
        // c_0 = 0.2(1,2) + 0.6(3,4) + 0.5(-1,0.5) = (1.5, 3.05)
        // c_1 = 0.8(1,2) + 0.4(3,4) + 0.5(-1,0.5) = (1.5, 3.45)
        assert!((v.get(0, 0) - 1.5).abs() < 1e-15 && (v.get(0, 1) - 3.05).abs() < 1e-14);
        assert!((v.get(1, 0) - 1.5).abs() < 1e-15 && (v.get(1, 1) - 3.45).abs() < 1e-14);
    }

    fn guide(c: &Tensor, y: &Tensor, alpha: f64) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let yv = tape.constant(y.clone());
        let a = tape.constant(Tensor::scalar(alpha));
        let (g, w) = label_guidance(&mut tape, cv, yv, a, &ClusterOptions::default()).unwrap();
        (tape.value(g).clone(), tape.value(w).clone())
    }

    #[test]
    fn guidance_endpoints() {
        let c = Tensor::from_rows(&[[0.3, -1.0, 2.0], [1.0, 1.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let (g, _) = guide(&c, &y, 1.0);
        assert_eq!(g, c);

        let c1 = Tensor::row(&[0.3, -1.0, 2.0]);
        let y1 = Tensor::row(&[0.0, 2.0, 1.0]);
        let (g, w) = guide(&c1, &y1, 0.0);
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(g, y1);
    }

    #[test]
    fn guidance_hand_evaluated() {
        // c_1 = (1,0), c_2 = (0,1); y_1 = (1,1), y_2 = (1,0); α = 0.5
        let c = Tensor::identity(2);
        let y = Tensor::from_rows(&[[1.0, 1.0], [1.0, 0.0]]).unwrap();
        let (g, w) = guide(&c, &y, 0.5);
        // label 1 is equidistant: weights 0.5/0.5. label 2: cos = 1 vs 0.
        let s = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((w.get(0, 0) - 0.5).abs() < 1e-12 && (w.get(1, 0) - 0.5).abs() < 1e-12);
        assert!((w.get(0, 1) - s).abs() < 1e-12 && (w.get(1, 1) - (1.0 - s)).abs() < 1e-12);
        // c̃_1 = 0.5(1,0) + 0.5[0.5(1,1) + s(1,0)]
        let expected_0 = [0.5 + 0.5 * (0.5 + s), 0.25];
        let expected_1 = [0.5 * (0.5 + 1.0 - s), 0.5 + 0.25];
        assert!((g.get(0, 0) - expected_0[0]).abs() < 1e-12 && (g.get(0, 1) - expected_0[1]).abs() < 1e-12);
        assert!((g.get(1, 0) - expected_1[0]).abs() < 1e-12 && (g.get(1, 1) - expected_1[1]).abs() < 1e-12);
    }

    #[test]
    fn assignments_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let z = random_tensor(&mut rng, 5, 4);
            let c = random_tensor(&mut rng, 3, 4);
            let mut scaled = z.clone();
            let which = rng.random_range(0..5);
            scaled.row_slice_mut(which).iter_mut().for_each(|v| *v *= 2.0);
            assert!(assign(&z, &c).max_abs_diff(&assign(&scaled, &c)) < 1e-9);
        }
    }

    #[test]
    fn fixed_point_when_tokens_coincide() {
        let v = [0.6, -0.8, 0.0];
        let tokens = seq(&[&v, &v, &v, &v]);
        let labels = LabelSet::new(vec!["a".into(), "b".into()], Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()).unwrap();
        let run = |iterations| {
            let opts = ClusterOptions {
                iterations,
                ..Default::default()
            };
            cluster_values(&tokens, &labels, 2, 1.0, 5, &opts).unwrap()
        };
        let (one, _) = run(1);
        let (two, _) = run(2);
        assert!(one.centroids.max_abs_diff(&two.centroids) < 1e-9);
        // each centroid carries half the soft mass of the four tokens
        for row in one.centroids.iter_rows() {
            for (c, z) in row.iter().zip(v) {
                assert!((c - 2.0 * z).abs() < 1e-12);
            }
        }
    }

    fn pooled_noiseless(params: &SyntheticParams) -> (TokenSequence, LabelSet) {
        let ds = generate_split(params, Split::Train).unwrap();
        // pool one sample of each class so every anchor is present equally often
        let rows: Vec<Vec<f64>> = ds
            .samples()
            .iter()
            .flat_map(|s| s.sequence.tokens().iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>())
            .collect();
        let tokens = TokenSequence::new(Tensor::from_rows(&rows).unwrap(), rows.len(), 0).unwrap();
        (tokens, ds.labels().clone())
    }

    fn nearest_anchor_hits(concepts: &ConceptSet, anchors: &Tensor) -> Vec<bool> {
        let mut hit = vec![false; anchors.rows()];
        for c in concepts.centroids.iter_rows() {
            let sims: Vec<f64> = anchors.iter_rows().map(|a| cosine_similarity(c, a).unwrap()).collect();
            hit[argmax(&sims)] = true;
        }
        hit
    }

    /// Mutually orthogonal anchors: the symmetric recurrence for the
    /// off-anchor/on-anchor weight ratio, r' = exp((r - 1) / sqrt(1 + 3r^2)),
    /// stays strictly below 1, so every centroid keeps its own anchor.
    #[test]
    fn orthogonal_anchors_map_bijectively() {
        let d = 16;
        let mut rows = Vec::new();
        for class in 0..4 {
            let mut e = vec![0.0; d];
            e[class * 3] = 1.0;
            for _ in 0..3 {
                rows.push(e.clone());
            }
        }
        let anchors = Tensor::from_rows(&rows.iter().step_by(3).cloned().collect::<Vec<_>>()).unwrap();
        let labels = LabelSet::new((0..4).map(|c| format!("c{c}")).collect(), anchors.clone()).unwrap();
        let tokens = TokenSequence::new(Tensor::from_rows(&rows).unwrap(), rows.len(), 0).unwrap();
        for seed in 0..10 {
            let (concepts, _) = cluster_values(&tokens, &labels, 4, 1.0, seed, &ClusterOptions::default()).unwrap();
            let hit = nearest_anchor_hits(&concepts, &anchors);
            assert!(hit.iter().all(|&h| h), "seed {seed}: {hit:?}");
        }
    }

    /// Generator anchors are random, hence correlated; at unit temperature
    /// the unrolled loop then contracts every centroid towards the pooled
    /// token mean within 30 iterations.
    #[test]
    fn correlated_anchors_contract_to_common_direction() {
        let params = SyntheticParams {
            distractor_fraction: 0.0,
            ..SyntheticParams::new(4, 1, 16, 3, 0.0, 2)
        };
        let (tokens, labels) = pooled_noiseless(&params);
        let (concepts, _) = cluster_values(&tokens, &labels, 4, 1.0, 0, &ClusterOptions::default()).unwrap();
        let c = &concepts.centroids;
        for i in 0..4 {
            for j in 0..4 {
                assert!(cosine_similarity(c.row_slice(i), c.row_slice(j)).unwrap() > 0.999);
            }
        }
        // a single iteration still separates them
        let opts = ClusterOptions { iterations: 1, ..Default::default() };
        let (early, _) = cluster_values(&tokens, &labels, 4, 1.0, 0, &opts).unwrap();
        assert!(nearest_anchor_hits(&early, labels.embeddings()).iter().all(|&h| h));
    }

    #[test]
    fn rows_sum_to_one_every_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_tensor(&mut rng, 7, 5);
        let y = random_tensor(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let (zv, yv) = (tape.constant(z), tape.constant(y));
        let a = tape.constant(Tensor::scalar(0.4));
        let opts = ClusterOptions::default();
        let idx = seed_indices(tape.value(zv), 3, 1).unwrap();
        let mut c = tape.gather_rows(zv, &idx).unwrap();
        for _ in 0..opts.iterations {
            let p = soft_assign(&mut tape, zv, c).unwrap();
            for row in tape.value(p).iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
            }
            let u = update_centroids(&mut tape, zv, p, &opts).unwrap();
            c = label_guidance(&mut tape, u, yv, a, &opts).unwrap().0;
        }
    }

    #[test]
    fn alpha_one_blocks_label_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let z = tape.leaf(random_tensor(&mut rng, 6, 4));
        let y = tape.leaf(random_tensor(&mut rng, 3, 4));
        let a = tape.constant(Tensor::scalar(1.0));
        let trace = cluster(&mut tape, z, y, a, 3, 0, &ClusterOptions { iterations: 5, ..Default::default() }).unwrap();
        let loss = tape.sum(trace.centroids).unwrap();
        let g = tape.backward(loss).unwrap();
        let gy = g.get(y).unwrap();
        assert!(gy.data().iter().all(|&v| v == 0.0), "{gy:?}");
        assert!(g.get(z).unwrap().frobenius_norm() > 0.0);
    }

    #[test]
    fn unrolled_loop_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = random_tensor(&mut rng, 5, 8);
        let y = random_tensor(&mut rng, 3, 8);
        let alpha_logit = Tensor::scalar(0.3);
        let proj = random_tensor(&mut rng, 2, 8);
        let opts = ClusterOptions::default();
        let report = check_gradients(
            |tape, v| {
                let alpha = tape.sigmoid(v[2])?;
                let trace = cluster(tape, v[0], v[1], alpha, 2, 3, &opts)?;
                let w = tape.constant(proj.clone());
                let prod = tape.mul(trace.centroids, w)?;
                tape.sum(prod)
            },
            &[z, y, alpha_logit],
            Coordinates::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn variant_flags_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = TokenSequence::new(random_tensor(&mut rng, 6, 4), 3, 3).unwrap();
        let labels = LabelSet::new(vec!["a".into(), "b".into()], random_tensor(&mut rng, 2, 4)).unwrap();
        let opts = ClusterOptions {
            iterations: 4,
            mass_normalized: true,
            label_axis_weights: true,
            unit_centroids: true,
        };
        let (c, p) = cluster_values(&tokens, &labels, 3, 1.0, 1, &opts).unwrap();
        for row in c.centroids.iter_rows() {
            assert!((crate::numerics::functional::norm(row) - 1.0).abs() < 1e-6);
        }
        for row in c.label_weights.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.hard_counts().iter().sum::<usize>(), 6);
        assert!((p.soft_mass().iter().sum::<f64>() - 6.0).abs() < 1e-12);
    }
}
