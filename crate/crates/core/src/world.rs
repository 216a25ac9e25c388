//! Procedurally generated pair of aligned embedding spaces.
//!
//! A world assigns each attribute value (color, shape, texture, ...) an
//! orthonormal basis vector; a concept's semantic vector is the
//! sum of its attribute bases, so "unseen composition" is well defined. Two
//! fixed near-orthogonal modality maps turn semantic vectors into distinct
//! "text" and "vision" spaces that remain semantically aligned: both maps
//! are orthonormalizations of a shared base rotation plus an independent
//! per-modality perturbation. Fully independent maps would make the
//! cross-modal matched-pair cosine a coin flip over seeds, which defeats the
//! alignment property the contrastive objective relies on.
//!
//! All world math runs at f64; everything is a pure function of the spec.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grad::Tensor;
use crate::rng::{derive, stream};
use crate::{Error, Result};

/// Relative size of the per-modality perturbation applied to the shared base
/// rotation. 0 would make the two spaces identical; large values destroy the
/// cross-modal alignment margin.
const MODALITY_GAP: f64 = 0.5;

/// One attribute index per attribute group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Concept(pub Vec<usize>);

impl Concept {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }
}

/// Declarative description of a world; two equal specs generate bitwise
/// identical worlds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub embed_dim: usize,
    pub attribute_vocab: Vec<Vec<String>>,
    pub noise_sigma: f64,
    pub holdout_concepts: Vec<Concept>,
}

impl WorldSpec {
    /// The default desk-scale world: 3x3x3 concepts, 32 dimensions,
    /// sigma 0.05, and six held-out attribute combinations chosen so every
    /// individual attribute value still occurs in training.
    pub fn desk(seed: u64) -> Self {
        let holdout = [[0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [1, 0, 2], [2, 1, 0]]
            .iter()
            .map(|ix| Concept::new(ix.to_vec()))
            .collect();
        Self {
            seed,
            embed_dim: 32,
            attribute_vocab: vec![
                vec!["red".into(), "green".into(), "blue".into()],
                vec!["cube".into(), "sphere".into(), "cone".into()],
                vec!["matte".into(), "metallic".into(), "glossy".into()],
            ],
            noise_sigma: 0.05,
            holdout_concepts: holdout,
        }
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.attribute_vocab.iter().map(|g| g.len()).collect()
    }

    pub fn total_attribute_values(&self) -> usize {
        self.attribute_vocab.iter().map(|g| g.len()).sum()
    }

    pub fn num_concepts(&self) -> usize {
        self.attribute_vocab.iter().map(|g| g.len()).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attribute_vocab.is_empty() {
            return Err(Error::World("attribute_vocab is empty".into()));
        }
        for (gi, group) in self.attribute_vocab.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::World(format!("attribute group {gi} is empty")));
            }
            let unique: BTreeSet<&String> = group.iter().collect();
            if unique.len() != group.len() {
                return Err(Error::World(format!("attribute group {gi} has duplicate names")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::World(format!("noise_sigma {} is negative", self.noise_sigma)));
        }
        if self.embed_dim < self.total_attribute_values() {
            return Err(Error::World(format!(
                "embed_dim {} is smaller than the {} attribute values",
                self.embed_dim,
                self.total_attribute_values()
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &self.holdout_concepts {
            self.validate_concept(c)?;
            if !seen.insert(c.clone()) {
                return Err(Error::World(format!("duplicate holdout concept {:?}", c.0)));
            }
        }
        if self.holdout_concepts.len() >= self.num_concepts() {
            return Err(Error::World(
                "holdout_concepts must be a strict subset of all concepts".into(),
            ));
        }
        Ok(())
    }

    fn validate_concept(&self, c: &Concept) -> Result<()> {
        if c.0.len() != self.attribute_vocab.len() {
            return Err(Error::World(format!(
                "concept {:?} has {} indices for {} groups",
                c.0,
                c.0.len(),
                self.attribute_vocab.len()
            )));
        }
        for (gi, (&ix, group)) in c.0.iter().zip(self.attribute_vocab.iter()).enumerate() {
            if ix >= group.len() {
                return Err(Error::World(format!(
                    "concept {:?}: index {ix} out of range for group {gi}",
                    c.0
                )));
            }
        }
        Ok(())
    }
}

/// One aligned pair of text/vision embeddings for a concept.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub concept: Concept,
    /// Canonical index of the concept among all concepts of the world.
    pub concept_index: usize,
    pub z_y: Vec<f64>,
    pub z_x: Vec<f64>,
}

/// Materialized world: per-attribute bases plus the two modality maps.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    spec: WorldSpec,
    /// Per group: `k_g x d`, rows orthonormal within the group.
    basis: Vec<Tensor<f64>>,
    map_text: Tensor<f64>,
    map_vision: Tensor<f64>,
    holdout: BTreeSet<Concept>,
}

/// Orthonormalize the rows of `m` in place (modified Gram-Schmidt at f64).
fn orthonormalize_rows(m: &mut Tensor<f64>) -> Result<()> {
    let (n, d) = m.shape();
    for i in 0..n {
        for j in 0..i {
            let proj = crate::grad::dot(m.row(i), m.row(j));
            let prev = m.row(j).to_vec();
            for (x, p) in m.row_mut(i).iter_mut().zip(prev) {
                *x -= proj * p;
            }
        }
        let norm = crate::grad::l2_norm(m.row(i));
        if norm < 1e-9 {
            return Err(Error::World(format!(
                "degenerate row {i} while orthonormalizing a {n}x{d} matrix"
            )));
        }
        for x in m.row_mut(i).iter_mut() {
            *x /= norm;
        }
    }
    Ok(())
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(rows, cols, 1.0, rng)
}

/// Construct the materialized world for a spec.
pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let d = spec.embed_dim;

    // All basis vectors are orthonormalized jointly (across groups as well
    // as within them); embed_dim >= total attribute values guarantees this
    // is possible. Within-group-only orthonormalization leaves cross-group
    // dots at ~1/sqrt(d) with heavy tails over seeds, which breaks the
    // near-orthogonality bound the retrieval metrics depend on.
    let mut basis_rng = derive(&[spec.seed, stream::WORLD_BASIS]);
    let total = spec.total_attribute_values();
    let mut stacked = gaussian_matrix(total, d, &mut basis_rng);
    orthonormalize_rows(&mut stacked)?;
    let mut basis = Vec::with_capacity(spec.attribute_vocab.len());
    let mut offset = 0usize;
    for group in &spec.attribute_vocab {
        let mut b = Tensor::zeros(group.len(), d);
        for i in 0..group.len() {
            b.row_mut(i).copy_from_slice(stacked.row(offset + i));
        }
        offset += group.len();
        basis.push(b);
    }

    let mut base_rng = derive(&[spec.seed, stream::WORLD_MAP_BASE]);
    let mut base = gaussian_matrix(d, d, &mut base_rng);
    orthonormalize_rows(&mut base)?;
    let map_text = perturbed_map(&base, spec.seed, stream::WORLD_MAP_TEXT)?;
    let map_vision = perturbed_map(&base, spec.seed, stream::WORLD_MAP_VISION)?;

    Ok(World {
        holdout: spec.holdout_concepts.iter().cloned().collect(),
        spec: spec.clone(),
        basis,
        map_text,
        map_vision,
    })
}

fn perturbed_map(base: &Tensor<f64>, seed: u64, tag: u64) -> Result<Tensor<f64>> {
    let d = base.rows();
    let mut rng = derive(&[seed, tag]);
    let mut m = base.clone();
    let scale = MODALITY_GAP / (d as f64).sqrt();
    for v in m.data_mut().iter_mut() {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    orthonormalize_rows(&mut m)?;
    Ok(m)
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn basis(&self, group: usize) -> &Tensor<f64> {
        &self.basis[group]
    }

    pub fn map_text(&self) -> &Tensor<f64> {
        &self.map_text
    }

    pub fn map_vision(&self) -> &Tensor<f64> {
        &self.map_vision
    }

    pub fn is_holdout(&self, c: &Concept) -> bool {
        self.holdout.contains(c)
    }

    /// All concepts in canonical (mixed-radix) order.
    pub fn all_concepts(&self) -> Vec<Concept> {
        let sizes = self.spec.group_sizes();
        let total = self.spec.num_concepts();
        let mut out = Vec::with_capacity(total);
        for mut ix in 0..total {
            let mut c = vec![0usize; sizes.len()];
            for g in (0..sizes.len()).rev() {
                c[g] = ix % sizes[g];
                ix /= sizes[g];
            }
            out.push(Concept::new(c));
        }
        out
    }

    /// Canonical index of a concept within [`World::all_concepts`].
    pub fn concept_index(&self, c: &Concept) -> Result<usize> {
        self.spec.validate_concept(c)?;
        let sizes = self.spec.group_sizes();
        let mut ix = 0usize;
        for (g, &i) in c.0.iter().enumerate() {
            ix = ix * sizes[g] + i;
        }
        Ok(ix)
    }

    /// Concepts available for training (complement of the holdout set).
    pub fn train_concepts(&self) -> Vec<Concept> {
        self.all_concepts().into_iter().filter(|c| !self.is_holdout(c)).collect()
    }

    /// Sum of the concept's per-attribute basis vectors.
    pub fn semantic_vector(&self, c: &Concept) -> Result<Vec<f64>> {
        self.spec.validate_concept(c)?;
        let d = self.spec.embed_dim;
        let mut out = vec![0.0; d];
        for (g, &ix) in c.0.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.basis[g].row(ix)) {
                *o += b;
            }
        }
        Ok(out)
    }

    fn encode(&self, c: &Concept, noise_seed: u64, tag: u64, map: &Tensor<f64>) -> Result<Vec<f64>> {
        let s = self.semantic_vector(c)?;
        let idx = self.concept_index(c)? as u64;
        let mut v = apply_map(map, &s);
        if self.spec.noise_sigma > 0.0 {
            let mut rng = derive(&[self.spec.seed, tag, noise_seed, idx]);
            for x in v.iter_mut() {
                *x += self.spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        normalize(&mut v);
        Ok(v)
    }

    /// Text-side embedding `normalize(A_text . s + sigma * eps)`.
    pub fn encode_text(&self, c: &Concept, noise_seed: u64) -> Result<Vec<f64>> {
        self.encode(c, noise_seed, stream::SAMPLE_TEXT, &self.map_text)
    }

    /// Vision-side embedding `normalize(A_vision . s + sigma * eps)`.
    pub fn encode_vision(&self, c: &Concept, noise_seed: u64) -> Result<Vec<f64>> {
        self.encode(c, noise_seed, stream::SAMPLE_VISION, &self.map_vision)
    }

    /// Noise-free vision embedding, used as the retrieval candidate bank.
    pub fn gt_vision_embedding(&self, c: &Concept) -> Result<Vec<f64>> {
        let s = self.semantic_vector(c)?;
        let mut v = apply_map(&self.map_vision, &s);
        normalize(&mut v);
        Ok(v)
    }

    /// Noise-free candidate bank over all concepts, row `i` = concept `i`.
    pub fn candidate_bank(&self) -> Result<Tensor<f64>> {
        let concepts = self.all_concepts();
        let d = self.spec.embed_dim;
        let mut bank = Tensor::zeros(concepts.len(), d);
        for (i, c) in concepts.iter().enumerate() {
            bank.row_mut(i).copy_from_slice(&self.gt_vision_embedding(c)?);
        }
        Ok(bank)
    }

    fn sample_pair(&self, c: &Concept, noise_seed: u64) -> Result<PairSample> {
        Ok(PairSample {
            concept: c.clone(),
            concept_index: self.concept_index(c)?,
            z_y: self.encode_text(c, noise_seed)?,
            z_x: self.encode_vision(c, noise_seed)?,
        })
    }

    #[cfg(test)]
    pub(crate) fn zero_basis_for_tests(mut self) -> Self {
        for b in &mut self.basis {
            b.data_mut().fill(0.0);
        }
        self
    }
}

fn apply_map(map: &Tensor<f64>, s: &[f64]) -> Vec<f64> {
    let d = map.rows();
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        *o = crate::grad::dot(map.row(i), s);
    }
    out
}

fn normalize(v: &mut [f64]) {
    let norm = crate::grad::l2_norm(v).max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Which part of a dataset split to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    EvalSeen,
    EvalHoldout,
}

/// Materialized train/eval samples. Holdout concepts never appear in the
/// train or eval-seen parts; this is asserted at construction.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<PairSample>,
    pub eval_seen: Vec<PairSample>,
    pub eval_holdout: Vec<PairSample>,
}

impl DatasetSplit {
    pub fn part(&self, part: Part) -> &[PairSample] {
        match part {
            Part::Train => &self.train,
            Part::EvalSeen => &self.eval_seen,
            Part::EvalHoldout => &self.eval_holdout,
        }
    }

    /// With-replacement uniform minibatch from the train part.
    pub fn train_batch<'a>(
        &'a self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<&'a PairSample>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok((0..batch_size).map(|_| &self.train[rng.gen_range(0..self.train.len())]).collect())
    }

    /// Number of sequential eval batches in one pass over a part.
    pub fn num_eval_batches(&self, part: Part, batch_size: usize) -> usize {
        self.part(part).len().div_ceil(batch_size)
    }

    /// Deterministic sequential batch `cursor` of an eval part; one pass over
    /// cursors `0..num_eval_batches` visits every sample exactly once.
    pub fn eval_batch(&self, part: Part, cursor: usize, batch_size: usize) -> Result<&[PairSample]> {
        let samples = self.part(part);
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if batch_size > samples.len() {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds eval part length {}",
                samples.len()
            )));
        }
        let start = cursor * batch_size;
        if start >= samples.len() {
            return Err(Error::Config(format!(
                "eval cursor {cursor} out of range for {} samples",
                samples.len()
            )));
        }
        Ok(&samples[start..(start + batch_size).min(samples.len())])
    }
}

/// Draw a dataset: train/eval-seen concepts uniform over non-holdout
/// concepts, eval-holdout uniform over the holdout set, fresh noise per
/// sample, deterministic in `seed`.
pub fn make_dataset(
    world: &World,
    n_train: usize,
    n_eval_seen: usize,
    n_eval_holdout: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_train == 0 {
        return Err(Error::Config("n_train must be positive".into()));
    }
    let train_concepts = world.train_concepts();
    let holdout_concepts: Vec<Concept> = world.spec.holdout_concepts.clone();
    if n_eval_holdout > 0 && holdout_concepts.is_empty() {
        return Err(Error::Config("n_eval_holdout > 0 but the holdout set is empty".into()));
    }

    let mut rng = derive(&[world.spec.seed, stream::DATASET, seed]);
    let mut draw = |pool: &[Concept], n: usize| -> Result<Vec<PairSample>> {
        (0..n)
            .map(|_| {
                let c = &pool[rng.gen_range(0..pool.len())];
                let noise_seed = rng.gen::<u64>();
                world.sample_pair(c, noise_seed)
            })
            .collect()
    };

    let train = draw(&train_concepts, n_train)?;
    let eval_seen = draw(&train_concepts, n_eval_seen)?;
    let eval_holdout = draw(&holdout_concepts, n_eval_holdout)?;

    // Holdout hygiene: asserted on every generated dataset.
    for s in train.iter().chain(eval_seen.iter()) {
        if world.is_holdout(&s.concept) {
            return Err(Error::World(format!(
                "holdout concept {:?} leaked into a training part",
                s.concept.0
            )));
        }
    }
    Ok(DatasetSplit { train, eval_seen, eval_holdout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::cosine;

    #[test]
    fn same_spec_builds_bitwise_identical_worlds() {
        let spec = WorldSpec::desk(7);
        let a = build_world(&spec).unwrap();
        let b = build_world(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn basis_vectors_are_near_orthogonal() {
        let world = build_world(&WorldSpec::desk(7)).unwrap();
        let mut rows: Vec<&[f64]> = Vec::new();
        for g in 0..3 {
            for i in 0..3 {
                rows.push(world.basis(g).row(i));
            }
        }
        assert_eq!(rows.len(), 9);
        for i in 0..rows.len() {
            for j in 0..i {
                let d = crate::grad::dot(rows[i], rows[j]).abs();
                assert!(d < 0.3, "basis {i} vs {j}: |dot| = {d}");
            }
        }
    }

    #[test]
    fn small_embed_dim_is_rejected() {
        let mut spec = WorldSpec::desk(7);
        spec.embed_dim = 4;
        assert!(build_world(&spec).is_err());
    }

    #[test]
    fn holdout_must_be_strict_subset() {
        let mut spec = WorldSpec::desk(7);
        spec.holdout_concepts = build_world(&WorldSpec::desk(7)).unwrap().all_concepts();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn semantic_vector_is_additive_in_attribute_substitution() {
        let world = build_world(&WorldSpec::desk(3)).unwrap();
        let a = world.semantic_vector(&Concept::new(vec![0, 1, 2])).unwrap();
        let b = world.semantic_vector(&Concept::new(vec![2, 1, 2])).unwrap();
        for i in 0..world.embed_dim() {
            let want = world.basis(0).row(0)[i] - world.basis(0).row(2)[i];
            assert!((a[i] - b[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_vector_rejects_out_of_range() {
        let world = build_world(&WorldSpec::desk(3)).unwrap();
        assert!(world.semantic_vector(&Concept::new(vec![0, 3, 0])).is_err());
    }

    #[test]
    fn zero_basis_world_gives_zero_semantic_vector() {
        let world = build_world(&WorldSpec::desk(3)).unwrap().zero_basis_for_tests();
        let s = world.semantic_vector(&Concept::new(vec![1, 1, 1])).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encodings_are_unit_norm_and_deterministic() {
        let world = build_world(&WorldSpec::desk(9)).unwrap();
        let c = Concept::new(vec![1, 0, 2]);
        let a = world.encode_text(&c, 42).unwrap();
        let b = world.encode_text(&c, 42).unwrap();
        assert_eq!(a, b);
        assert!((crate::grad::l2_norm(&a) - 1.0).abs() < 1e-6);
        assert!((crate::grad::l2_norm(&world.encode_vision(&c, 42).unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_sigma_is_noise_seed_invariant() {
        let mut spec = WorldSpec::desk(11);
        spec.noise_sigma = 0.0;
        let world = build_world(&spec).unwrap();
        let c = Concept::new(vec![2, 2, 2]);
        let zx = world.encode_vision(&c, 1).unwrap();
        let zy1 = world.encode_text(&c, 1).unwrap();
        let zy2 = world.encode_text(&c, 999).unwrap();
        assert_eq!(zy1, zy2);
        let _ = cosine(&zx, &zy1);
    }

    #[test]
    fn matched_cosine_beats_mismatched_monte_carlo() {
        // 1000 matched and 1000 mismatched pairs using the seeded generator.
        let world = build_world(&WorldSpec::desk(7)).unwrap();
        let concepts = world.all_concepts();
        let mut rng = derive(&[7, 0xfeed]);
        let mut matched = 0.0;
        let mut mismatched = 0.0;
        for i in 0..1000u64 {
            let c = &concepts[rng.gen_range(0..concepts.len())];
            let zy = world.encode_text(c, i).unwrap();
            let zx = world.encode_vision(c, i + 100_000).unwrap();
            matched += cosine(&zy, &zx);
            let mut other = rng.gen_range(0..concepts.len());
            while concepts[other] == *c {
                other = rng.gen_range(0..concepts.len());
            }
            let zw = world.encode_vision(&concepts[other], i + 200_000).unwrap();
            mismatched += cosine(&zy, &zw);
        }
        assert!(
            matched / 1000.0 > mismatched / 1000.0,
            "matched {} vs mismatched {}",
            matched / 1000.0,
            mismatched / 1000.0
        );
    }

    #[test]
    fn make_dataset_is_deterministic_and_hygienic() {
        let world = build_world(&WorldSpec::desk(5)).unwrap();
        let a = make_dataset(&world, 100, 20, 15, 3).unwrap();
        let b = make_dataset(&world, 100, 20, 15, 3).unwrap();
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.concept, y.concept);
            assert_eq!(x.z_x, y.z_x);
            assert_eq!(x.z_y, y.z_y);
        }
        for s in &a.train {
            assert!(!world.is_holdout(&s.concept));
        }
        for s in &a.eval_holdout {
            assert!(world.is_holdout(&s.concept));
        }
    }

    #[test]
    fn make_dataset_rejects_empty_train() {
        let world = build_world(&WorldSpec::desk(5)).unwrap();
        assert!(make_dataset(&world, 0, 10, 10, 3).is_err());
    }

    #[test]
    fn make_dataset_rejects_holdout_draw_without_holdouts() {
        let mut spec = WorldSpec::desk(5);
        spec.holdout_concepts.clear();
        let world = build_world(&spec).unwrap();
        assert!(make_dataset(&world, 10, 10, 10, 3).is_err());
        assert!(make_dataset(&world, 10, 10, 0, 3).is_ok());
    }

    #[test]
    fn eval_batches_cover_each_sample_once() {
        let world = build_world(&WorldSpec::desk(5)).unwrap();
        let split = make_dataset(&world, 10, 7, 5, 3).unwrap();
        let mut seen = Vec::new();
        for cursor in 0..split.num_eval_batches(Part::EvalSeen, 3) {
            seen.extend(split.eval_batch(Part::EvalSeen, cursor, 3).unwrap().iter().map(|s| s.z_x[0]));
        }
        assert_eq!(seen.len(), 7);
        assert!(split.eval_batch(Part::EvalSeen, 3, 3).is_err());
        assert!(split.eval_batch(Part::EvalSeen, 0, 8).is_err());
        assert_eq!(split.eval_batch(Part::EvalSeen, 0, 1).unwrap().len(), 1);
    }

    #[test]
    fn train_batch_is_seed_deterministic() {
        let world = build_world(&WorldSpec::desk(5)).unwrap();
        let split = make_dataset(&world, 50, 5, 5, 3).unwrap();
        let mut r1 = derive(&[1, 2]);
        let mut r2 = derive(&[1, 2]);
        let a = split.train_batch(8, &mut r1).unwrap();
        let b = split.train_batch(8, &mut r2).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.concept, y.concept);
            assert_eq!(x.z_x, y.z_x);
        }
    }
}
