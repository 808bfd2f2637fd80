//! Procedural paired-modality corpus with known patch-token ground truth.
//!
//! A `ConceptWorld` holds K visual prototypes (unit vectors) paired with K
//! distinct name tokens. Each sample draws a few concepts, renders one
//! noisy patch per concept into random slots of a fixed patch grid, fills
//! the remaining slots with distractors, and writes the concept names in
//! random order between BOS and EOS. With probability `duplication_rate` a
//! sample reuses an earlier sample's concept set, creating semantically
//! duplicate negatives.
//!
//! Distractor slots mix unstructured noise with lookalikes of concepts that
//! are absent from the text (controlled by `distractor_rate`), so matching
//! has to separate real evidence from clutter. Distractors map to nothing;
//! the ground truth is an injective map from concept patch slots to text
//! positions.
//!
//! Generation happens in two phases so it can run data-parallel and stay
//! deterministic: a cheap sequential pass plans each sample's concept set
//! (duplication depends on earlier samples), then every sample is rendered
//! independently from its own derived seed.

use crate::encoders::{ImageBatch, TokenBatch, BOS_ID, EOS_ID, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::matching::Assignment;
use crate::par;
use crate::rng::{derive_rng, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MAX_CONCEPTS_PER_SAMPLE: usize = 4;

/// Weights for drawing 1..=4 concepts per sample. Singleton samples produce
/// exact-duplicate texts whenever two of them hit the same concept, which
/// caps attainable retrieval recall, so the draw leans toward larger sets.
const CONCEPT_COUNT_WEIGHTS: [f64; MAX_CONCEPTS_PER_SAMPLE] = [0.1, 0.3, 0.3, 0.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptWorld {
    /// Number of concepts K.
    pub concepts: usize,
    /// Raw patch vector width.
    pub patch_dim: usize,
    /// Patch slots per image (concept patches plus distractors).
    pub patches_per_image: usize,
    pub noise_sigma: f64,
    /// Probability that a sample reuses a previously drawn concept set.
    pub duplication_rate: f64,
    /// Fraction of distractor slots carrying a lookalike of an absent
    /// concept rather than unstructured noise.
    pub distractor_rate: f64,
    /// Maximum text length the paired token sequences must fit.
    pub max_text_len: usize,
    /// World seed; prototypes are a pure function of it.
    pub world_seed: u64,
}

impl Default for ConceptWorld {
    fn default() -> Self {
        ConceptWorld {
            concepts: 64,
            patch_dim: 32,
            patches_per_image: 9,
            noise_sigma: 0.1,
            duplication_rate: 0.1,
            distractor_rate: 0.3,
            max_text_len: 16,
            world_seed: 0,
        }
    }
}

impl ConceptWorld {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::config("world.concepts", "need K >= 2"));
        }
        if self.concepts + NUM_RESERVED as usize > vocab_size {
            return Err(Error::config(
                "world.concepts",
                format!(
                    "{} concept names collide with a vocabulary of {} (reserved ids {})",
                    self.concepts, vocab_size, NUM_RESERVED
                ),
            ));
        }
        if self.patches_per_image < MAX_CONCEPTS_PER_SAMPLE {
            return Err(Error::config(
                "world.patches_per_image",
                format!("need at least {MAX_CONCEPTS_PER_SAMPLE} slots"),
            ));
        }
        if self.max_text_len < MAX_CONCEPTS_PER_SAMPLE + 2 {
            return Err(Error::config(
                "world.max_text_len",
                "need room for BOS, four names and EOS",
            ));
        }
        if !(0.0..1.0).contains(&self.duplication_rate)
            || !(0.0..1.0).contains(&self.distractor_rate)
            || self.noise_sigma < 0.0
        {
            return Err(Error::config("world", "rates must be in [0,1), noise_sigma >= 0"));
        }
        Ok(())
    }

    /// Vocabulary id of a concept's name token.
    pub fn name_token(&self, concept: usize) -> u32 {
        NUM_RESERVED + concept as u32
    }

    /// Unit-norm visual prototypes [K, patch_dim], a pure function of the
    /// world seed.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = derive_rng(self.world_seed, Stream::CorpusPlan, u64::MAX);
        (0..self.concepts)
            .map(|_| {
                let mut v: Vec<f64> = (0..self.patch_dim).map(|_| standard_normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut v {
                    *x /= norm;
                }
                v
            })
            .collect()
    }
}

fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One paired sample with ground-truth correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// [patches_per_image * patch_dim] row-major patch vectors.
    pub patches: Vec<f64>,
    /// BOS, concept names in random order, EOS.
    pub tokens: Vec<u32>,
    /// (patch slot, text position) for every concept patch, sorted by slot.
    pub truth: Vec<(usize, usize)>,
    /// Concept ids in the sample, sorted (the reusable "set").
    pub concept_set: Vec<usize>,
    /// True when the concept set was copied from an earlier sample.
    pub duplicated: bool,
}

/// Which split a generation call belongs to; splits share the world but use
/// disjoint seed streams, so no sample identity crosses over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    fn streams(self) -> (Stream, Stream) {
        match self {
            Split::Train => (Stream::CorpusPlan, Stream::CorpusSample),
            Split::Heldout => (Stream::HeldoutPlan, Stream::HeldoutSample),
        }
    }
}

/// Generate `n` samples. Bitwise-reproducible for (world, n, seed, split);
/// rendering is data-parallel over samples.
pub fn generate(world: &ConceptWorld, n: usize, seed: u64, split: Split) -> Result<Vec<PairedSample>> {
    generate_impl(world, n, seed, split, false)
}

/// Sequential twin of [`generate`] for the bench comparison.
pub fn generate_seq(world: &ConceptWorld, n: usize, seed: u64, split: Split) -> Result<Vec<PairedSample>> {
    generate_impl(world, n, seed, split, true)
}

fn generate_impl(
    world: &ConceptWorld,
    n: usize,
    seed: u64,
    split: Split,
    sequential: bool,
) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::Input("generate: n must be positive".into()));
    }
    world.validate(usize::MAX)?;
    let (plan_stream, sample_stream) = split.streams();

    // Phase 1 (sequential): concept sets with duplication of earlier sets.
    let mut plan_rng = derive_rng(seed, plan_stream, 0);
    let mut sets: Vec<(Vec<usize>, bool)> = Vec::with_capacity(n);
    for i in 0..n {
        let duplicate = i > 0 && plan_rng.gen::<f64>() < world.duplication_rate;
        let set = if duplicate {
            sets[plan_rng.gen_range(0..i)].0.clone()
        } else {
            let roll: f64 = plan_rng.gen();
            let mut acc = 0.0;
            let mut count = MAX_CONCEPTS_PER_SAMPLE;
            for (k, w) in CONCEPT_COUNT_WEIGHTS.iter().enumerate() {
                acc += w;
                if roll < acc {
                    count = k + 1;
                    break;
                }
            }
            let mut chosen = Vec::with_capacity(count);
            while chosen.len() < count {
                let c = plan_rng.gen_range(0..world.concepts);
                if !chosen.contains(&c) {
                    chosen.push(c);
                }
            }
            chosen.sort_unstable();
            chosen
        };
        sets.push((set, duplicate));
    }

    // Phase 2 (parallel): render each sample from its own derived seed.
    let prototypes = world.prototypes();
    let render = |i: usize| -> PairedSample {
        let mut rng = derive_rng(seed, sample_stream, i as u64 + 1);
        let (set, duplicated) = &sets[i];
        let m = set.len();
        let l1 = world.patches_per_image;

        let mut slots: Vec<usize> = (0..l1).collect();
        slots.shuffle(&mut rng);
        let concept_slots = &slots[..m];

        let mut patches = vec![0.0; l1 * world.patch_dim];
        for (k, &slot) in concept_slots.iter().enumerate() {
            let proto = &prototypes[set[k]];
            let dst = &mut patches[slot * world.patch_dim..(slot + 1) * world.patch_dim];
            for (o, &p) in dst.iter_mut().zip(proto) {
                *o = p + world.noise_sigma * standard_normal(&mut rng);
            }
        }
        for &slot in &slots[m..] {
            let dst = &mut patches[slot * world.patch_dim..(slot + 1) * world.patch_dim];
            if rng.gen::<f64>() < world.distractor_rate {
                // lookalike of a concept absent from the text
                let absent = loop {
                    let c = rng.gen_range(0..world.concepts);
                    if !set.contains(&c) {
                        break c;
                    }
                };
                let proto = &prototypes[absent];
                for (o, &p) in dst.iter_mut().zip(proto) {
                    *o = p + world.noise_sigma * standard_normal(&mut rng);
                }
            } else {
                // unstructured noise direction of unit length plus jitter
                let v: Vec<f64> = (0..world.patch_dim).map(|_| standard_normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (o, x) in dst.iter_mut().zip(&v) {
                    *o = x / norm + world.noise_sigma * standard_normal(&mut rng);
                }
            }
        }

        // text: names in random order
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut tokens = Vec::with_capacity(m + 2);
        tokens.push(BOS_ID);
        for &k in &order {
            tokens.push(world.name_token(set[k]));
        }
        tokens.push(EOS_ID);

        // truth: concept k sits at slot concept_slots[k] and text position
        // 1 + (its index in `order`)
        let mut truth: Vec<(usize, usize)> = (0..m)
            .map(|k| {
                let text_pos = 1 + order.iter().position(|&o| o == k).expect("order covers k");
                (concept_slots[k], text_pos)
            })
            .collect();
        truth.sort_unstable();

        PairedSample {
            patches,
            tokens,
            truth,
            concept_set: set.clone(),
            duplicated: *duplicated,
        }
    };

    Ok(if sequential {
        par::map_indexed_seq(n, render)
    } else {
        par::map_indexed(n, render)
    })
}

/// Pack samples into encoder batches. Order is preserved.
pub fn to_batches(world: &ConceptWorld, samples: &[PairedSample]) -> Result<(ImageBatch, TokenBatch)> {
    let n = samples.len();
    let mut data = Vec::with_capacity(n * world.patches_per_image * world.patch_dim);
    for s in samples {
        data.extend_from_slice(&s.patches);
    }
    let image = ImageBatch::new(n, world.patches_per_image, world.patch_dim, data)?;
    let rows: Vec<Vec<u32>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let text = TokenBatch::new(&rows, world.max_text_len)?;
    Ok((image, text))
}

/// Fraction of concept patches matched to their true name token.
pub fn oracle_matching_accuracy(assignment: &Assignment, truth: &[(usize, usize)]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth
        .iter()
        .filter(|&&(slot, pos)| assignment.column_of(slot) == Some(pos))
        .count();
    hits as f64 / truth.len() as f64
}

/// Monte Carlo估 chance level of matching accuracy: random injective
/// assignments of the sample's text positions onto patch slots.
pub fn chance_matching_accuracy(
    samples: &[PairedSample],
    patches_per_image: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let accs = par::map_indexed(samples.len(), |i| {
        let mut rng = derive_rng(seed, Stream::ChanceOracle, i as u64);
        let truth = &samples[i].truth;
        let m = truth.len();
        let mut acc = 0.0;
        let mut slots: Vec<usize> = (0..patches_per_image).collect();
        for _ in 0..trials {
            slots.shuffle(&mut rng);
            let assignment = Assignment {
                pairs: (0..m).map(|k| (slots[k], 1 + k)).collect(),
                total_cost: 0.0,
            };
            acc += oracle_matching_accuracy(&assignment, truth);
        }
        acc / trials as f64
    });
    accs.iter().sum::<f64>() / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> ConceptWorld {
        ConceptWorld {
            concepts: 16,
            patch_dim: 8,
            patches_per_image: 6,
            noise_sigma: 0.1,
            duplication_rate: 0.1,
            distractor_rate: 0.3,
            max_text_len: 8,
            world_seed: 3,
        }
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let w = small_world();
        let a = generate(&w, 50, 9, Split::Train).unwrap();
        let b = generate(&w, 50, 9, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = generate_seq(&w, 50, 9, Split::Train).unwrap();
        assert_eq!(a, c);
        let d = generate(&w, 50, 10, Split::Train).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn splits_share_world_but_not_samples() {
        let w = small_world();
        let train = generate(&w, 30, 9, Split::Train).unwrap();
        let heldout = generate(&w, 30, 9, Split::Heldout).unwrap();
        assert_ne!(train, heldout);
    }

    #[test]
    fn zero_noise_patches_equal_prototypes() {
        let mut w = small_world();
        w.noise_sigma = 0.0;
        w.distractor_rate = 0.0;
        let protos = w.prototypes();
        for s in generate(&w, 20, 4, Split::Train).unwrap() {
            for (k, &(slot, _)) in s.truth.iter().enumerate() {
                // truth is sorted by slot; recover which concept sits there
                let _ = k;
                let patch = &s.patches[slot * w.patch_dim..(slot + 1) * w.patch_dim];
                let matches_a_set_proto = s
                    .concept_set
                    .iter()
                    .any(|&c| patch.iter().zip(&protos[c]).all(|(a, b)| a == b));
                assert!(matches_a_set_proto, "concept patch must equal its prototype");
            }
        }
    }

    #[test]
    fn every_concept_has_its_name_token() {
        let w = small_world();
        for s in generate(&w, 100, 11, Split::Train).unwrap() {
            assert_eq!(s.tokens[0], BOS_ID);
            assert_eq!(*s.tokens.last().unwrap(), EOS_ID);
            assert_eq!(s.truth.len(), s.concept_set.len());
            for &c in &s.concept_set {
                assert!(s.tokens.contains(&w.name_token(c)));
            }
            // truth positions point at the right name tokens
            let slot_to_concept: Vec<usize> = s
                .truth
                .iter()
                .map(|&(slot, pos)| {
                    let token = s.tokens[pos];
                    let concept = (token - NUM_RESERVED) as usize;
                    assert!(s.concept_set.contains(&concept));
                    let _ = slot;
                    concept
                })
                .collect();
            // injective truth: all concepts distinct
            let mut seen = slot_to_concept.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), slot_to_concept.len());
        }
    }

    #[test]
    fn duplication_rate_hits_binomial_band() {
        let mut w = small_world();
        w.duplication_rate = 0.5;
        let n = 10_000;
        let samples = generate(&w, n, 13, Split::Train).unwrap();
        let dup = samples.iter().filter(|s| s.duplicated).count();
        // Binomial(n-1, 0.5): 3 sigma is ~150 counts = 0.015 in fraction.
        let frac = dup as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.015, "duplicate fraction {frac}");
    }

    #[test]
    fn q_zero_draws_independently() {
        let mut w = small_world();
        w.duplication_rate = 0.0;
        // with q = 0 the plan stream never consults earlier samples; the
        // first samples of longer runs coincide
        let a = generate(&w, 5, 21, Split::Train).unwrap();
        let b = generate(&w, 50, 21, Split::Train).unwrap();
        assert_eq!(a[..], b[..5]);
    }

    #[test]
    fn oracle_accuracy_boundaries() {
        let truth = vec![(0, 1), (2, 2), (4, 3)];
        let exact = Assignment {
            pairs: vec![(0, 1), (2, 2), (4, 3)],
            total_cost: 0.0,
        };
        assert_eq!(oracle_matching_accuracy(&exact, &truth), 1.0);
        let wrong = Assignment {
            pairs: vec![(0, 2), (2, 3), (4, 1)],
            total_cost: 0.0,
        };
        assert_eq!(oracle_matching_accuracy(&wrong, &truth), 0.0);
    }

    #[test]
    fn random_assignment_on_square_case_has_chance_one_over_m() {
        // m concepts, m patch slots: random injective assignment hits each
        // truth pair with probability 1/m.
        let w = ConceptWorld {
            concepts: 8,
            patches_per_image: MAX_CONCEPTS_PER_SAMPLE,
            ..small_world()
        };
        let samples: Vec<PairedSample> = generate(&w, 200, 31, Split::Train)
            .unwrap()
            .into_iter()
            .filter(|s| s.concept_set.len() == MAX_CONCEPTS_PER_SAMPLE)
            .collect();
        assert!(samples.len() > 30);
        let chance = chance_matching_accuracy(&samples, w.patches_per_image, 10_000, 5);
        let expected = 1.0 / MAX_CONCEPTS_PER_SAMPLE as f64;
        assert!(
            (chance - expected).abs() < 0.01,
            "chance {chance} vs {expected}"
        );
    }

    #[test]
    fn name_collision_with_reserved_ids_is_config_error() {
        let w = ConceptWorld {
            concepts: 61,
            ..small_world()
        };
        assert!(w.validate(64).is_err());
        let ok = ConceptWorld {
            concepts: 60,
            ..small_world()
        };
        assert!(ok.validate(64).is_ok());
    }

    #[test]
    fn batches_preserve_order_and_shapes() {
        let w = small_world();
        let samples = generate(&w, 12, 17, Split::Train).unwrap();
        let (img, txt) = to_batches(&w, &samples).unwrap();
        assert_eq!(img.n, 12);
        assert_eq!(img.patches, w.patches_per_image);
        assert_eq!(txt.n, 12);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(txt.ids(i), s.tokens.as_slice());
            assert_eq!(img.sample(i), s.patches.as_slice());
        }
    }
}
