//! Deterministic synthetic domain stream.
//!
//! Each domain owns a slice of the content vocabulary and `k` first-order
//! Markov templates over that slice; the classification label of a task
//! sample is the index of the template that generated it. A domain may
//! share a `ρ`-fraction of its slice with an earlier domain, which makes
//! inter-domain similarity a dial: `ρ = 0` gives disjoint content
//! vocabularies, `ρ = 1` reuses the earlier domain's templates outright.
//!
//! Content is seeded per `domain_id`, never per stream position, so
//! permuting a stream permutes the domains without changing any of them.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::DownstreamTask;
use crate::model::FIRST_CONTENT_TOKEN;
use crate::rng::{derive_rng, DetRng};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Stable identity; also the downstream task id and the content seed.
    pub domain_id: u32,
    /// Template count = downstream class count.
    pub classes: usize,
    /// Inclusive sentence-length range for corpus and task sentences.
    pub sentence_len: (usize, usize),
    /// Fraction of this domain's content slice shared with `similar_to`.
    pub rho: f64,
    /// Earlier domain the shared tokens come from; required when `ρ > 0`.
    pub similar_to: Option<u32>,
    pub corpus_size: usize,
    pub task_train: usize,
    /// Labeled pool split 30% validation / 70% test.
    pub task_test_pool: usize,
    /// Content tokens owned by this domain.
    pub vocab_slice: usize,
    /// Override for the stream-level content seed.
    pub seed: Option<u64>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::InvalidConfig { detail });
        if self.classes < 2 {
            return bad(alloc::format!("domain {}: classes must be >= 2", self.domain_id));
        }
        if self.sentence_len.0 == 0 || self.sentence_len.0 > self.sentence_len.1 {
            return bad(alloc::format!(
                "domain {}: bad sentence length range {:?}",
                self.domain_id,
                self.sentence_len
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(alloc::format!("domain {}: rho {} outside [0,1]", self.domain_id, self.rho));
        }
        if self.rho > 0.0 && self.similar_to.is_none() {
            return bad(alloc::format!(
                "domain {}: rho > 0 requires similar_to",
                self.domain_id
            ));
        }
        if self.similar_to == Some(self.domain_id) {
            return bad(alloc::format!("domain {} cannot be similar to itself", self.domain_id));
        }
        if self.corpus_size == 0 || self.task_train == 0 || self.task_test_pool < 4 {
            return bad(alloc::format!(
                "domain {}: corpus and task splits must be non-trivial",
                self.domain_id
            ));
        }
        if self.vocab_slice < 2 {
            return bad(alloc::format!("domain {}: vocab_slice must be >= 2", self.domain_id));
        }
        Ok(())
    }
}

/// First-order token-transition template. Rows are probability vectors
/// over the domain slice; sampling walks the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    tokens: Vec<u32>,
    start: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl Template {
    /// A template concentrates mass on a random subset of the slice (its
    /// affinity profile) and sharpens transitions within it, so templates
    /// over the same slice still differ in unigram and bigram structure.
    fn build(tokens: &[u32], rng: &mut DetRng) -> Self {
        let n = tokens.len();
        let affinity: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                u * u * u + 0.05
            })
            .collect();
        let start = normalize(&affinity);
        let mut transitions = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    let u: f64 = rng.gen();
                    affinity[j] * (0.1 + u * u * 3.0)
                })
                .collect();
            transitions.push(normalize(&row));
        }
        Template { tokens: tokens.to_vec(), start, transitions }
    }

    fn sample_index(probs: &[f64], rng: &mut DetRng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn generate(&self, len: usize, rng: &mut DetRng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut ix = Self::sample_index(&self.start, rng);
        out.push(self.tokens[ix]);
        for _ in 1..len {
            ix = Self::sample_index(&self.transitions[ix], rng);
            out.push(self.tokens[ix]);
        }
        out
    }
}

fn normalize(w: &[f64]) -> Vec<f64> {
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

/// One generated domain: unlabeled corpus plus its downstream task, with
/// the generating templates kept for `ρ = 1` reuse.
#[derive(Debug, Clone)]
pub struct SyntheticDomain {
    pub spec: DomainSpec,
    pub slice: Vec<u32>,
    pub templates: Vec<Template>,
    pub corpus: Vec<Vec<u32>>,
    pub task: DownstreamTask,
}

/// Ordered stream of domains; order is exactly the spec order.
#[derive(Debug, Clone)]
pub struct DomainStream {
    pub domains: Vec<SyntheticDomain>,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Content digest over every corpus sentence and task sample; two
    /// runs are comparable only when these match.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in &self.domains {
            h.update(d.spec.domain_id.to_le_bytes());
            for s in &d.corpus {
                for t in s {
                    h.update(t.to_le_bytes());
                }
                h.update([0xfe]);
            }
            for split in [&d.task.train, &d.task.val, &d.task.test] {
                for (s, label) in split {
                    for t in s {
                        h.update(t.to_le_bytes());
                    }
                    h.update(label.to_le_bytes());
                    h.update([0xfd]);
                }
            }
        }
        h.finalize().into()
    }
}

/// Generate one domain. `fresh_offset` is the start of this domain's
/// private strip of content-token ids; the stream builder lays strips out
/// disjointly. `predecessor` supplies shared tokens (and, at `ρ = 1`,
/// the templates themselves).
pub fn make_domain(
    spec: &DomainSpec,
    predecessor: Option<&SyntheticDomain>,
    vocab_size: usize,
    fresh_offset: u32,
    rng: &mut DetRng,
) -> Result<SyntheticDomain> {
    spec.validate()?;
    if fresh_offset as usize + spec.vocab_slice > vocab_size {
        return Err(Error::VocabExhausted {
            domain_id: spec.domain_id,
            needed: fresh_offset as usize + spec.vocab_slice,
            vocab: vocab_size,
        });
    }
    if spec.rho > 0.0 && predecessor.is_none() {
        return Err(Error::UnknownSimilarDomain {
            domain_id: spec.domain_id,
            similar_to: spec.similar_to.unwrap_or(u32::MAX),
        });
    }

    // Content slice: shared tokens drawn from the predecessor's slice,
    // the remainder from this domain's private strip.
    let shared_count = libm::round(spec.rho * spec.vocab_slice as f64) as usize;
    let shared_count = shared_count.min(spec.vocab_slice);
    let mut slice: Vec<u32> = Vec::with_capacity(spec.vocab_slice);
    if shared_count > 0 {
        let pred = predecessor.expect("checked above");
        let mut pool = pred.slice.clone();
        let take = shared_count.min(pool.len());
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        slice.extend_from_slice(&pool[..take]);
    }
    let mut next_fresh = fresh_offset;
    while slice.len() < spec.vocab_slice {
        slice.push(next_fresh);
        next_fresh += 1;
    }

    let templates: Vec<Template> = if spec.rho >= 1.0 {
        let pred = predecessor.expect("checked above");
        if pred.templates.len() != spec.classes {
            return Err(Error::InvalidConfig {
                detail: alloc::format!(
                    "domain {}: rho = 1 requires the same class count as domain {}",
                    spec.domain_id,
                    pred.spec.domain_id
                ),
            });
        }
        pred.templates.clone()
    } else {
        (0..spec.classes).map(|_| Template::build(&slice, rng)).collect()
    };

    let mut sentence = |template: &Template, rng: &mut DetRng| {
        let len = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
        template.generate(len, rng)
    };

    let corpus: Vec<Vec<u32>> = (0..spec.corpus_size)
        .map(|_| {
            let t = rng.gen_range(0..spec.classes);
            sentence(&templates[t], rng)
        })
        .collect();

    // Balanced labelled samples: round-robin over templates.
    let mut labelled = |count: usize, rng: &mut DetRng| -> Vec<(Vec<u32>, u32)> {
        (0..count)
            .map(|i| {
                let label = (i % spec.classes) as u32;
                (sentence(&templates[label as usize], rng), label)
            })
            .collect()
    };
    let train = labelled(spec.task_train, rng);
    let pool = labelled(spec.task_test_pool, rng);

    // Stratified 30/70 validation/test split of the pool.
    let mut by_class: BTreeMap<u32, Vec<(Vec<u32>, u32)>> = BTreeMap::new();
    for item in pool {
        by_class.entry(item.1).or_default().push(item);
    }
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (_, items) in by_class {
        let n_val = libm::round(0.3 * items.len() as f64) as usize;
        for (i, item) in items.into_iter().enumerate() {
            if i < n_val {
                val.push(item);
            } else {
                test.push(item);
            }
        }
    }

    let task = DownstreamTask {
        task_id: spec.domain_id,
        classes: spec.classes,
        train,
        val,
        test,
    };
    task.validate()?;

    Ok(SyntheticDomain {
        spec: spec.clone(),
        slice,
        templates,
        corpus,
        task,
    })
}

/// Build a stream from specs. Domains are generated in dependency order
/// (a `similar_to` reference must name another spec in the list) but
/// presented in spec order, and each domain's randomness derives from its
/// own id, so reordering specs permutes the stream without altering any
/// domain's content.
pub fn make_stream(
    specs: &[DomainSpec],
    vocab_size: usize,
    stream_seed: u64,
) -> Result<DomainStream> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig {
            detail: "stream needs at least one domain".into(),
        });
    }
    let mut ids = alloc::collections::BTreeSet::new();
    for spec in specs {
        spec.validate()?;
        if !ids.insert(spec.domain_id) {
            return Err(Error::DuplicateDomain { domain_id: spec.domain_id });
        }
    }
    for spec in specs {
        if let Some(dep) = spec.similar_to {
            if spec.rho > 0.0 && !ids.contains(&dep) {
                return Err(Error::UnknownSimilarDomain {
                    domain_id: spec.domain_id,
                    similar_to: dep,
                });
            }
        }
    }

    // Disjoint private strips, laid out by ascending domain id.
    let mut sorted: Vec<&DomainSpec> = specs.iter().collect();
    sorted.sort_by_key(|s| s.domain_id);
    let mut offsets: BTreeMap<u32, u32> = BTreeMap::new();
    let mut cursor = FIRST_CONTENT_TOKEN;
    for spec in &sorted {
        offsets.insert(spec.domain_id, cursor);
        cursor = cursor
            .checked_add(spec.vocab_slice as u32)
            .ok_or(Error::VocabExhausted {
                domain_id: spec.domain_id,
                needed: usize::MAX,
                vocab: vocab_size,
            })?;
    }

    // Dependency-ordered construction.
    let mut built: BTreeMap<u32, SyntheticDomain> = BTreeMap::new();
    let mut remaining: Vec<&DomainSpec> = specs.iter().collect();
    while !remaining.is_empty() {
        let before = remaining.len();
        remaining.retain(|spec| {
            let dep_ready = match (spec.rho > 0.0, spec.similar_to) {
                (true, Some(dep)) => built.contains_key(&dep),
                _ => true,
            };
            if !dep_ready {
                return true;
            }
            let mut rng = derive_rng(
                spec.seed.unwrap_or(stream_seed),
                "domain",
                &[spec.domain_id as u64],
            );
            let predecessor = spec.similar_to.and_then(|d| built.get(&d)).cloned();
            match make_domain(spec, predecessor.as_ref(), vocab_size, offsets[&spec.domain_id], &mut rng)
            {
                Ok(domain) => {
                    built.insert(spec.domain_id, domain);
                    false
                }
                Err(_) => true, // retried below; real errors surface after the loop
            }
        });
        if remaining.len() == before {
            // No progress. Surface a hard generation error if any spec
            // with satisfied dependencies failed; otherwise it's a cycle.
            for spec in &remaining {
                let dep_ready = match (spec.rho > 0.0, spec.similar_to) {
                    (true, Some(dep)) => built.contains_key(&dep),
                    _ => true,
                };
                if dep_ready {
                    let mut rng = derive_rng(
                        spec.seed.unwrap_or(stream_seed),
                        "domain",
                        &[spec.domain_id as u64],
                    );
                    let predecessor = spec.similar_to.and_then(|d| built.get(&d)).cloned();
                    make_domain(
                        spec,
                        predecessor.as_ref(),
                        vocab_size,
                        offsets[&spec.domain_id],
                        &mut rng,
                    )?;
                }
            }
            return Err(Error::SimilarityCycle { domain_id: remaining[0].domain_id });
        }
    }

    Ok(DomainStream {
        domains: specs.iter().map(|s| built.remove(&s.domain_id).expect("built")).collect(),
    })
}

/// Total-variation distance between the unigram distributions of two
/// corpora; the measurement behind the similarity-dial checks.
pub fn unigram_tv_distance(a: &[Vec<u32>], b: &[Vec<u32>]) -> f64 {
    let hist = |corpus: &[Vec<u32>]| -> BTreeMap<u32, f64> {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        let mut total = 0.0;
        for s in corpus {
            for &t in s {
                *counts.entry(t).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
        for v in counts.values_mut() {
            *v /= total;
        }
        counts
    };
    let (pa, pb) = (hist(a), hist(b));
    let mut keys: alloc::collections::BTreeSet<u32> = pa.keys().copied().collect();
    keys.extend(pb.keys().copied());
    0.5 * keys
        .into_iter()
        .map(|k| (pa.get(&k).unwrap_or(&0.0) - pb.get(&k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// The default four-domain benchmark: a similar neighbor pair
/// (`ρ = 0.8`), one distant domain (`ρ = 0.1`), and one domain revisiting
/// the first (`ρ = 0.6`).
pub fn default_stream_specs() -> Vec<DomainSpec> {
    let base = DomainSpec {
        domain_id: 1,
        classes: 4,
        sentence_len: (6, 14),
        rho: 0.0,
        similar_to: None,
        corpus_size: 400,
        task_train: 160,
        task_test_pool: 230,
        vocab_slice: 24,
        seed: None,
    };
    vec![
        base.clone(),
        DomainSpec { domain_id: 2, rho: 0.8, similar_to: Some(1), ..base.clone() },
        DomainSpec { domain_id: 3, rho: 0.1, similar_to: Some(2), ..base.clone() },
        DomainSpec { domain_id: 4, rho: 0.6, similar_to: Some(1), ..base },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: u32, rho: f64, similar_to: Option<u32>) -> DomainSpec {
        DomainSpec {
            domain_id: id,
            classes: 3,
            sentence_len: (4, 8),
            rho,
            similar_to,
            corpus_size: 200,
            task_train: 30,
            task_test_pool: 30,
            vocab_slice: 12,
            seed: None,
        }
    }

    #[test]
    fn rho_zero_gives_disjoint_content_sets() {
        let stream = make_stream(&[spec(1, 0.0, None), spec(2, 0.0, None)], 64, 9).unwrap();
        let a: alloc::collections::BTreeSet<u32> = stream.domains[0].slice.iter().copied().collect();
        let b: alloc::collections::BTreeSet<u32> = stream.domains[1].slice.iter().copied().collect();
        assert!(a.is_disjoint(&b));
        let corpus_tokens = |d: &SyntheticDomain| -> alloc::collections::BTreeSet<u32> {
            d.corpus.iter().flatten().copied().collect()
        };
        assert!(corpus_tokens(&stream.domains[0]).is_disjoint(&corpus_tokens(&stream.domains[1])));
    }

    #[test]
    fn rho_one_matches_predecessor_distribution() {
        let mut specs = [spec(1, 0.0, None), spec(2, 1.0, Some(1))];
        for s in specs.iter_mut() {
            s.corpus_size = 3000;
        }
        let stream = make_stream(&specs, 64, 4).unwrap();
        let tv = unigram_tv_distance(&stream.domains[0].corpus, &stream.domains[1].corpus);
        assert!(tv <= 0.02, "tv {tv}");
        assert_eq!(stream.domains[0].templates, stream.domains[1].templates);
    }

    #[test]
    fn label_histogram_is_balanced_within_one() {
        let mut s = spec(1, 0.0, None);
        s.classes = 10;
        s.task_train = 2000;
        s.task_test_pool = 500;
        s.vocab_slice = 20;
        let stream = make_stream(&[s], 64, 3).unwrap();
        let task = &stream.domains[0].task;
        for split in [&task.train, &task.val, &task.test] {
            let mut counts = BTreeMap::new();
            for (_, label) in split {
                *counts.entry(*label).or_insert(0usize) += 1;
            }
            let min = counts.values().min().unwrap();
            let max = counts.values().max().unwrap();
            assert!(max - min <= 1, "split imbalance {counts:?}");
        }
        // 30% of the pool is validation.
        assert_eq!(task.val.len(), 150);
        assert_eq!(task.test.len(), 350);
    }

    #[test]
    fn stream_is_deterministic_and_id_seeded() {
        let specs = [spec(1, 0.0, None), spec(2, 0.5, Some(1)), spec(3, 0.0, None)];
        let s1 = make_stream(&specs, 96, 7).unwrap();
        let s2 = make_stream(&specs, 96, 7).unwrap();
        assert_eq!(s1.content_hash(), s2.content_hash());

        // Permutation: domain 3 does not depend on 1 or 2, so moving it
        // first must leave every domain's content untouched.
        let permuted = [specs[2].clone(), specs[0].clone(), specs[1].clone()];
        let s3 = make_stream(&permuted, 96, 7).unwrap();
        assert_eq!(s3.domains[0].corpus, s1.domains[2].corpus);
        assert_eq!(s3.domains[1].corpus, s1.domains[0].corpus);
        assert_eq!(s3.domains[2].corpus, s1.domains[1].corpus);
    }

    #[test]
    fn single_domain_stream_is_valid() {
        let stream = make_stream(&[spec(1, 0.0, None)], 64, 1).unwrap();
        assert_eq!(stream.len(), 1);
    }

    #[test]
    fn vocab_exhaustion_and_bad_links_error() {
        let err = make_stream(&[spec(1, 0.0, None)], 10, 1);
        assert!(matches!(err, Err(Error::VocabExhausted { domain_id: 1, .. })));

        let err = make_stream(&[spec(1, 0.5, Some(9))], 64, 1);
        assert!(matches!(
            err,
            Err(Error::UnknownSimilarDomain { domain_id: 1, similar_to: 9 })
        ));

        let err = make_stream(&[spec(1, 0.5, Some(2)), spec(2, 0.5, Some(1))], 64, 1);
        assert!(matches!(err, Err(Error::SimilarityCycle { .. })));

        let err = make_stream(&[spec(1, 0.0, None), spec(1, 0.0, None)], 64, 1);
        assert!(matches!(err, Err(Error::DuplicateDomain { domain_id: 1 })));
    }

    #[test]
    fn tv_distance_tracks_the_similarity_dial() {
        // Averaged over seeds, higher rho must give smaller distance to
        // the base domain.
        let mut mean_tv = [0.0f64; 3];
        let rhos = [0.1, 0.5, 0.9];
        let seeds = 10;
        for seed in 0..seeds {
            for (i, &rho) in rhos.iter().enumerate() {
                let mut specs = [spec(1, 0.0, None), spec(2, rho, Some(1))];
                specs[0].seed = Some(100 + seed);
                specs[1].seed = Some(200 + seed);
                let stream = make_stream(&specs, 64, 0).unwrap();
                mean_tv[i] +=
                    unigram_tv_distance(&stream.domains[0].corpus, &stream.domains[1].corpus)
                        / seeds as f64;
            }
        }
        assert!(
            mean_tv[0] > mean_tv[1] && mean_tv[1] > mean_tv[2],
            "tv not monotone: {mean_tv:?}"
        );
    }

    #[test]
    fn example_stream_orders_adjacent_distances() {
        // Four domains with links (–, 0.8, 0.8, 0.1): the 0.8-linked pair
        // sits closer than the 0.1-linked tail to its reference.
        let specs = [
            spec(1, 0.0, None),
            spec(2, 0.8, Some(1)),
            spec(3, 0.8, Some(2)),
            spec(4, 0.1, Some(1)),
        ];
        let stream = make_stream(&specs, 96, 5).unwrap();
        let d12 = unigram_tv_distance(&stream.domains[0].corpus, &stream.domains[1].corpus);
        let d14 = unigram_tv_distance(&stream.domains[0].corpus, &stream.domains[3].corpus);
        assert!(d12 < d14, "d(1,2) = {d12} not below d(1,4) = {d14}");
    }
}
