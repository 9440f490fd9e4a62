//! Seeded synthetic catalogs with a known compatibility structure.
//!
//! Every item belongs to a latent group. Its title mixes tokens drawn from the
//! group's own token set with tokens from a shared noise pool. Groups are
//! related by a random symmetric relation (each group is compatible with
//! itself); a pair is positive exactly when the groups of its two items are
//! related.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tags};

const MAX_ATTEMPTS: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub groups: usize,
    pub tokens_per_group: usize,
    pub noise_pool: usize,
    pub items: usize,
    /// Total labelled pairs; half positive, half negative.
    pub pairs: usize,
    pub style_tokens: usize,
    pub noise_tokens: usize,
    /// Probability that two distinct groups are compatible.
    pub relation_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 20,
            tokens_per_group: 10,
            noise_pool: 200,
            items: 2000,
            pairs: 20_000,
            style_tokens: 3,
            noise_tokens: 3,
            relation_density: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 groups".into(),
            ));
        }
        if self.tokens_per_group == 0 || self.items < 2 || self.pairs < 2 || self.style_tokens == 0
        {
            return Err(Error::Config(
                "tokens per group, style tokens must be >= 1; items and pairs >= 2".into(),
            ));
        }
        if self.noise_tokens > 0 && self.noise_pool == 0 {
            return Err(Error::Config(
                "noise tokens requested from an empty noise pool".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.relation_density) {
            return Err(Error::Config("relation density must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub group: usize,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub items: Vec<SynthItem>,
    /// `(query index, candidate index, label)`.
    pub pairs: Vec<(usize, usize, u8)>,
    /// Symmetric `groups × groups` relation, row-major.
    pub relation: Vec<bool>,
    pub groups: usize,
}

impl SynthData {
    pub fn compatible(&self, a: usize, b: usize) -> bool {
        self.relation[a * self.groups + b]
    }

    pub fn items_tsv(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            let _ = writeln!(out, "{}\t{}", it.id, it.tokens.join(" "));
        }
        out
    }

    pub fn pairs_tsv(&self) -> String {
        let mut out = String::new();
        for &(q, c, l) in &self.pairs {
            let _ = writeln!(out, "{}\t{}\t{}", self.items[q].id, self.items[c].id, l);
        }
        out
    }
}

fn draw_relation<R: Rng>(g: usize, density: f64, rng: &mut R) -> Vec<bool> {
    let mut rel = vec![false; g * g];
    for a in 0..g {
        rel[a * g + a] = true;
        for b in a + 1..g {
            let on = rng.gen_bool(density);
            rel[a * g + b] = on;
            rel[b * g + a] = on;
        }
    }
    rel
}

/// Draws `count` distinct ordered pairs `(q, c)`, `q ≠ c`, whose group
/// relation equals `want`. `None` when rejection sampling runs dry.
fn draw_pairs<R: Rng>(
    groups: &[usize],
    relation: &[bool],
    g: usize,
    want: bool,
    count: usize,
    rng: &mut R,
) -> Option<Vec<(usize, usize)>> {
    let n = groups.len();
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return None;
        }
        let q = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        if q == c || relation[groups[q] * g + groups[c]] != want || !seen.insert((q, c)) {
            continue;
        }
        out.push((q, c));
    }
    Some(out)
}

/// Available ordered pairs `(q ≠ c)` per relation value.
fn pair_capacity(groups: &[usize], relation: &[bool], g: usize) -> (usize, usize) {
    let mut sizes = vec![0usize; g];
    for &gr in groups {
        sizes[gr] += 1;
    }
    let (mut pos, mut neg) = (0usize, 0usize);
    for a in 0..g {
        for b in 0..g {
            let mut cnt = sizes[a] * sizes[b];
            if a == b {
                cnt -= sizes[a];
            }
            if relation[a * g + b] {
                pos += cnt;
            } else {
                neg += cnt;
            }
        }
    }
    (pos, neg)
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let g = config.groups;
    let half = config.pairs / 2;
    let group_tokens: Vec<Vec<String>> = (0..g)
        .map(|gi| {
            (0..config.tokens_per_group)
                .map(|t| format!("s{gi}_{t}"))
                .collect()
        })
        .collect();
    let noise: Vec<String> = (0..config.noise_pool).map(|i| format!("n{i}")).collect();

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng::stream(config.seed, &[tags::SYNTH, attempt]);
        let relation = draw_relation(g, config.relation_density, &mut rng);
        let groups: Vec<usize> = (0..config.items).map(|_| rng.gen_range(0..g)).collect();
        let (pos_cap, neg_cap) = pair_capacity(&groups, &relation, g);
        if pos_cap < half || neg_cap < half {
            continue;
        }

        let items: Vec<SynthItem> = groups
            .iter()
            .enumerate()
            .map(|(i, &gr)| {
                let own = &group_tokens[gr];
                let mut tokens: Vec<String> = if config.style_tokens <= own.len() {
                    index::sample(&mut rng, own.len(), config.style_tokens)
                        .into_iter()
                        .map(|t| own[t].clone())
                        .collect()
                } else {
                    (0..config.style_tokens)
                        .map(|_| own[rng.gen_range(0..own.len())].clone())
                        .collect()
                };
                for _ in 0..config.noise_tokens {
                    tokens.push(noise[rng.gen_range(0..noise.len())].clone());
                }
                tokens.shuffle(&mut rng);
                SynthItem {
                    id: format!("item{i:05}"),
                    group: gr,
                    tokens,
                }
            })
            .collect();

        let Some(pos) = draw_pairs(&groups, &relation, g, true, half, &mut rng) else {
            continue;
        };
        let Some(neg) = draw_pairs(&groups, &relation, g, false, half, &mut rng) else {
            continue;
        };
        let mut pairs: Vec<(usize, usize, u8)> = pos
            .into_iter()
            .map(|(q, c)| (q, c, 1))
            .chain(neg.into_iter().map(|(q, c)| (q, c, 0)))
            .collect();
        pairs.shuffle(&mut rng);
        return Ok(SynthData {
            items,
            pairs,
            relation,
            groups: g,
        });
    }
    Err(Error::Data(format!(
        "could not draw a feasible synthetic dataset in {MAX_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_balanced_and_consistent() {
        let data = generate(&SynthConfig::default()).unwrap();
        assert_eq!(data.items.len(), 2000);
        assert_eq!(data.pairs.len(), 20_000);
        let positives = data.pairs.iter().filter(|p| p.2 == 1).count();
        assert_eq!(positives, 10_000);
        for &(q, c, l) in &data.pairs {
            let compat = data.compatible(data.items[q].group, data.items[c].group);
            assert_eq!(compat, l == 1);
            assert_ne!(q, c);
        }
        let uniq: HashSet<_> = data.pairs.iter().map(|p| (p.0, p.1)).collect();
        assert_eq!(uniq.len(), data.pairs.len());
        for it in &data.items {
            assert_eq!(it.tokens.len(), 6);
        }
    }

    #[test]
    fn relation_is_symmetric_and_reflexive() {
        let data = generate(&SynthConfig {
            items: 100,
            pairs: 200,
            ..Default::default()
        })
        .unwrap();
        for a in 0..data.groups {
            assert!(data.compatible(a, a));
            for b in 0..data.groups {
                assert_eq!(data.compatible(a, b), data.compatible(b, a));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            items: 200,
            pairs: 400,
            seed: 42,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.items_tsv(), b.items_tsv());
        assert_eq!(a.pairs_tsv(), b.pairs_tsv());
        let c = generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.pairs_tsv(), c.pairs_tsv());
    }

    #[test]
    fn two_groups_without_noise_are_token_separable() {
        let cfg = SynthConfig {
            groups: 2,
            tokens_per_group: 4,
            noise_pool: 0,
            noise_tokens: 0,
            items: 40,
            pairs: 100,
            style_tokens: 2,
            relation_density: 0.0,
            seed: 5,
        };
        let data = generate(&cfg).unwrap();
        for &(q, c, l) in &data.pairs {
            // the group is readable from any single token
            let gq = &data.items[q].tokens[0][..3];
            let gc = &data.items[c].tokens[0][..3];
            assert_eq!(gq == gc, l == 1);
        }
    }

    #[test]
    fn infeasible_relation_is_reported() {
        // density 1 leaves no incompatible pair to draw
        let cfg = SynthConfig {
            items: 50,
            pairs: 100,
            relation_density: 1.0,
            ..Default::default()
        };
        assert!(generate(&cfg).is_err());
        assert!(generate(&SynthConfig {
            groups: 1,
            ..Default::default()
        })
        .is_err());
    }
}
