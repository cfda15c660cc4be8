//! Seeded synthetic flip sources: a fair or biased coin, a two-parameter
//! model of human negative recency, and fixed repeating patterns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, XorShift64Star};
use crate::sequence::{Flip, FlipSequence, SequenceMeta};

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("{name} = {value} is not a probability")]
    Probability { name: &'static str, value: f64 },
    #[error("sequence length must be at least 1")]
    ZeroLength,
    #[error("sequence count must be at least 1")]
    ZeroCount,
    #[error("fixed pattern is empty")]
    EmptyPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Independent flips with `P(H) = p_heads`.
    Bernoulli { p_heads: f64 },
    /// First flip heads with `p_first_heads`; every later flip differs from
    /// its predecessor with `p_alternate`.
    MarkovAlternation { p_alternate: f64, p_first_heads: f64 },
    /// The pattern repeated cyclically and cut to length.
    FixedPattern { pattern: Vec<Flip> },
}

impl GeneratorKind {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::Bernoulli { .. } => "bernoulli",
            GeneratorKind::MarkovAlternation { .. } => "markov-alternation",
            GeneratorKind::FixedPattern { .. } => "fixed-pattern",
        }
    }

    /// Model id used in emitted records.
    pub fn model_id(&self) -> String {
        format!("synthetic:{}", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub length: usize,
    pub count: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn bernoulli(p_heads: f64, length: usize, count: usize, seed: u64) -> Self {
        Self { kind: GeneratorKind::Bernoulli { p_heads }, length, count, seed }
    }

    pub fn markov(p_alternate: f64, p_first_heads: f64, length: usize, count: usize, seed: u64) -> Self {
        Self { kind: GeneratorKind::MarkovAlternation { p_alternate, p_first_heads }, length, count, seed }
    }

    pub fn fixed(pattern: Vec<Flip>, length: usize, count: usize) -> Self {
        Self { kind: GeneratorKind::FixedPattern { pattern }, length, count, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let prob = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(GeneratorError::Probability { name, value })
            }
        };
        match &self.kind {
            GeneratorKind::Bernoulli { p_heads } => prob("p_heads", *p_heads)?,
            GeneratorKind::MarkovAlternation { p_alternate, p_first_heads } => {
                prob("p_alternate", *p_alternate)?;
                prob("p_first_heads", *p_first_heads)?;
            }
            GeneratorKind::FixedPattern { pattern } if pattern.is_empty() => {
                return Err(GeneratorError::EmptyPattern)
            }
            GeneratorKind::FixedPattern { .. } => {}
        }
        if self.length == 0 {
            return Err(GeneratorError::ZeroLength);
        }
        if self.count == 0 {
            return Err(GeneratorError::ZeroCount);
        }
        Ok(())
    }
}

/// Replicate `i` draws from its own stream seeded with `derive_seed(seed, i)`,
/// so output is identical however replicates are scheduled. The Markov source
/// consumes exactly one uniform per flip whatever its parameters, so raising
/// `p_alternate` under a fixed seed can only add alternations.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<FlipSequence>, GeneratorError> {
    spec.validate()?;
    let model = spec.kind.model_id();
    Ok((0..spec.count)
        .map(|replicate| {
            let flips = generate_one(&spec.kind, spec.length, derive_seed(spec.seed, replicate as u64));
            FlipSequence::new(
                flips,
                SequenceMeta { model: model.clone(), prompt_id: "synthetic".into(), temperature: 0.0, replicate },
            )
        })
        .collect())
}

fn generate_one(kind: &GeneratorKind, length: usize, seed: u64) -> Vec<Flip> {
    let mut rng = XorShift64Star::new(seed);
    match kind {
        GeneratorKind::Bernoulli { p_heads } => (0..length).map(|_| coin(rng.bernoulli(*p_heads))).collect(),
        GeneratorKind::MarkovAlternation { p_alternate, p_first_heads } => {
            let mut out = Vec::with_capacity(length);
            let mut current = coin(rng.bernoulli(*p_first_heads));
            out.push(current);
            for _ in 1..length {
                if rng.bernoulli(*p_alternate) {
                    current = current.opposite();
                }
                out.push(current);
            }
            out
        }
        GeneratorKind::FixedPattern { pattern } => pattern.iter().copied().cycle().take(length).collect(),
    }
}

fn coin(heads: bool) -> Flip {
    if heads {
        Flip::Heads
    } else {
        Flip::Tails
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::parse_letters;

    fn alternations(f: &[Flip]) -> usize {
        f.windows(2).filter(|w| w[0] != w[1]).count()
    }

    #[test]
    fn fixed_pattern_alternates() {
        let seqs = generate(&GeneratorSpec::fixed(vec![Flip::Heads, Flip::Tails], 20, 3)).unwrap();
        assert_eq!(seqs.len(), 3);
        assert_eq!(seqs[0].flips, parse_letters("HTHTHTHTHTHTHTHTHTHT").unwrap());
        assert_eq!(alternations(&seqs[0].flips), 19);
        assert_eq!(seqs[2].meta.model, "synthetic:fixed-pattern");
    }

    #[test]
    fn fixed_pattern_truncates() {
        let seqs = generate(&GeneratorSpec::fixed(parse_letters("HHT").unwrap(), 7, 1)).unwrap();
        assert_eq!(seqs[0].flips, parse_letters("HHTHHTH").unwrap());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = GeneratorSpec::markov(0.6, 0.8, 20, 50, 17);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = GeneratorSpec { seed: 18, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn degenerate_probabilities() {
        let all_heads = generate(&GeneratorSpec::bernoulli(1.0, 10, 5, 1)).unwrap();
        assert!(all_heads.iter().all(|s| s.flips.iter().all(|f| f.is_heads())));
        let never_alt = generate(&GeneratorSpec::markov(0.0, 0.0, 10, 5, 1)).unwrap();
        assert!(never_alt.iter().all(|s| s.flips.iter().all(|f| !f.is_heads())));
        let always_alt = generate(&GeneratorSpec::markov(1.0, 1.0, 10, 1, 1)).unwrap();
        assert_eq!(alternations(&always_alt[0].flips), 9);
    }

    #[test]
    fn invalid_specs() {
        assert_eq!(
            GeneratorSpec::bernoulli(1.2, 5, 1, 0).validate(),
            Err(GeneratorError::Probability { name: "p_heads", value: 1.2 })
        );
        assert_eq!(GeneratorSpec::bernoulli(0.5, 0, 1, 0).validate(), Err(GeneratorError::ZeroLength));
        assert_eq!(GeneratorSpec::bernoulli(0.5, 5, 0, 0).validate(), Err(GeneratorError::ZeroCount));
        assert_eq!(GeneratorSpec::fixed(vec![], 5, 1).validate(), Err(GeneratorError::EmptyPattern));
    }

    #[test]
    fn spec_serializes_flat() {
        let spec = GeneratorSpec::markov(0.6, 0.5, 20, 10, 3);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"markov-alternation\""));
        let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
