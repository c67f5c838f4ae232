//! Changing-priors benchmark generator.
//!
//! Each question prototype has a type (Y/N, Num, Other) owning a disjoint
//! slice of the answer space and a preferred answer inside that slice. The
//! training split concentrates answers on the preferred one; the test split
//! uses a deranged preference, so the training prior misleads. Visual
//! features carry a fixed code of the true answer with probability `γ`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tickets_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInput};

pub const CLS_TOKEN: usize = 0;
pub const QUESTION_LEN: usize = 4;
const TYPE_TOKEN_BASE: usize = 1;
const PROTOTYPE_TOKEN_BASE: usize = 4;
const SUFFIX_TOKENS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    #[serde(rename = "Y/N")]
    YesNo,
    Num,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::YesNo, QuestionType::Num, QuestionType::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::YesNo => "Y/N",
            QuestionType::Num => "Num",
            QuestionType::Other => "Other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// `K`
    pub answer_count: usize,
    /// `Q`
    pub prototype_count: usize,
    /// `β`
    pub bias_strength: f64,
    /// `γ`
    pub visual_informativeness: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub objects: usize,
    pub feature_dim: usize,
    pub distractor_prob: f64,
    pub distractor_score: f64,
    /// Multiplier on answer codes; noise objects are standard normal.
    pub code_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            answer_count: 16,
            prototype_count: 24,
            bias_strength: 0.9,
            visual_informativeness: 0.8,
            train_size: 20_000,
            test_size: 5_000,
            seed: 0,
            objects: 8,
            feature_dim: 16,
            distractor_prob: 0.2,
            distractor_score: 0.3,
            code_scale: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthSpec(m));
        if self.answer_count < 6 {
            return bad(format!(
                "need at least 6 answers to give every question type two, got {}",
                self.answer_count
            ));
        }
        if self.prototype_count < 3 {
            return bad(format!("need at least 3 prototypes, got {}", self.prototype_count));
        }
        for (name, v) in [
            ("bias strength", self.bias_strength),
            ("visual informativeness", self.visual_informativeness),
            ("distractor probability", self.distractor_prob),
            ("distractor score", self.distractor_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.distractor_score >= 1.0 {
            return bad("distractor score must stay below the ground-truth score".into());
        }
        if self.objects == 0 || self.feature_dim == 0 {
            return bad("visual input needs objects and features".into());
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        PROTOTYPE_TOKEN_BASE + self.prototype_count + SUFFIX_TOKENS
    }

    /// Adjusts the input-facing fields of `base` to this benchmark.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            visual_feature_dim: self.feature_dim,
            answer_count: self.answer_count,
            max_question_len: QUESTION_LEN,
            visual_objects: self.objects,
            ..base.clone()
        }
    }

    /// Answer range `[start, end)` owned by a question type.
    pub fn slice(&self, t: QuestionType) -> (usize, usize) {
        let num = (self.answer_count.saturating_sub(2) / 3).max(2);
        match t {
            QuestionType::YesNo => (0, 2),
            QuestionType::Num => (2, 2 + num),
            QuestionType::Other => (2 + num, self.answer_count),
        }
    }

    pub fn slice_len(&self, t: QuestionType) -> usize {
        let (a, b) = self.slice(t);
        b - a
    }

    pub fn prototype_type(&self, prototype: usize) -> QuestionType {
        QuestionType::ALL[prototype % 3]
    }

    /// Fraction of prototypes of each type.
    pub fn type_weight(&self, t: QuestionType) -> f64 {
        let n = (0..self.prototype_count).filter(|&p| self.prototype_type(p) == t).count();
        n as f64 / self.prototype_count as f64
    }

    /// Probability of the preferred answer within a slice of `K_t` answers:
    /// `1/K_t + (β − 1/K)(1 − 1/K_t)/(1 − 1/K)`. Equals `β` when `K_t = K`,
    /// is uniform when `β = 1/K` and reaches 1 at `β = 1`.
    pub fn slice_bias(&self, t: QuestionType) -> f64 {
        let k = self.answer_count as f64;
        let kt = self.slice_len(t) as f64;
        1.0 / kt + (self.bias_strength - 1.0 / k) * (1.0 - 1.0 / kt) / (1.0 - 1.0 / k)
    }

    fn unbiased(&self) -> Self {
        Self {
            bias_strength: 1.0 / self.answer_count as f64,
            ..self.clone()
        }
    }
}

/// One question with its visual context and soft targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub prototype: usize,
    pub question_type: QuestionType,
    pub tokens: Vec<usize>,
    pub visual: Vec<f64>,
    /// Sparse `(answer, score)` pairs; the ground truth scores 1.
    pub targets: Vec<(usize, f64)>,
}

impl Example {
    pub fn answer(&self) -> usize {
        self.targets
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(a, _)| a)
            .expect("at least one target")
    }

    pub fn score(&self, answer: usize) -> f64 {
        self.targets.iter().find(|(a, _)| *a == answer).map_or(0.0, |(_, s)| *s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub spec: SynthSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Model input and dense targets for the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (ModelInput, Tensor) {
        let k = self.spec.answer_count;
        let mut tokens = Vec::with_capacity(indices.len() * QUESTION_LEN);
        let mut visual = Vec::with_capacity(indices.len() * self.spec.objects * self.spec.feature_dim);
        let mut targets = vec![0.0; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            let e = &self.examples[i];
            tokens.extend_from_slice(&e.tokens);
            visual.extend_from_slice(&e.visual);
            for &(a, s) in &e.targets {
                targets[row * k + a] = s;
            }
        }
        let input = ModelInput {
            batch: indices.len(),
            question_len: QUESTION_LEN,
            tokens,
            objects: self.spec.objects,
            visual,
        };
        (input, Tensor::new(vec![indices.len(), k], targets).expect("dense targets"))
    }

    pub fn prototypes(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.examples[i].prototype).collect()
    }

    /// Writes a header line with the spec, then one JSON record per example.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &DatasetHeader {
            name: self.name.clone(),
            spec: self.spec.clone(),
        })?;
        writeln!(w)?;
        for e in &self.examples {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format(format!("{} is empty", path.display()))),
        };
        let mut examples = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                examples.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self {
            name: header.name,
            spec: header.spec,
            examples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    name: String,
    spec: SynthSpec,
}

/// Fixed parts of a benchmark: preferences and answer codes.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub train_preferred: Vec<usize>,
    pub test_preferred: Vec<usize>,
    /// `K × feature_dim` answer codes
    pub codes: Vec<f64>,
}

impl World {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let train_preferred: Vec<usize> = (0..spec.prototype_count)
            .map(|p| {
                let (a, b) = spec.slice(spec.prototype_type(p));
                rng.gen_range(a..b)
            })
            .collect();
        let mut shift = vec![0usize; spec.answer_count];
        for t in QuestionType::ALL {
            let (a, b) = spec.slice(t);
            let perm = derangement(b - a, &mut rng);
            for (i, j) in perm.into_iter().enumerate() {
                shift[a + i] = a + j;
            }
        }
        let test_preferred = train_preferred.iter().map(|&a| shift[a]).collect();
        let codes = (0..spec.answer_count * spec.feature_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Ok(Self {
            train_preferred,
            test_preferred,
            codes,
        })
    }
}

/// Uniform random permutation of `0..n` without fixed points (n ≥ 2).
fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Prior {
    Train,
    Test,
    Uniform,
}

fn sample_split(spec: &SynthSpec, world: &World, prior: Prior, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.feature_dim;
    (0..n)
        .map(|_| {
            let prototype = rng.gen_range(0..spec.prototype_count);
            let t = spec.prototype_type(prototype);
            let (lo, hi) = spec.slice(t);
            let kt = hi - lo;
            let preferred = match prior {
                Prior::Test => world.test_preferred[prototype],
                _ => world.train_preferred[prototype],
            };
            let bias = match prior {
                Prior::Uniform => 1.0 / kt as f64,
                _ => spec.slice_bias(t),
            };
            let answer = if rng.gen::<f64>() < bias {
                preferred
            } else {
                // uniform over the other answers of the slice
                let k = rng.gen_range(0..kt - 1);
                let a = lo + k;
                if a >= preferred {
                    a + 1
                } else {
                    a
                }
            };
            let mut targets = vec![(answer, 1.0)];
            if rng.gen::<f64>() < spec.distractor_prob {
                let k = rng.gen_range(0..kt - 1);
                let d = if lo + k >= answer { lo + k + 1 } else { lo + k };
                targets.push((d, spec.distractor_score));
            }
            let mut visual: Vec<f64> = (0..spec.objects * f).map(|_| rng.sample(StandardNormal)).collect();
            if rng.gen::<f64>() < spec.visual_informativeness {
                let slot = rng.gen_range(0..spec.objects);
                for (v, c) in visual[slot * f..(slot + 1) * f].iter_mut().zip(&world.codes[answer * f..]) {
                    *v = spec.code_scale * c;
                }
            }
            Example {
                prototype,
                question_type: t,
                tokens: vec![
                    CLS_TOKEN,
                    TYPE_TOKEN_BASE + t.index(),
                    PROTOTYPE_TOKEN_BASE + prototype,
                    PROTOTYPE_TOKEN_BASE + spec.prototype_count + prototype % SUFFIX_TOKENS,
                ],
                visual,
                targets,
            }
        })
        .collect()
}

/// Train and OOD test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Deterministic in `spec`. Streams: world `seed`, train `seed+1`,
/// test `seed+2`.
pub fn generate(spec: &SynthSpec) -> Result<Splits> {
    let world = World::new(spec)?;
    let split = |name: &str, prior, n, offset| Dataset {
        name: name.to_string(),
        spec: spec.clone(),
        examples: sample_split(spec, &world, prior, n, spec.seed.wrapping_add(offset)),
    };
    Ok(Splits {
        train: split("train", Prior::Train, spec.train_size, 1),
        test: split("test", Prior::Test, spec.test_size, 2),
    })
}

/// Answers uniform within each slice, same world and codes; stream `seed+3`.
pub fn generate_unbiased(spec: &SynthSpec, n: usize) -> Result<Dataset> {
    let world = World::new(spec)?;
    Ok(Dataset {
        name: "unbiased".into(),
        spec: spec.unbiased(),
        examples: sample_split(spec, &world, Prior::Uniform, n, spec.seed.wrapping_add(3)),
    })
}

/// Closed-form accuracies of reference predictors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAccuracies {
    /// Exact-match accuracy of predicting the training-preferred answer.
    pub question_only_train: f64,
    pub question_only_test: f64,
    /// Exact-match accuracy when the answer code is read whenever present
    /// and the training prior is used otherwise.
    pub vision_train: f64,
    pub vision_test: f64,
    /// Soft-score versions of the four figures above.
    pub question_only_train_soft: f64,
    pub question_only_test_soft: f64,
    pub vision_train_soft: f64,
    pub vision_test_soft: f64,
}

pub fn oracle_accuracies(spec: &SynthSpec) -> Result<OracleAccuracies> {
    spec.validate()?;
    let g = spec.visual_informativeness;
    let bonus = spec.distractor_prob * spec.distractor_score;
    let (mut qtr, mut qte, mut qtr_s, mut qte_s) = (0.0, 0.0, 0.0, 0.0);
    for t in QuestionType::ALL {
        let w = spec.type_weight(t);
        let kt = spec.slice_len(t) as f64;
        let b = spec.slice_bias(t);
        let hit_train = b;
        let hit_test = (1.0 - b) / (kt - 1.0);
        qtr += w * hit_train;
        qte += w * hit_test;
        qtr_s += w * (hit_train + (1.0 - hit_train) * bonus / (kt - 1.0));
        qte_s += w * (hit_test + (1.0 - hit_test) * bonus / (kt - 1.0));
    }
    let vision = |q: f64| g + (1.0 - g) * q;
    Ok(OracleAccuracies {
        question_only_train: qtr,
        question_only_test: qte,
        vision_train: vision(qtr),
        vision_test: vision(qte),
        question_only_train_soft: qtr_s,
        question_only_test_soft: qte_s,
        vision_train_soft: vision(qtr_s),
        vision_test_soft: vision(qte_s),
    })
}
