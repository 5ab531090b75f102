//! Synthetic task family: affine-modular rule induction. Each task hides a
//! rule y = (a*x + b) mod M, shows a few demonstrations, and asks for the
//! image of a fresh query. Demonstrations pin the rule down, so auxiliary
//! examples consistent with it genuinely help adaptation and inconsistent
//! ones hurt, which is exactly the signal the scorer has to learn.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seqmodel::{
    Token, Vocab, ANSWER_START, DEMO_SEP, END, EXAMPLE_START, QUERY, SOLUTION_SEP, TASK_START,
};

/// Ranges for task sampling. Queries and demonstration inputs live in
/// `0..modulus`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    pub mod_min: u64,
    pub mod_max: u64,
    pub n_demos: usize,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig { mod_min: 7, mod_max: 23, n_demos: 3 }
    }
}

/// Which half of the rule space a sampler draws from. Splits are disjoint by
/// rule `(a, b, M)`, so an evaluation task's rule never appears in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

/// One target problem: hidden rule, demonstrations, query and gold answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub mul: u64,
    pub add: u64,
    pub modulus: u64,
    pub demos: Vec<(u64, u64)>,
    pub query: u64,
    pub gold: u64,
    pub family: String,
    pub seed: u64,
}

impl Task {
    pub fn apply_rule(&self, x: u64) -> u64 {
        (self.mul * x + self.add) % self.modulus
    }

    /// Prompt grammar: `T:` demos (`x -> y ;`), `Q:` query, `A:`.
    pub fn render(&self) -> Vec<Token> {
        let v = Vocab::standard();
        let mut t = vec![TASK_START];
        for &(x, y) in &self.demos {
            t.extend(v.number(x));
            t.push(SOLUTION_SEP);
            t.extend(v.number(y));
            t.push(DEMO_SEP);
        }
        t.push(QUERY);
        t.extend(v.number(self.query));
        t.push(ANSWER_START);
        t
    }

    /// Same prompt without the answer marker; the generator continues from
    /// here when synthesizing auxiliary examples.
    pub fn generation_prompt(&self) -> Vec<Token> {
        let mut t = self.render();
        t.pop();
        t
    }

    /// Full supervised sequence: prompt, gold answer digits, end marker.
    /// The mask covers the answer span.
    pub fn gold_sequence(&self) -> TrainSeq {
        let v = Vocab::standard();
        let mut tokens = self.render();
        let prefix = tokens.len();
        tokens.extend(v.number(self.gold));
        tokens.push(END);
        let mut mask = vec![0u8; tokens.len()];
        for m in mask.iter_mut().skip(prefix) {
            *m = 1;
        }
        TrainSeq { tokens, mask }
    }
}

/// A token sequence with its loss mask, ready for supervised updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSeq {
    pub tokens: Vec<Token>,
    pub mask: Vec<u8>,
}

/// Successfully parsed auxiliary pair plus its retokenized training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedAux {
    pub problem: String,
    pub answer: String,
    pub train: TrainSeq,
}

/// One generated auxiliary example: the raw continuation and, when the
/// grammar matched exactly once, the parsed payload.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxExample {
    pub raw: Vec<Token>,
    pub parsed: Option<ParsedAux>,
}

impl AuxExample {
    /// Parse a raw generation against the example grammar and, on success,
    /// retokenize it as a pseudo-query of the same task: the task prompt with
    /// the query replaced by the generated problem, supervised on the
    /// generated answer span.
    pub fn from_raw(task: &Task, raw: Vec<Token>) -> AuxExample {
        let parsed = parse_aux(&raw).map(|(problem, answer)| {
            let v = Vocab::standard();
            let mut tokens = vec![TASK_START];
            for &(x, y) in &task.demos {
                tokens.extend(v.number(x));
                tokens.push(SOLUTION_SEP);
                tokens.extend(v.number(y));
                tokens.push(DEMO_SEP);
            }
            tokens.push(QUERY);
            tokens.extend(v.encode(&problem).expect("digits always encode"));
            tokens.push(ANSWER_START);
            let prefix = tokens.len();
            tokens.extend(v.encode(&answer).expect("digits always encode"));
            tokens.push(END);
            let mut mask = vec![0u8; tokens.len()];
            for m in mask.iter_mut().skip(prefix) {
                *m = 1;
            }
            ParsedAux { problem, answer, train: TrainSeq { tokens, mask } }
        });
        AuxExample { raw, parsed }
    }
}

/// One solution attempt: sampled continuation, extracted answer, verifier
/// verdict, and the log-probability recorded under the sampling policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Attempt {
    pub tokens: Vec<Token>,
    pub answer: Option<String>,
    pub verified: bool,
    pub old_logprob: f64,
}

/// Match the example grammar `E: digits -> digits #` exactly once over the
/// whole sequence. Total on arbitrary input; failure is a value.
pub fn parse_aux(raw: &[Token]) -> Option<(String, String)> {
    let mut i = 0;
    if raw.get(i) != Some(&EXAMPLE_START) {
        return None;
    }
    i += 1;
    let p_start = i;
    while raw.get(i).is_some_and(|&t| Vocab::is_digit(t)) {
        i += 1;
    }
    if i == p_start || raw.get(i) != Some(&SOLUTION_SEP) {
        return None;
    }
    let problem = Vocab::standard().decode(&raw[p_start..i]);
    i += 1;
    let a_start = i;
    while raw.get(i).is_some_and(|&t| Vocab::is_digit(t)) {
        i += 1;
    }
    if i == a_start || raw.get(i) != Some(&END) {
        return None;
    }
    let answer = Vocab::standard().decode(&raw[a_start..i]);
    i += 1;
    // Exactly once: anything after the end marker is a failure.
    if i != raw.len() {
        return None;
    }
    Some((problem, answer))
}

/// Strip leading zeros; "06" and "6" denote the same answer, bare "0" stays.
pub fn normalize_answer(s: &str) -> String {
    let t = s.trim_start_matches('0');
    if t.is_empty() {
        "0".to_string()
    } else {
        t.to_string()
    }
}

/// Extract the digit span of an attempted answer (everything up to the end
/// marker or the first non-digit) and compare with the gold answer after
/// normalization.
pub fn verify(task: &Task, attempt: &[Token]) -> bool {
    match extract_answer(attempt) {
        Some(ans) => normalize_answer(&ans) == normalize_answer(&task.gold.to_string()),
        None => false,
    }
}

/// Digit prefix of a continuation, if any.
pub fn extract_answer(attempt: &[Token]) -> Option<String> {
    let mut digits = Vec::new();
    for &t in attempt {
        if Vocab::is_digit(t) {
            digits.push(t);
        } else {
            break;
        }
    }
    if digits.is_empty() {
        None
    } else {
        Some(Vocab::standard().decode(&digits))
    }
}

pub fn family_tag(modulus: u64) -> String {
    match modulus {
        0..=12 => "mod07-12".to_string(),
        13..=17 => "mod13-17".to_string(),
        _ => "mod18-23".to_string(),
    }
}

fn rule_hash(mul: u64, add: u64, modulus: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in [mul, add, modulus] {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic task source. The full `(M, a, b, query)` space is enumerated
/// once, filtered by split, and shuffled with a fixed permutation; seed `s`
/// picks position `s mod N`. Distinct seeds below the space size therefore
/// never collide on `(rule, query)`.
pub struct TaskSampler {
    cfg: DifficultyConfig,
    combos: Vec<(u64, u64, u64, u64)>,
}

impl TaskSampler {
    pub fn new(cfg: DifficultyConfig, split: Option<Split>) -> Self {
        let mut combos = Vec::new();
        for m in cfg.mod_min..=cfg.mod_max {
            for a in 1..m {
                for b in 0..m {
                    let in_split = match split {
                        None => true,
                        Some(Split::Train) => rule_hash(a, b, m) & 1 == 0,
                        Some(Split::Eval) => rule_hash(a, b, m) & 1 == 1,
                    };
                    if !in_split {
                        continue;
                    }
                    for q in 0..m {
                        combos.push((m, a, b, q));
                    }
                }
            }
        }
        let mut perm_rng = ChaCha8Rng::seed_from_u64(0x7a5c_0000 ^ cfg.mod_min ^ cfg.mod_max << 8);
        combos.shuffle(&mut perm_rng);
        TaskSampler { cfg, combos }
    }

    pub fn space_size(&self) -> usize {
        self.combos.len()
    }

    pub fn sample(&self, seed: u64) -> Task {
        let (modulus, mul, add, query) = self.combos[(seed % self.combos.len() as u64) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0xd15c);
        // Demonstration inputs: distinct, never the query itself.
        let pool: Vec<u64> = (0..modulus).filter(|&x| x != query).collect();
        let mut demo_xs: Vec<u64> = pool
            .choose_multiple(&mut rng, self.cfg.n_demos.min(pool.len()))
            .copied()
            .collect();
        demo_xs.shuffle(&mut rng);
        let demos: Vec<(u64, u64)> =
            demo_xs.iter().map(|&x| (x, (mul * x + add) % modulus)).collect();
        let gold = (mul * query + add) % modulus;
        Task {
            mul,
            add,
            modulus,
            demos,
            query,
            gold,
            family: family_tag(modulus),
            seed,
        }
    }

    /// A fresh in-split task chosen by an arbitrary RNG draw (used for
    /// drawing supervision examples at test time).
    pub fn sample_with_rng(&self, rng: &mut ChaCha8Rng) -> Task {
        self.sample(rng.gen::<u64>())
    }
}
