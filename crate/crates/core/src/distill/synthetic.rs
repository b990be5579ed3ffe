//! Seeded generator for a 32-token toy version of the joint task.
//!
//! A prompt holds six body tokens: cue words of the target class (two or
//! three), at most one cue of another class, and filler. The reasoning target
//! restates the target-class cues in prompt order and ends with the label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{TokenizedExample, IGNORE_INDEX, NUM_CLASSES};

pub const VOCAB: usize = 32;
pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
const LABEL_BASE: usize = 3;
const CUE_BASE: usize = 6;
const CUES_PER_CLASS: usize = 4;
const FILLER: std::ops::Range<usize> = 18..30;
const REASON_OPEN: usize = 30;
const REASON_CLOSE: usize = 31;
const BODY_LEN: usize = 6;

pub fn label_token(class: usize) -> usize {
    LABEL_BASE + class
}

fn cue(rng: &mut impl Rng, class: usize) -> usize {
    CUE_BASE + class * CUES_PER_CLASS + rng.gen_range(0..CUES_PER_CLASS)
}

fn cue_class(tok: usize) -> Option<usize> {
    (CUE_BASE..CUE_BASE + NUM_CLASSES * CUES_PER_CLASS)
        .contains(&tok)
        .then(|| (tok - CUE_BASE) / CUES_PER_CLASS)
}

/// Builds a teacher-forced example from a prompt and its reasoning tokens.
pub fn assemble(prompt: &[usize], reasoning: &[usize], eos: usize, class: usize) -> TokenizedExample {
    let full: Vec<usize> = prompt.iter().chain(reasoning).copied().chain([eos]).collect();
    let p = prompt.len();
    let input_ids = full[..full.len() - 1].to_vec();
    let target_ids = (0..input_ids.len())
        .map(|j| if j + 1 < p { IGNORE_INDEX } else { full[j + 1] as i64 })
        .collect();
    TokenizedExample {
        input_ids,
        target_ids,
        class_target: class,
        prompt_len: p,
    }
}

pub fn example(rng: &mut impl Rng) -> TokenizedExample {
    let class = rng.gen_range(0..NUM_CLASSES);
    let major = rng.gen_range(2..=3);
    let mut body: Vec<usize> = (0..major).map(|_| cue(rng, class)).collect();
    if rng.gen_bool(0.5) {
        let other = (class + rng.gen_range(1..NUM_CLASSES)) % NUM_CLASSES;
        body.push(cue(rng, other));
    }
    while body.len() < BODY_LEN {
        body.push(rng.gen_range(FILLER));
    }
    body.shuffle(rng);
    let prompt: Vec<usize> = [BOS].into_iter().chain(body.iter().copied()).chain([SEP]).collect();
    let reasoning: Vec<usize> = [REASON_OPEN]
        .into_iter()
        .chain(body.iter().copied().filter(|&t| cue_class(t) == Some(class)))
        .chain([REASON_CLOSE, label_token(class)])
        .collect();
    assemble(&prompt, &reasoning, EOS, class)
}

pub struct SyntheticTask {
    pub train: Vec<TokenizedExample>,
    pub dev: Vec<TokenizedExample>,
    pub test: Vec<TokenizedExample>,
}

pub fn generate(seed: u64, n_train: usize, n_dev: usize, n_test: usize) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = |n| (0..n).map(|_| example(&mut rng)).collect::<Vec<_>>();
    SyntheticTask {
        train: take(n_train),
        dev: take(n_dev),
        test: take(n_test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples_are_well_formed_and_labelled_by_majority() {
        let task = generate(7, 50, 0, 0);
        for e in &task.train {
            e.validate(VOCAB).unwrap();
            let mut counts = [0; NUM_CLASSES];
            for &t in &e.input_ids[..e.prompt_len] {
                if let Some(c) = cue_class(t) {
                    counts[c] += 1;
                }
            }
            let best = (0..NUM_CLASSES).max_by_key(|&c| counts[c]).unwrap();
            assert_eq!(best, e.class_target);
            assert_eq!(*e.target_ids.last().unwrap(), EOS as i64);
            assert!(e.target_ids[..e.prompt_len - 1].iter().all(|&t| t == IGNORE_INDEX));
        }
    }

    #[test]
    fn generator_is_seeded() {
        assert_eq!(generate(3, 5, 1, 1).train, generate(3, 5, 1, 1).train);
        assert_ne!(generate(3, 5, 0, 0).train, generate(4, 5, 0, 0).train);
    }
}
