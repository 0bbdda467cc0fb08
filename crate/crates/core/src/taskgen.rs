//! Datasets of symbol sequences labelled by a task automaton.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfa::{Dfa, DfaError, Symbol};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("one-hot index {index} out of range for dimension {dim}")]
    OneHotRange { index: usize, dim: usize },
    #[error(transparent)]
    Dfa(#[from] DfaError),
    #[error("cannot draw {count} distinct sequences of length {length} over {alphabet} symbols")]
    TooFewSequences {
        count: usize,
        length: usize,
        alphabet: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A finite input word over `0..alphabet_size`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolSequence(pub Vec<Symbol>);

impl SymbolSequence {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn prefix(&self, len: usize) -> SymbolSequence {
        SymbolSequence(self.0[..len].to_vec())
    }

    pub fn concat(&self, suffix: &[Symbol]) -> SymbolSequence {
        let mut v = self.0.clone();
        v.extend_from_slice(suffix);
        SymbolSequence(v)
    }
}

impl Deref for SymbolSequence {
    type Target = [Symbol];

    fn deref(&self) -> &[Symbol] {
        &self.0
    }
}

impl From<Vec<Symbol>> for SymbolSequence {
    fn from(v: Vec<Symbol>) -> Self {
        Self(v)
    }
}

/// Digits are concatenated when every symbol is below ten, otherwise joined
/// with `.`; the empty word prints as `ε`.
impl fmt::Display for SymbolSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("ε");
        }
        let compact = self.0.iter().all(|&s| s < 10);
        for (i, s) in self.0.iter().enumerate() {
            if !compact && i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Parses the [`Display`](fmt::Display) form back. Used by tests and tooling.
impl std::str::FromStr for SymbolSequence {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ε" || s.is_empty() {
            return Ok(Self::empty());
        }
        if s.contains('.') {
            return s.split('.').map(str::parse).collect::<Result<_, _>>().map(Self);
        }
        s.chars()
            .map(|c| c.to_string().parse())
            .collect::<Result<_, _>>()
            .map(Self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sequence: SymbolSequence,
    /// Task output after the full sequence.
    pub target: usize,
    /// Task output after each nonempty prefix; the last entry equals `target`.
    pub step_targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub encoding_dim: usize,
    pub task: Dfa,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sequences(&self) -> impl Iterator<Item = &SymbolSequence> {
        self.examples.iter().map(|e| &e.sequence)
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.sequence.len()).max().unwrap_or(0)
    }

    /// Writes `sequence,target` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TaskError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sequence", "target"])?;
        for e in &self.examples {
            w.write_record([e.sequence.to_string(), e.target.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Every word of length `1..=max_len`, ordered by length and then
/// lexicographically.
pub fn all_sequences(alphabet_size: usize, max_len: usize) -> Vec<SymbolSequence> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<Symbol>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet_size);
        for word in &frontier {
            for s in 0..alphabet_size {
                let mut w = word.clone();
                w.push(s);
                next.push(w);
            }
        }
        out.extend(next.iter().cloned().map(SymbolSequence));
        frontier = next;
    }
    out
}

/// Labels `sequences` with `task`. Duplicate sequences keep their first
/// occurrence; the empty sequence is dropped.
pub fn make_dataset(task: &Dfa, sequences: &[SymbolSequence]) -> Result<Dataset, TaskError> {
    let mut seen = HashSet::with_capacity(sequences.len());
    let mut examples = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.is_empty() || !seen.insert(seq) {
            continue;
        }
        let outputs = task.eval(seq)?;
        examples.push(Example {
            sequence: seq.clone(),
            target: *outputs.last().expect("eval returns at least one output"),
            step_targets: outputs[1..].to_vec(),
        });
    }
    Ok(Dataset {
        examples,
        encoding_dim: task.output_size(),
        task: task.clone(),
    })
}

pub fn one_hot(index: usize, dim: usize) -> Result<Vec<f64>, TaskError> {
    if index >= dim {
        return Err(TaskError::OneHotRange { index, dim });
    }
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    Ok(v)
}

/// `count` distinct uniformly random words of exactly `length` symbols.
pub fn sample_validation<R: Rng + ?Sized>(
    task: &Dfa,
    length: usize,
    count: usize,
    rng: &mut R,
) -> Result<Dataset, TaskError> {
    assert!(length >= 1 && count >= 1, "length and count must be positive");
    let k = task.alphabet_size();
    let capacity = (k as f64).powi(length.min(64) as i32);
    if (count as f64) > capacity {
        return Err(TaskError::TooFewSequences {
            count,
            length,
            alphabet: k,
        });
    }
    let mut seen = HashSet::with_capacity(count);
    let mut sequences = Vec::with_capacity(count);
    while sequences.len() < count {
        let seq = SymbolSequence((0..length).map(|_| rng.gen_range(0..k)).collect());
        if seen.insert(seq.clone()) {
            sequences.push(seq);
        }
    }
    make_dataset(task, &sequences)
}

/// Closes a set of sequences under prefixes, including the empty word.
/// Output is ordered by length then lexicographically.
pub fn prefix_closure<'a, I>(sequences: I) -> Vec<SymbolSequence>
where
    I: IntoIterator<Item = &'a SymbolSequence>,
{
    let mut set = HashSet::new();
    set.insert(SymbolSequence::empty());
    for seq in sequences {
        for len in 1..=seq.len() {
            set.insert(seq.prefix(len));
        }
    }
    let mut out: Vec<_> = set.into_iter().collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfa::{parity_dfa, random_regular_task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(s: &str) -> SymbolSequence {
        s.parse().unwrap()
    }

    #[test]
    fn all_sequences_counts_and_order() {
        let one = all_sequences(2, 1);
        assert_eq!(one, vec![seq("0"), seq("1")]);
        let two = all_sequences(2, 2);
        assert_eq!(two.first(), Some(&seq("0")));
        assert_eq!(two.last(), Some(&seq("11")));
        let ten = all_sequences(2, 10);
        assert_eq!(ten.len(), (1usize << 11) - 2);
        let distinct: HashSet<_> = ten.iter().collect();
        assert_eq!(distinct.len(), ten.len());
        // prefix closed
        for s in &ten {
            for l in 1..s.len() {
                assert!(distinct.contains(&s.prefix(l)));
            }
        }
        assert_eq!(all_sequences(3, 3).len(), 3 + 9 + 27);
    }

    #[test]
    fn parity_targets() {
        let d = make_dataset(&parity_dfa(), &all_sequences(2, 1)).unwrap();
        let t: Vec<_> = d.examples.iter().map(|e| e.target).collect();
        assert_eq!(t, vec![0, 1]);
        let d = make_dataset(&parity_dfa(), &[seq("11")]).unwrap();
        assert_eq!(d.examples[0].target, 0);
        assert_eq!(d.examples[0].step_targets, vec![1, 0]);
        assert_eq!(d.encoding_dim, 2);
    }

    #[test]
    fn make_dataset_dedups_and_drops_empty() {
        let d = make_dataset(
            &parity_dfa(),
            &[seq("1"), SymbolSequence::empty(), seq("1"), seq("0")],
        )
        .unwrap();
        assert_eq!(d.len(), 2);
    }

    fn recursive_walk(task: &Dfa, state: usize, rest: &[usize]) -> usize {
        match rest.split_first() {
            None => task.output(state),
            Some((&s, tail)) => recursive_walk(task, task.row(state)[s], tail),
        }
    }

    #[test]
    fn random_task_targets_match_recursive_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let task = random_regular_task(7, 0.75, 2, &mut rng);
        let d = make_dataset(&task, &all_sequences(2, 8)).unwrap();
        for e in &d.examples {
            assert_eq!(e.target, recursive_walk(&task, task.initial(), &e.sequence));
        }
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(0, 2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(one_hot(1, 2).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(one_hot(2, 2), Err(TaskError::OneHotRange { .. })));
        for dim in 1..6 {
            for i in 0..dim {
                let v = one_hot(i, dim).unwrap();
                assert_eq!(v.iter().sum::<f64>(), 1.0);
                assert!(v.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn validation_sampling() {
        let task = parity_dfa();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = sample_validation(&task, 50, 100, &mut rng).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v.sequences().all(|s| s.len() == 50));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let again = sample_validation(&task, 50, 100, &mut rng).unwrap();
        assert_eq!(v.examples, again.examples);

        let v = sample_validation(&task, 100, 30, &mut rng).unwrap();
        assert_eq!(v.len(), 30);
        assert!(v.sequences().all(|s| s.len() == 100));

        // all four words of length two, forcing redraws
        let v = sample_validation(&task, 2, 4, &mut rng).unwrap();
        assert_eq!(v.len(), 4);
        assert!(sample_validation(&task, 2, 5, &mut rng).is_err());
    }

    #[test]
    fn csv_dump() {
        let d = make_dataset(&parity_dfa(), &all_sequences(2, 2)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "sequence,target\n0,0\n1,1\n00,0\n01,1\n10,1\n11,0\n");
    }

    #[test]
    fn prefix_closure_adds_empty_and_prefixes() {
        let closed = prefix_closure(&[seq("101")]);
        assert_eq!(
            closed,
            vec![SymbolSequence::empty(), seq("1"), seq("10"), seq("101")]
        );
    }

    #[test]
    fn display_roundtrip() {
        for s in ["ε", "0", "0110"] {
            assert_eq!(seq(s).to_string(), s);
        }
        let wide = SymbolSequence(vec![1, 12, 3]);
        assert_eq!(wide.to_string(), "1.12.3");
        assert_eq!(wide.to_string().parse::<SymbolSequence>().unwrap(), wide);
    }
}
