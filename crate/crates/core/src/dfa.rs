//! Moore-style deterministic finite automata.
//!
//! A [`Dfa`] attaches an output symbol to every state instead of a binary
//! accepting flag; the classic accept/reject automaton is the special case
//! with outputs in `{0, 1}`. Transition tables are always total.
//!
//! Besides evaluation this module provides Hopcroft partition refinement
//! ([`hopcroft_minimize`]), exact equivalence through the product automaton
//! ([`equivalent`]), the random task generator used for the regular-task
//! experiments, DOT rendering and a small line-based text format.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

pub type StateId = usize;
pub type Symbol = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DfaError {
    #[error("automaton must have at least one state")]
    NoStates,
    #[error("alphabet must contain at least one symbol")]
    EmptyAlphabet,
    #[error("state {state} has {found} transitions, expected {expected}")]
    RowLength {
        state: StateId,
        found: usize,
        expected: usize,
    },
    #[error("transition ({from}, {symbol}) targets state {to}, but only {num_states} states exist")]
    InvalidTarget {
        from: StateId,
        symbol: Symbol,
        to: StateId,
        num_states: usize,
    },
    #[error("initial state {initial} is out of range for {num_states} states")]
    InvalidInitial { initial: StateId, num_states: usize },
    #[error("expected {expected} outputs, found {found}")]
    OutputCount { expected: usize, found: usize },
    #[error("output {output} of state {state} exceeds the output alphabet of size {size}")]
    InvalidOutput {
        state: StateId,
        output: usize,
        size: usize,
    },
    #[error("symbol {symbol} at position {position} is outside the alphabet of size {alphabet_size}")]
    SymbolOutOfRange {
        symbol: Symbol,
        position: usize,
        alphabet_size: usize,
    },
    #[error("alphabet sizes differ: {0} vs {1}")]
    AlphabetMismatch(usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Deterministic Moore machine over the alphabet `0..alphabet_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dfa {
    alphabet_size: usize,
    // row-major: transitions[state * alphabet_size + symbol]
    transitions: Vec<StateId>,
    initial: StateId,
    outputs: Vec<usize>,
    output_size: usize,
}

impl Dfa {
    /// Builds an automaton from a complete transition table, one row per state.
    ///
    /// The output alphabet is taken to be `max(outputs) + 1`, but never smaller
    /// than two.
    pub fn new(
        alphabet_size: usize,
        table: Vec<Vec<StateId>>,
        initial: StateId,
        outputs: Vec<usize>,
    ) -> Result<Self, DfaError> {
        let output_size = outputs.iter().copied().max().map_or(2, |m| (m + 1).max(2));
        Self::with_output_size(alphabet_size, table, initial, outputs, output_size)
    }

    pub fn with_output_size(
        alphabet_size: usize,
        table: Vec<Vec<StateId>>,
        initial: StateId,
        outputs: Vec<usize>,
        output_size: usize,
    ) -> Result<Self, DfaError> {
        if alphabet_size == 0 {
            return Err(DfaError::EmptyAlphabet);
        }
        let num_states = table.len();
        if num_states == 0 {
            return Err(DfaError::NoStates);
        }
        if outputs.len() != num_states {
            return Err(DfaError::OutputCount {
                expected: num_states,
                found: outputs.len(),
            });
        }
        if initial >= num_states {
            return Err(DfaError::InvalidInitial {
                initial,
                num_states,
            });
        }
        let mut transitions = Vec::with_capacity(num_states * alphabet_size);
        for (state, row) in table.into_iter().enumerate() {
            if row.len() != alphabet_size {
                return Err(DfaError::RowLength {
                    state,
                    found: row.len(),
                    expected: alphabet_size,
                });
            }
            for (symbol, &to) in row.iter().enumerate() {
                if to >= num_states {
                    return Err(DfaError::InvalidTarget {
                        from: state,
                        symbol,
                        to,
                        num_states,
                    });
                }
            }
            transitions.extend(row);
        }
        for (state, &output) in outputs.iter().enumerate() {
            if output >= output_size {
                return Err(DfaError::InvalidOutput {
                    state,
                    output,
                    size: output_size,
                });
            }
        }
        Ok(Self {
            alphabet_size,
            transitions,
            initial,
            outputs,
            output_size,
        })
    }

    pub fn num_states(&self) -> usize {
        self.outputs.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn output(&self, state: StateId) -> usize {
        self.outputs[state]
    }

    #[inline]
    pub fn next(&self, state: StateId, symbol: Symbol) -> StateId {
        self.transitions[state * self.alphabet_size + symbol]
    }

    pub fn row(&self, state: StateId) -> &[StateId] {
        let start = state * self.alphabet_size;
        &self.transitions[start..start + self.alphabet_size]
    }

    fn check_symbols(&self, sequence: &[Symbol]) -> Result<(), DfaError> {
        match sequence.iter().position(|&s| s >= self.alphabet_size) {
            Some(position) => Err(DfaError::SymbolOutOfRange {
                symbol: sequence[position],
                position,
                alphabet_size: self.alphabet_size,
            }),
            None => Ok(()),
        }
    }

    /// State reached after reading `sequence` from the initial state.
    pub fn run(&self, sequence: &[Symbol]) -> Result<StateId, DfaError> {
        self.check_symbols(sequence)?;
        Ok(sequence
            .iter()
            .fold(self.initial, |state, &symbol| self.next(state, symbol)))
    }

    /// Output after every prefix of `sequence`, starting with the empty prefix,
    /// so the result has `sequence.len() + 1` entries.
    pub fn eval(&self, sequence: &[Symbol]) -> Result<Vec<usize>, DfaError> {
        self.check_symbols(sequence)?;
        let mut state = self.initial;
        let mut out = Vec::with_capacity(sequence.len() + 1);
        out.push(self.outputs[state]);
        for &symbol in sequence {
            state = self.next(state, symbol);
            out.push(self.outputs[state]);
        }
        Ok(out)
    }

    pub fn final_output(&self, sequence: &[Symbol]) -> Result<usize, DfaError> {
        self.run(sequence).map(|s| self.outputs[s])
    }

    /// Reachability flags from the initial state.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let mut queue = VecDeque::from([self.initial]);
        seen[self.initial] = true;
        while let Some(state) = queue.pop_front() {
            for &to in self.row(state) {
                if !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
        seen
    }

    pub fn is_trim(&self) -> bool {
        self.reachable().into_iter().all(|r| r)
    }

    /// Drops unreachable states. Surviving states keep their relative order.
    pub fn prune_unreachable(&self) -> Dfa {
        let keep = self.reachable();
        if keep.iter().all(|&k| k) {
            return self.clone();
        }
        let mut new_index = vec![usize::MAX; self.num_states()];
        let mut next = 0;
        for (state, &k) in keep.iter().enumerate() {
            if k {
                new_index[state] = next;
                next += 1;
            }
        }
        let mut transitions = Vec::with_capacity(next * self.alphabet_size);
        let mut outputs = Vec::with_capacity(next);
        for state in (0..self.num_states()).filter(|&s| keep[s]) {
            transitions.extend(self.row(state).iter().map(|&to| new_index[to]));
            outputs.push(self.outputs[state]);
        }
        Dfa {
            alphabet_size: self.alphabet_size,
            transitions,
            initial: new_index[self.initial],
            outputs,
            output_size: self.output_size,
        }
    }

    /// Serializes to the line-based text format:
    ///
    /// ```text
    /// states 2 alphabet 2 initial 0
    /// outputs 0
    /// outputs 1
    /// 0 0 0
    /// 0 1 1
    /// 1 0 1
    /// 1 1 0
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "states {} alphabet {} initial {}\n",
            self.num_states(),
            self.alphabet_size,
            self.initial
        );
        for &o in &self.outputs {
            let _ = writeln!(s, "outputs {o}");
        }
        for state in 0..self.num_states() {
            for (symbol, &to) in self.row(state).iter().enumerate() {
                let _ = writeln!(s, "{state} {symbol} {to}");
            }
        }
        s
    }
}

impl FromStr for Dfa {
    type Err = DfaError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = |line: usize, message: &str| DfaError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 6
            || tokens[0] != "states"
            || tokens[2] != "alphabet"
            || tokens[4] != "initial"
        {
            return Err(err(hline, "expected `states k alphabet m initial i`"));
        }
        let parse = |line: usize, tok: &str| {
            tok.parse::<usize>()
                .map_err(|_| err(line, &format!("`{tok}` is not a non-negative integer")))
        };
        let num_states = parse(hline, tokens[1])?;
        let alphabet_size = parse(hline, tokens[3])?;
        let initial = parse(hline, tokens[5])?;
        if num_states == 0 {
            return Err(DfaError::NoStates);
        }
        if alphabet_size == 0 {
            return Err(DfaError::EmptyAlphabet);
        }

        let mut outputs = Vec::with_capacity(num_states);
        for _ in 0..num_states {
            let (n, line) = lines.next().ok_or_else(|| err(hline, "missing outputs line"))?;
            match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["outputs", o] => outputs.push(parse(n, o)?),
                _ => return Err(err(n, "expected `outputs o`")),
            }
        }

        let mut table = vec![vec![usize::MAX; alphabet_size]; num_states];
        let mut count = 0;
        for (n, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(n, "expected `from symbol to`"));
            }
            let (from, symbol, to) = (parse(n, fields[0])?, parse(n, fields[1])?, parse(n, fields[2])?);
            if from >= num_states || symbol >= alphabet_size {
                return Err(err(n, "transition source or symbol out of range"));
            }
            if table[from][symbol] != usize::MAX {
                return Err(err(n, "duplicate transition"));
            }
            table[from][symbol] = to;
            count += 1;
        }
        if count != num_states * alphabet_size {
            return Err(err(
                hline,
                &format!(
                    "expected {} transitions, found {count}",
                    num_states * alphabet_size
                ),
            ));
        }
        Dfa::new(alphabet_size, table, initial, outputs)
    }
}

impl fmt::Display for Dfa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// The two-state streaming parity automaton: output 1 iff an odd number of
/// ones has been read.
pub fn parity_dfa() -> Dfa {
    Dfa::new(2, vec![vec![0, 1], vec![1, 0]], 0, vec![0, 1]).expect("parity table is valid")
}

/// A partition of a state set into disjoint blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    blocks: Vec<Vec<StateId>>,
    block_of: Vec<usize>,
}

impl Partition {
    /// Panics if the blocks overlap or do not cover `0..num_states`.
    pub fn from_blocks(num_states: usize, blocks: Vec<Vec<StateId>>) -> Self {
        let mut block_of = vec![usize::MAX; num_states];
        for (b, block) in blocks.iter().enumerate() {
            for &s in block {
                assert!(block_of[s] == usize::MAX, "state {s} appears in two blocks");
                block_of[s] = b;
            }
        }
        assert!(
            block_of.iter().all(|&b| b != usize::MAX),
            "blocks do not cover every state"
        );
        Self { blocks, block_of }
    }

    pub fn blocks(&self) -> &[Vec<StateId>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_of(&self, state: StateId) -> usize {
        self.block_of[state]
    }

    /// Renumbers blocks by their smallest member and sorts members.
    fn canonicalize(mut self) -> Self {
        for block in &mut self.blocks {
            block.sort_unstable();
        }
        self.blocks.sort_by_key(|b| b[0]);
        for (b, block) in self.blocks.iter().enumerate() {
            for &s in block {
                self.block_of[s] = b;
            }
        }
        self
    }
}

/// Coarsest partition of `dfa`'s states into output-equivalent classes,
/// computed by Hopcroft's refinement.
///
/// The initial partition holds one block per output symbol, and the worklist
/// is a FIFO queue seeded with all of them. Unreachable states are not
/// removed here; see [`hopcroft_minimize`].
pub fn hopcroft_partition(dfa: &Dfa) -> Partition {
    let n = dfa.num_states();
    let k = dfa.alphabet_size();

    // inverse[symbol][target] = sources
    let mut inverse = vec![vec![Vec::new(); n]; k];
    for state in 0..n {
        for (symbol, &to) in dfa.row(state).iter().enumerate() {
            inverse[symbol][to].push(state);
        }
    }

    let mut blocks: Vec<Vec<StateId>> = Vec::new();
    let mut by_output = vec![usize::MAX; dfa.output_size()];
    let mut block_of = vec![0; n];
    for state in 0..n {
        let o = dfa.output(state);
        if by_output[o] == usize::MAX {
            by_output[o] = blocks.len();
            blocks.push(Vec::new());
        }
        block_of[state] = by_output[o];
        blocks[by_output[o]].push(state);
    }

    let mut in_worklist = vec![true; blocks.len()];
    let mut worklist: VecDeque<usize> = (0..blocks.len()).collect();

    let mut marked = vec![false; n];
    let mut hit_count: Vec<usize> = vec![0; blocks.len()];
    let mut touched: Vec<usize> = Vec::new();

    while let Some(a) = worklist.pop_front() {
        in_worklist[a] = false;
        let splitter = blocks[a].clone();
        for symbol in 0..k {
            // X = states moving into the splitter on `symbol`
            let mut x: Vec<StateId> = Vec::new();
            for &t in &splitter {
                for &s in &inverse[symbol][t] {
                    if !marked[s] {
                        marked[s] = true;
                        x.push(s);
                    }
                }
            }
            if x.is_empty() {
                continue;
            }
            hit_count.resize(blocks.len(), 0);
            for &s in &x {
                let b = block_of[s];
                if hit_count[b] == 0 {
                    touched.push(b);
                }
                hit_count[b] += 1;
            }
            touched.sort_unstable();
            for &y in &touched {
                let hits = hit_count[y];
                hit_count[y] = 0;
                if hits == blocks[y].len() {
                    continue;
                }
                let (inside, outside): (Vec<StateId>, Vec<StateId>) =
                    blocks[y].iter().partition(|&&s| marked[s]);
                let new_id = blocks.len();
                // `y` keeps Y \ X, the new block is X ∩ Y
                for &s in &inside {
                    block_of[s] = new_id;
                }
                let inside_len = inside.len();
                let outside_len = outside.len();
                blocks[y] = outside;
                blocks.push(inside);
                in_worklist.push(false);
                if in_worklist[y] {
                    in_worklist[new_id] = true;
                    worklist.push_back(new_id);
                } else if inside_len <= outside_len {
                    in_worklist[new_id] = true;
                    worklist.push_back(new_id);
                } else {
                    in_worklist[y] = true;
                    worklist.push_back(y);
                }
            }
            touched.clear();
            for &s in &x {
                marked[s] = false;
            }
        }
    }

    Partition { blocks, block_of }.canonicalize()
}

/// Unique minimal automaton equivalent to `dfa`.
///
/// Unreachable states are pruned first. States of the result are numbered by
/// the smallest (pruned) state index they contain.
pub fn hopcroft_minimize(dfa: &Dfa) -> Dfa {
    let trimmed = dfa.prune_unreachable();
    let partition = hopcroft_partition(&trimmed);
    quotient(&trimmed, &partition)
}

/// Collapses each block of a congruent partition into one state.
fn quotient(dfa: &Dfa, partition: &Partition) -> Dfa {
    let k = dfa.alphabet_size();
    let mut transitions = Vec::with_capacity(partition.len() * k);
    let mut outputs = Vec::with_capacity(partition.len());
    for block in partition.blocks() {
        let rep = block[0];
        transitions.extend(dfa.row(rep).iter().map(|&to| partition.block_of(to)));
        outputs.push(dfa.output(rep));
    }
    Dfa {
        alphabet_size: k,
        transitions,
        initial: partition.block_of(dfa.initial()),
        outputs,
        output_size: dfa.output_size(),
    }
}

/// Shortest word on which the two automata produce different outputs, found
/// by breadth-first search of the product automaton. `None` means equivalent.
pub fn distinguishing_word(a: &Dfa, b: &Dfa) -> Result<Option<Vec<Symbol>>, DfaError> {
    if a.alphabet_size() != b.alphabet_size() {
        return Err(DfaError::AlphabetMismatch(a.alphabet_size(), b.alphabet_size()));
    }
    let nb = b.num_states();
    let idx = |p: StateId, q: StateId| p * nb + q;
    let mut parent: Vec<Option<(usize, Symbol)>> = vec![None; a.num_states() * nb];
    let mut seen = vec![false; a.num_states() * nb];
    let start = idx(a.initial(), b.initial());
    seen[start] = true;
    let mut queue = VecDeque::from([(a.initial(), b.initial())]);
    while let Some((p, q)) = queue.pop_front() {
        if a.output(p) != b.output(q) {
            let mut word = Vec::new();
            let mut cur = idx(p, q);
            while let Some((prev, symbol)) = parent[cur] {
                word.push(symbol);
                cur = prev;
            }
            word.reverse();
            return Ok(Some(word));
        }
        for symbol in 0..a.alphabet_size() {
            let (np, nq) = (a.next(p, symbol), b.next(q, symbol));
            let j = idx(np, nq);
            if !seen[j] {
                seen[j] = true;
                parent[j] = Some((idx(p, q), symbol));
                queue.push_back((np, nq));
            }
        }
    }
    Ok(None)
}

/// True iff both automata produce the same output on every input sequence.
pub fn equivalent(a: &Dfa, b: &Dfa) -> Result<bool, DfaError> {
    distinguishing_word(a, b).map(|w| w.is_none())
}

/// Random task automaton.
///
/// States are expanded in creation order. Each transition goes to a fresh
/// state with probability `p_new` (while fewer than `max_states` exist) and
/// otherwise to a uniformly chosen existing state. Outputs are drawn
/// uniformly from `{0, 1}` after all transitions are assigned.
pub fn random_regular_task<R: Rng + ?Sized>(
    max_states: usize,
    p_new: f64,
    alphabet_size: usize,
    rng: &mut R,
) -> Dfa {
    assert!(max_states >= 1, "max_states must be at least 1");
    assert!((0.0..=1.0).contains(&p_new), "p_new must be a probability");
    assert!(alphabet_size >= 1, "alphabet must be non-empty");

    let mut table: Vec<Vec<StateId>> = vec![Vec::with_capacity(alphabet_size)];
    let mut state = 0;
    while state < table.len() {
        for _ in 0..alphabet_size {
            let existing = table.len();
            let to = if existing < max_states && rng.gen_bool(p_new) {
                table.push(Vec::with_capacity(alphabet_size));
                existing
            } else {
                rng.gen_range(0..existing)
            };
            table[state].push(to);
        }
        state += 1;
    }
    let outputs = (0..table.len()).map(|_| rng.gen_range(0..2)).collect();
    Dfa::with_output_size(alphabet_size, table, 0, outputs, 2).expect("generated table is total")
}

/// Graphviz rendering: one node per state labelled `q<i>/<output>`, the
/// initial state drawn bold, and one edge per (state, symbol).
pub fn to_dot(dfa: &Dfa) -> String {
    let mut s = String::from("digraph dfa {\n  rankdir=LR;\n  node [shape=circle];\n");
    for state in 0..dfa.num_states() {
        let _ = write!(
            s,
            "  q{state} [label=\"q{state}/{}\"",
            dfa.output(state)
        );
        if state == dfa.initial() {
            s.push_str(", penwidth=3, xlabel=\"start\"");
        }
        s.push_str("];\n");
    }
    for state in 0..dfa.num_states() {
        for (symbol, &to) in dfa.row(state).iter().enumerate() {
            let _ = writeln!(s, "  q{state} -> q{to} [label=\"{symbol}\"];");
        }
    }
    s.push_str("}\n");
    s
}
