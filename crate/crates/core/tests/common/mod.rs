#![allow(dead_code)]

use automaton_lab::dfa::Dfa;
use proptest::prelude::*;

/// States reachable from the initial state.
pub fn reachable(d: &Dfa) -> Vec<usize> {
    let mut seen = vec![false; d.num_states()];
    let mut stack = vec![d.initial()];
    seen[d.initial()] = true;
    while let Some(q) = stack.pop() {
        for s in 0..d.alphabet_size() {
            let r = d.next(q, s);
            if !seen[r] {
                seen[r] = true;
                stack.push(r);
            }
        }
    }
    (0..d.num_states()).filter(|&q| seen[q]).collect()
}

/// Table-filling distinguishability over reachable states: a pair is
/// marked when the outputs differ or some symbol leads to a marked pair.
pub fn distinguishable(d: &Dfa) -> Vec<Vec<bool>> {
    let n = d.num_states();
    let mut mark = vec![vec![false; n]; n];
    for a in 0..n {
        for b in 0..n {
            mark[a][b] = d.output(a) != d.output(b);
        }
    }
    loop {
        let mut changed = false;
        for a in 0..n {
            for b in 0..n {
                if !mark[a][b] && (0..d.alphabet_size()).any(|s| mark[d.next(a, s)][d.next(b, s)]) {
                    mark[a][b] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return mark;
        }
    }
}

/// Number of equivalence classes among reachable states.
pub fn table_filling_count(d: &Dfa) -> usize {
    let mark = distinguishable(d);
    let states = reachable(d);
    let mut reps: Vec<usize> = Vec::new();
    for &q in &states {
        if !reps.iter().any(|&r| !mark[q][r]) {
            reps.push(q);
        }
    }
    reps.len()
}

/// Outputs after every word up to `max_len`, word by word.
pub fn output_table(d: &Dfa, max_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut frontier = vec![d.initial()];
    out.push(d.output(d.initial()));
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * d.alphabet_size());
        for &q in &frontier {
            for s in 0..d.alphabet_size() {
                let r = d.next(q, s);
                out.push(d.output(r));
                next.push(r);
            }
        }
        frontier = next;
    }
    out
}

/// Random complete automata with up to `max_states` states.
pub fn arb_dfa(max_states: usize, max_alphabet: usize, max_outputs: usize) -> impl Strategy<Value = Dfa> {
    (1..=max_states, 1..=max_alphabet, 1..=max_outputs).prop_flat_map(|(n, k, o)| {
        (
            prop::collection::vec(prop::collection::vec(0..n, k), n),
            0..n,
            prop::collection::vec(0..o, n),
        )
            .prop_map(move |(table, init, outputs)| Dfa::with_output_size(k, table, init, outputs, o.max(2)).unwrap())
    })
}
