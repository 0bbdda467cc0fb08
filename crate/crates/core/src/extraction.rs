//! Automaton extraction from hidden representations, plus the pairwise
//! representation diagnostics tracked during training.
//!
//! Every evaluated input string `x` is mapped to the hidden state the
//! network reaches after reading it (the empty string maps to `h0`). States
//! closer than `ε` are identified by single-linkage clustering, and the
//! resulting clusters become automaton states whose transitions and outputs
//! are read off the network maps at each cluster centroid.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfa::{Dfa, DfaError, Symbol};
use crate::rnn::RnnModel;
use crate::taskgen::{all_sequences, prefix_closure, Dataset, SymbolSequence};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("no sequences to extract from")]
    EmptySequences,
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("pair diagnostics need at least two snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("pair diagnostics need a dataset holding every sequence up to its maximum length")]
    IncompleteDataset,
    #[error("snapshot has {found} rows but the tracker expects {expected}")]
    SnapshotShape { expected: usize, found: usize },
    #[error("symbol {symbol} outside the model input dimension {input}")]
    Symbol { symbol: Symbol, input: usize },
    #[error(transparent)]
    Dfa(#[from] DfaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Merge threshold as a fraction of the representational scale.
    pub epsilon_factor: f64,
    /// Epochs between automaton and pair snapshots.
    pub snapshot_stride: usize,
    /// Number of pairs whose full distance series is kept.
    pub tracked_pairs: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            epsilon_factor: 0.01,
            snapshot_stride: 10,
            tracked_pairs: 2000,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if !(self.epsilon_factor > 0.0 && self.epsilon_factor.is_finite()) {
            return Err(ExtractionError::Epsilon(self.epsilon_factor));
        }
        Ok(())
    }
}

/// Hidden state reached after each evaluated string. Row `i` of `states`
/// belongs to `sequences[i]`; rows are ordered by length, then
/// lexicographically, so the empty string is row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMap {
    pub sequences: Vec<SymbolSequence>,
    pub states: Array2<f64>,
    index: HashMap<SymbolSequence, usize>,
}

impl StateMap {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn index_of(&self, sequence: &[Symbol]) -> Option<usize> {
        self.index.get(&SymbolSequence(sequence.to_vec())).copied()
    }

    pub fn get(&self, sequence: &[Symbol]) -> Option<ArrayView1<'_, f64>> {
        self.index_of(sequence).map(|i| self.states.row(i))
    }

    /// Rows for `sequences`, in that order. Sequences missing from the map
    /// are skipped.
    pub fn rows_for<'a, I>(&self, sequences: I) -> Array2<f64>
    where
        I: IntoIterator<Item = &'a SymbolSequence>,
    {
        let idx: Vec<usize> = sequences.into_iter().filter_map(|s| self.index_of(s)).collect();
        self.states.select(Axis(0), &idx)
    }
}

/// Runs the network over the prefix closure of `sequences`, reusing each
/// prefix's state so every string costs a single recurrent step.
pub fn collect_states(model: &RnnModel, sequences: &[SymbolSequence]) -> Result<StateMap, ExtractionError> {
    if sequences.is_empty() {
        return Err(ExtractionError::EmptySequences);
    }
    let input = model.dims().input;
    if let Some(&symbol) = sequences.iter().flat_map(|s| s.iter()).find(|&&x| x >= input) {
        return Err(ExtractionError::Symbol { symbol, input });
    }
    let closed = prefix_closure(sequences);
    let mut index = HashMap::with_capacity(closed.len());
    let mut states = Array2::zeros((closed.len(), model.dims().hidden));
    for (i, seq) in closed.iter().enumerate() {
        if let Some((&last, head)) = seq.split_last() {
            // prefixes come earlier in the closure ordering
            let parent = index[&SymbolSequence(head.to_vec())];
            let h = model.step_symbol(states.row(parent), last);
            states.row_mut(i).assign(&h);
        } else {
            states.row_mut(i).assign(&model.initial_hidden());
        }
        index.insert(seq.clone(), i);
    }
    Ok(StateMap {
        sequences: closed,
        states,
        index,
    })
}

/// Root-mean-square distance of the rows of `states` to their centroid.
pub fn representational_scale(states: &Array2<f64>) -> f64 {
    let Some(centroid) = states.mean_axis(Axis(0)) else {
        return 0.0;
    };
    let total: f64 = states
        .outer_iter()
        .map(|r| r.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    (total / states.nrows() as f64).sqrt()
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster id of each row, numbered in order of first appearance.
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub sizes: Vec<usize>,
}

impl Clustering {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Single-linkage clustering of the rows of `points`: rows closer than
/// `epsilon` (strictly) are joined, and joins are closed transitively.
pub fn cluster_points(points: &Array2<f64>, epsilon: f64) -> Result<Clustering, ExtractionError> {
    if !(epsilon > 0.0) {
        return Err(ExtractionError::Epsilon(epsilon));
    }
    let n = points.nrows();
    let mut uf = UnionFind::new(n);
    // |‖a‖ − ‖b‖| ≤ ‖a − b‖, so only rows with nearby norms can be joined
    let norms: Vec<f64> = points.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if norms[j] - norms[i] >= epsilon {
                break;
            }
            if dist2(points.row(i), points.row(j)).sqrt() < epsilon {
                uf.union(i, j);
            }
        }
    }

    let mut label = HashMap::new();
    let mut assignment = Vec::with_capacity(n);
    for i in 0..n {
        let root = uf.find(i);
        let next = label.len();
        assignment.push(*label.entry(root).or_insert(next));
    }
    let k = label.len();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let mut sizes = vec![0; k];
    for (i, &c) in assignment.iter().enumerate() {
        let mut row = centroids.row_mut(c);
        row += &points.row(i);
        sizes[c] += 1;
    }
    for (mut row, &s) in centroids.outer_iter_mut().zip(&sizes) {
        row /= s as f64;
    }
    Ok(Clustering {
        assignment,
        centroids,
        sizes,
    })
}

pub fn cluster_states(map: &StateMap, epsilon: f64) -> Result<Clustering, ExtractionError> {
    cluster_points(&map.states, epsilon)
}

/// Index of the row of `centroids` nearest to `x`, and its distance.
/// Index of the nearest centroid for every row of `queries`, via
/// `‖c‖² − 2⟨q, c⟩` so the bulk of the work is one matrix product.
fn nearest_rows(centroids: &Array2<f64>, queries: &Array2<f64>) -> Vec<usize> {
    let norms: Vec<f64> = centroids.outer_iter().map(|c| c.dot(&c)).collect();
    let mut cross = Array2::zeros((queries.nrows(), centroids.nrows()));
    general_mat_mul(1.0, queries, &centroids.t(), 0.0, &mut cross);
    cross
        .outer_iter()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (j, (&x, &n)) in row.iter().zip(&norms).enumerate() {
                let score = n - 2.0 * x;
                if score < best.1 {
                    best = (j, score);
                }
            }
            best.0
        })
        .collect()
}

/// `f_h` applied to every row of `states` with the same input symbol.
fn step_rows(model: &RnnModel, states: &Array2<f64>, symbol: Symbol) -> Array2<f64> {
    let mut z = states.dot(&model.w_rec.t());
    z += &model.w_in.column(symbol);
    z += &model.b_h;
    z.mapv_inplace(|v| model.hidden_activation.apply(v));
    z
}

fn nearest_one_hot(y: ArrayView1<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for o in 0..y.len() {
        let d: f64 = y
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - if k == o { 1.0 } else { 0.0 }).powi(2))
            .sum();
        if d < best.1 {
            best = (o, d);
        }
    }
    best.0
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub dfa: Dfa,
    pub clustering: Clustering,
    pub epsilon: f64,
    /// Distance from `f_h(centroid, σ)` to the chosen target centroid,
    /// indexed `[state][symbol]`.
    pub transition_distance: Vec<Vec<f64>>,
    /// Per cluster, the fraction of members whose own transition on some
    /// symbol lands in a different cluster than the centroid's.
    pub conflict_rate: Vec<f64>,
}

impl Extraction {
    pub fn num_states(&self) -> usize {
        self.dfa.num_states()
    }

    pub fn max_transition_distance(&self) -> f64 {
        self.transition_distance
            .iter()
            .flatten()
            .fold(0.0, |m, &d| m.max(d))
    }

    /// Member-weighted mean conflict rate.
    pub fn overall_conflict_rate(&self) -> f64 {
        let sizes = &self.clustering.sizes;
        let total: usize = sizes.iter().sum();
        self.conflict_rate
            .iter()
            .zip(sizes)
            .map(|(r, &s)| r * s as f64)
            .sum::<f64>()
            / total.max(1) as f64
    }
}

/// Threshold used for a state map: `epsilon_factor` times its scale.
pub fn merge_threshold(map: &StateMap, config: &ExtractionConfig) -> f64 {
    config.epsilon_factor * representational_scale(&map.states)
}

/// Quotients an already collected state map into an automaton.
pub fn extract_from_states(
    model: &RnnModel,
    map: &StateMap,
    epsilon: f64,
) -> Result<Extraction, ExtractionError> {
    if map.is_empty() {
        return Err(ExtractionError::EmptySequences);
    }
    // a collapsed representation has zero scale; any positive threshold
    // then yields the single cluster it describes
    let epsilon = if epsilon > 0.0 { epsilon } else { f64::MIN_POSITIVE };
    let clustering = cluster_states(map, epsilon)?;
    let dims = model.dims();
    let k = clustering.len();

    let centroid_next: Vec<Array2<f64>> = (0..dims.input)
        .map(|sigma| step_rows(model, &clustering.centroids, sigma))
        .collect();
    let centroid_targets: Vec<Vec<usize>> = centroid_next
        .iter()
        .map(|next| nearest_rows(&clustering.centroids, next))
        .collect();

    let mut transitions = Vec::with_capacity(k);
    let mut transition_distance = Vec::with_capacity(k);
    let mut outputs = Vec::with_capacity(k);
    for c in 0..k {
        let row: Vec<usize> = (0..dims.input).map(|sigma| centroid_targets[sigma][c]).collect();
        let dist = (0..dims.input)
            .map(|sigma| dist2(clustering.centroids.row(row[sigma]), centroid_next[sigma].row(c)).sqrt())
            .collect();
        transitions.push(row);
        transition_distance.push(dist);
        outputs.push(nearest_one_hot(model.readout(clustering.centroids.row(c)).view()));
    }

    let mut conflicts = vec![0usize; k];
    let member_targets: Vec<Vec<usize>> = (0..dims.input)
        .map(|sigma| nearest_rows(&clustering.centroids, &step_rows(model, &map.states, sigma)))
        .collect();
    for (i, &c) in clustering.assignment.iter().enumerate() {
        if (0..dims.input).any(|sigma| member_targets[sigma][i] != transitions[c][sigma]) {
            conflicts[c] += 1;
        }
    }
    let conflict_rate = conflicts
        .iter()
        .zip(&clustering.sizes)
        .map(|(&n, &s)| n as f64 / s as f64)
        .collect();

    let initial = clustering.assignment[map.index_of(&[]).unwrap_or(0)];
    let dfa = Dfa::with_output_size(dims.input, transitions, initial, outputs, dims.output.max(2))?;
    Ok(Extraction {
        dfa,
        clustering,
        epsilon,
        transition_distance,
        conflict_rate,
    })
}

/// Collects states over `sequences`, clusters them at the configured
/// threshold and reads off an automaton.
pub fn extract_automaton(
    model: &RnnModel,
    sequences: &[SymbolSequence],
    config: &ExtractionConfig,
) -> Result<Extraction, ExtractionError> {
    config.validate()?;
    let map = collect_states(model, sequences)?;
    extract_from_states(model, &map, merge_threshold(&map, config))
}

pub fn count_states(
    model: &RnnModel,
    sequences: &[SymbolSequence],
    config: &ExtractionConfig,
) -> Result<usize, ExtractionError> {
    config.validate()?;
    let map = collect_states(model, sequences)?;
    let eps = merge_threshold(&map, config);
    if eps <= 0.0 {
        return Ok(1);
    }
    Ok(cluster_states(&map, eps)?.len())
}

/// Margin by which the first-order term must exceed the rounding error of
/// the second-order estimate in [`taylor_ratio`].
pub const TAYLOR_RESOLUTION: f64 = 100.0;

/// Mean over continuations of `‖½ dhᵀ H dh‖ / ‖J dh‖` for the map from a
/// hidden state to the output after reading a continuation, expanded at
/// the midpoint of `h1` and `h2` with `dh = h2 − h1`. Both terms come from
/// central differences along `dh` with step `1e-4·‖dh‖`.
///
/// A continuation is skipped when its first-order term is below `1e-12`
/// or too small for the second difference to resolve: rounding in the
/// three output evaluations perturbs the second-order estimate by about
/// `2·ε_mach·‖f(mid)‖ / step²`, and the first-order term has to exceed that
/// by [`TAYLOR_RESOLUTION`] for the ratio to carry two significant digits.
/// Returns `None` if every continuation is skipped.
pub fn taylor_ratio(
    model: &RnnModel,
    h1: ArrayView1<f64>,
    h2: ArrayView1<f64>,
    continuations: &[Vec<Symbol>],
) -> Option<f64> {
    const REL_STEP: f64 = 1e-4;
    let dh = &h2 - &h1;
    let mid = (&h1 + &h2) * 0.5;
    let run = |h: Array1<f64>, c: &[Symbol]| {
        let end = c.iter().fold(h, |h, &s| model.step_symbol(h.view(), s));
        model.readout(end.view())
    };
    let mut sum = 0.0;
    let mut count = 0;
    for c in continuations {
        // a step of REL_STEP along dh has length REL_STEP·‖dh‖
        let plus = run(&mid + &(&dh * REL_STEP), c);
        let minus = run(&mid - &(&dh * REL_STEP), c);
        let centre = run(mid.clone(), c);
        let first = (&plus - &minus) / (2.0 * REL_STEP);
        let second = (&plus - &(&centre * 2.0) + &minus) * (0.5 / (REL_STEP * REL_STEP));
        let first_norm = first.dot(&first).sqrt();
        let rounding = 2.0 * f64::EPSILON * centre.dot(&centre).sqrt() / (REL_STEP * REL_STEP);
        if first_norm < 1e-12 || first_norm < TAYLOR_RESOLUTION * rounding {
            continue;
        }
        sum += second.dot(&second).sqrt() / first_norm;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// `agree[d][q1][q2]`: the two states emit equal outputs on every
/// continuation of length at most `d`.
fn agreement_table(task: &Dfa, depth: usize) -> Vec<Vec<bool>> {
    let n = task.num_states();
    let mut table = Vec::with_capacity(depth + 1);
    let mut prev: Vec<bool> = (0..n * n)
        .map(|p| task.output(p / n) == task.output(p % n))
        .collect();
    table.push(prev.clone());
    for _ in 0..depth {
        let cur: Vec<bool> = (0..n * n)
            .map(|p| {
                let (a, b) = (p / n, p % n);
                prev[p]
                    && (0..task.alphabet_size())
                        .all(|s| prev[task.next(a, s) * n + task.next(b, s)])
            })
            .collect();
        table.push(cur.clone());
        prev = cur;
    }
    table
}

/// Whether two nonempty sequences receive equal targets on every
/// continuation `c` for which both `s1·c` and `s2·c` are in a dataset of
/// all sequences up to `max_len`.
pub fn pair_agrees(task: &Dfa, s1: &[Symbol], s2: &[Symbol], max_len: usize) -> Result<bool, ExtractionError> {
    let budget = max_len.saturating_sub(s1.len().max(s2.len()));
    let table = agreement_table(task, budget);
    let n = task.num_states();
    Ok(table[budget][task.run(s1)? * n + task.run(s2)?])
}

/// Distance series and flags for one tracked pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub first: SymbolSequence,
    pub second: SymbolSequence,
    pub m1: usize,
    pub m2: usize,
    pub agree: bool,
    pub distances: Vec<f64>,
    pub merged: bool,
    pub peak: f64,
}

impl PairRecord {
    pub fn m(&self) -> usize {
        self.m1.min(self.m2)
    }

    /// Series divided by its first entry.
    pub fn normalized(&self) -> Vec<f64> {
        let d0 = self.distances.first().copied().unwrap_or(0.0);
        self.distances
            .iter()
            .map(|d| if d0 > 0.0 { d / d0 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MergerBin {
    pub m: usize,
    pub agreeing: usize,
    pub merged: usize,
}

impl MergerBin {
    pub fn fraction(&self) -> f64 {
        if self.agreeing == 0 {
            0.0
        } else {
            self.merged as f64 / self.agreeing as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergingBin {
    pub m1: usize,
    pub m2: usize,
    pub merged: usize,
    pub diverging: usize,
}

impl DivergingBin {
    pub fn fraction(&self) -> f64 {
        if self.merged == 0 {
            0.0
        } else {
            self.diverging as f64 / self.merged as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochPairStats {
    pub epoch: usize,
    pub epsilon: f64,
    pub mean_distance: f64,
    pub unmerged_agreeing: usize,
    pub unmerged_disagreeing: usize,
}

#[derive(Debug, Clone)]
pub struct PairReport {
    pub epochs: Vec<usize>,
    pub final_epsilon: f64,
    pub total_pairs: usize,
    pub merged_total: usize,
    pub merged_disagreeing: usize,
    pub merger_by_m: Vec<MergerBin>,
    pub diverging_by_lengths: Vec<DivergingBin>,
    pub per_epoch: Vec<EpochPairStats>,
    /// Full series for a seeded sample of pairs.
    pub tracked: Vec<PairRecord>,
}

impl PairReport {
    /// Fraction of merged pairs whose targets agree (1 when none merged).
    pub fn merger_purity(&self) -> f64 {
        if self.merged_total == 0 {
            1.0
        } else {
            1.0 - self.merged_disagreeing as f64 / self.merged_total as f64
        }
    }
}

/// Streaming pair statistics over every unordered pair of dataset
/// sequences. Snapshots are fed one at a time so memory stays linear in
/// the number of pairs rather than pairs × snapshots.
pub struct PairTracker {
    sequences: Vec<SymbolSequence>,
    lengths: Vec<usize>,
    agree: Vec<bool>,
    initial: Vec<f64>,
    peak: Vec<f64>,
    last: Vec<f64>,
    tracked_idx: Vec<usize>,
    tracked_series: Vec<Vec<f64>>,
    epochs: Vec<usize>,
    per_epoch: Vec<EpochPairStats>,
    epsilon_factor: f64,
    last_epsilon: f64,
    gram: Array2<f64>,
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Pair index of `(i, j)` with `i < j`, row-major over the upper triangle.
fn pair_index(n: usize, i: usize, j: usize) -> usize {
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

fn pair_from_index(n: usize, mut p: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= n - i - 1 {
        p -= n - i - 1;
        i += 1;
    }
    (i, i + 1 + p)
}

impl PairTracker {
    /// Prepares pairs over `dataset`, which must hold every sequence up to
    /// its maximum length. `tracked` pairs are sampled with `rng` for full
    /// series.
    pub fn new<R: Rng + ?Sized>(
        dataset: &Dataset,
        task: &Dfa,
        config: &ExtractionConfig,
        rng: &mut R,
    ) -> Result<Self, ExtractionError> {
        config.validate()?;
        let max_len = dataset.max_len();
        let k = task.alphabet_size();
        let complete: usize = (1..=max_len).map(|l| k.pow(l as u32)).sum();
        if dataset.len() != complete || dataset.examples.iter().any(|e| e.sequence.is_empty()) {
            return Err(ExtractionError::IncompleteDataset);
        }
        let sequences: Vec<SymbolSequence> = dataset.sequences().cloned().collect();
        let n = sequences.len();
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        let dfa_state: Vec<usize> = sequences
            .iter()
            .map(|s| task.run(s))
            .collect::<Result<_, _>>()?;
        let table = agreement_table(task, max_len);
        let q = task.num_states();
        let total = pair_count(n);
        let mut agree = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                let budget = max_len - lengths[i].max(lengths[j]);
                agree.push(table[budget][dfa_state[i] * q + dfa_state[j]]);
            }
        }
        let mut tracked_idx = sample(rng, total, config.tracked_pairs.min(total)).into_vec();
        tracked_idx.sort_unstable();
        Ok(Self {
            sequences,
            lengths,
            agree,
            initial: vec![0.0; total],
            peak: vec![0.0; total],
            last: vec![0.0; total],
            tracked_series: vec![Vec::new(); tracked_idx.len()],
            tracked_idx,
            epochs: Vec::new(),
            per_epoch: Vec::new(),
            epsilon_factor: config.epsilon_factor,
            last_epsilon: 0.0,
            gram: Array2::zeros((n, n)),
        })
    }

    pub fn sequences(&self) -> &[SymbolSequence] {
        &self.sequences
    }

    pub fn num_pairs(&self) -> usize {
        self.agree.len()
    }

    /// Records one snapshot; `states` rows follow the dataset order.
    pub fn observe(&mut self, epoch: usize, states: &Array2<f64>) -> Result<(), ExtractionError> {
        let n = self.sequences.len();
        if states.nrows() != n {
            return Err(ExtractionError::SnapshotShape {
                expected: n,
                found: states.nrows(),
            });
        }
        let epsilon = self.epsilon_factor * representational_scale(states);
        general_mat_mul(1.0, states, &states.t(), 0.0, &mut self.gram);
        let sq: Vec<f64> = (0..n).map(|i| self.gram[[i, i]]).collect();
        let first = self.epochs.is_empty();

        let mut p = 0;
        let mut sum = 0.0;
        let (mut open_agree, mut open_disagree) = (0, 0);
        for i in 0..n {
            let row = self.gram.row(i);
            for j in i + 1..n {
                let d = (sq[i] + sq[j] - 2.0 * row[j]).max(0.0).sqrt();
                sum += d;
                if first {
                    self.initial[p] = d;
                }
                if d > self.peak[p] {
                    self.peak[p] = d;
                }
                self.last[p] = d;
                if d >= epsilon {
                    if self.agree[p] {
                        open_agree += 1;
                    } else {
                        open_disagree += 1;
                    }
                }
                p += 1;
            }
        }
        for (k, &p) in self.tracked_idx.iter().enumerate() {
            self.tracked_series[k].push(self.last[p]);
        }
        self.epochs.push(epoch);
        self.last_epsilon = epsilon;
        self.per_epoch.push(EpochPairStats {
            epoch,
            epsilon,
            mean_distance: sum / pair_count(n).max(1) as f64,
            unmerged_agreeing: open_agree,
            unmerged_disagreeing: open_disagree,
        });
        Ok(())
    }

    /// Summaries at the last observed snapshot. A pair is merged when its
    /// final distance is below the final threshold, and a merger is
    /// diverging when its peak exceeded ten times that threshold.
    pub fn finish(&self) -> Result<PairReport, ExtractionError> {
        if self.epochs.len() < 2 {
            return Err(ExtractionError::TooFewSnapshots(self.epochs.len()));
        }
        let n = self.sequences.len();
        let eps = self.last_epsilon;
        let max_len = self.lengths.iter().copied().max().unwrap_or(0);
        let mut merger: Vec<MergerBin> = (0..=max_len)
            .map(|m| MergerBin {
                m,
                agreeing: 0,
                merged: 0,
            })
            .collect();
        let mut diverging = vec![vec![(0usize, 0usize); max_len + 1]; max_len + 1];
        let (mut merged_total, mut merged_disagreeing) = (0, 0);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                let (m1, m2) = (self.lengths[i], self.lengths[j]);
                let merged = self.last[p] < eps;
                if self.agree[p] {
                    merger[m1.min(m2)].agreeing += 1;
                    if merged {
                        merger[m1.min(m2)].merged += 1;
                    }
                }
                if merged {
                    merged_total += 1;
                    if !self.agree[p] {
                        merged_disagreeing += 1;
                    }
                    let cell = &mut diverging[m1][m2];
                    cell.0 += 1;
                    if self.peak[p] > 10.0 * eps {
                        cell.1 += 1;
                    }
                }
                p += 1;
            }
        }
        let diverging_by_lengths = (1..=max_len)
            .flat_map(|a| (a..=max_len).map(move |b| (a, b)))
            .map(|(m1, m2)| DivergingBin {
                m1,
                m2,
                merged: diverging[m1][m2].0,
                diverging: diverging[m1][m2].1,
            })
            .collect();
        let tracked = self
            .tracked_idx
            .iter()
            .zip(&self.tracked_series)
            .map(|(&p, series)| {
                let (i, j) = pair_from_index(n, p);
                PairRecord {
                    first: self.sequences[i].clone(),
                    second: self.sequences[j].clone(),
                    m1: self.lengths[i],
                    m2: self.lengths[j],
                    agree: self.agree[p],
                    distances: series.clone(),
                    merged: self.last[p] < eps,
                    peak: self.peak[p],
                }
            })
            .collect();
        Ok(PairReport {
            epochs: self.epochs.clone(),
            final_epsilon: eps,
            total_pairs: self.num_pairs(),
            merged_total,
            merged_disagreeing,
            merger_by_m: merger.into_iter().skip(1).collect(),
            diverging_by_lengths,
            per_epoch: self.per_epoch.clone(),
            tracked,
        })
    }

    /// Agreement flag of the pair `(i, j)` of dataset rows.
    pub fn agrees(&self, i: usize, j: usize) -> bool {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.agree[pair_index(self.sequences.len(), a, b)]
    }
}

/// Batch form of [`PairTracker`] over already collected snapshots. Each
/// snapshot's rows must follow the dataset order.
pub fn pair_diagnostics<R: Rng + ?Sized>(
    snapshots: &[(usize, Array2<f64>)],
    dataset: &Dataset,
    task: &Dfa,
    config: &ExtractionConfig,
    rng: &mut R,
) -> Result<PairReport, ExtractionError> {
    if snapshots.len() < 2 {
        return Err(ExtractionError::TooFewSnapshots(snapshots.len()));
    }
    let mut tracker = PairTracker::new(dataset, task, config, rng)?;
    for (epoch, states) in snapshots {
        tracker.observe(*epoch, states)?;
    }
    tracker.finish()
}

/// All continuations up to `max_len`, including the empty one.
pub fn continuations(alphabet_size: usize, max_len: usize) -> Vec<Vec<Symbol>> {
    std::iter::once(Vec::new())
        .chain(all_sequences(alphabet_size, max_len).into_iter().map(|s| s.0))
        .collect()
}
