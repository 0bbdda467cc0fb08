use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::{create_dir, write_file, ExperimentConfig, HarnessError, TaskSpec};
use crate::dfa::{equivalent, hopcroft_minimize, to_dot, Dfa};
use crate::extraction::{
    collect_states, continuations, extract_from_states, merge_threshold, taylor_ratio, PairRecord,
    PairReport, PairTracker,
};
use crate::plot::{LineChart, Series};
use crate::rnn::{evaluate, init_model, train, RnnError, RnnModel, TrainObserver};
use crate::seeding::{self, Stream};
use crate::taskgen::{all_sequences, make_dataset, prefix_closure, sample_validation, Dataset, SymbolSequence};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub epoch: usize,
    pub length: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotRow {
    pub epoch: usize,
    pub epsilon: f64,
    pub states: usize,
    pub minimized_states: usize,
    pub max_transition_distance: f64,
    pub conflict_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorRow {
    pub epoch: usize,
    /// Pairs with a non-vanishing first-order term at this epoch.
    pub pairs: usize,
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPair {
    /// `merging_agreeing` or `disagreeing`.
    pub kind: &'static str,
    pub record: PairRecord,
}

/// One CSV row of a sweep, also written as `summary.json` for single runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gain: f64,
    pub max_length: usize,
    pub dataset_size: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Final accuracy on the length-100 validation set (NaN if absent).
    pub accuracy: f64,
    pub states: usize,
    pub minimized_states: usize,
    pub equivalent: bool,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub task: Dfa,
    pub dataset_size: usize,
    /// Entry `e` is the training loss after epoch `e` (0 = before training).
    pub losses: Vec<f64>,
    pub validation: Vec<ValidationRow>,
    pub snapshots: Vec<SnapshotRow>,
    /// Extracted (unminimized) automaton per snapshot epoch.
    pub automata: Vec<(usize, Dfa)>,
    pub pairs: Option<PairReport>,
    pub taylor: Vec<TaylorRow>,
    pub selected: Vec<SelectedPair>,
    pub final_model: RnnModel,
    /// Set when training stopped early; the other fields hold what was
    /// recorded up to that point.
    pub failure: Option<String>,
}

impl TrainingTrace {
    pub fn epochs_run(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }

    pub fn final_automaton(&self) -> Option<&Dfa> {
        self.automata.last().map(|(_, d)| d)
    }

    pub fn final_minimized(&self) -> Option<Dfa> {
        self.final_automaton().map(hopcroft_minimize)
    }

    /// Whether the final extracted automaton computes the task.
    pub fn learned_task(&self) -> bool {
        self.final_automaton()
            .is_some_and(|d| equivalent(d, &self.task).unwrap_or(false))
    }

    /// Accuracy at the last validation snapshot for `length`.
    pub fn final_accuracy(&self, length: usize) -> Option<f64> {
        self.validation
            .iter()
            .rev()
            .find(|r| r.length == length)
            .map(|r| r.accuracy)
    }

    /// First snapshot epoch with perfect accuracy at `length`.
    pub fn first_perfect_epoch(&self, length: usize) -> Option<usize> {
        self.validation
            .iter()
            .find(|r| r.length == length && r.accuracy == 1.0)
            .map(|r| r.epoch)
    }

    pub fn summary(&self, config: &ExperimentConfig) -> SweepRow {
        let last = self.snapshots.last();
        SweepRow {
            gain: config.train.init_gain,
            max_length: config.dataset.max_train_length,
            dataset_size: self.dataset_size,
            seed: config.train.seed,
            epochs_run: self.epochs_run(),
            final_loss: self.final_loss(),
            accuracy: self.final_accuracy(100).unwrap_or(f64::NAN),
            states: last.map_or(0, |s| s.states),
            minimized_states: last.map_or(0, |s| s.minimized_states),
            equivalent: self.learned_task(),
            error: self.failure.clone().unwrap_or_default(),
        }
    }
}

struct Recorder<'a> {
    config: &'a ExperimentConfig,
    eval_sequences: Vec<SymbolSequence>,
    dataset: &'a Dataset,
    validation: Vec<(usize, Dataset)>,
    snapshot_epochs: Vec<usize>,
    tracker: Option<PairTracker>,
    losses: Vec<f64>,
    rows: Vec<ValidationRow>,
    snapshots: Vec<SnapshotRow>,
    automata: Vec<(usize, Dfa)>,
    models: Vec<(usize, RnnModel)>,
    error: Option<HarnessError>,
}

impl Recorder<'_> {
    fn snapshot(&mut self, epoch: usize, model: &RnnModel) -> Result<(), HarnessError> {
        let map = collect_states(model, &self.eval_sequences)?;
        let eps = merge_threshold(&map, &self.config.extraction);
        let ex = extract_from_states(model, &map, eps)?;
        let minimized = hopcroft_minimize(&ex.dfa);
        self.snapshots.push(SnapshotRow {
            epoch,
            epsilon: ex.epsilon,
            states: ex.num_states(),
            minimized_states: minimized.num_states(),
            max_transition_distance: ex.max_transition_distance(),
            conflict_rate: ex.overall_conflict_rate(),
        });
        self.automata.push((epoch, ex.dfa));

        let evals: Vec<Result<(f64, f64), RnnError>> = self
            .validation
            .par_iter()
            .map(|(_, data)| evaluate(model, data))
            .collect();
        for ((length, _), r) in self.validation.iter().zip(evals) {
            let (loss, accuracy) = r?;
            self.rows.push(ValidationRow {
                epoch,
                length: *length,
                loss,
                accuracy,
            });
        }

        if let Some(tracker) = self.tracker.as_mut() {
            tracker.observe(epoch, &map.rows_for(self.dataset.sequences()))?;
            self.models.push((epoch, model.clone()));
        }
        Ok(())
    }
}

impl TrainObserver for Recorder<'_> {
    fn on_epoch(&mut self, epoch: usize, model: &RnnModel, train_loss: f64) -> Result<(), RnnError> {
        self.losses.push(train_loss);
        if self.snapshot_epochs.binary_search(&epoch).is_ok() {
            if let Err(e) = self.snapshot(epoch, model) {
                let msg = e.to_string();
                self.error = Some(e);
                return Err(RnnError::Config(format!("snapshot at epoch {epoch}: {msg}")));
            }
        }
        Ok(())
    }
}

/// Trains per `config`, snapshotting automata, validation metrics and
/// (optionally) pair statistics. Divergence is reported in
/// [`TrainingTrace::failure`] rather than as an error so partial results
/// can still be written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<TrainingTrace, HarnessError> {
    config.validate()?;
    let task = config.task.build();
    let sequences = all_sequences(task.alphabet_size(), config.dataset.max_train_length);
    let dataset = make_dataset(&task, &sequences)?;
    let validation = config
        .dataset
        .validation_lengths
        .iter()
        .map(|&l| {
            let mut rng = seeding::validation_rng(config.train.seed, l);
            Ok((l, sample_validation(&task, l, config.dataset.validation_count, &mut rng)?))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut pair_rng = seeding::rng(config.train.seed, Stream::PairSelection);
    let tracker = if config.pairs.enabled {
        Some(PairTracker::new(&dataset, &task, &config.extraction, &mut pair_rng)?)
    } else {
        None
    };

    let mut model = init_model(&config.train, task.alphabet_size(), task.output_size());
    let mut rec = Recorder {
        config,
        eval_sequences: prefix_closure(dataset.sequences()),
        dataset: &dataset,
        validation,
        snapshot_epochs: config.snapshot_epochs(),
        tracker,
        losses: Vec::new(),
        rows: Vec::new(),
        snapshots: Vec::new(),
        automata: Vec::new(),
        models: Vec::new(),
        error: None,
    };

    let failure = match train(&mut model, &dataset, &config.train, &mut rec) {
        Ok(_) => None,
        Err(e) => match rec.error.take() {
            Some(inner) => return Err(inner),
            None => Some(e.to_string()),
        },
    };

    let pairs = match (&rec.tracker, failure.is_none()) {
        (Some(t), true) => Some(t.finish()?),
        _ => None,
    };
    let (taylor, selected) = match &pairs {
        Some(report) => (
            taylor_series(config, report, &rec.models, &mut pair_rng),
            selected_pairs(report, &mut pair_rng),
        ),
        None => (Vec::new(), Vec::new()),
    };

    Ok(TrainingTrace {
        task,
        dataset_size: dataset.len(),
        losses: rec.losses,
        validation: rec.rows,
        snapshots: rec.snapshots,
        automata: rec.automata,
        pairs,
        taylor,
        selected,
        final_model: model,
        failure,
    })
}

/// One merged agreeing pair and one disagreeing pair, each drawn
/// uniformly from the tracked sample. Either may be missing if the sample
/// holds no such pair.
pub fn selected_pairs<R: rand::Rng + ?Sized>(report: &PairReport, rng: &mut R) -> Vec<SelectedPair> {
    let merging: Vec<&PairRecord> = report.tracked.iter().filter(|p| p.merged && p.agree).collect();
    let disagreeing: Vec<&PairRecord> = report.tracked.iter().filter(|p| !p.agree).collect();
    let mut out = Vec::new();
    if let Some(p) = merging.choose(rng) {
        out.push(SelectedPair {
            kind: "merging_agreeing",
            record: (*p).clone(),
        });
    }
    if let Some(p) = disagreeing.choose(rng) {
        out.push(SelectedPair {
            kind: "disagreeing",
            record: (*p).clone(),
        });
    }
    out
}

fn taylor_series<R: rand::Rng + ?Sized>(
    config: &ExperimentConfig,
    report: &PairReport,
    models: &[(usize, RnnModel)],
    rng: &mut R,
) -> Vec<TaylorRow> {
    let max_len = config.dataset.max_train_length;
    let mut merged: Vec<&PairRecord> = report.tracked.iter().filter(|p| p.merged && p.agree).collect();
    merged.shuffle(rng);
    merged.truncate(config.pairs.taylor_pairs);
    let per_pair: Vec<(&PairRecord, Vec<Vec<usize>>)> = merged
        .into_iter()
        .map(|p| {
            let budget = max_len - p.m1.max(p.m2);
            let mut conts = continuations(2, budget);
            conts.shuffle(rng);
            conts.truncate(config.pairs.taylor_continuations.max(1));
            (p, conts)
        })
        .collect();
    models
        .par_iter()
        .map(|(epoch, model)| {
            let ratios: Vec<f64> = per_pair
                .iter()
                .filter_map(|(p, conts)| {
                    let h1 = model.final_hidden(&p.first);
                    let h2 = model.final_hidden(&p.second);
                    taylor_ratio(model, h1.view(), h2.view(), conts)
                })
                .collect();
            let n = ratios.len();
            TaylorRow {
                epoch: *epoch,
                pairs: n,
                mean_ratio: if n == 0 { f64::NAN } else { ratios.iter().sum::<f64>() / n as f64 },
                max_ratio: ratios.iter().copied().fold(f64::NAN, f64::max),
            }
        })
        .collect()
}

fn seq_str(s: &SymbolSequence) -> String {
    s.0.iter().map(|x| x.to_string()).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Writes every output file of a run into `dir`.
///
/// | file | header |
/// |---|---|
/// | `loss.csv` | `epoch,train_loss` |
/// | `validation.csv` | `epoch,length,loss,accuracy` |
/// | `states.csv` | `epoch,epsilon,states,minimized_states,max_transition_distance,conflict_rate` |
/// | `merger_by_m.csv` | `m,agreeing,merged,fraction` |
/// | `diverging_by_lengths.csv` | `m1,m2,merged,diverging,fraction` |
/// | `pair_epochs.csv` | `epoch,epsilon,mean_distance,unmerged_agreeing,unmerged_disagreeing` |
/// | `selected_pairs.csv` | `kind,first,second,epoch,distance,normalized` |
/// | `taylor.csv` | `epoch,pairs,mean_ratio,max_ratio` |
///
/// The last four only exist when pair tracking was on. DOT files are
/// `automaton_epochNNNN.dot` per snapshot plus `automaton_final.dot`,
/// `automaton_final_min.dot` and `task.dot`; `automaton_final_min.txt`
/// holds the text form.
pub fn write_trace(trace: &TrainingTrace, config: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;

    let loss_rows: Vec<(usize, f64)> = trace.losses.iter().copied().enumerate().collect();
    write_csv(&dir.join("loss.csv"), &loss_rows, &["epoch", "train_loss"])?;
    write_csv(
        &dir.join("validation.csv"),
        &trace.validation,
        &["epoch", "length", "loss", "accuracy"],
    )?;
    write_csv(
        &dir.join("states.csv"),
        &trace.snapshots,
        &["epoch", "epsilon", "states", "minimized_states", "max_transition_distance", "conflict_rate"],
    )?;

    for (epoch, dfa) in &trace.automata {
        write_file(&dir.join(format!("automaton_epoch{epoch:04}.dot")), to_dot(dfa))?;
    }
    write_file(&dir.join("task.dot"), to_dot(&trace.task))?;
    if let Some(last) = trace.final_automaton() {
        let min = hopcroft_minimize(last);
        write_file(&dir.join("automaton_final.dot"), to_dot(last))?;
        write_file(&dir.join("automaton_final_min.dot"), to_dot(&min))?;
        write_file(&dir.join("automaton_final_min.txt"), min.to_text())?;
    }
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&trace.summary(config))? + "\n",
    )?;

    if let Some(report) = &trace.pairs {
        let merger: Vec<(usize, usize, usize, f64)> = report
            .merger_by_m
            .iter()
            .map(|b| (b.m, b.agreeing, b.merged, b.fraction()))
            .collect();
        write_csv(&dir.join("merger_by_m.csv"), &merger, &["m", "agreeing", "merged", "fraction"])?;
        let diverging: Vec<(usize, usize, usize, usize, f64)> = report
            .diverging_by_lengths
            .iter()
            .map(|b| (b.m1, b.m2, b.merged, b.diverging, b.fraction()))
            .collect();
        write_csv(
            &dir.join("diverging_by_lengths.csv"),
            &diverging,
            &["m1", "m2", "merged", "diverging", "fraction"],
        )?;
        let per_epoch: Vec<(usize, f64, f64, usize, usize)> = report
            .per_epoch
            .iter()
            .map(|e| (e.epoch, e.epsilon, e.mean_distance, e.unmerged_agreeing, e.unmerged_disagreeing))
            .collect();
        write_csv(
            &dir.join("pair_epochs.csv"),
            &per_epoch,
            &["epoch", "epsilon", "mean_distance", "unmerged_agreeing", "unmerged_disagreeing"],
        )?;
        let mut selected = Vec::new();
        for s in &trace.selected {
            let norm = s.record.normalized();
            for ((epoch, d), n) in report.epochs.iter().zip(&s.record.distances).zip(norm) {
                selected.push((
                    s.kind,
                    seq_str(&s.record.first),
                    seq_str(&s.record.second),
                    *epoch,
                    *d,
                    n,
                ));
            }
        }
        write_csv(
            &dir.join("selected_pairs.csv"),
            &selected,
            &["kind", "first", "second", "epoch", "distance", "normalized"],
        )?;
        write_csv(&dir.join("taylor.csv"), &trace.taylor, &["epoch", "pairs", "mean_ratio", "max_ratio"])?;
    }

    if config.plots {
        write_plots(trace, dir)?;
    }
    Ok(())
}

fn write_plots(trace: &TrainingTrace, dir: &Path) -> Result<(), HarnessError> {
    let loss: Vec<(f64, f64)> = trace
        .losses
        .iter()
        .enumerate()
        .map(|(e, &l)| (e as f64, l))
        .collect();
    let chart = LineChart {
        title: "training loss",
        x_label: "epoch",
        y_label: "loss",
        log_y: true,
        series: vec![Series {
            label: "train".into(),
            points: &loss,
        }],
    };
    write_file(&dir.join("loss.svg"), chart.to_svg())?;

    let mut lengths: Vec<usize> = trace.validation.iter().map(|r| r.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let by_length = |f: fn(&ValidationRow) -> f64| -> Vec<(usize, Vec<(f64, f64)>)> {
        lengths
            .iter()
            .map(|&l| {
                let pts = trace
                    .validation
                    .iter()
                    .filter(|r| r.length == l)
                    .map(|r| (r.epoch as f64, f(r)))
                    .collect();
                (l, pts)
            })
            .collect()
    };
    for (name, log_y, f) in [
        ("validation_loss", true, (|r: &ValidationRow| r.loss) as fn(&ValidationRow) -> f64),
        ("validation_accuracy", false, |r: &ValidationRow| r.accuracy),
    ] {
        let data = by_length(f);
        let chart = LineChart {
            title: name,
            x_label: "epoch",
            y_label: name,
            log_y,
            series: data
                .iter()
                .map(|(l, pts)| Series {
                    label: format!("length {l}"),
                    points: pts,
                })
                .collect(),
        };
        write_file(&dir.join(format!("{name}.svg")), chart.to_svg())?;
    }

    let states: Vec<(f64, f64)> = trace
        .snapshots
        .iter()
        .map(|s| (s.epoch as f64, s.states as f64))
        .collect();
    let chart = LineChart {
        title: "extracted states",
        x_label: "epoch",
        y_label: "states",
        log_y: true,
        series: vec![Series {
            label: "states".into(),
            points: &states,
        }],
    };
    write_file(&dir.join("states.svg"), chart.to_svg())?;

    if let Some(report) = &trace.pairs {
        let series: Vec<(String, Vec<(f64, f64)>)> = trace
            .selected
            .iter()
            .map(|s| {
                let pts = report
                    .epochs
                    .iter()
                    .zip(s.record.normalized())
                    .map(|(&e, n)| (e as f64, n))
                    .collect();
                (s.kind.to_string(), pts)
            })
            .collect();
        let chart = LineChart {
            title: "selected pair distances",
            x_label: "epoch",
            y_label: "normalized distance",
            log_y: true,
            series: series
                .iter()
                .map(|(l, p)| Series {
                    label: l.clone(),
                    points: p,
                })
                .collect(),
        };
        write_file(&dir.join("selected_pairs.svg"), chart.to_svg())?;
    }
    Ok(())
}

fn cell_config(base: &ExperimentConfig, gain: f64, max_length: usize, seed_offset: usize) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.init_gain = gain;
    c.train.seed = base.train.seed + seed_offset as u64;
    c.dataset.max_train_length = max_length;
    c.dataset.validation_lengths = vec![100];
    c.pairs.enabled = false;
    c.plots = false;
    c.selected_epochs.clear();
    c.extraction.snapshot_stride = c.train.epochs.max(1);
    c
}

/// Runs every `(gain, max_length, seed)` cell on a pool of `workers`
/// threads. Rows come back in grid order whatever the scheduling, and a
/// failing cell fills its `error` column instead of aborting the sweep.
pub fn run_sweep(config: &ExperimentConfig, workers: usize) -> Result<Vec<SweepRow>, HarnessError> {
    let s = &config.sweep;
    if s.gains.is_empty() || s.max_lengths.is_empty() || s.seeds == 0 {
        return Err(HarnessError::Config("sweep grids must be nonempty".into()));
    }
    if s.max_lengths.contains(&0) {
        return Err(HarnessError::Config("sweep lengths must be at least 1".into()));
    }
    let cells: Vec<ExperimentConfig> = s
        .gains
        .iter()
        .flat_map(|&g| {
            s.max_lengths
                .iter()
                .flat_map(move |&l| (0..s.seeds).map(move |k| (g, l, k)))
        })
        .map(|(g, l, k)| cell_config(config, g, l, k))
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Failed(e.to_string()))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|c| match run_experiment(c) {
                Ok(trace) => trace.summary(c),
                Err(e) => SweepRow {
                    gain: c.train.init_gain,
                    max_length: c.dataset.max_train_length,
                    dataset_size: (1..=c.dataset.max_train_length).map(|l| 1usize << l).sum(),
                    seed: c.train.seed,
                    epochs_run: 0,
                    final_loss: f64::NAN,
                    accuracy: f64::NAN,
                    states: 0,
                    minimized_states: 0,
                    equivalent: false,
                    error: e.to_string(),
                },
            })
            .collect()
    }))
}

/// Writes `sweep.csv` (header `gain,max_length,dataset_size,seed,
/// epochs_run,final_loss,accuracy,states,minimized_states,equivalent,error`)
/// and the echoed config.
pub fn write_sweep(rows: &[SweepRow], config: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    write_csv(
        &dir.join("sweep.csv"),
        rows,
        &[
            "gain",
            "max_length",
            "dataset_size",
            "seed",
            "epochs_run",
            "final_loss",
            "accuracy",
            "states",
            "minimized_states",
            "equivalent",
            "error",
        ],
    )?;
    if config.plots {
        let mut series = Vec::new();
        for &g in &config.sweep.gains {
            let pts: Vec<(f64, f64)> = config
                .sweep
                .max_lengths
                .iter()
                .map(|&l| {
                    let cell: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.gain == g && r.max_length == l)
                        .map(|r| r.accuracy)
                        .collect();
                    (l as f64, cell.iter().sum::<f64>() / cell.len().max(1) as f64)
                })
                .collect();
            series.push((format!("gain {g}"), pts));
        }
        let chart = LineChart {
            title: "length-100 accuracy",
            x_label: "max training length",
            y_label: "accuracy",
            log_y: false,
            series: series
                .iter()
                .map(|(l, p)| Series {
                    label: l.clone(),
                    points: p,
                })
                .collect(),
        };
        write_file(&dir.join("sweep_accuracy.svg"), chart.to_svg())?;
    }
    Ok(())
}

impl TaskSpec {
    pub fn label(&self) -> String {
        match self {
            TaskSpec::Parity => "parity".into(),
            TaskSpec::Random { seed, .. } => format!("random-{seed}"),
        }
    }
}
