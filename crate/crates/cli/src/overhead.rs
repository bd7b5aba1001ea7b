//! Step-time and allocation comparison of plain SGD, SGD with alignment
//! kernels, and SGD with explicit per-example gradients.

use std::time::Instant;

use inloop::galign::assemble_alignment;
use inloop::nn::{
    loss_and_backward, loss_and_grads, per_example_grads, sgd_step, Gradients, LayerTape, Network,
    SgdState,
};
use inloop::{Rng, Tensor};
use serde::Serialize;

use crate::alloc;
use crate::config::ExperimentConfig;
use crate::dataset::{self, SynthKind};
use crate::error::{CliError, Result};
use crate::output::write_json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Gar,
    Naive,
}

const MODES: [Mode; 3] = [Mode::Baseline, Mode::Gar, Mode::Naive];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ModeNumbers<T> {
    pub baseline: T,
    pub gar: T,
    pub naive: T,
}

impl<T: Copy> ModeNumbers<T> {
    fn get(&self, m: Mode) -> T {
        match m {
            Mode::Baseline => self.baseline,
            Mode::Gar => self.gar,
            Mode::Naive => self.naive,
        }
    }

    fn set(&mut self, m: Mode, v: T) {
        match m {
            Mode::Baseline => self.baseline = v,
            Mode::Gar => self.gar = v,
            Mode::Naive => self.naive = v,
        }
    }
}

/// Timing of one pass over all modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Repeat {
    pub step_ms: ModeNumbers<f64>,
    pub gar_ratio: f64,
    pub naive_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub network: Vec<String>,
    pub input_shape: Vec<usize>,
    pub batch_size: usize,
    pub param_count: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub parallel: bool,
    pub baseline_step_ms: f64,
    pub gar_step_ms: f64,
    pub naive_step_ms: f64,
    /// `(mode − baseline) / baseline` over pooled medians.
    pub gar_overhead: f64,
    pub naive_overhead: f64,
    pub repeats: Vec<Repeat>,
    /// Every repeat's step-time ratios within ±20% of the first repeat's.
    pub stable: bool,
    /// Largest rise of live heap bytes within one step, per mode. Absent
    /// when the counting allocator is not installed.
    pub peak_alloc_bytes: Option<ModeNumbers<usize>>,
    pub max_single_alloc_bytes: Option<ModeNumbers<usize>>,
    pub assemble_max_single_alloc_bytes: Option<usize>,
    /// `n × parameter count × 8`, the size of a per-example gradient matrix.
    pub per_example_matrix_bytes: usize,
}

impl OverheadReport {
    pub fn assemble_avoids_matrix(&self) -> Option<bool> {
        self.assemble_max_single_alloc_bytes
            .map(|b| b < self.per_example_matrix_bytes)
    }
}

struct Bench {
    batches: Vec<(Tensor, Vec<usize>)>,
    cfg: inloop::nn::SgdConfig,
}

/// Training state of one mode; every mode trains its own copy of the
/// network on the same batch sequence.
struct Lane {
    mode: Mode,
    net: Network,
    state: SgdState,
    tape: Option<LayerTape>,
    per_example: Option<Vec<Gradients>>,
    times_ms: Vec<f64>,
    peak: usize,
    max_single: usize,
    assemble_max: usize,
}

impl Lane {
    fn new(mode: Mode, net: Network) -> Self {
        Self {
            mode,
            net,
            state: SgdState::default(),
            tape: None,
            per_example: None,
            times_ms: Vec::new(),
            peak: 0,
            max_single: 0,
            assemble_max: 0,
        }
    }

    /// One training step; `measure` records its time and allocations.
    fn step(
        &mut self,
        x: &Tensor,
        y: &[usize],
        cfg: &inloop::nn::SgdConfig,
        measure: bool,
    ) -> Result<()> {
        let counting = measure && alloc::installed();
        if counting {
            alloc::reset();
        }
        let level = alloc::snapshot().current;
        let t0 = Instant::now();
        let grads = match self.mode {
            Mode::Baseline => loss_and_grads(&self.net, x, y)?.1,
            Mode::Gar => {
                let b = loss_and_backward(&self.net, x, y)?;
                if let Some(prev) = &self.tape {
                    let before = alloc::snapshot();
                    if counting {
                        alloc::reset();
                    }
                    std::hint::black_box(assemble_alignment(prev, &b.grads)?);
                    if counting {
                        let after = alloc::snapshot();
                        self.assemble_max = self.assemble_max.max(after.max_single);
                        alloc::merge(before.peak, before.max_single);
                    }
                }
                self.tape = Some(b.tape);
                b.grads
            }
            Mode::Naive => {
                let (_, grads) = loss_and_grads(&self.net, x, y)?;
                let singles = per_example_grads(&self.net, x, y)?;
                if let Some(prev) = &self.per_example {
                    let rewards = prev
                        .iter()
                        .map(|g| g.dot(&grads))
                        .collect::<inloop::Result<Vec<f64>>>()?;
                    std::hint::black_box(rewards);
                }
                self.per_example = Some(singles);
                grads
            }
        };
        sgd_step(&mut self.net, &grads, cfg, &mut self.state)?;
        if measure {
            self.times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        if counting {
            let s = alloc::snapshot();
            self.peak = self.peak.max(s.peak.saturating_sub(level));
            self.max_single = self.max_single.max(s.max_single);
        }
        Ok(())
    }
}

impl Bench {
    /// Round-robin over the modes each iteration, so slow drifts of the
    /// machine hit all of them alike.
    fn run(&self, net: &Network, warmup: usize, iterations: usize) -> Result<Vec<Lane>> {
        let mut lanes: Vec<Lane> = MODES.iter().map(|&m| Lane::new(m, net.clone())).collect();
        for it in 0..warmup + iterations {
            let (x, y) = &self.batches[it % self.batches.len()];
            for lane in &mut lanes {
                lane.step(x, y, &self.cfg, it >= warmup)?;
            }
        }
        Ok(lanes)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run_overhead(cfg: &ExperimentConfig) -> Result<OverheadReport> {
    cfg.validate()?;
    if cfg.warmup < 10 || cfg.iterations < 50 {
        return Err(CliError::Config(
            "overhead needs at least 10 warm-up and 50 measured iterations".into(),
        ));
    }
    let ds = dataset::load(cfg, SynthKind::Images, cfg.seed)?;
    let root = Rng::new(cfg.seed);
    let net = dataset::network(cfg, &ds, &mut root.derive(&[2]))?;
    let mut rng = root.derive(&[4]);
    let batches = (0..8)
        .map(|_| {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(ds.len())).collect();
            let labels = idx.iter().map(|&i| ds.labels()[i]).collect();
            (ds.images().select_rows(&idx), labels)
        })
        .collect();
    let bench = Bench {
        batches,
        cfg: cfg.sgd(),
    };
    let counting = alloc::installed();
    let mut pooled: ModeNumbers<Vec<f64>> = ModeNumbers::default();
    let mut peak: ModeNumbers<usize> = ModeNumbers::default();
    let mut max_single: ModeNumbers<usize> = ModeNumbers::default();
    let mut assemble_max = 0;
    let mut repeats = Vec::new();
    for _ in 0..cfg.repeats {
        let mut step_ms = ModeNumbers::default();
        for lane in bench.run(&net, cfg.warmup, cfg.iterations)? {
            let mode = lane.mode;
            step_ms.set(mode, median(&lane.times_ms));
            match mode {
                Mode::Baseline => pooled.baseline.extend(lane.times_ms),
                Mode::Gar => pooled.gar.extend(lane.times_ms),
                Mode::Naive => pooled.naive.extend(lane.times_ms),
            }
            peak.set(mode, peak.get(mode).max(lane.peak));
            max_single.set(mode, max_single.get(mode).max(lane.max_single));
            assemble_max = assemble_max.max(lane.assemble_max);
        }
        repeats.push(Repeat {
            gar_ratio: step_ms.gar / step_ms.baseline,
            naive_ratio: step_ms.naive / step_ms.baseline,
            step_ms,
        });
    }
    let first = repeats[0];
    let stable = repeats.iter().all(|r| {
        (r.gar_ratio / first.gar_ratio - 1.0).abs() <= 0.2
            && (r.naive_ratio / first.naive_ratio - 1.0).abs() <= 0.2
    });
    let base = median(&pooled.baseline);
    let gar = median(&pooled.gar);
    let naive = median(&pooled.naive);
    let param_count = net.param_count();
    let report = OverheadReport {
        network: cfg.network.clone(),
        input_shape: net.input_shape().to_vec(),
        batch_size: cfg.batch_size,
        param_count,
        warmup: cfg.warmup,
        iterations: cfg.iterations,
        parallel: inloop::par::is_parallel(),
        baseline_step_ms: base,
        gar_step_ms: gar,
        naive_step_ms: naive,
        gar_overhead: (gar - base) / base,
        naive_overhead: (naive - base) / base,
        repeats,
        stable,
        peak_alloc_bytes: counting.then_some(peak),
        max_single_alloc_bytes: counting.then_some(max_single),
        assemble_max_single_alloc_bytes: counting.then_some(assemble_max),
        per_example_matrix_bytes: cfg.batch_size * param_count * 8,
    };
    write_json(&report, &cfg.out.join("report.json"))?;
    Ok(report)
}
