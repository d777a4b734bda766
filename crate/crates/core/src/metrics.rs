//! Episode statistics, state-space coverage and aggregation.
//!
//! Exploration states are `(C, c)` pairs; local agent states are
//! `(supply, depot_flag, timer)` triples over raw integer fields.
//! Denominators count reachable states: exploration gives
//! `(C_max - C_init) * c_max + 1` (the counter is frozen at the top level) and
//! local states come from a breadth-first search over the production rules.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvParams, EnvState, TraceRecord, NUM_ACTIONS};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitset {
    words: Vec<u64>,
    len: usize,
    ones: usize,
}

impl Bitset {
    pub fn new(len: usize) -> Self {
        Self { words: vec![0; len.div_ceil(64)], len, ones: 0 }
    }

    /// Sets bit `i`; returns true if it was newly set.
    pub fn insert(&mut self, i: usize) -> bool {
        let (w, b) = (i / 64, 1u64 << (i % 64));
        let new = self.words[w] & b == 0;
        if new {
            self.words[w] |= b;
            self.ones += 1;
        }
        new
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1u64 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.ones
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn union_with(&mut self, other: &Bitset) {
        let mut ones = 0;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
            ones += a.count_ones() as usize;
        }
        self.ones = ones;
    }
}

/// Index spaces and reachable-state denominators for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub levels: usize,
    pub counter: usize,
    pub timer: usize,
    pub supply: usize,
    pub exploration_denominator: usize,
    pub local_denominator: usize,
}

impl StateSpace {
    pub fn new(p: &EnvParams) -> Self {
        let levels = (p.yield_max - p.yield_init + 1) as usize;
        let counter = p.explores_per_level as usize;
        Self {
            levels,
            counter,
            timer: p.cycle_len as usize + 1,
            supply: p.supply_max as usize + 1,
            exploration_denominator: (levels - 1) * counter + 1,
            local_denominator: reachable_local_states(p).len(),
        }
    }

    pub fn exploration_size(&self) -> usize {
        self.levels * self.counter
    }

    pub fn local_size(&self) -> usize {
        self.supply * 2 * self.timer
    }

    pub fn combined_denominator(&self) -> usize {
        self.local_denominator * self.exploration_denominator
    }

    pub fn exploration_index(&self, p: &EnvParams, s: &EnvState) -> usize {
        (s.yield_level - p.yield_init) as usize * self.counter + s.explore_counter as usize
    }

    pub fn local_index(&self, p: &EnvParams, s: &EnvState, agent: usize) -> usize {
        let flag = s.depot_has_space(p, agent) as usize;
        (s.supply[agent] as usize * 2 + flag) * self.timer + s.timer[agent] as usize
    }
}

/// Projected `(supply, flag, timer)` states reachable from reset when the
/// agent may consume or wait and the shared level may rise at any time.
pub fn reachable_local_states(p: &EnvParams) -> Vec<(u32, bool, u32)> {
    let mut seen = std::collections::HashSet::new();
    let mut queue = VecDeque::new();
    let start = (p.supply_init, p.cycle_len, p.yield_init);
    seen.insert(start);
    queue.push_back(start);
    while let Some((s, t, c)) = queue.pop_front() {
        for consume in [false, true] {
            let s1 = if consume && s > 0 { s - 1 } else { s };
            for c1 in c..=p.yield_max {
                let mut t1 = t.saturating_sub(1);
                let mut s2 = s1;
                if t1 == 0 && s2 + c1 <= p.supply_max {
                    s2 += c1;
                    t1 = p.cycle_len;
                }
                let next = (s2, t1, c1);
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
    }
    let mut out: Vec<(u32, bool, u32)> = seen.into_iter().map(|(s, t, c)| (s, s + c <= p.supply_max, t)).collect();
    out.sort();
    out.dedup();
    out
}

/// Visited sets for the exploration, local and combined state spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTracker {
    pub space: StateSpace,
    pub exploration: Bitset,
    pub local: Vec<Bitset>,
    pub combined: Vec<Bitset>,
}

impl CoverageTracker {
    pub fn new(p: &EnvParams) -> Self {
        let space = StateSpace::new(p);
        let n = p.n_agents;
        Self {
            exploration: Bitset::new(space.exploration_size()),
            local: vec![Bitset::new(space.local_size()); n],
            combined: vec![Bitset::new(space.local_size() * space.exploration_size()); n],
            space,
        }
    }

    pub fn visit(&mut self, p: &EnvParams, s: &EnvState) {
        let e = self.space.exploration_index(p, s);
        self.exploration.insert(e);
        for i in 0..self.local.len() {
            let l = self.space.local_index(p, s, i);
            self.local[i].insert(l);
            self.combined[i].insert(l * self.space.exploration_size() + e);
        }
    }

    pub fn merge(&mut self, other: &CoverageTracker) {
        self.exploration.union_with(&other.exploration);
        for (a, b) in self.local.iter_mut().zip(&other.local) {
            a.union_with(b);
        }
        for (a, b) in self.combined.iter_mut().zip(&other.combined) {
            a.union_with(b);
        }
    }

    pub fn exploration_coverage(&self) -> f64 {
        self.exploration.count() as f64 / self.space.exploration_denominator as f64
    }

    pub fn local_coverage(&self) -> Vec<f64> {
        self.local.iter().map(|b| b.count() as f64 / self.space.local_denominator as f64).collect()
    }

    pub fn combined_coverage(&self) -> Vec<f64> {
        self.combined.iter().map(|b| b.count() as f64 / self.space.combined_denominator() as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub length: u32,
    pub partial: bool,
    pub returns: Vec<f64>,
    pub joint_return: f64,
    /// Per agent, percentages of `[noop, consume, explore]`.
    pub action_pct: Vec<[f64; NUM_ACTIONS]>,
    /// `simultaneous_consume[k]`: steps on which exactly `k` agents consumed.
    pub simultaneous_consume: Vec<u64>,
    pub simultaneous_explore: Vec<u64>,
    pub final_yield: u32,
    /// Indexed by `level - C_init`; the initial level is reached at step 0.
    pub steps_to_level: Vec<Option<u32>>,
    pub exploration_visited: usize,
    pub exploration_coverage: f64,
    pub local_coverage: Vec<f64>,
}

/// Incremental builder of [`EpisodeStats`].
#[derive(Debug, Clone)]
pub struct EpisodeTracker {
    params: EnvParams,
    coverage: CoverageTracker,
    returns: Vec<f64>,
    counts: Vec<[u64; NUM_ACTIONS]>,
    sim_consume: Vec<u64>,
    sim_explore: Vec<u64>,
    steps_to_level: Vec<Option<u32>>,
    steps: u32,
    last_level: u32,
    done: bool,
}

impl EpisodeTracker {
    pub fn new(params: &EnvParams, initial: &EnvState) -> Self {
        let n = params.n_agents;
        let mut t = Self {
            params: params.clone(),
            coverage: CoverageTracker::new(params),
            returns: vec![0.0; n],
            counts: vec![[0; NUM_ACTIONS]; n],
            sim_consume: vec![0; n + 1],
            sim_explore: vec![0; n + 1],
            steps_to_level: vec![None; (params.yield_max - params.yield_init + 1) as usize],
            steps: 0,
            last_level: initial.yield_level,
            done: false,
        };
        t.coverage.visit(params, initial);
        t.mark_levels(initial.yield_level, 0);
        t
    }

    fn mark_levels(&mut self, level: u32, step: u32) {
        for l in self.params.yield_init..=level {
            let slot = &mut self.steps_to_level[(l - self.params.yield_init) as usize];
            if slot.is_none() {
                *slot = Some(step);
            }
        }
        self.last_level = level;
    }

    pub fn record(&mut self, actions: &[Action], rewards: &[f64], after: &EnvState, done: bool) {
        self.steps += 1;
        let (mut nc, mut ne) = (0, 0);
        for (i, a) in actions.iter().enumerate() {
            self.counts[i][a.index()] += 1;
            self.returns[i] += rewards[i];
            nc += (*a == Action::Consume) as usize;
            ne += (*a == Action::Explore) as usize;
        }
        self.sim_consume[nc] += 1;
        self.sim_explore[ne] += 1;
        self.coverage.visit(&self.params, after);
        if after.yield_level != self.last_level {
            self.mark_levels(after.yield_level, self.steps);
        }
        self.done = done;
    }

    pub fn coverage(&self) -> &CoverageTracker {
        &self.coverage
    }

    pub fn finish(&self) -> EpisodeStats {
        let pct = self
            .counts
            .iter()
            .map(|c| {
                let mut out = [0.0; NUM_ACTIONS];
                if self.steps > 0 {
                    for k in 0..NUM_ACTIONS {
                        out[k] = 100.0 * c[k] as f64 / self.steps as f64;
                    }
                }
                out
            })
            .collect();
        EpisodeStats {
            length: self.steps,
            partial: !self.done,
            joint_return: self.returns.iter().sum(),
            returns: self.returns.clone(),
            action_pct: pct,
            simultaneous_consume: self.sim_consume.clone(),
            simultaneous_explore: self.sim_explore.clone(),
            final_yield: self.last_level,
            steps_to_level: self.steps_to_level.clone(),
            exploration_visited: self.coverage.exploration.count(),
            exploration_coverage: self.coverage.exploration_coverage(),
            local_coverage: self.coverage.local_coverage(),
        }
    }
}

/// Statistics of a recorded trace starting from the reset state.
pub fn track(params: &EnvParams, trace: &[TraceRecord]) -> (EpisodeStats, CoverageTracker) {
    let mut t = EpisodeTracker::new(params, &EnvState::initial(params));
    for r in trace {
        t.record(&r.actions, &r.rewards, &r.state, r.done);
    }
    (t.finish(), t.coverage.clone())
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn summary(&self) -> Summary {
        let var = if self.n > 0 { (self.m2 / self.n as f64).max(0.0) } else { 0.0 };
        Summary { mean: self.mean, std: var.sqrt(), count: self.n }
    }
}

pub fn summarize(values: impl IntoIterator<Item = f64>) -> Summary {
    let mut w = Welford::default();
    values.into_iter().for_each(|v| w.push(v));
    w.summary()
}

/// Flat named measures of one episode, in a stable order.
pub fn measures(s: &EpisodeStats) -> Vec<(String, f64)> {
    let mut m = vec![
        ("joint_return".to_string(), s.joint_return),
        ("final_yield".to_string(), s.final_yield as f64),
        ("exploration_coverage".to_string(), s.exploration_coverage),
        ("length".to_string(), s.length as f64),
    ];
    let n = s.returns.len() as f64;
    let names = ["noop", "consume", "explore"];
    for (k, name) in names.iter().enumerate() {
        m.push((format!("mean_pct_{name}"), s.action_pct.iter().map(|p| p[k]).sum::<f64>() / n));
    }
    m.push(("mean_local_coverage".into(), s.local_coverage.iter().sum::<f64>() / n));
    for (i, r) in s.returns.iter().enumerate() {
        m.push((format!("return_{i}"), *r));
    }
    for (i, c) in s.local_coverage.iter().enumerate() {
        m.push((format!("local_coverage_{i}"), *c));
    }
    for (i, p) in s.action_pct.iter().enumerate() {
        for (k, name) in names.iter().enumerate() {
            m.push((format!("pct_{name}_{i}"), p[k]));
        }
    }
    for (k, c) in s.simultaneous_consume.iter().enumerate() {
        m.push((format!("sim_consume_{k}"), *c as f64));
    }
    for (k, c) in s.simultaneous_explore.iter().enumerate() {
        m.push((format!("sim_explore_{k}"), *c as f64));
    }
    for (l, step) in s.steps_to_level.iter().enumerate() {
        m.push((format!("steps_to_level_{l}"), step.map(|v| v as f64).unwrap_or(f64::NAN)));
    }
    m
}

/// Mean/std per measure; levels never reached are skipped rather than
/// counted, so `count` tells how many episodes reached them.
pub fn aggregate(episodes: &[EpisodeStats]) -> BTreeMap<String, Summary> {
    let mut acc: BTreeMap<String, Welford> = BTreeMap::new();
    for e in episodes {
        for (k, v) in measures(e) {
            let w = acc.entry(k).or_default();
            if v.is_finite() {
                w.push(v);
            }
        }
    }
    acc.into_iter().map(|(k, w)| (k, w.summary())).collect()
}

/// One CSV row per episode with `prefix` columns prepended.
pub struct EpisodeCsv<W: Write> {
    writer: csv::Writer<W>,
    header_written: bool,
}

impl<W: Write> EpisodeCsv<W> {
    pub fn new(out: W) -> Self {
        Self { writer: csv::Writer::from_writer(out), header_written: false }
    }

    /// Append to a file that already has a header.
    pub fn resume(out: W) -> Self {
        Self { writer: csv::Writer::from_writer(out), header_written: true }
    }

    pub fn write(&mut self, prefix: &[(&str, String)], s: &EpisodeStats) -> Result<()> {
        let m = measures(s);
        if !self.header_written {
            let mut h: Vec<String> = prefix.iter().map(|(k, _)| k.to_string()).collect();
            h.push("partial".into());
            h.extend(m.iter().map(|(k, _)| k.clone()));
            self.writer.write_record(&h)?;
            self.header_written = true;
        }
        let mut row: Vec<String> = prefix.iter().map(|(_, v)| v.clone()).collect();
        row.push(s.partial.to_string());
        row.extend(m.iter().map(|(_, v)| if v.is_finite() { format!("{v}") } else { String::new() }));
        self.writer.write_record(&row)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.writer.into_inner().map_err(|e| e.into_error()).expect("flushed writer")
    }
}

pub fn open_episode_csv(path: &Path) -> Result<EpisodeCsv<std::fs::File>> {
    Ok(EpisodeCsv::new(std::fs::File::create(path)?))
}
