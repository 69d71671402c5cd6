//! Exact set partitioning by depth-first branch and bound.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::ExtractionProblem;
use crate::error::{HispError, Result};
use crate::filter::MeasurementId;

/// Outcome of [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Selected candidate indices, ascending.
    pub selected: Vec<usize>,
    pub objective: f64,
    /// The time limit was hit; the selection is the best one found so far.
    pub timed_out: bool,
    pub nodes: u64,
}

struct Component {
    /// Local measurement index → candidates (local indices) covering it.
    by_measurement: Vec<Vec<usize>>,
    /// Candidate → local measurement indices.
    covers: Vec<Vec<usize>>,
    log_w: Vec<f64>,
    /// Global candidate ids.
    global: Vec<usize>,
}

struct Search<'a> {
    comp: &'a Component,
    best_share: Vec<f64>,
    covered: Vec<bool>,
    chosen: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
    deadline: Instant,
    timed_out: bool,
    nodes: u64,
}

impl Search<'_> {
    fn available(&self, c: usize) -> bool {
        self.comp.covers[c].iter().all(|&m| !self.covered[m])
    }

    fn run(&mut self, value: f64, bound_rest: f64) {
        self.nodes += 1;
        if self.nodes.is_multiple_of(1024) && Instant::now() >= self.deadline {
            self.timed_out = true;
        }
        if self.timed_out {
            return;
        }
        if let Some((best, _)) = &self.best {
            if value + bound_rest <= *best {
                return;
            }
        }
        // Branch on the uncovered measurement with the fewest open candidates.
        let mut pick: Option<(usize, usize)> = None;
        for m in 0..self.covered.len() {
            if self.covered[m] {
                continue;
            }
            let open = self.comp.by_measurement[m]
                .iter()
                .filter(|&&c| self.available(c))
                .count();
            if pick.is_none_or(|(_, n)| open < n) {
                pick = Some((m, open));
                if open <= 1 {
                    break;
                }
            }
        }
        let Some((m, _)) = pick else {
            if self.best.as_ref().is_none_or(|(b, _)| value > *b) {
                self.best = Some((value, self.chosen.clone()));
            }
            return;
        };
        let mut options: Vec<usize> = self.comp.by_measurement[m]
            .iter()
            .copied()
            .filter(|&c| self.available(c))
            .collect();
        options.sort_by(|&a, &b| {
            self.comp.log_w[b]
                .total_cmp(&self.comp.log_w[a])
                .then(a.cmp(&b))
        });
        for c in options {
            let mut rest = bound_rest;
            for &k in &self.comp.covers[c] {
                self.covered[k] = true;
                rest -= self.best_share[k];
            }
            self.chosen.push(c);
            self.run(value + self.comp.log_w[c], rest);
            self.chosen.pop();
            for &k in &self.comp.covers[c] {
                self.covered[k] = false;
            }
            if self.timed_out {
                return;
            }
        }
    }
}

/// Maximises `Σ log w` over selections covering every window measurement exactly once.
pub fn solve(problem: &ExtractionProblem, timeout: Duration) -> Result<Solution> {
    let deadline = Instant::now() + timeout;
    let components = split(problem)?;
    let mut selected = Vec::new();
    let mut objective = 0.0;
    let mut timed_out = false;
    let mut nodes = 0;
    for comp in &components {
        let best_share: Vec<f64> = comp
            .by_measurement
            .iter()
            .map(|cands| {
                cands
                    .iter()
                    .map(|&c| comp.log_w[c] / comp.covers[c].len() as f64)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut search = Search {
            comp,
            best_share: best_share.clone(),
            covered: vec![false; comp.by_measurement.len()],
            chosen: Vec::new(),
            best: greedy_incumbent(comp),
            deadline,
            timed_out: false,
            nodes: 0,
        };
        search.run(0.0, best_share.iter().sum());
        nodes += search.nodes;
        timed_out |= search.timed_out;
        let Some((value, chosen)) = search.best else {
            return Err(HispError::Infeasible(format!(
                "no exact cover for a component of {} measurements",
                comp.by_measurement.len()
            )));
        };
        objective += value;
        selected.extend(chosen.into_iter().map(|c| comp.global[c]));
    }
    selected.sort_unstable();
    Ok(Solution {
        selected,
        objective,
        timed_out,
        nodes,
    })
}

/// The all-singletons selection when every measurement has a one-measurement candidate.
fn greedy_incumbent(comp: &Component) -> Option<(f64, Vec<usize>)> {
    let mut value = 0.0;
    let mut chosen = Vec::with_capacity(comp.by_measurement.len());
    for cands in &comp.by_measurement {
        let single = cands
            .iter()
            .copied()
            .filter(|&c| comp.covers[c].len() == 1)
            .max_by(|&a, &b| comp.log_w[a].total_cmp(&comp.log_w[b]).then(b.cmp(&a)))?;
        value += comp.log_w[single];
        chosen.push(single);
    }
    Some((value, chosen))
}

/// Connected components of the candidate/measurement incidence graph.
fn split(problem: &ExtractionProblem) -> Result<Vec<Component>> {
    let index: BTreeMap<MeasurementId, usize> = problem
        .window_measurements
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, i))
        .collect();
    let n = index.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut covers = Vec::with_capacity(problem.candidates.len());
    for cand in &problem.candidates {
        let local = cand
            .covers
            .iter()
            .map(|m| {
                index.get(m).copied().ok_or_else(|| {
                    HispError::Infeasible(format!("candidate covers {m} outside the window"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if local.is_empty() {
            return Err(HispError::Infeasible(
                "candidate covers no measurement".into(),
            ));
        }
        for w in local.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a] = b;
        }
        covers.push(local);
    }
    let mut comp_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut local_index = vec![0usize; n];
    let mut comps: Vec<Component> = Vec::new();
    for (m, slot) in local_index.iter_mut().enumerate() {
        let root = find(&mut parent, m);
        let c = *comp_of_root.entry(root).or_insert_with(|| {
            comps.push(Component {
                by_measurement: Vec::new(),
                covers: Vec::new(),
                log_w: Vec::new(),
                global: Vec::new(),
            });
            comps.len() - 1
        });
        *slot = comps[c].by_measurement.len();
        comps[c].by_measurement.push(Vec::new());
    }
    for (g, (cand, cov)) in problem.candidates.iter().zip(covers).enumerate() {
        let c = comp_of_root[&find(&mut parent, cov[0])];
        let comp = &mut comps[c];
        let k = comp.covers.len();
        let local: Vec<usize> = cov.iter().map(|&m| local_index[m]).collect();
        for &m in &local {
            comp.by_measurement[m].push(k);
        }
        comp.covers.push(local);
        comp.log_w.push(cand.log_weight);
        comp.global.push(g);
    }
    Ok(comps)
}
