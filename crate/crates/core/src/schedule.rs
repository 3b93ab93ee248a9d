//! Task-sampling schedules: which task each optimization step serves.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// Each task trained to completion in turn, in a seeded random order.
    TaskByTask,
    /// Fixed repeating order `0, 1, …, T-1`.
    Alternating,
    /// Equal step counts per task, randomly interleaved.
    Uniform,
    /// Step counts equal to each task's budget, randomly interleaved.
    Weighted,
    /// Every update sums the gradients of one minibatch from every task.
    Accumulated,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::TaskByTask,
        ScheduleKind::Alternating,
        ScheduleKind::Uniform,
        ScheduleKind::Weighted,
        ScheduleKind::Accumulated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::TaskByTask => "task_by_task",
            ScheduleKind::Alternating => "alternating",
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Weighted => "weighted",
            ScheduleKind::Accumulated => "accumulated",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Schedule(format!("unknown schedule kind `{s}`")))
    }
}

/// What one plan step trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Task(usize),
    /// One update touching every task (accumulated kind).
    AllTasks,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulePlan {
    pub kind: ScheduleKind,
    pub seed: u64,
    pub budgets: Vec<u64>,
    pub steps: Vec<Step>,
    /// Steps each task is intended to receive.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStats {
    pub counts: Vec<u64>,
    /// Longest stretch of consecutive steps that all train the same task.
    pub longest_run: u64,
    pub len: u64,
}

/// Splits `total` into `parts` near-equal counts, the remainder going to the
/// earliest entries.
fn even_split(total: u64, parts: usize) -> Vec<u64> {
    let t = parts as u64;
    (0..t).map(|j| total / t + u64::from(j < total % t)).collect()
}

fn check_budgets(budgets: &[u64]) -> Result<()> {
    if budgets.is_empty() {
        return Err(Error::Schedule("no task budgets given".into()));
    }
    if let Some(j) = budgets.iter().position(|&u| u == 0) {
        return Err(Error::Schedule(format!("task {j} has a zero step budget")));
    }
    Ok(())
}

fn expand(counts: &[u64]) -> Vec<Step> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(j, &c)| std::iter::repeat_n(Step::Task(j), c as usize))
        .collect()
}

impl SchedulePlan {
    /// Builds a plan; a pure function of its arguments.
    pub fn build(kind: ScheduleKind, budgets: &[u64], seed: u64) -> Result<Self> {
        check_budgets(budgets)?;
        let t = budgets.len();
        let total: u64 = budgets.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (steps, counts) = match kind {
            ScheduleKind::TaskByTask => {
                let mut order: Vec<usize> = (0..t).collect();
                order.shuffle(&mut rng);
                return Self::task_by_task_in_order(budgets, &order, seed);
            }
            ScheduleKind::Alternating => {
                let counts = even_split(total, t);
                let steps = (0..total).map(|i| Step::Task((i % t as u64) as usize)).collect();
                (steps, counts)
            }
            ScheduleKind::Uniform => {
                let counts = even_split(total, t);
                let mut steps = expand(&counts);
                steps.shuffle(&mut rng);
                (steps, counts)
            }
            ScheduleKind::Weighted => {
                let mut steps = expand(budgets);
                steps.shuffle(&mut rng);
                (steps, budgets.to_vec())
            }
            ScheduleKind::Accumulated => {
                let rounds = total / t as u64;
                (vec![Step::AllTasks; rounds as usize], vec![rounds; t])
            }
        };
        Ok(Self {
            kind,
            seed,
            budgets: budgets.to_vec(),
            steps,
            counts,
        })
    }

    /// Task-by-task plan with an explicit task order.
    pub fn task_by_task_in_order(budgets: &[u64], order: &[usize], seed: u64) -> Result<Self> {
        check_budgets(budgets)?;
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..budgets.len()).collect::<Vec<_>>() {
            return Err(Error::Schedule(format!(
                "task order {order:?} is not a permutation of 0..{}",
                budgets.len()
            )));
        }
        let steps = order
            .iter()
            .flat_map(|&j| std::iter::repeat_n(Step::Task(j), budgets[j] as usize))
            .collect();
        Ok(Self {
            kind: ScheduleKind::TaskByTask,
            seed,
            budgets: budgets.to_vec(),
            steps,
            counts: budgets.to_vec(),
        })
    }

    /// A plan with no steps; training on it leaves a model untouched.
    pub fn empty(kind: ScheduleKind, tasks: usize) -> Self {
        Self {
            kind,
            seed: 0,
            budgets: vec![0; tasks],
            steps: Vec::new(),
            counts: vec![0; tasks],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.counts.len()
    }

    /// Tallies the plan as executed.
    pub fn stats(&self) -> PlanStats {
        let t = self.num_tasks();
        let mut counts = vec![0u64; t];
        let mut longest = 0u64;
        let mut run = 0u64;
        let mut prev = None;
        for &s in &self.steps {
            match s {
                Step::Task(j) => counts[j] += 1,
                Step::AllTasks => counts.iter_mut().for_each(|c| *c += 1),
            }
            run = if prev == Some(s) { run + 1 } else { 1 };
            prev = Some(s);
            if matches!(s, Step::Task(_)) {
                longest = longest.max(run);
            }
        }
        PlanStats {
            counts,
            longest_run: longest,
            len: self.steps.len() as u64,
        }
    }

    /// Fraction of steps that train task `j`.
    pub fn share(&self, j: usize) -> f64 {
        let stats = self.stats();
        if stats.len == 0 {
            return 0.0;
        }
        stats.counts.get(j).copied().unwrap_or(0) as f64 / stats.len as f64
    }

    /// Text dump: one `step_index task_id` line per step (`all` for
    /// accumulated steps), then a `#` statistics footer.
    pub fn dump(&self, task_names: &[String]) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            match s {
                Step::Task(j) => out.push_str(&format!("{i} {j}\n")),
                Step::AllTasks => out.push_str(&format!("{i} all\n")),
            }
        }
        let stats = self.stats();
        out.push_str(&format!("# kind = {}\n# seed = {}\n# length = {}\n# longest_run = {}\n", self.kind, self.seed, stats.len, stats.longest_run));
        for (j, c) in stats.counts.iter().enumerate() {
            let name = task_names.get(j).map_or("", String::as_str);
            out.push_str(&format!("# count {j} {name} = {c}\n"));
        }
        out
    }
}

/// Per-task step counts recovered from a [`SchedulePlan::dump`].
pub fn recount_dump(text: &str, tasks: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; tasks];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let task = line
            .split_whitespace()
            .nth(1)
            .ok_or_else(|| Error::Schedule(format!("line {}: missing task id", n + 1)))?;
        if task == "all" {
            counts.iter_mut().for_each(|c| *c += 1);
            continue;
        }
        let j: usize = task
            .parse()
            .map_err(|_| Error::Schedule(format!("line {}: bad task id `{task}`", n + 1)))?;
        *counts
            .get_mut(j)
            .ok_or_else(|| Error::Schedule(format!("line {}: task {j} out of range", n + 1)))? += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tasks(plan: &SchedulePlan) -> Vec<usize> {
        plan.steps
            .iter()
            .map(|s| match s {
                Step::Task(j) => *j,
                Step::AllTasks => usize::MAX,
            })
            .collect()
    }

    #[test]
    fn uniform_equal_budgets() {
        let p = SchedulePlan::build(ScheduleKind::Uniform, &[2, 2, 2], 9).unwrap();
        assert_eq!(p.stats().counts, vec![2, 2, 2]);
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn weighted_exact_counts_over_seeds() {
        for seed in 0..1000 {
            let p = SchedulePlan::build(ScheduleKind::Weighted, &[3, 1], seed).unwrap();
            assert_eq!(p.stats().counts, vec![3, 1]);
            assert_eq!(p.len(), 4);
        }
    }

    #[test]
    fn task_by_task_runs_are_blocks() {
        for seed in 0..20 {
            let p = SchedulePlan::build(ScheduleKind::TaskByTask, &[2, 3], seed).unwrap();
            let s = p.stats();
            let last = tasks(&p)[4];
            assert_eq!(s.longest_run, [2, 3][last].max([2, 3][1 - last]));
            assert!(s.longest_run == 2 || s.longest_run == 3);
        }
        let p = SchedulePlan::task_by_task_in_order(&[2, 3, 1], &[2, 0, 1], 0).unwrap();
        assert_eq!(tasks(&p), vec![2, 0, 0, 1, 1, 1]);
        assert!(SchedulePlan::task_by_task_in_order(&[2, 3], &[0, 0], 0).is_err());
    }

    #[test]
    fn alternating_round_robin_with_remainder() {
        let p = SchedulePlan::build(ScheduleKind::Alternating, &[2, 2], 0).unwrap();
        assert_eq!(p.stats().longest_run, 1);
        let p = SchedulePlan::build(ScheduleKind::Alternating, &[4, 1, 2], 0).unwrap();
        assert_eq!(tasks(&p), vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(p.counts, vec![3, 2, 2]);
    }

    #[test]
    fn accumulated_rounds_are_floored() {
        let p = SchedulePlan::build(ScheduleKind::Accumulated, &[5, 2, 1], 0).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.stats().counts, vec![2, 2, 2]);
    }

    #[test]
    fn invalid_budgets_are_rejected() {
        assert!(SchedulePlan::build(ScheduleKind::Weighted, &[], 0).is_err());
        assert!(SchedulePlan::build(ScheduleKind::Weighted, &[3, 0], 0).is_err());
        assert!("sometimes".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn dump_round_trips_counts() {
        let p = SchedulePlan::build(ScheduleKind::Weighted, &[4, 2, 7], 5).unwrap();
        let text = p.dump(&["a".into(), "b".into(), "c".into()]);
        assert_eq!(recount_dump(&text, 3).unwrap(), vec![4, 2, 7]);
        let acc = SchedulePlan::build(ScheduleKind::Accumulated, &[4, 2], 5).unwrap();
        assert_eq!(recount_dump(&acc.dump(&[]), 2).unwrap(), vec![3, 3]);
    }
}
