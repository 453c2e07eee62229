//! Flat and staged training schedules over task levels.
//!
//! Label grammar (whitespace ignored):
//!
//! ```text
//! plan  := stage ( arrow stage )* [ "flat" ]      "flat" only with one stage
//! stage := level | "(" level ( union level )+ ")"
//! level := "L1" | "L2" | "L3"
//! arrow := "→" | "->"
//! union := "∪" | "+"
//! ```
//!
//! The canonical form uses `→` and `∪`, and a single stage is written with
//! a `flat` suffix, e.g. `L2 flat`, `L1→(L2∪L3)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{LogLinearPolicy, PreferenceExample};
use crate::rng::Rng;
use crate::train::{run_steps, Source, TrainConfig, TrainError, TrainReport};
use crate::types::TaskLevel;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("cannot parse schedule `{label}`: {message}")]
    Parse { label: String, message: String },
    #[error("no training data for level {0}")]
    MissingData(TaskLevel),
    #[error("budget of {budget} steps cannot cover {stages} stages")]
    Budget { budget: usize, stages: usize },
    #[error("schedule has no step budget; call with_budget first")]
    NoBudget,
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub mixture: BTreeMap<TaskLevel, f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub label: String,
    pub stages: Vec<Stage>,
}

fn parse_level(s: &str) -> Option<TaskLevel> {
    match s {
        "L1" | "l1" => Some(TaskLevel::L1),
        "L2" | "l2" => Some(TaskLevel::L2),
        "L3" | "l3" => Some(TaskLevel::L3),
        _ => None,
    }
}

pub fn build_schedule(label: &str) -> Result<SchedulePlan, ScheduleError> {
    let fail = |message: String| ScheduleError::Parse {
        label: label.to_string(),
        message,
    };
    let mut text: String = label.split_whitespace().collect();
    let flat = text.to_ascii_lowercase().ends_with("flat");
    if flat {
        text.truncate(text.len() - 4);
    }
    let text = text.replace("->", "→").replace('+', "∪");
    if text.is_empty() {
        return Err(fail("empty label".into()));
    }
    let mut stages = Vec::new();
    for segment in text.split('→') {
        let levels: Vec<&str> = match segment.strip_prefix('(').and_then(|s| s.strip_suffix(')')) {
            Some(inner) => {
                let parts: Vec<&str> = inner.split('∪').collect();
                if parts.len() < 2 {
                    return Err(fail(format!("union `{segment}` needs at least two levels")));
                }
                parts
            }
            None if segment.contains('∪') => return Err(fail(format!("union `{segment}` must be parenthesized"))),
            None => vec![segment],
        };
        let mut mixture = BTreeMap::new();
        for l in &levels {
            let level = parse_level(l).ok_or_else(|| fail(format!("unknown level `{l}`")))?;
            if mixture.insert(level, 1.0 / levels.len() as f64).is_some() {
                return Err(fail(format!("level {level} repeated in `{segment}`")));
            }
        }
        stages.push(Stage { mixture, steps: 0 });
    }
    if flat && stages.len() > 1 {
        return Err(fail("`flat` applies to single-stage plans only".into()));
    }
    let mut plan = SchedulePlan {
        label: String::new(),
        stages,
    };
    plan.label = plan.canonical_label();
    Ok(plan)
}

impl SchedulePlan {
    pub fn canonical_label(&self) -> String {
        let stage = |s: &Stage| {
            let names: Vec<&str> = s.mixture.keys().map(|l| l.as_str()).collect();
            if names.len() == 1 {
                names[0].to_string()
            } else {
                format!("({})", names.join("∪"))
            }
        };
        let body: Vec<String> = self.stages.iter().map(stage).collect();
        if body.len() == 1 {
            format!("{} flat", body[0])
        } else {
            body.join("→")
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Split `total` updates evenly across stages, earlier stages taking
    /// any remainder.
    pub fn with_budget(mut self, total: usize) -> Result<Self, ScheduleError> {
        let n = self.stages.len();
        if total < n {
            return Err(ScheduleError::Budget { budget: total, stages: n });
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.steps = total / n + usize::from(i < total % n);
        }
        Ok(self)
    }

    pub fn levels(&self) -> Vec<TaskLevel> {
        let mut v: Vec<TaskLevel> = self.stages.iter().flat_map(|s| s.mixture.keys().copied()).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Train each stage in order, carrying parameters across stages. The
/// reference policy is re-snapshotted at the start of every stage.
pub fn run_schedule(
    plan: &SchedulePlan,
    data: &BTreeMap<TaskLevel, Vec<PreferenceExample>>,
    policy: &mut LogLinearPolicy,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<TrainReport>, ScheduleError> {
    if plan.total_steps() == 0 {
        return Err(ScheduleError::NoBudget);
    }
    for level in plan.levels() {
        if data.get(&level).is_none_or(|d| d.is_empty()) {
            return Err(ScheduleError::MissingData(level));
        }
    }
    let mut reports = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        let reference = policy.clone();
        let sources: Vec<Source> = stage
            .mixture
            .iter()
            .map(|(level, w)| Source {
                data: &data[level],
                weight: *w,
            })
            .collect();
        let mut stage_rng = rng.substream("stage", i as u64);
        reports.push(run_steps(policy, &reference, &sources, stage.steps, cfg, &mut stage_rng)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub steps: usize,
    pub final_loss: f64,
    pub preference_accuracy: f64,
    /// Extra columns such as probe accuracy.
    pub metrics: BTreeMap<String, f64>,
}

impl ComparisonRow {
    pub fn from_reports(label: &str, reports: &[TrainReport], metrics: BTreeMap<String, f64>) -> Self {
        let last = reports.last().and_then(|r| r.last());
        Self {
            label: label.to_string(),
            steps: reports.iter().map(|r| r.steps).sum(),
            final_loss: last.map_or(f64::NAN, |e| e.mean_loss),
            preference_accuracy: last.map_or(f64::NAN, |e| e.preference_accuracy),
            metrics,
        }
    }
}

fn metric_names(rows: &[ComparisonRow]) -> Vec<String> {
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    names.sort();
    names.dedup();
    names
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let names = metric_names(rows);
    let mut out = String::from("| schedule | steps | final loss | preference accuracy |");
    for n in &names {
        out.push_str(&format!(" {n} |"));
    }
    out.push_str("\n|---|---:|---:|---:|");
    out.push_str(&"---:|".repeat(names.len()));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("| {} | {} | {:.4} | {:.4} |", r.label, r.steps, r.final_loss, r.preference_accuracy));
        for n in &names {
            match r.metrics.get(n) {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let names = metric_names(rows);
    let mut out = String::from("schedule,steps,final_loss,preference_accuracy");
    for n in &names {
        out.push_str(&format!(",{n}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("\"{}\",{},{},{}", r.label, r.steps, r.final_loss, r.preference_accuracy));
        for n in &names {
            out.push(',');
            if let Some(v) = r.metrics.get(n) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Choice;
    use crate::train::train;
    use crate::types::Level;

    #[test]
    fn parses_table_labels() {
        let p = build_schedule("L2 flat").unwrap();
        assert_eq!(p.stages.len(), 1);
        assert_eq!(p.stages[0].mixture, BTreeMap::from([(TaskLevel::L2, 1.0)]));

        let p = build_schedule("L1→(L2∪L3)").unwrap();
        assert_eq!(p.stages.len(), 2);
        assert_eq!(p.stages[1].mixture, BTreeMap::from([(TaskLevel::L2, 0.5), (TaskLevel::L3, 0.5)]));
        assert_eq!(build_schedule("L1 -> (L2 + L3)").unwrap(), p);

        let p = build_schedule("L1→ L2→ L3").unwrap();
        assert_eq!(p.label, "L1→L2→L3");
    }

    #[test]
    fn rejects_bad_labels() {
        for bad in ["L9", "", "L1→", "(L2)", "L2∪L3", "(L2∪L2)", "L1→L2 flat", "flat"] {
            assert!(matches!(build_schedule(bad), Err(ScheduleError::Parse { .. })), "{bad}");
        }
    }

    #[test]
    fn canonical_round_trip() {
        for label in ["L2 flat", "L3 flat", "(L1∪L2∪L3) flat", "L1→L2→L3", "L1→(L2∪L3)", "(L1∪L2)→L3"] {
            let p = build_schedule(label).unwrap();
            assert_eq!(p.canonical_label(), label);
            assert_eq!(build_schedule(&p.canonical_label()).unwrap(), p);
        }
        assert_eq!(build_schedule("L3").unwrap().label, "L3 flat");
    }

    #[test]
    fn budget_split() {
        let p = build_schedule("L1→L2→L3").unwrap().with_budget(10).unwrap();
        assert_eq!(p.stages.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(build_schedule("L1→L2→L3").unwrap().with_budget(2).is_err());
    }

    fn toy(level: Level, n: usize, rng: &mut Rng) -> Vec<PreferenceExample> {
        (0..n)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
                PreferenceExample {
                    id: format!("{level}-{i}"),
                    level,
                    choice: Choice::from_dense(&rows),
                }
            })
            .collect()
    }

    fn data() -> BTreeMap<TaskLevel, Vec<PreferenceExample>> {
        let mut rng = Rng::new(0);
        BTreeMap::from([
            (TaskLevel::L1, toy(Level::L1, 20, &mut rng)),
            (TaskLevel::L2, toy(Level::L2Kin, 12, &mut rng)),
            (TaskLevel::L3, toy(Level::L3, 30, &mut rng)),
        ])
    }

    #[test]
    fn single_stage_equals_train() {
        let data = data();
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let steps = cfg.dpo.epochs * data[&TaskLevel::L3].len().div_ceil(8);
        let plan = build_schedule("L3 flat").unwrap().with_budget(steps).unwrap();
        let mut a = LogLinearPolicy::zeros(4);
        let reports = run_schedule(&plan, &data, &mut a, &cfg, &mut Rng::new(1)).unwrap();
        let mut b = LogLinearPolicy::zeros(4);
        let reference = b.clone();
        let direct = train(&mut b, &reference, &data[&TaskLevel::L3], &cfg).unwrap();
        assert_eq!(reports, vec![direct]);
        assert_eq!(a, b);
    }

    #[test]
    fn stage_accounting_and_continuity() {
        let data = data();
        let cfg = TrainConfig::default();
        let plan = build_schedule("L1→(L2∪L3)").unwrap().with_budget(13).unwrap();
        let mut p = LogLinearPolicy::zeros(4);
        let reports = run_schedule(&plan, &data, &mut p, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(reports.iter().map(|r| r.loss_curve.len()).sum::<usize>(), 13);
        assert_eq!(reports[0].steps, 7);
        assert_eq!(reports[1].steps, 6);

        // Replaying stage 2 from stage 1's end state reproduces the result.
        let one = build_schedule("L1 flat").unwrap().with_budget(7).unwrap();
        let mut q = LogLinearPolicy::zeros(4);
        run_schedule(&one, &data, &mut q, &cfg, &mut Rng::new(2)).unwrap();
        let reference = q.clone();
        let sources = [
            Source { data: &data[&TaskLevel::L2], weight: 0.5 },
            Source { data: &data[&TaskLevel::L3], weight: 0.5 },
        ];
        run_steps(&mut q, &reference, &sources, 6, &cfg, &mut Rng::new(2).substream("stage", 1)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn missing_level_and_missing_budget() {
        let mut d = data();
        d.remove(&TaskLevel::L2);
        let plan = build_schedule("L1→(L2∪L3)").unwrap();
        let mut p = LogLinearPolicy::zeros(4);
        assert_eq!(run_schedule(&plan, &d, &mut p, &TrainConfig::default(), &mut Rng::new(0)).unwrap_err(), ScheduleError::NoBudget);
        let plan = plan.with_budget(4).unwrap();
        assert_eq!(
            run_schedule(&plan, &d, &mut p, &TrainConfig::default(), &mut Rng::new(0)).unwrap_err(),
            ScheduleError::MissingData(TaskLevel::L2)
        );
    }

    #[test]
    fn tables_have_one_row_per_plan() {
        let rows = vec![
            ComparisonRow {
                label: "L3 flat".into(),
                steps: 10,
                final_loss: 0.5,
                preference_accuracy: 0.9,
                metrics: BTreeMap::from([("l3_probe_accuracy".into(), 0.8)]),
            },
            ComparisonRow {
                label: "L1→L3".into(),
                steps: 10,
                final_loss: 0.6,
                preference_accuracy: 0.7,
                metrics: BTreeMap::new(),
            },
        ];
        let md = comparison_markdown(&rows);
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| L1→L3 | 10 | 0.6000 | 0.7000 | - |"));
        let csv = comparison_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "schedule,steps,final_loss,preference_accuracy,l3_probe_accuracy");
        assert_eq!(csv.lines().count(), 3);
    }
}
