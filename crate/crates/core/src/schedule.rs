//! Single-task, parallel multi-task and iterative multi-task re-training plans.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Stl,
    Pmtl,
    Imtl,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stl" => Ok(Self::Stl),
            "pmtl" => Ok(Self::Pmtl),
            "imtl" => Ok(Self::Imtl),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stl => "stl",
            Self::Pmtl => "pmtl",
            Self::Imtl => "imtl",
        })
    }
}

/// Parses `"1/100"`, `"0.01"` style positive scales into a ratio.
pub fn parse_scale(s: &str) -> Result<Ratio<u64>> {
    let bad = || Error::InvalidArgument(format!("invalid scale {s:?}"));
    let r = if let Ok(r) = Ratio::<u64>::from_str(s.trim()) {
        r
    } else {
        let (int, frac) = s.trim().split_once('.').ok_or_else(bad)?;
        let denom = 10u64.checked_pow(frac.len() as u32).ok_or_else(bad)?;
        let numer = format!("{int}{frac}").parse::<u64>().map_err(|_| bad())?;
        Ratio::new(numer, denom)
    };
    if r == Ratio::from_integer(0) {
        return Err(bad());
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub stage_id: usize,
    pub steps_mask: u64,
    pub steps_ke: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub mode: Strategy,
    pub stages: Vec<Stage>,
    pub scale: Ratio<u64>,
}

const STL_STEPS: u64 = 60_000;
const IMTL_MASK: [u64; 3] = [40_000, 10_000, 10_000];
const IMTL_KE: [u64; 3] = [0, 40_000, 20_000];

fn scaled(steps: u64, scale: Ratio<u64>) -> u64 {
    (Ratio::from_integer(steps) * scale).round().to_integer()
}

/// Step counts per stage, each scaled and rounded half away from zero. PMTL
/// stages carry equal mask and KE counts because both run every step.
pub fn build_plan(mode: Strategy, scale: Ratio<u64>) -> Result<TrainingPlan> {
    if *scale.numer() == 0 {
        return invalid("scale must be positive");
    }
    let stages = match mode {
        Strategy::Stl => vec![Stage {
            stage_id: 1,
            steps_mask: scaled(STL_STEPS, scale),
            steps_ke: 0,
        }],
        Strategy::Pmtl => {
            let n = scaled(STL_STEPS, scale);
            vec![Stage {
                stage_id: 1,
                steps_mask: n,
                steps_ke: n,
            }]
        }
        Strategy::Imtl => (0..3)
            .map(|i| Stage {
                stage_id: i + 1,
                steps_mask: scaled(IMTL_MASK[i], scale),
                steps_ke: scaled(IMTL_KE[i], scale),
            })
            .collect(),
    };
    Ok(TrainingPlan { mode, stages, scale })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mask,
    Ke,
    Joint,
}

/// Proportional round-robin: position `i` of `mask + ke` is a mask step when
/// `⌊(i+1)·mask/total⌋` advances.
pub fn interleave(mask: u64, ke: u64) -> Vec<TaskKind> {
    let total = mask + ke;
    (0..total)
        .map(|i| {
            if (i + 1) * mask / total > i * mask / total {
                TaskKind::Mask
            } else {
                TaskKind::Ke
            }
        })
        .collect()
}

/// Ordered step kinds for one stage of a plan.
pub fn stage_sequence(mode: Strategy, stage: &Stage) -> Vec<TaskKind> {
    match mode {
        Strategy::Pmtl => vec![TaskKind::Joint; stage.steps_mask as usize],
        Strategy::Stl | Strategy::Imtl => interleave(stage.steps_mask, stage.steps_ke),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub loss: f64,
    #[serde(default)]
    pub components: BTreeMap<String, f64>,
}

/// Per-task training step callbacks. `step` counts from zero across the run.
pub trait TaskHooks {
    fn mask_step(&mut self, stage: usize, step: u64) -> Result<StepLoss>;
    fn ke_step(&mut self, stage: usize, step: u64) -> Result<StepLoss>;
    /// Both tasks on one step with a single update on the summed loss.
    fn joint_step(&mut self, stage: usize, step: u64) -> Result<StepLoss>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: usize,
    pub step: u64,
    pub task: TaskKind,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub completed: u64,
    /// Hook error that stopped the run, if any.
    pub aborted: Option<String>,
}

impl TrainingLog {
    pub fn count(&self, stage: usize, task: TaskKind) -> u64 {
        self.rows.iter().filter(|r| r.stage == stage && r.task == task).count() as u64
    }

    pub fn total(&self, task: TaskKind) -> u64 {
        self.rows.iter().filter(|r| r.task == task).count() as u64
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.aborted {
            None => Ok(self),
            Some(m) => Err(Error::Hook {
                completed: self.completed as usize,
                message: m.clone(),
            }),
        }
    }
}

/// Executes every planned step in order. A hook error stops the run and is
/// recorded in the returned log together with the completed step count.
pub fn run_plan<H: TaskHooks>(plan: &TrainingPlan, hooks: &mut H) -> TrainingLog {
    let mut log = TrainingLog::default();
    for stage in &plan.stages {
        for task in stage_sequence(plan.mode, stage) {
            let step = log.completed;
            let out = match task {
                TaskKind::Mask => hooks.mask_step(stage.stage_id, step),
                TaskKind::Ke => hooks.ke_step(stage.stage_id, step),
                TaskKind::Joint => hooks.joint_step(stage.stage_id, step),
            };
            match out {
                Ok(l) => {
                    log.rows.push(LogRow {
                        stage: stage.stage_id,
                        step,
                        task,
                        loss: l.loss,
                        components: l.components,
                    });
                    log.completed += 1;
                }
                Err(e) => {
                    log.aborted = Some(e.to_string());
                    return log;
                }
            }
        }
    }
    log
}

/// Optimisation settings; `full_scale()` is the large-run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub accumulation: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 4e-5,
            accumulation: 6,
            batch_size: 256,
            weight_decay: 0.01,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};

    fn stages(p: &TrainingPlan) -> Vec<(usize, u64, u64)> {
        p.stages
            .iter()
            .map(|s| (s.stage_id, s.steps_mask, s.steps_ke))
            .collect()
    }

    #[test]
    fn table_rows() {
        let one = Ratio::from_integer(1);
        assert_eq!(stages(&build_plan(Strategy::Stl, one).unwrap()), vec![(1, 60000, 0)]);
        assert_eq!(
            stages(&build_plan(Strategy::Imtl, one).unwrap()),
            vec![(1, 40000, 0), (2, 10000, 40000), (3, 10000, 20000)]
        );
        assert_eq!(
            stages(&build_plan(Strategy::Imtl, Ratio::new(1, 100)).unwrap()),
            vec![(1, 400, 0), (2, 100, 400), (3, 100, 200)]
        );
    }

    #[test]
    fn scale_parsing() {
        assert_eq!(parse_scale("1/100").unwrap(), Ratio::new(1, 100));
        assert_eq!(parse_scale("0.01").unwrap(), Ratio::new(1, 100));
        assert_eq!(parse_scale("2").unwrap(), Ratio::from_integer(2));
        assert!(parse_scale("0").is_err());
        assert!(parse_scale("abc").is_err());
        assert!("xyz".parse::<Strategy>().is_err());
    }

    #[derive(Default)]
    struct Counter {
        fail_at: Option<u64>,
    }

    impl TaskHooks for Counter {
        fn mask_step(&mut self, _: usize, step: u64) -> Result<StepLoss> {
            if Some(step) == self.fail_at {
                return Err(Error::InvalidArgument("boom".into()));
            }
            Ok(StepLoss {
                loss: 1.0,
                ..Default::default()
            })
        }
        fn ke_step(&mut self, _: usize, _: u64) -> Result<StepLoss> {
            Ok(StepLoss {
                loss: 2.0,
                ..Default::default()
            })
        }
        fn joint_step(&mut self, s: usize, step: u64) -> Result<StepLoss> {
            Ok(StepLoss {
                loss: self.mask_step(s, step)?.loss + self.ke_step(s, step)?.loss,
                ..Default::default()
            })
        }
    }

    #[test]
    fn run_counts_and_stl_has_no_ke() {
        let plan = build_plan(Strategy::Imtl, Ratio::new(1, 100)).unwrap();
        let log = run_plan(&plan, &mut Counter::default());
        for s in &plan.stages {
            assert_eq!(log.count(s.stage_id, TaskKind::Mask), s.steps_mask);
            assert_eq!(log.count(s.stage_id, TaskKind::Ke), s.steps_ke);
        }
        let stl = run_plan(
            &build_plan(Strategy::Stl, Ratio::new(1, 100)).unwrap(),
            &mut Counter::default(),
        );
        assert_eq!(stl.total(TaskKind::Ke), 0);
        let pmtl = run_plan(
            &build_plan(Strategy::Pmtl, Ratio::new(1, 1000)).unwrap(),
            &mut Counter::default(),
        );
        assert_eq!(pmtl.total(TaskKind::Joint), 60);
        assert!(pmtl.rows.iter().all(|r| r.loss == 3.0));
    }

    #[test]
    fn stage_two_window_ratio() {
        let plan = build_plan(Strategy::Imtl, Ratio::from_integer(1)).unwrap();
        let seq = stage_sequence(plan.mode, &plan.stages[1]);
        let masks: Vec<u64> = seq.iter().map(|t| (*t == TaskKind::Mask) as u64).collect();
        let mut window: u64 = masks[..500].iter().sum();
        for start in 0..=masks.len() - 500 {
            if start > 0 {
                window = window + masks[start + 499] - masks[start - 1];
            }
            assert!(
                (window as i64 - 100).abs() <= 1,
                "window at {start} has {window} mask steps"
            );
        }
    }

    #[test]
    fn hook_failure_preserves_count() {
        let plan = build_plan(Strategy::Stl, Ratio::new(1, 1000)).unwrap();
        let log = run_plan(&plan, &mut Counter { fail_at: Some(17) });
        assert_eq!(log.completed, 17);
        assert_eq!(log.rows.len(), 17);
        assert!(matches!(log.into_result(), Err(Error::Hook { completed: 17, .. })));
    }

    #[test]
    fn plan_json_roundtrip() {
        let plan = build_plan(Strategy::Imtl, Ratio::new(1, 100)).unwrap();
        let s = serde_json::to_string(&plan).unwrap();
        assert_eq!(serde_json::from_str::<TrainingPlan>(&s).unwrap(), plan);
    }

    proptest! {
        #[test]
        fn totals_match_scaled_table(n in 1u64..50, d in 1u64..2000) {
            let scale = Ratio::new(n, d);
            let plan = build_plan(Strategy::Imtl, scale).unwrap();
            let mask: u64 = plan.stages.iter().map(|s| s.steps_mask).sum();
            let ke: u64 = plan.stages.iter().map(|s| s.steps_ke).sum();
            let expect_mask: u64 = IMTL_MASK.iter().map(|&m| scaled(m, scale)).sum();
            let expect_ke: u64 = IMTL_KE.iter().map(|&m| scaled(m, scale)).sum();
            prop_assert_eq!((mask, ke), (expect_mask, expect_ke));
        }

        #[test]
        fn interleave_exact(m in 0u64..300, k in 0u64..300) {
            let seq = interleave(m, k);
            prop_assert_eq!(seq.iter().filter(|t| **t == TaskKind::Mask).count() as u64, m);
            prop_assert_eq!(seq.iter().filter(|t| **t == TaskKind::Ke).count() as u64, k);
        }
    }
}
