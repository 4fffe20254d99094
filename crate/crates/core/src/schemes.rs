//! Round-level training schemes: parameter curricula and population
//! evolution by copy-selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{Orchestrator, OrchestratorError, RoundConfig, RoundHook, RoundReport};

/// Collision penalty weights of the safety curriculum, one per round.
pub const DEFAULT_PENALTY_SCHEDULE: [f64; 7] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemeError {
    #[error("round {index} outside a schedule of {len} rounds")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no score for member {0:?}")]
    MissingScore(String),
    #[error("generation period must be >= 1")]
    ZeroPeriod,
    #[error("{0}")]
    Io(String),
}

impl From<SchemeError> for OrchestratorError {
    fn from(e: SchemeError) -> Self {
        OrchestratorError::Scheme(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    /// Env parameter the schedule drives, e.g. `collision_penalty_weight`.
    pub key: String,
    pub values: Vec<f64>,
}

impl CurriculumSchedule {
    pub fn penalty_default() -> Self {
        CurriculumSchedule { key: "collision_penalty_weight".into(), values: DEFAULT_PENALTY_SCHEDULE.to_vec() }
    }
}

pub fn curriculum_weight(schedule: &CurriculumSchedule, round_index: usize) -> Result<f64, SchemeError> {
    schedule.values.get(round_index).copied().ok_or(SchemeError::IndexOutOfRange { index: round_index, len: schedule.values.len() })
}

/// Sets the scheduled value on every env before each round.
pub struct CurriculumHook {
    pub schedule: CurriculumSchedule,
}

impl RoundHook for CurriculumHook {
    fn before_round(&mut self, _orch: &mut Orchestrator, cfg: &mut RoundConfig) -> Result<(), OrchestratorError> {
        let v = curriculum_weight(&self.schedule, cfg.round_index as usize)?;
        cfg.env_params.insert(self.schedule.key.clone(), v);
        cfg.curriculum = Some(v);
        Ok(())
    }
}

/// One line of the lineage log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRow {
    pub generation: u64,
    pub member: String,
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub members: Vec<String>,
    pub generation: u64,
    /// Selection scores per generation, in member order.
    pub scores: Vec<Vec<f64>>,
    pub lineage: Vec<LineageRow>,
}

impl PopulationState {
    pub fn new(members: Vec<String>) -> Self {
        PopulationState { members, generation: 0, scores: vec![], lineage: vec![] }
    }
}

/// Outcome of one selection: the winner and the members to overwrite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub winner: usize,
    /// (source, destination) member indices.
    pub copies: Vec<(usize, usize)>,
}

/// Picks the best member (ties to the lowest index), logs every member's
/// score and advances the generation.
pub fn evolve_generation(pop: &mut PopulationState, scores: &BTreeMap<String, f64>) -> Result<Selection, SchemeError> {
    let row: Vec<f64> = pop
        .members
        .iter()
        .map(|m| scores.get(m).copied().ok_or_else(|| SchemeError::MissingScore(m.clone())))
        .collect::<Result<_, _>>()?;
    let mut winner = 0;
    for (i, s) in row.iter().enumerate() {
        if *s > row[winner] {
            winner = i;
        }
    }
    for (i, (m, s)) in pop.members.iter().zip(&row).enumerate() {
        pop.lineage.push(LineageRow { generation: pop.generation, member: m.clone(), score: *s, selected: i == winner });
    }
    pop.scores.push(row);
    pop.generation += 1;
    let copies = (0..pop.members.len()).filter(|i| *i != winner).map(|i| (winner, i)).collect();
    Ok(Selection { winner, copies })
}

/// Mean of the last quarter (rounded up) of a generation's episode scores.
pub fn selection_score(scores: &[f64]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len().div_ceil(4);
    let tail = &scores[scores.len() - n..];
    Some(tail.iter().sum::<f64>() / n as f64)
}

/// `ceil(total / period)` rounds of `period` steps; the last takes the rest.
pub fn generation_schedule(total_steps: u64, period: u64) -> Result<Vec<RoundConfig>, SchemeError> {
    if period == 0 {
        return Err(SchemeError::ZeroPeriod);
    }
    let n = total_steps.div_ceil(period);
    Ok((0..n).map(|i| RoundConfig::new(i, period.min(total_steps - i * period))).collect())
}

pub fn write_lineage(path: &Path, rows: &[LineageRow]) -> Result<(), SchemeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SchemeError::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| SchemeError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| SchemeError::Io(e.to_string()))
}

pub fn read_lineage(path: &Path) -> Result<Vec<LineageRow>, SchemeError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SchemeError::Io(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| SchemeError::Io(e.to_string()))).collect()
}

/// After each round, selects the best member and copies its checkpoint file
/// verbatim over the others; rewrites the lineage log.
pub struct EvolutionHook {
    pub population: PopulationState,
    pub lineage_path: PathBuf,
}

impl RoundHook for EvolutionHook {
    fn after_round(&mut self, orch: &mut Orchestrator, report: &RoundReport) -> Result<(), OrchestratorError> {
        let mut scores = BTreeMap::new();
        for m in &self.population.members {
            if let Some(s) = report.policies.get(m).and_then(|p| selection_score(&p.scores)) {
                scores.insert(m.clone(), s);
            }
        }
        let sel = evolve_generation(&mut self.population, &scores)?;
        for (from, to) in sel.copies {
            let src = orch.checkpoint_path(&self.population.members[from]);
            let dst = orch.checkpoint_path(&self.population.members[to]);
            std::fs::copy(&src, &dst).map_err(|e| OrchestratorError::Io(format!("{}: {e}", src.display())))?;
        }
        write_lineage(&self.lineage_path, &self.population.lineage)?;
        Ok(())
    }
}
