//! Beam search over feature subsets guided by joint and conditional mutual
//! information, with optional reflection rounds that grow the pool between
//! searches.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::annotator::{FeatureColumn, FeatureMatrix};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::hypothesis::{to_hypotheses, FeatureHypothesis, Generator, Origin, Trace};
use crate::infotheory::{self, MiEstimate, DEFAULT_K};
use crate::journal::Journal;
use crate::memory::{set_digest, SearchState};
use crate::prompts::PromptKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub k: usize,
    pub reflection_rounds: usize,
    pub new_features_per_reflection: usize,
    /// Children kept per beam and step. 1 gives independent greedy chains.
    pub branch: usize,
    pub mi_neighbors: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: 5,
            k: 10,
            reflection_rounds: 2,
            new_features_per_reflection: 5,
            branch: 1,
            mi_neighbors: DEFAULT_K,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.k == 0 || self.branch == 0 || self.mi_neighbors == 0 {
            return Err(Error::Config(
                "beam_width, k, branch and mi_neighbors must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    /// Feature ids in the order they were added.
    pub features: Vec<String>,
    pub joint_mi: MiEstimate,
}

impl Beam {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn digest(&self) -> String {
        set_digest(&self.features)
    }
}

/// Training-row view of the admitted columns with a joint-MI cache keyed by
/// feature-set digest.
pub struct MiContext {
    y: Vec<f64>,
    columns: BTreeMap<String, Vec<f64>>,
    k: usize,
    seed: u64,
    exec: Execution,
    cache: HashMap<String, MiEstimate>,
}

impl MiContext {
    /// `y` holds one target value per matrix row; only training rows are
    /// used.
    pub fn new(matrix: &FeatureMatrix, y: &[f64], k: usize, seed: u64, exec: Execution) -> Result<Self> {
        if y.len() != matrix.n_rows() {
            return Err(Error::InvalidInput(format!(
                "target has {} values for {} matrix rows",
                y.len(),
                matrix.n_rows()
            )));
        }
        let rows = matrix.rows(Split::Train);
        let mut ctx = MiContext {
            y: rows.iter().map(|&i| y[i]).collect(),
            columns: BTreeMap::new(),
            k,
            seed,
            exec,
            cache: HashMap::new(),
        };
        for c in matrix.columns.iter().filter(|c| c.is_active()) {
            ctx.columns.insert(c.feature_id.clone(), rows.iter().map(|&i| c.values[i]).collect());
        }
        Ok(ctx)
    }

    /// Builds directly from training-row columns.
    pub fn from_columns(y: Vec<f64>, columns: BTreeMap<String, Vec<f64>>, k: usize, seed: u64, exec: Execution) -> Self {
        MiContext {
            y,
            columns,
            k,
            seed,
            exec,
            cache: HashMap::new(),
        }
    }

    pub fn add_column(&mut self, matrix: &FeatureMatrix, column: &FeatureColumn) {
        if column.is_active() {
            let rows = matrix.rows(Split::Train);
            self.columns
                .insert(column.feature_id.clone(), rows.iter().map(|&i| column.values[i]).collect());
        }
    }

    /// Sorted ids of the searchable columns.
    pub fn ids(&self) -> Vec<String> {
        self.columns.keys().cloned().collect()
    }

    fn estimate(&self, ids: &[String], exec: Execution) -> Result<MiEstimate> {
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort();
        let cols: Vec<&[f64]> = sorted
            .iter()
            .map(|id| {
                self.columns
                    .get(*id)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown feature `{id}`")))
            })
            .collect::<Result<_>>()?;
        infotheory::mi_with(&self.y, &cols, self.k, self.seed, exec)
    }

    /// Joint MI of a feature set. Column order is canonical, so any
    /// permutation of `ids` gives the same value.
    pub fn joint(&mut self, ids: &[String]) -> Result<MiEstimate> {
        let key = set_digest(ids);
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let v = self.estimate(ids, self.exec)?;
        self.cache.insert(key, v);
        Ok(v)
    }

    /// Joint MI for many sets, computing uncached ones concurrently.
    pub fn joint_many(&mut self, sets: &[Vec<String>]) -> Result<Vec<MiEstimate>> {
        let keys: Vec<String> = sets.iter().map(|s| set_digest(s)).collect();
        let mut todo: Vec<usize> = Vec::new();
        let mut queued = HashSet::new();
        for (i, key) in keys.iter().enumerate() {
            if !self.cache.contains_key(key) && queued.insert(key.clone()) {
                todo.push(i);
            }
        }
        let this = &*self;
        let computed = exec::map_slice(&todo, self.exec, |&i| this.estimate(&sets[i], Execution::Sequential));
        for (&i, v) in todo.iter().zip(computed) {
            self.cache.insert(keys[i].clone(), v?);
        }
        Ok(keys.iter().map(|k| self.cache[k]).collect())
    }

    pub fn marginals(&mut self) -> Result<BTreeMap<String, MiEstimate>> {
        let ids = self.ids();
        let sets: Vec<Vec<String>> = ids.iter().map(|id| vec![id.clone()]).collect();
        let values = self.joint_many(&sets)?;
        Ok(ids.into_iter().zip(values).collect())
    }

    /// Singleton beams for the `m` features with highest marginal MI, ties
    /// broken by ascending id.
    pub fn init_beams(&mut self, m: usize, journal: &mut Journal) -> Result<Vec<Beam>> {
        let marginals = self.marginals()?;
        if marginals.is_empty() {
            return Err(Error::Empty("no admitted feature columns to search".into()));
        }
        let mut ranked: Vec<(String, MiEstimate)> = marginals.into_iter().collect();
        ranked.sort_by(|a, b| b.1.value_nats.total_cmp(&a.1.value_nats).then_with(|| a.0.cmp(&b.0)));
        if ranked.len() < m {
            journal.warn(format!(
                "only {} admitted features; beam width reduced from {m} to {}",
                ranked.len(),
                ranked.len()
            ));
        }
        Ok(ranked
            .into_iter()
            .take(m)
            .map(|(id, est)| Beam {
                features: vec![id],
                joint_mi: est,
            })
            .collect())
    }

    /// Top-`b` one-feature extensions of `beam` ranked by
    /// `I(y; f | beam)`, clamped at zero, ties by ascending id. Returns each
    /// child with its conditional gain.
    pub fn expand_beam(&mut self, beam: &Beam, b: usize) -> Result<Vec<(Beam, f64)>> {
        let inside: HashSet<&str> = beam.features.iter().map(String::as_str).collect();
        let candidates: Vec<String> = self.ids().into_iter().filter(|id| !inside.contains(id.as_str())).collect();
        if candidates.is_empty() {
            return Err(Error::InvalidInput("no candidate outside the beam".into()));
        }
        let parent = self.joint(&beam.features)?;
        let sets: Vec<Vec<String>> = candidates
            .iter()
            .map(|c| {
                let mut s = beam.features.clone();
                s.push(c.clone());
                s
            })
            .collect();
        let joints = self.joint_many(&sets)?;
        let mut scored: Vec<(usize, f64)> = joints
            .iter()
            .enumerate()
            .map(|(i, j)| (i, (j.value_nats - parent.value_nats).max(0.0)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| candidates[a.0].cmp(&candidates[b.0])));
        Ok(scored
            .into_iter()
            .take(b)
            .map(|(i, gain)| {
                (
                    Beam {
                        features: sets[i].clone(),
                        joint_mi: joints[i],
                    },
                    gain,
                )
            })
            .collect())
    }
}

/// Extension points for reflection rounds.
pub trait SearchHooks {
    /// Called after each search pass with the best beam so far. Returns
    /// newly annotated columns to add to the pool.
    fn augment(&mut self, state: &mut SearchState, best: &Beam, round: usize, journal: &mut Journal) -> Result<Vec<FeatureColumn>>;
}

pub struct NoReflection;

impl SearchHooks for NoReflection {
    fn augment(&mut self, _: &mut SearchState, _: &Beam, _: usize, _: &mut Journal) -> Result<Vec<FeatureColumn>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Beam,
    /// Final beams of every pass, outermost index = round.
    pub rounds: Vec<Vec<Beam>>,
    pub state: SearchState,
    /// One line per beam seed and expansion.
    pub log: Vec<String>,
    pub journal: Journal,
}

struct Pass<'s> {
    state: &'s mut SearchState,
    log: &'s mut Vec<String>,
    journal: &'s mut Journal,
    best: &'s mut Option<Beam>,
}

impl Pass<'_> {
    fn see(&mut self, beam: &Beam) {
        self.state.record(&beam.features, beam.joint_mi.value_nats);
        let better = match self.best.as_ref() {
            None => true,
            Some(b) => beam.joint_mi.value_nats > b.joint_mi.value_nats,
        };
        if better {
            *self.best = Some(beam.clone());
        }
    }

    fn expansion(&mut self, round: usize, beam_id: usize, child: &Beam, gain: f64) {
        let added = child.features.last().expect("child has a feature");
        if gain <= 0.0 {
            self.journal.info(format!(
                "round {round} beam {beam_id}: no candidate adds information; took {added}"
            ));
        }
        self.log.push(format!(
            "round={round} beam={beam_id} size={} add={added} cmi={:.6} joint_mi={:.6}",
            child.len(),
            gain,
            child.joint_mi.value_nats
        ));
        self.see(child);
    }
}

fn grow(ctx: &mut MiContext, config: &SearchConfig, round: usize, pass: &mut Pass) -> Result<Vec<Beam>> {
    let available = ctx.ids().len();
    let k = config.k.min(available);
    if k < config.k {
        pass.journal.warn(format!(
            "round {round}: only {available} admitted features; target size reduced from {} to {k}",
            config.k
        ));
    }
    let mut beams = ctx.init_beams(config.beam_width, pass.journal)?;
    for (i, b) in beams.iter().enumerate() {
        pass.log.push(format!(
            "round={round} beam={i} size=1 seed={} joint_mi={:.6}",
            b.features[0], b.joint_mi.value_nats
        ));
        pass.see(b);
    }
    if config.branch == 1 {
        for (i, beam) in beams.iter_mut().enumerate() {
            while beam.len() < k {
                let (child, gain) = ctx.expand_beam(beam, 1)?.remove(0);
                pass.expansion(round, i, &child, gain);
                *beam = child;
            }
        }
        return Ok(beams);
    }
    while beams.first().is_some_and(|b| b.len() < k) {
        let mut children: Vec<(usize, Beam, f64)> = Vec::new();
        for (i, beam) in beams.iter().enumerate() {
            for (child, gain) in ctx.expand_beam(beam, config.branch)? {
                children.push((i, child, gain));
            }
        }
        let mut seen = HashSet::new();
        children.retain(|(_, c, _)| seen.insert(c.digest()));
        children.sort_by(|a, b| {
            b.1.joint_mi
                .value_nats
                .total_cmp(&a.1.joint_mi.value_nats)
                .then_with(|| a.0.cmp(&b.0))
        });
        children.truncate(config.beam_width);
        for (i, child, gain) in &children {
            pass.expansion(round, *i, child, *gain);
        }
        beams = children.into_iter().map(|(_, c, _)| c).collect();
    }
    Ok(beams)
}

/// Grows beams to size `k`, then runs the configured reflection rounds,
/// each adding columns through `hooks` and re-seeding the beams from the
/// enlarged pool. Returns the beam with the highest joint MI seen at any
/// point, earliest on ties.
pub fn run_search(
    matrix: &mut FeatureMatrix,
    y: &[f64],
    config: &SearchConfig,
    hooks: &mut dyn SearchHooks,
    exec: Execution,
) -> Result<SearchOutcome> {
    config.validate()?;
    let mut ctx = MiContext::new(matrix, y, config.mi_neighbors, config.seed, exec)?;
    let mut state = SearchState::default();
    let mut log = Vec::new();
    let mut journal = Journal::new();
    let mut best: Option<Beam> = None;
    let mut rounds = Vec::new();

    for (id, est) in ctx.marginals()? {
        state.marginal_mi.insert(id, est.value_nats);
    }
    let first = grow(
        &mut ctx,
        config,
        0,
        &mut Pass {
            state: &mut state,
            log: &mut log,
            journal: &mut journal,
            best: &mut best,
        },
    )?;
    rounds.push(first);

    for round in 1..=config.reflection_rounds {
        state.round = round;
        let current = best.clone().expect("first pass saw at least one beam");
        let added = match hooks.augment(&mut state, &current, round, &mut journal) {
            Ok(cols) => cols,
            Err(e) if e.is_replay_miss() => return Err(e),
            Err(e) => {
                journal.warn(format!("reflection round {round} failed: {e}"));
                Vec::new()
            }
        };
        let mut admitted = 0;
        for col in added {
            if col.is_active() {
                admitted += 1;
            }
            ctx.add_column(matrix, &col);
            matrix.insert(col);
        }
        journal.info(format!("reflection round {round}: {admitted} new admitted features"));
        if admitted == 0 {
            continue;
        }
        for (id, est) in ctx.marginals()? {
            state.marginal_mi.insert(id, est.value_nats);
        }
        let beams = grow(
            &mut ctx,
            config,
            round,
            &mut Pass {
                state: &mut state,
                log: &mut log,
                journal: &mut journal,
                best: &mut best,
            },
        )?;
        rounds.push(beams);
    }

    Ok(SearchOutcome {
        best: best.expect("at least one beam"),
        rounds,
        state,
        log,
        journal,
    })
}

/// Feature lines for the reflection prompt, by marginal MI descending.
pub fn render_features_with_scores(features: &[(&FeatureHypothesis, f64)]) -> String {
    let mut sorted: Vec<&(&FeatureHypothesis, f64)> = features.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    sorted
        .iter()
        .map(|(h, mi)| format!("{}, {} (MI: {:.4})", h.name, h.description, mi))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the agent for new hypotheses given the current best features and
/// their marginal MI. The raw answer is stored as an insight in `state`.
/// A malformed answer (after one reprompt) yields no hypotheses.
pub fn reflect_and_rehypothesize(
    generator: &Generator,
    features: &[(&FeatureHypothesis, f64)],
    scene: &str,
    count: usize,
    state: &mut SearchState,
    trace: &mut Trace,
) -> Result<Vec<FeatureHypothesis>> {
    let listing = render_features_with_scores(features);
    let n = count.to_string();
    let prompt = generator.prompts.render(
        PromptKind::ReflectFeatures,
        &[
            ("scene_description", scene),
            ("features_with_scores", &listing),
            ("new_feature_count", &n),
        ],
    )?;
    let step = format!("reflection round {}", state.round);
    let before = trace.history.len();
    let result = generator.ask_lines(&step, prompt, count, trace);
    if let Some(last) = trace.history[before..].last() {
        state.insights.push(last.raw_output.clone());
    }
    match result {
        Ok(lines) => Ok(to_hypotheses(&lines, Origin::Reflection, state.round)),
        Err(e) if e.is_replay_miss() => Err(e),
        Err(e) => {
            trace.journal.warn(format!("{step} produced no features: {e}"));
            Ok(Vec::new())
        }
    }
}
