//! Markov-profile inference attack and the efficacy harness.
//!
//! Every published trace is reduced to a skeleton: the region held at each
//! publishing-interval boundary. The attacker scores each trace of an
//! observation set under the user's profile and names the likeliest as real.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{AttackerKnowledge, EvalParams};
use crate::error::{Error, Result};
use crate::grid::{interval_len, GridMap, Record, RegionId, Trace};
use crate::offline::OfflineModel;
use crate::synth::{derive_seed, FakeRecordStore, ImpostorTrace, QueryContext, Synthesizer, Template};

pub type Skeleton = Vec<RegionId>;

/// Template start, then every interval boundary in `(t_s, t_e]`.
pub fn sample_times(t_s: i64, t_e: i64, n_user: u32) -> Vec<i64> {
    let len = interval_len(n_user).expect("valid N_U") as i64;
    let mut out = vec![t_s];
    let mut b = (t_s.div_euclid(len) + 1) * len;
    while b <= t_e {
        out.push(b);
        b += len;
    }
    out
}

/// Region of the last record at or before each time (the first record for
/// earlier times). `records` must be time-sorted and non-empty.
pub fn skeleton_of(records: &[Record], times: &[i64]) -> Skeleton {
    times
        .iter()
        .map(|&t| {
            let i = records.partition_point(|r| r.time <= t);
            records[i.saturating_sub(1)].region
        })
        .collect()
}

pub fn impostor_skeleton(imp: &ImpostorTrace, times: &[i64]) -> Skeleton {
    times.iter().map(|&t| imp.region_at(t)).collect()
}

/// A walk of `len` regions from a uniform start, each step to a uniformly
/// chosen neighbor.
pub fn random_walk<R: Rng + ?Sized>(map: &GridMap, len: usize, rng: &mut R) -> Skeleton {
    let mut cur = rng.random_range(0..map.n_regions() as RegionId);
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            let next: Vec<RegionId> = map.neighbors(cur).collect();
            cur = next[rng.random_range(0..next.len())];
        }
        out.push(cur);
    }
    out
}

/// First-order Markov chain over regions with additive smoothing on every
/// cell, plus a smoothed visit-frequency initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    n_regions: usize,
    epsilon: f64,
    visits: Vec<f64>,
    n_visits: f64,
    transitions: HashMap<(RegionId, RegionId), f64>,
    row_totals: Vec<f64>,
}

impl UserProfile {
    pub fn new(n_regions: usize, epsilon: f64) -> Self {
        UserProfile {
            n_regions,
            epsilon,
            visits: vec![0.0; n_regions],
            n_visits: 0.0,
            transitions: HashMap::new(),
            row_totals: vec![0.0; n_regions],
        }
    }

    pub fn add(&mut self, skeleton: &[RegionId]) {
        for &r in skeleton {
            self.visits[r as usize] += 1.0;
            self.n_visits += 1.0;
        }
        for w in skeleton.windows(2) {
            *self.transitions.entry((w[0], w[1])).or_default() += 1.0;
            self.row_totals[w[0] as usize] += 1.0;
        }
    }

    pub fn initial(&self, r: RegionId) -> f64 {
        (self.visits[r as usize] + self.epsilon) / (self.n_visits + self.epsilon * self.n_regions as f64)
    }

    pub fn transition(&self, from: RegionId, to: RegionId) -> f64 {
        let c = self.transitions.get(&(from, to)).copied().unwrap_or(0.0);
        (c + self.epsilon) / (self.row_totals[from as usize] + self.epsilon * self.n_regions as f64)
    }

    pub fn row(&self, from: RegionId) -> Vec<f64> {
        (0..self.n_regions as RegionId).map(|to| self.transition(from, to)).collect()
    }

    pub fn log_likelihood(&self, skeleton: &[RegionId]) -> f64 {
        let Some(&first) = skeleton.first() else {
            return 0.0;
        };
        self.initial(first).ln()
            + skeleton
                .windows(2)
                .map(|w| self.transition(w[0], w[1]).ln())
                .sum::<f64>()
    }
}

/// One profile per user from their training skeletons.
pub fn build_profiles<'a>(
    training: impl IntoIterator<Item = (&'a str, &'a Skeleton)>,
    n_regions: usize,
    epsilon: f64,
) -> HashMap<String, UserProfile> {
    let mut out: HashMap<String, UserProfile> = HashMap::new();
    for (user, sk) in training {
        out.entry(user.to_string())
            .or_insert_with(|| UserProfile::new(n_regions, epsilon))
            .add(sk);
    }
    out
}

/// The real trace and its fakes in random order. Only the harness sees the
/// truth index.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub query_id: String,
    pub traces: Vec<Skeleton>,
    truth: usize,
}

impl ObservationSet {
    pub fn new<R: Rng + ?Sized>(query_id: String, real: Skeleton, fakes: Vec<Skeleton>, rng: &mut R) -> Self {
        let mut all: Vec<(bool, Skeleton)> = std::iter::once((true, real))
            .chain(fakes.into_iter().map(|f| (false, f)))
            .collect();
        all.shuffle(rng);
        let truth = all.iter().position(|(real, _)| *real).unwrap();
        ObservationSet {
            query_id,
            traces: all.into_iter().map(|(_, s)| s).collect(),
            truth,
        }
    }

    pub fn truth(&self) -> usize {
        self.truth
    }
}

/// Index of the likeliest trace; ties are broken uniformly with `rng`.
pub fn infer_real<R: Rng + ?Sized>(traces: &[Skeleton], profile: &UserProfile, rng: &mut R) -> usize {
    let scores: Vec<f64> = traces.iter().map(|s| profile.log_likelihood(s)).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scores.len())
        .filter(|&i| (scores[i] - best).abs() <= 1e-9 * best.abs().max(1.0))
        .collect();
    tied[rng.random_range(0..tied.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Impostor,
    RandomWalk,
    IdenticalCopies,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Impostor => "impostor",
            Method::RandomWalk => "random_walk",
            Method::IdenticalCopies => "identical",
        }
    }

    fn id(&self) -> u64 {
        match self {
            Method::Impostor => 1,
            Method::RandomWalk => 2,
            Method::IdenticalCopies => 3,
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impostor" => Ok(Method::Impostor),
            "random_walk" | "random-walk" => Ok(Method::RandomWalk),
            "identical" => Ok(Method::IdenticalCopies),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficacyReport {
    pub method: Method,
    pub n_impostors: usize,
    pub n_sets: usize,
    pub errors: usize,
    pub efficacy: f64,
}

impl EfficacyReport {
    fn new(method: Method, n_impostors: usize, n_sets: usize, errors: usize) -> Self {
        let efficacy = if n_sets == 0 { 0.0 } else { errors as f64 / n_sets as f64 };
        EfficacyReport {
            method,
            n_impostors,
            n_sets,
            errors,
            efficacy,
        }
    }
}

pub fn write_reports<W: Write>(mut w: W, reports: &[EfficacyReport]) -> Result<()> {
    writeln!(w, "method,n_impostors,n_sets,errors,efficacy")?;
    for r in reports {
        writeln!(w, "{},{},{},{},{:.6}", r.method.as_str(), r.n_impostors, r.n_sets, r.errors, r.efficacy)?;
    }
    Ok(())
}

/// Wide table: one row per impostor count, one efficacy column per method.
pub fn write_curve<W: Write>(mut w: W, reports: &[EfficacyReport]) -> Result<()> {
    let mut methods: Vec<Method> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let ns: BTreeSet<usize> = reports.iter().map(|r| r.n_impostors).collect();
    let names: Vec<&str> = methods.iter().map(Method::as_str).collect();
    writeln!(w, "n_impostors,{}", names.join(","))?;
    for n in ns {
        let cells: Vec<String> = methods
            .iter()
            .map(|m| {
                reports
                    .iter()
                    .find(|r| r.method == *m && r.n_impostors == n)
                    .map_or(String::new(), |r| format!("{:.6}", r.efficacy))
            })
            .collect();
        writeln!(w, "{n},{}", cells.join(","))?;
    }
    Ok(())
}

/// Days present in the traces, split in order into training and test.
pub fn split_days(traces: &[Trace], train_fraction: f64) -> (Vec<i64>, Vec<i64>) {
    let days: BTreeSet<i64> = traces.iter().flat_map(|t| t.records.iter().map(Record::day)).collect();
    let days: Vec<i64> = days.into_iter().collect();
    let cut = ((days.len() as f64 * train_fraction).round() as usize).min(days.len());
    (days[..cut].to_vec(), days[cut..].to_vec())
}

/// Records of each trace that fall on the given days.
pub fn restrict_to_days(traces: &[Trace], days: &[i64]) -> Vec<Trace> {
    traces
        .iter()
        .map(|t| {
            Trace::new(
                t.vehicle_id.clone(),
                t.records.iter().filter(|r| days.binary_search(&r.day()).is_ok()).copied().collect(),
            )
        })
        .filter(|t| !t.is_empty())
        .collect()
}

pub struct Harness<'m> {
    pub model: &'m OfflineModel,
    pub params: EvalParams,
    pub seed: u64,
}

/// Per-user outcome: `(sets attacked, wrong guesses)`.
type Tally = (usize, usize);

impl<'m> Harness<'m> {
    pub fn new(model: &'m OfflineModel, params: EvalParams, seed: u64) -> Self {
        Harness { model, params, seed }
    }

    /// The users attacked: the first `params.users` traces by id.
    pub fn users<'t>(&self, traces: &'t [Trace]) -> Vec<&'t Trace> {
        let mut all: Vec<&Trace> = traces.iter().filter(|t| !t.is_empty()).collect();
        all.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id));
        all.truncate(self.params.users);
        all
    }

    /// Queries at every section midpoint, in time order.
    pub fn queries(&self, trace: &Trace) -> Result<Vec<Record>> {
        let sections = self.model.segment(trace)?.sections;
        Ok(sections.iter().map(|s| s.records[s.records.len() / 2]).collect())
    }

    /// One observation set for a query, updating the user's store.
    pub fn observe<R: Rng + ?Sized>(
        &self,
        method: Method,
        ctx: &QueryContext,
        store: &mut FakeRecordStore,
        rng: &mut R,
    ) -> Result<ObservationSet> {
        let synth = Synthesizer::new(self.model);
        let n_user = self.model.scheme.n_user;
        let (template, fakes): (Template, Vec<Skeleton>);
        match method {
            Method::Impostor => {
                let out = synth.synthesize(ctx, store)?;
                let times = sample_times(out.template.start_time(), out.template.end_time(), n_user);
                fakes = out.impostors.iter().map(|i| impostor_skeleton(i, &times)).collect();
                template = out.template;
            }
            Method::RandomWalk => {
                template = synth.template_for(ctx, store)?;
                let len = sample_times(template.start_time(), template.end_time(), n_user).len();
                fakes = (0..ctx.n).map(|_| random_walk(&self.model.map, len, rng)).collect();
            }
            Method::IdenticalCopies => {
                template = synth.template_for(ctx, store)?;
                let times = sample_times(template.start_time(), template.end_time(), n_user);
                fakes = vec![skeleton_of(&ctx.trajectory, &times); ctx.n];
            }
        }
        let times = sample_times(template.start_time(), template.end_time(), n_user);
        let real = skeleton_of(&ctx.trajectory, &times);
        let query_id = format!("{}@{}", ctx.user_id, ctx.target.time);
        Ok(ObservationSet::new(query_id, real, fakes, rng))
    }

    fn run_user(&self, trace: &Trace, method: Method, n: usize, train_days: &[i64]) -> Result<Tally> {
        let seed = derive_seed(self.seed, &[fnv(&trace.vehicle_id), method.id(), n as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = FakeRecordStore::in_memory(self.model.scheme.n_user);
        let mut profile = UserProfile::new(self.model.map.n_regions(), self.model.params.epsilon);
        let window = self.model.params.window_seconds();
        let (mut sets, mut errors) = (0, 0);
        for target in self.queries(trace)? {
            let ctx = QueryContext::around(trace, target, window, n);
            let obs = self.observe(method, &ctx, &mut store, &mut rng)?;
            if train_days.binary_search(&target.day()).is_ok() {
                match self.params.knowledge {
                    AttackerKnowledge::Observed => obs.traces.iter().for_each(|s| profile.add(s)),
                    AttackerKnowledge::RealHistory => profile.add(&obs.traces[obs.truth]),
                }
            } else {
                sets += 1;
                if infer_real(&obs.traces, &profile, &mut rng) != obs.truth {
                    errors += 1;
                }
            }
        }
        Ok((sets, errors))
    }

    /// Attacks every test-day query of the chosen users. Training-day
    /// queries feed the profiles.
    pub fn evaluate(&self, traces: &[Trace], method: Method, n: usize) -> Result<EfficacyReport> {
        let (train_days, _) = split_days(traces, self.params.train_fraction);
        let users = self.users(traces);
        let tallies: Vec<Tally> = users
            .par_iter()
            .map(|t| self.run_user(t, method, n, &train_days))
            .collect::<Result<_>>()?;
        let (sets, errors) = tallies.iter().fold((0, 0), |(s, e), (ts, te)| (s + ts, e + te));
        Ok(EfficacyReport::new(method, n, sets, errors))
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
