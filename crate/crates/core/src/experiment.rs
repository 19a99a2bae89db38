//! Experiment configuration and the batch experiments driven by the CLI.
//!
//! Every experiment is a pure function of the configuration and its seeds,
//! returns typed rows and can write them as CSV.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grouping::{
    bg_group, mlmsg_group, validate_grouping, Group, GroupingMode, GroupingResult,
};
use crate::link::{
    group_sinr, spectral_efficiency, worst_case_sinr, GroupRate, LinkParams, Precoder,
};
use crate::montecarlo::{empirical_sinr_many, Estimator, GroupModel, ValidationRow};
use crate::qoe::{
    expected_missing, optimize, NpMode, QoEWeights, RateGrid, RateSource, SchedulingConfig,
    TransmissionRates, WeightSampler,
};
use crate::scenario::{
    generate_users, members_by_viewport, normalize_powers, CellConfig, UserLink,
};
use crate::tiling::{decompose_lattices, Grid, Shape, Tile, ViewportSpec};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingSection {
    /// Equirectangular grid `[width, height]`.
    pub grid: [usize; 2],
    #[serde(default)]
    pub wrap: bool,
    pub fov: [usize; 2],
    /// Exact-scope formats.
    pub scopes: Vec<[usize; 2]>,
    /// Viewport centers, one per viewport.
    pub centers: Vec<[i64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
    #[serde(rename = "Ty")]
    pub ty: f64,
}

/// A grouping mode paired with a predictive-count mode, written `MLMSG+VN`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize)]
#[serde(try_from = "String")]
pub struct Strategy {
    pub grouping: GroupingMode,
    pub mode: NpMode,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.grouping, self.mode)
    }
}

impl FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MLMSG" => Ok(GroupingMode::Mlmsg),
            "BG" => Ok(GroupingMode::Basic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown grouping mode {s:?}"
            ))),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        let (g, m) = s.split_once('+').ok_or_else(|| {
            Error::InvalidArgument(format!("strategy {s:?} is not GROUPING+MODE"))
        })?;
        Ok(Self {
            grouping: g.trim().parse()?,
            mode: m.trim().parse()?,
        })
    }
}

fn default_step() -> f64 {
    1e5
}

fn default_levels() -> usize {
    200
}

fn default_strategies() -> Vec<Strategy> {
    ["MLMSG+VN", "MLMSG+FN", "BG+FN"]
        .into_iter()
        .map(|s| Strategy::try_from(s.to_string()).expect("valid literal"))
        .collect()
}

fn default_mrt() -> Vec<Precoder> {
    vec![Precoder::Mrt]
}

fn default_both() -> Vec<Precoder> {
    Precoder::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoeSection {
    #[serde(default = "default_step")]
    pub rate_step: f64,
    #[serde(default = "default_levels")]
    pub rate_levels: usize,
    pub beta_bar: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_mrt")]
    pub precoders: Vec<Precoder>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub groups: usize,
    pub trials: usize,
    /// Inclusive range of streams per random group.
    pub streams: [usize; 2],
    /// Inclusive range of users per stream.
    pub users: [usize; 2],
    pub seed: u64,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            groups: 20,
            trials: 10_000,
            streams: [1, 6],
            users: [1, 4],
            seed: 7,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    seeds: toml::Spanned<Vec<u64>>,
    #[serde(default = "default_out")]
    out: PathBuf,
    #[serde(default = "default_both")]
    precoders: Vec<Precoder>,
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Precoders for `table2` and `approx`.
    pub precoders: Vec<Precoder>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    cell: CellConfig,
    tiling: TilingSection,
    schedule: ScheduleSection,
    qoe: QoeSection,
    run: RawRun,
    #[serde(default)]
    montecarlo: MonteCarloSection,
}

/// Full experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub cell: CellConfig,
    pub tiling: TilingSection,
    pub schedule: ScheduleSection,
    pub qoe: QoeSection,
    pub run: RunSection,
    pub montecarlo: MonteCarloSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn shape(dims: [usize; 2]) -> Shape {
    Shape::new(dims[0], dims[1])
}

impl ExperimentConfig {
    /// Parses and validates a TOML configuration.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        if raw.run.seeds.get_ref().is_empty() {
            return Err(Error::Parse {
                line: line_of(text, raw.run.seeds.span().start),
                message: "seed list is empty".into(),
            });
        }
        let span = raw.run.seeds.span();
        let cfg = Self {
            cell: raw.cell,
            tiling: raw.tiling,
            schedule: raw.schedule,
            qoe: raw.qoe,
            run: RunSection {
                seeds: raw.run.seeds.into_inner(),
                out: raw.run.out,
                precoders: raw.run.precoders,
            },
            montecarlo: raw.montecarlo,
        };
        cfg.validate().map_err(|e| match e {
            Error::InvalidConfig(message) if message.contains("seed") => Error::Parse {
                line: line_of(text, span.start),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.cell.validate()?;
        if self.run.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let t = &self.tiling;
        if t.grid[0] == 0 || t.grid[1] == 0 || t.fov[0] == 0 || t.fov[1] == 0 {
            return bad("grid and FoV dimensions must be positive".into());
        }
        if t.centers.is_empty() || t.centers.len() > self.cell.users {
            return bad(format!(
                "need between 1 and K={} viewports, got {}",
                self.cell.users,
                t.centers.len()
            ));
        }
        for s in &t.scopes {
            if s[0] < t.fov[0] || s[1] < t.fov[1] {
                return bad(format!("scope {}x{} is smaller than the FoV", s[0], s[1]));
            }
        }
        // Every format must fit around every center.
        let grid = self.grid();
        for format in self.formats() {
            for c in &t.centers {
                ViewportSpec::new(
                    0,
                    Tile::new(c[0], c[1]),
                    self.fov(),
                    format,
                    format.area(),
                    &grid,
                )?;
            }
        }
        self.scheduling(self.fov()).validate()?;
        RateGrid::new(self.qoe.rate_step, self.qoe.rate_levels)?;
        let mc = &self.montecarlo;
        if mc.streams[0] == 0
            || mc.streams[0] > mc.streams[1]
            || mc.users[0] == 0
            || mc.users[0] > mc.users[1]
        {
            return bad("Monte Carlo stream and user ranges must be non-empty and positive".into());
        }
        Ok(())
    }

    /// The reference theater with two far-apart viewports.
    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_CONFIG).expect("reference config is valid")
    }

    pub fn grid(&self) -> Grid {
        let g = Grid::new(self.tiling.grid[0], self.tiling.grid[1]);
        if self.tiling.wrap {
            g.wrapping()
        } else {
            g
        }
    }

    pub fn fov(&self) -> Shape {
        shape(self.tiling.fov)
    }

    pub fn scopes(&self) -> Vec<Shape> {
        self.tiling.scopes.iter().copied().map(shape).collect()
    }

    /// Predictive formats: the FoV followed by each full scope.
    pub fn formats(&self) -> Vec<Shape> {
        let mut out = vec![self.fov()];
        for s in self.scopes() {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn viewport_count(&self) -> usize {
        self.tiling.centers.len()
    }

    pub fn link_params(&self) -> Result<LinkParams<f64>> {
        let p = normalize_powers(&self.cell)?;
        Ok(LinkParams {
            antennas: self.cell.antennas,
            uplink: p.uplink,
            downlink: p.downlink,
            coherence: self.cell.coherence_symbols,
            bandwidth: self.cell.bandwidth,
        })
    }

    pub fn scheduling(&self, scope: Shape) -> SchedulingConfig<f64> {
        SchedulingConfig {
            t1: self.schedule.t1,
            t2: self.schedule.t2,
            ty: self.schedule.ty,
            fov: self.fov().area(),
            scope: scope.area(),
        }
    }

    pub fn rate_grid(&self) -> Result<RateGrid<f64>> {
        RateGrid::new(self.qoe.rate_step, self.qoe.rate_levels)
    }

    /// Viewports transmitting `n_p` tiles of the given scope.
    pub fn viewports(&self, scope: Shape, n_p: usize) -> Result<Vec<ViewportSpec>> {
        let grid = self.grid();
        self.tiling
            .centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                ViewportSpec::new(i, Tile::new(c[0], c[1]), self.fov(), scope, n_p, &grid)
            })
            .collect()
    }

    pub fn deploy(&self, seed: u64) -> Result<Deployment> {
        let users = generate_users(&self.cell, self.viewport_count(), seed)?;
        let members = members_by_viewport(&users, self.viewport_count());
        Ok(Deployment { users, members })
    }
}

/// Canonical configuration: the reference theater over 50 seeds.
pub const REFERENCE_CONFIG: &str = include_str!("../../../configs/reference.toml");

/// Users and their viewport memberships for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Deployment {
    pub users: Vec<UserLink>,
    pub members: Vec<Vec<usize>>,
}

impl Deployment {
    pub fn psi_min(&self) -> f64 {
        self.users
            .iter()
            .map(|u| u.psi)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn psi_total(&self) -> f64 {
        self.users.iter().map(|u| u.psi).sum()
    }

    /// Fading coefficients of a group's users, per stream.
    pub fn stream_psi(&self, group: &Group) -> Vec<Vec<f64>> {
        group
            .streams
            .iter()
            .map(|s| s.users.iter().map(|&u| self.users[u].psi).collect())
            .collect()
    }
}

/// Groups for viewports sharing one tile-set shape.
pub fn build_groups(
    mode: GroupingMode,
    viewports: &[ViewportSpec],
    members: &[Vec<usize>],
) -> Result<GroupingResult> {
    match mode {
        GroupingMode::Basic => bg_group(viewports, members),
        GroupingMode::Mlmsg => {
            let first = viewports
                .first()
                .ok_or_else(|| Error::InvalidArgument("no viewports".into()))?;
            let lattices = decompose_lattices(&first.tiles)?;
            mlmsg_group(&lattices, viewports, members)
        }
    }
}

pub fn group_rates(
    grouping: &GroupingResult,
    deployment: &Deployment,
    precoder: Precoder,
    params: &LinkParams<f64>,
) -> Result<Vec<GroupRate<f64>>> {
    grouping
        .groups
        .iter()
        .map(|g| GroupRate::of_group(precoder, &deployment.stream_psi(g), params))
        .collect()
}

/// Worst-case throughputs of the missing-tile groups.
///
/// MLMSG sends `n_m` groups of one tile per viewport with pilot length `L`;
/// BG sends each of the `L * n_m` missing tiles as its own single-stream
/// group. Both assume any user may be in any group.
pub fn missing_rates(
    mode: GroupingMode,
    n_m: usize,
    deployment: &Deployment,
    precoder: Precoder,
    params: &LinkParams<f64>,
) -> Result<Vec<f64>> {
    if n_m == 0 {
        return Ok(Vec::new());
    }
    let l = deployment.members.len();
    let (groups, sigma) = match mode {
        GroupingMode::Mlmsg => (n_m, l),
        GroupingMode::Basic => (l * n_m, 1),
    };
    let omega = worst_case_sinr(
        precoder,
        params.antennas,
        sigma,
        params.uplink,
        params.downlink,
        deployment.psi_min(),
        deployment.psi_total(),
    )?;
    let rate = GroupRate::new(precoder, omega, sigma, params)?;
    Ok(vec![rate.v; groups])
}

/// Group throughputs for every predictive count of one scope, computed once
/// and shared across a weight sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRates {
    pub fov: usize,
    pub rates: Vec<TransmissionRates<f64>>,
}

impl ScenarioRates {
    pub fn compute(
        cfg: &ExperimentConfig,
        deployment: &Deployment,
        scope: Shape,
        grouping: GroupingMode,
        precoder: Precoder,
    ) -> Result<Self> {
        let params = cfg.link_params()?;
        let (m, s) = (cfg.fov().area(), scope.area());
        let rates = (m..=s)
            .map(|n_p| {
                let vps = cfg.viewports(scope, n_p)?;
                let groups = build_groups(grouping, &vps, &deployment.members)?;
                let predictive = group_rates(&groups, deployment, precoder, &params)?
                    .into_iter()
                    .map(|r| r.v)
                    .collect();
                let n_m = expected_missing(n_p, m, s)?;
                let missing = missing_rates(grouping, n_m, deployment, precoder, &params)?;
                Ok(TransmissionRates {
                    predictive,
                    missing,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fov: m, rates })
    }
}

impl RateSource<f64> for ScenarioRates {
    fn rates(&self, n_p: usize, _n_m: usize) -> Result<TransmissionRates<f64>> {
        n_p.checked_sub(self.fov)
            .and_then(|i| self.rates.get(i))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no rates for N_p={n_p}")))
    }
}

/// Derives an independent seed for a named purpose.
fn sub_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.random()
}

const WEIGHT_STREAM: u64 = 1;

fn per_seed<R, F>(seeds: &[u64], parallel: bool, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(u64) -> Result<R> + Sync + Send,
{
    if parallel {
        seeds.par_iter().map(|&s| f(s)).collect()
    } else {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Table2,
    Approx,
    QoeSweep,
    McValidate,
    GroupAudit,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Table2,
        Experiment::Approx,
        Experiment::QoeSweep,
        Experiment::McValidate,
        Experiment::GroupAudit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table2 => "table2",
            Experiment::Approx => "approx",
            Experiment::QoeSweep => "qoe-sweep",
            Experiment::McValidate => "mc-validate",
            Experiment::GroupAudit => "group-audit",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

/// Runs one experiment and writes `<out>/<name>.csv`. Returns the path.
pub fn run_experiment(
    experiment: Experiment,
    cfg: &ExperimentConfig,
    parallel: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.run.out)?;
    let path = cfg.run.out.join(format!("{}.csv", experiment.name()));
    let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    match experiment {
        Experiment::Table2 => write_table2_csv(file, &table2(cfg, parallel)?)?,
        Experiment::Approx => write_approx_csv(file, &approx(cfg, parallel)?)?,
        Experiment::QoeSweep => write_sweep_csv(file, &qoe_sweep(cfg, parallel)?)?,
        Experiment::McValidate => {
            crate::montecarlo::write_validation_csv(file, &mc_validate(cfg)?)?
        }
        Experiment::GroupAudit => write_audit_csv(file, &group_audit(cfg, parallel)?)?,
    }
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table2Row {
    pub format: Shape,
    pub grouping: GroupingMode,
    pub precoder: Precoder,
    /// Mean over seeds of the per-seed delay metric.
    pub rho: f64,
    pub rho_std: f64,
    pub groups: f64,
    pub seeds: usize,
}

/// Delay metric of every predictive format, grouping mode and precoder.
pub fn table2(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<Table2Row>> {
    let params = cfg.link_params()?;
    let formats = cfg.formats();
    let modes = [GroupingMode::Mlmsg, GroupingMode::Basic];
    let combos: Vec<(Shape, GroupingMode, Precoder)> = formats
        .iter()
        .flat_map(|&f| {
            modes
                .iter()
                .flat_map(move |&m| cfg.run.precoders.iter().map(move |&p| (f, m, p)))
        })
        .collect();
    // Per seed: (rho, group count) per combo.
    let per: Vec<Vec<(f64, usize)>> = per_seed(&cfg.run.seeds, parallel, |seed| {
        let dep = cfg.deploy(seed)?;
        combos
            .iter()
            .map(|&(format, mode, pre)| {
                let scope = if format == cfg.fov() {
                    cfg.fov()
                } else {
                    format
                };
                let vps = cfg.viewports(scope, format.area())?;
                let groups = build_groups(mode, &vps, &dep.members)?;
                let gammas: Vec<f64> = group_rates(&groups, &dep, pre, &params)?
                    .into_iter()
                    .map(|r| r.gamma)
                    .collect();
                Ok((crate::link::rho(&gammas)?, groups.groups.len()))
            })
            .collect()
    })?;
    let n = per.len() as f64;
    Ok(combos
        .iter()
        .enumerate()
        .map(|(i, &(format, grouping, precoder))| {
            let mean = per.iter().map(|r| r[i].0).sum::<f64>() / n;
            let var = per.iter().map(|r| (r[i].0 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            Table2Row {
                format,
                grouping,
                precoder,
                rho: mean,
                rho_std: var.sqrt(),
                groups: per.iter().map(|r| r[i].1 as f64).sum::<f64>() / n,
                seeds: per.len(),
            }
        })
        .collect())
}

pub fn write_table2_csv<W: Write>(out: W, rows: &[Table2Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "format", "grouping", "precoder", "rho", "rho_std", "groups", "seeds",
    ])?;
    for r in rows {
        w.write_record([
            r.format.to_string(),
            r.grouping.to_string(),
            r.precoder.to_string(),
            r.rho.to_string(),
            r.rho_std.to_string(),
            r.groups.to_string(),
            r.seeds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Actual versus worst-case rates of missing-tile groups at one `N_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxRow {
    pub scope: Shape,
    pub n_m: usize,
    pub precoder: Precoder,
    pub samples: usize,
    pub actual_sinr: f64,
    pub bound_sinr: f64,
    pub mean_sinr_gap: f64,
    pub max_sinr_gap: f64,
    pub actual_se: f64,
    pub bound_se: f64,
    pub mean_se_gap: f64,
    pub max_se_gap: f64,
    /// Groups whose bound exceeded the actual SINR.
    pub violations: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct GapSample {
    actual_sinr: f64,
    bound_sinr: f64,
    actual_se: f64,
    bound_se: f64,
}

/// Missing-tile groups for `n_p` predictive tiles: the unsent scope tiles of
/// every viewport combined like predictive tiles, first `n_m` groups kept.
fn missing_groups(
    cfg: &ExperimentConfig,
    dep: &Deployment,
    scope: Shape,
    n_p: usize,
    n_m: usize,
) -> Result<Vec<Group>> {
    let vps = cfg.viewports(scope, n_p)?;
    let residual: Vec<ViewportSpec> = vps
        .iter()
        .map(|v| {
            let rest: BTreeSet<Tile> = v.scope_tiles.difference(&v.tiles).copied().collect();
            ViewportSpec::from_tiles(v.id, rest)
        })
        .collect();
    let grouping = build_groups(GroupingMode::Mlmsg, &residual, &dep.members)?;
    Ok(grouping.groups.into_iter().take(n_m).collect())
}

/// Worst-case bound quality for every `N_m` reachable in each scope.
pub fn approx(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<ApproxRow>> {
    let params = cfg.link_params()?;
    let l = cfg.viewport_count();
    let m = cfg.fov().area();
    let mut rows = Vec::new();
    for scope in cfg.scopes() {
        let s = scope.area();
        if s == m {
            continue;
        }
        let max_nm = expected_missing(m, m, s)?;
        for &pre in &cfg.run.precoders {
            // Per seed, per N_m: samples.
            let per: Vec<Vec<Vec<GapSample>>> = per_seed(&cfg.run.seeds, parallel, |seed| {
                let dep = cfg.deploy(seed)?;
                let bound = worst_case_sinr(
                    pre,
                    params.antennas,
                    l,
                    params.uplink,
                    params.downlink,
                    dep.psi_min(),
                    dep.psi_total(),
                )?;
                let bound_se = spectral_efficiency(bound, l, params.coherence)?;
                let mut by_nm = vec![Vec::new(); max_nm + 1];
                for n_p in m..s {
                    let n_m = expected_missing(n_p, m, s)?;
                    for g in missing_groups(cfg, &dep, scope, n_p, n_m)? {
                        let psi = dep.stream_psi(&g);
                        let actual = group_sinr(pre, &psi, &params)?.omega();
                        by_nm[n_m].push(GapSample {
                            actual_sinr: actual,
                            bound_sinr: bound,
                            actual_se: spectral_efficiency(actual, psi.len(), params.coherence)?,
                            bound_se,
                        });
                    }
                }
                Ok(by_nm)
            })?;
            for n_m in 1..=max_nm {
                let samples: Vec<GapSample> =
                    per.iter().flat_map(|p| p[n_m].iter().copied()).collect();
                if samples.is_empty() {
                    continue;
                }
                let k = samples.len() as f64;
                let mean = |f: &dyn Fn(&GapSample) -> f64| samples.iter().map(f).sum::<f64>() / k;
                let max = |f: &dyn Fn(&GapSample) -> f64| {
                    samples.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
                };
                let sinr_gap = |x: &GapSample| (x.actual_sinr - x.bound_sinr) / x.actual_sinr;
                let se_gap = |x: &GapSample| (x.actual_se - x.bound_se) / x.actual_se;
                rows.push(ApproxRow {
                    scope,
                    n_m,
                    precoder: pre,
                    samples: samples.len(),
                    actual_sinr: mean(&|x| x.actual_sinr),
                    bound_sinr: mean(&|x| x.bound_sinr),
                    mean_sinr_gap: mean(&sinr_gap),
                    max_sinr_gap: max(&sinr_gap),
                    actual_se: mean(&|x| x.actual_se),
                    bound_se: mean(&|x| x.bound_se),
                    mean_se_gap: mean(&se_gap),
                    max_se_gap: max(&se_gap),
                    violations: samples
                        .iter()
                        .filter(|x| x.bound_sinr > x.actual_sinr * (1.0 + 1e-12))
                        .count(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_approx_csv<W: Write>(out: W, rows: &[ApproxRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scope",
        "n_m",
        "precoder",
        "samples",
        "actual_sinr",
        "bound_sinr",
        "mean_sinr_gap",
        "max_sinr_gap",
        "actual_se",
        "bound_se",
        "mean_se_gap",
        "max_se_gap",
        "violations",
    ])?;
    for r in rows {
        w.write_record([
            r.scope.to_string(),
            r.n_m.to_string(),
            r.precoder.to_string(),
            r.samples.to_string(),
            r.actual_sinr.to_string(),
            r.bound_sinr.to_string(),
            r.mean_sinr_gap.to_string(),
            r.max_sinr_gap.to_string(),
            r.actual_se.to_string(),
            r.bound_se.to_string(),
            r.mean_se_gap.to_string(),
            r.max_se_gap.to_string(),
            r.violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub scope: Shape,
    pub precoder: Precoder,
    pub strategy: Strategy,
    pub beta_bar: f64,
    pub n_p: usize,
    pub n_m: usize,
    pub eta_p: f64,
    pub eta_m: f64,
    pub score: f64,
    pub feasible: bool,
}

/// Optimized average QoE over the weight sweep, per seed, scope, precoder
/// and strategy.
pub fn qoe_sweep(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<SweepRow>> {
    let grid = cfg.rate_grid()?;
    let per = per_seed(&cfg.run.seeds, parallel, |seed| {
        let dep = cfg.deploy(seed)?;
        let sampler = WeightSampler::new(cfg.cell.users, sub_seed(seed, WEIGHT_STREAM));
        let mut rows = Vec::new();
        for scope in cfg.scopes() {
            let sched = cfg.scheduling(scope);
            for &pre in &cfg.qoe.precoders {
                for &strategy in &cfg.qoe.strategies {
                    let source = ScenarioRates::compute(cfg, &dep, scope, strategy.grouping, pre)?;
                    for &beta_bar in &cfg.qoe.beta_bar {
                        let w: QoEWeights<f64> = sampler.weights(beta_bar);
                        let sol = optimize(&source, &w, &sched, &grid, strategy.mode)?;
                        rows.push(SweepRow {
                            seed,
                            scope,
                            precoder: pre,
                            strategy,
                            beta_bar,
                            n_p: sol.n_p,
                            n_m: sol.n_m,
                            eta_p: sol.eta_p,
                            eta_m: sol.eta_m,
                            score: sol.score,
                            feasible: sol.feasible,
                        });
                    }
                }
            }
        }
        Ok(rows)
    })?;
    Ok(per.into_iter().flatten().collect())
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "seed",
        "scope",
        "precoder",
        "beta_bar",
        "mode",
        "grouping_mode",
        "n_p",
        "n_m",
        "eta_p",
        "eta_m",
        "score",
        "feasible",
    ])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.scope.to_string(),
            r.precoder.to_string(),
            r.beta_bar.to_string(),
            r.strategy.mode.to_string(),
            r.strategy.grouping.to_string(),
            r.n_p.to_string(),
            r.n_m.to_string(),
            r.eta_p.to_string(),
            r.eta_m.to_string(),
            r.score.to_string(),
            r.feasible.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Random groups for the Monte Carlo check: stream and user counts drawn
/// from the configured ranges, distances uniform on the seating annulus.
pub fn random_groups(cfg: &ExperimentConfig) -> Vec<Vec<Vec<f64>>> {
    let mc = &cfg.montecarlo;
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    (0..mc.groups)
        .map(|_| {
            let f = rng.random_range(mc.streams[0]..=mc.streams[1]);
            (0..f)
                .map(|_| {
                    let b = rng.random_range(mc.users[0]..=mc.users[1]);
                    (0..b)
                        .map(|_| {
                            let tau = rng.random_range(cfg.cell.r1..=cfg.cell.r2);
                            cfg.cell.large_scale_fading(tau)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Closed-form versus Monte Carlo SINR for every user of every random group.
pub fn mc_validate(cfg: &ExperimentConfig) -> Result<Vec<ValidationRow>> {
    let params = cfg.link_params()?;
    let mut rows = Vec::new();
    for (gid, psi) in random_groups(cfg).into_iter().enumerate() {
        let f = psi.len();
        let closed = cfg
            .run
            .precoders
            .iter()
            .map(|&p| group_sinr(p, &psi, &params))
            .collect::<Result<Vec<_>>>()?;
        let requests: Vec<(Precoder, Vec<f64>)> = cfg
            .run
            .precoders
            .iter()
            .zip(&closed)
            .map(|(&p, c)| (p, c.allocation.powers.clone()))
            .collect();
        let model = GroupModel::new(psi, params.antennas, f, params.uplink)?;
        let seed = sub_seed(cfg.montecarlo.seed, gid as u64 + 1);
        let est = empirical_sinr_many(
            &model,
            &requests,
            Estimator::Conditional,
            cfg.montecarlo.trials,
            seed,
        )?;
        for ((&pre, c), e) in cfg.run.precoders.iter().zip(&closed).zip(&est) {
            for (stream, ((cs, es), ss)) in
                c.user_sinr().iter().zip(&e.sinr).zip(&e.stderr).enumerate()
            {
                for (user, ((&cv, &ev), &se)) in cs.iter().zip(es).zip(ss).enumerate() {
                    rows.push(ValidationRow {
                        precoder: pre,
                        group: gid,
                        stream,
                        user,
                        closed_form: cv,
                        empirical: ev,
                        stderr: se,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub seed: u64,
    pub scope: Shape,
    pub n_p: usize,
    pub grouping: GroupingMode,
    pub groups: usize,
    pub pilots: usize,
    pub complete: usize,
    pub user_conflicts: usize,
    pub viewport_conflicts: usize,
    pub missing: usize,
    pub duplicated: usize,
    pub unrequested: usize,
}

impl AuditRow {
    pub fn violations(&self) -> usize {
        self.user_conflicts
            + self.viewport_conflicts
            + self.missing
            + self.duplicated
            + self.unrequested
    }
}

/// Constraint diagnostics for every seed, scope, predictive count and mode.
pub fn group_audit(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<AuditRow>> {
    let m = cfg.fov().area();
    let per = per_seed(&cfg.run.seeds, parallel, |seed| {
        let dep = cfg.deploy(seed)?;
        let mut rows = Vec::new();
        for scope in cfg.scopes() {
            for n_p in m..=scope.area() {
                let vps = cfg.viewports(scope, n_p)?;
                for mode in [GroupingMode::Mlmsg, GroupingMode::Basic] {
                    let result = build_groups(mode, &vps, &dep.members)?;
                    let d = validate_grouping(&result, &vps);
                    rows.push(AuditRow {
                        seed,
                        scope,
                        n_p,
                        grouping: mode,
                        groups: result.groups.len(),
                        pilots: result.total_pilots(),
                        complete: result.groups.len() - d.incomplete.len(),
                        user_conflicts: d.user_conflicts.len(),
                        viewport_conflicts: d.viewport_conflicts.len(),
                        missing: d.missing.len(),
                        duplicated: d.duplicated.len(),
                        unrequested: d.unrequested.len(),
                    });
                }
            }
        }
        Ok(rows)
    })?;
    Ok(per.into_iter().flatten().collect())
}

pub fn write_audit_csv<W: Write>(out: W, rows: &[AuditRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "seed",
        "scope",
        "n_p",
        "grouping",
        "groups",
        "pilots",
        "complete_groups",
        "user_conflicts",
        "viewport_conflicts",
        "missing",
        "duplicated",
        "unrequested",
    ])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.scope.to_string(),
            r.n_p.to_string(),
            r.grouping.to_string(),
            r.groups.to_string(),
            r.pilots.to_string(),
            r.complete.to_string(),
            r.user_conflicts.to_string(),
            r.viewport_conflicts.to_string(),
            r.missing.to_string(),
            r.duplicated.to_string(),
            r.unrequested.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
