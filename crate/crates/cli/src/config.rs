//! Flat `section.key = value` experiment files.
//!
//! Blank lines and `#` comments are ignored. Every problem in a file is
//! reported, each with its line number.

use std::collections::BTreeMap;
use std::fmt;

use wfp_core::{Boundary, Interaction, Potential, VanDerPolForm};

#[derive(Debug, Clone, PartialEq)]
pub enum GraphConfig {
    Path { a: f64, b: f64, n: usize },
    Cycle { a: f64, b: f64, n: usize },
    Lattice2d { xlo: f64, xhi: f64, ylo: f64, yhi: f64, dx: f64, boundary: Boundary },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftConfig {
    VanDerPol { form: VanDerPolForm },
    Duffing { xi: f64, omega: f64, r: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Gradient { potential: Potential, interaction: Interaction, beta: f64 },
    General { drift: DriftConfig, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitConfig {
    /// `ρ⁰_i ∝ exp(−‖x(i) − center‖² / (2·variance))`.
    Gaussian { center: Vec<f64>, variance: f64 },
    Uniform,
    /// Independent uniform weights in `[0.5, 1.5)` from the run seed.
    Random,
    /// Density CSV as written by the runner (`log_rho` column preferred).
    Csv { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtConfig {
    Fixed(f64),
    Auto { safety: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopConfig {
    Time,
    DissipationBelow(f64),
    ResidualBelow(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeConfig {
    pub dt: DtConfig,
    pub t_end: f64,
    pub stop: StopConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: String,
    pub sample_every: usize,
    /// 0 disables density checkpoints.
    pub density_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateConfig {
    /// 0 skips the λ estimate.
    pub restarts: usize,
    pub tail_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub init: InitConfig,
    pub time: TimeConfig,
    pub output: OutputConfig,
    pub rate: RateConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line, or 0 for a missing key.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

/// All errors of one parse, in line order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

struct Reader {
    entries: BTreeMap<String, (String, usize)>,
    used: Vec<String>,
    errors: Vec<ConfigError>,
}

impl Reader {
    fn new(text: &str) -> Self {
        let mut entries = BTreeMap::new();
        let mut errors = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                errors.push(ConfigError { line, message: format!("expected `key = value`, got `{content}`") });
                continue;
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                errors.push(ConfigError { line, message: "empty key".into() });
                continue;
            }
            if let Some((_, first)) = entries.get(&key) {
                errors.push(ConfigError { line, message: format!("duplicate key `{key}` (first set on line {first})") });
                continue;
            }
            entries.insert(key, (value, line));
        }
        Self { entries, used: Vec::new(), errors }
    }

    fn error(&mut self, line: usize, message: String) {
        self.errors.push(ConfigError { line, message });
    }

    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.used.push(key.to_string());
        }
        v
    }

    fn required(&mut self, key: &str) -> Option<(String, usize)> {
        let v = self.raw(key);
        if v.is_none() {
            self.error(0, format!("missing key `{key}`"));
        }
        v
    }

    fn parse_with<T>(&mut self, key: &str, value: (String, usize), f: impl Fn(&str) -> Result<T, String>) -> Option<T> {
        match f(&value.0) {
            Ok(v) => Some(v),
            Err(msg) => {
                self.error(value.1, format!("`{key}`: {msg}"));
                None
            }
        }
    }

    fn req<T>(&mut self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Option<T> {
        let v = self.required(key)?;
        self.parse_with(key, v, f)
    }

    fn opt<T>(&mut self, key: &str, default: T, f: impl Fn(&str) -> Result<T, String>) -> Option<T> {
        match self.raw(key) {
            None => Some(default),
            Some(v) => self.parse_with(key, v, f),
        }
    }

    fn finish(mut self) -> Vec<ConfigError> {
        let unused: Vec<(String, usize)> = self
            .entries
            .iter()
            .filter(|(k, _)| !self.used.contains(k))
            .map(|(k, (_, line))| (k.clone(), *line))
            .collect();
        for (k, line) in unused {
            self.error(line, format!("unknown key `{k}`"));
        }
        self.errors.sort_by_key(|e| e.line);
        self.errors
    }
}

fn real(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn nonneg(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be nonnegative, got {v}"))
    }
}

fn count(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("`{s}` is not a nonnegative integer"))
}

fn positive_count(s: &str) -> Result<usize, String> {
    let v = count(s)?;
    if v > 0 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1), got {v}"))
    }
}

fn vector(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| real(p.trim())).collect()
}

fn choice<T: Copy>(options: &'static [(&'static str, T)]) -> impl Fn(&str) -> Result<T, String> {
    move |s: &str| {
        options.iter().find(|(name, _)| *name == s).map(|(_, v)| *v).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("unknown value `{s}` (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Clone, Copy)]
enum GraphKind {
    Path,
    Cycle,
    Lattice2d,
}

#[derive(Clone, Copy)]
enum ModelKind {
    Gradient,
    General,
}

#[derive(Clone, Copy)]
enum DriftKind {
    VanDerPol,
    Duffing,
}

#[derive(Clone, Copy)]
enum InitKind {
    Gaussian,
    Uniform,
    Random,
    Csv,
}

#[derive(Clone, Copy)]
enum StopKind {
    Time,
    Dissipation,
    Residual,
}

const GRAPH_KINDS: &[(&str, GraphKind)] =
    &[("path", GraphKind::Path), ("cycle", GraphKind::Cycle), ("lattice_2d", GraphKind::Lattice2d)];
const BOUNDARIES: &[(&str, Boundary)] = &[("neumann", Boundary::Neumann), ("periodic", Boundary::Periodic)];
const MODEL_KINDS: &[(&str, ModelKind)] = &[("gradient", ModelKind::Gradient), ("general", ModelKind::General)];
const POTENTIALS: &[(&str, Potential)] = &[
    ("zero", Potential::Zero),
    ("quadratic", Potential::Quadratic),
    ("double_well", Potential::DoubleWell),
];
const INTERACTIONS: &[(&str, Interaction)] =
    &[("zero", Interaction::Zero), ("cubic_distance", Interaction::CubicDistance)];
const DRIFTS: &[(&str, DriftKind)] = &[("van_der_pol", DriftKind::VanDerPol), ("duffing", DriftKind::Duffing)];
const VDP_FORMS: &[(&str, VanDerPolForm)] =
    &[("oscillator", VanDerPolForm::Oscillator), ("reduced", VanDerPolForm::Reduced)];
const INIT_KINDS: &[(&str, InitKind)] = &[
    ("gaussian", InitKind::Gaussian),
    ("uniform", InitKind::Uniform),
    ("random", InitKind::Random),
    ("csv", InitKind::Csv),
];
const STOP_KINDS: &[(&str, StopKind)] = &[
    ("time", StopKind::Time),
    ("dissipation_below", StopKind::Dissipation),
    ("residual_below", StopKind::Residual),
];

fn parse_graph(r: &mut Reader) -> Option<GraphConfig> {
    let kind = r.req("graph.kind", choice(GRAPH_KINDS))?;
    match kind {
        GraphKind::Path | GraphKind::Cycle => {
            let a = r.req("graph.a", real);
            let b = r.req("graph.b", real);
            let n = r.req("graph.n", count);
            let (a, b, n) = (a?, b?, n?);
            Some(match kind {
                GraphKind::Path => GraphConfig::Path { a, b, n },
                _ => GraphConfig::Cycle { a, b, n },
            })
        }
        GraphKind::Lattice2d => {
            let xlo = r.req("graph.xlo", real);
            let xhi = r.req("graph.xhi", real);
            let ylo = r.req("graph.ylo", real);
            let yhi = r.req("graph.yhi", real);
            let dx = r.req("graph.dx", positive);
            let boundary = r.opt("graph.boundary", Boundary::Neumann, choice(BOUNDARIES));
            Some(GraphConfig::Lattice2d { xlo: xlo?, xhi: xhi?, ylo: ylo?, yhi: yhi?, dx: dx?, boundary: boundary? })
        }
    }
}

fn parse_model(r: &mut Reader) -> Option<ModelConfig> {
    let kind = r.req("model.kind", choice(MODEL_KINDS))?;
    let beta = r.req("model.beta", positive);
    match kind {
        ModelKind::Gradient => {
            let potential = r.opt("model.potential", Potential::Zero, choice(POTENTIALS));
            let interaction = r.opt("model.interaction", Interaction::Zero, choice(INTERACTIONS));
            Some(ModelConfig::Gradient { potential: potential?, interaction: interaction?, beta: beta? })
        }
        ModelKind::General => {
            let drift = match r.req("model.drift", choice(DRIFTS))? {
                DriftKind::VanDerPol => {
                    DriftConfig::VanDerPol { form: r.opt("model.form", VanDerPolForm::Oscillator, choice(VDP_FORMS))? }
                }
                DriftKind::Duffing => {
                    let xi = r.req("model.xi", real);
                    let omega = r.req("model.omega", real);
                    let rr = r.req("model.r", real);
                    DriftConfig::Duffing { xi: xi?, omega: omega?, r: rr? }
                }
            };
            Some(ModelConfig::General { drift, beta: beta? })
        }
    }
}

fn parse_init(r: &mut Reader) -> Option<InitConfig> {
    Some(match r.opt("init.kind", InitKind::Uniform, choice(INIT_KINDS))? {
        InitKind::Gaussian => {
            let center = r.req("init.center", vector);
            let variance = r.req("init.variance", positive);
            InitConfig::Gaussian { center: center?, variance: variance? }
        }
        InitKind::Uniform => InitConfig::Uniform,
        InitKind::Random => InitConfig::Random,
        InitKind::Csv => InitConfig::Csv { path: r.req("init.path", |s| Ok(s.to_string()))? },
    })
}

fn parse_time(r: &mut Reader) -> Option<TimeConfig> {
    let dt = match r.required("time.dt") {
        Some((v, _)) if v == "auto" => r.opt("time.safety", 0.5, fraction_or_one).map(|safety| DtConfig::Auto { safety }),
        Some(v) => r.parse_with("time.dt", v, positive).map(DtConfig::Fixed),
        None => None,
    };
    let t_end = r.req("time.t_end", nonneg);
    let stop = match r.opt("time.stop", StopKind::Time, choice(STOP_KINDS))? {
        StopKind::Time => Some(StopConfig::Time),
        StopKind::Dissipation => r.req("time.tolerance", positive).map(StopConfig::DissipationBelow),
        StopKind::Residual => r.req("time.tolerance", positive).map(StopConfig::ResidualBelow),
    };
    Some(TimeConfig { dt: dt?, t_end: t_end?, stop: stop? })
}

fn fraction_or_one(s: &str) -> Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

/// Parse and validate an experiment file.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let mut r = Reader::new(text);
    let name = r.req("name", |s| {
        if s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') && !s.is_empty() {
            Ok(s.to_string())
        } else {
            Err(format!("`{s}` may only use letters, digits, `_` and `-`"))
        }
    });
    let seed = r.opt("seed", 0u64, |s| s.parse().map_err(|_| format!("`{s}` is not a nonnegative integer")));
    let graph = parse_graph(&mut r);
    let model = parse_model(&mut r);
    let init = parse_init(&mut r);
    let time = parse_time(&mut r);
    let dir = r.opt("output.dir", None, |s| Ok(Some(s.to_string())));
    let sample_every = r.opt("output.sample_every", 1, positive_count);
    let density_every = r.opt("output.density_every", 0, count);
    let restarts = r.opt("rate.restarts", 0, count);
    let tail_fraction = r.opt("rate.tail_fraction", 0.5, fraction);
    if let (Some(GraphConfig::Lattice2d { .. }), Some(InitConfig::Gaussian { center, .. })) = (&graph, &init) {
        if center.len() != 2 {
            let line = r.entries.get("init.center").map_or(0, |v| v.1);
            r.error(line, format!("`init.center` needs 2 coordinates, got {}", center.len()));
        }
    }
    if let (Some(GraphConfig::Path { .. } | GraphConfig::Cycle { .. }), Some(InitConfig::Gaussian { center, .. })) =
        (&graph, &init)
    {
        if center.len() != 1 {
            let line = r.entries.get("init.center").map_or(0, |v| v.1);
            r.error(line, format!("`init.center` needs 1 coordinate, got {}", center.len()));
        }
    }
    if let (Some(ModelConfig::General { .. }), Some(GraphConfig::Path { .. } | GraphConfig::Cycle { .. })) =
        (&model, &graph)
    {
        let line = r.entries.get("model.kind").map_or(0, |v| v.1);
        r.error(line, "general drifts need a 2-d lattice".into());
    }
    let errors = r.finish();
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let name = name.expect("validated");
    let dir = dir.expect("validated").unwrap_or_else(|| format!("out/{name}"));
    Ok(ExperimentConfig {
        name,
        seed: seed.expect("validated"),
        graph: graph.expect("validated"),
        model: model.expect("validated"),
        init: init.expect("validated"),
        time: time.expect("validated"),
        output: OutputConfig {
            dir,
            sample_every: sample_every.expect("validated"),
            density_every: density_every.expect("validated"),
        },
        rate: RateConfig { restarts: restarts.expect("validated"), tail_fraction: tail_fraction.expect("validated") },
    })
}

fn name_of<T: PartialEq + Copy>(options: &'static [(&'static str, T)], value: T) -> &'static str {
    options.iter().find(|(_, v)| *v == value).map(|(n, _)| *n).expect("every variant is listed")
}

impl ExperimentConfig {
    /// Canonical text form; `parse_config(&cfg.to_text())` returns `cfg`.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("name = {}", self.name), format!("seed = {}", self.seed)];
        match &self.graph {
            GraphConfig::Path { a, b, n } | GraphConfig::Cycle { a, b, n } => {
                let kind = if matches!(self.graph, GraphConfig::Path { .. }) { "path" } else { "cycle" };
                lines.push(format!("graph.kind = {kind}"));
                lines.push(format!("graph.a = {a:?}"));
                lines.push(format!("graph.b = {b:?}"));
                lines.push(format!("graph.n = {n}"));
            }
            GraphConfig::Lattice2d { xlo, xhi, ylo, yhi, dx, boundary } => {
                lines.push("graph.kind = lattice_2d".into());
                lines.push(format!("graph.xlo = {xlo:?}"));
                lines.push(format!("graph.xhi = {xhi:?}"));
                lines.push(format!("graph.ylo = {ylo:?}"));
                lines.push(format!("graph.yhi = {yhi:?}"));
                lines.push(format!("graph.dx = {dx:?}"));
                lines.push(format!("graph.boundary = {}", name_of(BOUNDARIES, *boundary)));
            }
        }
        match &self.model {
            ModelConfig::Gradient { potential, interaction, beta } => {
                lines.push("model.kind = gradient".into());
                lines.push(format!("model.potential = {}", potential.name()));
                lines.push(format!("model.interaction = {}", interaction.name()));
                lines.push(format!("model.beta = {beta:?}"));
            }
            ModelConfig::General { drift, beta } => {
                lines.push("model.kind = general".into());
                match drift {
                    DriftConfig::VanDerPol { form } => {
                        lines.push("model.drift = van_der_pol".into());
                        lines.push(format!("model.form = {}", form.name()));
                    }
                    DriftConfig::Duffing { xi, omega, r } => {
                        lines.push("model.drift = duffing".into());
                        lines.push(format!("model.xi = {xi:?}"));
                        lines.push(format!("model.omega = {omega:?}"));
                        lines.push(format!("model.r = {r:?}"));
                    }
                }
                lines.push(format!("model.beta = {beta:?}"));
            }
        }
        match &self.init {
            InitConfig::Gaussian { center, variance } => {
                lines.push("init.kind = gaussian".into());
                let c: Vec<String> = center.iter().map(|x| format!("{x:?}")).collect();
                lines.push(format!("init.center = {}", c.join(", ")));
                lines.push(format!("init.variance = {variance:?}"));
            }
            InitConfig::Uniform => lines.push("init.kind = uniform".into()),
            InitConfig::Random => lines.push("init.kind = random".into()),
            InitConfig::Csv { path } => {
                lines.push("init.kind = csv".into());
                lines.push(format!("init.path = {path}"));
            }
        }
        match self.time.dt {
            DtConfig::Fixed(dt) => lines.push(format!("time.dt = {dt:?}")),
            DtConfig::Auto { safety } => {
                lines.push("time.dt = auto".into());
                lines.push(format!("time.safety = {safety:?}"));
            }
        }
        lines.push(format!("time.t_end = {:?}", self.time.t_end));
        match self.time.stop {
            StopConfig::Time => lines.push("time.stop = time".into()),
            StopConfig::DissipationBelow(eps) => {
                lines.push("time.stop = dissipation_below".into());
                lines.push(format!("time.tolerance = {eps:?}"));
            }
            StopConfig::ResidualBelow(eps) => {
                lines.push("time.stop = residual_below".into());
                lines.push(format!("time.tolerance = {eps:?}"));
            }
        }
        lines.push(format!("output.dir = {}", self.output.dir));
        lines.push(format!("output.sample_every = {}", self.output.sample_every));
        lines.push(format!("output.density_every = {}", self.output.density_every));
        lines.push(format!("rate.restarts = {}", self.rate.restarts));
        lines.push(format!("rate.tail_fraction = {:?}", self.rate.tail_fraction));
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
