//! Experiment configuration, file formats and the stage drivers behind the
//! `fracpole` binary.
//!
//! Stages communicate through files in one output directory:
//!
//! | stage   | reads                              | writes                                   |
//! |---------|------------------------------------|------------------------------------------|
//! | synth   | config                             | modes.csv, g.csv, z.csv, truth.json      |
//! | forward | config, modes.csv, g.csv, z.csv    | trace.csv, forward.json                  |
//! | poles   | config, trace.csv                  | poles.json                               |
//! | invert  | config, trace.csv, modes.csv, z.csv| invert.json (g.csv only for scoring)     |
//! | verify  | config, modes.csv, g.csv, z.csv    | verify.json                              |

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::forward::{solve, InitialData, ProblemSpec, Profile, SourceSpec, Term, TimeGrid, TimeTrace};
use crate::inversion::{invert_full, recover_alpha, recover_mu, AlphaEstimate, InvertOptions, Known, RecoveredModel, Regularization};
use crate::laplace::{find_poles_data, reduce_data, PencilFit};
use crate::spectrum::{eigen_interval, eigen_rectangle, observation_weights, DomainSpec, Observation, Spectrum};
use crate::verifier::{full_report, Bounds, HypothesisReport};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub a: f64,
    pub alpha: f64,
    pub terms: Vec<Term>,
    pub domain: DomainSpec,
    #[serde(rename = "T_seconds")]
    pub t_src: f64,
    #[serde(rename = "T_obs_seconds")]
    pub t_obs: f64,
}

impl ProblemConfig {
    pub fn spec(&self) -> ProblemSpec {
        ProblemSpec {
            a: self.a,
            alpha: self.alpha,
            terms: self.terms.clone(),
            domain: self.domain,
            t_src: self.t_src,
            t_obs: self.t_obs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    #[default]
    Zero,
    /// Coefficients for the first modes; missing ones are zero.
    Inline { phi: Vec<f64>, psi: Vec<f64> },
    /// φₖ = phi/kᵖ, ψₖ = psi/kᵖ for the first `modes` modes (k from 1).
    Decay { phi: f64, psi: f64, power: f64, modes: usize },
}

/// g as a named profile or a two-column file t,g.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GConfig {
    File { file: PathBuf },
    Closed(Profile),
}

impl Default for GConfig {
    fn default() -> Self {
        GConfig::Closed(Profile::Zero)
    }
}

/// zₖ = scale·kᵖᵒʷᵉʳ·profile(t) for k = 1..=modes, or columns t,z_1,z_2,... of a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZConfig {
    File {
        file: PathBuf,
    },
    Rule {
        profile: Profile,
        modes: usize,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        power: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub n: u32,
    #[serde(default)]
    pub g: GConfig,
    #[serde(default)]
    pub f: Vec<f64>,
    #[serde(default)]
    pub z: Option<ZConfig>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            n: 2,
            g: GConfig::default(),
            f: Vec::new(),
            z: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub alpha_abs: f64,
    pub beta_abs: f64,
    pub b_over_a_rel: f64,
    pub a_rel: f64,
    pub g_rel_l2: f64,
    /// Largest tail contribution of the retained modes before the forward
    /// stage warns about truncation.
    pub truncation_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            alpha_abs: 1e-3,
            beta_abs: 1e-2,
            b_over_a_rel: 1e-2,
            a_rel: 5e-2,
            g_rel_l2: 5e-2,
            truncation_rel: 1e-6,
        }
    }
}

impl Tolerances {
    /// Applies one KEY=VAL override.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let path = format!("--tol-override {spec}");
        let (key, val) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(&path, "expected KEY=VAL"))?;
        let v: f64 = val
            .trim()
            .parse()
            .map_err(|_| Error::config(&path, format!("`{val}` is not a number")))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config(&path, "tolerances must be finite and non-negative"));
        }
        let slot = match key.trim() {
            "alpha_abs" => &mut self.alpha_abs,
            "beta_abs" => &mut self.beta_abs,
            "b_over_a_rel" => &mut self.b_over_a_rel,
            "a_rel" => &mut self.a_rel,
            "g_rel_l2" => &mut self.g_rel_l2,
            "truncation_rel" => &mut self.truncation_rel,
            other => return Err(Error::config(&path, format!("unknown tolerance `{other}`"))),
        };
        *slot = v;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub dt_seconds: f64,
    #[serde(rename = "K_max")]
    pub k_max: usize,
    /// Groups whose rates the inversion fits individually.
    #[serde(rename = "L_max")]
    pub l_max: usize,
    pub max_terms: usize,
    /// Gaussian trace noise with σ = noise_relative·max|h|.
    pub noise_relative: f64,
    pub regularization: Regularization,
    pub decomposition_tol: f64,
    pub tolerances: Tolerances,
}

impl Default for Numerics {
    fn default() -> Self {
        let inv = InvertOptions::default();
        Numerics {
            dt_seconds: 0.01,
            k_max: 200,
            l_max: inv.max_groups,
            max_terms: inv.max_terms,
            noise_relative: 0.0,
            regularization: inv.regularization,
            decomposition_tol: inv.decomposition_tol,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub source: SourceConfig,
    pub observation: Observation,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub seed: u64,
}

pub const BUILTIN_PREFIX: &str = "builtin:";

impl ExperimentConfig {
    /// Built-in fixtures: `two-term` and `zero-source`.
    pub fn builtin(name: &str) -> Result<Self> {
        let two_term = ExperimentConfig {
            problem: ProblemConfig {
                a: 0.7,
                alpha: 1.4,
                terms: vec![Term { b: 1.0, beta: 0.8 }, Term { b: 0.5, beta: 0.3 }],
                domain: DomainSpec::Interval { x1: 1.0 },
                t_src: 1.0,
                t_obs: 2.0,
            },
            initial: InitialConfig::Zero,
            source: SourceConfig {
                n: 2,
                g: GConfig::Closed(Profile::Poly { p: 2, q: 2 }),
                f: vec![1.0, 0.5, 0.25],
                z: Some(ZConfig::Rule {
                    profile: Profile::Poly { p: 6, q: 1 },
                    modes: 12,
                    scale: 1.0,
                    power: 2.0,
                }),
            },
            observation: Observation::Point { x0: vec![0.37] },
            numerics: Numerics::default(),
            seed: 7,
        };
        match name {
            "two-term" => Ok(two_term),
            "zero-source" => Ok(ExperimentConfig {
                source: SourceConfig::default(),
                ..two_term
            }),
            other => Err(Error::config("--config", format!("no built-in fixture `{other}`"))),
        }
    }

    /// Reads a JSON config (or `builtin:NAME`); relative file references are
    /// resolved against the config's directory.
    pub fn load(path: &str) -> Result<Self> {
        if let Some(name) = path.strip_prefix(BUILTIN_PREFIX) {
            return Self::builtin(name);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::config(path, e.to_string()))?;
        Self::from_json(&text, Path::new(path).parent().unwrap_or(Path::new(".")))
    }

    /// Parses and validates a JSON config; file references are taken
    /// relative to `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            Error::config(at, e.into_inner().to_string())
        })?;
        if let GConfig::File { file } = &mut cfg.source.g {
            *file = base.join(&*file);
        }
        if let Some(ZConfig::File { file }) = &mut cfg.source.z {
            *file = base.join(&*file);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        if !(p.a > 0.0 && p.a.is_finite()) {
            return bad("problem.a", format!("must be positive, got {}", p.a));
        }
        if !(p.alpha > 1.0 && p.alpha < 2.0) {
            return bad("problem.alpha", format!("must lie in (1, 2), got {}", p.alpha));
        }
        if p.terms.is_empty() {
            return bad("problem.terms", "needs at least one term".into());
        }
        for (j, t) in p.terms.iter().enumerate() {
            if !(t.b > 0.0 && t.b.is_finite()) {
                return bad(&format!("problem.terms[{j}].b"), format!("must be positive, got {}", t.b));
            }
            if !(t.beta > 0.0 && t.beta <= 1.0) {
                return bad(&format!("problem.terms[{j}].beta"), format!("must lie in (0, 1], got {}", t.beta));
            }
            if j > 0 && t.beta >= p.terms[j - 1].beta {
                return bad(&format!("problem.terms[{j}].beta"), "exponents must decrease strictly".into());
            }
        }
        p.domain
            .validate()
            .map_err(|e| Error::config("problem.domain", e.to_string()))?;
        if !(p.t_src > 0.0 && p.t_src.is_finite()) {
            return bad("problem.T_seconds", format!("must be positive, got {}", p.t_src));
        }
        if !(p.t_obs > p.t_src && p.t_obs.is_finite()) {
            return bad("problem.T_obs_seconds", format!("must exceed T_seconds, got {}", p.t_obs));
        }
        let n = &self.numerics;
        if !(n.dt_seconds > 0.0 && n.dt_seconds < p.t_src) {
            return bad("numerics.dt_seconds", format!("must lie in (0, T), got {}", n.dt_seconds));
        }
        if n.k_max == 0 {
            return bad("numerics.K_max", "must be at least 1".into());
        }
        if n.l_max < 2 {
            return bad("numerics.L_max", "must be at least 2".into());
        }
        if n.max_terms == 0 {
            return bad("numerics.max_terms", "must be at least 1".into());
        }
        if !(n.noise_relative >= 0.0 && n.noise_relative.is_finite()) {
            return bad("numerics.noise_relative", "must be finite and non-negative".into());
        }
        if self.source.n == 0 {
            return bad("source.n", "must be at least 1".into());
        }
        if self.source.f.iter().any(|v| !v.is_finite()) {
            return bad("source.f", "entries must be finite".into());
        }
        if let GConfig::File { file } = &self.source.g {
            if !file.is_file() {
                return bad("source.g.file", format!("{} does not exist", file.display()));
            }
        }
        if let Some(ZConfig::File { file }) = &self.source.z {
            if !file.is_file() {
                return bad("source.z.file", format!("{} does not exist", file.display()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::for_problem(&self.problem.spec(), self.numerics.dt_seconds)
    }

    pub fn spectrum(&self) -> Result<Spectrum> {
        match self.problem.domain {
            DomainSpec::Interval { x1 } => eigen_interval(x1, self.numerics.k_max),
            DomainSpec::Rectangle { x1, x2 } => eigen_rectangle(x1, x2, self.numerics.k_max),
        }
    }

    pub fn invert_options(&self) -> InvertOptions {
        InvertOptions {
            max_groups: self.numerics.l_max,
            max_terms: self.numerics.max_terms,
            decomposition_tol: self.numerics.decomposition_tol,
            regularization: self.numerics.regularization,
            ..InvertOptions::default()
        }
    }
}

/// A CSV file with `# key = value` metadata lines, one header row and
/// numeric columns written with 17 significant digits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Table {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_f64(&self, key: &str, path: &Path) -> Result<f64> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::config(path.display().to_string(), format!("missing metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::config(path.display().to_string(), format!("metadata `{key}` = `{raw}` is not a number")))
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.header.iter().position(|h| h == name).map(|i| self.columns[i].as_slice())
    }

    pub fn to_string(&self) -> Result<String> {
        let rows = self.columns.first().map_or(0, Vec::len);
        if self.columns.len() != self.header.len() || self.columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Sampling("ragged table".into()));
        }
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.header).map_err(io)?;
        for i in 0..rows {
            w.write_record(self.columns.iter().map(|c| fmt_f64(c[i]))).map_err(io)?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&body));
        Ok(out)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Table> {
        let bad = |msg: String| Error::config(origin.display().to_string(), msg);
        let mut meta = Vec::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| bad(format!("metadata line `{line}` is not `key = value`")))?;
            meta.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut columns = vec![Vec::new(); header.len()];
        for (r, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            for (c, field) in rec.iter().enumerate() {
                let v = field
                    .parse()
                    .map_err(|_| bad(format!("row {}, column {}: `{field}` is not a number", r + 1, header[c])))?;
                columns[c].push(v);
            }
        }
        Ok(Table { meta, header, columns })
    }

    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Table::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

pub fn trace_table(trace: &TimeTrace, cfg: &ExperimentConfig, noise_sigma: f64) -> Table {
    Table {
        meta: vec![
            ("dt".into(), fmt_f64(trace.dt)),
            ("T".into(), fmt_f64(cfg.problem.t_src)),
            ("T_obs".into(), fmt_f64(cfg.problem.t_obs)),
            ("K_max".into(), cfg.numerics.k_max.to_string()),
            ("noise_sigma".into(), fmt_f64(noise_sigma)),
            ("seed".into(), cfg.seed.to_string()),
        ],
        header: vec!["t".into(), "h".into()],
        columns: vec![trace.times(), trace.values.clone()],
    }
}

pub fn read_trace(path: &Path) -> Result<TimeTrace> {
    let t = Table::read(path)?;
    let dt = t.meta_f64("dt", path)?;
    let h = t
        .column("h")
        .ok_or_else(|| Error::config(path.display().to_string(), "no column `h`"))?;
    Ok(TimeTrace::new(dt, h.to_vec()))
}

/// Resolved per-mode data: everything synth writes.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub spectrum: Spectrum,
    pub gammas: Vec<f64>,
    pub initial: InitialData,
    pub source: SourceSpec,
}

fn sampled_file(file: &Path, grid: &TimeGrid) -> Result<Table> {
    let t = Table::read(file)?;
    let rows = t.columns.first().map_or(0, Vec::len);
    if rows != grid.n_src + 1 {
        return Err(Error::config(
            file.display().to_string(),
            format!("{rows} samples, the source grid needs {}", grid.n_src + 1),
        ));
    }
    Ok(t)
}

/// Column name of mode k (0-based) in z.csv.
fn z_name(k: usize) -> String {
    format!("z_{}", k + 1)
}

fn z_columns(t: &Table, modes: usize, origin: &Path) -> Result<Vec<Vec<f64>>> {
    let mut z = vec![Vec::new(); modes];
    for (name, col) in t.header.iter().zip(&t.columns).skip(1) {
        let k: usize = name
            .strip_prefix("z_")
            .and_then(|s| s.parse().ok())
            .filter(|k| (1..=modes).contains(k))
            .ok_or_else(|| Error::config(origin.display().to_string(), format!("column `{name}` is not z_1..z_{modes}")))?;
        z[k - 1] = col.clone();
    }
    Ok(z)
}

impl Fixture {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Fixture> {
        let grid = cfg.grid()?;
        let spectrum = cfg.spectrum()?;
        let kk = spectrum.len();
        let gammas = observation_weights(&cfg.observation, &spectrum)
            .map_err(|e| Error::config("observation", e.to_string()))?
            .gammas;
        let mut initial = InitialData::zeros(kk);
        match &cfg.initial {
            InitialConfig::Zero => {}
            InitialConfig::Inline { phi, psi } => {
                if phi.len() > kk || psi.len() > kk {
                    return Err(Error::config("initial", format!("more coefficients than K_max = {kk}")));
                }
                initial.phi[..phi.len()].copy_from_slice(phi);
                initial.psi[..psi.len()].copy_from_slice(psi);
            }
            InitialConfig::Decay { phi, psi, power, modes } => {
                for k in 0..(*modes).min(kk) {
                    let w = ((k + 1) as f64).powf(-power);
                    initial.phi[k] = phi * w;
                    initial.psi[k] = psi * w;
                }
            }
        }
        let g = match &cfg.source.g {
            GConfig::Closed(p) => p.sample(&grid),
            GConfig::File { file } => {
                let t = sampled_file(file, &grid)?;
                t.columns.get(1).cloned().ok_or_else(|| Error::config("source.g.file", "needs columns t,g"))?
            }
        };
        let mut f = vec![0.0; kk];
        if cfg.source.f.len() > kk {
            return Err(Error::config("source.f", format!("more coefficients than K_max = {kk}")));
        }
        f[..cfg.source.f.len()].copy_from_slice(&cfg.source.f);
        let z = match &cfg.source.z {
            None => vec![Vec::new(); kk],
            Some(ZConfig::Rule {
                profile,
                modes,
                scale,
                power,
            }) => {
                let base = profile.sample(&grid);
                (0..kk)
                    .map(|k| {
                        if k < *modes {
                            let c = scale * ((k + 1) as f64).powf(*power);
                            base.iter().map(|v| v * c).collect()
                        } else {
                            Vec::new()
                        }
                    })
                    .collect()
            }
            Some(ZConfig::File { file }) => z_columns(&sampled_file(file, &grid)?, kk, file)?,
        };
        Ok(Fixture {
            spectrum,
            gammas,
            initial,
            source: SourceSpec { g, f, z, n: cfg.source.n },
        })
    }

    pub fn write(&self, dir: &Path, grid: &TimeGrid) -> Result<()> {
        let kk = self.spectrum.len();
        Table {
            meta: vec![("K_max".into(), kk.to_string())],
            header: ["lambda", "gamma", "phi", "psi", "f"].map(String::from).to_vec(),
            columns: vec![
                self.spectrum.lambdas.clone(),
                self.gammas.clone(),
                self.initial.phi.clone(),
                self.initial.psi.clone(),
                self.source.f.clone(),
            ],
        }
        .write(&dir.join("modes.csv"))?;
        let t = grid.source_times();
        Table {
            meta: vec![("n".into(), self.source.n.to_string())],
            header: vec!["t".into(), "g".into()],
            columns: vec![t.clone(), self.source.g.clone()],
        }
        .write(&dir.join("g.csv"))?;
        let mut header = vec!["t".to_string()];
        let mut columns = vec![t];
        for (k, z) in self.source.z.iter().enumerate().filter(|(_, z)| !z.is_empty()) {
            header.push(z_name(k));
            columns.push(z.clone());
        }
        Table {
            meta: vec![("n".into(), self.source.n.to_string())],
            header,
            columns,
        }
        .write(&dir.join("z.csv"))
    }

    /// Reads what synth wrote; the spectrum and weights are rebuilt from the config.
    pub fn read(cfg: &ExperimentConfig, dir: &Path) -> Result<Fixture> {
        let grid = cfg.grid()?;
        let spectrum = cfg.spectrum()?;
        let kk = spectrum.len();
        let gammas = observation_weights(&cfg.observation, &spectrum)
            .map_err(|e| Error::config("observation", e.to_string()))?
            .gammas;
        let path = dir.join("modes.csv");
        let modes = Table::read(&path)?;
        let col = |name: &str| -> Result<Vec<f64>> {
            let c = modes
                .column(name)
                .ok_or_else(|| Error::config(path.display().to_string(), format!("no column `{name}`")))?;
            if c.len() != kk {
                return Err(Error::config(path.display().to_string(), format!("{} rows, K_max is {kk}", c.len())));
            }
            Ok(c.to_vec())
        };
        let initial = InitialData {
            phi: col("phi")?,
            psi: col("psi")?,
        };
        let f = col("f")?;
        let g_path = dir.join("g.csv");
        let g = sampled_file(&g_path, &grid)?
            .column("g")
            .ok_or_else(|| Error::config(g_path.display().to_string(), "no column `g`"))?
            .to_vec();
        let z_path = dir.join("z.csv");
        let z = z_columns(&sampled_file(&z_path, &grid)?, kk, &z_path)?;
        Ok(Fixture {
            spectrum,
            gammas,
            initial,
            source: SourceSpec { g, f, z, n: cfg.source.n },
        })
    }

    pub fn known(&self, cfg: &ExperimentConfig) -> Known {
        Known {
            spectrum: self.spectrum.clone(),
            gammas: self.gammas.clone(),
            initial: self.initial.clone(),
            f: self.source.f.clone(),
            z: self.source.z.clone(),
            n: self.source.n,
            t_src: cfg.problem.t_src,
        }
    }
}

/// Ground-truth record written by synth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub a: f64,
    pub alpha: f64,
    pub terms: Vec<Term>,
    pub b_over_a: Vec<f64>,
    pub n: u32,
    pub seed: u64,
}

impl Truth {
    pub fn of(cfg: &ExperimentConfig) -> Truth {
        let p = &cfg.problem;
        Truth {
            a: p.a,
            alpha: p.alpha,
            terms: p.terms.clone(),
            b_over_a: p.terms.iter().map(|t| t.b / p.a).collect(),
            n: cfg.source.n,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, value: f64, tolerance: f64) -> Check {
        Check {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

/// Recovered parameters scored against the config's true values.
pub fn score(model: &RecoveredModel, cfg: &ExperimentConfig, g_true: &[f64]) -> Vec<Check> {
    let tol = &cfg.numerics.tolerances;
    let p = &cfg.problem;
    let mut out = vec![Check::new("alpha_abs", (model.alpha_hat - p.alpha).abs(), tol.alpha_abs)];
    let m_ok = model.m_hat == p.terms.len();
    out.push(Check {
        name: "m".into(),
        value: model.m_hat as f64,
        tolerance: p.terms.len() as f64,
        pass: m_ok,
    });
    let (beta, ratio) = if m_ok {
        let beta = model
            .beta_hat
            .iter()
            .zip(&p.terms)
            .map(|(b, t)| (b - t.beta).abs())
            .fold(0.0, f64::max);
        let ratio = model
            .b_over_a_hat
            .iter()
            .zip(&p.terms)
            .map(|(r, t)| (r - t.b / p.a).abs() / (t.b / p.a))
            .fold(0.0, f64::max);
        (beta, ratio)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    out.push(Check::new("beta_abs", beta, tol.beta_abs));
    out.push(Check::new("b_over_a_rel", ratio, tol.b_over_a_rel));
    out.push(Check::new("a_rel", (model.a_hat - p.a).abs() / p.a, tol.a_rel));
    let norm: f64 = g_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err: f64 = g_true
        .iter()
        .zip(&model.g_hat)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let g_rel = if g_true.len() == model.g_hat.len() && norm > 0.0 {
        err / norm
    } else {
        f64::INFINITY
    };
    out.push(Check::new("g_rel_l2", g_rel, tol.g_rel_l2));
    out
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthReport {
    pub command: &'static str,
    pub timestamp_unix: u64,
    pub truth: Truth,
    pub modes: usize,
    pub nonzero_z_modes: usize,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForwardReport {
    pub command: &'static str,
    pub timestamp_unix: u64,
    pub samples: usize,
    pub max_abs_h: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub tail_estimate: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PolesReport {
    pub command: &'static str,
    pub timestamp_unix: u64,
    pub fit: PencilFit,
    pub alpha: Option<AlphaEstimate>,
    pub mu: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvertReport {
    pub command: &'static str,
    pub timestamp_unix: u64,
    pub model: RecoveredModel,
    pub checks: Vec<Check>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub command: &'static str,
    pub timestamp_unix: u64,
    pub bounds: Bounds,
    pub report: HypothesisReport,
    pub all_flags: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundtripReport {
    pub command: &'static str,
    pub timestamp_unix: u64,
    pub forward: ForwardReport,
    pub invert: InvertReport,
    pub verify_all_flags: bool,
    pub pass: bool,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthReport> {
    let fx = Fixture::from_config(cfg)?;
    fx.write(out, &cfg.grid()?)?;
    let truth = Truth::of(cfg);
    write_json(&out.join("truth.json"), &truth)?;
    Ok(SynthReport {
        command: "synth",
        timestamp_unix: timestamp(),
        truth,
        modes: fx.spectrum.len(),
        nonzero_z_modes: fx.source.z.iter().filter(|z| !z.is_empty()).count(),
        files: ["modes.csv", "g.csv", "z.csv", "truth.json"].map(String::from).to_vec(),
    })
}

/// Forward trace of a fixture with the configured noise, plus any
/// truncation warning.
pub fn simulate(cfg: &ExperimentConfig, fx: &Fixture) -> Result<(TimeTrace, ForwardReport)> {
    let grid = cfg.grid()?;
    let mut trace = solve(&cfg.problem.spec(), &fx.spectrum, &fx.gammas, &fx.initial, &fx.source, &grid)
        .map_err(|e| e.at_stage("forward"))?;
    let max_abs = trace.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = cfg.numerics.noise_relative * max_abs;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
        for v in &mut trace.values {
            *v += normal.sample(&mut rng);
        }
    }
    let mut warnings = Vec::new();
    if trace.tail_estimate > cfg.numerics.tolerances.truncation_rel {
        warnings.push(format!(
            "truncation: the last tenth of the {} modes contributes {:.2e} of max|h|",
            fx.spectrum.len(),
            trace.tail_estimate
        ));
    }
    let report = ForwardReport {
        command: "forward",
        timestamp_unix: timestamp(),
        samples: trace.values.len(),
        max_abs_h: max_abs,
        noise_sigma: sigma,
        seed: cfg.seed,
        tail_estimate: trace.tail_estimate,
        warnings,
    };
    Ok((trace, report))
}

/// Solves the forward problem for the fixture in `out` and writes trace.csv.
pub fn forward(cfg: &ExperimentConfig, out: &Path) -> Result<(TimeTrace, ForwardReport)> {
    let fx = Fixture::read(cfg, out)?;
    let (trace, report) = simulate(cfg, &fx)?;
    trace_table(&trace, cfg, report.noise_sigma).write(&out.join("trace.csv"))?;
    Ok((trace, report))
}

pub fn poles(cfg: &ExperimentConfig, out: &Path) -> Result<PolesReport> {
    let trace = read_trace(&out.join("trace.csv"))?;
    let opts = cfg.invert_options();
    let fit = find_poles_data(&trace, cfg.problem.t_src, cfg.numerics.l_max, opts.pencil).map_err(|e| e.at_stage("poles"))?;
    let mut warnings = Vec::new();
    let alpha = match recover_alpha(&fit.poles) {
        Ok(a) => Some(a),
        Err(e) => {
            warnings.push(format!("alpha from the data poles alone: {e}"));
            None
        }
    };
    let mu = alpha.as_ref().and_then(|a| match recover_mu(&fit.poles, a.alpha) {
        Ok(mu) => Some(mu),
        Err(e) => {
            warnings.push(format!("rates from the data poles alone: {e}"));
            None
        }
    });
    Ok(PolesReport {
        command: "poles",
        timestamp_unix: timestamp(),
        fit,
        alpha,
        mu,
        warnings,
    })
}

pub fn invert(cfg: &ExperimentConfig, out: &Path) -> Result<InvertReport> {
    let trace = read_trace(&out.join("trace.csv"))?;
    let fx = Fixture::read(cfg, out)?;
    invert_trace(cfg, &fx, &trace)
}

/// Inverts a trace using only the known parts of the fixture; the true
/// parameters and g serve for scoring.
pub fn invert_trace(cfg: &ExperimentConfig, fx: &Fixture, trace: &TimeTrace) -> Result<InvertReport> {
    let model = invert_full(trace, &fx.known(cfg), &cfg.invert_options())?;
    let checks = score(&model, cfg, &fx.source.g);
    let pass = checks.iter().all(|c| c.pass);
    Ok(InvertReport {
        command: "invert",
        timestamp_unix: timestamp(),
        model,
        checks,
        pass,
    })
}

pub fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<VerifyReport> {
    let fx = Fixture::read(cfg, out)?;
    let grid = cfg.grid()?;
    let ps = cfg.problem.spec();
    let stage = |e: Error| e.at_stage("verify");
    let rd = reduce_data(&fx.gammas, &fx.initial, &fx.source, &fx.spectrum, &grid).map_err(stage)?;
    let mus: Vec<f64> = (0..fx.spectrum.num_groups())
        .map(|l| crate::forward::rate(ps.a, &ps.terms, fx.spectrum.group_lambda(l)))
        .collect();
    let bounds = Bounds::for_problem(&ps);
    let report = full_report(
        &rd,
        &fx.gammas,
        &fx.initial,
        &fx.source,
        &grid,
        ps.alpha,
        ps.a,
        &mus,
        &bounds,
        fx.spectrum.group_lambda(0),
        1,
    )
    .map_err(stage)?;
    let all_flags = report.uni_i0_ok.iter().all(|b| *b)
        && report.z_vanish_ok.iter().all(|b| *b)
        && report.g_vanish_ok != Some(false)
        && report.smooth_vanish_ok
        && report.gkits_ok.iter().all(|g| *g != Some(false))
        && report
            .gkits_ok
            .iter()
            .zip(&report.nondegeneracy_ok)
            .all(|(g, nd)| g.is_none() || *nd);
    Ok(VerifyReport {
        command: "verify",
        timestamp_unix: timestamp(),
        bounds,
        report,
        all_flags,
    })
}

/// Exit statuses of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const STAGE: i32 = 3;
    pub const BREACH: i32 = 4;
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config { .. } | Error::Io(_) => exit::CONFIG,
        _ => exit::STAGE,
    }
}
