//! Experiment configuration: a strict TOML schema validated in one pass
//! that reports every problem at once, each with a dotted path. Unknown
//! keys are errors — silent typos in experiment configs are the main
//! reproducibility hazard.

use fipa::aggregate::{AggregationRule, ServerConfig};
use fipa::federation::{LocalConfig, OptimizerKind, RoundConfig, Schedule, SketchSpec};
use fipa::model::Activation;
use std::fmt;
use toml::value::{Table, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Which task the experiment trains.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    Sine { frequency: u32 },
    GaussianMixture { mixture_seed: u64 },
    Poisson { dim: usize, beta_bc: f64 },
    Elliptic { kind: String, param: f64, beta_bc: f64 },
    Classification {
        n_classes: usize,
        n_per_class: usize,
        input_dim: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionConfig {
    Interval { proportions: Option<Vec<f64>> },
    Grid { rows: usize, cols: usize },
    DirichletLabels { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchSection {
    pub mode: String, // "subspace" | "dense_exact"
    pub rank: usize,
    pub oversample: usize,
    pub power_iters: usize,
    pub adaptive_energy: Option<f64>,
}

impl SketchSection {
    pub fn to_spec(&self) -> SketchSpec {
        if self.mode == "dense_exact" {
            SketchSpec::DenseExact {
                adaptive_energy: self.adaptive_energy,
            }
        } else {
            SketchSpec::Subspace {
                rank: self.rank,
                oversample: self.oversample,
                power_iters: self.power_iters,
                adaptive_energy: self.adaptive_energy,
            }
        }
    }
}

/// A fully validated, normalized experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub trainable: String, // "all" | "last_layer"
    pub clients: usize,
    pub partition: PartitionConfig,
    pub n_per_client: usize,
    pub n_boundary: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub prox_mu: f64,
    pub sketch: Option<SketchSection>,
    pub rule: AggregationRule,
    pub beta_reg: f64,
    pub gamma: f64,
    pub warmup_rounds: usize,
    pub total_rounds: usize,
    pub gn_enabled: bool,
    pub gn_gamma: f64,
    pub out_dir: String,
}

struct Ctx {
    errors: Vec<ConfigError>,
}

impl Ctx {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(ConfigError {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check_keys(&mut self, table: &Table, section: &str, known: &[&str]) {
        for key in table.keys() {
            if !known.contains(&key.as_str()) {
                let path = if section.is_empty() {
                    key.clone()
                } else {
                    format!("{section}.{key}")
                };
                self.err(path, "unknown key");
            }
        }
    }

    fn table<'t>(&mut self, root: &'t Table, name: &str) -> Option<&'t Table> {
        match root.get(name) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.err(name, "expected a table");
                None
            }
            None => None,
        }
    }

    fn required_table<'t>(&mut self, root: &'t Table, name: &str) -> Option<&'t Table> {
        if root.get(name).is_none() {
            self.err(name, "missing required section");
            return None;
        }
        self.table(root, name)
    }

    fn u64_or(&mut self, t: &Table, section: &str, key: &str, default: u64) -> u64 {
        match t.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                self.err(format!("{section}.{key}"), "expected a non-negative integer");
                default
            }
        }
    }

    fn usize_or(&mut self, t: &Table, section: &str, key: &str, default: usize) -> usize {
        self.u64_or(t, section, key, default as u64) as usize
    }

    fn f64_or(&mut self, t: &Table, section: &str, key: &str, default: f64) -> f64 {
        match t.get(key) {
            None => default,
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(_) => {
                self.err(format!("{section}.{key}"), "expected a number");
                default
            }
        }
    }

    fn str_or(&mut self, t: &Table, section: &str, key: &str, default: &str) -> String {
        match t.get(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.err(format!("{section}.{key}"), "expected a string");
                default.to_string()
            }
        }
    }

    fn bool_or(&mut self, t: &Table, section: &str, key: &str, default: bool) -> bool {
        match t.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.err(format!("{section}.{key}"), "expected a boolean");
                default
            }
        }
    }

    fn f64_array(&mut self, t: &Table, section: &str, key: &str) -> Option<Vec<f64>> {
        match t.get(key) {
            None => None,
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Float(f) => out.push(*f),
                        Value::Integer(n) => out.push(*n as f64),
                        _ => {
                            self.err(format!("{section}.{key}[{i}]"), "expected a number");
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(_) => {
                self.err(format!("{section}.{key}"), "expected an array of numbers");
                None
            }
        }
    }

    fn usize_array(&mut self, t: &Table, section: &str, key: &str) -> Option<Vec<usize>> {
        match t.get(key) {
            None => None,
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Integer(n) if *n > 0 => out.push(*n as usize),
                        _ => {
                            self.err(
                                format!("{section}.{key}[{i}]"),
                                "expected a positive integer",
                            );
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(_) => {
                self.err(format!("{section}.{key}"), "expected an array of integers");
                None
            }
        }
    }
}

/// Parse and validate; returns either the normalized config or every
/// error found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let root: Table = match text.parse::<Table>() {
        Ok(t) => t,
        Err(e) => {
            return Err(vec![ConfigError {
                path: "<document>".into(),
                message: format!("toml syntax: {e}"),
            }])
        }
    };
    let mut ctx = Ctx { errors: Vec::new() };

    ctx.check_keys(
        &root,
        "",
        &[
            "seed",
            "problem",
            "model",
            "federation",
            "sketch",
            "server",
            "schedule",
            "gn_reference",
            "output",
        ],
    );

    let seed = ctx.u64_or(&root, "", "seed", 0);

    // -------- problem --------
    let problem = if let Some(t) = ctx.required_table(&root, "problem") {
        let kind = ctx.str_or(t, "problem", "kind", "sine");
        let known: &[&str] = match kind.as_str() {
            "sine" => &["kind", "frequency"],
            "gaussian_mixture" => &["kind", "mixture_seed"],
            "poisson" => &["kind", "dim", "beta_bc"],
            "allen_cahn" | "bratu" | "fisher" | "reaction_diffusion" => {
                &["kind", "param", "beta_bc"]
            }
            "classification" => &["kind", "n_classes", "n_per_class", "input_dim", "spread"],
            _ => {
                ctx.err(
                    "problem.kind",
                    format!("unknown problem kind '{kind}'"),
                );
                &["kind"]
            }
        };
        ctx.check_keys(t, "problem", known);
        let p = match kind.as_str() {
            "sine" => {
                let frequency = ctx.u64_or(t, "problem", "frequency", 2) as u32;
                if frequency < 1 {
                    ctx.err("problem.frequency", "must be >= 1");
                }
                ProblemConfig::Sine { frequency }
            }
            "gaussian_mixture" => ProblemConfig::GaussianMixture {
                mixture_seed: ctx.u64_or(t, "problem", "mixture_seed", 0),
            },
            "poisson" => {
                let dim = ctx.usize_or(t, "problem", "dim", 1);
                if dim < 1 {
                    ctx.err("problem.dim", "must be >= 1");
                }
                let beta_bc = ctx.f64_or(t, "problem", "beta_bc", 100.0);
                if beta_bc <= 0.0 {
                    ctx.err("problem.beta_bc", "must be > 0");
                }
                ProblemConfig::Poisson { dim, beta_bc }
            }
            "allen_cahn" | "bratu" | "fisher" | "reaction_diffusion" => {
                let param = ctx.f64_or(t, "problem", "param", 1.0);
                let beta_bc = ctx.f64_or(t, "problem", "beta_bc", 100.0);
                if beta_bc <= 0.0 {
                    ctx.err("problem.beta_bc", "must be > 0");
                }
                ProblemConfig::Elliptic {
                    kind: kind.clone(),
                    param,
                    beta_bc,
                }
            }
            "classification" => {
                let n_classes = ctx.usize_or(t, "problem", "n_classes", 10);
                if n_classes < 2 {
                    ctx.err("problem.n_classes", "must be >= 2");
                }
                ProblemConfig::Classification {
                    n_classes,
                    n_per_class: ctx.usize_or(t, "problem", "n_per_class", 100),
                    input_dim: ctx.usize_or(t, "problem", "input_dim", 16),
                    spread: ctx.f64_or(t, "problem", "spread", 6.0),
                }
            }
            _ => ProblemConfig::Sine { frequency: 2 },
        };
        p
    } else {
        ProblemConfig::Sine { frequency: 2 }
    };

    // -------- model --------
    let (hidden, activation, trainable) = if let Some(t) = ctx.table(&root, "model") {
        ctx.check_keys(t, "model", &["hidden", "activation", "trainable"]);
        let hidden = ctx
            .usize_array(t, "model", "hidden")
            .unwrap_or_else(|| vec![32, 32]);
        let act_name = ctx.str_or(t, "model", "activation", "tanh");
        let activation = match act_name.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            other => {
                ctx.err("model.activation", format!("unknown activation '{other}'"));
                Activation::Tanh
            }
        };
        let trainable = ctx.str_or(t, "model", "trainable", "all");
        if trainable != "all" && trainable != "last_layer" {
            ctx.err("model.trainable", "expected 'all' or 'last_layer'");
        }
        (hidden, activation, trainable)
    } else {
        (vec![32, 32], Activation::Tanh, "all".to_string())
    };

    // -------- federation --------
    let fed_defaults = (
        2usize,
        PartitionConfig::Interval { proportions: None },
        1000usize,
        2usize,
        1.0f64,
        5usize,
        OptimizerKind::Adam,
        3e-3f64,
        64usize,
        0.0f64,
    );
    let (
        clients,
        partition,
        n_per_client,
        n_boundary,
        participation,
        local_epochs,
        optimizer,
        lr,
        batch_size,
        prox_mu,
    ) = if let Some(t) = ctx.table(&root, "federation") {
        ctx.check_keys(
            t,
            "federation",
            &[
                "clients",
                "partition",
                "proportions",
                "grid_rows",
                "grid_cols",
                "dirichlet_alpha",
                "n_per_client",
                "n_boundary",
                "participation",
                "local_epochs",
                "optimizer",
                "lr",
                "batch_size",
                "prox_mu",
            ],
        );
        let clients = ctx.usize_or(t, "federation", "clients", 2);
        if clients == 0 {
            ctx.err("federation.clients", "must be >= 1");
        }
        let part_name = ctx.str_or(t, "federation", "partition", "interval");
        let partition = match part_name.as_str() {
            "interval" => {
                let proportions = ctx.f64_array(t, "federation", "proportions");
                if let Some(p) = &proportions {
                    if p.len() != clients {
                        ctx.err(
                            "federation.proportions",
                            format!("{} entries for {clients} clients", p.len()),
                        );
                    }
                    if p.iter().any(|&v| v <= 0.0) {
                        ctx.err("federation.proportions", "entries must be > 0");
                    } else if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        ctx.err("federation.proportions", "must sum to 1");
                    }
                }
                PartitionConfig::Interval { proportions }
            }
            "grid" => {
                let rows = ctx.usize_or(t, "federation", "grid_rows", 3);
                let cols = ctx.usize_or(t, "federation", "grid_cols", 3);
                if rows * cols != clients {
                    ctx.err(
                        "federation.clients",
                        format!("grid {rows}x{cols} implies {} clients", rows * cols),
                    );
                }
                PartitionConfig::Grid { rows, cols }
            }
            "dirichlet_labels" => {
                let alpha = ctx.f64_or(t, "federation", "dirichlet_alpha", 0.1);
                if alpha <= 0.0 {
                    ctx.err("federation.dirichlet_alpha", "must be > 0");
                }
                PartitionConfig::DirichletLabels { alpha }
            }
            other => {
                ctx.err(
                    "federation.partition",
                    format!("unknown partition '{other}'"),
                );
                PartitionConfig::Interval { proportions: None }
            }
        };
        let participation = ctx.f64_or(t, "federation", "participation", 1.0);
        if !(participation > 0.0 && participation <= 1.0) {
            ctx.err("federation.participation", "must lie in (0, 1]");
        }
        let opt_name = ctx.str_or(t, "federation", "optimizer", "adam");
        let optimizer = match opt_name.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => {
                ctx.err("federation.optimizer", format!("unknown optimizer '{other}'"));
                OptimizerKind::Adam
            }
        };
        let lr = ctx.f64_or(t, "federation", "lr", 3e-3);
        if !(lr > 0.0) {
            ctx.err("federation.lr", "must be > 0");
        }
        let batch_size = ctx.usize_or(t, "federation", "batch_size", 64);
        if batch_size == 0 {
            ctx.err("federation.batch_size", "must be >= 1");
        }
        let prox_mu = ctx.f64_or(t, "federation", "prox_mu", 0.0);
        if prox_mu < 0.0 {
            ctx.err("federation.prox_mu", "must be >= 0");
        }
        (
            clients,
            partition,
            ctx.usize_or(t, "federation", "n_per_client", 1000),
            ctx.usize_or(t, "federation", "n_boundary", 2),
            participation,
            ctx.usize_or(t, "federation", "local_epochs", 5),
            optimizer,
            lr,
            batch_size,
            prox_mu,
        )
    } else {
        fed_defaults
    };

    // -------- sketch --------
    let sketch = if let Some(t) = ctx.table(&root, "sketch") {
        ctx.check_keys(
            t,
            "sketch",
            &["mode", "rank", "oversample", "power_iters", "adaptive_energy"],
        );
        let mode = ctx.str_or(t, "sketch", "mode", "subspace");
        if mode != "subspace" && mode != "dense_exact" {
            ctx.err("sketch.mode", "expected 'subspace' or 'dense_exact'");
        }
        let rank = ctx.usize_or(t, "sketch", "rank", 10);
        if rank == 0 {
            ctx.err("sketch.rank", "must be >= 1");
        }
        let power_iters = ctx.usize_or(t, "sketch", "power_iters", 4);
        if power_iters == 0 {
            ctx.err("sketch.power_iters", "must be >= 1");
        }
        let adaptive_energy = match t.get("adaptive_energy") {
            None => None,
            Some(_) => {
                let e = ctx.f64_or(t, "sketch", "adaptive_energy", 0.99);
                if !(e > 0.0 && e < 1.0) {
                    ctx.err("sketch.adaptive_energy", "must lie in (0, 1)");
                }
                Some(e)
            }
        };
        Some(SketchSection {
            mode,
            rank,
            oversample: ctx.usize_or(t, "sketch", "oversample", 5),
            power_iters,
            adaptive_energy,
        })
    } else {
        None
    };

    // -------- server --------
    let (rule, beta_reg, gamma) = if let Some(t) = ctx.table(&root, "server") {
        ctx.check_keys(t, "server", &["rule", "beta_reg", "gamma"]);
        let rule_name = ctx.str_or(t, "server", "rule", "fedavg");
        let rule = match rule_name.as_str() {
            "fedavg" => AggregationRule::FedAvg,
            "fipa_dense" => AggregationRule::FipaDense,
            "fipa_qr" => AggregationRule::FipaQr,
            other => {
                ctx.err("server.rule", format!("unknown rule '{other}'"));
                AggregationRule::FedAvg
            }
        };
        let beta_reg = ctx.f64_or(t, "server", "beta_reg", 0.0);
        if beta_reg < 0.0 {
            ctx.err("server.beta_reg", "must be >= 0");
        }
        if rule == AggregationRule::FipaQr && beta_reg <= 0.0 {
            ctx.err("server.beta_reg", "the QR rule needs beta_reg > 0");
        }
        let gamma = ctx.f64_or(t, "server", "gamma", 1.0);
        if !(gamma > 0.0) {
            ctx.err("server.gamma", "must be > 0");
        }
        (rule, beta_reg, gamma)
    } else {
        (AggregationRule::FedAvg, 0.0, 1.0)
    };
    if rule != AggregationRule::FedAvg && sketch.is_none() {
        ctx.err("sketch", "required when server.rule is not 'fedavg'");
    }

    // -------- schedule --------
    let (warmup_rounds, total_rounds) = if let Some(t) = ctx.required_table(&root, "schedule") {
        ctx.check_keys(t, "schedule", &["warmup_rounds", "total_rounds"]);
        let w = ctx.usize_or(t, "schedule", "warmup_rounds", 0);
        let k = ctx.usize_or(t, "schedule", "total_rounds", 1);
        if k == 0 {
            ctx.err("schedule.total_rounds", "must be >= 1");
        }
        if w > k {
            ctx.err("schedule.warmup_rounds", "exceeds total_rounds");
        }
        (w, k)
    } else {
        (0, 1)
    };

    // -------- gn_reference --------
    let (gn_enabled, gn_gamma) = if let Some(t) = ctx.table(&root, "gn_reference") {
        ctx.check_keys(t, "gn_reference", &["enabled", "gamma"]);
        let enabled = ctx.bool_or(t, "gn_reference", "enabled", true);
        let gamma = ctx.f64_or(t, "gn_reference", "gamma", 0.5);
        if !(gamma > 0.0 && gamma <= 1.0) {
            ctx.err("gn_reference.gamma", "must lie in (0, 1]");
        }
        if enabled && matches!(problem, ProblemConfig::Classification { .. }) {
            ctx.err(
                "gn_reference.enabled",
                "the Gauss-Newton reference needs a least-squares problem",
            );
        }
        (enabled, gamma)
    } else {
        (false, 0.5)
    };

    // -------- output --------
    let out_dir = if let Some(t) = ctx.table(&root, "output") {
        ctx.check_keys(t, "output", &["dir"]);
        ctx.str_or(t, "output", "dir", "out")
    } else {
        "out".to_string()
    };

    // cross-field checks
    if matches!(problem, ProblemConfig::Classification { .. })
        && !matches!(partition, PartitionConfig::DirichletLabels { .. })
    {
        ctx.err(
            "federation.partition",
            "classification needs the dirichlet_labels partition",
        );
    }
    if matches!(partition, PartitionConfig::DirichletLabels { .. })
        && !matches!(problem, ProblemConfig::Classification { .. })
    {
        ctx.err(
            "federation.partition",
            "dirichlet_labels needs a labeled classification problem",
        );
    }
    if matches!(partition, PartitionConfig::Grid { .. }) {
        let dim_ok = matches!(problem, ProblemConfig::GaussianMixture { .. })
            || matches!(problem, ProblemConfig::Poisson { dim: 2, .. });
        if !dim_ok {
            ctx.err("federation.partition", "grid needs a 2-dimensional domain");
        }
    }

    if !ctx.errors.is_empty() {
        return Err(ctx.errors);
    }
    Ok(ExperimentConfig {
        seed,
        problem,
        hidden,
        activation,
        trainable,
        clients,
        partition,
        n_per_client,
        n_boundary,
        participation,
        local_epochs,
        optimizer,
        lr,
        batch_size,
        prox_mu,
        sketch,
        rule,
        beta_reg,
        gamma,
        warmup_rounds,
        total_rounds,
        gn_enabled,
        gn_gamma,
        out_dir,
    })
}

fn fmt_f64_toml(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

impl ExperimentConfig {
    /// Normalized echo of every effective value; reparsing this text
    /// yields an identical config.
    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n\n[problem]\n", self.seed));
        match &self.problem {
            ProblemConfig::Sine { frequency } => {
                s.push_str(&format!("kind = \"sine\"\nfrequency = {frequency}\n"));
            }
            ProblemConfig::GaussianMixture { mixture_seed } => {
                s.push_str(&format!(
                    "kind = \"gaussian_mixture\"\nmixture_seed = {mixture_seed}\n"
                ));
            }
            ProblemConfig::Poisson { dim, beta_bc } => {
                s.push_str(&format!(
                    "kind = \"poisson\"\ndim = {dim}\nbeta_bc = {}\n",
                    fmt_f64_toml(*beta_bc)
                ));
            }
            ProblemConfig::Elliptic { kind, param, beta_bc } => {
                s.push_str(&format!(
                    "kind = \"{kind}\"\nparam = {}\nbeta_bc = {}\n",
                    fmt_f64_toml(*param),
                    fmt_f64_toml(*beta_bc)
                ));
            }
            ProblemConfig::Classification {
                n_classes,
                n_per_class,
                input_dim,
                spread,
            } => {
                s.push_str(&format!(
                    "kind = \"classification\"\nn_classes = {n_classes}\nn_per_class = {n_per_class}\ninput_dim = {input_dim}\nspread = {}\n",
                    fmt_f64_toml(*spread)
                ));
            }
        }
        s.push_str("\n[model]\n");
        s.push_str(&format!(
            "hidden = {:?}\nactivation = \"{}\"\ntrainable = \"{}\"\n",
            self.hidden,
            match self.activation {
                Activation::Tanh => "tanh",
                Activation::Relu => "relu",
                Activation::Identity => "identity",
            },
            self.trainable
        ));
        s.push_str("\n[federation]\n");
        s.push_str(&format!("clients = {}\n", self.clients));
        match &self.partition {
            PartitionConfig::Interval { proportions } => {
                s.push_str("partition = \"interval\"\n");
                if let Some(p) = proportions {
                    let list: Vec<String> = p.iter().map(|v| fmt_f64_toml(*v)).collect();
                    s.push_str(&format!("proportions = [{}]\n", list.join(", ")));
                }
            }
            PartitionConfig::Grid { rows, cols } => {
                s.push_str(&format!(
                    "partition = \"grid\"\ngrid_rows = {rows}\ngrid_cols = {cols}\n"
                ));
            }
            PartitionConfig::DirichletLabels { alpha } => {
                s.push_str(&format!(
                    "partition = \"dirichlet_labels\"\ndirichlet_alpha = {}\n",
                    fmt_f64_toml(*alpha)
                ));
            }
        }
        s.push_str(&format!(
            "n_per_client = {}\nn_boundary = {}\nparticipation = {}\nlocal_epochs = {}\noptimizer = \"{}\"\nlr = {}\nbatch_size = {}\nprox_mu = {}\n",
            self.n_per_client,
            self.n_boundary,
            fmt_f64_toml(self.participation),
            self.local_epochs,
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            },
            fmt_f64_toml(self.lr),
            self.batch_size,
            fmt_f64_toml(self.prox_mu)
        ));
        if let Some(sk) = &self.sketch {
            s.push_str("\n[sketch]\n");
            s.push_str(&format!(
                "mode = \"{}\"\nrank = {}\noversample = {}\npower_iters = {}\n",
                sk.mode, sk.rank, sk.oversample, sk.power_iters
            ));
            if let Some(e) = sk.adaptive_energy {
                s.push_str(&format!("adaptive_energy = {}\n", fmt_f64_toml(e)));
            }
        }
        s.push_str("\n[server]\n");
        s.push_str(&format!(
            "rule = \"{}\"\nbeta_reg = {}\ngamma = {}\n",
            match self.rule {
                AggregationRule::FedAvg => "fedavg",
                AggregationRule::FipaDense => "fipa_dense",
                AggregationRule::FipaQr => "fipa_qr",
            },
            fmt_f64_toml(self.beta_reg),
            fmt_f64_toml(self.gamma)
        ));
        s.push_str("\n[schedule]\n");
        s.push_str(&format!(
            "warmup_rounds = {}\ntotal_rounds = {}\n",
            self.warmup_rounds, self.total_rounds
        ));
        if self.gn_enabled {
            s.push_str("\n[gn_reference]\n");
            s.push_str(&format!(
                "enabled = true\ngamma = {}\n",
                fmt_f64_toml(self.gn_gamma)
            ));
        }
        s.push_str("\n[output]\n");
        s.push_str(&format!("dir = \"{}\"\n", self.out_dir));
        s
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            local: LocalConfig {
                epochs: self.local_epochs,
                optimizer: self.optimizer,
                lr: self.lr,
                batch_size: self.batch_size,
                prox_mu: self.prox_mu,
            },
            participation: self.participation,
            sketch: self.sketch.as_ref().map(|s| s.to_spec()),
            server: ServerConfig {
                rule: self.rule,
                beta_reg: self.beta_reg,
                gamma: self.gamma,
            },
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_rounds: self.warmup_rounds,
            total_rounds: self.total_rounds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[problem]
kind = "sine"
[schedule]
total_rounds = 3
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hidden, vec![32, 32]);
        assert_eq!(cfg.clients, 2);
        assert_eq!(cfg.total_rounds, 3);
        assert_eq!(cfg.rule, AggregationRule::FedAvg);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = parse_config(MINIMAL).unwrap();
        let echoed = cfg.to_toml_string();
        let cfg2 = parse_config(&echoed).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(echoed, cfg2.to_toml_string());
    }

    #[test]
    fn constraint_violations_carry_paths() {
        let bad = r#"
seed = 1
[problem]
kind = "sine"
[federation]
participation = 0.0
lr = -1.0
[schedule]
total_rounds = 5
warmup_rounds = 9
"#;
        let errs = parse_config(bad).unwrap_err();
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"federation.participation"));
        assert!(paths.contains(&"federation.lr"));
        assert!(paths.contains(&"schedule.warmup_rounds"));
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = r#"
seed = 1
typo_key = 3
[problem]
kind = "sine"
frequnecy = 2
[schedule]
total_rounds = 1
"#;
        let errs = parse_config(bad).unwrap_err();
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"typo_key"));
        assert!(paths.contains(&"problem.frequnecy"));
    }

    #[test]
    fn qr_rule_requires_beta_and_sketch() {
        let bad = r#"
seed = 1
[problem]
kind = "sine"
[server]
rule = "fipa_qr"
beta_reg = 0.0
[schedule]
total_rounds = 1
"#;
        let errs = parse_config(bad).unwrap_err();
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"server.beta_reg"));
        assert!(paths.contains(&"sketch"));
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
seed = 42
[problem]
kind = "poisson"
dim = 2
beta_bc = 50.0
[model]
hidden = [16, 16]
activation = "tanh"
[federation]
clients = 2
partition = "interval"
n_per_client = 128
n_boundary = 32
local_epochs = 3
[sketch]
rank = 8
adaptive_energy = 0.99
[server]
rule = "fipa_qr"
beta_reg = 1e-6
gamma = 1.0
[schedule]
warmup_rounds = 5
total_rounds = 10
[gn_reference]
enabled = true
gamma = 0.5
[output]
dir = "poisson-out"
"#;
        let cfg = parse_config(text).unwrap();
        let cfg2 = parse_config(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, cfg2);
    }
}
