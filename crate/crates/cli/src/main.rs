use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use updown_core::bayes::{CrmModel, CrmRule, OppositeRule, QuadConfig};
use updown_core::chain_analytics::{build_tpm, design_eigenvalue, stationary_profile, trials_to_convergence};
use updown_core::dist::registry::{builtin, find};
use updown_core::engine::{BudKind, CcdConfig, CrmConfig};
use updown_core::estimators::{estimate, estimate_table, CiOption};
use updown_core::simlab::{run_ensemble, RunEstimator, Scenario};
use updown_core::{
    BoundaryPolicy, ChainData, DesignRule, EstimateOptions, EstimateWithCI, EstimatorKind, Policy, Response,
    ResponseTable,
};

#[derive(Parser)]
#[command(name = "updown", version, about = "Up-and-Down design workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary profile, mode and convergence of a rule on given F values.
    Analyze {
        /// Design rule, e.g. `SUD`, `BCD(0.3)`, `KR(2)`, `GUD(3,0,2)`.
        #[arg(long)]
        rule: String,
        /// Comma-separated response probabilities, one per level.
        #[arg(long, value_delimiter = ',', conflicts_with = "scenario")]
        f: Option<Vec<f64>>,
        /// Registry scenario supplying the levels and F values.
        #[arg(long)]
        scenario: Option<String>,
        /// Starting level for the convergence count.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Point and interval estimates from recorded data.
    Estimate {
        /// `level,yes,no` table, `treatment,response` history CSV, or a
        /// session export (JSON).
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "cir")]
        estimator: Vec<String>,
        /// Target percentile; defaults to the rule's target.
        #[arg(long)]
        target: Option<f64>,
        /// Rule that generated the data (sets the default target and the
        /// `gw` rate model).
        #[arg(long)]
        rule: Option<String>,
        #[arg(long, default_value = "poisson")]
        ci: String,
        /// Interval percentiles; overrides `--conf`.
        #[arg(long, value_delimiter = ',')]
        percentiles: Option<Vec<f64>>,
        /// Two-sided confidence level.
        #[arg(long, default_value_t = 0.95)]
        conf: f64,
        /// `lo,hi` range for isotonic boundary anchors; defaults to the
        /// design grid or the observed level range.
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<f64>>,
        #[arg(long)]
        json: bool,
    },
    /// Seeded ensemble simulation on a registry scenario.
    Simulate {
        #[arg(long)]
        scenario: String,
        /// A rule label, or `crm`, `ccd`, `cbud:RULE`, `rbud:RULE`, `ccdbud:RULE`.
        #[arg(long)]
        policy: String,
        /// Target for model-based policies without a rule.
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "cir,ir,ad")]
        estimators: Vec<String>,
        #[arg(long, default_value_t = 40)]
        n: usize,
        /// Number of runs.
        #[arg(long = "N", visible_alias = "runs", default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Write the metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    Scenarios {
        #[arg(long, default_value = "")]
        prefix: String,
    },
    /// Run the trial service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "updown-data")]
        data_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Analyze {
            rule,
            f,
            scenario,
            start,
        } => emit(&analyze(&rule, f, scenario, start)?)?,
        Command::Estimate {
            input,
            estimator,
            target,
            rule,
            ci,
            percentiles,
            conf,
            bounds,
            json,
        } => {
            let rule = rule.map(|r| r.parse::<DesignRule>()).transpose()?;
            let data = load(&input)?;
            let target = target
                .or(data.target)
                .or(rule.map(|r| r.target()))
                .ok_or_else(|| anyhow!("--target is required unless --rule is given"))?;
            let mut opts = EstimateOptions::new(target);
            opts.ci = CiOption::parse(&ci).ok_or_else(|| anyhow!("unknown interval method `{ci}`"))?;
            opts.percentiles = match percentiles {
                Some(p) => p,
                None => {
                    if !(conf > 0.0 && conf < 1.0) {
                        bail!("--conf must lie in (0, 1)");
                    }
                    vec![(1.0 - conf) / 2.0, (1.0 + conf) / 2.0]
                }
            };
            opts.x_bounds = Some(match bounds.as_deref() {
                Some([lo, hi]) => (*lo, *hi),
                Some(_) => bail!("--bounds takes two values"),
                None => data.bounds,
            });
            let rule = rule.or(data.rule);
            let mut rows = Vec::new();
            for name in &estimator {
                let kind = EstimatorKind::parse(name.trim(), rule).ok_or_else(|| anyhow!("unknown estimator `{name}`"))?;
                rows.push((kind.label(), run_estimator(&kind, &data, &opts)));
            }
            if json {
                let v: Vec<_> = rows
                    .iter()
                    .map(|(name, r)| match r {
                        Ok(e) => serde_json::json!({"estimator": name, "result": e}),
                        Err(e) => serde_json::json!({"estimator": name, "error": e.to_string()}),
                    })
                    .collect();
                emit(&(serde_json::to_string_pretty(&v)? + "\n"))?;
            } else {
                emit(&estimate_report(target, &opts, &rows))?;
            }
        }
        Command::Simulate {
            scenario,
            policy,
            target,
            estimators,
            n,
            runs,
            seed,
            start,
            out,
        } => {
            let specs = builtin();
            let spec = find(&specs, &scenario).ok_or_else(|| anyhow!("unknown scenario `{scenario}`"))?;
            let policy = parse_policy(&policy, target, &spec.levels())?;
            let rule = match &policy {
                Policy::UpDown { rule } | Policy::Bud { rule, .. } => Some(*rule),
                _ => None,
            };
            let ests = estimators
                .iter()
                .map(|e| RunEstimator::parse(e.trim(), rule).ok_or_else(|| anyhow!("unknown estimator `{e}`")))
                .collect::<Result<Vec<_>>>()?;
            let sc = Scenario::from_spec(spec, policy, n, start, runs, seed)?;
            let m = run_ensemble(&sc, &ests)?;
            let mut s = String::new();
            writeln!(s, "scenario {}  policy {}  n {}  runs {}", m.scenario, m.policy, m.n, m.runs)?;
            writeln!(s, "target {:.4}  true quantile {:.4}  optimal level {}", m.target, m.truth, m.optimal_level)?;
            writeln!(s, "{:<12} {:>6} {:>10} {:>10} {:>10}", "estimator", "ok", "bias", "sd", "mse")?;
            for e in &m.estimators {
                writeln!(s, "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.5}", e.name, e.n_ok, e.bias, e.sd, e.mse)?;
            }
            let freq: Vec<String> = m.level_freq.iter().map(|f| format!("{f:.3}")).collect();
            writeln!(s, "level frequencies {}", freq.join(" "))?;
            writeln!(
                s,
                "gambling (first {} trials) correct {:.3} wrong {:.3}",
                m.gambling.trials, m.gambling.correct, m.gambling.wrong
            )?;
            emit(&s)?;
            if let Some(path) = out {
                std::fs::write(&path, m.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Scenarios { prefix } => {
            let mut out = String::new();
            for s in builtin().into_iter().filter(|s| s.name.starts_with(&prefix)) {
                writeln!(out, "{:<32} m={:<3} levels {:.4}..{:.4}", s.name, s.m, s.first, s.last)?;
            }
            emit(&out)?;
        }
        Command::Serve { port, host, data_dir } => {
            let addr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("serving on http://{addr}, data in {}", data_dir.display());
            rt.block_on(updown_service::serve(addr, data_dir))?;
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn analyze(rule: &str, f: Option<Vec<f64>>, scenario: Option<String>, start: usize) -> Result<String> {
    let rule: DesignRule = rule.parse()?;
    let (levels, f) = match (f, scenario) {
        (Some(f), None) => ((1..=f.len()).map(|i| i as f64).collect::<Vec<_>>(), f),
        (None, Some(name)) => {
            let specs = builtin();
            let s = find(&specs, &name).ok_or_else(|| anyhow!("unknown scenario `{name}`"))?;
            (s.levels(), s.f_values())
        }
        _ => bail!("give exactly one of --f and --scenario"),
    };
    if start >= f.len() {
        bail!("--start must be below {}", f.len());
    }
    let prof = stationary_profile(&rule, &f)?;
    let tpm = build_tpm(&rule, &f, BoundaryPolicy::Reflecting)?;
    let mut s = String::new();
    writeln!(s, "rule {}  target {:.5}", rule.label(), rule.target())?;
    writeln!(s, "{:>8} {:>8} {:>9}", "level", "F", "pi")?;
    for u in 0..f.len() {
        writeln!(s, "{:>8} {:>8.4} {:>9.5}", levels[u], f[u], prof.pi[u])?;
    }
    let modes: Vec<String> = prof.mode.iter().map(|&u| levels[u].to_string()).collect();
    writeln!(s, "mode {}  mean {:.4}  sd {:.4}", modes.join(","), prof.mean_on(&levels), prof.sd_on(&levels))?;
    match trials_to_convergence(&tpm, &tpm.point_mass(start), 0.99) {
        Ok(c) => writeln!(s, "trials to 99% convergence from level {}: {c}", levels[start])?,
        Err(e) => writeln!(s, "trials to 99% convergence: {e}")?,
    }
    if let Ok(l) = design_eigenvalue(&rule, &f) {
        writeln!(s, "second eigenvalue {l:.4}")?;
    }
    Ok(s)
}

/// Data read from an input file.
struct Input {
    chain: Option<ChainData>,
    table: ResponseTable,
    bounds: (f64, f64),
    target: Option<f64>,
    rule: Option<DesignRule>,
}

fn load(path: &PathBuf) -> Result<Input> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let doc: updown_service::ExportDoc = serde_json::from_str(&text).context("parsing session export")?;
        let (lo, hi) = (doc.config.levels[0], *doc.config.levels.last().unwrap_or(&doc.config.levels[0]));
        let target = doc.config.policy.target();
        let rule = match &doc.config.policy {
            Policy::UpDown { rule } | Policy::Bud { rule, .. } => Some(*rule),
            _ => None,
        };
        let session = updown_service::Session::from_export(doc).map_err(|e| anyhow!("{e}"))?;
        let grid = session.engine().grid();
        let trials = session.engine().trials();
        let chain = ChainData::new(
            trials.iter().map(|t| grid.value(t.level as i64)).collect(),
            trials.iter().map(|t| t.response).collect(),
        )?;
        let table = chain.table()?;
        return Ok(Input {
            chain: Some(chain),
            table,
            bounds: (lo, hi),
            target: Some(target),
            rule,
        });
    }
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = rd.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h.as_str()));
    if let (Some(_), Some(_), Some(_)) = (col(&["level"]), col(&["yes"]), col(&["no"])) {
        let table = ResponseTable::read_csv(text.as_bytes())?;
        let bounds = span(&table.levels)?;
        return Ok(Input {
            chain: None,
            table,
            bounds,
            target: None,
            rule: None,
        });
    }
    let x_col = col(&["treatment", "x", "level", "dose"])
        .ok_or_else(|| anyhow!("history needs a treatment column (treatment, x, level or dose)"))?;
    let r_col = col(&["response", "y"]).ok_or_else(|| anyhow!("history needs a response column"))?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let xv: f64 = rec[x_col].trim().parse().with_context(|| format!("line {line}: bad treatment"))?;
        let yv = Response::parse(&rec[r_col]).ok_or_else(|| anyhow!("line {line}: bad response `{}`", &rec[r_col]))?;
        x.push(xv);
        y.push(yv);
    }
    let bounds = span(&x)?;
    let chain = ChainData::new(x, y)?;
    let table = chain.table()?;
    Ok(Input {
        chain: Some(chain),
        table,
        bounds,
        target: None,
        rule: None,
    })
}

fn span(v: &[f64]) -> Result<(f64, f64)> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        Ok((lo, hi))
    } else {
        bail!("no data rows")
    }
}

fn run_estimator(kind: &EstimatorKind, data: &Input, opts: &EstimateOptions) -> Result<EstimateWithCI> {
    match (kind, &data.chain) {
        (EstimatorKind::Averaging(_), Some(c)) => Ok(estimate(kind, c, opts)?),
        (EstimatorKind::Averaging(_), None) => bail!("averaging estimators need a treatment history, not a table"),
        _ => Ok(estimate_table(kind, &data.table, opts)?),
    }
}

fn estimate_report(target: f64, opts: &EstimateOptions, rows: &[(String, Result<EstimateWithCI>)]) -> String {
    let mut s = String::new();
    let pct: Vec<String> = opts.percentiles.iter().map(|p| format!("{:.6}", p).trim_end_matches('0').to_string()).collect();
    let _ = writeln!(s, "target {target}  interval percentiles {}", pct.join(","));
    for (name, r) in rows {
        let _ = match r {
            Ok(e) => {
                let bounds: Vec<String> = e.bounds.iter().map(|b| format!("{b:.4}")).collect();
                let mut line = format!("{name:<10} {:.4}", e.point);
                if !bounds.is_empty() {
                    line += &format!("  [{}]", bounds.join(", "));
                }
                if let Some(w) = &e.warning {
                    line += &format!("  ({w})");
                }
                writeln!(s, "{line}")
            }
            Err(e) => writeln!(s, "{name:<10} error: {e}"),
        };
    }
    s
}

fn parse_policy(text: &str, target: Option<f64>, levels: &[f64]) -> Result<Policy> {
    let t = text.trim();
    let (head, rest) = match t.split_once(':') {
        Some((h, r)) => (h.trim().to_ascii_lowercase(), Some(r.trim())),
        None => (t.to_ascii_lowercase(), None),
    };
    let rule = rest.map(|r| r.parse::<DesignRule>()).transpose()?;
    let need_target = |fallback: Option<f64>| {
        target
            .or(fallback)
            .ok_or_else(|| anyhow!("policy `{text}` needs --target"))
    };
    let crm = |p: f64, rule: CrmRule| -> Result<CrmConfig> {
        Ok(CrmConfig {
            model: CrmModel::power_default(levels.to_vec(), p)?,
            rule,
            constrained: false,
            target: p,
            quad: QuadConfig::default(),
        })
    };
    Ok(match (head.as_str(), rule) {
        ("crm", None) => Policy::Crm(crm(need_target(None)?, CrmRule::ClosestResponse)?),
        ("ccd", None) => Policy::Ccd(CcdConfig::new(need_target(None)?)),
        ("cbud", Some(rule)) => Policy::Bud {
            rule,
            bud: BudKind::CBud {
                crm: crm(need_target(Some(rule.target()))?, CrmRule::ClosestTreatment)?,
                beta: (0.1, 0.1),
                opposite: OppositeRule::A,
                burn_in: 0,
            },
        },
        ("rbud", Some(rule)) => Policy::Bud {
            rule,
            bud: BudKind::RBud {
                crm: crm(need_target(Some(rule.target()))?, CrmRule::ClosestTreatment)?,
                n0: 20.0,
            },
        },
        ("ccdbud", Some(rule)) => Policy::Bud {
            rule,
            bud: BudKind::CcdBud {
                ccd: CcdConfig::new(need_target(Some(rule.target()))?),
                beta: 0.1,
                opposite: OppositeRule::A,
            },
        },
        (_, None) => Policy::UpDown { rule: t.parse()? },
        _ => bail!("unrecognized policy `{text}`"),
    })
}
