//! `treepot` command line.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use treepot::chain::{classify_transience, default_schedule, simulate_many, Caps, ChainModel, DEFAULT_TOL};
use treepot::fixtures::{load_family, load_matrix, Model};
use treepot::martin::{martin_irregular, martin_ratio, KernelMode, MartinContext};
use treepot::matrix::{finite_potential, harmonic_decomposition, hitting_matrices, inverse_residual};
use treepot::measure::{exit_measure, ray_regularity};
use treepot::process::{BoundaryKernel, Cascade, PathStatus, Start};
use treepot::stats::{ks_critical, ks_statistic, mean_sd};
use treepot::tree::{build_tree, parse_path, path_string, BoundaryRay, NodeId, RootedTree};
use treepot::ultra::{
    check_hypotheses, minimal_tree_extension, u_boundary, ultrametric_generator, verify_ultrametric,
};
use treepot::{report, Error, ErrorKind, Result, RootMode};

const MODULE: &str = "cli";

#[derive(Parser, Debug)]
#[command(name = "treepot", version, about = "Potential theory of tree and ultrametric matrices")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand. Defaults depend on the subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Tree spec (JSON) or word family (JSON); bare names are looked up in $TREEPOT_FIXTURES.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Ultrametric matrix (CSV, no header).
    #[arg(long, global = true)]
    matrix: Option<PathBuf>,
    /// Tree depth or level `n`.
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// Cylinder resolution.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Required by stochastic subcommands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Mode::Absorbed)]
    mode: Mode,
    /// Write the artifact here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Absorbed,
    Reflected,
}

impl From<Mode> for RootMode {
    fn from(m: Mode) -> RootMode {
        match m {
            Mode::Absorbed => RootMode::Absorbed,
            Mode::Reflected => RootMode::Reflected,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(subcommand)]
    Tree(TreeCmd),
    #[command(subcommand)]
    Chain(ChainCmd),
    #[command(subcommand)]
    Boundary(BoundaryCmd),
    #[command(subcommand)]
    Martin(MartinCmd),
    #[command(subcommand)]
    Ultra(UltraCmd),
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand, Debug)]
enum TreeCmd {
    /// Max |(-Q)U - I| over the realized nodes whose rows are complete.
    VerifyInverse,
    /// V⁽ⁿ⁾ on Iⁿ, n = --depth.
    Potential,
    /// H = U - V⁽ⁿ⁾, its rank, and the hitting matrices.
    HarmonicDecomp,
}

#[derive(Subcommand, Debug)]
enum ChainCmd {
    /// Escape counts per cylinder from Monte Carlo paths.
    Simulate {
        /// Start node path, dot-joined (root by default).
        #[arg(long, default_value = "")]
        start: String,
    },
    /// Transient, recurrent or undetermined.
    Classify,
}

#[derive(Subcommand, Debug)]
enum BoundaryCmd {
    /// μ(C) for every cylinder up to --resolution.
    ExitMeasure,
    /// p(t, ξ, η) and the Green identity.
    Kernel {
        #[arg(long)]
        xi: String,
        #[arg(long)]
        eta: String,
        /// Comma-separated times.
        #[arg(long, default_value = "1")]
        t: String,
    },
    /// Boundary jump process paths.
    Simulate {
        #[arg(long)]
        reflected: bool,
        /// Start ray prefix, or `mu` for a μ-distributed start.
        #[arg(long, default_value = "mu")]
        start: String,
        /// Time horizon; required when reflected.
        #[arg(long)]
        horizon: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum MartinCmd {
    /// κ(i, ξ) by the ratio route, cross-checked by the series route.
    Kernel {
        #[arg(long)]
        node: String,
        #[arg(long)]
        ray: String,
        /// Use the irregular-point formula.
        #[arg(long)]
        irregular: bool,
    },
    /// Regular or irregular, accessible or not, along a ray.
    Ray {
        #[arg(long)]
        ray: String,
    },
}

#[derive(Subcommand, Debug)]
enum UltraCmd {
    /// Ultrametric inequality and the hypotheses on the matrix.
    Check,
    /// Minimal tree extension.
    Embed,
    /// Generator Q = -U⁻¹ through the extension.
    Generator {
        /// Print -Q and certify QU = -I.
        #[arg(long)]
        check: bool,
    },
    /// Boundary report for a word family (--spec).
    Boundary,
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    /// Every acceptance check; fails if any fails.
    All,
}

/// Artifact plus an optional failure raised after it is written.
struct Output {
    json: Value,
    csv: Option<String>,
    trailer: Option<String>,
    failure: Option<Error>,
}

impl Output {
    fn json(json: Value) -> Self {
        Output {
            json,
            csv: None,
            trailer: None,
            failure: None,
        }
    }

    fn with_csv(mut self, csv: String) -> Self {
        self.csv = Some(csv);
        self
    }

    fn fail_if(mut self, bad: bool, e: impl FnOnce() -> Error) -> Self {
        if bad && self.failure.is_none() {
            self.failure = Some(e());
        }
        self
    }
}

fn err(kind: ErrorKind, msg: impl Into<String>) -> Error {
    Error::new(kind, MODULE, msg)
}

fn certification(msg: impl Into<String>, context: Value) -> Error {
    err(ErrorKind::Certification, msg).with_context(context)
}

/// 17 significant digits.
fn num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn matrix_csv(labels: &[String], m: &DMatrix<f64>) -> String {
    let mut s = String::from("node");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (a, l) in labels.iter().enumerate() {
        s.push_str(l);
        for b in 0..m.ncols() {
            s.push(',');
            s.push_str(&num(m[(a, b)]));
        }
        s.push('\n');
    }
    s
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|a| m.row(a).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

/// Generic `key,value` rows for outputs without a natural table.
fn flatten_csv(v: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x, out);
                }
            }
            Value::Array(a) => {
                for (k, x) in a.iter().enumerate() {
                    walk(&format!("{prefix}[{k}]"), x, out);
                }
            }
            Value::Number(n) => {
                let s = match n.as_f64() {
                    Some(x) if !n.is_i64() && !n.is_u64() => num(x),
                    _ => n.to_string(),
                };
                out.push_str(&format!("{prefix},{s}\n"));
            }
            Value::String(s) => out.push_str(&format!("{prefix},{s}\n")),
            other => out.push_str(&format!("{prefix},{other}\n")),
        }
    }
    let mut out = String::from("key,value\n");
    walk("", v, &mut out);
    out
}

fn labels(tree: &RootedTree, nodes: &[NodeId]) -> Vec<String> {
    nodes.iter().map(|&i| tree.label(i)).collect()
}

fn need_spec(c: &Common) -> Result<Model> {
    let p = c.spec.as_ref().ok_or_else(|| err(ErrorKind::Schema, "--spec is required"))?;
    Model::load(p)
}

fn need_seed(c: &Common) -> Result<u64> {
    c.seed
        .ok_or_else(|| err(ErrorKind::Schema, "--seed is required for stochastic subcommands"))
}

fn path_arg(s: &str) -> Result<Vec<u32>> {
    parse_path(s)
}

fn tree_at(m: &Model, depth: usize) -> Result<RootedTree> {
    build_tree(&m.spec, depth)
}

fn tree_cmd(cmd: &TreeCmd, c: &Common) -> Result<Output> {
    let m = need_spec(c)?;
    let finite = m.shape.is_finite();
    match cmd {
        TreeCmd::VerifyInverse => {
            let depth = c.depth.unwrap_or(if finite { 0 } else { 6 });
            let tree = tree_at(&m, depth)?;
            let nodes: Vec<NodeId> = tree.ids().filter(|&i| tree.row_complete(i)).collect();
            let mode: RootMode = c.mode.into();
            let r = inverse_residual(&tree, &m.weights, mode, &nodes)?;
            let tol = c.tol.unwrap_or(1e-10);
            Ok(Output::json(json!({
                "residual": r,
                "nodes": nodes.len(),
                "mode": mode,
                "tol": tol,
                "certified": r <= tol,
            }))
            .fail_if(r > tol, || certification("(-Q)U = I not certified", json!({"residual": r, "tol": tol}))))
        }
        TreeCmd::Potential => {
            let tree0 = tree_at(&m, 0)?;
            let n = c.depth.unwrap_or(if finite { tree0.depth() } else { 3 });
            let tree = tree_at(&m, n + 1)?;
            let v = finite_potential(&tree, &m.weights, n)?;
            let names = labels(&tree, &v.nodes);
            let csv = matrix_csv(&names, &v.v);
            Ok(Output::json(json!({"level": n, "nodes": names, "v": matrix_json(&v.v)})).with_csv(csv))
        }
        TreeCmd::HarmonicDecomp => {
            let tree0 = tree_at(&m, 0)?;
            let n = c.depth.unwrap_or(if finite { tree0.depth().saturating_sub(1) } else { 2 });
            let tree = tree_at(&m, n + 1)?;
            let tol = c.tol.unwrap_or(1e-8);
            let d = harmonic_decomposition(&tree, &m.weights, n, tol)?;
            let names = labels(&tree, &d.potential.nodes);
            let boundary = labels(&tree, &d.boundary);
            let mut out = json!({
                "level": n,
                "nodes": names,
                "h": matrix_json(&d.h),
                "rank": d.rank,
                "boundary": boundary,
            });
            if !d.boundary.is_empty() {
                let hm = hitting_matrices(&tree, &m.weights, n)?;
                out["hitting"] = json!({
                    "to_boundary": matrix_json(&hm.w),
                    "to_next_level": matrix_json(&hm.e),
                    "d": matrix_json(&hm.d),
                    "next": labels(&tree, &hm.next),
                });
            }
            let csv = matrix_csv(&names, &d.h);
            let (rank, want) = (d.rank, d.boundary.len());
            Ok(Output::json(out).with_csv(csv).fail_if(rank != want, || {
                certification("rank(H) differs from the number of level-n branch points", json!({"rank": rank, "expected": want}))
            }))
        }
    }
}

fn chain_model(c: &Common) -> Result<ChainModel> {
    let m = need_spec(c)?;
    Ok(ChainModel::new(m.shape, m.weights, c.mode.into()))
}

fn chain_cmd(cmd: &ChainCmd, c: &Common) -> Result<Output> {
    let model = chain_model(c)?;
    let tol = c.tol.unwrap_or(DEFAULT_TOL);
    match cmd {
        ChainCmd::Classify => {
            let cl = classify_transience(&model, &default_schedule(), tol)?;
            Ok(Output::json(serde_json::to_value(&cl).expect("serializable")))
        }
        ChainCmd::Simulate { start } => {
            let seed = need_seed(c)?;
            let start = path_arg(start)?;
            let paths = c.paths.unwrap_or(1000);
            let res = c.resolution.unwrap_or(2);
            let caps = Caps {
                max_level: Some(c.depth.unwrap_or(40).max(res)),
                max_time: None,
                record: false,
            };
            let s = simulate_many(&model, &start, seed, paths, caps, res)?;
            let mut csv = String::from("cylinder,count\n");
            for (k, n) in &s.exit_counts {
                csv.push_str(&format!("{k},{n}\n"));
            }
            let mut v = serde_json::to_value(&s).expect("serializable");
            v["seed"] = json!(seed);
            Ok(Output::json(v).with_csv(csv))
        }
    }
}

fn kernel_from(c: &Common, res: usize) -> Result<BoundaryKernel> {
    let model = chain_model(c)?;
    let tol = c.tol.unwrap_or(DEFAULT_TOL);
    Ok(BoundaryKernel::new(Arc::new(exit_measure(&model, res, &default_schedule(), tol)?)))
}

fn boundary_cmd(cmd: &BoundaryCmd, c: &Common) -> Result<Output> {
    match cmd {
        BoundaryCmd::ExitMeasure => {
            let model = chain_model(c)?;
            let tol = c.tol.unwrap_or(DEFAULT_TOL);
            let mu = exit_measure(&model, c.resolution.unwrap_or(3), &default_schedule(), tol)?;
            let mut csv = String::from("cylinder,mass,error\n");
            for i in mu.tree().ids() {
                let b = mu.mass(mu.tree().path(i))?;
                csv.push_str(&format!("{},{},{}\n", path_string(mu.tree().path(i)), num(b.mid()), num(0.5 * b.width())));
            }
            let (conv, width) = (mu.converged, mu.max_width());
            Ok(Output::json(mu.to_json()).with_csv(csv).fail_if(!conv, || {
                err(ErrorKind::UncertifiedTail, "mass brackets did not reach the tolerance")
                    .with_context(json!({"max_width": width, "tol": tol}))
            }))
        }
        BoundaryCmd::Kernel { xi, eta, t } => {
            let (x, y) = (path_arg(xi)?, path_arg(eta)?);
            let res = c.resolution.unwrap_or(x.len().max(y.len()).max(1));
            let k = kernel_from(c, res)?;
            let times: Vec<f64> = t
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| err(ErrorKind::Schema, format!("bad time {s:?}"))))
                .collect::<Result<_>>()?;
            let mut rows = Vec::new();
            let mut csv = String::from("t,p\n");
            for &s in &times {
                let p = k.p(s, &x, &y)?;
                csv.push_str(&format!("{},{}\n", num(s), num(p)));
                rows.push(json!({"t": s, "p": p}));
            }
            let mut out = json!({"xi": xi, "eta": eta, "values": rows, "mode": k.mode()});
            let mut bad = None;
            if k.mode() == RootMode::Absorbed {
                let r = k.green_residual(&x, &y)?;
                out["green"] = json!(k.green(&x, &y)?);
                out["green_residual"] = json!(r);
                let tol = c.tol.unwrap_or(1e-10);
                if r > tol {
                    bad = Some(r);
                }
            }
            Ok(Output::json(out).with_csv(csv).fail_if(bad.is_some(), || {
                certification("Green identity not certified", json!({"residual": bad}))
            }))
        }
        BoundaryCmd::Simulate { reflected, start, horizon } => boundary_simulate(c, *reflected, start, *horizon),
    }
}

fn boundary_simulate(c: &Common, reflected: bool, start: &str, horizon: Option<f64>) -> Result<Output> {
    let seed = need_seed(c)?;
    let mode = if reflected { Mode::Reflected } else { c.mode };
    let c = Common { mode, ..c.clone() };
    let res = c.resolution.unwrap_or(4);
    let horizon = match (mode, horizon) {
        (Mode::Reflected, None) => return Err(err(ErrorKind::Domain, "reflected paths never die; give --horizon")),
        (_, h) => h.unwrap_or(f64::INFINITY),
    };
    let k = kernel_from(&c, res)?;
    let g0 = k.g(&[], 0)?;
    let cascade = Cascade::new(k, res)?;
    let start = if start == "mu" { Start::Mu } else { Start::Ray(path_arg(start)?) };
    let n = c.paths.unwrap_or(10_000);
    let paths = cascade.simulate_many(&start, horizon, seed, n)?;

    let mut csv = String::from("index,end,status,jumps,renewals\n");
    for p in &paths {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.index,
            num(p.end),
            if p.status == PathStatus::Killed { "killed" } else { "horizon" },
            p.segments.len() - 1,
            p.renewals.len()
        ));
    }
    let killed: Vec<f64> = paths.iter().filter(|p| p.status == PathStatus::Killed).map(|p| p.end).collect();
    let holding = paths.iter().filter_map(|p| p.min_holding()).fold(f64::INFINITY, f64::min);
    let renewals: Vec<f64> = paths.iter().map(|p| p.renewals.len() as f64).collect();
    let mut out = json!({
        "seed": seed,
        "paths": n,
        "resolution": res,
        "mode": mode == Mode::Reflected,
        "horizon": if horizon.is_finite() { json!(horizon) } else { json!("inf") },
        "killed": killed.len(),
        "min_holding_time": if holding.is_finite() { json!(holding) } else { Value::Null },
        "mean_renewals": mean_sd(&renewals).0,
    });
    out["mode"] = json!(if mode == Mode::Reflected { "reflected" } else { "absorbed" });
    let mut failure = None;
    if mode == Mode::Absorbed && horizon.is_infinite() {
        // lifetime is exponential with mean G_0
        let (m, sd) = mean_sd(&killed);
        let half = 1.96 * sd / (killed.len() as f64).sqrt();
        let d = ks_statistic(&killed, |x| 1.0 - (-x / g0).exp());
        let crit = ks_critical(killed.len(), 0.01);
        out["lifetime"] = json!({
            "mean": m,
            "ci95": [m - half, m + half],
            "expected_mean": g0,
            "ks": d,
            "ks_critical_1pct": crit,
        });
        if d >= crit {
            failure = Some(certification("lifetime law rejected at 1%", json!({"ks": d, "critical": crit})));
        }
    }
    let mut o = Output::json(out).with_csv(csv);
    o.failure = failure;
    Ok(o)
}

fn martin_cmd(cmd: &MartinCmd, c: &Common) -> Result<Output> {
    let model = chain_model(c)?;
    let tol = c.tol.unwrap_or(DEFAULT_TOL);
    match cmd {
        MartinCmd::Kernel { node, ray, irregular } => {
            let i = path_arg(node)?;
            let ray = BoundaryRay::new(path_arg(ray)?);
            let res = c.resolution.unwrap_or(i.len().max(ray.resolution()) + 1);
            let route_tol = c.tol.unwrap_or(1e-6);
            let by_context = || -> Result<(Value, Option<f64>)> {
                let ctx = MartinContext::new(&model, res, &default_schedule(), tol)?;
                let mode = if model.mode == RootMode::Absorbed { KernelMode::Absorbed } else { KernelMode::Reflected };
                let k = ctx.kernel(&i, &ray, mode)?;
                let mut out = serde_json::to_value(&k).expect("serializable");
                let mut diff = None;
                if ctx.measure().is_some() {
                    let s = ctx.kernel_series(&i, &ray)?;
                    out["series"] = json!(s);
                    diff = Some((s - k.value).abs());
                }
                Ok((out, diff))
            };
            // no certified series: ratio route on a deep walk, irregular series as the check
            let by_walk = || -> Result<(Value, Option<f64>)> {
                let walk = model.walk(c.depth.unwrap_or(64))?;
                let r = martin_ratio(&walk, &i, &ray)?;
                let mut out = json!({"value": r.mid(), "error": 0.5 * r.width(), "tag": "ratio"});
                let mut diff = None;
                if model.mode == RootMode::Absorbed {
                    let k = martin_irregular(&walk, &i, &ray)?;
                    out["irregular"] = serde_json::to_value(&k).expect("serializable");
                    diff = Some((k.value - r.mid()).abs());
                }
                Ok((out, diff))
            };
            let (mut out, diff) = if *irregular {
                by_walk()?
            } else {
                match by_context() {
                    Err(e) if e.kind == ErrorKind::UncertifiedTail => by_walk()?,
                    r => r?,
                }
            };
            if let Some(d) = diff {
                out["route_difference"] = json!(d);
            }
            let bad = diff.filter(|&d| d > route_tol);
            Ok(Output::json(out).fail_if(bad.is_some(), || {
                certification("kernel routes disagree", json!({"difference": bad, "tol": route_tol}))
            }))
        }
        MartinCmd::Ray { ray } => {
            let ray = BoundaryRay::new(path_arg(ray)?);
            let rep = ray_regularity(&model, &ray, c.depth.unwrap_or(24), tol)?;
            let mut out = serde_json::to_value(&rep).expect("serializable");
            let summary = match (rep.verdict, rep.accessible) {
                (treepot::measure::Regularity::Irregular, true) => "irregular but accessible",
                (treepot::measure::Regularity::Irregular, false) => "irregular and inaccessible",
                (treepot::measure::Regularity::Regular, true) => "regular and accessible",
                (treepot::measure::Regularity::Regular, false) => "regular and inaccessible",
                _ => "undetermined",
            };
            out["summary"] = json!(summary);
            Ok(Output::json(out))
        }
    }
}

fn ultra_cmd(cmd: &UltraCmd, c: &Common) -> Result<Output> {
    if let UltraCmd::Boundary = cmd {
        let p = c.spec.as_ref().ok_or_else(|| err(ErrorKind::Schema, "--spec (word family) is required"))?;
        let fam = load_family(p)?;
        let res = c.resolution.unwrap_or(2);
        let b = u_boundary(&fam, res, c.depth.unwrap_or(30), c.tol.unwrap_or(1e-6))?;
        return Ok(Output::json(serde_json::to_value(&b).expect("serializable")));
    }
    let p = c.matrix.as_ref().ok_or_else(|| err(ErrorKind::Schema, "--matrix is required"))?;
    let m = load_matrix(p)?;
    match cmd {
        UltraCmd::Check => {
            if let Some(v) = verify_ultrametric(&m)? {
                return Err(err(ErrorKind::Hypothesis, "matrix is not ultrametric").with_context(json!({
                    "i": m.labels[v.i], "j": m.labels[v.j], "k": m.labels[v.k],
                })));
            }
            let h = check_hypotheses(&m);
            let ok = h.passes();
            let note = h.h1_pair;
            Ok(Output::json(serde_json::to_value(&h).expect("serializable")).fail_if(!ok, || {
                err(ErrorKind::Hypothesis, "hypothesis H1 fails").with_context(json!({"pair": note}))
            }))
        }
        UltraCmd::Embed => {
            let ext = minimal_tree_extension(&m)?;
            let mut csv = String::from("node,label,level,value,parent,index\n");
            for (k, x) in ext.nodes.iter().enumerate() {
                csv.push_str(&format!(
                    "{k},\"{}\",{},{},{},{}\n",
                    ext.node_label(k),
                    x.level,
                    num(ext.values[x.level]),
                    x.parent.map(|p| p.to_string()).unwrap_or_default(),
                    x.index.map(|i| m.labels[i].clone()).unwrap_or_default()
                ));
            }
            Ok(Output::json(ext.to_json()).with_csv(csv))
        }
        UltraCmd::Generator { check } => {
            let ext = minimal_tree_extension(&m)?;
            let g = ultrametric_generator(&m, &ext)?;
            let neg = -g.dense();
            let csv = matrix_csv(&m.labels, &neg);
            let cert = g.certificate.clone();
            let tol = c.tol.unwrap_or(1e-10);
            let ok = cert.certified && cert.inverse_residual <= tol;
            let mut o = Output::json(json!({
                "labels": m.labels,
                "minus_q": matrix_json(&neg),
                "certificate": cert,
            }))
            .with_csv(csv);
            if *check {
                o.trailer = Some(if ok { "QU=-I certified".into() } else { "QU=-I NOT certified".into() });
                o = o.fail_if(!ok, || {
                    certification("QU = -I not certified", serde_json::to_value(&g.certificate).expect("serializable"))
                });
            }
            Ok(o)
        }
        UltraCmd::Boundary => unreachable!(),
    }
}

fn report_cmd() -> Result<Output> {
    let all = report::run_all();
    let mut csv = String::from("criterion,result,detail\n");
    for o in &all {
        eprintln!("{}", o.line());
        csv.push_str(&format!("{},{},\"{}\"\n", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail));
    }
    let failed: Vec<usize> = all.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let v = json!(all
        .iter()
        .map(|o| json!({"criterion": o.id, "name": o.name, "pass": o.pass, "detail": o.detail}))
        .collect::<Vec<_>>());
    Ok(Output::json(v).with_csv(csv).fail_if(!failed.is_empty(), || {
        certification("acceptance checks failed", json!({"failed": failed}))
    }))
}

fn dispatch(cli: &Cli) -> Result<Output> {
    let c = &cli.common;
    match &cli.cmd {
        Command::Tree(t) => tree_cmd(t, c),
        Command::Chain(t) => chain_cmd(t, c),
        Command::Boundary(t) => boundary_cmd(t, c),
        Command::Martin(t) => martin_cmd(t, c),
        Command::Ultra(t) => ultra_cmd(t, c),
        Command::Report(ReportCmd::All) => report_cmd(),
    }
}

fn emit(o: &Output, c: &Common) -> Result<()> {
    let body = match c.format {
        Format::Json => serde_json::to_string_pretty(&o.json).expect("serializable") + "\n",
        Format::Csv => o.csv.clone().unwrap_or_else(|| flatten_csv(&o.json)),
    };
    match &c.out {
        Some(p) => std::fs::write(p, body).map_err(|e| {
            err(ErrorKind::Io, format!("cannot write {}: {e}", p.display())).with_context(json!({"path": p.display().to_string()}))
        })?,
        None => print!("{body}"),
    }
    if let Some(t) = &o.trailer {
        println!("{t}");
    }
    std::io::stdout().flush().map_err(|e| err(ErrorKind::Io, e.to_string()))
}

fn fail(e: &Error) -> ! {
    eprintln!("{}", e.to_json());
    std::process::exit(e.code());
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => fail(&err(ErrorKind::Schema, e.to_string().trim().to_string())),
    };
    match dispatch(&cli) {
        Ok(o) => {
            if let Err(e) = emit(&o, &cli.common) {
                fail(&e);
            }
            if let Some(e) = &o.failure {
                fail(e);
            }
        }
        Err(e) => fail(&e),
    }
}
