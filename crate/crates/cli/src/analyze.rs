use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use relgate::adapter::{fmt_sig9, read_trace_csv};
use relgate::analysis::{self, fixtures, ErrorPoint, PairedSample};
use relgate::error::{Error, Result};
use relgate::experiment::read_summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Recipe {
    HarmSlope,
    Decompose,
    Paired,
    Reliability,
    Windows,
    Wtl,
}

impl Recipe {
    fn name(self) -> &'static str {
        match self {
            Recipe::HarmSlope => "harm-slope",
            Recipe::Decompose => "decompose",
            Recipe::Paired => "paired",
            Recipe::Reliability => "reliability",
            Recipe::Windows => "windows",
            Recipe::Wtl => "wtl",
        }
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    pub recipe: Recipe,
    /// Input files; the bundled fixture of the recipe when omitted.
    #[arg(long = "input", value_name = "PATH")]
    pub inputs: Vec<PathBuf>,
    /// Method under test [default: the gated method of the input].
    #[arg(long)]
    pub method: Option<String>,
    /// Comparator [default: the ungated method of the input].
    #[arg(long)]
    pub baseline: Option<String>,
    /// Mean source reliability of the method under test (decompose).
    #[arg(long)]
    pub r_bar: Option<f64>,
    /// Error below which a run counts as a success (reliability).
    #[arg(long, default_value_t = 50.0)]
    pub success_threshold: f64,
    /// Reliability that separates the high and low regimes (reliability).
    #[arg(long, default_value_t = 0.80)]
    pub split: f64,
    #[arg(long, default_value_t = analysis::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = analysis::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Absolute difference, pp, treated as a tie (wtl).
    #[arg(long, default_value_t = analysis::DEFAULT_TIE_EPS)]
    pub tie_eps: f64,
    /// Two-sided level at which a paired difference is significant.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

impl AnalyzeArgs {
    fn bundled(&self) -> bool {
        self.inputs.is_empty()
    }

    fn method(&self) -> String {
        self.method.clone().unwrap_or_else(|| {
            if self.bundled() {
                fixtures::GATED.to_string()
            } else {
                relgate::config::Preset::GatedFull.name().to_string()
            }
        })
    }

    fn baseline(&self) -> String {
        self.baseline.clone().unwrap_or_else(|| {
            if self.bundled() {
                fixtures::UNGATED.to_string()
            } else {
                relgate::config::Preset::UngatedFull.name().to_string()
            }
        })
    }

    /// Resolved settings, one `key = value` per line.
    pub fn effective(&self) -> String {
        let inputs: Vec<String> = if self.bundled() {
            vec!["bundled".into()]
        } else {
            self.inputs.iter().map(|p| p.display().to_string()).collect()
        };
        let mut s = String::new();
        let _ = writeln!(s, "recipe = \"{}\"", self.recipe.name());
        let _ = writeln!(s, "inputs = {inputs:?}");
        let _ = writeln!(s, "method = \"{}\"", self.method());
        let _ = writeln!(s, "baseline = \"{}\"", self.baseline());
        if let Some(r) = self.r_bar {
            let _ = writeln!(s, "r_bar = {r}");
        }
        let _ = writeln!(s, "success_threshold = {}", self.success_threshold);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "tie_eps = {}", self.tie_eps);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        s
    }
}

/// A finished report: CSV rows and a human-readable rendering.
pub struct Report {
    pub csv: Vec<Vec<String>>,
    pub text: String,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { row, column, msg } => Error::Parse {
            row,
            column,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn error_points(args: &AnalyzeArgs) -> Result<Vec<ErrorPoint>> {
    if args.bundled() {
        return Ok(fixtures::mechn_results());
    }
    let mut pts = Vec::new();
    for p in &args.inputs {
        pts.extend(with_path(p, analysis::read_error_points(read_file(p)?.as_slice()))?);
    }
    Ok(pts)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig9).unwrap_or_default()
}

pub fn harm_slopes(args: &AnalyzeArgs) -> Result<(analysis::HarmSlope, analysis::HarmSlope)> {
    let pts = error_points(args)?;
    Ok((
        analysis::harm_slope_by_ordering(&pts, &args.method())?,
        analysis::harm_slope_by_ordering(&pts, &args.baseline())?,
    ))
}

fn harm_slope(args: &AnalyzeArgs) -> Result<Report> {
    let (m, b) = harm_slopes(args)?;
    let mut csv = vec![vec!["method".into(), "ordering".into(), "s_min".into(), "s_max".into(), "slope".into()]];
    let mut text = String::new();
    for h in [&b, &m] {
        for (o, s) in &h.per_ordering {
            csv.push(vec![h.method.clone(), o.clone(), fmt_sig9(h.s_min), fmt_sig9(h.s_max), fmt_sig9(*s)]);
        }
        csv.push(vec![h.method.clone(), "mean".into(), fmt_sig9(h.s_min), fmt_sig9(h.s_max), fmt_sig9(h.mean)]);
        let parts: Vec<String> = h.per_ordering.iter().map(|(o, s)| format!("{o} {s:.2}")).collect();
        let _ = writeln!(
            text,
            "H[{}] = {:.2} pp per unit S over S in [{}, {}] ({})",
            h.method,
            h.mean,
            h.s_min,
            h.s_max,
            parts.join(", ")
        );
    }
    let ratio = b.mean / m.mean;
    csv.push(vec!["ratio".into(), format!("{}/{}", b.method, m.method), String::new(), String::new(), fmt_sig9(ratio)]);
    let _ = writeln!(text, "ratio H[{}] / H[{}] = {ratio:.2}", b.method, m.method);
    Ok(Report { csv, text })
}

fn mean_r_bar(args: &AnalyzeArgs) -> Result<f64> {
    if let Some(r) = args.r_bar {
        return Ok(r);
    }
    let method = args.method();
    let rs: Vec<f64> = if args.bundled() {
        fixtures::mechn_rsrc().into_iter().map(|(_, _, r)| r).collect()
    } else {
        let mut rs = Vec::new();
        for p in &args.inputs {
            let rows = read_summary(read_file(p)?.as_slice()).map_err(|_| {
                Error::InvalidInput(format!("{} is not a run summary; pass --r-bar", p.display()))
            })?;
            rs.extend(rows.into_iter().filter(|r| r.method == method && r.s_target.is_some()).map(|r| r.mean_r_src));
        }
        rs
    };
    if rs.is_empty() {
        return Err(Error::InvalidInput(format!("no reliability values for `{method}`; pass --r-bar")));
    }
    Ok(rs.iter().sum::<f64>() / rs.len() as f64)
}

fn decompose(args: &AnalyzeArgs) -> Result<Report> {
    let (m, b) = harm_slopes(args)?;
    let r_bar = mean_r_bar(args)?;
    let d = analysis::slope_decomposition(b.mean, m.mean, r_bar)?;
    let csv = vec![
        vec!["h_ungated".into(), "h_gated".into(), "r_bar".into(), "h_anchor".into(), "h_other".into(), "predicted_h_gated".into()],
        vec![
            fmt_sig9(b.mean),
            fmt_sig9(m.mean),
            fmt_sig9(r_bar),
            fmt_sig9(d.h_anchor),
            fmt_sig9(d.h_other),
            fmt_sig9(d.predicted_h_b),
        ],
    ];
    let text = format!(
        "H[{}] = {:.2}, H[{}] = {:.2}, r_bar = {r_bar:.3}\nanchor-mediated slope {:.2}, other terms {:.2}\npredicted H[{}] = {:.2} + {r_bar:.3} * {:.2} = {:.2}\n",
        b.method, b.mean, m.method, m.mean, d.h_anchor, d.h_other, m.method, d.h_other, d.h_anchor, d.predicted_h_b
    );
    Ok(Report { csv, text })
}

fn paired(args: &AnalyzeArgs) -> Result<Report> {
    let pts = error_points(args)?;
    let (method, baseline) = (args.method(), args.baseline());
    let cells = analysis::paired_cells(&pts, &method, &baseline)?;
    let published = if args.bundled() { fixtures::mechn_pvalues() } else { Vec::new() };
    let mut head: Vec<String> = ["s_target", "ordering", "n", "delta", "t", "p", "ci_lo", "ci_hi", "d_z", "significant"]
        .map(String::from)
        .to_vec();
    if !published.is_empty() {
        head.extend(["published_delta", "published_p", "published_significant", "agrees"].map(String::from));
    }
    let mut csv = vec![head];
    let mut text = format!("paired t-test, delta = {method} - {baseline} (pp)\n");
    for ((s, o), sample) in &cells {
        let r = analysis::paired_t(sample)?;
        let sig = r.p.is_some_and(|p| p < args.alpha);
        let mut row = vec![
            fmt_sig9(*s),
            o.clone(),
            r.n.to_string(),
            fmt_sig9(r.delta_mean),
            opt(r.t),
            opt(r.p),
            fmt_sig9(r.ci95.0),
            fmt_sig9(r.ci95.1),
            opt(r.d_z),
            u8::from(sig).to_string(),
        ];
        let _ = write!(
            text,
            "S={s:<5} {o:<5} n={} delta {:+.2} p {} {}",
            r.n,
            r.delta_mean,
            r.p.map_or("-".into(), |p| format!("{p:.3}")),
            if sig { "significant" } else { "n.s." }
        );
        if let Some(pb) = published.iter().find(|p| p.s_target == *s && &p.ordering == o) {
            let agrees = (r.delta_mean - pb.delta).abs() <= 0.01 && sig == (pb.significant == 1);
            row.extend([fmt_sig9(pb.delta), fmt_sig9(pb.p), pb.significant.to_string(), u8::from(agrees).to_string()]);
            let _ = write!(text, "  published {:+.2} p {:.3} {}", pb.delta, pb.p, if agrees { "agrees" } else { "DISAGREES" });
        }
        text.push('\n');
        csv.push(row);
    }
    Ok(Report { csv, text })
}

fn reliability(args: &AnalyzeArgs) -> Result<Report> {
    let runs = if args.bundled() {
        fixtures::rsrc_valid()
    } else {
        let mut runs = Vec::new();
        for p in &args.inputs {
            runs.extend(with_path(p, analysis::read_reliability_runs(read_file(p)?.as_slice()))?);
        }
        runs
    };
    let r = analysis::reliability_validation(&runs, args.success_threshold, args.split)?;
    let csv = vec![
        ["n", "pearson", "spearman", "auc", "n_pos", "n_neg", "split", "high_mean_err", "high_n", "low_mean_err", "low_n"]
            .map(String::from)
            .to_vec(),
        vec![
            r.n.to_string(),
            fmt_sig9(r.pearson),
            fmt_sig9(r.spearman),
            opt(r.auc),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            fmt_sig9(r.split),
            opt(r.high_mean),
            r.high_n.to_string(),
            opt(r.low_mean),
            r.low_n.to_string(),
        ],
    ];
    let text = format!(
        "n = {}, Pearson {:.3}, Spearman {:.4}, AUC {} ({} successes, {} failures at err < {})\nr_src > {}: mean err {} over {} runs; otherwise {} over {} runs\n",
        r.n,
        r.pearson,
        r.spearman,
        r.auc.map_or("undefined".into(), |a| format!("{a:.3}")),
        r.n_pos,
        r.n_neg,
        args.success_threshold,
        r.split,
        r.high_mean.map_or("-".into(), |m| format!("{m:.2}")),
        r.high_n,
        r.low_mean.map_or("-".into(), |m| format!("{m:.2}")),
        r.low_n
    );
    Ok(Report { csv, text })
}

fn windows(args: &AnalyzeArgs) -> Result<Report> {
    if args.bundled() {
        return Err(Error::InvalidInput("windows needs at least one --input trace".into()));
    }
    let mut csv = vec![["trace", "center", "err"].map(String::from).to_vec()];
    let mut text = String::new();
    for p in &args.inputs {
        let trace = with_path(p, read_trace_csv(read_file(p)?.as_slice()))?;
        let w = analysis::sliding_window_error(&trace, args.window, args.stride)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let worst = w.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(text, "{name}: {} windows of {} batches, worst {worst:.2}%", w.len(), args.window);
        csv.extend(w.into_iter().map(|(c, e)| vec![name.clone(), fmt_sig9(c), fmt_sig9(e)]));
    }
    Ok(Report { csv, text })
}

fn wtl(args: &AnalyzeArgs) -> Result<Report> {
    let sample: PairedSample = if args.bundled() {
        analysis::scatter_sample(&fixtures::persplit_scatter())?
    } else {
        let mut pts = Vec::new();
        for p in &args.inputs {
            pts.extend(with_path(p, analysis::read_scatter(read_file(p)?.as_slice()))?);
        }
        analysis::scatter_sample(&pts)?
    };
    let w = analysis::win_tie_loss(&sample, args.tie_eps);
    let csv = vec![
        ["n", "wins", "ties", "losses", "tie_eps"].map(String::from).to_vec(),
        vec![sample.len().to_string(), w.wins.to_string(), w.ties.to_string(), w.losses.to_string(), fmt_sig9(args.tie_eps)],
    ];
    let text = format!(
        "gated vs ungated over {} splits: {}/{}/{} win/tie/loss (tie if |delta| <= {} pp)\n",
        sample.len(),
        w.wins,
        w.ties,
        w.losses,
        args.tie_eps
    );
    Ok(Report { csv, text })
}

pub fn report(args: &AnalyzeArgs) -> Result<Report> {
    match args.recipe {
        Recipe::HarmSlope => harm_slope(args),
        Recipe::Decompose => decompose(args),
        Recipe::Paired => paired(args),
        Recipe::Reliability => reliability(args),
        Recipe::Windows => windows(args),
        Recipe::Wtl => wtl(args),
    }
}

/// Writes `<out>/<recipe>.csv` and prints the text rendering.
pub fn run(args: &AnalyzeArgs, out: &Path) -> Result<()> {
    let rep = report(args)?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("{}.csv", args.recipe.name()));
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rep.csv {
        w.write_record(row)?;
    }
    w.flush()?;
    print!("{}", rep.text);
    println!("-> {}", path.display());
    Ok(())
}
