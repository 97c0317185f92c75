use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pmelm::data::{load_panel, DesignSpec, PanelDataset};
use pmelm::influence::{self, DiagnosticRecord, Stat};
use pmelm::model::{self, FitOptions, FitSummary, QuadratureRule};
use pmelm::report::{self, PlotSelection, SelectionMode};
use pmelm::simulate::{self, ContaminationSpec, CovariateSource, GenSpec, GridOptions};
use pmelm::study::{self, StudyConfig};

use crate::args::{ContaminateArgs, DiagnoseArgs, FitArgs, PlotArgs, SimulateArgs, StudyArgs};
use crate::error::CliError;

pub struct Context {
    pub quiet: bool,
}

impl Context {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

fn parse_list<T: FromStr>(text: &str, flag: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| CliError::usage(format!("invalid value `{s}` for --{flag}: {e}")))
        })
        .collect()
}

fn design_spec(terms: Option<&str>) -> Result<DesignSpec, CliError> {
    match terms {
        None => Ok(DesignSpec::default()),
        Some(t) => t
            .parse()
            .map_err(|e| CliError::usage(format!("invalid value for --terms: {e}"))),
    }
}

fn quadrature(order: Option<usize>) -> Result<QuadratureRule, CliError> {
    match order.unwrap_or(pmelm::model::quadrature::DEFAULT_ORDER) {
        0 => Err(CliError::usage("--quad-order must be at least 1")),
        q => Ok(QuadratureRule::new(q)),
    }
}

fn read_panel(path: &Path) -> Result<PanelDataset, CliError> {
    load_panel(path).map_err(|e| CliError::panel(path, e))
}

/// Writes via a sibling temporary file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| CliError::usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::write(path, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::write(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))
}

pub fn simulate(ctx: &Context, args: SimulateArgs) -> Result<(), CliError> {
    let out = required(args.out, "out")?;
    let sigma1 = args.sigma1.unwrap_or(0.5);
    if !(sigma1 > 0.0 && sigma1.is_finite()) {
        return Err(CliError::usage(format!("invalid value {sigma1} for --sigma1: must be positive")));
    }
    let m1 = args.m1.unwrap_or(59);
    if m1 < 2 {
        return Err(CliError::usage(format!("invalid value {m1} for --m1: need at least 2 subjects")));
    }
    let alpha_sd = args.alpha_sd.unwrap_or(0.0);
    if !(alpha_sd >= 0.0 && alpha_sd.is_finite()) {
        return Err(CliError::usage(format!("invalid value {alpha_sd} for --alpha-sd: must be >= 0")));
    }
    let design = design_spec(args.terms.as_deref())?;
    let beta = match args.beta.as_deref() {
        Some(b) => parse_list(b, "beta")?,
        None if design == DesignSpec::default() => simulate::DEFAULT_BETA.to_vec(),
        None => return Err(CliError::usage("--beta is required with custom --terms")),
    };
    if beta.len() != design.p() {
        return Err(CliError::usage(format!(
            "--beta has {} values but the design has {} terms",
            beta.len(),
            design.p()
        )));
    }
    let covariates = match &args.covariates {
        Some(path) => CovariateSource::from_panel(&read_panel(path)?),
        None => CovariateSource::Synthetic,
    };
    let spec = GenSpec {
        m1,
        sigma1,
        beta,
        seed: args.seed.unwrap_or(0),
        covariates,
        alpha_sd,
    };
    let sim = simulate::generate(&spec, &design).map_err(CliError::simulate)?;

    let mut csv = Vec::new();
    sim.panel
        .to_writer(&mut csv, &sim.metadata.csv_comments())
        .map_err(|e| CliError::write(&out, e))?;
    write_atomic(&out, &csv)?;
    let meta_path = out.with_extension("json");
    let meta = serde_json::to_vec_pretty(&sim.metadata).expect("metadata serializes");
    write_atomic(&meta_path, &meta)?;
    ctx.note(format!(
        "wrote {} subjects to {} (metadata {})",
        sim.panel.len(),
        out.display(),
        meta_path.display()
    ));
    Ok(())
}

pub fn contaminate(ctx: &Context, args: ContaminateArgs) -> Result<(), CliError> {
    let input = required(args.input, "input")?;
    let out = required(args.out, "out")?;
    let method = required(args.method, "method")?;
    let method = u8::try_from(method)
        .ok()
        .filter(|m| (1..=6).contains(m))
        .ok_or_else(|| CliError::usage(format!("invalid value {method} for --method: expected 1 to 6")))?;
    let target = args.target.unwrap_or(1);
    let target = usize::try_from(target)
        .ok()
        .filter(|&t| t >= 1)
        .ok_or_else(|| CliError::usage(format!("invalid value {target} for --target: must be >= 1")))?;
    let panel = read_panel(&input)?;
    let edited = simulate::contaminate(&panel, &ContaminationSpec { method, target })
        .map_err(|e| CliError::usage(format!("--method/--target: {e}")))?;
    let mut csv = Vec::new();
    edited
        .to_writer(&mut csv, &[format!("contaminated with method {method} at subject position {target}")])
        .map_err(|e| CliError::write(&out, e))?;
    write_atomic(&out, &csv)?;
    ctx.note(format!("wrote {}", out.display()));
    Ok(())
}

pub fn fit(ctx: &Context, args: FitArgs) -> Result<(), CliError> {
    let input = required(args.input, "input")?;
    let out = required(args.out, "out")?;
    let spec = design_spec(args.terms.as_deref())?;
    let rule = quadrature(args.quad_order)?;
    let panel = read_panel(&input)?;
    let fit = model::fit_ml(&panel, &spec, &rule, None).map_err(CliError::model)?;
    let summary = fit.summary();
    let json = serde_json::to_vec_pretty(&summary).expect("fit serializes");
    write_atomic(&out, &json)?;
    ctx.note(format!(
        "loglik {:.6} after {} iterations (gradient norm {:.2e}){}",
        summary.loglik,
        summary.iterations,
        summary.grad_norm,
        if summary.at_boundary { "; variance at its lower bound" } else { "" }
    ));
    Ok(())
}

fn read_fit(path: &Path) -> Result<FitSummary, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::read(path, &e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: not a fit file: {e}", path.display())))
}

pub fn diagnose(ctx: &Context, args: DiagnoseArgs) -> Result<(), CliError> {
    let input = required(args.input, "input")?;
    let fit_path = required(args.fit, "fit")?;
    let out = required(args.out, "out")?;
    let summary = read_fit(&fit_path)?;
    let panel = read_panel(&input)?;
    if summary.li.len() != panel.len() {
        return Err(CliError::usage(format!(
            "{} holds a fit for {} subjects but {} has {}",
            fit_path.display(),
            summary.li.len(),
            input.display(),
            panel.len()
        )));
    }
    let spec = summary.design_spec().map_err(CliError::model)?;
    let theta = summary.theta().map_err(CliError::model)?;
    let rule = quadrature(Some(summary.quadrature_order))?;
    let design = pmelm::build_design(&panel, &spec).map_err(|e| CliError::panel(&input, e))?;
    // Re-converging from the stored estimate restores the derivatives.
    let fit = model::fit_design(&design, &rule, Some(&theta), None, &FitOptions::default())
        .map_err(CliError::model)?;
    let records = influence::diagnose(&fit).map_err(CliError::influence)?;
    let mut csv = Vec::new();
    influence::write_diagnostics(&mut csv, &records).map_err(CliError::influence)?;
    write_atomic(&out, &csv)?;
    ctx.note(format!("wrote diagnostics for {} subjects to {}", records.len(), out.display()));
    Ok(())
}

enum Figure {
    Needle(Stat),
    Scatter,
    Trajectory,
}

fn parse_figures(text: &str) -> Result<Vec<Figure>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.to_ascii_lowercase().as_str() {
            "scatter" => Ok(Figure::Scatter),
            "trajectory" => Ok(Figure::Trajectory),
            _ => s
                .parse::<Stat>()
                .map(Figure::Needle)
                .map_err(|e| CliError::usage(format!("invalid value for --stat: {e}"))),
        })
        .collect()
}

fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::read(path, &e))?;
    influence::read_diagnostics(std::io::BufReader::new(file))
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn plot(ctx: &Context, args: PlotArgs) -> Result<(), CliError> {
    let diag = required(args.diag, "diag")?;
    let figures = parse_figures(args.stat.as_deref().unwrap_or("Ci,Ci_b,Ci_d,rri,scatter"))?;
    let mode: SelectionMode = args
        .select
        .as_deref()
        .unwrap_or("all")
        .parse()
        .map_err(|e| CliError::usage(format!("invalid value for --select: {e}")))?;
    let highlight: Vec<u32> = parse_list(args.highlight.as_deref().unwrap_or("1"), "highlight")?;
    let sel = PlotSelection {
        mode,
        seed: args.seed.unwrap_or(0),
        highlight,
    };
    let outdir = args.outdir.unwrap_or_else(|| PathBuf::from("."));
    let dataset = match args.dataset {
        Some(d) => d,
        None => {
            let stem = diag.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            stem.strip_suffix("_diag").unwrap_or(&stem).to_string()
        }
    };
    let method = args.method.unwrap_or_else(|| "clean".into());
    let records = read_diagnostics(&diag)?;
    create_dir(&outdir)?;

    for figure in figures {
        let (svg, name) = match figure {
            Figure::Needle(stat) => (
                report::needle_plot(&records, stat, &sel).map_err(CliError::report)?,
                stat.name(),
            ),
            Figure::Scatter => (report::scatter_plot(&records, &sel).map_err(CliError::report)?, "scatter"),
            Figure::Trajectory => {
                let path = args
                    .panel
                    .as_deref()
                    .ok_or_else(|| CliError::usage("trajectory plots need --panel"))?;
                let panel = read_panel(path)?;
                let id = sel.highlight.first().copied().unwrap_or(1);
                let svg = report::trajectory_plot(&panel, id, args.others.unwrap_or(5), sel.seed)
                    .map_err(CliError::report)?;
                (svg, "trajectory")
            }
        };
        let path = outdir.join(report::figure_name(&dataset, name, &method));
        write_atomic(&path, svg.as_bytes())?;
        ctx.note(format!("wrote {}", path.display()));
    }
    Ok(())
}

pub fn study(ctx: &Context, args: StudyArgs) -> Result<(), CliError> {
    let outdir = required(args.outdir, "outdir")?;
    let replicates = args.replicates.unwrap_or(20);
    if replicates == 0 {
        return Err(CliError::usage("--replicates must be at least 1"));
    }
    let methods: Vec<u8> = parse_list(args.methods.as_deref().unwrap_or("1,2,3,4"), "methods")?;
    if methods.is_empty() || methods.iter().any(|m| !(1..=6).contains(m)) {
        return Err(CliError::usage("--methods takes values from 1 to 6"));
    }
    let mut grid = GridOptions {
        base_seed: args.seed.unwrap_or(0),
        replicates,
        methods,
        ..GridOptions::default()
    };
    if let Some(m1) = args.m1 {
        if m1 < 2 {
            return Err(CliError::usage("--m1 must be at least 2"));
        }
        grid.m1 = m1;
    }
    if let Some(s) = args.sigmas.as_deref() {
        grid.sigmas = parse_list(s, "sigmas")?;
        if grid.sigmas.is_empty() || grid.sigmas.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(CliError::usage("--sigmas must be positive"));
        }
    }
    let config = StudyConfig {
        grid,
        rule: quadrature(args.quad_order)?,
        skip_failures: args.skip_failures,
        ..StudyConfig::default()
    };
    ctx.note(format!("running {} cells", config.grid.coordinates().len()));
    let outcome = study::run_study(&config).map_err(CliError::study)?;

    let cells_dir = outdir.join("cells");
    create_dir(&cells_dir)?;
    for cell in &outcome.cells {
        let c = cell.coord;
        let name = format!("sigma{}_m{}_r{:03}_diag.csv", c.sigma1, c.method, c.replicate);
        let mut csv = Vec::new();
        influence::write_diagnostics(&mut csv, &cell.records).map_err(CliError::influence)?;
        write_atomic(&cells_dir.join(name), &csv)?;
    }
    if !outcome.failures.is_empty() {
        let mut text = String::from("sigma1,method,replicate,error\n");
        for (c, e) in &outcome.failures {
            text.push_str(&format!("{},{},{},\"{}\"\n", c.sigma1, c.method, c.replicate, e.replace('"', "'")));
        }
        write_atomic(&outdir.join("failures.csv"), text.as_bytes())?;
        ctx.note(format!("{} cells failed and were skipped", outcome.failures.len()));
    }
    let mut csv = Vec::new();
    study::write_detection_csv(&mut csv, &outcome.detection).map_err(CliError::study)?;
    let table = outdir.join("detection_rates.csv");
    write_atomic(&table, &csv)?;
    ctx.note(format!("wrote {} rows to {}", outcome.detection.len(), table.display()));
    Ok(())
}
