use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use cleanmorse_core::geometry::{make_builtin_setup, make_custom_setup, MorseSetup};
use cleanmorse_core::homology::Ring;
use cleanmorse_core::kuranishi::{enumerate_strata, ModuliCatalog};
use cleanmorse_core::pipeline::{emit_plot_data, run_example, selftest, PlotKind, RunConfig, RunReport, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "cleanmorse", version, about = "Morse homology with cleanly cut out moduli spaces")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline on a builtin setup or a setup JSON file.
    Run {
        setup: String,
        /// Run configuration JSON; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ring: Option<Ring>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Perturbation value for an obstructed component, as `id=value`.
        #[arg(long = "sigma", value_parser = parse_sigma)]
        sigma: Vec<(String, f64)>,
    },
    /// Write CSV plot data from a report.
    Plot {
        report: PathBuf,
        #[arg(long)]
        what: PlotKind,
        /// Defaults to a `plots` directory next to the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the index tuples of one catalog entry.
    Strata {
        setup: String,
        #[arg(long)]
        level: usize,
    },
    /// Run the quick property checks.
    Selftest,
}

fn parse_sigma(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.rsplit_once('=').ok_or("expected id=value")?;
    Ok((k.to_string(), v.parse::<f64>().map_err(|e| e.to_string())?))
}

fn load_setup(arg: &str) -> anyhow::Result<MorseSetup> {
    if arg.ends_with(".json") {
        let text = std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
        Ok(make_custom_setup(&text)?)
    } else {
        Ok(make_builtin_setup(arg)?)
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { setup, config, ring, out, seed, sigma } => {
            let mut cfg: RunConfig = match &config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => RunConfig::default(),
            };
            if setup.ends_with(".json") {
                let text = std::fs::read_to_string(&setup).with_context(|| format!("reading {setup}"))?;
                cfg.custom_setup = Some(serde_json::from_str(&text)?);
            } else {
                cfg.setup = setup.clone();
                cfg.custom_setup = None;
            }
            if let Some(r) = ring {
                cfg.ring = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            for (k, v) in sigma {
                cfg.sigma.insert(k, vec![v]);
            }
            let name = cfg.custom_setup.as_ref().map_or(cfg.setup.clone(), |c| c.name.clone());
            cfg.out_dir = Some(out.or(cfg.out_dir.take()).unwrap_or_else(|| PathBuf::from("out").join(&name)));
            let report = run_example(&cfg);
            print_summary(&report);
            if let Some(dir) = &cfg.out_dir {
                println!("report: {}", dir.join("report.json").display());
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Plot { report, what, out } => {
            let r = RunReport::read(&report)?;
            let dir = out.unwrap_or_else(|| report.parent().map(|p| p.join("plots")).unwrap_or_else(|| PathBuf::from("plots")));
            let files = emit_plot_data(&r, what, &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Strata { setup, level } => {
            let s = load_setup(&setup)?;
            let cat = ModuliCatalog::from_setup(&s);
            let entry = cat.entry(level)?;
            println!("entry {level}: {} (energy {:.6})", entry.label, entry.energy);
            for t in enumerate_strata(&cat, level)? {
                let labels: Vec<&str> = t.0.iter().map(|&i| cat.entries[i - 1].label.as_str()).collect();
                println!("  {t}  chart {}  [{}]", t.gluing_order_name(), labels.join(", "));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Selftest => {
            let results = selftest();
            let mut ok = true;
            for c in &results {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                bail!("selftest failed");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(r: &RunReport) {
    let name = r.setup.as_ref().map_or("?", |s| s.name.as_str());
    println!("setup {name}: {}", r.status);
    if let Some(e) = &r.error {
        println!("  error: {e}");
    }
    for m in &r.moduli {
        if !m.components.is_empty() {
            println!("  M({}) {:?}: {} component(s)", m.label, m.status, m.components.len());
        }
    }
    if let Some(g) = &r.gluing {
        for p in &g.pairs {
            println!("  glue {} -> M({}, {}): {} zero(s), signed {}", p.pair.label(), p.contributes_to.0, p.contributes_to.1, p.count.count(), p.count.signed_count);
        }
    }
    if let Some(h) = &r.homology {
        println!("  betti ({:?}) {:?}, over Z/2 {:?}, d^2 = 0: {}", h.ring, h.betti, h.betti_z2, h.d_squared_zero);
    }
    for c in r.checks.iter().filter(|c| !c.passed) {
        println!("  FAILED {}: {}", c.name, c.detail);
    }
}
