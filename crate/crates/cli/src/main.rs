//! `levycdo`: martingale verification, tranche pricing and curve dumps driven
//! by a JSON scenario file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use levycdo::engine::PathState;
use levycdo::hjm::ForwardSurface;
use levycdo::loss::crossed;
use levycdo::mc::{run_martingale_test, Execution};
use levycdo::pricing::{mc_european, mc_two_leg, par_spread, price_european, stcdo_value, TranchePayoff};
use levycdo::rng::SeedManifest;
use levycdo::scenario::Scenario;
use levycdo::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "levycdo", version, about = "Lévy-driven CDO term structures: verification, pricing and curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario file (JSON).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Override the scenario's path count.
    #[arg(long, global = true)]
    paths: Option<u64>,

    /// Override the scenario's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to the scenario's output.dir or ".".
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads, 0 for all cores. Affects speed only.
    #[arg(long, global = true, env = "LEVYCDO_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Martingale test of discounted (T, x)-bonds; exit 1 on FAIL.
    Verify,
    /// Tranche values, par spreads and European payoffs.
    Price,
    /// P, f and λ surfaces at the scenario's curve times.
    Curves,
}

struct Ctx {
    scenario: Scenario,
    out: PathBuf,
    seed: u64,
    paths: u64,
    exec: Execution,
}

fn execution(threads: Option<usize>) -> Execution {
    if cfg!(feature = "parallel") {
        Execution::Parallel { threads: threads.unwrap_or(0) }
    } else {
        Execution::Sequential
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?))
}

fn verify(ctx: &Ctx) -> Result<bool> {
    let engine = ctx.scenario.build_engine()?;
    let cfg = ctx.scenario.martingale_config(Some(ctx.paths), Some(ctx.seed), ctx.exec);
    let report = run_martingale_test(&engine, &cfg)?;
    let mut w = create(&ctx.out, "martingale.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let summary = report.summary();
    fs::write(ctx.out.join("martingale_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(report.passed)
}

fn price(ctx: &Ctx) -> Result<()> {
    let sc = &ctx.scenario;
    let model = sc.build_model()?;
    let surface = sc.build_surface(&model)?;
    let loss = model.loss.clone();
    let deterministic = sc.riskfree_is_deterministic();
    if !deterministic && !sc.tranches.is_empty() {
        eprintln!("warning: risk-free rates are stochastic; closed-form tranche values assume independence of risk-free and risky bonds and no Monte Carlo check is run");
    }
    let block = sc.simulation.block_size;
    let manifest = SeedManifest::new(ctx.seed, if deterministic { ctx.paths } else { 0 }, block).comment_line();

    let mut w = create(&ctx.out, "tranches.csv")?;
    writeln!(w, "{manifest}")?;
    writeln!(w, "tranche,x1,x2,leg,value,error_estimate")?;
    for (n, tb) in sc.tranches.iter().enumerate() {
        let tr = tb.payoff();
        let spread = tb.spread.unwrap_or(0.0);
        let q = stcdo_value(&surface, 0.0, &tr, spread)?;
        let mut row = |leg: &str, v: f64, e: f64| writeln!(w, "{n},{},{},{leg},{v},{e}", tr.x1, tr.x2);
        row("spread", spread, 0.0)?;
        row("annuity", q.annuity, q.error_estimate)?;
        row("payment_leg", q.payment_leg, q.error_estimate)?;
        row("default_leg", q.default_leg, q.error_estimate)?;
        row("accrual_integral", q.accrual_integral, q.error_estimate)?;
        row("value", q.value, q.error_estimate)?;
        match par_spread(&surface, 0.0, &tr) {
            Ok(s) => row("par_spread", s, 0.0)?,
            Err(Error::DegenerateAnnuity { .. }) => row("par_spread", f64::NAN, 0.0)?,
            Err(e) => return Err(e),
        }
        row("independence_warning", f64::from(u8::from(!deterministic)), 0.0)?;
        if deterministic {
            let mc = mc_two_leg(&surface, &loss, &tr, spread, ctx.paths, ctx.seed, ctx.exec)?;
            row("mc_payment_leg", mc.payment_leg, mc.payment_se)?;
            row("mc_default_leg", mc.default_leg, mc.default_se)?;
            row("mc_value", mc.value, mc.value_se)?;
        }
    }
    w.flush()?;

    let mut w = create(&ctx.out, "tranche_curves.csv")?;
    writeln!(w, "{manifest}")?;
    writeln!(w, "tranche,t,value")?;
    for (n, tb) in sc.tranches.iter().enumerate() {
        let tr: TranchePayoff = tb.payoff();
        let last = *tr.coupon_dates.last().unwrap();
        let steps = (last / surface.h()).round() as usize;
        for j in 0..=steps {
            let t = j as f64 * surface.h();
            writeln!(w, "{n},{t},{}", price_european(&surface, 0.0, t, &tr)?.value)?;
        }
    }
    w.flush()?;

    let mut w = create(&ctx.out, "europeans.csv")?;
    writeln!(w, "{manifest}")?;
    writeln!(w, "european,maturity,method,value,error_estimate")?;
    for (n, eb) in sc.europeans.iter().enumerate() {
        let p = price_european(&surface, 0.0, eb.maturity, &eb.payoff)?;
        writeln!(w, "{n},{},closed_form,{},{}", eb.maturity, p.value, p.error_estimate)?;
        if deterministic {
            let (m, se) = mc_european(&surface, &loss, eb.maturity, &eb.payoff, ctx.paths, ctx.seed, ctx.exec)?;
            writeln!(w, "{n},{},monte_carlo,{m},{se}", eb.maturity)?;
        }
    }
    w.flush()?;
    println!("priced {} tranche(s) and {} European payoff(s) into {}", sc.tranches.len(), sc.europeans.len(), ctx.out.display());
    Ok(())
}

fn curves(ctx: &Ctx) -> Result<()> {
    let sc = &ctx.scenario;
    let engine = sc.build_engine()?;
    let loss = engine.model().loss.clone();
    let times = sc.curves.as_ref().map_or_else(|| vec![0.0], |c| c.times.clone());
    let h = engine.h();
    let wanted: Vec<usize> = times.iter().map(|t| (t / h).round() as usize).collect();
    let mut snaps: Vec<(f64, ForwardSurface)> = Vec::new();
    let mut obs = |st: &PathState| -> Result<()> {
        if wanted.contains(&st.n) {
            snaps.push((st.level, engine.snapshot(st)?));
        }
        Ok(())
    };
    engine.run_path(ctx.seed, 0, &mut obs)?;

    let mut w = create(&ctx.out, "curves.csv")?;
    writeln!(w, "{}", SeedManifest::new(ctx.seed, 1, sc.simulation.block_size).comment_line())?;
    writeln!(w, "t,T,x,level,P,f,lambda,dc2")?;
    for (level, s) in &snaps {
        let t = s.t();
        let one = s.riskfree_index();
        for (b, &x) in s.barriers().iter().enumerate() {
            let alive = !crossed(*level, x);
            let lambda = if alive { loss.intensity_lambda(t, x, *level)? } else { 0.0 };
            let dc2 = if alive { s.cell(b, s.time_index()) - s.cell(one, s.time_index()) - lambda } else { 0.0 };
            for j in s.time_index()..=s.n_cells() {
                let maturity = j as f64 * h;
                let p = s.bond_price(*level, maturity, x)?.price;
                let f = s.cell(b, j.min(s.n_cells() - 1));
                writeln!(w, "{t},{maturity},{x},{level},{p},{f},{lambda},{dc2}")?;
            }
        }
    }
    w.flush()?;
    println!("wrote {} surface(s) to {}", snaps.len(), ctx.out.join("curves.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let path = cli.scenario.ok_or_else(|| Error::Parse("--scenario PATH is required".into()))?;
    let scenario = Scenario::from_path(&path)?;
    let out = cli.out.or_else(|| scenario.output.dir.as_ref().map(|d| scenario.base_dir.join(d))).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(scenario.simulation.seed),
        paths: cli.paths.unwrap_or(scenario.simulation.paths),
        exec: execution(cli.threads),
        scenario,
        out,
    };
    match cli.command {
        Command::Verify => verify(&ctx),
        Command::Price => price(&ctx).map(|_| true),
        Command::Curves => curves(&ctx).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
