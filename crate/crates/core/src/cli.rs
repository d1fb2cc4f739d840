//! Command-line surface. Every command works inside the run directory
//! named by the configuration hash and reads the artifacts of the steps
//! before it.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::RunConfig;
use crate::data::{self, BetaUnits, SyntheticConfig};
use crate::evaluation::{self, compare, evaluate, EvalResult};
use crate::pipeline::{self, Split};
use crate::scenarios::{PcaModel, ScenarioBatch};
use crate::strategies::{PolicyStack, PolicyStrategy, Strategy};
use crate::training::{train_from, TrainState, TrainingError};

pub const PARAMS: &str = "params.csv";
pub const MODEL: &str = "pca_model.json";
pub const SETUP: &str = "setup.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const POLICY: &str = "policy.bin";
pub const LOSS: &str = "training_loss.csv";
pub const EVAL_DIR: &str = "eval";
pub const COMPARE_DIR: &str = "compare";

#[derive(Debug, Parser)]
#[command(name = "deep-alm", version, about = "Runoff ALM: scenario generation, policy training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set optimizer.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyKind {
    Trained,
    Benchmark,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalise the Svensson parameter history into the run directory.
    Ingest,
    /// Fit the factor model and record the opening balance sheet.
    Calibrate,
    /// Draw the training, validation and evaluation scenarios.
    Simulate,
    /// Train the policy stack.
    Train {
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate strategies on the held-out scenarios.
    Evaluate {
        #[arg(long, value_enum, num_args = 1.., default_values_t = [StrategyKind::Trained, StrategyKind::Benchmark])]
        strategy: Vec<StrategyKind>,
    },
    /// Paired comparison of two strategies on the held-out scenarios.
    Compare {
        #[arg(long, value_enum, default_value_t = StrategyKind::Trained)]
        a: StrategyKind,
        #[arg(long, value_enum, default_value_t = StrategyKind::Benchmark)]
        b: StrategyKind,
    },
    /// Ingest, calibrate, simulate, train, evaluate and compare.
    Pipeline,
    /// Write the synthetic Svensson history (betas in percent).
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the resolved configuration and its run directory.
    ShowConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.workers {
        ensure!(n > 0, "--workers must be positive");
        // a pool may already exist when called in-process more than once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::MakeFixture { out, seed } = &cli.command {
        return make_fixture(out, *seed);
    }
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    let ctx = RunContext::create(cfg)?;
    match cli.command {
        Command::Ingest => ctx.ingest(),
        Command::Calibrate => ctx.calibrate(),
        Command::Simulate => ctx.simulate(),
        Command::Train { resume } => ctx.train(resume),
        Command::Evaluate { strategy } => ctx.evaluate(&strategy),
        Command::Compare { a, b } => ctx.compare(a, b),
        Command::Pipeline => ctx.pipeline(),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_toml());
            println!("# run directory: {}", ctx.dir.display());
            Ok(())
        }
        Command::MakeFixture { .. } => unreachable!(),
    }
}

fn make_fixture(out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let rows = data::synthetic_history(&cfg);
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    data::write_ecb_csv(&rows, 100.0, BufWriter::new(file))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

pub struct RunContext {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).with_context(|| format!("missing input {}; run the earlier steps first", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).with_context(|| format!("creating {}", path.display()))
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut w = create(&tmp)?;
    f(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

impl RunContext {
    pub fn create(cfg: RunConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(RunContext { cfg, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn ingest(&self) -> Result<()> {
        let rows = pipeline::load_rows(&self.cfg)?;
        write_atomic(&self.path(PARAMS), |w| Ok(data::write_ecb_csv(&rows, 1.0, w)?))?;
        println!("ingest: {} parameter rows ({} .. {})", rows.len(), rows[0].date, rows[rows.len() - 1].date);
        Ok(())
    }

    fn rows(&self) -> Result<Vec<data::EcbParamRow>> {
        let path = self.path(PARAMS);
        open(&path)?;
        Ok(data::parse_ecb_csv(&path, BetaUnits::Decimal)?)
    }

    fn market(&self) -> Result<pipeline::Market> {
        pipeline::market(&self.cfg, &self.rows()?)
    }

    pub fn calibrate(&self) -> Result<()> {
        let market = self.market()?;
        let model = pipeline::calibrate(&self.cfg, &market)?;
        let (setup, book) = pipeline::runoff_setup(&self.cfg, &market)?;
        write_atomic(&self.path(MODEL), |w| Ok(serde_json::to_writer_pretty(w, &model)?))?;
        write_atomic(&self.path(SETUP), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["month", "anchor_yield", "liability_flow", "legacy_bond_flow"])?;
            for k in 0..setup.months {
                out.write_record([
                    (k + 1).to_string(),
                    format!("{:?}", market.anchor.at_month(k + 1)),
                    format!("{:?}", setup.liabilities.flows().flows()[k]),
                    format!("{:?}", setup.initial.bonds.flows()[k]),
                ])?;
            }
            out.flush()?;
            Ok(())
        })?;
        let d0 = market.anchor.discount();
        let state = crate::balance_sheet::ValuedState::mark(setup.initial.clone(), &d0, self.cfg.equity.s0, &setup.liabilities);
        let v = state.valuation;
        println!(
            "calibrate: {} daily curves, eigenvalues {:?}",
            market.daily.len(),
            &model.eigvals[..model.n_factors.min(model.eigvals.len())]
        );
        println!(
            "opening book: assets {:.4} cash {:.4} bonds {:.4} stock {:.4} liabilities {:.4} equity {:.4} (legacy scale {:.4})",
            v.assets, v.cash, v.bond_value, v.stock_value, v.liability_value, v.equity, book.scale
        );
        Ok(())
    }

    fn model(&self) -> Result<PcaModel> {
        Ok(serde_json::from_reader(open(&self.path(MODEL))?)?)
    }

    fn batch_path(&self, split: Split) -> PathBuf {
        self.path(&format!("scenarios_{}.bin", split.name()))
    }

    fn batch(&self, split: Split) -> Result<ScenarioBatch> {
        let path = self.batch_path(split);
        ScenarioBatch::read_from(open(&path)?).with_context(|| format!("reading {}", path.display()))
    }

    pub fn simulate(&self) -> Result<()> {
        let market = self.market()?;
        let model = self.model()?;
        for split in Split::ALL {
            let batch = pipeline::scenarios(&self.cfg, &market.anchor, &model, split)?;
            write_atomic(&self.batch_path(split), |w| Ok(batch.write_to(w)?))?;
            println!("simulate: {} {} scenarios (seed {})", batch.len(), split.name(), batch.seed);
        }
        Ok(())
    }

    fn setup(&self) -> Result<crate::balance_sheet::RunoffSetup> {
        Ok(pipeline::runoff_setup(&self.cfg, &self.market()?)?.0)
    }

    pub fn train(&self, resume: bool) -> Result<()> {
        let setup = self.setup()?;
        let train_set = self.batch(Split::Train)?;
        let validation = self.batch(Split::Validation)?;
        let ckpt = self.path(CHECKPOINT);
        let state = if resume && ckpt.exists() {
            let s = TrainState::read_from(open(&ckpt)?)?;
            info!("resuming after epoch {}", s.epoch);
            s
        } else {
            TrainState::start(pipeline::initial_policy(&self.cfg, &setup), &setup, &validation, &self.cfg.objective)?
        };
        let (best, report) = train_from(state, &setup, &train_set, &validation, &self.cfg.objective, &self.cfg.optimizer, |s| {
            write_atomic(&ckpt, |w| Ok(s.write_to(w)?)).map_err(|e| TrainingError::Checkpoint(format!("{e:#}")))
        })?;
        write_atomic(&self.path(POLICY), |w| Ok(best.write_to(w)?))?;
        write_atomic(&self.path(LOSS), |w| Ok(report.write_loss_csv(w)?))?;
        let last = report.epochs.last();
        println!(
            "train: {} epochs, validation loss {:?} -> {:?}, best epoch {:?}, checksum {}",
            report.epochs.len(),
            report.initial_validation_loss,
            last.map(|r| r.validation_loss),
            report.best_epoch,
            report.checksum
        );
        Ok(())
    }

    fn eval_one(&self, kind: StrategyKind, setup: &crate::balance_sheet::RunoffSetup, batch: &ScenarioBatch) -> Result<EvalResult> {
        let horizon = self.cfg.objective.horizon_for(setup.months);
        let result = match kind {
            StrategyKind::Trained => {
                let policy = PolicyStack::read_from(open(&self.path(POLICY))?)?;
                ensure!(policy.months() >= horizon, "policy covers {} months, horizon is {horizon}", policy.months());
                let s = PolicyStrategy { policy: &policy, universe: &setup.universe };
                evaluate(&s as &dyn Strategy, setup, batch, horizon)?
            }
            StrategyKind::Benchmark => evaluate(&pipeline::benchmark(setup) as &dyn Strategy, setup, batch, horizon)?,
        };
        Ok(result)
    }

    fn check_finite(results: &[&EvalResult]) -> Result<()> {
        for r in results {
            if !r.non_finite.is_empty() {
                bail!("{}: {} scenarios produced non-finite values (first: {})", r.strategy, r.non_finite.len(), r.non_finite[0]);
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, kinds: &[StrategyKind]) -> Result<()> {
        let setup = self.setup()?;
        let batch = self.batch(Split::Eval)?;
        let dir = self.path(EVAL_DIR);
        fs::create_dir_all(&dir)?;
        let mut results = Vec::new();
        for &k in kinds {
            let r = self.eval_one(k, &setup, &batch)?;
            evaluation::write_outcomes_csv(&r, &dir.join(format!("{}_outcomes.csv", r.strategy)))?;
            println!(
                "evaluate: {} mean terminal equity {:.4} (sd {:.4}), annual RoE {:.4}%, bankrupt {:.4}",
                r.strategy,
                r.summary.mean,
                r.summary.std_dev,
                100.0 * r.summary.annual_roe,
                r.summary.bankrupt_fraction
            );
            results.push(r);
        }
        let refs: Vec<&EvalResult> = results.iter().collect();
        evaluation::write_summary_csv(&refs, &dir.join("summary.csv"))?;
        Self::check_finite(&refs)
    }

    pub fn compare(&self, a: StrategyKind, b: StrategyKind) -> Result<()> {
        let setup = self.setup()?;
        let batch = self.batch(Split::Eval)?;
        let ra = self.eval_one(a, &setup, &batch)?;
        let rb = self.eval_one(b, &setup, &batch)?;
        Self::check_finite(&[&ra, &rb])?;
        let cmp = compare(ra, rb)?;
        let files = evaluation::report(&cmp, &self.path(COMPARE_DIR), self.cfg.output.histogram_bins, self.cfg.output.svg)?;
        println!(
            "compare: {} vs {}: mean terminal equity {:.4} vs {:.4}, excess RoE {:.4}%, t {:.3}, p {:.3e}",
            cmp.a.strategy,
            cmp.b.strategy,
            cmp.a.summary.mean,
            cmp.b.summary.mean,
            100.0 * cmp.excess_roe,
            cmp.t_statistic,
            cmp.p_value
        );
        println!("report: {}", files.summary.parent().unwrap_or(Path::new(".")).display());
        Ok(())
    }

    pub fn pipeline(&self) -> Result<()> {
        self.ingest()?;
        self.calibrate()?;
        self.simulate()?;
        self.train(false)?;
        self.evaluate(&[StrategyKind::Trained, StrategyKind::Benchmark])?;
        self.compare(StrategyKind::Trained, StrategyKind::Benchmark)?;
        println!("run directory: {}", self.dir.display());
        Ok(())
    }
}
