use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use psenn_core::config::{load_config, render_config, RunConfig};
use psenn_core::eval::{self, Bounds, SummaryOptions};
use psenn_core::explain::{explain, export_report, DEFAULT_K};
use psenn_core::model::Model;
use psenn_core::rng::{self, Purpose};
use psenn_core::training::train;
use psenn_core::uncertainty::{build_reference, EpistemicReference};

#[derive(Parser)]
#[command(name = "psenn", version, about = "Probabilistic prototype classifiers with explanatory uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint; defaults to `<out>/model.ppsenn`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prototype sets sampled per input; defaults to `n_infer_samples`.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct WithReference {
    #[command(flatten)]
    infer: Infer,
    /// Epistemic reference; defaults to `<out>/reference.ppsref`.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `model.ppsenn` and `history.csv`.
    Train(Common),
    /// Build the epistemic reference from the training split.
    Reference(Infer),
    /// Test accuracy and predictive uncertainty per input.
    Eval(Infer),
    /// Accuracy after discarding inputs with U_E above each threshold.
    Reject {
        #[command(flatten)]
        args: WithReference,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.8,0.9,0.95,0.99,1.0")]
        alphas: Vec<f64>,
    },
    /// U_E histograms for the test set and the configured OOD set.
    Ood(WithReference),
    /// Explanation grids and report for one test input.
    Explain {
        #[command(flatten)]
        args: WithReference,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Uncertainty over a grid of latent points (2-D latent models only).
    Map {
        #[command(flatten)]
        args: WithReference,
        /// `x_min,x_max,y_min,y_max`
        #[arg(long, value_delimiter = ',', num_args = 4, default_value = "-3,3,-3,3")]
        bounds: Vec<f64>,
        #[arg(long, default_value_t = 41)]
        resolution: usize,
    },
    /// Test inputs with the highest and lowest U_E.
    Exemplars {
        #[command(flatten)]
        args: WithReference,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Ctx> {
        let mut config = load_config(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
        if let Some(seed) = c.seed {
            config.train.seed = seed;
        }
        let out = c.out.clone().unwrap_or_else(|| config.out_dir.clone());
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Ctx { config, out })
    }

    fn seed(&self) -> u64 {
        self.config.seed()
    }

    fn model(&self, i: &Infer) -> Result<Model> {
        let path = i.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ppsenn"));
        Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    fn n(&self, i: &Infer) -> usize {
        i.n.unwrap_or(self.config.n_infer_samples)
    }

    fn reference(&self, r: &WithReference, model: &Model) -> Result<EpistemicReference> {
        let path = r.reference.clone().unwrap_or_else(|| self.out.join("reference.ppsref"));
        let reference = EpistemicReference::load(&path).with_context(|| format!("loading reference {}", path.display()))?;
        reference.verify(&model.checksum())?;
        Ok(reference)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn cmd_train(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let data = ctx.config.load_split()?;
    println!("train {} / validation {} / test {}", data.train.len(), data.validation.len(), data.test.len());
    let (model, history) = train(&ctx.config.train, &data)?;
    for r in &history.records {
        println!(
            "epoch {:>3}  loss {:.4}  nll {:.4}  rec {:.4}  int {:.4}  kl {:.4}  val_acc {:.4}",
            r.epoch, r.loss_total, r.loss_nll, r.loss_rec, r.loss_int, r.loss_kl, r.val_acc
        );
    }
    if let Some(best) = history.best_epoch {
        println!("best epoch {best}");
    }
    let path = ctx.out.join("model.ppsenn");
    model.save(&path)?;
    println!("wrote {} (sha256 {})", path.display(), model.checksum());
    ctx.write("history.csv", &history.to_csv())?;
    ctx.write("config.toml", &render_config(&ctx.config))?;
    Ok(())
}

fn cmd_reference(i: &Infer) -> Result<()> {
    let ctx = Ctx::new(&i.common)?;
    let model = ctx.model(i)?;
    let data = ctx.config.load_split()?;
    let reference = build_reference(&data.train, &model, ctx.n(i), ctx.seed())?;
    let path = ctx.out.join("reference.ppsref");
    reference.save(&path)?;
    let sizes: Vec<String> = (0..reference.class_count()).map(|c| reference.values(c).len().to_string()).collect();
    println!("wrote {} (class sizes {})", path.display(), sizes.join(","));
    Ok(())
}

fn cmd_eval(i: &Infer) -> Result<()> {
    let ctx = Ctx::new(&i.common)?;
    let model = ctx.model(i)?;
    let test = ctx.config.load_split()?.test;
    let s = eval::summarize(&model, &test, ctx.n(i), ctx.seed(), SummaryOptions { reference: None, aleatoric: true })?;
    let mut rows = String::from("index,label,predicted,p_predicted,total,epistemic_mi,aleatoric_expected_entropy,u_a\n");
    for (k, s) in s.iter().enumerate() {
        let _ = writeln!(
            rows,
            "{k},{},{},{},{},{},{},{}",
            s.label,
            s.predicted,
            s.mean_probs[s.predicted],
            s.predictive.total,
            s.predictive.epistemic_mi,
            s.predictive.aleatoric_expected_entropy,
            s.u_a.expect("requested")
        );
    }
    let acc = eval::accuracy(&s);
    let mean = |f: &dyn Fn(&eval::InputSummary) -> f64| s.iter().map(f).sum::<f64>() / s.len() as f64;
    let summary = format!(
        "count,accuracy,mean_total,mean_epistemic_mi,mean_aleatoric_expected_entropy,mean_u_a\n{},{},{},{},{},{}\n",
        s.len(),
        acc,
        mean(&|s| s.predictive.total),
        mean(&|s| s.predictive.epistemic_mi),
        mean(&|s| s.predictive.aleatoric_expected_entropy),
        mean(&|s| s.u_a.expect("requested"))
    );
    println!("test accuracy {acc:.4} over {} inputs", s.len());
    ctx.write("predictions.csv", &rows)?;
    ctx.write("eval.csv", &summary)?;
    Ok(())
}

fn cmd_reject(r: &WithReference, alphas: &[f64]) -> Result<()> {
    let ctx = Ctx::new(&r.infer.common)?;
    let model = ctx.model(&r.infer)?;
    let reference = ctx.reference(r, &model)?;
    let test = ctx.config.load_split()?.test;
    let rows = eval::rejection_sweep(&model, &test, &reference, alphas, ctx.n(&r.infer), ctx.seed())?;
    for row in &rows {
        println!(
            "alpha {:<5} discarded {:.4}  accuracy_retained {:.4}  err_discarded {:.4}  err_retained {:.4}",
            row.alpha, row.discarded_fraction, row.accuracy_retained, row.error_rate_discarded, row.error_rate_retained
        );
    }
    ctx.write("rejection.csv", &eval::rejection_csv(&rows))?;
    Ok(())
}

fn cmd_ood(r: &WithReference) -> Result<()> {
    let ctx = Ctx::new(&r.infer.common)?;
    let model = ctx.model(&r.infer)?;
    let reference = ctx.reference(r, &model)?;
    let test = ctx.config.load_split()?.test;
    let Some(ood) = ctx.config.load_ood()? else { bail!("the config defines no out-of-distribution set") };
    let s = eval::ood_eval(&model, &reference, &test, &ood, ctx.n(&r.infer), ctx.seed())?;
    println!("in-distribution: {} inputs, median U_E {:.4}", test.len(), s.in_median);
    println!("out-of-distribution: {} inputs, median U_E {:.4}", ood.len(), s.ood_median);
    ctx.write("ood.csv", &eval::ood_csv(&s))?;
    ctx.write(
        "ood_summary.csv",
        &format!("set,count,median_u_e\nin,{},{}\nood,{},{}\n", test.len(), s.in_median, ood.len(), s.ood_median),
    )?;
    Ok(())
}

fn cmd_explain(r: &WithReference, index: usize, k: usize) -> Result<()> {
    let ctx = Ctx::new(&r.infer.common)?;
    let model = ctx.model(&r.infer)?;
    let reference = ctx.reference(r, &model)?;
    let test = ctx.config.load_split()?.test;
    if index >= test.len() {
        bail!("index {index} out of range for {} test inputs", test.len());
    }
    let mut rng = rng::stream(ctx.seed(), Purpose::Explain, index as u64);
    let e = explain(index, test.input(index), &model, &reference, ctx.n(&r.infer), k, &mut rng)?;
    let dir = ctx.out.join(format!("explain_{index}"));
    let report = export_report(&e, &dir)?;
    let u = &report.uncertainty;
    println!(
        "input {index}: label {} predicted {} (p = {:.4}); U_A {:.4}  U_E {:.4}  total {:.4}",
        test.labels[index], report.predicted_class, report.mean_probs[report.predicted_class], u.u_a, u.u_e, u.total
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_map(r: &WithReference, bounds: &[f64], resolution: usize) -> Result<()> {
    let ctx = Ctx::new(&r.infer.common)?;
    let model = ctx.model(&r.infer)?;
    let reference = ctx.reference(r, &model)?;
    let b = Bounds { x_min: bounds[0], x_max: bounds[1], y_min: bounds[2], y_max: bounds[3] };
    let cells = eval::region_map(&model, &reference, b, resolution, ctx.n(&r.infer), ctx.seed())?;
    ctx.write("region_map.csv", &eval::region_csv(&cells))?;
    Ok(())
}

fn cmd_exemplars(r: &WithReference, count: usize) -> Result<()> {
    let ctx = Ctx::new(&r.infer.common)?;
    let model = ctx.model(&r.infer)?;
    let reference = ctx.reference(r, &model)?;
    let test = ctx.config.load_split()?.test;
    let d = eval::exemplar_dump(&model, &reference, &test, ctx.n(&r.infer), count, ctx.seed(), &ctx.out)?;
    for p in [&d.high_grid, &d.low_grid, &d.csv] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Reference(i) => cmd_reference(i),
        Command::Eval(i) => cmd_eval(i),
        Command::Reject { args, alphas } => cmd_reject(args, alphas),
        Command::Ood(r) => cmd_ood(r),
        Command::Explain { args, index, k } => cmd_explain(args, *index, *k),
        Command::Map { args, bounds, resolution } => cmd_map(args, bounds, *resolution),
        Command::Exemplars { args, count } => cmd_exemplars(args, *count),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
