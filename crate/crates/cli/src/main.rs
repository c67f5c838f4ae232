use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tickets_core::checkpoint::{Checkpoint, Stage};
use tickets_core::data::{generate, oracle_accuracies, SynthSpec};
use tickets_core::eval::{export, render_table, report_rows, RecipeResult};
use tickets_core::pipeline::{
    fit_prior, run_recipe, stage2_compress, Compression, DataSource, ExperimentSpec, Pipeline, RunRecord,
    OOD_SPLIT,
};
use tickets_core::sparsity::{coarse_grid, refine_grid, ModuleSizes, Region, SparsityConfig};
use tickets_core::train::{LossKind, LossSetup};

#[derive(Parser)]
#[command(name = "tickets", version, about = "Search sparse and debiased subnetworks of a small vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Bce,
    Lmh,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Bce => LossKind::Bce,
            Loss::Lmh => LossKind::Lmh,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the surrogate model on unbiased data.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage1: fine-tune a pre-trained checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Loss,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage2: compress a fine-tuned checkpoint with the recipe's method.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment file end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the recipe over a modality-specific sparsity grid.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Step of a second, finer grid around the best coarse point.
        #[arg(long)]
        refine_step: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (with its masks, if any) on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Collect run records under a directory into report.csv / report.json.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    ExperimentSpec::load(path).with_context(|| format!("reading {}", path.display()))
}

fn synth_spec(config: Option<&Path>) -> Result<SynthSpec> {
    let Some(path) = config else {
        return Ok(SynthSpec::default());
    };
    match load_spec(path)?.setup.data {
        DataSource::Synth(s) => Ok(s),
        DataSource::Files { .. } => bail!("{} reads datasets from files", path.display()),
    }
}

fn pipeline(spec: &ExperimentSpec) -> Result<Pipeline> {
    Ok(Pipeline::new(spec.setup.clone())?)
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = synth_spec(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let splits = generate(&spec)?;
    fs::create_dir_all(out)?;
    splits.train.save(&out.join("train.jsonl"))?;
    splits.test.save(&out.join("test.jsonl"))?;
    let oracle = oracle_accuracies(&spec)?;
    fs::write(out.join("oracle.json"), serde_json::to_string_pretty(&oracle)?)?;
    println!(
        "{} train / {} test examples in {}",
        splits.train.len(),
        splits.test.len(),
        out.display()
    );
    println!("{}", serde_json::to_string_pretty(&oracle)?);
    Ok(())
}

fn pretrain(config: &Path, out: &Path) -> Result<()> {
    let spec = load_spec(config)?;
    let mut p = pipeline(&spec)?;
    let (state, log) = p.pretrained()?;
    for (step, loss) in &log.probe {
        println!("step {step:>6}  probe loss {loss:.5}");
    }
    Checkpoint::new(Stage::Pretrained, state.clone(), None).save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train(config: &Path, pretrained: Option<&Path>, loss: Loss, seed: u64, out: &Path) -> Result<()> {
    let spec = load_spec(config)?;
    let mut p = pipeline(&spec)?;
    if let Some(path) = pretrained {
        p.set_pretrained(Checkpoint::load(path)?.state)?;
    }
    let (state, records) = p.finetuned(loss.into(), seed)?;
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    Checkpoint::new(Stage::Finetuned, state, None).save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn prune(config: &Path, model: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec = load_spec(config)?;
    let p = pipeline(&spec)?;
    let mut state = Checkpoint::load(model)?.state;
    let prior = fit_prior(&p.train)?;
    let z = spec.setup.entropy_weight;
    let loss = spec.recipe.stage2_loss.map(|l| match l {
        LossKind::Bce => LossSetup::bce(),
        LossKind::Lmh => LossSetup::lmh(&prior, z),
    });
    let c = Compression {
        method: spec.recipe.method,
        loss,
        sparsity: &spec.sparsity,
        init: spec.recipe.mask_init,
        hyper: &spec.setup.mask,
        opt: &spec.setup.optim.stage2,
    };
    let compressed = stage2_compress(&mut state, &p.train, &c, seed)?;
    let audit_path = out.with_extension("audit.json");
    fs::write(&audit_path, compressed.audit.to_json()?)?;
    for r in p.evaluate(&state, Some(&compressed.masks), seed)? {
        println!("{}", serde_json::to_string(&r)?);
    }
    Checkpoint::new(Stage::Compressed, state, Some(compressed.masks)).save(out)?;
    println!(
        "overall sparsity {:.4}, audit passed; wrote {} and {}",
        compressed.audit.overall_sparsity,
        out.display(),
        audit_path.display()
    );
    Ok(())
}

fn summarize(record: &RunRecord) -> Result<()> {
    for (seed, e) in record.failures() {
        eprintln!("seed {seed} failed: {e}");
    }
    let results = [record.full_result()?, record.subnetwork_result()];
    print!("{}", render_table(&report_rows(&results)?));
    Ok(())
}

fn run(config: &Path) -> Result<()> {
    let spec = load_spec(config)?;
    let record = run_recipe(&spec)?;
    summarize(&record)?;
    if let Some(dir) = &spec.output_dir {
        export(&[record.full_result()?, record.subnetwork_result()], dir)?;
        println!("outputs in {}", dir.display());
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn search(config: &Path, refine_step: Option<f64>, out: &Path) -> Result<()> {
    let spec = load_spec(config)?;
    let mut p = pipeline(&spec)?;
    let sizes = ModuleSizes::from_registry(&p.pretrained()?.0.registry);
    let s = spec.sparsity.overall;
    let mut configs = coarse_grid(s, &sizes)?;
    configs.push(SparsityConfig::matrix_specific(s));
    let mut runs = Vec::new();
    let mut evaluate = |cfgs: Vec<SparsityConfig>, runs: &mut Vec<(SparsityConfig, RunRecord)>| -> Result<()> {
        for cfg in cfgs {
            let record = p.run(&spec.recipe, &cfg, &spec.seeds, Some(out))?;
            println!("{:<34} ood {:.4}", cfg.label(), mean(&record.subnetwork_overall(OOD_SPLIT)));
            runs.push((cfg, record));
        }
        Ok(())
    };
    evaluate(configs, &mut runs)?;
    if let Some(step) = refine_step {
        let best = runs
            .iter()
            .filter(|(c, _)| c.modules.is_some() && !c.is_matrix_specific())
            .max_by(|a, b| {
                mean(&a.1.subnetwork_overall(OOD_SPLIT)).total_cmp(&mean(&b.1.subnetwork_overall(OOD_SPLIT)))
            })
            .map(|(c, _)| c.modules.expect("filtered"));
        if let Some(m) = best {
            let around = |v: f64| ((v - 0.1).max(0.0), (v + 0.1).min(1.0));
            let region = Region {
                language: around(m.language),
                visual: around(m.visual),
                cross: around(m.cross),
            };
            evaluate(refine_grid(&region, s, &sizes, step)?, &mut runs)?;
        }
    }
    let mut csv = String::from("s_L,s_R,s_X,scheme,ood_mean,seeds\n");
    for (cfg, r) in &runs {
        let cols = match (cfg.is_matrix_specific(), cfg.modules) {
            (false, Some(m)) => format!("{},{},{}", m.language, m.visual, m.cross),
            _ => ",,".to_string(),
        };
        let ood = r.subnetwork_overall(OOD_SPLIT);
        csv.push_str(&format!(
            "{cols},{},{},{}\n",
            cfg.scheme.as_str(),
            mean(&ood),
            ood.len()
        ));
    }
    fs::write(out.join("search.csv"), csv)?;
    let results: Vec<RecipeResult> = runs.iter().map(|(_, r)| r.subnetwork_result()).collect();
    export(&results, out)?;
    println!("wrote {}", out.join("search.csv").display());
    Ok(())
}

fn eval(config: &Path, model: &Path) -> Result<()> {
    let spec = load_spec(config)?;
    let p = pipeline(&spec)?;
    let ck = Checkpoint::load(model)?;
    for r in p.evaluate(&ck.state, ck.masks.as_ref(), 0)? {
        println!("{}", serde_json::to_string_pretty(&r)?);
    }
    Ok(())
}

fn collect_runs(dir: &Path, found: &mut Vec<RunRecord>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_runs(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "run.json") {
            found.push(serde_json::from_str(&fs::read_to_string(&path)?)?);
        }
    }
    Ok(())
}

fn report(runs: &Path, out: &Path) -> Result<()> {
    let mut records = Vec::new();
    collect_runs(runs, &mut records)?;
    records.sort_by(|a, b| (&a.recipe, a.sparsity.overall.to_bits()).cmp(&(&b.recipe, b.sparsity.overall.to_bits())));
    let mut results: Vec<RecipeResult> = Vec::new();
    for r in &records {
        let full = r.full_result()?;
        if !results.iter().any(|x| x.recipe == full.recipe) {
            results.push(full);
        }
        results.push(r.subnetwork_result());
    }
    print!("{}", render_table(&report_rows(&results)?));
    let (csv, json) = export(&results, out)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Pretrain { config, out } => pretrain(&config, &out),
        Command::Train {
            config,
            pretrained,
            loss,
            seed,
            out,
        } => train(&config, pretrained.as_deref(), loss, seed, &out),
        Command::Prune {
            config,
            model,
            seed,
            out,
        } => prune(&config, &model, seed, &out),
        Command::Run { config } => run(&config),
        Command::Search {
            config,
            refine_step,
            out,
        } => search(&config, refine_step, &out),
        Command::Eval { config, model } => eval(&config, &model),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use tickets_core::pipeline::Recipe;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn recipe_flag_free_config_parses() {
        let r: Recipe = "lxmert(lmh) + mask train(lmh)".parse().unwrap();
        assert_eq!(r.stage1, LossKind::Lmh);
    }
}
