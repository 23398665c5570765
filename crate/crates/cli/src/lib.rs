//! Command-line front end: dataset synthesis, training, evaluation, ablation
//! tables, parameter counts, gradient checks and spatial-pooling reports.
//!
//! [`run_cli`] returns the process exit code: 0 on success, 2 for usage
//! errors, 1 for runtime failures. Every output is written atomically once
//! the command has succeeded, so a failed run leaves no partial files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sgn_core::data::synthetic::{REVERSAL_PAIR, SWAP_PAIR};
use sgn_core::data::{generate_synthetic, parse_dataset, sequence_rng, DatasetManifest, SkeletonSequence, Split, SyntheticConfig};
use sgn_core::eval::{evaluate, run_ablation_suite, smp_report, AblationOptions};
use sgn_core::model::{
    build_model, count_parameters, gradcheck_model, load_checkpoint, save_checkpoint, write_atomic, ModelConfig, Preset,
    Suite,
};
use sgn_core::tensor::GradcheckOptions;
use sgn_core::train::{train, write_log_csv, TrainRecipe};
use sgn_core::{Model32, Tensor64};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "sgn", version, about = "Semantics-guided graph network for skeleton action recognition")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic skeleton dataset.
    Synth(SynthArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Run an ablation suite and write Markdown and CSV tables.
    Ablate(AblateArgs),
    /// Print the parameter count of a preset.
    Params(ParamsArgs),
    /// Compare analytic and finite-difference gradients of a preset.
    Gradcheck(GradcheckArgs),
    /// Report the joints most often selected by spatial max pooling.
    SmpVis(SmpVisArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    joints: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `model` (a full model config) and `recipe` sections.
    #[arg(long, conflicts_with_all = ["preset", "width_divisor"])]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Replaces the recipe's epoch count and drops milestones past it.
    #[arg(long)]
    epochs: Option<usize>,
    /// Use the 120-epoch schedule instead of the 40-epoch one.
    #[arg(long)]
    full_recipe: bool,
    /// Per-epoch log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// table1, table2 or table3.
    #[arg(long)]
    suite: String,
    /// Train and evaluate every preset on this dataset; counts only without it.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    full_recipe: bool,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long)]
    out_md: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 25)]
    joints: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 60)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "sgn")]
    preset: String,
    /// Divide all channel widths by 8.
    #[arg(long)]
    small: bool,
    #[arg(long, default_value_t = 4)]
    joints: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    coords_per_tensor: usize,
}

#[derive(Args, Debug)]
struct SmpVisArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Split whose sequences are reported.
    #[arg(long, default_value = "test")]
    split: String,
    /// Bar chart of the aggregated top-k counts.
    #[arg(long)]
    svg: Option<PathBuf>,
}

/// Contents of the `train --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    #[serde(default = "TrainRecipe::desk")]
    pub recipe: TrainRecipe,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let seed = cli.seed.unwrap_or(0);
    let result = match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval_cmd(a, seed),
        Command::Ablate(a) => ablate(a, seed),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed),
        Command::SmpVis(a) => smp_vis(a, seed),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> Result<DatasetManifest> {
    parse_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let cfg = SyntheticConfig {
        joints: a.joints,
        classes: a.classes,
        frames: a.frames,
        templates: Vec::new(),
        noise_std: a.noise,
        sequences_per_class: a.per_class,
        test_fraction: a.test_fraction,
        seed,
    };
    let m = generate_synthetic(&cfg)?;
    sgn_core::data::write_dataset(&m, &a.out)?;
    println!(
        "wrote {} sequences ({} train, {} test) to {}",
        m.sequences.len(),
        m.count(Split::Train),
        m.count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn base_recipe(full: bool) -> TrainRecipe {
    if full {
        TrainRecipe::default()
    } else {
        TrainRecipe::desk()
    }
}

fn with_epochs(mut recipe: TrainRecipe, epochs: Option<usize>) -> TrainRecipe {
    if let Some(e) = epochs {
        recipe.epochs = e;
        recipe.milestones.retain(|&m| m < e);
    }
    recipe
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let data = load_data(&a.data)?;
    let (model_cfg, recipe) = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let f: TrainFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            (f.model, f.recipe)
        }
        None => {
            let preset = Preset::from_name(a.preset.as_deref().unwrap_or("sgn"))?;
            let cfg = preset
                .config(data.joints, a.frames, data.classes)
                .scaled_widths(a.width_divisor.unwrap_or(1));
            (cfg, base_recipe(a.full_recipe))
        }
    };
    let recipe = TrainRecipe {
        seed,
        ..with_epochs(recipe, a.epochs)
    };
    recipe.validate()?;
    let model: Model32 = build_model(&model_cfg, seed)?;
    println!("training {} parameters for {} epochs", model.count_parameters(), recipe.epochs);
    let out = train(model, &data, &recipe, &mut |row| {
        let val = row.val_acc.map_or_else(|| "-".to_string(), |v| format!("{:.3}", v));
        println!(
            "epoch {:>3}  lr {:.0e}  loss {:.4}  train acc {:.3}  val acc {val}  {:.1}s",
            row.epoch + 1,
            row.lr,
            row.train_loss,
            row.train_acc,
            row.wall_seconds
        );
    })?;
    save_checkpoint(&out.model, &a.out)?;
    if let Some(log) = &a.log {
        write_log_csv(&out.log, log)?;
    }
    println!("checkpoint {} (crc32 {:08x})", a.out.display(), out.model.checksum()?);
    Ok(())
}

#[derive(Serialize)]
struct EvalJson<'a> {
    accuracy: f64,
    per_class_accuracy: &'a [Option<f64>],
    confusion: &'a [Vec<usize>],
    samples: usize,
    seed: u64,
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let model: Model32 = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let data = load_data(&a.data)?;
    let r = evaluate(&model, &data, a.samples, seed)?;
    println!(
        "accuracy {:.2}% on {} test items ({} samples, seed {seed})",
        100.0 * r.accuracy,
        r.total(),
        r.samples
    );
    for (c, acc) in r.per_class_accuracy.iter().enumerate() {
        if let Some(acc) = acc {
            let name = data.class_names.get(c).map_or("", String::as_str);
            println!("  class {c:>3} {name:<24} {:.2}%", 100.0 * acc);
        }
    }
    if let Some(path) = &a.json {
        let j = EvalJson {
            accuracy: r.accuracy,
            per_class_accuracy: &r.per_class_accuracy,
            confusion: &r.confusion,
            samples: r.samples,
            seed,
        };
        write_text(path, &serde_json::to_string_pretty(&j)?)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs, seed: u64) -> Result<()> {
    let suite = Suite::from_name(&a.suite)?;
    let data = a.data.as_deref().map(load_data).transpose()?;
    let recipe = with_epochs(base_recipe(a.full_recipe), a.epochs);
    recipe.validate()?;
    let groups = match &data {
        Some(d) if d.classes > REVERSAL_PAIR.1 => vec![
            ("swap-pair".to_string(), vec![SWAP_PAIR.0, SWAP_PAIR.1]),
            ("reversal-pair".to_string(), vec![REVERSAL_PAIR.0, REVERSAL_PAIR.1]),
        ],
        _ => Vec::new(),
    };
    let opts = AblationOptions {
        width_divisor: a.width_divisor,
        samples: a.samples,
        seed,
        groups,
    };
    let report = run_ablation_suite::<f32>(suite, data.as_ref(), &recipe, &opts)?;
    let md = report.to_markdown();
    let csv = report.to_csv()?;
    print!("{md}");
    if let Some(p) = &a.out_md {
        write_text(p, &md)?;
    }
    if let Some(p) = &a.out_csv {
        write_text(p, &csv)?;
    }
    if report.rows.iter().any(|r| !r.count_matches) {
        bail!("some parameter counts differ from the published values");
    }
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let preset = Preset::from_name(&a.preset)?;
    let cfg = preset.config(a.joints, a.frames, a.classes).scaled_widths(a.width_divisor);
    println!("{}", count_parameters(&cfg)?);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, seed: u64) -> Result<()> {
    let preset = Preset::from_name(&a.preset)?;
    let cfg = preset
        .config(a.joints, a.frames, a.classes)
        .scaled_widths(if a.small { 8 } else { 1 });
    let mut model = build_model::<f64>(&cfg, seed)?;
    // zero biases park ReLUs on their kink
    model.randomize_biases(0.1, seed ^ 0x5eed);
    let mut rng = sequence_rng(seed, 0, "gradcheck-input");
    let x = Tensor64::uniform(&[2, a.frames, a.joints, 3], -1.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..2).map(|i| i % a.classes).collect();
    let opts = GradcheckOptions {
        max_coords_per_tensor: a.coords_per_tensor,
        seed,
        ..GradcheckOptions::default()
    };
    let r = gradcheck_model(&model, &x, &labels, 0.1, opts)?;
    println!(
        "max relative error {:.3e} over {} coordinates",
        r.max_rel_error, r.coords_checked
    );
    if r.max_rel_error >= GRADCHECK_TOLERANCE {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", r.max_rel_error);
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?} (expected train, val or test)"),
    })
}

fn smp_vis(a: SmpVisArgs, seed: u64) -> Result<()> {
    let split = parse_split(&a.split)?;
    let model: Model32 = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let data = load_data(&a.data)?;
    let seqs: Vec<&SkeletonSequence> = data.split(split).collect();
    if seqs.is_empty() {
        bail!("the {} split is empty", a.split);
    }
    let mut csv = String::from("sequence_id,rank,joint,count\n");
    let mut totals = vec![0usize; data.joints];
    for s in &seqs {
        let ranked = smp_report(&model, s, data.joints, seed)?;
        for (j, c) in &ranked {
            totals[*j] += c;
        }
        for (rank, (j, c)) in ranked.iter().take(a.top_k).enumerate() {
            let _ = writeln!(csv, "{},{},{j},{c}", csv_field(&s.id), rank + 1);
        }
    }
    let top = sgn_core::frame::rank_joints(&totals, a.top_k);
    let svg = a.svg.as_ref().map(|_| bar_chart(&top));
    write_text(&a.out, &csv)?;
    if let (Some(path), Some(svg)) = (&a.svg, svg) {
        write_text(path, &svg)?;
    }
    println!("top joints over {} sequences:", seqs.len());
    for (j, c) in top {
        println!("  joint {j:>3}  {c}");
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn bar_chart(counts: &[(usize, usize)]) -> String {
    let (bar, gap, height) = (40.0, 12.0, 200.0);
    let max = counts.iter().map(|c| c.1).max().unwrap_or(1).max(1) as f64;
    let width = gap + counts.len() as f64 * (bar + gap);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        height + 40.0
    );
    for (i, (j, c)) in counts.iter().enumerate() {
        let h = height * *c as f64 / max;
        let x = gap + i as f64 * (bar + gap);
        let _ = writeln!(
            s,
            "  <rect x=\"{x}\" y=\"{}\" width=\"{bar}\" height=\"{h}\" fill=\"#4a7ab5\"/>",
            10.0 + height - h
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">j{j} ({c})</text>",
            x + bar / 2.0,
            height + 28.0
        );
    }
    s.push_str("</svg>\n");
    s
}
