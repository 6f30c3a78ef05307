//! Command-line entry point: one binary, subcommand per pipeline stage.
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::align::{AlignmentWeights, ComponentLabels, RowRole, TextDistribution};
use crate::decouple::{decouple, link_pronouns, mask_object_name, SemanticComponents};
use crate::deptree::{parse_conllu, DependencyTree};
use crate::error::{Error, Result};
use crate::inference;
use crate::losses::{position_loss, semantic_loss, LossConfig, PositiveSets};
use crate::numcore::{fd_check, Matrix, Tape};
use crate::toybench::{
    ablate, chance_level, eval_corpus, evaluate, gen_corpus, train, AblationCell, Checkpoint,
    ComponentSet, EvalMode, LossSet, ToyConfig,
};

#[derive(Parser)]
#[command(name = "grounder", about = "text-decoupled 3D grounding toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the toy-benchmark subcommands; flags win over the config
/// file.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// JSON config file (ToyConfig); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list out of main,attr,pron,rel,auxi.
    #[arg(long)]
    components: Option<String>,
    /// Comma list out of pos,sem.
    #[arg(long)]
    losses: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Four comma-separated position-label weights.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse CoNLL-U input and decouple each utterance into components.
    Decouple {
        /// CoNLL-U input file.
        input: PathBuf,
        /// JSONL output path ("-" for stdout).
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Rewrite decoupled utterances with the object name masked.
    Mask {
        /// JSONL input produced by `decouple`.
        input: PathBuf,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Generate a synthetic corpus as JSONL.
    GenCorpus {
        #[command(flatten)]
        flags: RunFlags,
        /// Number of examples; defaults to the config's train_scenes.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Train the toy model and write a checkpoint plus metrics.
    Train {
        #[command(flatten)]
        flags: RunFlags,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON output path.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a freshly generated evaluation corpus.
    Eval {
        /// Checkpoint written by `train`.
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "regular")]
        mode: EvalMode,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Run the loss/component ablation grid and print the report table.
    Ablate {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Recompute a loss fixture and compare against its expected value.
    LossCheck {
        /// Fixture JSON; the built-in fixture when omitted.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Finite-difference check of the loss gradients on a random instance.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Score candidates against each component and select the target.
    Infer {
        /// Fixture JSON with object/text features and components.
        fixture: PathBuf,
        #[arg(long, default_value = "-")]
        out: String,
    },
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    match s {
        "regular" => Ok(EvalMode::Regular),
        "masked" => Ok(EvalMode::Masked),
        other => Err(format!("unknown mode {other:?} (regular|masked)")),
    }
}

fn resolve_config(flags: &RunFlags) -> Result<ToyConfig> {
    let mut cfg: ToyConfig = match &flags.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => ToyConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(components) = &flags.components {
        cfg.components = ComponentSet::parse(components)?;
    }
    if let Some(losses) = &flags.losses {
        cfg.losses_enabled = LossSet::parse(losses)?;
    }
    if let Some(tau) = flags.tau {
        cfg.loss.tau = tau;
    }
    if let Some(lambda) = &flags.lambda {
        let parts: Vec<f64> = lambda
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad --lambda: {e}")))?;
        if parts.len() != 4 {
            return Err(Error::Config("--lambda needs four values".into()));
        }
        cfg.weights = AlignmentWeights {
            lambda1: parts[0],
            lambda2: parts[1],
            lambda3: parts[2],
            lambda4: parts[3],
        };
    }
    if let Some(epochs) = flags.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(path: &str, contents: &str) -> Result<()> {
    if path == "-" {
        print!("{contents}");
        Ok(())
    } else {
        Ok(fs::write(path, contents)?)
    }
}

fn cmd_decouple(input: &Path, out: &str) -> Result<()> {
    let trees = parse_conllu(&fs::read_to_string(input)?)?;
    let mut lines = String::new();
    for tree in trees {
        let components = link_pronouns(&decouple(&tree)?, &tree);
        lines.push_str(&serde_json::to_string(&components)?);
        lines.push('\n');
    }
    write_out(out, &lines)
}

/// One line of `mask` output: the rewritten utterance and its components.
#[derive(Debug, Serialize, Deserialize)]
struct MaskedRecord {
    masked_text: String,
    components: SemanticComponents,
}

/// Input: JSONL of serialized dependency trees (one utterance per line).
fn cmd_mask(input: &Path, out: &str) -> Result<()> {
    let mut lines = String::new();
    for (lineno, line) in fs::read_to_string(input)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tree: DependencyTree = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        tree.validate()?;
        let components = link_pronouns(&decouple(&tree)?, &tree);
        let (masked_text, masked) = mask_object_name(&components, &tree);
        let record = MaskedRecord {
            masked_text,
            components: masked,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    write_out(out, &lines)
}

fn cmd_gen_corpus(flags: &RunFlags, count: Option<usize>, out: &str) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let count = count.unwrap_or(cfg.train_scenes);
    let corpus = gen_corpus(cfg.seed, count, &cfg)?;
    let mut lines = String::new();
    for example in &corpus {
        lines.push_str(&serde_json::to_string(example)?);
        lines.push('\n');
    }
    write_out(out, &lines)
}

fn cmd_train(flags: &RunFlags, out: &Path, metrics: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(flags)?;
    eprintln!("resolved config: {}", serde_json::to_string(&cfg)?);
    let (model, report) = train(&cfg)?;
    let checkpoint = Checkpoint::new(model, cfg);
    fs::write(out, serde_json::to_string(&checkpoint)?)?;
    if let Some(path) = metrics {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    println!("final_loss {:.12}", report.final_loss);
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    mode: EvalMode,
    accuracy: f64,
    chance: f64,
    examples: usize,
}

fn cmd_eval(checkpoint: &Path, mode: EvalMode, out: &str) -> Result<()> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(checkpoint)?)?;
    ckpt.validate()?;
    let eval = eval_corpus(&ckpt.config)?;
    let accuracy = evaluate(&ckpt.model, &eval, mode, &ckpt.config)?;
    let report = EvalReport {
        mode,
        accuracy,
        chance: chance_level(&eval),
        examples: eval.len(),
    };
    write_out(out, &format!("{}\n", serde_json::to_string_pretty(&report)?))
}

fn cmd_ablate(flags: &RunFlags, seeds: &str, out: &str) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad --seeds: {e}")))?;
    let cells = vec![
        AblationCell {
            name: "dense-both".into(),
            components: ComponentSet::dense(),
            losses: LossSet::default(),
        },
        AblationCell {
            name: "dense-pos".into(),
            components: ComponentSet::dense(),
            losses: LossSet {
                position: true,
                semantic: false,
            },
        },
        AblationCell {
            name: "dense-sem".into(),
            components: ComponentSet::dense(),
            losses: LossSet {
                position: false,
                semantic: true,
            },
        },
        AblationCell {
            name: "sparse-both".into(),
            components: ComponentSet::sparse(),
            losses: LossSet::default(),
        },
    ];
    let report = ablate(&cfg, &cells, &seeds)?;
    eprint!("{}", report.render_table());
    write_out(out, &format!("{}\n", serde_json::to_string_pretty(&report)?))
}

/// Fixture for `loss-check`: features, the text distribution, positive
/// sets, and a loss config. Position logits are o t'.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossFixture {
    o: Matrix,
    t: Matrix,
    p_text: Matrix,
    row_roles: Vec<RowRole>,
    positives: PositiveSets,
    config: LossConfig,
    /// Expected values checked to the given absolute tolerance; omitted
    /// entries are printed without checking.
    #[serde(default)]
    expected_position: Option<f64>,
    #[serde(default)]
    expected_semantic: Option<f64>,
    #[serde(default = "default_loss_tol")]
    tolerance: f64,
}

fn default_loss_tol() -> f64 {
    1e-9
}

const BUILTIN_LOSS_FIXTURE: &str = include_str!("../fixtures/loss_check.json");

fn cmd_loss_check(fixture: Option<&Path>) -> Result<()> {
    let raw = match fixture {
        Some(path) => fs::read_to_string(path)?,
        None => BUILTIN_LOSS_FIXTURE.to_string(),
    };
    let fx: LossFixture = serde_json::from_str(&raw)?;
    fx.config.validate()?;
    let dist = TextDistribution {
        rows: fx.p_text.clone(),
        row_roles: fx.row_roles.clone(),
    };

    let tape = Tape::new();
    let o = tape.leaf(fx.o.clone());
    let t = tape.constant(fx.t.clone());
    let l_pred = tape.matmul_nt(o, t)?;
    let pos = tape.value(position_loss(&tape, l_pred, &dist)?).as_scalar();
    let sem = tape
        .value(semantic_loss(&tape, o, t, &fx.positives, &fx.config)?)
        .as_scalar();
    println!("position_loss {:.12}", pos);
    println!("semantic_loss {:.12}", sem);

    let fd = fd_check(
        |tape, leaf| {
            let t = tape.constant(fx.t.clone());
            let l_pred = tape.matmul_nt(leaf, t)?;
            let p = position_loss(tape, l_pred, &dist)?;
            let s = semantic_loss(tape, leaf, t, &fx.positives, &fx.config)?;
            tape.add(p, s)
        },
        &fx.o,
        1e-5,
    )?;
    println!("fd_check {:.3e}", fd);

    let mut ok = fd < 1e-4;
    if let Some(exp) = fx.expected_position {
        ok &= (pos - exp).abs() <= fx.tolerance;
    }
    if let Some(exp) = fx.expected_semantic {
        ok &= (sem - exp).abs() <= fx.tolerance;
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric("loss check failed".into()))
    }
}

fn cmd_grad_check(seed: u64) -> Result<()> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 3;
    let l = 5;
    let d = 16;
    let o = Matrix::from_fn(k, d, |_, _| rng.gen_range(-0.1..0.1));
    let t = Matrix::from_fn(l, d, |_, _| rng.gen_range(-0.1..0.1));
    let cfg = LossConfig::default();
    let pos = PositiveSets {
        l,
        candidate_positives: vec![
            vec![(crate::decouple::ComponentKind::MainObject, vec![0, 1])],
            vec![(crate::decouple::ComponentKind::AuxiliaryObject, vec![2])],
            vec![(crate::decouple::ComponentKind::None, vec![l - 1])],
        ],
        token_positives: vec![vec![0], vec![0], vec![1], vec![], vec![2]],
        token_w_plus: vec![1.0, 0.2, 1.0, 0.0, 1.0],
        w_minus: vec![1.0, 1.0, 2.0, 1.0, 1.0],
        valid: vec![true, true, true, false, true],
    };
    let err = fd_check(
        |tape, leaf| {
            let t_node = tape.constant(t.clone());
            semantic_loss(tape, leaf, t_node, &pos, &cfg)
        },
        &o,
        1e-5,
    )?;
    let ok = err < 1e-4;
    println!("{:.3e} {}", err, if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient error {err} too large")))
    }
}

/// Fixture for `infer`: features plus the decoupled components of the
/// utterance.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferFixture {
    object_features: Matrix,
    text_features: Matrix,
    components: SemanticComponents,
    #[serde(default = "default_tau")]
    tau: f64,
}

fn default_tau() -> f64 {
    0.07
}

#[derive(Debug, Serialize)]
struct InferOutput {
    scores_per_kind: Vec<inference::ComponentScore>,
    s_all: Vec<f64>,
    selected: usize,
}

fn cmd_infer(fixture: &Path, out: &str) -> Result<()> {
    let fx: InferFixture = serde_json::from_str(&fs::read_to_string(fixture)?)?;
    let labels = ComponentLabels::build(&fx.components, fx.text_features.rows)?;
    let scores = inference::all_component_scores(
        &fx.object_features,
        &fx.text_features,
        &labels,
        fx.tau,
    )?;
    let s_all = inference::combined_score(&scores)?;
    let selected = inference::select_target(&s_all)?;
    let output = InferOutput {
        scores_per_kind: scores,
        s_all,
        selected,
    };
    write_out(out, &format!("{}\n", serde_json::to_string_pretty(&output)?))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decouple { input, out } => cmd_decouple(&input, &out),
        Command::Mask { input, out } => cmd_mask(&input, &out),
        Command::GenCorpus { flags, count, out } => cmd_gen_corpus(&flags, count, &out),
        Command::Train {
            flags,
            out,
            metrics,
        } => cmd_train(&flags, &out, metrics.as_deref()),
        Command::Eval {
            checkpoint,
            mode,
            out,
        } => cmd_eval(&checkpoint, mode, &out),
        Command::Ablate { flags, seeds, out } => cmd_ablate(&flags, &seeds, &out),
        Command::LossCheck { fixture } => cmd_loss_check(fixture.as_deref()),
        Command::GradCheck { seed } => cmd_grad_check(seed),
        Command::Infer { fixture, out } => cmd_infer(&fixture, &out),
    }
}

/// 0 on success, 1 on runtime failure, 2 on invalid input.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. }
        | Error::Unparseable(_)
        | Error::Config(_)
        | Error::Capacity { .. }
        | Error::Structure { .. }
        | Error::Decouple { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
