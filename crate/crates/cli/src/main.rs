//! Command-line entry point: scene generation, training, evaluation and inspection.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 runtime failure.

mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kgnav::eval::{
    by_kind, format_table, run_eval, summaries_to_jsonl, summarize, EvalConfig, EpisodeResult, Selection, Summary,
};
use kgnav::nn::Tape;
use kgnav::policy::{Agent, Network};
use kgnav::scene::{generate_scene, save_scene, EpisodeConfig, EpisodeState, GeneratorConfig, Scene, TargetRole};
use kgnav::trainer::{train, Ablation, ModelState, TrainConfig, TrainRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use manifest::{read_scene, Manifest, Split};

/// Marks an error as caused by invalid input (exit code 2).
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub(crate) fn invalid(msg: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.to_string()))
}

#[derive(Parser)]
#[command(name = "kgnav", version, about = "Target-driven navigation with a knowledge graph and attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a scene file parses and validates.
    SimValidate { file: PathBuf },
    /// Generate one scene file.
    SimGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator parameters (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a train/val/test scene set with a manifest.
    GenScenes {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene counts as `train/val/test`.
        #[arg(long, default_value = "20/5/5")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    Train(TrainArgs),
    Eval(EvalArgs),
    /// Roll one greedy episode, tracing attention, and dump graph node embeddings.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        step_cap: u32,
        #[command(flatten)]
        out: OutDir,
    },
}

#[derive(Args)]
struct OutDir {
    /// Output directory; falls back to `KGNAV_OUT`.
    #[arg(long = "out", env = "KGNAV_OUT")]
    path: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = Split::Train)]
    split: Split,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Continue from a checkpoint; the frame counter carries on from it.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split holding the unseen scenes.
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    seen_cap: u32,
    #[arg(long, default_value_t = 1000)]
    unseen_cap: u32,
    #[arg(long, default_value_t = 10)]
    min_start_distance: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample actions instead of taking the most probable one.
    #[arg(long)]
    sample: bool,
    #[command(flatten)]
    out: OutDir,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn generator_config(path: Option<&Path>) -> Result<GeneratorConfig> {
    path.map_or_else(|| Ok(GeneratorConfig::default()), read_toml)
}

fn generate(seed: u64, cfg: &GeneratorConfig) -> Result<Scene> {
    generate_scene(seed, cfg).map_err(|e| invalid(format!("scene generation with seed {seed}: {e}")))
}

fn sim_validate(file: &Path) -> Result<()> {
    let scene = read_scene(file)?;
    println!(
        "{}: {}x{}, {} objects, {} targets, vocabulary {}",
        file.display(),
        scene.width,
        scene.height,
        scene.objects.len(),
        scene.targets.len(),
        scene.vocab_size()
    );
    Ok(())
}

fn sim_gen(seed: u64, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = generator_config(config)?;
    write(out, save_scene(&generate(seed, &cfg)?))
}

fn parse_split_counts(spec: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = spec.split('/').collect();
    let counts: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match counts.as_deref() {
        Some(&[a, b, c]) => Ok([a, b, c]),
        _ => Err(invalid(format!("split {spec:?} is not `train/val/test` counts"))),
    }
}

fn gen_scenes(seed: u64, split: &str, config: Option<&Path>, out: &Path) -> Result<()> {
    let counts = parse_split_counts(split)?;
    let cfg = generator_config(config)?;
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (split, count) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts) {
        for i in 0..count {
            let scene_seed: u64 = rng.gen();
            let file = format!("{split}_{i:03}.scene");
            write(&out.join(&file), save_scene(&generate(scene_seed, &cfg)?))?;
            entries.push((split, file));
        }
    }
    let manifest = Manifest { dir: out.to_path_buf(), entries };
    write(&out.join("manifest.txt"), manifest.render())?;
    write(&out.join("generator.toml"), toml::to_string(&cfg)?)?;
    println!("wrote {} scenes to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let resume = args.resume.as_deref().map(ModelState::load).transpose().map_err(invalid)?;
    let mut cfg = match (&args.config, &resume) {
        (Some(path), _) => read_toml(path)?,
        (None, Some(state)) => state.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(a) = args.ablation {
        cfg.apply_ablation(a);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(f) = args.frames {
        cfg.frames = f;
    }
    cfg.validate().map_err(invalid)?;
    let scenes = Manifest::load(&args.manifest)?.scenes(args.split)?;
    let out = train(TrainRun { config: &cfg, scenes: &scenes, out_dir: Some(&args.out.path), resume }).map_err(|e| match e {
        kgnav::trainer::TrainError::Io { .. } => anyhow::Error::new(e),
        other => invalid(other),
    })?;
    let sr = out.metrics.last().map_or(0.0, |m| m.sr_ma);
    println!(
        "frames {} episodes {} success moving average {:.3} checkpoints {}",
        out.state.frames,
        out.metrics.len(),
        sr,
        out.checkpoints.len()
    );
    Ok(())
}

fn targets_with_role(scenes: &[Scene], role: Option<TargetRole>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for (t, spec) in scene.targets.iter().enumerate() {
            if role.map_or(true, |r| spec.role == r) {
                out.push((s, t));
            }
        }
    }
    out
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = ModelState::load(&args.checkpoint).map_err(invalid)?;
    let manifest = Manifest::load(&args.manifest)?;
    let seen_scenes = manifest.scenes(Split::Train)?;
    let unseen_scenes = manifest.scenes(args.split)?;
    let selection = match (model.config.random_policy, args.sample) {
        (true, _) => Selection::Random,
        (false, true) => Selection::Sample,
        (false, false) => Selection::Greedy,
    };
    let base = EvalConfig {
        episodes_per_target: args.episodes,
        step_cap: args.seen_cap,
        seed: args.seed,
        min_start_distance: args.min_start_distance,
        selection,
    };
    let unseen = EvalConfig { step_cap: args.unseen_cap, ..base.clone() };
    let regimes: [(&str, &[Scene], Option<TargetRole>, &EvalConfig); 3] = [
        ("seen", &seen_scenes, Some(TargetRole::Train), &base),
        ("unseen_target", &seen_scenes, Some(TargetRole::Holdout), &unseen),
        ("unseen_scene", &unseen_scenes, None, &unseen),
    ];
    let mut rows: Vec<Summary> = Vec::new();
    let mut episodes: Vec<(String, EpisodeResult)> = Vec::new();
    for (name, scenes, role, cfg) in regimes {
        let targets = targets_with_role(scenes, role);
        let results = run_eval(&model, scenes, &targets, cfg).map_err(|e| match e {
            kgnav::eval::EvalError::Vocabulary { .. } => invalid(e),
            other => anyhow::Error::new(other),
        })?;
        for (kind, group) in by_kind(scenes, &results) {
            if !group.is_empty() {
                rows.push(summarize(name, kind.name(), &group)?);
            }
        }
        episodes.extend(results.into_iter().map(|r| (name.to_string(), r)));
    }
    let out = &args.out.path;
    create_dir(out)?;
    let table = format_table(&rows);
    print!("{table}");
    write(&out.join("eval.txt"), &table)?;
    write(&out.join("eval.jsonl"), summaries_to_jsonl(&rows))?;
    let lines: String = episodes
        .iter()
        .map(|(regime, r)| {
            let mut v = serde_json::to_value(r).expect("result serializes");
            v["regime"] = serde_json::Value::from(regime.as_str());
            v.to_string() + "\n"
        })
        .collect();
    write(&out.join("episodes.jsonl"), lines)?;
    let resolved = format!(
        "checkpoint = {:?}\nmanifest = {:?}\nunseen_split = \"{}\"\nunseen_cap = {}\n\n[eval]\n{}",
        args.checkpoint.display().to_string(),
        args.manifest.display().to_string(),
        args.split,
        args.unseen_cap,
        toml::to_string(&base)?
    );
    write(&out.join("eval.toml"), resolved)
}

fn cmd_inspect(checkpoint: &Path, scene_path: &Path, target: usize, seed: u64, step_cap: u32, out: &Path) -> Result<()> {
    let model = ModelState::load(checkpoint).map_err(invalid)?;
    let scene = read_scene(scene_path)?;
    if scene.vocab_size() != model.config.model.vocab_size {
        return Err(invalid(format!(
            "checkpoint expects {} categories, scene has {}",
            model.config.model.vocab_size,
            scene.vocab_size()
        )));
    }
    let spec = scene
        .targets
        .get(target)
        .ok_or_else(|| invalid(format!("scene has {} targets, asked for {target}", scene.targets.len())))?;
    let episode = EpisodeConfig { max_steps: step_cap, min_start_distance: 10 };
    let (mut env, mut obs) = EpisodeState::reset(&scene, target, seed, &episode).map_err(invalid)?;
    let mut agent = Agent::new(&model.config.model, &model.params, &model.graph, spec.target_observation.clone())?;
    let mut trace = String::from("step\taction\tattended\n");
    while !env.done {
        let output = agent.act(&obs)?;
        let action = output.greedy_action();
        let attended = match &output.attention {
            Some(att) => {
                let mut order: Vec<usize> = (0..att.len()).collect();
                order.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
                order[..3.min(order.len())]
                    .iter()
                    .map(|&c| format!("{}:{:.4}", scene.vocabulary[c], att[c]))
                    .collect::<Vec<_>>()
                    .join("\t")
            }
            None => "-".to_string(),
        };
        trace.push_str(&format!("{}\t{}\t{}\n", env.steps, action.name(), attended));
        obs = env.step(action)?.observation;
    }
    trace.push_str(&format!("# outcome {:?} after {} steps\n", env.outcome, env.steps));
    create_dir(out)?;
    write(&out.join("trace.tsv"), &trace)?;
    print!("{trace}");

    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, &model.config.model, &model.params)?;
    if let Some(nodes) = net.node_features(&mut tape, &model.graph)? {
        let m = tape.value(nodes);
        let mut dump = format!("{} {}\n", m.rows, m.cols);
        for r in 0..m.rows {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
            dump.push_str(&format!("{} {}\n", scene.vocabulary[r], row.join(" ")));
        }
        write(&out.join("embedding.txt"), dump)?;
    }
    write(
        &out.join("inspect.toml"),
        format!(
            "checkpoint = {:?}\nscene = {:?}\ntarget = {target}\nseed = {seed}\nstep_cap = {step_cap}\n",
            checkpoint.display().to_string(),
            scene_path.display().to_string()
        ),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SimValidate { file } => sim_validate(&file),
        Command::SimGen { seed, config, out } => sim_gen(seed, config.as_deref(), &out),
        Command::GenScenes { seed, split, config, out } => gen_scenes(seed, &split, config.as_deref(), &out.path),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Inspect { checkpoint, scene, target, seed, step_cap, out } => {
            cmd_inspect(&checkpoint, &scene, target, seed, step_cap, &out.path)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Invalid>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
