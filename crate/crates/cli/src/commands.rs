use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use grasp::evalkit::{self, EvalOptions, ModelPredictor, OccOperand, Predictor};
use grasp::geometry::{pool_to_grid, sdf as signed_distance};
use grasp::model::{
    gate_value, load_checkpoint, save_checkpoint, Checkpoint, GraspModel, ModelSeeds,
};
use grasp::pgm::{self, GrayImage};
use grasp::probe::probe_report;
use grasp::synthdata::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use grasp::training::{loss_csv, train as run_training, TrainEvent};
use grasp::GraspError;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::Common;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| GraspError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GraspError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn json_text(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("json") + "\n"
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.set_seed(common.seed);
    Ok(cfg)
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes; each yields one instance per visible object.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Square image side in pixels [default: 64]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_parser = ["train", "test"], default_value = "train")]
    split: String,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(s) = args.size {
        cfg.scene.size = s;
    }
    let split = if args.split == "test" {
        Split::Test
    } else {
        Split::Train
    };
    let instances = generate_dataset(cfg.seed, args.n, &cfg.scene)?;
    let mut data = Dataset::new(instances, split, cfg.seed, args.n, cfg.scene.clone());
    data.manifest.provenance = Some(cfg.provenance("gen"));
    write_dataset(&args.out, &data)?;
    println!(
        "wrote {} instances from {} scenes to {}",
        data.len(),
        args.n,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `grasp gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `model.ckpt`, `loss.csv` and periodic snapshots.
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// Initial learning rate, decayed along a cosine [default: 0.003]
    #[arg(long)]
    lr: Option<f64>,
    /// Instances per step [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write `step_NNNNNN.ckpt` every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Add the pooled SDF along a learned direction to the prototype queries.
    #[arg(long)]
    sdf_query_mod: bool,
    /// Print the loss every this many steps; 0 silences progress.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    cfg.model.sdf_query_mod |= args.sdf_query_mod;
    let data = read_dataset(&args.data)?;
    cfg.model.image_size = data.manifest.height;
    let provenance = cfg.provenance("train");
    let model = GraspModel::new(cfg.model.clone(), ModelSeeds::from_base(cfg.seed))?;
    create_dir(&args.out)?;

    let out = &args.out;
    let outcome = run_training(model, &data.instances, &cfg.train, |event| {
        match event {
            TrainEvent::Step(r) => {
                if args.log_every > 0 && (r.step % args.log_every == 0 || r.step == 1) {
                    eprintln!("step {} lr {:.3e} loss {:.5}", r.step, r.lr, r.loss.l_total);
                }
            }
            TrainEvent::Checkpoint { step, model } => {
                save_checkpoint(
                    &out.join(format!("step_{step:06}.ckpt")),
                    model,
                    step,
                    Some(&provenance),
                )?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(
        &out.join("model.ckpt"),
        &outcome.model,
        cfg.train.steps,
        Some(&provenance),
    )?;
    write_file(
        &out.join("loss.csv"),
        loss_csv(&outcome.curve, Some(&cfg.comment("train"))),
    )?;
    let last = outcome
        .curve
        .last()
        .map(|r| r.loss.l_total)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {last:.5}, wrote {}",
        cfg.train.steps,
        out.join("model.ckpt").display()
    );
    Ok(())
}

/// Visible-mask protocol flags shared by the evaluation commands.
#[derive(Args, Debug)]
pub struct ProtocolArgs {
    /// Ground-truth or perturbed visible masks as input [default: oracle]
    #[arg(long, value_parser = ["oracle", "standard"])]
    protocol: Option<String>,
    /// Refine the visible mask with a second forward pass.
    #[arg(long)]
    two_pass: bool,
    /// Union the amodal prediction with the input visible mask.
    #[arg(long)]
    pp: bool,
    /// Probability above which a pixel is predicted foreground [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Compare the amodal prediction minus the visible mask instead of the occluded head.
    #[arg(long)]
    occ_from_amodal: bool,
}

impl ProtocolArgs {
    fn apply(&self, eval: &mut EvalOptions) -> Result<()> {
        if let Some(p) = &self.protocol {
            eval.protocol = p.parse()?;
        }
        eval.two_pass |= self.two_pass;
        eval.postprocess |= self.pp;
        if let Some(t) = self.threshold {
            eval.threshold = t;
        }
        if self.occ_from_amodal {
            eval.occ_operand = OccOperand::AmodalMinusVisible;
        }
        Ok(())
    }
}

/// Checkpoint and dataset inputs shared by the analysis commands.
#[derive(Args, Debug)]
pub struct Inputs {
    /// Checkpoint written by `grasp train`
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory written by `grasp gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

struct Loaded {
    checkpoint: Checkpoint,
    data: Dataset,
}

impl Inputs {
    fn load(&self, cfg: &mut RunConfig) -> Result<Loaded> {
        let checkpoint = load_checkpoint(&self.ckpt)?;
        let data = read_dataset(&self.data)?;
        cfg.model = checkpoint.model.config().clone();
        create_dir(&self.out)?;
        Ok(Loaded { checkpoint, data })
    }
}

fn provenance(cfg: &RunConfig, command: &str, loaded: &Loaded) -> Value {
    json!({
        "run": cfg.provenance(command),
        "checkpoint": loaded.checkpoint.provenance,
        "checkpoint_step": loaded.checkpoint.step,
        "dataset": loaded.data.manifest.provenance,
    })
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Replace the learned gate by this constant.
    #[arg(long)]
    gate_override: Option<f64>,
    /// Write a `gate_NNNNNN.pgm` heatmap of the first pass for every instance here.
    #[arg(long)]
    dump_gates: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    args.protocol.apply(&mut cfg.eval)?;
    if args.gate_override.is_some() {
        cfg.eval.gate_override = args.gate_override;
    }
    let loaded = args.inputs.load(&mut cfg)?;
    let model = &loaded.checkpoint.model;
    let mut report = evalkit::evaluate_model(model, &loaded.data.instances, &cfg.eval)?;
    report.provenance = Some(provenance(&cfg, "eval", &loaded));
    let out = &args.inputs.out;
    write_file(&out.join("report.json"), report.to_json() + "\n")?;
    write_file(
        &out.join("report.csv"),
        report.to_csv(Some(&cfg.comment("eval"))),
    )?;
    if let Some(dir) = &args.dump_gates {
        dump_gates(dir, model, &loaded.data, &cfg)?;
    }
    let occ = report
        .occ_miou
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{}: full mIoU {:.4}, occ mIoU {occ} over {} instances ({} occluded)",
        report.tag, report.full_miou, report.n_instances, report.n_occluded
    );
    Ok(())
}

fn dump_gates(dir: &Path, model: &GraspModel, data: &Dataset, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let model = model.with_gate_override(cfg.eval.gate_override)?;
    let predictor = ModelPredictor {
        model: &model,
        threshold: cfg.eval.threshold,
        two_pass: false,
    };
    let grid = model.config().grid();
    let comment = cfg.comment("eval");
    for (i, inst) in data.instances.iter().enumerate() {
        let v = evalkit::protocol_input(&cfg.eval, inst, i);
        let gate = predictor.predict(inst, &v)?.gate.unwrap_or_default();
        let img = evalkit::gate_heatmap(&gate, grid, model.config().image_size)?;
        pgm::write(&dir.join(format!("gate_{i:06}.pgm")), &img, Some(&comment))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    args.protocol.apply(&mut cfg.eval)?;
    cfg.eval.gate_override = None;
    let loaded = args.inputs.load(&mut cfg)?;
    let table = evalkit::ablate(&loaded.checkpoint.model, &loaded.data.instances, &cfg.eval)?;
    let out = &args.inputs.out;
    write_file(
        &out.join("ablation.csv"),
        table.to_csv(Some(&cfg.comment("ablate"))),
    )?;
    let doc = json!({ "table": table, "provenance": provenance(&cfg, "ablate", &loaded) });
    write_file(&out.join("ablation.json"), json_text(&doc))?;
    print!("{}", table.to_csv(None));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    /// Ridge penalty.
    #[arg(long)]
    lambda: Option<f64>,
}

pub fn probe(args: ProbeArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(l) = args.lambda {
        cfg.probe.lambda = l;
    }
    let loaded = args.inputs.load(&mut cfg)?;
    let mut report = probe_report(
        &loaded.checkpoint.model,
        &loaded.data.instances,
        cfg.probe.lambda,
        cfg.seed,
    )?;
    report.provenance = Some(provenance(&cfg, "probe", &loaded));
    let out = &args.inputs.out;
    write_file(&out.join("probe.json"), report.to_json() + "\n")?;
    write_file(
        &out.join("probe_pairs.csv"),
        report.pairs_csv(Some(&cfg.comment("probe"))),
    )?;
    for r in &report.results {
        let r2 =
            r.r2.map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into());
        println!(
            "{}: R² {r2}, sign accuracy {:.4} ({} train / {} test tokens)",
            r.position.name(),
            r.sign_accuracy,
            r.n_train,
            r.n_test
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    args.protocol.apply(&mut cfg.eval)?;
    let loaded = args.inputs.load(&mut cfg)?;
    let model = &loaded.checkpoint.model;
    let report = evalkit::evaluate_model(model, &loaded.data.instances, &cfg.eval)?;
    let (alpha, beta) = model.gate_params();
    let grid = model.config().grid();
    let mut dbar = Vec::new();
    for inst in &loaded.data.instances {
        dbar.extend(pool_to_grid(&signed_distance(&inst.visible), grid, grid)?);
    }
    let (lo, hi) = dbar
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    let doc = json!({
        "version": grasp::VERSION,
        "tag": report.tag,
        "alpha": alpha,
        "beta": beta,
        "gamma": model.gamma(),
        "dbar": {"tokens": dbar.len(), "min": lo, "max": hi},
        "gate": report.gate,
        "attention": report.attention,
        "provenance": provenance(&cfg, "stats", &loaded),
    });
    write_file(&args.inputs.out.join("stats.json"), json_text(&doc))?;
    println!(
        "α {alpha:.4} β {beta:.4}; d̄ in [{lo:.4}, {hi:.4}]; wrote {}",
        args.inputs.out.join("stats.json").display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SdfArgs {
    #[command(flatten)]
    common: Common,
    /// Binary mask PGM (nonzero pixels are inside).
    #[arg(long)]
    mask: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Take the token grid and gate parameters from this checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Gate slope, used without a checkpoint.
    #[arg(long, default_value_t = 2.68, allow_negative_numbers = true)]
    alpha: f64,
    /// Gate bias, used without a checkpoint.
    #[arg(long, default_value_t = 0.26, allow_negative_numbers = true)]
    beta: f64,
    /// Token grid side.
    #[arg(long, default_value_t = 8)]
    grid: usize,
}

pub fn sdf(args: SdfArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let mask = pgm::read_mask(&args.mask)?;
    let (mut grid, mut alpha, mut beta) = (args.grid, args.alpha, args.beta);
    if let Some(path) = &args.ckpt {
        let ck = load_checkpoint(path)?;
        grid = ck.model.config().grid();
        (alpha, beta) = ck.model.gate_params();
    }
    if grid == 0 || mask.height() != mask.width() || mask.height() % grid != 0 {
        return Err(GraspError::Config(format!(
            "a {}×{} mask cannot be pooled onto a {grid}×{grid} grid",
            mask.height(),
            mask.width()
        ))
        .into());
    }
    let field = signed_distance(&mask);
    let dbar = pool_to_grid(&field, grid, grid)?;
    let gate: Vec<f64> = dbar.iter().map(|&d| gate_value(d, alpha, beta)).collect();
    create_dir(&args.out)?;
    let comment = format!(
        "{}\nalpha {alpha} beta {beta} grid {grid}",
        cfg.comment("sdf")
    );
    let mut csv = String::new();
    for line in comment.lines() {
        csv.push_str(&format!("# {line}\n"));
    }
    csv.push_str(&field.to_csv());
    write_file(&args.out.join("sdf.csv"), csv)?;
    let heat = GrayImage::new(field.height, field.width, field.heatmap())?;
    pgm::write(&args.out.join("sdf.pgm"), &heat, Some(&comment))?;
    let gate_img = evalkit::gate_heatmap(&gate, grid, mask.height())?;
    pgm::write(&args.out.join("gate.pgm"), &gate_img, Some(&comment))?;
    let mean = gate.iter().sum::<f64>() / gate.len() as f64;
    println!(
        "mean gate {mean:.4} over {} tokens; wrote {}",
        gate.len(),
        args.out.display()
    );
    Ok(())
}
