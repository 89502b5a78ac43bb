use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use dualmotion::body::{forward_kinematics, skin_mesh, PoseVector};
use dualmotion::datagen::{generate_split, Dataset, Generator, HELDOUT_SPLIT, TRAIN_SPLIT};
use dualmotion::dualflow::DualModel;
use dualmotion::error::Error as CoreError;
use dualmotion::geom::Vec3;
use dualmotion::imageio::{read_rgb_png, write_rgb_png};
use dualmotion::motioncodec::{decode_color, MotionColor, MotionEncoding};
use dualmotion::pipeline::{
    blob_hash, checkpoint_log, checkpoint_stage, epoch_losses, evaluate, model_from_checkpoint, run_ablations,
    sample_records, tree_hash, RunConfig, Stage, Stat, Trainer,
};
use dualmotion::raster::{rasterize_motion_frame_with, Frame};
use dualmotion::tensorad::Checkpoint;

/// Dual-branch motion and video generation at desk scale.
#[derive(Debug, Parser)]
#[command(name = "dualmotion", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training and held-out datasets.
    GenData,
    /// Render a pose as an encoded motion frame.
    Encode {
        /// JSON array of J*3 axis-angle values; the rest pose when omitted.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// full, normal-only or semantics-only.
        #[arg(long, default_value = "full")]
        encoding: String,
    },
    /// Decode a motion-frame PNG into normals and part labels.
    Decode { png: PathBuf },
    /// Dump one record as PNG frames plus the first-frame mesh.
    Render {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
    /// Train the single-branch video model.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt the copied motion branch.
    TrainStage1 {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Finished pretraining checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Joint training with the frozen video branch.
    TrainStage2 {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Finished stage-1 checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample held-out records from their first frame, pose and condition.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        records: Vec<usize>,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and score every architecture variant from one video checkpoint.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        steps: u64,
        #[arg(long, default_value_t = 8)]
        records: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Render { .. } => "render",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Files written by one command, relative to the output directory.
struct Run {
    out: PathBuf,
    config: RunConfig,
    files: Vec<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.out.join(name)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures, 2 for everything else that got past argument parsing.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<CoreError>()) {
        Some(core) if core.is_numeric() => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut run = Run {
        out: cli.out.clone(),
        config,
        files: Vec::new(),
    };
    match &cli.command {
        Command::GenData => gen_data(&mut run, cli.seed)?,
        Command::Encode { pose, encoding } => encode(&mut run, pose.as_deref(), encoding)?,
        Command::Decode { png } => decode(&mut run, png)?,
        Command::Render { data, record } => render(&mut run, data, *record)?,
        Command::Pretrain { data, resume } => train(&mut run, Stage::Pretrain, data, &None, resume)?,
        Command::TrainStage1 { data, from, resume } => train(&mut run, Stage::Motion, data, from, resume)?,
        Command::TrainStage2 { data, from, resume } => train(&mut run, Stage::Joint, data, from, resume)?,
        Command::Sample {
            checkpoint,
            data,
            records,
        } => sample(&mut run, checkpoint, data, records)?,
        Command::Eval { checkpoint, data } => eval(&mut run, checkpoint, data)?,
        Command::Ablate {
            data,
            heldout,
            from,
            steps,
            records,
        } => ablate(&mut run, data, heldout, from, *steps, *records)?,
    }
    append_manifest(&run, cli.command.name())
}

fn append_manifest(run: &Run, command: &str) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for name in &run.files {
        let bytes = fs::read(run.out.join(name)).with_context(|| format!("hashing {name}"))?;
        outputs.insert(name.clone(), blob_hash(&bytes));
    }
    let line = json!({
        "command": command,
        "config_hash": blob_hash(run.config.to_toml().as_bytes()),
        "seed": run.config.seed,
        "outputs_hash": tree_hash(outputs.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
        "outputs": outputs,
    });
    let path = run.out.join("manifest.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}")?;
    println!("outputs {}", line["outputs_hash"].as_str().unwrap_or_default());
    Ok(())
}

fn generator(config: &RunConfig) -> Result<Generator> {
    Ok(Generator::new(config.model.height, config.model.width)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path, what: &str, hint: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CoreError::Precondition(format!("no {what} checkpoint at {}; {hint}", path.display())).into());
    }
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn gen_data(run: &mut Run, seed: Option<u64>) -> Result<()> {
    let cfg = run.config.clone();
    let gen = generator(&cfg)?;
    let seed = seed.unwrap_or(cfg.data.seed);
    for (name, split, count) in [
        ("train.cmvd", TRAIN_SPLIT, cfg.data.train),
        ("heldout.cmvd", HELDOUT_SPLIT, cfg.data.heldout),
    ] {
        let ds = generate_split(&gen, seed, split, count, cfg.model.frames)?;
        let retries: u32 = ds.records.iter().map(|r| r.retries).sum();
        ds.write(&run.path(name))?;
        println!("{name}: {} records, {} frames, {retries} retries", ds.records.len(), cfg.model.frames);
    }
    Ok(())
}

fn parse_encoding(s: &str) -> Result<MotionEncoding> {
    Ok(match s {
        "full" => MotionEncoding::Full,
        "normal-only" => MotionEncoding::NormalOnly,
        "semantics-only" => MotionEncoding::SemanticsOnly,
        other => return Err(CoreError::InvalidInput(format!("unknown encoding `{other}`")).into()),
    })
}

fn encode(run: &mut Run, pose: Option<&Path>, encoding: &str) -> Result<()> {
    let encoding = parse_encoding(encoding)?;
    let gen = generator(&run.config)?;
    let joints = gen.skeleton.joint_count();
    let pose = match pose {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let flat: Vec<f64> = serde_json::from_str(&text)
                .map_err(|e| CoreError::Format(format!("{}: expected a JSON number array: {e}", p.display())))?;
            if flat.len() != joints * 3 {
                bail!(CoreError::InvalidInput(format!("{} values for {joints} joints", flat.len())));
            }
            PoseVector::from_flat(&flat, Vec3::zero())?
        }
        None => PoseVector::rest(joints),
    };
    let mesh = skin_mesh(&gen.skeleton, &forward_kinematics(&gen.skeleton, &pose)?)?;
    let frame = rasterize_motion_frame_with(&mesh, &gen.camera, &gen.palette, encoding);
    frame.frame.write_png(&run.path("motion.png"))?;
    println!("coverage {:.2}%", 100.0 * frame.coverage_ratio());
    Ok(())
}

fn decode(run: &mut Run, png: &Path) -> Result<()> {
    let frame = read_rgb_png(png)?;
    let gen = generator(&run.config)?;
    let palette = &gen.palette;
    let mut normals = Frame::filled(frame.height, frame.width, 0.0);
    let mut counts = vec![0usize; palette.parts()];
    let mut covered = 0usize;
    for i in 0..frame.height * frame.width {
        let c = &frame.data[i * 3..i * 3 + 3];
        let d = decode_color(MotionColor::new(c[0], c[1], c[2]), palette);
        if d.infeasible {
            continue;
        }
        covered += 1;
        counts[d.part] += 1;
        let n = d.normal.to_array();
        normals.data[i * 3..i * 3 + 3].copy_from_slice(&n.map(|v| (v + 1.0) / 2.0));
    }
    let total = frame.height * frame.width;
    write_rgb_png(&run.path("normals.png"), frame.height, frame.width, &normals.data)?;
    let parts: BTreeMap<String, usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(p, &n)| (gen.skeleton.parts[p].name.clone(), n))
        .collect();
    let report = json!({
        "pixels": total,
        "covered": covered,
        "coverage": covered as f64 / total as f64,
        "parts": parts,
    });
    run.write("decode.json", format!("{report}\n"))?;
    println!("coverage {:.2}%", 100.0 * covered as f64 / total as f64);
    for (name, n) in &parts {
        println!("  {name:<12} {n}");
    }
    Ok(())
}

fn render(run: &mut Run, data: &Option<PathBuf>, record: usize) -> Result<()> {
    let ds = load_data(&run.input(data, "train.cmvd"))?;
    let rec = ds
        .records
        .get(record)
        .ok_or_else(|| CoreError::InvalidInput(format!("record {record} out of range ({})", ds.records.len())))?;
    let dir = format!("record{record:04}");
    fs::create_dir_all(run.out.join(&dir))?;
    for i in 0..rec.frames() {
        rec.rgb_frame(i).write_png(&run.path(&format!("{dir}/rgb{i:03}.png")))?;
        rec.motion_frame(i).frame.write_png(&run.path(&format!("{dir}/motion{i:03}.png")))?;
    }
    let mesh = skin_mesh(&ds.skeleton, &forward_kinematics(&ds.skeleton, &rec.pose(0))?)?;
    run.write(&format!("{dir}/pose000.obj"), mesh.to_obj())?;
    println!(
        "record {record}: {} ({} frames, {} retries)",
        rec.spec.family.name(),
        rec.frames(),
        rec.retries
    );
    Ok(())
}

fn train(run: &mut Run, stage: Stage, data: &Option<PathBuf>, from: &Option<PathBuf>, resume: &Option<PathBuf>) -> Result<()> {
    let cfg = run.config.clone();
    let train = load_data(&run.input(data, "train.cmvd"))?;
    let (out_name, mut trainer) = match (stage, resume) {
        (_, Some(path)) => {
            let ck = load_checkpoint(path, "resumable", "check the path")?;
            let t = Trainer::<f32>::resume(&cfg, &ck)?;
            if t.stage != stage {
                bail!(CoreError::Precondition(format!("{} holds a {:?} run", path.display(), t.stage)));
            }
            (stage_file(stage), t)
        }
        (Stage::Pretrain, None) => (stage_file(stage), Trainer::pretrain(&cfg)?),
        (Stage::Motion, None) => {
            let ck = load_checkpoint(&run.input(from, "stage0.ckpt"), "pretraining", "run `pretrain` first")?;
            (stage_file(stage), Trainer::stage1(&cfg, &ck)?)
        }
        (Stage::Joint, None) => {
            let ck = load_checkpoint(&run.input(from, "stage1.ckpt"), "stage-1", "run `train-stage1` first")?;
            (stage_file(stage), Trainer::stage2(&cfg, &ck)?)
        }
    };
    let every = (trainer.total_steps() / 10).max(1);
    while !trainer.is_done() {
        let log = trainer.train_step(&train)?;
        if log.step % every == 0 || trainer.is_done() {
            let part = |name: &str, v: Option<f64>| v.map(|v| format!(" {name} {v:.4}")).unwrap_or_default();
            println!(
                "step {:>4} total {:.4}{}{}{}",
                log.step,
                log.total,
                part("video", log.video),
                part("motion", log.motion),
                part("smpl", log.smpl)
            );
        }
    }
    if trainer.skipped() {
        println!("{} has no separate motion branch; stage 1 skipped", trainer.model.ablation.name());
    }
    let ck = trainer.checkpoint();
    ck.save(&run.path(out_name))?;
    let mut lines = String::new();
    for l in &trainer.log {
        lines += &serde_json::to_string(l)?;
        lines.push('\n');
    }
    run.write(&out_name.replace(".ckpt", "_log.jsonl"), lines)?;
    Ok(())
}

fn stage_file(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "stage0.ckpt",
        Stage::Motion => "stage1.ckpt",
        Stage::Joint => "stage2.ckpt",
    }
}

/// Loads a finished joint-stage checkpoint and makes the run config match it.
fn trained_model(run: &mut Run, checkpoint: &Option<PathBuf>) -> Result<DualModel<f32>> {
    let path = run.input(checkpoint, "stage2.ckpt");
    let ck = load_checkpoint(&path, "stage-2", "run `train-stage2` first")?;
    let (stage, _, done) = checkpoint_stage(&ck)?;
    if stage != Stage::Joint || !done {
        bail!(CoreError::Precondition(format!("{} is not a finished stage-2 checkpoint", path.display())));
    }
    let model = model_from_checkpoint::<f32>(&ck)?;
    if model.config != run.config.model {
        bail!(CoreError::Precondition("checkpoint model config differs from the run config".into()));
    }
    run.config.ablation = model.ablation;
    Ok(model)
}

fn sample(run: &mut Run, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>, records: &[usize]) -> Result<()> {
    let mut model = trained_model(run, checkpoint)?;
    let ds = load_data(&run.input(data, "heldout.cmvd"))?;
    let cfg = run.config.clone();
    let out = sample_records(&mut model, &cfg, &ds, records, cfg.seed)?;
    let (f, h, w) = (cfg.model.frames, cfg.model.height, cfg.model.width);
    let px = h * w * 3;
    for (b, &rec) in records.iter().enumerate() {
        let dir = format!("sample{rec:04}");
        fs::create_dir_all(run.out.join(&dir))?;
        for i in 0..f {
            let at = (b * f + i) * px;
            write_rgb_png(&run.path(&format!("{dir}/rgb{i:03}.png")), h, w, &out.video.data()[at..at + px])?;
            if let Some(m) = &out.motion {
                write_rgb_png(&run.path(&format!("{dir}/motion{i:03}.png")), h, w, &m.data()[at..at + px])?;
            }
        }
        if let Some(p) = &out.poses {
            let j3 = cfg.model.pose_dim();
            let row = &p.data()[b * (f - 1) * j3..(b + 1) * (f - 1) * j3];
            let frames: Vec<&[f64]> = row.chunks(j3).collect();
            run.write(&format!("{dir}/poses.json"), format!("{}\n", serde_json::to_string(&frames)?))?;
        }
        println!("record {rec}: {} frames", f);
    }
    Ok(())
}

fn eval(run: &mut Run, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>) -> Result<()> {
    let mut model = trained_model(run, checkpoint)?;
    let ds = load_data(&run.input(data, "heldout.cmvd"))?;
    let cfg = run.config.clone();
    let mut report = evaluate(&mut model, &cfg, &ds, cfg.seed)?;
    for (stage, name) in [(Stage::Motion, "stage1.ckpt"), (Stage::Joint, "stage2.ckpt")] {
        let path = run.out.join(name);
        if let Ok(ck) = Checkpoint::load(&path) {
            let steps = (cfg.data.train / cfg.stage(stage).batch).max(1);
            report.losses.extend(epoch_losses(name.trim_end_matches(".ckpt"), &checkpoint_log(&ck)?, steps));
        }
    }
    run.write("metrics.jsonl", report.to_json_lines())?;
    let summary = report.summary();
    run.write("summary.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn ablate(
    run: &mut Run,
    data: &Option<PathBuf>,
    heldout: &Option<PathBuf>,
    from: &Option<PathBuf>,
    steps: u64,
    records: usize,
) -> Result<()> {
    let cfg = run.config.clone();
    let train = load_data(&run.input(data, "train.cmvd"))?;
    let held = load_data(&run.input(heldout, "heldout.cmvd"))?;
    let ck = load_checkpoint(&run.input(from, "stage0.ckpt"), "pretraining", "run `pretrain` first")?;
    let outcomes = run_ablations::<f32>(&cfg, &train, &held, &ck, steps, records)?;
    let mut lines = String::new();
    for o in &outcomes {
        let fmt = |s: &Option<Stat>| s.map(|s| format!("{:.4}", s.mean)).unwrap_or("n/a".into());
        let last = o.stage2.last().map(|l| l.total).unwrap_or(f64::NAN);
        println!(
            "{:<17} final loss {last:.4}  MPJPE {}  IoU {}  PSNR {}  finite {}  valid {}",
            o.ablation.name(),
            fmt(&o.report.mpjpe),
            fmt(&o.report.part_iou),
            fmt(&o.report.psnr),
            o.losses_finite,
            o.samples_valid
        );
        lines += &serde_json::to_string(&json!({
            "ablation": o.ablation,
            "final_loss": last,
            "losses_finite": o.losses_finite,
            "samples_valid": o.samples_valid,
            "mpjpe": o.report.mpjpe,
            "static_mpjpe": o.report.static_mpjpe,
            "part_iou": o.report.part_iou,
            "psnr": o.report.psnr,
        }))?;
        lines.push('\n');
    }
    run.write("ablations.jsonl", lines)?;
    if let Some(bad) = outcomes.iter().find(|o| !o.losses_finite || !o.samples_valid) {
        bail!(CoreError::Numeric(format!("variant {} produced non-finite output", bad.ablation.name())));
    }
    Ok(())
}
