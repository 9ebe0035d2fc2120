use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dscnet_core::data::{generate_corpus, Dataset};
use dscnet_core::eval::{
    bench_contrast, pair_reduction, run_ablation, time_ratio, write_bench_csv, AblationTable,
    BenchRecord, IoUReport,
};
use dscnet_core::pipeline::{
    evaluate, gradient_check, group_image, load_checkpoint, save_checkpoint, train, write_metrics,
    Mode, ModelState, ObjectiveTerm, TrainConfig,
};
use dscnet_core::tensor::{write_tensor, Tensor};

use crate::{
    AblateArgs, BenchArgs, CliError, DumpGroupsArgs, EvalArgs, GenerateArgs, GradcheckArgs, Result,
    TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.dsck";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(dscnet_core::Error::from)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(dscnet_core::Error::from)?;
    Ok(())
}

fn beside(file: &Path, name: &str) -> PathBuf {
    file.parent()
        .map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

/// Rejects a dataset whose class count or image size disagrees with `cfg`.
fn check_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if ds.classes != cfg.classes {
        return Err(CliError::Usage(format!(
            "manifest has {} classes but the configuration has {}",
            ds.classes, cfg.classes
        )));
    }
    if let Some(s) = ds
        .samples
        .iter()
        .find(|s| s.image.dims()[..2] != [cfg.height, cfg.width])
    {
        return Err(CliError::Usage(format!(
            "image {} is {}x{} but the configuration expects {}x{}",
            s.id,
            s.image.dims()[0],
            s.image.dims()[1],
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let run = args.config.resolve()?;
    let cfg = &run.train;
    let count = args.count.unwrap_or(cfg.scenes);
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| run.out_dir.join("data"));
    let scenes = generate_corpus(&cfg.synth(), count, cfg.seed)?;
    let manifest = Dataset::from_scenes(scenes, cfg.classes, cfg.seed).save(&out)?;
    println!("wrote {count} scenes to {}", manifest.display());
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub state: ModelState,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let run = args.config.resolve()?;
    let cfg = &run.train;
    let dataset = Dataset::load(&args.manifest)?;
    check_dataset(&dataset, cfg)?;
    let out = args.out.clone().unwrap_or(run.out_dir);
    create_dir(&out)?;
    let (state, rows) = train(cfg, &dataset, None)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    save_checkpoint(&checkpoint, &state, cfg)?;
    write_metrics(&metrics, &rows)?;
    match rows.last() {
        Some(r) => println!(
            "step {} loss {:.6} ce {:.6} pgcl {:.6} sgcl {:.6}",
            r.step, r.losses.total, r.losses.ce, r.losses.pgcl, r.losses.sgcl
        ),
        None => println!("no steps taken; checkpoint holds the initialisation"),
    }
    println!("checkpoint {}", checkpoint.display());
    println!("metrics {}", metrics.display());
    Ok(TrainOutput {
        checkpoint,
        metrics,
        state,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub base: IoUReport,
    pub refined: IoUReport,
    pub csv: PathBuf,
}

/// `class,iou_base,iou_refined` then a `mean` row; classes absent from
/// both maps leave the cell empty.
pub fn iou_csv(base: &IoUReport, refined: &IoUReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("class,iou_base,iou_refined\n");
    for k in 0..base.per_class.len() {
        writeln!(
            out,
            "{k},{},{}",
            opt(base.per_class[k]),
            opt(refined.per_class.get(k).copied().flatten())
        )
        .unwrap();
    }
    writeln!(out, "mean,{},{}", base.miou, refined.miou).unwrap();
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.manifest)?;
    check_dataset(&dataset, &ckpt.config)?;
    if dataset.samples.iter().all(|s| s.mask.is_none()) {
        return Err(CliError::Usage("manifest has no ground-truth masks".into()));
    }
    let (base, refined) = evaluate(&ckpt.state, &dataset, &ckpt.config)?;
    let csv = args
        .out
        .clone()
        .unwrap_or_else(|| beside(&args.checkpoint, "eval.csv"));
    write_text(&csv, &iou_csv(&base, &refined))?;
    println!("miou_base {:.4}", base.miou);
    println!("miou_refined {:.4}", refined.miou);
    Ok(EvalOutput { base, refined, csv })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationTable> {
    let run = args.config.resolve()?;
    let table = run_ablation(&run.train, &args.seeds)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| run.out_dir.join("ablation.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    table.write_csv(&out)?;
    for m in Mode::ALL {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{m:<8} median base {} refined {}",
            fmt(table.median_base(m)),
            fmt(table.median_refined(m))
        );
    }
    for c in table.aborted() {
        println!(
            "aborted {} seed {}: {}",
            c.mode,
            c.seed,
            c.result.as_ref().unwrap_err()
        );
    }
    for c in table.ordering_checks() {
        let seeds = c
            .per_seed
            .map(|(w, t)| format!(" ({w}/{t} seeds)"))
            .unwrap_or_default();
        println!(
            "{} {}{seeds}",
            if c.holds { "holds" } else { "fails" },
            c.claim
        );
    }
    println!("table {}", out.display());
    Ok(table)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRecord>> {
    let records = bench_contrast(&args.sizes, &args.groups, args.repeats)?;
    write_bench_csv(&args.out, &records)?;
    for &r in &args.sizes {
        for &g in &args.groups {
            if let (Some(t), Some(p)) = (time_ratio(&records, r, g), pair_reduction(&records, r, g))
            {
                println!("{r}x{r} G={g}: grouped/pixelwise time {t:.3}, pair reduction {p:.0}x");
            }
        }
    }
    println!("table {}", args.out.display());
    Ok(records)
}

/// Checks every loss term; any failure is an error after all are printed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if !(args.tol.is_finite() && args.tol > 0.0) {
        return Err(CliError::Usage(format!(
            "--tol must be positive, got {}",
            args.tol
        )));
    }
    let mut failed = Vec::new();
    for term in ObjectiveTerm::ALL {
        let report = gradient_check(args.seed, term, args.tol)?;
        println!(
            "{term:<5} max_rel_error {:.3e} {}",
            report.max_rel_error,
            if report.pass { "pass" } else { "FAIL" }
        );
        if !report.pass {
            failed.push(term.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupDump {
    /// `[H', W']` uint16 group index per feature pixel.
    pub assignment: PathBuf,
    /// `group,class,size,f0,...` one row per group.
    pub prototypes: PathBuf,
}

pub fn cmd_dump_groups(args: &DumpGroupsArgs) -> Result<GroupDump> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.manifest)?;
    check_dataset(&dataset, &ckpt.config)?;
    let sample = dataset.find(&args.image_id).ok_or_else(|| {
        CliError::Usage(format!("image {:?} is not in the manifest", args.image_id))
    })?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| beside(&args.checkpoint, ""));
    create_dir(&out)?;
    let groups = group_image(&ckpt.state, sample, &ckpt.config)?;
    let flat = groups.groups.assignment_tensor()?;
    let grid = Tensor::new(
        vec![groups.labels.height(), groups.labels.width()],
        flat.data().to_vec(),
    )?;
    let assignment = out.join(format!("groups_{}.dst", args.image_id));
    write_tensor(&assignment, &grid)?;

    let protos = groups.prototypes()?;
    let sizes = groups.groups.sizes();
    let mut csv = String::from("group,class,size");
    for d in 0..protos.cols() {
        write!(csv, ",f{d}").unwrap();
    }
    csv.push('\n');
    for g in 0..protos.rows() {
        write!(csv, "{g},{},{}", groups.classes[g], sizes[g]).unwrap();
        for x in protos.row(g) {
            write!(csv, ",{x}").unwrap();
        }
        csv.push('\n');
    }
    let prototypes = out.join(format!("prototypes_{}.csv", args.image_id));
    write_text(&prototypes, &csv)?;
    println!(
        "{} groups; assignment {}",
        protos.rows(),
        assignment.display()
    );
    println!("prototypes {}", prototypes.display());
    Ok(GroupDump {
        assignment,
        prototypes,
    })
}
