use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use irisnet::data::{
    self, AugmentPolicy, DatasetSplit, LabeledImage, SynthParams, SIGNATURE_COUNT,
};
use irisnet::saliency::{self, OcclusionConfig};
use irisnet::store::{self, FreezeMode};
use irisnet::training::{self, OptimizerKind, TrainConfig, TrainReport};
use irisnet::{Error, Model, ModelSpec};

use crate::failure::Failure;
use crate::settings::{CommonOpts, DataOpts, Resolver, TrainOpts};
use crate::{EvalArgs, FinetuneArgs, PretrainArgs, SaliencyArgs, SynthArgs};

type Outcome<T = ()> = Result<T, Failure>;

struct Context {
    resolver: Resolver,
    seed: u64,
    out_dir: PathBuf,
}

fn context(common: &CommonOpts) -> Outcome<Context> {
    let resolver = Resolver::new(common.config.as_deref())?;
    let seed = resolver.get(common.seed, "seed", training::DEFAULT_SEED)?;
    let out_dir = resolver.get(common.out_dir.clone(), "out_dir", PathBuf::from("out"))?;
    Ok(Context {
        resolver,
        seed,
        out_dir,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

struct Images {
    items: Vec<LabeledImage>,
    class_names: Vec<String>,
}

/// Loads `root` and resizes every image to `size × size`.
fn load_images(root: &Path, skip_unreadable: bool, size: usize) -> Outcome<Images> {
    if !root.is_dir() {
        return Err(Failure::data(format!(
            "data root {} is not a readable directory",
            root.display()
        )));
    }
    let corpus = data::load_corpus(root, skip_unreadable)?;
    for (path, reason) in &corpus.skipped {
        eprintln!("skipped {}: {reason}", path.display());
    }
    eprintln!(
        "loaded {} images in {} classes from {}",
        corpus.images.len(),
        corpus.class_names.len(),
        root.display()
    );
    Ok(Images {
        items: data::prepare(&corpus.images, size)?,
        class_names: corpus.class_names,
    })
}

fn load_data(ctx: &Context, opts: &DataOpts, size: usize) -> Outcome<Images> {
    let r = &ctx.resolver;
    let root: PathBuf = r.require(opts.data_root.clone(), "data_root")?;
    let skip = r.get(opts.skip_unreadable, "skip_unreadable", false)?;
    load_images(&root, skip, size)
}

fn split_for(ctx: &Context, opts: &DataOpts, images: &[LabeledImage]) -> Outcome<DatasetSplit> {
    let r = &ctx.resolver;
    if let Some(path) = r.opt::<PathBuf>(opts.split_manifest.clone(), "split_manifest")? {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return Ok(DatasetSplit::from_manifest_csv(&text, images, ctx.seed)?);
    }
    let k_test = r.get(opts.k_test, "k_test", data::DEFAULT_K_TEST)?;
    let val_fraction = r.get(
        opts.val_fraction,
        "val_fraction",
        data::DEFAULT_VAL_FRACTION,
    )?;
    Ok(data::make_split(images, k_test, val_fraction, ctx.seed)?)
}

fn train_config(ctx: &Context, opts: &TrainOpts) -> Outcome<TrainConfig> {
    let r = &ctx.resolver;
    let optimizer = r.get(opts.optimizer.clone(), "optimizer", "adam".to_string())?;
    let augment = r.get(opts.augment.clone(), "augment", "none".to_string())?;
    let config = TrainConfig {
        epochs: r.get(opts.epochs, "epochs", training::DEFAULT_EPOCHS)?,
        batch_size: r.get(opts.batch_size, "batch_size", training::DEFAULT_BATCH_SIZE)?,
        learning_rate: r.get(opts.lr, "lr", training::DEFAULT_LEARNING_RATE)?,
        lambda1: r.get(opts.lambda1, "lambda1", training::DEFAULT_LAMBDA1)?,
        optimizer: OptimizerKind::parse(&optimizer).ok_or_else(|| {
            Failure::config(format!(
                "unknown optimizer `{optimizer}` (expected adam or sgd)"
            ))
        })?,
        augment: AugmentPolicy::parse(&augment)
            .ok_or_else(|| Failure::config(format!("unknown augmentation list `{augment}`")))?,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    Ok(config)
}

/// A named variant or a spec file in the config grammar.
fn model_spec(name: &str) -> Outcome<ModelSpec> {
    let path = Path::new(name);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok(ModelSpec::from_config_str(&text)?);
    }
    Ok(ModelSpec::by_name(name, 2)?)
}

fn run_training(
    model: &mut Model,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Outcome<(Model, TrainReport)> {
    eprintln!(
        "training on {} images ({} val, {} test), {} epochs, batch {}, lr {}, lambda1 {}, augment {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.lambda1,
        config.augment.describe()
    );
    let (best, report) = training::train_with_progress(model, split, config, |e| {
        eprintln!("{}", training::epoch_line(e))
    })?;
    eprintln!(
        "best_epoch {} val_acc {:.6} test_acc {:.6}",
        report.best_epoch, report.best_val_accuracy, report.test_accuracy
    );
    Ok((best, report))
}

fn write_training_outputs(
    ctx: &Context,
    weights_out: Option<PathBuf>,
    model: &Model,
    report: &TrainReport,
    split: &DatasetSplit,
) -> Outcome {
    create_dir(&ctx.out_dir)?;
    let weights = ctx
        .resolver
        .get(weights_out, "weights_out", ctx.out_dir.join("weights.bin"))?;
    store::save(model, &weights)?;
    write_file(&ctx.out_dir.join("report.csv"), report.to_csv())?;
    write_file(&ctx.out_dir.join("train.log"), report.to_log())?;
    write_file(&ctx.out_dir.join("split.csv"), split.to_manifest_csv())?;
    eprintln!(
        "wrote {} and reports under {}",
        weights.display(),
        ctx.out_dir.display()
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Outcome {
    let ctx = context(&a.common)?;
    let name = ctx
        .resolver
        .get(a.model.clone(), "model", "resnet50".to_string())?;
    let mut spec = model_spec(&name)?;
    let config = train_config(&ctx, &a.train)?;
    let images = load_data(&ctx, &a.data, spec.input_size)?;
    let split = split_for(&ctx, &a.data, &images.items)?;
    spec.head_classes = images.class_names.len().max(split.class_count);
    let mut model = Model::build(spec, ctx.seed)?;
    let (best, report) = run_training(&mut model, &split, &config)?;
    write_training_outputs(&ctx, a.weights_out.clone(), &best, &report, &split)
}

pub fn finetune(a: &FinetuneArgs) -> Outcome {
    let ctx = context(&a.common)?;
    let r = &ctx.resolver;
    let weights_in: PathBuf = r.require(a.weights_in.clone(), "weights_in")?;
    let mode_name = r.get(
        a.freeze_mode.clone(),
        "freeze_mode",
        "full_finetune".to_string(),
    )?;
    let mode = FreezeMode::parse(&mode_name).ok_or_else(|| {
        Failure::config(format!(
            "unknown freeze mode `{mode_name}` (expected feature_extractor or full_finetune)"
        ))
    })?;
    let config = train_config(&ctx, &a.train)?;
    let mut model = store::load(&weights_in)?;
    let images = load_data(&ctx, &a.data, model.spec().input_size)?;
    let split = split_for(&ctx, &a.data, &images.items)?;
    let classes = images.class_names.len().max(split.class_count);
    model.replace_head(classes, ctx.seed)?;
    store::apply_freeze_mode(&mut model, mode)?;
    eprintln!(
        "transferred {} with a {classes}-way head, mode {}",
        weights_in.display(),
        mode.name()
    );
    let (best, report) = run_training(&mut model, &split, &config)?;
    write_training_outputs(&ctx, a.weights_out.clone(), &best, &report, &split)
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let ctx = context(&a.common)?;
    let weights_in: PathBuf = ctx.resolver.require(a.weights_in.clone(), "weights_in")?;
    let model = store::load(&weights_in)?;
    let images = load_data(&ctx, &a.data, model.spec().input_size)?;
    let split = split_for(&ctx, &a.data, &images.items)?;
    if split.test.is_empty() {
        return Err(Error::EmptySplit("test partition is empty").into());
    }
    let preds = training::predict_all(&model, &split.test)?;
    let classes = images.class_names.len();
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, img) in preds.iter().zip(&split.test) {
        total[img.class_id] += 1;
        correct[img.class_id] += usize::from(*p == img.class_id);
    }
    let accuracy = correct.iter().sum::<usize>() as f64 / split.test.len() as f64;

    let mut per_class = String::from("class_id,class_name,correct,total,accuracy\n");
    for (c, name) in images.class_names.iter().enumerate() {
        let acc = if total[c] == 0 {
            String::new()
        } else {
            format!("{:.6}", correct[c] as f64 / total[c] as f64)
        };
        let _ = writeln!(per_class, "{c},{name},{},{},{acc}", correct[c], total[c]);
    }
    let summary = format!(
        "test_accuracy {accuracy:.6}\nclasses {classes}\ntest_images {}\n",
        split.test.len()
    );
    create_dir(&ctx.out_dir)?;
    write_file(&ctx.out_dir.join("per_class.csv"), per_class)?;
    write_file(&ctx.out_dir.join("eval.txt"), &summary)?;
    eprintln!(
        "evaluated {} test images across {classes} classes",
        split.test.len()
    );
    println!("test_accuracy {accuracy:.6}");
    Ok(())
}

/// Output directory names: the file stem, qualified by the class directory
/// when two images share a stem.
fn output_names(images: &[LabeledImage], class_names: &[String]) -> Vec<String> {
    let stem = |img: &LabeledImage| {
        Path::new(&img.source_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into())
    };
    let mut seen = BTreeSet::new();
    let duplicated: BTreeSet<String> = images
        .iter()
        .map(stem)
        .filter(|s| !seen.insert(s.clone()))
        .collect();
    images
        .iter()
        .map(|img| {
            let s = stem(img);
            if duplicated.contains(&s) {
                format!("{}_{s}", class_names[img.class_id])
            } else {
                s
            }
        })
        .collect()
}

pub fn saliency(a: &SaliencyArgs) -> Outcome {
    let ctx = context(&a.common)?;
    let r = &ctx.resolver;
    let o = &a.occlusion;
    let cfg = OcclusionConfig {
        window: r.get(o.window, "window", saliency::DEFAULT_WINDOW)?,
        stride: r.get(o.stride, "stride", saliency::DEFAULT_STRIDE)?,
        fill_value: r.get(o.fill, "fill", 0.0)?,
    };
    let weights_in: PathBuf = r.require(a.weights_in.clone(), "weights_in")?;
    let root: PathBuf = r.require(a.data_root.clone(), "data_root")?;
    let model = store::load(&weights_in)?;
    let size = model.spec().input_size;
    cfg.validate(size, size)?;
    let images = load_images(&root, false, size)?;
    for (img, name) in images
        .items
        .iter()
        .zip(output_names(&images.items, &images.class_names))
    {
        let dir = ctx.out_dir.join(&name);
        create_dir(&dir)?;
        let map = saliency::sweep(&model, &img.pixels, img.class_id, &cfg)?;
        saliency::export_map(&map, &img.pixels, &dir.join("saliency"))?;
        let summary = format!(
            "source {}\ntrue_class {}\n{}\n",
            img.source_path,
            img.class_id,
            saliency::describe(&map)
        );
        write_file(&dir.join("summary.txt"), summary)?;
        eprintln!("{name}: {}", saliency::describe(&map));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let ctx = context(&a.common)?;
    let r = &ctx.resolver;
    let classes = r.get(a.classes, "classes", 20)?;
    let per_class = r.get(a.per_class, "per_class", 10)?;
    let size = r.get(a.size, "size", 32)?;
    let offset = r.get(a.class_offset, "class_offset", 0)?;
    if classes < 2 || per_class < 1 || size < 8 {
        return Err(Failure::config(
            "synth needs classes >= 2, per-class >= 1 and size >= 8",
        ));
    }
    if offset + classes > SIGNATURE_COUNT {
        return Err(Failure::config(format!(
            "class-offset + classes must not exceed {SIGNATURE_COUNT} distinct signatures"
        )));
    }
    let params = SynthParams::new(classes, per_class, size, ctx.seed).with_offset(offset);
    let images: Vec<LabeledImage> = data::synth_corpus_with_geometry(&params)
        .into_iter()
        .map(|(img, _)| img)
        .collect();
    create_dir(&ctx.out_dir)?;
    data::write_corpus(&ctx.out_dir, &images)?;
    eprintln!(
        "wrote {} images ({classes} classes × {per_class}, {size}×{size}) to {}",
        images.len(),
        ctx.out_dir.display()
    );
    Ok(())
}
