//! Small end-to-end training scenarios shared by the training tests and the
//! acceptance suite.

use std::path::Path;

use udadet::codec::DecodeParams;
use udadet::config::Config;
use udadet::data::{generate_dataset, render_scene, AugmentConfig, DatasetManifest, Domain, SceneSpec};
use udadet::eval::{evaluate_images, EvalOptions};
use udadet::losses::UdaMode;
use udadet::model::ArchitectureDescriptor;
use udadet::tensor::{DType, Scalar};
use udadet::train::{train_to_dir, DomainData, Trainer};

pub fn small_spec() -> SceneSpec {
    SceneSpec {
        height: 64,
        width: 64,
        min_objects: 1,
        max_objects: 3,
        min_size: 10.0,
        max_size: 20.0,
        ..SceneSpec::default()
    }
}

pub fn small_config(mode: UdaMode) -> Config {
    let mut cfg = Config::default();
    cfg.run.seed = 5;
    cfg.run.deterministic = true;
    cfg.data.scene = small_spec();
    cfg.model = ArchitectureDescriptor {
        in_channels: 3,
        stem_channels: 4,
        stage_channels: vec![8, 8],
        residual_blocks: 1,
        decoder_channels: vec![],
        head_channels: 8,
    };
    cfg.train.mode = mode;
    cfg.train.epochs = 3;
    cfg.train.source_batch = 4;
    cfg.train.target_batch = 4;
    cfg.train.learning_rate = 1e-3;
    cfg
}

pub fn scenes(spec: &SceneSpec, seed: u64, count: usize, domain: Domain) -> DomainData {
    let mut d = DomainData::default();
    for i in 0..count {
        let (img, boxes) = render_scene(spec, seed, i as u64, domain);
        d.images.push(img);
        d.boxes.push(boxes);
    }
    d
}

/// Trains baseline and both adaptation modes with zero adaptation weight side by
/// side and compares every parameter bit after every step.
pub fn lambda_zero_matches_baseline() -> Result<usize, String> {
    let spec = small_spec();
    let source = scenes(&spec, 1, 8, Domain::Source);
    let target = scenes(&spec, 2, 8, Domain::Target);
    let mut base = Trainer::<f64>::new(small_config(UdaMode::Baseline), 6, source.clone(), None).map_err(|e| e.to_string())?;
    let mut others = Vec::new();
    for mode in [UdaMode::Em, UdaMode::Msl] {
        let mut cfg = small_config(mode);
        cfg.loss.lambda_ent = 0.0;
        cfg.loss.lambda_ms = 0.0;
        others.push(Trainer::<f64>::new(cfg, 6, source.clone(), Some(target.clone())).map_err(|e| e.to_string())?);
    }
    let mut steps = 0;
    for epoch in 0..3 {
        let plan = base.epoch_plan(epoch).map_err(|e| e.to_string())?;
        for other in &others {
            let p = other.epoch_plan(epoch).map_err(|e| e.to_string())?;
            if p.iter().map(|s| &s.source).ne(plan.iter().map(|s| &s.source)) {
                return Err(format!("source batches differ in epoch {epoch}"));
            }
        }
        for (i, step) in plan.iter().enumerate() {
            base.step(step, epoch).map_err(|e| e.to_string())?;
            for other in &mut others {
                let own = other.epoch_plan(epoch).map_err(|e| e.to_string())?;
                other.step(&own[i], epoch).map_err(|e| e.to_string())?;
                for (name, t) in &base.params.tensors {
                    let o = &other.params.tensors[name];
                    if t.data().iter().zip(o.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        return Err(format!("{} diverged from baseline at step {} in {name}", other.config.train.mode, steps + 1));
                    }
                }
            }
            steps += 1;
        }
    }
    Ok(steps)
}

/// Adaptation-only gradients on a target batch: the offset and size heads must be
/// exactly zero and the heatmap path must be reached.
pub fn target_gradients_skip_regression_heads() -> Result<(), String> {
    let spec = small_spec();
    let source = scenes(&spec, 1, 4, Domain::Source);
    let target = scenes(&spec, 2, 4, Domain::Target);
    for mode in [UdaMode::Em, UdaMode::Msl] {
        for softmax_on_logits in [false, true] {
            let mut cfg = small_config(mode);
            cfg.train.softmax_on_logits = softmax_on_logits;
            let trainer = Trainer::<f64>::new(cfg, 6, source.clone(), Some(target.clone())).map_err(|e| e.to_string())?;
            let grads = trainer.adaptation_gradients(&[0, 1, 2, 3], 0).map_err(|e| e.to_string())?;
            for (name, g) in &grads {
                let regression = name.starts_with("head.offset.") || name.starts_with("head.size.");
                let all_zero = g.iter().all(|v| *v == 0.0);
                if regression && !all_zero {
                    return Err(format!("{mode}: {name} received a gradient"));
                }
                if !regression && (name.starts_with("head.heatmap.") || name.starts_with("backbone.stem")) && all_zero {
                    return Err(format!("{mode}: {name} received no gradient"));
                }
            }
        }
    }
    Ok(())
}

pub struct Overfit {
    pub initial: f64,
    pub last: f64,
    pub map: f64,
}

/// Baseline training on a single image for 200 steps, then evaluation on it.
pub fn overfit_single_image<T: Scalar>() -> Result<Overfit, String> {
    let spec = small_spec();
    let data = scenes(&spec, 3, 1, Domain::Source);
    let mut cfg = small_config(UdaMode::Baseline);
    cfg.model = ArchitectureDescriptor {
        in_channels: 3,
        stem_channels: 8,
        stage_channels: vec![16, 16],
        residual_blocks: 1,
        decoder_channels: vec![],
        head_channels: 16,
    };
    cfg.augment = AugmentConfig::identity();
    cfg.train.source_batch = 1;
    cfg.train.epochs = 200;
    cfg.train.decay_epoch = 200;
    cfg.train.weight_decay = 0.0;
    cfg.train.learning_rate = 5e-3;
    let names = spec.class_names();
    let mut trainer = Trainer::<T>::new(cfg, names.len(), data.clone(), None).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    trainer
        .fit(|_, row, _| {
            losses.push(row.report.l_det);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        decode: DecodeParams::default(),
        ..EvalOptions::default()
    };
    let report = evaluate_images(&trainer.params, &data.images, &data.boxes, &names, &opts).map_err(|e| e.to_string())?;
    Ok(Overfit {
        initial: losses[0],
        last: *losses.last().unwrap(),
        map: report.map,
    })
}

/// Writes source and target splits for the tiny scenes under `root`.
pub fn write_splits(root: &Path, count: usize) -> (DatasetManifest, DatasetManifest) {
    let spec = small_spec();
    let s = generate_dataset(&spec, Domain::Source, count, 1, true, "source", &root.join("source")).unwrap();
    let t = generate_dataset(&spec, Domain::Target, count, 2, false, "target", &root.join("target")).unwrap();
    (s, t)
}

/// Runs the same training twice and compares every output file byte for byte.
pub fn reproducible_outputs(root: &Path, dtype: DType) -> Result<usize, String> {
    let (source, target) = write_splits(&root.join("data"), 8);
    let mut cfg = small_config(UdaMode::Em);
    cfg.run.dtype = dtype;
    cfg.train.checkpoint_every = 1;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        match dtype {
            DType::F32 => train_to_dir::<f32>(&cfg, &source, Some(&target), &dir, None),
            DType::F64 => train_to_dir::<f64>(&cfg, &source, Some(&target), &dir, None),
        }
        .map_err(|e| e.to_string())?;
        let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        outputs.push(files);
    }
    let names = |v: &[std::path::PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if names(&outputs[0]) != names(&outputs[1]) {
        return Err("runs wrote different files".into());
    }
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            return Err(format!("{} differs between runs", a.file_name().unwrap().to_string_lossy()));
        }
    }
    Ok(outputs[0].len())
}
