use std::io::Write;
use std::path::Path;

use anyhow::Context;
use physformer::attention::write_pgm;
use physformer::gradcheck::{run_case, suite, TOL_F32, TOL_F64};
use physformer::loss::batch_peak_maps;
use physformer::model::{checkpoint, forward, Model, ModelConfig};
use physformer::nn::Session;
use physformer::synth::io::{generate_dataset, DatasetDir};
use physformer::synth::{generate_clip, Clip, SynthConfig};
use physformer::tensor::io::save_tensor;
use physformer::train::{
    evaluate, inference_mode, predict_clip, split_indices, train as train_model, OutputDir, TrainConfig,
};
use physformer::{Error, Tensor};
use rayon::prelude::*;

use crate::{DataArgs, EvalArgs, Failure, InferArgs, SynthGenArgs, TrainArgs};

/// Reads a JSON configuration; any failure is a usage error.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn usage_on_config(e: Error) -> Failure {
    match e {
        Error::Config(m) | Error::Parameter(m) => Failure::Usage(m),
        e => Failure::Runtime(e.into()),
    }
}

fn load_clips(d: &DataArgs) -> Result<Vec<Clip>, Failure> {
    match &d.data {
        Some(dir) => {
            let ds = DatasetDir::open(dir).with_context(|| format!("opening dataset {}", dir.display()))?;
            Ok(ds.load_all()?)
        }
        None => {
            if d.clips == 0 {
                return Err(Failure::Usage("--clips must be at least 1".into()));
            }
            let cfg = SynthConfig::default();
            Ok((0..d.clips).into_par_iter().map(|i| generate_clip(&cfg, d.seed, i)).collect())
        }
    }
}

fn split(clips: Vec<Clip>) -> (Vec<Clip>, Vec<Clip>) {
    let (tr, va) = split_indices(clips.len());
    let pick = |idx: Vec<usize>| idx.iter().map(|&i| clips[i].clone()).collect::<Vec<_>>();
    (pick(tr), pick(va))
}

pub fn synth_gen(a: SynthGenArgs) -> Result<(), Failure> {
    let cfg: SynthConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SynthConfig::default(),
    };
    cfg.validate().map_err(usage_on_config)?;
    generate_dataset(&a.out, &cfg, a.seed, a.clips)?;
    println!("wrote {} clips to {}", a.clips, a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.model {
        cfg.model = m;
    }
    cfg.seed = a.data.seed;
    cfg.validate().map_err(usage_on_config)?;
    let (tr, va) = split(load_clips(&a.data)?);
    let model = Model::new(cfg.architecture(), cfg.seed)?;
    println!("{}: {} parameters, {} training and {} validation clips", cfg.model, model.num_params(), tr.len(), va.len());
    let out = OutputDir(a.out.clone());
    let outcome = train_model(model, &tr, &va, &cfg, Some(&out), |log| {
        let c = &log.curve;
        print!("epoch {:>3}  loss {:.4}  beta {:.3}  ce {:.4}  ld {:.4}  atten {:.4}", c.epoch, c.total, c.beta, c.ce, c.ld, c.atten);
        if let Some(r) = &log.validation {
            print!("  | val MAE {:.2}  RMSE {:.2}", r.metrics.mae, r.metrics.rmse);
        }
        println!();
        let _ = std::io::stdout().flush();
    })?;
    println!("best epoch {} (validation RMSE {:.3}); checkpoint in {}", outcome.best_epoch, outcome.best_rmse, a.out.join("checkpoint").display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    let (model, _) = checkpoint::load::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => Model::new(ModelConfig::desk(a.model), a.data.seed)?,
    };
    let clips = load_clips(&a.data)?;
    let clips = if a.all { clips } else { split(clips).1 };
    let report = evaluate(&model, &clips)?;
    std::fs::create_dir_all(&a.out)?;
    report.write_json(std::fs::File::create(a.out.join("metrics.json"))?)?;
    report.write_summary_csv(std::fs::File::create(a.out.join("summary.csv"))?)?;
    report.write_clips_csv(std::fs::File::create(a.out.join("clips.csv"))?)?;
    let m = &report.metrics;
    let r = m.r.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
    println!("{} clips  SD {:.3}  MAE {:.3}  RMSE {:.3}  r {r}", clips.len(), m.sd, m.mae, m.rmse);
    Ok(())
}

fn pick_clip(a: &InferArgs) -> Result<Clip, Failure> {
    match &a.data.data {
        Some(dir) => {
            let ds = DatasetDir::open(dir)?;
            if a.clip >= ds.len() {
                return Err(Failure::Usage(format!("--clip {} but the dataset has {} clips", a.clip, ds.len())));
            }
            Ok(ds.load(a.clip)?)
        }
        None => Ok(generate_clip(&SynthConfig::default(), a.data.seed, a.clip)),
    }
}

pub fn infer(a: InferArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let clip = pick_clip(&a)?;
    let y = predict_clip(&model, &clip)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    writeln!(w, "frame,time_s,predicted,ground_truth")?;
    for (i, (p, g)) in y.iter().zip(&clip.bvp).enumerate() {
        writeln!(w, "{i},{},{p},{g}", i as f64 / clip.fps)?;
    }
    w.flush()?;
    let hr = physformer::signal::protocol_hr(&y, clip.fps)?;
    println!("{}: predicted {hr:.2} bpm, label {:.2} bpm, {} frames", clip.id, clip.hr, y.len());
    Ok(())
}

fn export_maps(dir: &Path, stem: &str, t: &Tensor<f32>) -> Result<(), Failure> {
    save_tensor(t, dir.join(format!("{stem}.tnsr")))?;
    let s = t.shape();
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    for (h, plane) in t.data().chunks_exact(rows * cols).enumerate() {
        let map = Tensor::new(vec![rows, cols], plane.to_vec())?;
        write_pgm(&mut std::fs::File::create(dir.join(format!("{stem}.h{h}.pgm")))?, &map)?;
    }
    Ok(())
}

/// Attention weights `[1, h, L, L]` of every block and, for PhysFormer++,
/// pooled periodic maps `[1, h, T', T']` with the target peak map, taken
/// on the first window of the clip.
pub fn export_attention(a: InferArgs) -> Result<(), Failure> {
    let model = load_model(&a.checkpoint)?;
    let clip = pick_clip(&a)?;
    let t = model.config.frames;
    let w = clip.window::<f32>(0, t)?;
    let mut shape = vec![1];
    shape.extend_from_slice(w.x.shape());
    let mut sess = Session::new(&model.params, inference_mode(&model), false);
    let x = sess.tape.constant(w.x.reshape(shape)?);
    let out = forward(&mut sess, &model.config, x)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, v) in &out.attention {
        export_maps(&a.out, &format!("{name}.attention"), sess.tape.value(*v))?;
    }
    if let Some(&first) = out.periodic_maps.first() {
        for (i, v) in out.periodic_maps.iter().enumerate() {
            export_maps(&a.out, &format!("slow.blocks.{i}.periodic"), sess.tape.value(*v))?;
        }
        let t_sub = sess.tape.shape(first)[2];
        let bvp = Tensor::<f32>::from_f64(vec![1, t], &w.bvp)?;
        export_maps(&a.out, "peak_map", &batch_peak_maps(&bvp, clip.fps, t_sub)?)?;
    }
    println!("wrote {} attention maps and {} periodic maps to {}", out.attention.len(), out.periodic_maps.len(), a.out.display());
    Ok(())
}

pub fn gradcheck() -> Result<(), Failure> {
    let cases = suite();
    println!("{:<28} {:>12} {:>12}  result", "case", "rel err f64", "rel err f32");
    let mut failed = 0;
    for case in &cases {
        let r = run_case(case)?;
        let ok = r.passed();
        failed += usize::from(!ok);
        println!("{:<28} {:>12.3e} {:>12.3e}  {}", r.name, r.err_f64, r.err_f32, if ok { "pass" } else { "FAIL" });
    }
    println!("{} of {} cases pass (tolerance {TOL_F64:e} f64, {TOL_F32:e} f32)", cases.len() - failed, cases.len());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}
