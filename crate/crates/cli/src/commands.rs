use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use diffmorph::data::{as_image, save_field, save_image, write_dataset, Dataset, PairSample, SynthParams};
use diffmorph::metrics::{evaluate_pair, evaluate_warped, MetricReport, Report};
use diffmorph::nets::Model;
use diffmorph::schedule::{generate_traced, GenerateParams};
use diffmorph::tensor::io::{load_tensor, save_tensor};
use diffmorph::train::{classical_register, final_checkpoint_path, Checkpoint, TrainingConfig};
use diffmorph::{Error, Tensor};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn code(&self) -> u8 {
        self.code
    }

    fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    fn mismatch(msg: impl Into<String>) -> Self {
        CliError { code: 5, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::InvalidArgument { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::NonFinite(_) | Error::NonScalarLoss(_) | Error::Detached => 4,
            Error::ShapeMismatch { .. } | Error::Checkpoint(_) => 5,
        };
        CliError { code, msg: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Caps the worker pool at `DIFFMORPH_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DIFFMORPH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("DIFFMORPH_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size the thread pool: {e}")))
}

pub fn synth_data(out: &Path, count: usize, size: usize, seed: u64, blur: f64, max_mag: f64) -> Result<()> {
    let params = SynthParams { size, blur, max_mag };
    if size < 16 || !(blur >= 0.0) || !(max_mag >= 0.0) {
        return Err(CliError::usage(format!(
            "need --size >= 16 and non-negative --blur and --max-mag, got {params:?}"
        )));
    }
    write_dataset(out, count, &params, seed)?;
    eprintln!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn train(config: &Path) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut cfg = TrainingConfig::parse(&text)?;
    let base = config.parent().unwrap_or(Path::new("."));
    cfg.data = resolve(base, &cfg.data);
    cfg.output = resolve(base, &cfg.output);
    cfg.resume = cfg.resume.as_deref().map(|p| resolve(base, p));
    let out = diffmorph::train::train(&cfg)?;
    debug_assert_eq!(out, final_checkpoint_path(&cfg));
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.model()?)
}

fn load_pair(model: &Model, moving: &Path, fixed: &Path) -> Result<(Tensor, Tensor)> {
    let m = as_image(load_tensor(moving)?).map_err(|e| CliError::mismatch(format!("{}: {e}", moving.display())))?;
    let f = as_image(load_tensor(fixed)?).map_err(|e| CliError::mismatch(format!("{}: {e}", fixed.display())))?;
    if m.shape() != f.shape() {
        return Err(CliError::mismatch(format!(
            "moving image is {:?} but fixed image is {:?}",
            &m.shape()[2..],
            &f.shape()[2..]
        )));
    }
    check_size(model, &m)?;
    Ok((m, f))
}

fn check_size(model: &Model, img: &Tensor) -> Result<()> {
    let k = model.arch.size_multiple();
    let (h, w) = (img.shape()[2], img.shape()[3]);
    if h % k != 0 || w % k != 0 {
        return Err(CliError::mismatch(format!(
            "image size {h}x{w} is not a multiple of {k}, which this checkpoint requires"
        )));
    }
    Ok(())
}

fn unbatched(t: &Tensor) -> Tensor {
    t.clone().reshape(t.shape()[1..].to_vec()).expect("same element count")
}

fn write_outputs(field: &Tensor, warped: &Tensor, out_field: &Path, out_warped: &Path) -> Result<()> {
    save_field(&unbatched(field), out_field)?;
    save_tensor(&unbatched(warped), out_warped)?;
    Ok(())
}

pub fn register(
    checkpoint: &Path,
    moving: &Path,
    fixed: &Path,
    out_field: &Path,
    out_warped: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (m, f) = load_pair(&model, moving, fixed)?;
    let (field, warped) = model.register(&m, &f)?;
    write_outputs(field.tensor(), &warped, out_field, out_warped)?;
    if let Some(path) = report {
        let sample = PairSample::new(m, f)?;
        let row = evaluate_warped(&sample, &warped, field.tensor())?;
        let mut r = Report::new(&[]);
        let name = moving.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        r.push(name, vec![row])?;
        r.save(path)?;
    }
    Ok(())
}

/// Parses the η list, keeping each token's spelling for file names.
fn parse_etas(raw: &str) -> Result<Vec<(String, f64)>> {
    raw.split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok((tok.to_string(), v)),
                _ => Err(CliError::usage(format!("eta `{tok}` is not a number in [0, 1]"))),
            }
        })
        .collect()
}

pub fn interpolate(checkpoint: &Path, moving: &Path, fixed: &Path, etas: &str, out_dir: &Path) -> Result<()> {
    let etas = parse_etas(etas)?;
    let model = load_model(checkpoint)?;
    let (m, f) = load_pair(&model, moving, fixed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let latent = model.latent(&m, &f)?;
    for (tok, eta) in etas {
        let (field, warped) = model.warp_with_latent(&m, &latent.scale(eta as f32))?;
        let stem = format!("eta_{tok}");
        write_outputs(
            field.tensor(),
            &warped,
            &out_dir.join(format!("{stem}.field.dmt")),
            &out_dir.join(format!("{stem}.warped.dmt")),
        )?;
        save_image(&warped, out_dir.join(format!("{stem}.warped.pgm")))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    checkpoint: &Path,
    moving: &Path,
    fixed: &Path,
    t_forward: usize,
    steps: usize,
    seed: u64,
    out: &Path,
    save_trajectory: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if t_forward == 0 || t_forward > ck.config.t_train || steps == 0 || steps > t_forward {
        return Err(CliError::usage(format!(
            "need 1 <= --steps ({steps}) <= --t-forward ({t_forward}) <= {}",
            ck.config.t_train
        )));
    }
    let model = ck.model()?;
    let sched = ck.config.schedule()?;
    let (m, f) = load_pair(&model, moving, fixed)?;
    let traj_dir = out.with_file_name(format!(
        "{}_trajectory",
        out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    if save_trajectory {
        fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
    }
    let params = GenerateParams {
        horizon: t_forward,
        steps,
        seed,
    };
    let sample = generate_traced(&model, &m, &f, &sched, params, |t, x| {
        if save_trajectory {
            save_tensor(&unbatched(x), traj_dir.join(format!("t{t:04}.dmt")))?;
        }
        Ok(())
    })?;
    save_tensor(&unbatched(&sample), out)?;
    save_image(&sample, out.with_extension("pgm"))?;
    Ok(())
}

pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    baseline: Option<(usize, f64)>,
    with_initial: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let ds = Dataset::open(data)?;
    let pairs = ds.load_all()?;
    if let Some(s) = pairs.first() {
        check_size(&model, &s.moving)?;
    }
    let weights = ck.config.weights;
    let rows: Vec<Vec<MetricReport>> = pairs
        .par_iter()
        .map(|s| -> Result<Vec<MetricReport>> {
            let (field, warped) = model.register(&s.moving, &s.fixed)?;
            let mut groups = vec![evaluate_warped(s, &warped, field.tensor())?];
            if let Some((iters, step)) = baseline {
                let r = classical_register(&s.moving, &s.fixed, &weights, iters, step)?;
                groups.push(evaluate_pair(s, r.field.tensor())?);
            }
            if with_initial {
                let (h, w) = s.spatial();
                groups.push(evaluate_pair(s, &Tensor::zeros([1, 2, h, w]))?);
            }
            Ok(groups)
        })
        .collect::<Result<_>>()?;
    let mut extra = Vec::new();
    if baseline.is_some() {
        extra.push("baseline");
    }
    if with_initial {
        extra.push("initial");
    }
    let mut report = Report::new(&extra);
    for (id, groups) in ds.ids().iter().zip(rows) {
        report.push(id.clone(), groups)?;
    }
    report.save(out)?;
    eprintln!("evaluated {} pairs into {}", ds.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_tokens() {
        let e = parse_etas("0, 0.5,1.0").unwrap();
        assert_eq!(e[2], ("1.0".to_string(), 1.0));
        assert_eq!(parse_etas("1.5").err().unwrap().code(), 2);
        assert_eq!(parse_etas("x").err().unwrap().code(), 2);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Config { line: 1, msg: String::new() }).code(), 2);
        assert_eq!(CliError::from(Error::NonFinite("x".into())).code(), 4);
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).code(), 5);
    }
}
