use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndfield::gradcheck::{self, GradcheckConfig};
use ndfield::io::{self, RawData, RawVolume};
use ndfield::metrics::{metrics_rows, registration_dice, residual_jacobian, structure_trajectories, JacobianMap};
use ndfield::network::NetworkState;
use ndfield::phantom::{self, PhantomSpec};
use ndfield::trainer::{fit_with, predict_field, warp_volume, FieldGrid, FitObserver, LogEntry, SamplingMask};
use ndfield::volume::{LabelGrid, Volume4DSeries};
use ndfield::{Error, Result};

use crate::config::CliConfig;
use crate::{dims3, Command, Common, EXIT_INPUT, EXIT_NUMERIC, EXIT_VERIFY};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalAbort(_) | Error::NonFiniteGradient(_) => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Fit { manifest, fit, common } => {
            let mut c = common.load()?;
            fit.apply(&mut c);
            let out = prepare(&common, &c)?;
            cmd_fit(&manifest, &c, &out)
        }
        Command::Predict {
            model,
            time,
            dims,
            warp,
            jacdet_dt,
            chunk,
            common,
        } => {
            let mut c = common.load()?;
            override_predict(&mut c, time, dims.as_deref(), chunk)?;
            c.predict.jacdet_dt |= jacdet_dt;
            let out = prepare(&common, &c)?;
            cmd_predict(&model, warp.as_deref(), &c, &out, true)
        }
        Command::Jacobian {
            model,
            time,
            dims,
            chunk,
            common,
        } => {
            let mut c = common.load()?;
            override_predict(&mut c, time, dims.as_deref(), chunk)?;
            let out = prepare(&common, &c)?;
            cmd_predict(&model, None, &c, &out, false)
        }
        Command::Metrics {
            model,
            manifest,
            labels,
            times,
            dead_band,
            holdout,
            fit,
            common,
        } => {
            let mut c = common.load()?;
            fit.apply(&mut c);
            if labels.is_some() {
                c.metrics.labels = labels;
            }
            if times.is_some() {
                c.metrics.times = times;
            }
            if let Some(d) = dead_band {
                c.metrics.dead_band = d;
            }
            if holdout.is_some() {
                c.metrics.holdout = holdout;
            }
            let out = prepare(&common, &c)?;
            cmd_metrics(&model, &manifest, &c, &out)
        }
        Command::Phantom {
            size,
            sigma,
            times,
            rate,
            common,
        } => {
            let mut c = common.load()?;
            if let Some(n) = size {
                c.phantom.dims = [n; 3];
            }
            if let Some(s) = sigma {
                c.phantom.noise_sigma = s;
            }
            if let Some(t) = times {
                c.phantom.times = t;
            }
            if let Some(r) = rate {
                c.phantom.growing.rate = r;
            }
            let out = prepare(&common, &c)?;
            cmd_phantom(&c.phantom, &out)
        }
        Command::Gradcheck {
            width,
            points,
            precision,
            corrupt,
            common,
        } => {
            let mut c = common.load()?;
            if let Some(w) = width {
                c.gradcheck.width = w;
            }
            if let Some(p) = points {
                c.gradcheck.points = p;
            }
            if let Some(p) = precision {
                c.gradcheck.precision = p;
            }
            let out = match &common.out {
                Some(_) => Some(prepare(&common, &c)?),
                None => None,
            };
            cmd_gradcheck(&c, corrupt, out.as_deref())
        }
    }
}

fn override_predict(c: &mut CliConfig, time: Option<f64>, dims: Option<&[usize]>, chunk: Option<usize>) -> Result<()> {
    if time.is_some() {
        c.predict.time = time;
    }
    if let Some(d) = dims {
        c.predict.dims = Some(dims3(d)?);
    }
    if let Some(ch) = chunk {
        c.predict.chunk = ch;
    }
    Ok(())
}

/// Creates the output directory, configures threads and echoes the config.
fn prepare(common: &Common, c: &CliConfig) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Invalid("--out is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    // a global pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
    io::write_atomic(&out.join("config.toml"), c.to_toml()?.as_bytes())?;
    Ok(out)
}

struct Progress<'a> {
    out: &'a Path,
}

impl FitObserver for Progress<'_> {
    fn on_log(&mut self, e: &LogEntry) {
        eprintln!("iter {} total {:.6e}", e.iteration, e.loss.total);
    }

    fn on_checkpoint(&mut self, iteration: usize, state: &NetworkState) -> Result<()> {
        io::save_model(&self.out.join(format!("checkpoint_{iteration:07}.ndfield")), state)
    }
}

fn sampling_mask(c: &CliConfig, series: &Volume4DSeries) -> Result<Option<SamplingMask>> {
    if !c.sampling.use_labels {
        return Ok(None);
    }
    let labels = series
        .baseline()
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("label sampling needs baseline labels in the manifest".into()))?;
    Ok(Some(SamplingMask::dilated(labels, c.sampling.dilation)?))
}

fn fit_series(series: &Volume4DSeries, c: &CliConfig, out: &Path) -> Result<(NetworkState, ndfield::trainer::FitReport)> {
    let mask = sampling_mask(c, series)?;
    fit_with(series, &c.fit, mask.as_ref(), &mut Progress { out })
}

fn cmd_fit(manifest: &Path, c: &CliConfig, out: &Path) -> Result<u8> {
    let series = io::load_series(manifest)?;
    if series.scans().len() < 2 {
        return Err(Error::Invalid(format!(
            "{}: a fit needs at least 2 scans, found {}",
            manifest.display(),
            series.scans().len()
        )));
    }
    let (state, report) = fit_series(&series, c, out)?;
    io::save_model(&out.join("model.ndfield"), &state)?;
    io::write_fit_report_csv(&out.join("fit_report.csv"), &report)?;
    eprintln!("fit done in {} ms, checksum {}", report.wall_ms, report.checksum);
    Ok(0)
}

fn raw_f64(dims: [usize; 3], data: Vec<f64>) -> Result<RawVolume> {
    RawVolume::new(dims, [1.0; 3], RawData::F64(data))
}

fn write_jacdet_slice(path: &Path, map: &JacobianMap, c: &CliConfig) -> Result<()> {
    let axis = c.predict.slice_axis;
    let index = c
        .predict
        .slice_index
        .unwrap_or(map.dims.get(axis).copied().unwrap_or(0) / 2);
    let [lo, hi] = c.predict.jacdet_range;
    io::write_slice_image(path, map.dims, &map.values, axis, index, (lo, hi))
}

fn cmd_predict(model: &Path, warp: Option<&Path>, c: &CliConfig, out: &Path, full: bool) -> Result<u8> {
    let state = io::load_model(model)?;
    let months = c
        .predict
        .time
        .ok_or_else(|| Error::Invalid("--time is required".into()))?;
    if months.is_nan() || months < 0.0 {
        return Err(Error::Invalid(format!("time must be >= 0 months, got {months}")));
    }
    let moving = warp.map(io::read_volume).transpose()?;
    let dims = match (c.predict.dims, &moving) {
        (Some(d), _) => d,
        (None, Some(v)) => v.dims(),
        (None, None) => return Err(Error::Invalid("--dims is required without --warp".into())),
    };
    let field = predict_field(&state, months, dims, c.predict.chunk, full && c.predict.jacdet_dt)?;
    let map = JacobianMap::from_field(&field)?;
    if map.folded_count > 0 {
        log::warn!("{} voxels have |J| <= 0", map.folded_count);
    }
    io::write_raw(&out.join("jacdet.raw"), &raw_f64(dims, map.values.clone())?)?;
    write_jacdet_slice(&out.join("jacdet.pgm"), &map, c)?;
    if full {
        for (a, name) in ["disp_x.raw", "disp_y.raw", "disp_z.raw"].iter().enumerate() {
            let comp = field.displacement.iter().map(|d| d[a]).collect();
            io::write_raw(&out.join(name), &raw_f64(dims, comp)?)?;
        }
        if let Some(d) = &field.jac_det_dt {
            io::write_raw(&out.join("jacdet_dt.raw"), &raw_f64(dims, d.clone())?)?;
        }
        if let Some(v) = &moving {
            let warped = warp_volume(v, &field)?;
            io::write_raw(&out.join("warped.raw"), &RawVolume::from_volume(&warped))?;
        }
    }
    Ok(0)
}

fn baseline_labels(series: &Volume4DSeries) -> Result<&LabelGrid> {
    series
        .baseline()
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("metrics need baseline labels in the manifest".into()))
}

fn label_ids(c: &CliConfig, labels: &LabelGrid) -> Vec<i32> {
    match &c.metrics.labels {
        Some(l) => l.clone(),
        None => labels
            .data()
            .iter()
            .filter(|&&l| l != 0)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    }
}

fn cmd_metrics(model: &Path, manifest: &Path, c: &CliConfig, out: &Path) -> Result<u8> {
    let state = io::load_model(model)?;
    let series = io::load_series(manifest)?;
    let base = baseline_labels(&series)?;
    let ids = label_ids(c, base);
    if ids.is_empty() {
        return Err(Error::Invalid("no labels to evaluate".into()));
    }
    let times = c.metrics.times.clone().unwrap_or_else(|| series.times());
    let mut structures = structure_trajectories(&state, base, &ids, &times, c.metrics.dead_band)?;
    for s in &mut structures {
        for (k, &t) in times.iter().enumerate() {
            if let Some(scan) = series.scans().iter().find(|s| s.months == t) {
                if let Some(l) = &scan.labels {
                    s.dice[k] = Some(registration_dice(&state, base, l, t, s.label)?);
                }
            }
        }
    }
    io::write_metrics_csv(&out.join("metrics.csv"), &metrics_rows(&structures))?;
    for (k, &t) in times.iter().enumerate() {
        let field = predict_field(&state, t, series.dims(), c.predict.chunk, false)?;
        let map = JacobianMap::from_field(&field)?;
        write_jacdet_slice(&out.join(format!("jacdet_t{k:02}.pgm")), &map, c)?;
    }
    if let Some(h) = c.metrics.holdout {
        holdout(&state, &series, h, &ids, c, out)?;
    }
    Ok(0)
}

/// Refits without the scan at `months` and compares against `full`.
fn holdout(full: &NetworkState, series: &Volume4DSeries, months: f64, ids: &[i32], c: &CliConfig, out: &Path) -> Result<()> {
    let held = series
        .scans()
        .iter()
        .find(|s| s.months == months)
        .ok_or_else(|| Error::Invalid(format!("no scan at {months} months to hold out")))?;
    let held_labels = held
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("the held-out scan has no labels".into()))?;
    let reduced = series.without(months)?;
    let (partial, _) = fit_series(&reduced, c, out)?;
    io::save_model(&out.join("holdout_model.ndfield"), &partial)?;
    let dims = series.dims();
    let a = JacobianMap::from_field(&predict_field(&partial, months, dims, c.predict.chunk, false)?)?;
    let b = JacobianMap::from_field(&predict_field(full, months, dims, c.predict.chunk, false)?)?;
    let residual = residual_jacobian(&a, &b)?;
    io::write_raw(&out.join("holdout_residual.raw"), &raw_f64(dims, residual.clone())?)?;
    let [lo, hi] = c.metrics.residual_range;
    let axis = c.predict.slice_axis;
    let index = c.predict.slice_index.unwrap_or(dims[axis.min(2)] / 2);
    io::write_slice_image(&out.join("holdout_residual.pgm"), dims, &residual, axis, index, (lo, hi))?;

    let base = baseline_labels(series)?;
    let mut text = String::from("time,label,dice,residual_mean_abs\n");
    for &label in ids {
        let dice = registration_dice(&partial, base, held_labels, months, label)?;
        let members = base.members(label);
        let mean_abs = members.iter().map(|&i| residual[i].abs()).sum::<f64>() / members.len().max(1) as f64;
        text.push_str(&format!("{months},{label},{dice},{mean_abs}\n"));
    }
    io::write_atomic(&out.join("holdout.csv"), text.as_bytes())
}

fn cmd_phantom(spec: &PhantomSpec, out: &Path) -> Result<u8> {
    let p = phantom::generate(spec)?;
    let mut manifest = String::new();
    for (k, scan) in p.series.scans().iter().enumerate() {
        let vol = format!("scan_{k:02}.raw");
        let lab = format!("labels_{k:02}.raw");
        io::write_raw(&out.join(&vol), &RawVolume::from_volume(&scan.volume))?;
        if let Some(l) = &scan.labels {
            io::write_raw(&out.join(&lab), &RawVolume::from_labels(l))?;
            manifest.push_str(&format!("{} {vol} {lab}\n", scan.months));
        } else {
            manifest.push_str(&format!("{} {vol}\n", scan.months));
        }
        let truth = predict_field(&p.truth, scan.months, spec.dims, 4096, false)?;
        io::write_raw(&out.join(format!("truth_jacdet_{k:02}.raw")), &truth_map(&truth)?)?;
    }
    io::write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    Ok(0)
}

fn truth_map(field: &FieldGrid) -> Result<RawVolume> {
    raw_f64(field.dims, field.jac_det.clone())
}

fn cmd_gradcheck(c: &CliConfig, corrupt: Option<String>, out: Option<&Path>) -> Result<u8> {
    let cfg = GradcheckConfig {
        seed: c.gradcheck.seed,
        width: c.gradcheck.width,
        points: c.gradcheck.points,
        precision: c.gradcheck.precision,
        corrupt,
    };
    let report = gradcheck::run(&cfg)?;
    let mut text = String::from("check,worst_relative_error,tolerance,compared,passed,location\n");
    for ch in &report.checks {
        eprintln!(
            "{} {:<30} worst {:.3e} (tol {:.0e}, {} compared)",
            if ch.passed() { "ok  " } else { "FAIL" },
            ch.name,
            ch.worst,
            ch.tolerance,
            ch.compared
        );
        text.push_str(&format!(
            "{},{:e},{:e},{},{},\"{}\"\n",
            ch.name,
            ch.worst,
            ch.tolerance,
            ch.compared,
            ch.passed(),
            ch.location.replace('"', "\"\"")
        ));
    }
    if let Some(dir) = out {
        io::write_atomic(&dir.join("gradcheck.csv"), text.as_bytes())?;
    }
    if report.passed() {
        eprintln!("gradcheck passed ({} checks)", report.checks.len());
        Ok(0)
    } else {
        let w = report.worst_offender().expect("non-empty report");
        eprintln!(
            "gradcheck FAILED: worst offender {} with relative error {:.3e} > {:.0e} at {}",
            w.name, w.worst, w.tolerance, w.location
        );
        Ok(EXIT_VERIFY)
    }
}
