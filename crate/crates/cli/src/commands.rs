use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use otgdl::agdl::{train_agdl, train_baseline_common, train_gdl_exact, Alignment, TrainOutcome};
use otgdl::checkpoint::{dictionary_checkpoint, dictionary_from_checkpoint, predictor_checkpoint, predictor_from_checkpoint, Checkpoint};
use otgdl::config::{apply_seed_override, load_config, RunConfig, SEED_ENV};
use otgdl::dataset::Dataset;
use otgdl::dictionary::{init_dictionary, DictionaryModel, Variant};
use otgdl::eval::{atom_stats, best_alpha, classify_probe, embed_grid, probe_csv, EmbeddingTable, Probe};
use otgdl::io::{write_atomic, write_graph};
use otgdl::predictor::{pretrain_predictor, PredictorParams};
use otgdl::synth::gen_dataset;
use otgdl::{Error, Graph};

use crate::provenance::write_run_record;
use crate::svg::{line_chart, Series};
use crate::{Command, TrainMode};

pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

const MODE_KEY: &str = "train_mode";

fn config(path: Option<&Path>) -> Outcome<RunConfig> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => {
            let mut c = RunConfig::default();
            apply_seed_override(&mut c, std::env::var(SEED_ENV).ok().as_deref())?;
            Ok(c)
        }
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.txt")
    } else {
        data.to_path_buf()
    }
}

/// `<path>.<suffix>` next to a file output.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_predictor(path: &Path) -> Outcome<PredictorParams> {
    Ok(predictor_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

pub fn run(cmd: Command) -> Outcome<()> {
    match cmd {
        Command::Gen { config: c, out } => gen(config(c.as_deref())?, &out),
        Command::Pretrain { config: c, data, out } => pretrain(config(c.as_deref())?, &data, &out),
        Command::Train { config: c, data, mode, predictor, out } => train(config(c.as_deref())?, &data, mode, predictor.as_deref(), &out),
        Command::Embed { config: c, data, model, predictor, alpha, out } => {
            embed(config(c.as_deref())?, &data, &model, predictor.as_deref(), alpha, &out)
        }
        Command::Eval { config: c, embeddings, out } => evaluate(config(c.as_deref())?, &embeddings, &out),
        Command::Atoms { config: c, model, alpha, out } => atoms(config(c.as_deref())?, &model, alpha, &out),
        Command::Report { dir, out } => report(&dir, &out),
    }
}

fn gen(cfg: RunConfig, out: &Path) -> Outcome<()> {
    let manifest = gen_dataset(&cfg.synth, out)?;
    let mut outputs = vec![out.join("manifest.txt")];
    if let Some(t) = &manifest.template_path {
        outputs.push(out.join(t));
    }
    outputs.extend(manifest.entries.iter().map(|e| out.join(&e.path)));
    let metrics = BTreeMap::from([("graphs".to_string(), json!(manifest.entries.len()))]);
    write_run_record(&out.join("run.json"), "gen", &cfg, &[] as &[&Path], &outputs, metrics)?;
    println!("wrote {} graphs to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn pretrain(cfg: RunConfig, data: &Path, out: &Path) -> Outcome<()> {
    let manifest = manifest_path(data);
    let ds = Dataset::load(&manifest)?;
    let o = pretrain_predictor(&ds, &cfg.predictor, &cfg.pretrain, &cfg.sampler)?;
    predictor_checkpoint(&o.params, &cfg.to_text()).save(out)?;
    let mut trace = String::from("epoch,train_fugw,val_fugw\n");
    let mut timing = String::from("epoch,seconds\n");
    for e in &o.trace {
        writeln!(trace, "{},{},{}", e.epoch, num(e.train_fugw), num(e.val_fugw)).unwrap();
        writeln!(timing, "{},{}", e.epoch, e.seconds).unwrap();
    }
    let (trace_path, timing_path) = (sibling(out, "trace.csv"), sibling(out, "timing.csv"));
    write_atomic(&trace_path, trace.as_bytes())?;
    write_atomic(&timing_path, timing.as_bytes())?;
    let best = o.trace[o.best_epoch].val_fugw;
    let metrics = BTreeMap::from([
        ("best_epoch".to_string(), json!(o.best_epoch)),
        ("best_val_fugw".to_string(), json!(best)),
        ("uniform_val_fugw".to_string(), json!(o.uniform_val_fugw)),
    ]);
    write_run_record(&sibling(out, "run.json"), "pretrain", &cfg, &[&manifest], &[out.to_path_buf(), trace_path], metrics)?;
    println!("best validation FUGW {best} at epoch {} (uniform plan {})", o.best_epoch, o.uniform_val_fugw);
    Ok(())
}

fn train(cfg: RunConfig, data: &Path, mode: TrainMode, predictor: Option<&Path>, out: &Path) -> Outcome<()> {
    let manifest = manifest_path(data);
    let ds = Dataset::load(&manifest)?;
    let seed = cfg.seed;
    let mut inputs = vec![manifest.clone()];
    let outcome: TrainOutcome = match mode {
        TrainMode::Agdl => {
            let p = predictor.ok_or_else(|| Failure::Usage("train --mode agdl needs --predictor".into()))?;
            inputs.push(p.to_path_buf());
            let params = load_predictor(p)?;
            let init = init_dictionary(&ds, cfg.n_atoms, cfg.variant, seed)?;
            train_agdl(&ds, &params, init, &cfg.train)?
        }
        TrainMode::Baseline => {
            let init = init_dictionary(&ds, cfg.n_atoms, Variant::Fixed, seed)?;
            train_baseline_common(&ds, init, &cfg.train)?
        }
        TrainMode::GdlExact => {
            let init = init_dictionary(&ds, cfg.n_atoms, cfg.variant, seed)?;
            train_gdl_exact(&ds, cfg.exact_alpha, init, &cfg.train, &cfg.solver)?
        }
    };
    let mut ck = dictionary_checkpoint(&outcome.model, &cfg.to_text());
    ck.meta.push((MODE_KEY.into(), mode.as_str().into()));
    ck.save(out)?;
    let mut trace = String::from("step,epoch,alpha,loss,inner_iters\n");
    let mut timing = String::from("step,seconds\n");
    for s in &outcome.trace {
        writeln!(trace, "{},{},{},{},{}", s.step, s.epoch, s.alpha, s.loss, s.inner_iters).unwrap();
        writeln!(timing, "{},{}", s.step, s.seconds).unwrap();
    }
    let (trace_path, timing_path) = (sibling(out, "trace.csv"), sibling(out, "timing.csv"));
    write_atomic(&trace_path, trace.as_bytes())?;
    write_atomic(&timing_path, timing.as_bytes())?;
    let metrics = BTreeMap::from([
        ("steps".to_string(), json!(outcome.trace.len())),
        ("final_loss".to_string(), json!(outcome.trace.last().map(|s| s.loss))),
    ]);
    write_run_record(&sibling(out, "run.json"), "train", &cfg, &inputs, &[out.to_path_buf(), trace_path], metrics)?;
    println!("{} dictionary trained for {} steps", mode.as_str(), outcome.trace.len());
    Ok(())
}

fn load_dictionary(path: &Path) -> Outcome<(DictionaryModel, String)> {
    let ck = Checkpoint::load(path)?;
    let model = dictionary_from_checkpoint(&ck)?;
    let mode = ck.meta(MODE_KEY).unwrap_or("agdl").to_string();
    Ok((model, mode))
}

fn embed(cfg: RunConfig, data: &Path, model_path: &Path, predictor: Option<&Path>, alpha: Option<f64>, out: &Path) -> Outcome<()> {
    let manifest = manifest_path(data);
    let ds = Dataset::load(&manifest)?;
    let (model, mode) = load_dictionary(model_path)?;
    let alphas = alpha.map(|a| vec![a]).unwrap_or_else(|| cfg.alphas.clone());
    let mut inputs = vec![manifest.clone(), model_path.to_path_buf()];
    let params;
    let align = match mode.as_str() {
        "baseline" => Alignment::Identity,
        "gdl-exact" => Alignment::Exact(&cfg.solver),
        _ => {
            let p = predictor.ok_or_else(|| Failure::Usage("embedding with a predicted-plan dictionary needs --predictor".into()))?;
            inputs.push(p.to_path_buf());
            params = load_predictor(p)?;
            Alignment::Predicted(&params)
        }
    };
    let table = embed_grid(&ds, &model, &alphas, align, &cfg.train)?;
    write_atomic(out, table.to_csv().as_bytes())?;
    for f in &table.failures {
        eprintln!("warning: {f}");
    }
    let metrics = BTreeMap::from([
        ("rows".to_string(), json!(table.rows.len())),
        ("failures".to_string(), json!(table.failures)),
    ]);
    write_run_record(&sibling(out, "run.json"), "embed", &cfg, &inputs, &[out.to_path_buf()], metrics)?;
    println!("embedded {} rows", table.rows.len());
    Ok(())
}

fn evaluate(cfg: RunConfig, embeddings: &Path, out: &Path) -> Outcome<()> {
    if !embeddings.exists() {
        return Err(Error::MissingFile(embeddings.to_path_buf()).into());
    }
    let table = EmbeddingTable::parse_csv(&fs::read_to_string(embeddings).map_err(Error::from)?, &embeddings.display().to_string())?;
    let reports = classify_probe(&table, &cfg.probe)?;
    let probes_path = out.join("probes.csv");
    write_atomic(&probes_path, probe_csv(&reports).as_bytes())?;

    let mut stats = String::new();
    for a in table.alphas() {
        let rows = table.at_alpha(a);
        let st = atom_stats(&rows, table.k, 10)?;
        if stats.is_empty() {
            stats.push_str("alpha,atom,active_fraction");
            for c in &st.contrasts {
                write!(stats, ",corr_{c}").unwrap();
            }
            stats.push('\n');
        }
        for k in 0..table.k {
            write!(stats, "{a},{},{}", k + 1, st.active_fraction[k]).unwrap();
            for c in 0..st.contrasts.len() {
                write!(stats, ",{}", st.correlation[[k, c]]).unwrap();
            }
            stats.push('\n');
        }
    }
    let stats_path = out.join("atom_stats.csv");
    write_atomic(&stats_path, stats.as_bytes())?;

    let mut metrics = BTreeMap::new();
    for probe in [Probe::Contrast, Probe::Subject] {
        if let Some(r) = best_alpha(&reports, probe) {
            metrics.insert(format!("best_{}", probe.as_str()), json!({"alpha": r.alpha, "mean": r.mean, "sd": r.sd}));
            println!("{} probe: best alpha {} accuracy {:.3} (chance {:.3})", probe.as_str(), r.alpha, r.mean, r.chance);
        }
    }
    write_run_record(&out.join("run.json"), "eval", &cfg, &[embeddings], &[probes_path, stats_path], metrics)?;
    Ok(())
}

fn atoms(cfg: RunConfig, model_path: &Path, alpha: Option<f64>, out: &Path) -> Outcome<()> {
    let (model, _) = load_dictionary(model_path)?;
    let alphas = alpha.map(|a| vec![a]).unwrap_or_else(|| cfg.alphas.clone());
    let mut csv = String::from("alpha,atom,node");
    for c in 1..=model.d {
        write!(csv, ",f{c}").unwrap();
    }
    csv.push('\n');
    let mut outputs = Vec::new();
    for &a in &alphas {
        for (k, f) in model.atoms_at(a)?.into_iter().enumerate() {
            for (i, row) in f.rows().into_iter().enumerate() {
                write!(csv, "{a},{},{i}", k + 1).unwrap();
                for x in row {
                    write!(csv, ",{x}").unwrap();
                }
                csv.push('\n');
            }
            let path = out.join(format!("alpha_{a}")).join(format!("atom_{}.graph", k + 1));
            write_graph(&Graph::new(f, model.structure.clone()), &path)?;
            outputs.push(path);
        }
    }
    let csv_path = out.join("atoms.csv");
    write_atomic(&csv_path, csv.as_bytes())?;
    outputs.push(csv_path);
    write_run_record(&out.join("run.json"), "atoms", &cfg, &[model_path], &outputs, BTreeMap::new())?;
    println!("exported {} atoms at {} alphas", model.k, alphas.len());
    Ok(())
}

/// Columns of a CSV file by header name.
fn read_columns(path: &Path) -> Outcome<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let mut cols: BTreeMap<String, Vec<String>> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for line in lines.filter(|l| !l.is_empty()) {
        for (h, v) in header.iter().zip(line.split(',')) {
            cols.get_mut(h).expect("header column").push(v.to_string());
        }
    }
    Ok(cols)
}

fn numeric(v: &[String]) -> Vec<f64> {
    v.iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect()
}

/// Files under `dir`, recursively and in sorted order, skipping `out`.
fn report_inputs(dir: &Path, out: &Path) -> Outcome<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d).map_err(Error::from)? {
            let path = entry.map_err(Error::from)?.path();
            if path.is_dir() {
                if path != out {
                    pending.push(path);
                }
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn report(dir: &Path, out: &Path) -> Outcome<()> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()).into());
    }
    let files = report_inputs(dir, out)?;
    let mut summary = String::from("source,kind,points,first,last,min\n");
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    for f in &files {
        // files in subdirectories are labelled by their relative path
        let name = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace(std::path::MAIN_SEPARATOR, "_");
        if name.ends_with(".trace.csv") {
            inputs.push(f.as_path());
            let cols = read_columns(f)?;
            let (x_key, y_keys): (&str, Vec<&str>) = if cols.contains_key("val_fugw") {
                ("epoch", vec!["train_fugw", "val_fugw"])
            } else {
                ("step", vec!["loss"])
            };
            let xs = numeric(cols.get(x_key).map(Vec::as_slice).unwrap_or_default());
            let mut series = Vec::new();
            for y in y_keys {
                let ys = numeric(cols.get(y).map(Vec::as_slice).unwrap_or_default());
                let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).filter(|(_, y)| y.is_finite()).collect();
                if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
                    let min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                    writeln!(summary, "{name},{y},{},{},{},{}", pts.len(), first.1, last.1, min).unwrap();
                }
                series.push(Series { name: y.to_string(), points: pts });
            }
            let svg_path = out.join(name.replace(".csv", ".svg"));
            write_atomic(&svg_path, line_chart(&name, x_key, "loss", &series).as_bytes())?;
            outputs.push(svg_path);
        } else if f.file_name().is_some_and(|n| n == "probes.csv") {
            inputs.push(f.as_path());
            let cols = read_columns(f)?;
            let probes = cols.get("probe").cloned().unwrap_or_default();
            let alphas = numeric(cols.get("alpha").map(Vec::as_slice).unwrap_or_default());
            let means = numeric(cols.get("mean").map(Vec::as_slice).unwrap_or_default());
            let mut series = Vec::new();
            for p in ["contrast", "subject"] {
                let pts: Vec<(f64, f64)> = probes.iter().zip(alphas.iter().zip(&means)).filter(|(q, _)| q.as_str() == p).map(|(_, (a, m))| (*a, *m)).collect();
                if let Some(best) = pts.iter().copied().reduce(|b, q| if q.1 > b.1 { q } else { b }) {
                    writeln!(summary, "{name},{p},{},{},{},{}", pts.len(), pts[0].1, pts[pts.len() - 1].1, best.0).unwrap();
                }
                series.push(Series { name: p.to_string(), points: pts });
            }
            let svg_path = out.join(name.replace(".csv", ".svg"));
            write_atomic(&svg_path, line_chart("probe accuracy", "alpha", "accuracy", &series).as_bytes())?;
            outputs.push(svg_path);
        }
    }
    let summary_path = out.join("summary.csv");
    write_atomic(&summary_path, summary.as_bytes())?;
    outputs.push(summary_path);
    let mut metrics = BTreeMap::new();
    metrics.insert("charts".to_string(), Value::from(outputs.len() - 1));
    write_run_record(&out.join("run.json"), "report", &RunConfig::default(), &inputs, &outputs, metrics)?;
    println!("wrote {} charts to {}", outputs.len() - 1, out.display());
    Ok(())
}
