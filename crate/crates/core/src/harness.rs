//! Sweep runner: expands axes × seeds into runs, shares pretraining stages
//! between runs by content hash, appends one CSV row per finished run and
//! resumes from the rows already present.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipelines::{run_stage, Init, Stage, StageConfig, CHECKPOINT_FILE};

pub const SWEEP_CSV: &str = "sweep.csv";
const FIXED_COLUMNS: [&str; 6] = ["seed", "best_miou", "final_miou", "wall_seconds", "status", "checkpoint"];

/// One stage of a run's pipeline, with its cache location.
#[derive(Clone, Debug)]
pub struct PlannedStage {
    pub config: StageConfig,
    pub hash: String,
    pub dir: PathBuf,
}

/// The stages a fine-tune configuration depends on, upstream first. The
/// fine-tune stage itself comes last. Upstream stages live under `cache`
/// and the fine-tune stage under `runs`, both keyed by hash.
///
/// `finetune.init = ddep | dep` selects the denoising mode, so one config
/// can sweep over initializations.
pub fn plan(cfg: &Config, cache: &Path, runs: &Path) -> Result<Vec<PlannedStage>> {
    let mut ft = StageConfig::finetune(cfg)?;
    let mut stages: Vec<PlannedStage> = Vec::new();
    let mut push = |mut sc: StageConfig, upstream: Option<&PlannedStage>, root: &Path| -> PlannedStage {
        sc.init_from = upstream.map(|u| u.dir.join(CHECKPOINT_FILE));
        let hash = sc.hash(upstream.map(|u| u.hash.as_str()));
        let dir = root.join(format!("{}-{}", sc.stage, &hash[..16]));
        let p = PlannedStage { config: sc, hash, dir };
        stages.push(p.clone());
        p
    };
    let upstream = match ft.init {
        Init::Scratch => None,
        Init::Encoder => Some(push(StageConfig::encoder(cfg)?, None, cache)),
        Init::DDeP | Init::DeP => {
            let mut c = cfg.clone();
            c.set("denoise.mode", if ft.init == Init::DDeP { "ddep" } else { "dep" })?;
            let den = StageConfig::denoise(&c)?;
            let enc = if den.needs_upstream() { Some(push(StageConfig::encoder(cfg)?, None, cache)) } else { None };
            Some(push(den, enc.as_ref(), cache))
        }
    };
    ft.init_from = None;
    push(ft, upstream.as_ref(), runs);
    Ok(stages)
}

#[derive(Clone, Debug)]
pub struct Run {
    /// Axis values in axis order.
    pub values: Vec<String>,
    pub seed: u64,
    pub config: Config,
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub base: Config,
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    pub max_runs: usize,
}

impl Sweep {
    pub fn from_config(cfg: &Config) -> Result<Sweep> {
        let axes = cfg.sweep_axes();
        if let Some((k, _)) = axes.iter().find(|(k, _)| k == "finetune.seed") {
            return Err(cfg.bad(&format!("sweep.axis.{k}"), "fine-tune seeds are swept through sweep.seeds"));
        }
        if let Some((k, _)) = axes.iter().find(|(_, v)| v.is_empty() || v.iter().any(String::is_empty)) {
            return Err(cfg.bad(&format!("sweep.axis.{k}"), "empty axis value"));
        }
        let seeds: Vec<u64> = cfg.list("sweep.seeds")?;
        if seeds.is_empty() {
            return Err(cfg.bad("sweep.seeds", "need at least one seed"));
        }
        Ok(Sweep { base: cfg.clone(), axes, seeds, max_runs: cfg.parse_as("sweep.max_runs")? })
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product::<usize>() * self.seeds.len()
    }

    /// Every run, axes varying slowest-first in key order, seeds fastest.
    pub fn runs(&self) -> Result<Vec<Run>> {
        let size = self.size();
        if size > self.max_runs {
            return Err(Error::BadValue {
                key: "sweep.max_runs".into(),
                reason: format!("the sweep expands to {size} runs, above the cap of {}", self.max_runs),
            });
        }
        let mut combos: Vec<Vec<String>> = vec![Vec::new()];
        for (_, values) in &self.axes {
            combos = combos.iter().flat_map(|c| values.iter().map(move |v| [c.clone(), vec![v.clone()]].concat())).collect();
        }
        let mut runs = Vec::with_capacity(size);
        for values in combos {
            for &seed in &self.seeds {
                let mut config = self.base.clone();
                for ((key, _), v) in self.axes.iter().zip(&values) {
                    config.set(key, v)?;
                }
                config.set("finetune.seed", &seed.to_string())?;
                runs.push(Run { values: values.clone(), seed, config });
            }
        }
        Ok(runs)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["run_hash".to_string()];
        h.extend(self.axes.iter().map(|(k, _)| k.clone()));
        h.extend(FIXED_COLUMNS.iter().map(|s| s.to_string()));
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub run_hash: String,
    pub values: Vec<String>,
    pub seed: u64,
    pub best_miou: Option<f64>,
    pub final_miou: Option<f64>,
    pub wall_seconds: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub checkpoint: String,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Keeps a free-text field inside one CSV cell.
fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c == ',' { ';' } else if c.is_control() { ' ' } else { c }).collect()
}

impl SweepRow {
    fn to_line(&self) -> String {
        let mut cols = vec![self.run_hash.clone()];
        cols.extend(self.values.iter().map(|v| sanitize(v)));
        cols.extend([
            self.seed.to_string(),
            cell(self.best_miou),
            cell(self.final_miou),
            format!("{:.3}", self.wall_seconds),
            sanitize(&self.status),
            sanitize(&self.checkpoint),
        ]);
        cols.join(",")
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub header: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Mean and population standard deviation of `values`; the std of a single
/// value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepResult {
    /// Mean and std of best mIoU over seeds, per axis-value combination, for
    /// successful rows. Combinations keep first-appearance order.
    pub fn aggregate(&self) -> Vec<(Vec<String>, usize, f64, f64)> {
        let mut groups: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.status == "ok") {
            let Some(v) = r.best_miou else { continue };
            match groups.iter_mut().find(|(k, _)| *k == r.values) {
                Some((_, xs)) => xs.push(v),
                None => groups.push((r.values.clone(), vec![v])),
            }
        }
        groups
            .into_iter()
            .map(|(k, xs)| {
                let (m, s) = mean_std(&xs);
                (k, xs.len(), m, s)
            })
            .collect()
    }

    /// Best mIoU per seed for the rows whose axis values match `values`.
    pub fn by_seed(&self, values: &[&str]) -> BTreeMap<u64, f64> {
        self.rows
            .iter()
            .filter(|r| r.status == "ok" && r.values.iter().map(String::as_str).eq(values.iter().copied()))
            .filter_map(|r| r.best_miou.map(|v| (r.seed, v)))
            .collect()
    }
}

/// Parsed CSV: header and rows of cells.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(Error::data(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                i + 2,
                cells.len(),
                header.len()
            )));
        }
        rows.push(cells);
    }
    Ok((header, rows))
}

fn parse_rows(path: &Path, header: &[String]) -> Result<Vec<SweepRow>> {
    let (found, cells) = read_csv(path)?;
    if found != header {
        return Err(Error::data(format!(
            "{}: header `{}` does not match this sweep's `{}`",
            path.display(),
            found.join(","),
            header.join(",")
        )));
    }
    let k = header.len() - FIXED_COLUMNS.len() - 1;
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::data(format!("{}: bad number `{s}`", path.display())))
        }
    };
    cells
        .into_iter()
        .map(|c| {
            Ok(SweepRow {
                run_hash: c[0].clone(),
                values: c[1..=k].to_vec(),
                seed: c[k + 1].parse().map_err(|_| Error::data(format!("{}: bad seed `{}`", path.display(), c[k + 1])))?,
                best_miou: num(&c[k + 2])?,
                final_miou: num(&c[k + 3])?,
                wall_seconds: num(&c[k + 4])?.unwrap_or(0.0),
                status: c[k + 5].clone(),
                checkpoint: c[k + 6].clone(),
            })
        })
        .collect()
}

/// Appends `line` under an exclusive advisory lock.
fn append_locked(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.lock().map_err(|e| Error::io(path, e))?;
    let res = f.write_all(format!("{line}\n").as_bytes()).and_then(|_| f.flush());
    let _ = f.unlock();
    res.map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct StageLocks {
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl StageLocks {
    fn get(&self, hash: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock map poisoned").entry(hash.to_string()).or_default().clone()
    }
}

/// Runs `stage` unless its checkpoint is already cached. Output is written
/// to a scratch directory and renamed into place.
fn ensure_stage(stage: &PlannedStage, locks: &StageLocks) -> Result<()> {
    let lock = locks.get(&stage.hash);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    if stage.dir.join(CHECKPOINT_FILE).exists() {
        log::info!("reusing {} {}", stage.config.stage, stage.dir.display());
        return Ok(());
    }
    log::info!("running {} into {}", stage.config.stage, stage.dir.display());
    let out = run_stage(&stage.config)?;
    write_atomically(&stage.dir, |tmp| out.write(tmp).map(|_| ()))
}

fn write_atomically(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    write(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn execute(run: &Run, stages: &[PlannedStage], locks: &StageLocks) -> SweepRow {
    let start = Instant::now();
    let (ft, upstream) = stages.split_last().expect("a plan ends with fine-tuning");
    let mut row = SweepRow {
        run_hash: ft.hash.clone(),
        values: run.values.clone(),
        seed: run.seed,
        best_miou: None,
        final_miou: None,
        wall_seconds: 0.0,
        status: "ok".into(),
        checkpoint: String::new(),
    };
    let result = (|| -> Result<()> {
        for s in upstream {
            ensure_stage(s, locks)?;
        }
        debug_assert_eq!(ft.config.stage, Stage::FineTune);
        let out = run_stage(&ft.config)?;
        write_atomically(&ft.dir, |tmp| out.write(tmp).map(|_| ()))?;
        row.best_miou = out.best_miou();
        row.final_miou = out.final_miou;
        row.checkpoint = ft.dir.join(CHECKPOINT_FILE).display().to_string();
        Ok(())
    })();
    if let Err(e) = result {
        log::error!("run {} failed: {e}", &ft.hash[..16]);
        row.status = format!("failed: {e}");
    }
    row.wall_seconds = start.elapsed().as_secs_f64();
    row
}

/// Runs every missing arm of `sweep` under `out`, with up to `jobs` arms in
/// parallel. Rows already in `out/sweep.csv` are kept and not rerun.
pub fn run_sweep(sweep: &Sweep, out: &Path, jobs: usize) -> Result<SweepResult> {
    run_sweep_cached(sweep, out, &out.join("cache"), jobs)
}

/// [`run_sweep`] with pretraining stages kept in `cache`, which several
/// sweeps may share.
pub fn run_sweep_cached(sweep: &Sweep, out: &Path, cache: &Path, jobs: usize) -> Result<SweepResult> {
    let runs = sweep.runs()?;
    let (cache, run_dir) = (cache.to_path_buf(), out.join("runs"));
    let plans = runs.iter().map(|r| plan(&r.config, &cache, &run_dir)).collect::<Result<Vec<_>>>()?;
    for dir in [out, &cache, &run_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = sweep.header();
    let csv = out.join(SWEEP_CSV);
    let done: Vec<SweepRow> = if csv.exists() { parse_rows(&csv, &header)? } else { Vec::new() };
    if !csv.exists() {
        append_locked(&csv, &header.join(","))?;
    }
    let pending: Vec<usize> = (0..runs.len())
        .filter(|&i| {
            let hash = &plans[i].last().expect("non-empty plan").hash;
            !done.iter().any(|r| &r.run_hash == hash)
        })
        .collect();
    log::info!("{} runs, {} already recorded, {} to go", runs.len(), runs.len() - pending.len(), pending.len());

    let locks = StageLocks::default();
    let queue = Mutex::new(pending.into_iter());
    let fresh: Mutex<Vec<(usize, SweepRow)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let Some(i) = queue.lock().expect("queue poisoned").next() else { break };
                let row = execute(&runs[i], &plans[i], &locks);
                if let Err(e) = append_locked(&csv, &row.to_line()) {
                    failure.lock().expect("poisoned").get_or_insert(e);
                    break;
                }
                fresh.lock().expect("poisoned").push((i, row));
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    let mut fresh = fresh.into_inner().expect("poisoned");
    fresh.sort_by_key(|(i, _)| *i);
    let mut rows = done;
    rows.extend(fresh.into_iter().map(|(_, r)| r));
    Ok(SweepResult { header, rows })
}

/// Writes one series file per initialization regime (plus any other axis
/// values) from a sweep CSV: label fraction, its log10, mean and std of
/// best mIoU over successful seeds. Returns the files written.
pub fn plot_data(sweep_csv: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (header, rows) = read_csv(sweep_csv)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let required = ["finetune.init", "finetune.label_fraction", "best_miou", "status"];
    let missing: Vec<String> = required.iter().filter(|c| col(c).is_none()).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::BadValue {
            key: sweep_csv.display().to_string(),
            reason: format!("missing columns: {}", missing.join(", ")),
        });
    }
    let [init, frac, best, status] = required.map(|c| col(c).expect("checked above"));
    let seed = col("seed").unwrap_or(header.len());
    let extra: Vec<usize> = (1..seed.min(header.len())).filter(|&i| i != init && i != frac).collect();

    let mut series: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r[status] == "ok" && !r[best].is_empty()) {
        let mut name = r[init].clone();
        for &i in &extra {
            let _ = write!(name, "_{}={}", header[i], r[i]);
        }
        let v: f64 = r[best].parse().map_err(|_| Error::data(format!("bad best_miou `{}`", r[best])))?;
        series.entry(name).or_default().entry(r[frac].clone()).or_default().push(v);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (name, points) in series {
        let mut pts: Vec<(f64, Vec<f64>)> = points
            .into_iter()
            .map(|(f, v)| f.parse::<f64>().map(|x| (x, v)).map_err(|_| Error::data(format!("bad label fraction `{f}`"))))
            .collect::<Result<_>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut text = String::from("label_fraction,log10_fraction,mean_miou,std_miou,n\n");
        for (x, v) in &pts {
            let (m, s) = mean_std(v);
            let _ = writeln!(text, "{x},{},{m},{s},{}", x.log10(), v.len());
        }
        let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '_' }).collect();
        let path = out.join(format!("series_{safe}.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a finished sweep back from its CSV.
pub fn load_result(sweep: &Sweep, out: &Path) -> Result<SweepResult> {
    let header = sweep.header();
    let rows = parse_rows(&out.join(SWEEP_CSV), &header)?;
    Ok(SweepResult { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sweep(extra: &str) -> Config {
        let base = "
            pretrain_data.num_samples = 8
            pretrain_data.image_size = 16
            finetune_data.num_samples = 8
            finetune_data.val_samples = 4
            finetune_data.image_size = 16
            model.encoder_widths = 4,8
            model.decoder_widths = 8,4
            encoder.epochs = 1
            encoder.batch_size = 4
            encoder.crop_size = 16
            denoise.epochs = 1
            denoise.batch_size = 4
            denoise.crop_size = 16
            finetune.epochs = 1
            finetune.batch_size = 4
            finetune.crop_size = 16
            sweep.seeds = 0,1
        ";
        Config::parse(&format!("{base}\n{extra}")).unwrap()
    }

    #[test]
    fn runs_expand_axes_and_seeds() {
        let cfg = tiny_sweep("sweep.axis.finetune.label_fraction = 1.0 | 0.5\nsweep.axis.finetune.init = none | ddep | encoder");
        let sweep = Sweep::from_config(&cfg).unwrap();
        assert_eq!(sweep.size(), 12);
        let runs = sweep.runs().unwrap();
        assert_eq!(runs.len(), 12);
        assert_eq!((runs[0].values.clone(), runs[0].seed), (vec!["none".to_string(), "1.0".to_string()], 0));
        assert_eq!(runs[1].seed, 1);
        assert_eq!(runs[11].config.get("finetune.init").unwrap(), "encoder");
        let capped = tiny_sweep("sweep.axis.finetune.label_fraction = 1.0 | 0.5\nsweep.max_runs = 3");
        assert!(matches!(Sweep::from_config(&capped).unwrap().runs(), Err(Error::BadValue { .. })));
    }

    #[test]
    fn seeds_share_pretraining() {
        let cfg = tiny_sweep("finetune.init = ddep");
        let runs = Sweep::from_config(&cfg).unwrap().runs().unwrap();
        let (c, r) = (Path::new("/c"), Path::new("/r"));
        let a = plan(&runs[0].config, c, r).unwrap();
        let b = plan(&runs[1].config, c, r).unwrap();
        assert_eq!(a.iter().map(|s| s.config.stage).collect::<Vec<_>>(), vec![Stage::EncoderSupervised, Stage::DDeP, Stage::FineTune]);
        assert_eq!(a[0].hash, b[0].hash);
        assert_eq!(a[1].hash, b[1].hash);
        assert_ne!(a[2].hash, b[2].hash);
        assert_eq!(a[1].config.init_from.as_deref(), Some(a[0].dir.join(CHECKPOINT_FILE).as_path()));
        let dep = plan(&tiny_sweep("finetune.init = dep").clone(), c, r).unwrap();
        assert_eq!(dep.iter().map(|s| s.config.stage).collect::<Vec<_>>(), vec![Stage::DeP, Stage::FineTune]);
    }

    #[test]
    fn sweep_writes_rows_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_sweep("sweep.axis.finetune.init = none | encoder");
        let sweep = Sweep::from_config(&cfg).unwrap();
        let first = run_sweep(&sweep, dir.path(), 2).unwrap();
        assert_eq!(first.rows.len(), 4);
        assert!(first.rows.iter().all(|r| r.status == "ok" && r.best_miou.is_some()), "{:?}", first.rows);
        let csv = dir.path().join(SWEEP_CSV);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("run_hash,finetune.init,seed,best_miou,final_miou,wall_seconds,status,checkpoint\n"));

        // drop one row, as if killed before it was written
        let kept: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&csv, kept.join("\n") + "\n").unwrap();
        let again = run_sweep(&sweep, dir.path(), 1).unwrap();
        assert_eq!(again.rows.len(), 4);
        assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);
        let agg = again.aggregate();
        assert_eq!(agg.len(), 2);
        assert!(agg.iter().all(|(_, n, _, _)| *n == 2));
    }

    #[test]
    fn plot_series_per_regime() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("s.csv");
        std::fs::write(
            &csv,
            "run_hash,finetune.init,finetune.label_fraction,seed,best_miou,final_miou,wall_seconds,status,checkpoint\n\
             a,none,0.1,0,0.5,0.5,1,ok,x\n\
             b,none,0.1,1,0.7,0.5,1,ok,x\n\
             c,none,0.01,0,0.2,0.5,1,ok,x\n\
             d,ddep,0.1,0,0.9,0.5,1,ok,x\n\
             e,ddep,0.1,1,,,1,failed: boom,\n",
        )
        .unwrap();
        let files = plot_data(&csv, &dir.path().join("plots")).unwrap();
        assert_eq!(files.len(), 2);
        let none = std::fs::read_to_string(dir.path().join("plots/series_none.csv")).unwrap();
        let lines: Vec<&str> = none.lines().collect();
        assert_eq!(lines[1], "0.01,-2,0.2,0,1");
        let cells: Vec<f64> = lines[2].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells[2], 0.6);
        assert!((cells[3] - 0.1).abs() < 1e-12);
        let ddep = std::fs::read_to_string(dir.path().join("plots/series_ddep.csv")).unwrap();
        assert!(ddep.ends_with("0.1,-1,0.9,0,1\n"));

        std::fs::write(&csv, "run_hash,seed,best_miou\n").unwrap();
        match plot_data(&csv, dir.path()) {
            Err(Error::BadValue { reason, .. }) => assert!(reason.contains("finetune.init") && reason.contains("status")),
            other => panic!("{other:?}"),
        }
    }
}
