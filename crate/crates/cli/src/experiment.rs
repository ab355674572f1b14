//! Stage execution over folds and sweeps, and result emission.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use frisbi::baselines::{build_baseline, coupling_weights, BaselineInputs, BaselineKind, TrainedParts};
use frisbi::io;
use frisbi::metrics::{evaluate, EvalReport};
use frisbi::nets::{stack_rows, Checkpoint, FlowModel, MlpEncoder};
use frisbi::numeric::{Matrix, RngStream, StreamId};
use frisbi::ot::mixture_weights_batch;
use frisbi::pipeline::{
    amortize, rope_finetune, sparsify, train_npe, train_transfer, NpeModels, SparseWeights, TrainReport,
};
use frisbi::simulate::{corrupt_labels, make_bundle, CalibTriple, LabeledObservation, Observation};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const DATA_DIR: &str = "data";
pub const DATA_MANIFEST: &str = "data_manifest.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Npe,
    Transfer,
    Amortize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Npe, Stage::Transfer, Stage::Amortize, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Npe => "npe",
            Stage::Transfer => "transfer",
            Stage::Amortize => "amortize",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::config("stages", format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Calib,
    Noise,
}

impl FromStr for Sweep {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calib" => Ok(Sweep::Calib),
            "noise" => Ok(Sweep::Noise),
            _ => Err(CliError::config("sweep", format!("expected calib or noise, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub stages: Vec<Stage>,
    /// Overrides the configured baseline list.
    pub baselines: Option<Vec<BaselineKind>>,
    pub sweep: Option<Sweep>,
    pub export_plans: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            baselines: None,
            sweep: None,
            export_plans: false,
        }
    }
}

/// Written next to the dataset CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub data_hash: String,
    pub config_hash: String,
    /// File names relative to the data directory.
    pub files: Vec<String>,
}

/// Hash of the settings that determine the generated data.
pub fn data_hash(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "seed": cfg.seed,
        "sizes": cfg.sizes,
        "simulator": cfg.simulator,
        "friction_range": cfg.friction_range,
    });
    ExperimentConfig::hash_text(&key.to_string())
}

/// Generates every split under `<out>/data`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<DataManifest> {
    cfg.validate()?;
    let dir = out.join(DATA_DIR);
    let bundle = make_bundle(
        &cfg.sizes,
        &cfg.simulator,
        (cfg.friction_range[0], cfg.friction_range[1]),
        cfg.seed,
    )?;
    io::save_bundle(&dir, &bundle)?;
    let manifest = DataManifest {
        data_hash: data_hash(cfg),
        config_hash: cfg.hash(),
        files: [io::SBI_FILE, io::U_FILE, io::OT_FILE, io::CALIB_FILE, io::TEST_FILE]
            .iter()
            .map(|f| f.to_string())
            .collect(),
    };
    write_json(&dir.join(DATA_MANIFEST), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Lazily loaded dataset splits; simulation files are read only when an
/// estimator needs them.
struct Data {
    dir: PathBuf,
    sbi: Option<Vec<LabeledObservation>>,
    u: Option<Vec<LabeledObservation>>,
    ot: Option<Vec<LabeledObservation>>,
    calib_pool: Option<Vec<CalibTriple>>,
    test: Option<Vec<LabeledObservation>>,
}

fn missing_data(e: frisbi::Error) -> CliError {
    match e {
        frisbi::Error::MissingDependency(_) => CliError::MissingStage("simulate".into()),
        other => other.into(),
    }
}

impl Data {
    fn open(out: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let dir = out.join(DATA_DIR);
        let manifest = dir.join(DATA_MANIFEST);
        if !manifest.exists() {
            return Err(CliError::MissingStage("simulate".into()));
        }
        let m: DataManifest = read_json(&manifest)?;
        if m.data_hash != data_hash(cfg) {
            return Err(CliError::config(
                "seed",
                "dataset was generated under different seed/sizes/simulator settings",
            ));
        }
        Ok(Self {
            dir,
            sbi: None,
            u: None,
            ot: None,
            calib_pool: None,
            test: None,
        })
    }

    fn labeled<'a>(
        slot: &'a mut Option<Vec<LabeledObservation>>,
        dir: &Path,
        file: &str,
        split: &str,
    ) -> Result<&'a [LabeledObservation]> {
        if slot.is_none() {
            *slot = Some(io::read_labeled(&dir.join(file), split).map_err(missing_data)?);
        }
        Ok(slot.as_deref().expect("loaded"))
    }

    fn sbi(&mut self) -> Result<&[LabeledObservation]> {
        Self::labeled(&mut self.sbi, &self.dir, io::SBI_FILE, "sbi")
    }

    fn u(&mut self) -> Result<&[LabeledObservation]> {
        Self::labeled(&mut self.u, &self.dir, io::U_FILE, "u")
    }

    fn ot(&mut self) -> Result<&[LabeledObservation]> {
        Self::labeled(&mut self.ot, &self.dir, io::OT_FILE, "ot")
    }

    fn test(&mut self) -> Result<&[LabeledObservation]> {
        Self::labeled(&mut self.test, &self.dir, io::TEST_FILE, "test")
    }

    fn calib_pool(&mut self) -> Result<&[CalibTriple]> {
        if self.calib_pool.is_none() {
            self.calib_pool = Some(io::read_calib(&self.dir.join(io::CALIB_FILE)).map_err(missing_data)?);
        }
        Ok(self.calib_pool.as_deref().expect("loaded"))
    }
}

/// The calibration pairs of one fold: a seeded subset of the pool (nested
/// across calibration sizes) with label noise applied.
pub fn fold_calib(cfg: &ExperimentConfig, pool: &[CalibTriple], fold: usize) -> Result<Vec<CalibTriple>> {
    if cfg.n_calib > pool.len() {
        return Err(CliError::config("n_calib", "exceeds the calibration pool on disk"));
    }
    let perm = RngStream::new(cfg.seed, StreamId::CalibSubset)
        .substream(fold as u64)
        .permutation(pool.len());
    let subset: Vec<CalibTriple> = perm[..cfg.n_calib].iter().map(|&i| pool[i].clone()).collect();
    let noise = RngStream::new(cfg.seed, StreamId::LabelNoise).substream(fold as u64);
    Ok(corrupt_labels(&subset, cfg.noise_rate, &cfg.simulator, &noise)?)
}

/// Training traces of one fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldTrainReport {
    pub config_hash: String,
    pub npe: Option<TrainReport>,
    pub transfer: Option<TrainReport>,
    pub finetune: Option<TrainReport>,
    pub amortize: Option<TrainReport>,
    pub rope_amortize: Option<TrainReport>,
}

impl FoldTrainReport {
    pub fn warnings(&self) -> Vec<String> {
        [&self.npe, &self.transfer, &self.finetune, &self.amortize, &self.rope_amortize]
            .into_iter()
            .flatten()
            .flat_map(|r| r.warnings.clone())
            .collect()
    }
}

/// One estimator on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub baseline: BaselineKind,
    pub fold: usize,
    pub calib_size: usize,
    pub noise_rate: f64,
    pub config_hash: String,
    pub report: EvalReport,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub baseline: String,
    pub fold: usize,
    pub calib_size: usize,
    pub noise_rate: f64,
    pub lpp: f64,
    pub acauc: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: Option<ExperimentConfig>,
    pub fold_seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    /// Seconds per `fold/stage`.
    pub timings: BTreeMap<String, f64>,
}

/// What the selected estimators need trained.
#[derive(Debug, Clone, Copy)]
struct Needs {
    joint: bool,
    finetune: bool,
    amortizer: bool,
    rope_amortizer: bool,
    npe: bool,
}

impl Needs {
    fn of(kinds: &[BaselineKind]) -> Self {
        use BaselineKind::*;
        let any = |ks: &[BaselineKind]| kinds.iter().any(|k| ks.contains(k));
        Self {
            joint: any(&[FrisbiJointOnly, FrisbiFull]),
            finetune: any(&[RopeFullTest, RopeSingleSample, FinetuneOnly, FrisbiAmortizeOnly]),
            amortizer: any(&[FrisbiFull]),
            rope_amortizer: any(&[FrisbiAmortizeOnly]),
            npe: kinds.iter().any(|&k| k != Prior),
        }
    }
}

/// Stage-0 models shared by every sweep point of one invocation.
#[derive(Default)]
pub struct NpeCache {
    models: HashMap<u64, NpeModels>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    hash: String,
    kinds: Vec<BaselineKind>,
    needs: Needs,
    export_plans: bool,
    manifest: RunManifest,
}

const ROLE_NSE: &str = "nse";
const ROLE_NPE: &str = "npe";
const ROLE_REAL: &str = "real_encoder";
const ROLE_FINETUNED: &str = "finetuned_encoder";
const ROLE_AMORTIZER: &str = "amortizer";
const ROLE_ROPE_AMORTIZER: &str = "rope_amortizer";

fn producing_stage(role: &str) -> Stage {
    match role {
        ROLE_NSE | ROLE_NPE => Stage::Npe,
        ROLE_REAL | ROLE_FINETUNED => Stage::Transfer,
        _ => Stage::Amortize,
    }
}

fn observations(data: &[LabeledObservation]) -> Vec<Observation> {
    data.iter().map(|o| o.x.clone()).collect()
}

fn encode(enc: &MlpEncoder, data: impl Iterator<Item = Observation>) -> Result<Matrix> {
    let xs: Vec<Observation> = data.collect();
    Ok(enc.encode_batch(&stack_rows(xs.iter().map(Observation::as_slice))?)?)
}

fn write_alphas(path: &Path, w: &SparseWeights) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(["i", "j", "alpha"])?;
    for (i, row) in w.rows.iter().enumerate() {
        for &(j, a) in row {
            wr.write_record([i.to_string(), j.to_string(), frisbi::nets::fmt_f64(a)])?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn write_plan(path: &Path, alpha: &Matrix, n: usize) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(["i", "j", "p"])?;
    for i in 0..alpha.rows() {
        for (j, &a) in alpha.row(i).iter().enumerate() {
            if a >= frisbi::posterior::MIXTURE_PRUNE {
                wr.write_record([i.to_string(), j.to_string(), frisbi::nets::fmt_f64(a / n as f64)])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

impl Run<'_> {
    fn ckpt_path(&self, role: &str, fold: usize) -> PathBuf {
        self.dir.join(format!("{role}_{fold}.ckpt.json"))
    }

    fn save(&mut self, role: &str, fold: usize, ckpt: Checkpoint) -> Result<()> {
        let path = self.ckpt_path(role, fold);
        io::save_checkpoint(&path, ckpt, &self.hash)?;
        self.record(&path);
        Ok(())
    }

    fn record(&mut self, path: &Path) {
        let p = path.display().to_string();
        if !self.manifest.artifacts.contains(&p) {
            self.manifest.artifacts.push(p);
        }
    }

    fn load(&self, role: &str, fold: usize) -> Result<Checkpoint> {
        io::load_checkpoint(&self.ckpt_path(role, fold), &self.hash).map_err(|e| match e {
            frisbi::Error::MissingDependency(_) => CliError::MissingStage(producing_stage(role).name().into()),
            other => other.into(),
        })
    }

    fn load_encoder(&self, role: &str, fold: usize) -> Result<MlpEncoder> {
        Ok(MlpEncoder::from_checkpoint(&self.load(role, fold)?)?)
    }

    fn load_flow(&self, role: &str, fold: usize) -> Result<Arc<FlowModel>> {
        Ok(Arc::new(FlowModel::from_checkpoint(&self.load(role, fold)?, self.cfg.flow)?))
    }

    fn report_path(&self, fold: usize) -> PathBuf {
        self.dir.join(format!("train_report_{fold}.json"))
    }

    fn load_report(&self, fold: usize) -> Result<FoldTrainReport> {
        let path = self.report_path(fold);
        if path.exists() {
            let r: FoldTrainReport = read_json(&path)?;
            if r.config_hash == self.hash {
                return Ok(r);
            }
        }
        Ok(FoldTrainReport {
            config_hash: self.hash.clone(),
            ..FoldTrainReport::default()
        })
    }

    fn save_report(&mut self, fold: usize, r: &FoldTrainReport) -> Result<()> {
        let path = self.report_path(fold);
        write_json(&path, r)?;
        self.record(&path);
        Ok(())
    }

    fn stage_npe(&mut self, fold: usize, data: &mut Data, cache: &mut NpeCache) -> Result<()> {
        let seed = self.cfg.fold_seed(fold);
        if let std::collections::hash_map::Entry::Vacant(e) = cache.models.entry(seed) {
            let m = train_npe(data.sbi()?, &self.cfg.flow, &self.cfg.npe, seed)?;
            e.insert(m);
        }
        let m = &cache.models[&seed];
        let (nse, npe, report) = (m.nse.to_checkpoint(), m.npe.to_checkpoint(), m.report.clone());
        self.save(ROLE_NSE, fold, nse)?;
        self.save(ROLE_NPE, fold, npe)?;
        let mut r = self.load_report(fold)?;
        r.npe = Some(report.clone());
        self.save_report(fold, &r)?;
        if report.diverged {
            return Err(CliError::Diverged(format!("npe, fold {fold}")));
        }
        Ok(())
    }

    fn stage_transfer(&mut self, fold: usize, data: &mut Data) -> Result<()> {
        let seed = self.cfg.fold_seed(fold);
        let nse = self.load_encoder(ROLE_NSE, fold)?;
        let calib = fold_calib(self.cfg, data.calib_pool()?, fold)?;
        let d_u = data.u()?.to_vec();
        let d_ot = data.ot()?.to_vec();
        let mut r = self.load_report(fold)?;
        let mut diverged = Vec::new();
        if self.needs.joint {
            let out = train_transfer(&d_u, &d_ot, &calib, &nse, &self.cfg.transfer, seed)?;
            self.save(ROLE_REAL, fold, out.encoder.to_checkpoint())?;
            if out.report.diverged {
                diverged.push("transfer");
            }
            r.transfer = Some(out.report);
        }
        if self.needs.finetune {
            let out = rope_finetune(&d_u, &d_ot, &calib, &nse, &self.cfg.transfer, seed)?;
            self.save(ROLE_FINETUNED, fold, out.encoder.to_checkpoint())?;
            if out.report.diverged {
                diverged.push("finetune");
            }
            r.finetune = Some(out.report);
        }
        self.save_report(fold, &r)?;
        if !diverged.is_empty() {
            return Err(CliError::Diverged(format!("{}, fold {fold}", diverged.join("+"))));
        }
        Ok(())
    }

    /// `h` of the OT simulations, optionally followed by the calibration
    /// simulations.
    fn atoms(&self, nse: &MlpEncoder, data: &mut Data, calib: Option<&[CalibTriple]>) -> Result<Matrix> {
        let mut w = encode(nse, data.ot()?.iter().map(|o| o.x.clone()))?;
        if let Some(c) = calib.filter(|c| !c.is_empty()) {
            w = w.vstack(&encode(nse, c.iter().map(|t| t.x_sim.clone()))?)?;
        }
        Ok(w)
    }

    fn stage_amortize(&mut self, fold: usize, data: &mut Data) -> Result<()> {
        let seed = self.cfg.fold_seed(fold);
        let nse = self.load_encoder(ROLE_NSE, fold)?;
        let npe = self.load_flow(ROLE_NPE, fold)?;
        let mut r = self.load_report(fold)?;
        let u_obs = observations(data.u()?);
        let mut diverged = Vec::new();
        if self.needs.amortizer {
            let g = self.load_encoder(ROLE_REAL, fold)?;
            let calib = fold_calib(self.cfg, data.calib_pool()?, fold)?;
            let atoms = self.atoms(&nse, data, Some(&calib))?;
            let z = encode(&g, u_obs.iter().cloned())?;
            let alpha = mixture_weights_batch(&z, &atoms, self.cfg.transfer.gamma)?;
            let w = sparsify(&alpha, self.cfg.amortize.weight_floor, self.cfg.amortize.max_atoms)?;
            let path = self.dir.join(format!("alphas_{fold}.csv"));
            write_alphas(&path, &w)?;
            self.record(&path);
            let (q, report) = amortize(&z, &w, &atoms, &npe, &self.cfg.flow, &self.cfg.amortize, seed)?;
            self.save(ROLE_AMORTIZER, fold, q.to_checkpoint())?;
            if report.diverged {
                diverged.push("amortize");
            }
            r.amortize = Some(report);
        }
        if self.needs.rope_amortizer {
            let g = self.load_encoder(ROLE_FINETUNED, fold)?;
            let atoms = self.atoms(&nse, data, None)?;
            let z = encode(&g, u_obs.iter().cloned())?;
            let alpha = coupling_weights(&z, &atoms, &self.cfg.rope)?;
            let w = sparsify(&alpha, self.cfg.amortize.weight_floor, self.cfg.amortize.max_atoms)?;
            let (q, report) = amortize(&z, &w, &atoms, &npe, &self.cfg.flow, &self.cfg.amortize, seed ^ 0x5EED)?;
            self.save(ROLE_ROPE_AMORTIZER, fold, q.to_checkpoint())?;
            if report.diverged {
                diverged.push("rope amortize");
            }
            r.rope_amortize = Some(report);
        }
        self.save_report(fold, &r)?;
        if !diverged.is_empty() {
            return Err(CliError::Diverged(format!("{}, fold {fold}", diverged.join("+"))));
        }
        Ok(())
    }

    /// Loads only the parts `kind` needs.
    fn parts_for(&self, kind: BaselineKind, fold: usize, data: &mut Data) -> Result<TrainedParts> {
        use BaselineKind::*;
        let mut p = TrainedParts::default();
        if kind == Prior {
            return Ok(p);
        }
        match kind {
            FrisbiFull => {
                p.real_encoder = Some(self.load_encoder(ROLE_REAL, fold)?);
                p.amortizer = Some(self.load_flow(ROLE_AMORTIZER, fold)?);
                return Ok(p);
            }
            FrisbiAmortizeOnly => {
                p.finetuned_encoder = Some(self.load_encoder(ROLE_FINETUNED, fold)?);
                p.rope_amortizer = Some(self.load_flow(ROLE_ROPE_AMORTIZER, fold)?);
                return Ok(p);
            }
            _ => {}
        }
        let nse = self.load_encoder(ROLE_NSE, fold)?;
        p.npe = Some(self.load_flow(ROLE_NPE, fold)?);
        match kind {
            RopeFullTest | RopeSingleSample | OtOnlyFullTest | OtOnlySingleSample => {
                p.ot_atoms = Some(self.atoms(&nse, data, None)?);
            }
            FrisbiJointOnly => {
                let calib = fold_calib(self.cfg, data.calib_pool()?, fold)?;
                p.transfer_atoms = Some(self.atoms(&nse, data, Some(&calib))?);
                p.real_encoder = Some(self.load_encoder(ROLE_REAL, fold)?);
            }
            _ => {}
        }
        if matches!(kind, RopeFullTest | RopeSingleSample | FinetuneOnly) {
            p.finetuned_encoder = Some(self.load_encoder(ROLE_FINETUNED, fold)?);
        }
        p.nse = Some(nse);
        Ok(p)
    }

    fn stage_evaluate(&mut self, fold: usize, data: &mut Data) -> Result<()> {
        let seed = self.cfg.fold_seed(fold);
        let test = data.test()?.to_vec();
        let test_x = observations(&test);
        let test_theta: Vec<_> = test.iter().map(|o| o.theta).collect();
        for kind in self.kinds.clone() {
            let t = Instant::now();
            let parts = self.parts_for(kind, fold, data)?;
            let d_u = if matches!(kind, BaselineKind::RopeSingleSample | BaselineKind::OtOnlySingleSample) {
                observations(data.u()?)
            } else {
                Vec::new()
            };
            let inputs = BaselineInputs {
                test_x: &test_x,
                test_theta: &test_theta,
                d_u: &d_u,
                simulator: &self.cfg.simulator,
                rope: self.cfg.rope,
                gamma: self.cfg.transfer.gamma,
                seed,
            };
            let posteriors = build_baseline(kind, &inputs, &parts)?;
            if self.export_plans && kind.is_transductive() {
                let enc = parts.finetuned_encoder.as_ref().or(parts.nse.as_ref()).expect("encoder loaded");
                let enc = if kind == BaselineKind::OtOnlyFullTest { parts.nse.as_ref().expect("nse") } else { enc };
                let z = encode(enc, test_x.iter().cloned())?;
                let alpha = coupling_weights(&z, parts.ot_atoms.as_ref().expect("atoms"), &self.cfg.rope)?;
                let path = self.dir.join(format!("plan_{}_{fold}.csv", kind.name()));
                write_plan(&path, &alpha, z.rows())?;
                self.record(&path);
            }
            let report = evaluate(&posteriors, &test_theta, &self.cfg.eval, seed)?;
            let rec = ResultRecord {
                baseline: kind,
                fold,
                calib_size: self.cfg.n_calib,
                noise_rate: self.cfg.noise_rate,
                config_hash: self.hash.clone(),
                report,
            };
            let path = self.dir.join(format!("results_{}_{fold}.json", kind.name()));
            write_json(&path, &rec)?;
            self.record(&path);
            log::info!(
                "fold {fold} {kind}: lpp {:.4} acauc {:.4} ({:.1}s)",
                rec.report.lpp,
                rec.report.acauc,
                t.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn run(&mut self, stages: &[Stage], data: &mut Data, cache: &mut NpeCache) -> Result<()> {
        for fold in 0..self.cfg.folds {
            for &stage in Stage::ALL.iter().filter(|s| stages.contains(s)) {
                let t = Instant::now();
                match stage {
                    Stage::Npe if self.needs.npe => self.stage_npe(fold, data, cache)?,
                    Stage::Transfer if self.needs.joint || self.needs.finetune => self.stage_transfer(fold, data)?,
                    Stage::Amortize if self.needs.amortizer || self.needs.rope_amortizer => {
                        self.stage_amortize(fold, data)?
                    }
                    Stage::Evaluate => self.stage_evaluate(fold, data)?,
                    _ => continue,
                }
                self.manifest
                    .timings
                    .insert(format!("{fold}/{stage}"), t.elapsed().as_secs_f64());
                log::info!("fold {fold}: {stage} done in {:.1}s", t.elapsed().as_secs_f64());
            }
        }
        if stages.contains(&Stage::Evaluate) {
            let path = self.dir.join(SUMMARY_FILE);
            write_summary(&path, &collect_results(&self.dir)?)?;
            self.record(&path);
        }
        Ok(())
    }
}

/// All result records in `dir`, sorted by baseline then fold.
pub fn collect_results(dir: &Path) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("results_") && name.ends_with(".json") {
            out.push(read_json::<ResultRecord>(&path)?);
        }
    }
    out.sort_by_key(|a| (a.baseline, a.fold));
    Ok(out)
}

pub fn write_summary(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(SummaryRow {
            baseline: r.baseline.name().to_string(),
            fold: r.fold,
            calib_size: r.calib_size,
            noise_rate: r.noise_rate,
            lpp: r.report.lpp,
            acauc: r.report.acauc,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Subdirectory of one sweep point.
pub fn sweep_dir(n_calib: usize, noise_rate: f64) -> String {
    format!("n{n_calib}_r{noise_rate}")
}

/// Runs one configuration (or every point of a sweep) into `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<Vec<RunManifest>> {
    cfg.validate()?;
    let mut data = Data::open(out, cfg)?;
    let mut cache = NpeCache::default();
    let points: Vec<(ExperimentConfig, PathBuf)> = match opts.sweep {
        None => vec![(cfg.clone(), out.to_path_buf())],
        Some(Sweep::Calib) => cfg
            .calib_sweep
            .iter()
            .map(|&n| {
                let c = ExperimentConfig { n_calib: n, ..cfg.clone() };
                (c, out.join(sweep_dir(n, cfg.noise_rate)))
            })
            .collect(),
        Some(Sweep::Noise) => cfg
            .noise_sweep
            .iter()
            .map(|&r| {
                let c = ExperimentConfig { noise_rate: r, ..cfg.clone() };
                (c, out.join(sweep_dir(cfg.n_calib, r)))
            })
            .collect(),
    };
    let mut manifests = Vec::new();
    for (pcfg, dir) in &points {
        pcfg.validate()?;
        std::fs::create_dir_all(dir)?;
        let kinds = opts.baselines.clone().unwrap_or_else(|| pcfg.baselines.clone());
        let hash = pcfg.hash();
        let mut run = Run {
            cfg: pcfg,
            dir: dir.clone(),
            needs: Needs::of(&kinds),
            kinds,
            export_plans: opts.export_plans,
            manifest: RunManifest {
                config_hash: hash.clone(),
                config: Some(pcfg.clone()),
                fold_seeds: (0..pcfg.folds).map(|k| pcfg.fold_seed(k)).collect(),
                ..RunManifest::default()
            },
            hash,
        };
        let result = run.run(&opts.stages, &mut data, &mut cache);
        let path = dir.join(RUN_MANIFEST);
        write_json(&path, &run.manifest)?;
        result?;
        manifests.push(run.manifest);
    }
    Ok(manifests)
}
