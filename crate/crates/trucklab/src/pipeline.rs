//! Manifest-driven experiment orchestration: gen-data, train-model,
//! validate-model, train-policy, eval-policy. Every stage directory gets
//! the resolved configuration and checksums of its numeric outputs so a
//! rerun with the same manifest is verifiably identical.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cacc::{CaccConfig, EgoBackend};
use crate::config::KvFile;
use crate::cyclegen::{generate_spanning_episode, CycleGenConfig, SpeedTracker};
use crate::episode::{read_episode, write_episode, Episode};
use crate::error::{Error, Result};
use crate::model::{DeepModelParams, IoSpec};
use crate::plant::PlantConfig;
use crate::policy::{train_policy, write_pg_curve, PgConfig, PolicyParams};
use crate::stats::{control_error_stats, model_error_stats, write_histogram, write_stats, write_trajectory};
use crate::trainer::{train, write_curve, TrainConfig};
use crate::util::stream_rng;

pub const STAGES: [&str; 5] = [
    "gen-data",
    "train-model",
    "validate-model",
    "train-policy",
    "eval-policy",
];

fn stage_err(stage: &str, e: Error) -> Error {
    Error::Stage {
        stage: stage.to_string(),
        msg: e.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Write `checksums.txt` covering every regular file already in `dir`.
fn write_checksums(dir: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().map(|n| n != "checksums.txt").unwrap_or(false))
        .collect();
    entries.sort();
    let mut out = String::new();
    for p in entries {
        let bytes = std::fs::read(&p)?;
        out.push_str(&format!(
            "{}  {}\n",
            sha256_hex(&bytes),
            p.file_name().unwrap().to_string_lossy()
        ));
    }
    std::fs::write(dir.join("checksums.txt"), out)?;
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// All stage settings resolved from a manifest before anything runs.
#[derive(Debug, Clone)]
pub struct Plan {
    pub out: PathBuf,
    pub seed: u64,
    pub stages: Vec<String>,
    pub plant: PlantConfig,
    pub cyclegen: CycleGenConfig,
    pub train: TrainConfig,
    pub cacc: CaccConfig,
    pub pg: PgConfig,
    pub gen_episodes: usize,
    pub gen_val_episodes: usize,
    pub gen_duration: f64,
    pub validate_horizon: usize,
    pub validate_trials: usize,
    pub eval_trials: usize,
    pub eval_backend: String,
    pub eval_kept_trajectories: usize,
    /// Overrides for artifacts produced outside this run.
    pub data_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub policy_path: Option<PathBuf>,
}

impl Plan {
    pub fn from_manifest(kv: &KvFile, manifest_dir: &Path) -> Result<Self> {
        let p = kv
            .section("pipeline")
            .ok_or_else(|| Error::InvalidConfig("manifest needs a [pipeline] section".into()))?;
        let out_raw = PathBuf::from(p.str_or("out", "run"));
        let out = if out_raw.is_absolute() {
            out_raw
        } else {
            manifest_dir.join(out_raw)
        };
        let stages: Vec<String> = p
            .str_or("stages", &STAGES.join(","))
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        for s in &stages {
            if !STAGES.contains(&s.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown stage '{s}'")));
            }
        }
        let g = kv.section("gen-data");
        let v = kv.section("validate");
        let e = kv.section("eval");
        let resolve = |key: &str, section: Option<&crate::config::Section>| -> Option<PathBuf> {
            section.and_then(|s| s.get(key)).map(|raw| {
                let pb = PathBuf::from(raw);
                if pb.is_absolute() {
                    pb
                } else {
                    manifest_dir.join(pb)
                }
            })
        };
        let plan = Plan {
            out,
            seed: p.u64_or("seed", 0)?,
            stages,
            plant: PlantConfig::from_kv(kv)?,
            cyclegen: CycleGenConfig::from_kv(kv)?,
            train: TrainConfig::from_kv(kv)?,
            cacc: CaccConfig::from_kv(kv)?,
            pg: PgConfig::from_kv(kv)?,
            gen_episodes: g.map(|s| s.usize_or("episodes", 10)).transpose()?.unwrap_or(10),
            gen_val_episodes: g.map(|s| s.usize_or("val_episodes", 3)).transpose()?.unwrap_or(3),
            gen_duration: g.map(|s| s.f64_or("duration", 600.0)).transpose()?.unwrap_or(600.0),
            validate_horizon: v.map(|s| s.usize_or("horizon", 400)).transpose()?.unwrap_or(400),
            validate_trials: v.map(|s| s.usize_or("trials", 90)).transpose()?.unwrap_or(90),
            eval_trials: e.map(|s| s.usize_or("trials", 100)).transpose()?.unwrap_or(100),
            eval_backend: e
                .map(|s| s.str_or("backend", "deep").to_string())
                .unwrap_or_else(|| "deep".to_string()),
            eval_kept_trajectories: e
                .map(|s| s.usize_or("keep_trajectories", 5))
                .transpose()?
                .unwrap_or(5),
            data_dir: resolve("data", kv.section("train-model")),
            model_path: resolve("model", kv.section("train-policy")),
            policy_path: resolve("policy", kv.section("eval")),
        };
        if plan.eval_backend != "deep" && plan.eval_backend != "plant" {
            return Err(Error::InvalidConfig(format!(
                "eval backend must be 'deep' or 'plant', got '{}'",
                plan.eval_backend
            )));
        }
        Ok(plan)
    }

    fn runs(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    pub fn train_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out.join("gen-data").join("train"))
    }

    pub fn val_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out.join("gen-data").join("val"))
    }

    pub fn model_ckpt(&self) -> PathBuf {
        self.model_path
            .clone()
            .unwrap_or_else(|| self.out.join("train-model").join("model.ckpt"))
    }

    pub fn policy_ckpt(&self) -> PathBuf {
        self.policy_path
            .clone()
            .unwrap_or_else(|| self.out.join("train-policy").join("policy.ckpt"))
    }

    /// Resolution errors before any stage runs: every scheduled stage must
    /// find its inputs either on disk or scheduled earlier in this run.
    pub fn preflight(&self) -> Result<()> {
        let need = |earlier: &str, path: &Path, stage: &str| -> Result<()> {
            if !self.runs(earlier) && !path.exists() {
                return Err(Error::Stage {
                    stage: stage.to_string(),
                    msg: format!(
                        "requires {} which is neither on disk nor produced by a scheduled '{earlier}' stage",
                        path.display()
                    ),
                });
            }
            Ok(())
        };
        if self.runs("train-model") {
            need("gen-data", &self.train_data_dir(), "train-model")?;
        }
        if self.runs("validate-model") {
            need("gen-data", &self.val_data_dir(), "validate-model")?;
            need("train-model", &self.model_ckpt(), "validate-model")?;
        }
        if self.runs("train-policy") {
            need("train-model", &self.model_ckpt(), "train-policy")?;
        }
        if self.runs("eval-policy") {
            need("train-policy", &self.policy_ckpt(), "eval-policy")?;
            if self.eval_backend == "deep" {
                need("train-model", &self.model_ckpt(), "eval-policy")?;
            }
        }
        Ok(())
    }
}

fn stage_dir(out: &Path, stage: &str) -> Result<PathBuf> {
    let dir = out.join(stage);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_resolved(dir: &Path, body: String) -> Result<()> {
    std::fs::write(dir.join("resolved.cfg"), body)?;
    Ok(())
}

pub fn read_episode_dir(dir: &Path) -> Result<Vec<Episode>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no episode CSVs in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_episode(p)).collect()
}

pub fn stage_gen_data(plan: &Plan) -> Result<()> {
    let dir = stage_dir(&plan.out, "gen-data")?;
    let tracker = SpeedTracker::default();
    let gen_one = |sub: &str, count: usize, stream_base: u64| -> Result<()> {
        let sub_dir = dir.join(sub);
        std::fs::create_dir_all(&sub_dir)?;
        for i in 0..count {
            let mut rng = stream_rng(plan.seed, stream_base + i as u64);
            let ep = generate_spanning_episode(
                &plan.cyclegen,
                &mut rng,
                &plan.plant,
                &tracker,
                plan.gen_duration,
            )?;
            write_episode(&ep, &sub_dir.join(format!("ep_{i:03}.csv")))?;
        }
        Ok(())
    };
    gen_one("train", plan.gen_episodes, 0)?;
    gen_one("val", plan.gen_val_episodes, 1_000_000)?;
    write_resolved(
        &dir,
        format!(
            "# resolved gen-data settings\nseed = {}\nepisodes = {}\nval_episodes = {}\nduration = {}\nplant_hash = {}\n",
            plan.seed, plan.gen_episodes, plan.gen_val_episodes, plan.gen_duration,
            plan.plant.hash_hex()
        ),
    )?;
    write_checksums(&dir.join("train"))?;
    write_checksums(&dir.join("val"))?;
    write_checksums(&dir)?;
    Ok(())
}

pub fn stage_train_model(plan: &Plan) -> Result<()> {
    let dir = stage_dir(&plan.out, "train-model")?;
    let episodes = read_episode_dir(&plan.train_data_dir())?;
    let io = IoSpec::from_episodes(&episodes, plan.cyclegen.dt)?;
    let mut rng = stream_rng(plan.seed, 2_000_000);
    let params = DeepModelParams::init(io, plan.train.hidden, &plan.train.decoder_hidden, &mut rng)?;
    let mut train_rng = stream_rng(plan.seed, 2_000_001);
    let result = train(params, &episodes, &plan.train, &mut train_rng)?;
    result.params.save(&dir.join("model.ckpt"))?;
    result.final_params.save(&dir.join("model_final.ckpt"))?;
    write_curve(&result.curve, &dir.join("curve.csv"))?;
    write_resolved(
        &dir,
        format!(
            "# resolved training settings\nseed = {}\nK = {}\nM = {}\nN = {}\nepochs = {}\nlearning_rate = {}\nhidden = {}\nbest_epoch = {}\n",
            plan.seed,
            plan.train.k_steps,
            plan.train.batch_samples,
            plan.train.batches_per_epoch,
            plan.train.epochs,
            plan.train.learning_rate,
            plan.train.hidden,
            result.best_epoch
        ),
    )?;
    write_checksums(&dir)?;
    Ok(())
}

pub fn stage_validate_model(plan: &Plan) -> Result<()> {
    let dir = stage_dir(&plan.out, "validate-model")?;
    let params = DeepModelParams::load(&plan.model_ckpt())?;
    let episodes = read_episode_dir(&plan.val_data_dir())?;
    let (series, summary) = model_error_stats(
        &params,
        &episodes,
        plan.validate_horizon,
        plan.validate_trials,
        plan.seed ^ 0x5157,
        (plan.cyclegen.v_min, plan.cyclegen.v_max),
        (-plan.cyclegen.grade_limit, plan.cyclegen.grade_limit),
    )?;
    write_stats(&series, params.io.dt, &dir.join("stats.csv"))?;
    write_histogram(&summary.initial_speed, "initial speed [m/s]", &dir.join("hist_initial_speed.csv"))?;
    write_histogram(&summary.visited_speed, "visited speed [m/s]", &dir.join("hist_visited_speed.csv"))?;
    write_histogram(&summary.visited_grade, "visited grade [%]", &dir.join("hist_visited_grade.csv"))?;
    write_resolved(
        &dir,
        format!(
            "# resolved validation settings\nseed = {}\nhorizon = {}\ntrials = {}\nexcluded = {}\n",
            plan.seed, plan.validate_horizon, plan.validate_trials, series.excluded
        ),
    )?;
    write_checksums(&dir)?;
    Ok(())
}

pub fn stage_train_policy(plan: &Plan) -> Result<()> {
    let dir = stage_dir(&plan.out, "train-policy")?;
    let model = DeepModelParams::load(&plan.model_ckpt())?;
    let result = train_policy(
        &plan.cacc,
        EgoBackend::Deep(&model),
        &plan.pg,
        plan.seed ^ 0xA9C7,
    )?;
    result.params.save(&dir.join("policy.ckpt"))?;
    result.final_params.save(&dir.join("policy_final.ckpt"))?;
    write_pg_curve(&result.curve, &dir.join("curve.csv"))?;
    write_resolved(
        &dir,
        format!(
            "# resolved policy-gradient settings\nseed = {}\nbatch_size = {}\niterations = {}\ngamma = {}\nlearning_rate = {}\nbest_iteration = {}\n",
            plan.seed,
            plan.pg.batch_size,
            plan.pg.iterations,
            plan.pg.gamma,
            plan.pg.learning_rate,
            result.best_iteration
        ),
    )?;
    write_checksums(&dir)?;
    Ok(())
}

pub fn stage_eval_policy(plan: &Plan) -> Result<()> {
    let dir = stage_dir(&plan.out, "eval-policy")?;
    let policy = PolicyParams::load(&plan.policy_ckpt())?;
    let model;
    let backend = if plan.eval_backend == "plant" {
        EgoBackend::Plant(&plan.plant)
    } else {
        model = DeepModelParams::load(&plan.model_ckpt())?;
        EgoBackend::Deep(&model)
    };
    let (series, crashes, trajectories) = control_error_stats(
        &policy,
        &plan.cacc,
        backend,
        plan.eval_trials,
        plan.seed ^ 0xE7A1,
    )?;
    write_stats(&series, plan.cacc.dt, &dir.join("control_stats.csv"))?;
    for (i, tr) in trajectories.iter().take(plan.eval_kept_trajectories).enumerate() {
        write_trajectory(tr, plan.cacc.dt, &dir.join(format!("traj_{i:03}.csv")))?;
    }
    write_resolved(
        &dir,
        format!(
            "# resolved evaluation settings\nseed = {}\ntrials = {}\nbackend = {}\ncrashes = {}\n",
            plan.seed, plan.eval_trials, plan.eval_backend, crashes
        ),
    )?;
    write_checksums(&dir)?;
    Ok(())
}

/// Run every scheduled stage of the manifest. Any stage failure halts the
/// pipeline with the stage name attached.
pub fn run_experiment(manifest: &Path) -> Result<PathBuf> {
    let kv = KvFile::load(manifest)?;
    let manifest_dir = manifest.parent().unwrap_or(Path::new("."));
    let plan = Plan::from_manifest(&kv, manifest_dir)?;
    plan.preflight()?;
    std::fs::create_dir_all(&plan.out)?;
    std::fs::write(plan.out.join("manifest.cfg"), kv.render())?;
    std::fs::write(
        plan.out.join("run.txt"),
        format!(
            "seed = {}\ngit = {}\nstages = {}\n",
            plan.seed,
            git_describe(),
            plan.stages.join(",")
        ),
    )?;
    for stage in &plan.stages {
        let run = match stage.as_str() {
            "gen-data" => stage_gen_data(&plan),
            "train-model" => stage_train_model(&plan),
            "validate-model" => stage_validate_model(&plan),
            "train-policy" => stage_train_policy(&plan),
            "eval-policy" => stage_eval_policy(&plan),
            other => Err(Error::InvalidConfig(format!("unknown stage '{other}'"))),
        };
        run.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => stage_err(stage, e),
        })?;
    }
    Ok(plan.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(dir: &Path, extra: &str) -> PathBuf {
        let path = dir.join("manifest.cfg");
        let body = format!(
            "[pipeline]\nout = run\nseed = 11\n\n\
             [gen-data]\nepisodes = 3\nval_episodes = 2\nduration = 90\n\n\
             [cyclegen]\nflat = true\n\n\
             [train]\nK = 16\nM = 4\nN = 2\nepochs = 12\nhidden = 8\ndecoder_hidden = 8\n\
             deploy_eval_steps = 50\ndeploy_eval_trials = 2\n\n\
             [validate]\nhorizon = 50\ntrials = 8\n\n\
             [policy]\nbatch_size = 200\niterations = 3\nhorizon = 100\n\n\
             [cacc]\nhorizon = 100\n\n\
             [eval]\ntrials = 4\nkeep_trajectories = 2\n{extra}"
        );
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn full_tiny_pipeline_produces_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(tmp.path(), "");
        let out = run_experiment(&manifest).unwrap();
        for f in [
            "gen-data/train/ep_000.csv",
            "gen-data/val/ep_001.csv",
            "train-model/model.ckpt",
            "train-model/curve.csv",
            "validate-model/stats.csv",
            "validate-model/hist_initial_speed.csv",
            "train-policy/policy.ckpt",
            "eval-policy/control_stats.csv",
            "eval-policy/traj_000.csv",
            "run.txt",
        ] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        for stage in STAGES {
            assert!(out.join(stage).join("checksums.txt").exists(), "{stage}");
        }
    }

    #[test]
    fn rerun_reproduces_identical_checksums() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(tmp.path(), "");
        let out = run_experiment(&manifest).unwrap();
        let read_all = || -> Vec<String> {
            STAGES
                .iter()
                .map(|s| std::fs::read_to_string(out.join(s).join("checksums.txt")).unwrap())
                .collect()
        };
        let first = read_all();
        run_experiment(&manifest).unwrap();
        assert_eq!(first, read_all());
    }

    #[test]
    fn missing_checkpoint_fails_preflight_before_running() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(
            tmp.path(),
            "\n[pipeline2]\n",
        );
        // Schedule only eval-policy: its inputs do not exist yet.
        let body = std::fs::read_to_string(&manifest)
            .unwrap()
            .replace("seed = 11", "seed = 11\nstages = eval-policy");
        std::fs::write(&manifest, body).unwrap();
        let err = run_experiment(&manifest).unwrap_err();
        match err {
            Error::Stage { stage, .. } => assert_eq!(stage, "eval-policy"),
            other => panic!("unexpected error {other:?}"),
        }
        // Nothing was produced.
        assert!(!tmp.path().join("run/eval-policy").exists());
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(tmp.path(), "");
        let body = std::fs::read_to_string(&manifest)
            .unwrap()
            .replace("seed = 11", "seed = 11\nstages = gen-data,fit-model");
        std::fs::write(&manifest, body).unwrap();
        assert!(run_experiment(&manifest).is_err());
    }
}
