use std::path::{Path, PathBuf};

use klprior::actorcritic::{evaluate, train, write_metrics_csv, write_pretrain_csv, RunArtifacts};
use klprior::diagnostics::{mean_std, run_ablation, variance_grid, write_ablation, AblationSpec};
use klprior::diffcore::MlpParams;
use klprior::envs::{demos_read, demos_write, generate_demos, DemoDataset};
use klprior::gp::gp_fit;
use klprior::policies::{
    fit_ensemble, fit_head, fit_mc_dropout, fit_mle, AnyPolicy, HeadFamily, MleReg, OnlinePolicy, RefPolicy,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{RunConfig, Variant};
use crate::error::CliError;

/// A single-seed invocation.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub seed: u64,
    pub dir: PathBuf,
    pub quiet: bool,
}

impl Run<'_> {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("[{}] {}", self.cfg.run_id(self.seed), msg.as_ref());
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    fn demos(&self) -> Result<DemoDataset, CliError> {
        let path = self.cfg.demo_path.clone().unwrap_or_else(|| self.dir.join("demos.csv"));
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "demonstrations not found at {} (run demo-gen or set demo_path)",
                path.display()
            )));
        }
        let demos = demos_read(&path)?;
        demos.validate_for(&self.cfg.env_spec())?;
        Ok(demos)
    }

    fn reference(&self) -> Result<RefPolicy, CliError> {
        let path = self.cfg.reference_path.clone().unwrap_or_else(|| self.dir.join("reference.json"));
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "reference policy not found at {} (run clone or set reference_path)",
                path.display()
            )));
        }
        Ok(AnyPolicy::load(&path)?.into_reference()?)
    }
}

pub fn demo_gen(run: &Run) -> Result<(), CliError> {
    let c = &run.cfg.demos;
    let demos = generate_demos(&run.cfg.env_spec(), c.trajectories, c.noise_std, run.seed)?;
    let path = run.dir.join("demos.csv");
    demos_write(&demos, &path)?;
    run.say(format!("{} trajectories, {} transitions -> {}", demos.num_trajectories(), demos.len(), path.display()));
    Ok(())
}

pub fn fit_reference(cfg: &RunConfig, variant: Variant, demos: &DemoDataset, seed: u64) -> Result<RefPolicy, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = cfg.clone.widths(demos.state_dim(), demos.action_dim());
    let mle = |reg: MleReg, rng: &mut ChaCha8Rng| -> Result<RefPolicy, CliError> {
        let net = MlpParams::new(&widths, rng)?;
        Ok(RefPolicy::Mle {
            net: fit_mle(net, demos, reg, &cfg.clone, rng)?.params,
            reg,
        })
    };
    let r = &cfg.reference;
    Ok(match variant {
        Variant::Gp => RefPolicy::Gp(gp_fit(demos, r.kernel, &cfg.gp)?),
        Variant::MleGaussian => mle(MleReg::None, &mut rng)?,
        Variant::MleEntropy => mle(MleReg::Entropy { beta: r.beta }, &mut rng)?,
        Variant::MleTikhonov => mle(MleReg::Tikhonov { lambda: r.lambda }, &mut rng)?,
        Variant::Ensemble => RefPolicy::Ensemble(fit_ensemble(demos, &cfg.clone, &cfg.ensemble, seed)?),
        Variant::McDropout => RefPolicy::Ensemble(fit_mc_dropout(demos, &cfg.clone, &cfg.dropout, seed)?),
        Variant::Laplace => {
            let net = MlpParams::new(&widths, &mut rng)?;
            let rows: Vec<usize> = (0..demos.len()).collect();
            let fit = fit_head(net, demos, &rows, HeadFamily::Laplace, MleReg::None, None, &cfg.clone, &mut rng)?;
            RefPolicy::Laplace { net: fit.params }
        }
        Variant::ConstantVariance => {
            RefPolicy::constant_variance(fit_reference(cfg, r.mean, demos, seed)?, r.constant)?
        }
    })
}

pub fn clone(run: &Run, variant: Variant) -> Result<(), CliError> {
    let demos = run.demos()?;
    let reference = fit_reference(run.cfg, variant, &demos, run.seed)?;
    let path = run.dir.join("reference.json");
    AnyPolicy::from(reference.clone()).save(&path)?;
    let on_std = mean_std(&reference, demos.states())?;
    let summary = json!({
        "variant": reference.variant(),
        "demo_transitions": demos.len(),
        "demo_mean_std": on_std,
    });
    run.write("clone.json", &format!("{:#}\n", summary))?;
    run.say(format!("{} reference -> {} (mean std on demos {on_std:.4})", reference.variant(), path.display()));
    Ok(())
}

fn write_artifacts(run: &Run, a: &RunArtifacts, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_metrics_csv(&a.metrics, &dir.join("metrics.csv"))?;
    write_pretrain_csv(&a.pretrain, &dir.join("pretrain.csv"))?;
    AnyPolicy::from(a.online.clone()).save(&dir.join("policy.json"))?;
    let ck = dir.join("checkpoints");
    std::fs::create_dir_all(&ck).map_err(|e| CliError::io(&ck, e))?;
    for c in &a.checkpoints {
        AnyPolicy::from(c.policy.clone()).save(&ck.join(format!("{}.json", c.label)))?;
    }
    let last = a.metrics.last();
    let summary = json!({
        "run": run.cfg.run_id(run.seed),
        "epochs": a.metrics.len(),
        "initial_eval": a.initial_eval,
        "final_success_rate": last.map(|m| m.success_rate),
        "final_mean_return": last.map(|m| m.mean_return),
    });
    let path = dir.join("summary.json");
    std::fs::write(&path, format!("{:#}\n", summary)).map_err(|e| CliError::io(&path, e))?;
    Ok(())
}

pub fn train_cmd(run: &Run) -> Result<(), CliError> {
    let reference = run.reference()?;
    let demos = if run.cfg.train.pretrain && run.cfg.train.pretrain_epochs > 0 {
        Some(run.demos()?)
    } else {
        None
    };
    match train(&run.cfg.train, &run.cfg.env_spec(), &reference, demos.as_ref()) {
        Ok(a) => {
            write_artifacts(run, &a, &run.dir)?;
            let last = a.metrics.last();
            run.say(format!(
                "{} epochs, final success {:.2}",
                a.metrics.len(),
                last.map_or(f64::NAN, |m| m.success_rate)
            ));
            Ok(())
        }
        Err(mut e) => {
            if let Some(p) = e.partial.take() {
                write_artifacts(run, &p, &run.dir)?;
            }
            Err(e.into())
        }
    }
}

pub fn ablation(run: &Run) -> Result<(), CliError> {
    let reference = run.reference()?;
    let mean = match reference {
        RefPolicy::ConstantVariance { mean, .. } => *mean,
        other => other,
    };
    let demos = if run.cfg.train.pretrain && run.cfg.train.pretrain_epochs > 0 {
        Some(run.demos()?)
    } else {
        None
    };
    let spec = AblationSpec {
        constants: run.cfg.ablation.constants.clone(),
        mean,
        train: run.cfg.train.clone(),
    };
    let runs = run_ablation(&spec, &run.cfg.env_spec(), demos.as_ref())?;
    let dir = run.dir.join("ablation");
    let manifest = write_ablation(&runs, &dir)?;
    for r in &runs {
        let status = r.error.as_deref().unwrap_or("ok");
        run.say(format!(
            "c={:e}: mean kl {:.4}, mean |grad| {:.4e} ({status})",
            r.constant,
            r.time_average(|m| m.kl_mean),
            r.time_average(|m| m.policy_grad_mean_abs)
        ));
    }
    run.say(format!("{} runs -> {}", manifest.runs.len(), dir.join("manifest.json").display()));
    Ok(())
}

pub fn heatmap(run: &Run) -> Result<(), CliError> {
    let reference = run.reference()?;
    let grid = variance_grid(&reference, &run.cfg.grid_spec())?;
    let path = run.dir.join("heatmap.csv");
    grid.write_csv(&path)?;
    run.say(format!("{}x{} grid -> {}", grid.rows.len(), grid.cols.len(), path.display()));
    Ok(())
}

pub fn eval(run: &Run, policy: Option<&Path>) -> Result<(), CliError> {
    let path = policy.map(Path::to_path_buf).unwrap_or_else(|| run.dir.join("policy.json"));
    if !path.exists() {
        return Err(CliError::Missing(format!("policy not found at {} (run train or pass --policy)", path.display())));
    }
    let online: OnlinePolicy = AnyPolicy::load(&path)?.into_online()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(5);
    let ev = evaluate(&run.cfg.env_spec(), &online, run.cfg.eval.episodes, &mut rng)?;
    let summary = json!({
        "policy": path,
        "episodes": run.cfg.eval.episodes,
        "mean_return": ev.mean_return,
        "success_rate": ev.success_rate,
    });
    run.write("eval.json", &format!("{:#}\n", summary))?;
    run.say(format!("success {:.3}, return {:.3}", ev.success_rate, ev.mean_return));
    Ok(())
}
