//! Variance heatmaps, collapse tracking during cloning, and the
//! constant-variance ablation sweep.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actorcritic::{train, write_metrics_csv, RunArtifacts, TrainConfig};
use crate::diffcore::MlpParams;
use crate::envs::{DemoDataset, EnvSpec};
use crate::error::{Error, Result};
use crate::klreg::{policy_loss_and_grad_with_noise, QFunction};
use crate::policies::{fit_head_observed, HeadFamily, MleConfig, MleReg, OnlinePolicy, RefPolicy};

/// Two swept state coordinates; every other coordinate is held at `fixed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: [usize; 2],
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub resolution: [usize; 2],
    /// Full state vector; the entries at `axes` are overwritten.
    pub fixed: Vec<f64>,
}

impl GridSpec {
    /// Square grid over the first two coordinates with the rest at zero.
    pub fn square(state_dim: usize, lo: f64, hi: f64, resolution: usize) -> Self {
        GridSpec {
            axes: [0, 1],
            min: [lo; 2],
            max: [hi; 2],
            resolution: [resolution; 2],
            fixed: vec![0.0; state_dim],
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.fixed.len() != state_dim {
            return Err(Error::dim("grid fixed state", state_dim, self.fixed.len()));
        }
        if self.axes[0] == self.axes[1] {
            return Err(Error::Domain("grid axes must differ".into()));
        }
        for i in 0..2 {
            if self.axes[i] >= state_dim {
                return Err(Error::Domain(format!("grid axis {} outside state dimension {state_dim}", self.axes[i])));
            }
            if self.resolution[i] < 2 {
                return Err(Error::Domain("grid resolution must be at least 2".into()));
            }
            if !(self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]) {
                return Err(Error::Domain(format!("grid axis {i} needs min < max")));
            }
        }
        Ok(())
    }

    pub fn coords(&self, i: usize) -> Vec<f64> {
        let n = self.resolution[i];
        let step = (self.max[i] - self.min[i]) / (n - 1) as f64;
        (0..n).map(|j| self.min[i] + step * j as f64).collect()
    }
}

/// Mean predictive std on a grid. Row `r` sweeps the first axis, column `c`
/// the second.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceGrid {
    pub axes: [usize; 2],
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl VarianceGrid {
    /// Header row carries the second axis, first column the first axis.
    pub fn to_csv(&self) -> String {
        let mut out = format!("s{}\\s{}", self.axes[0], self.axes[1]);
        for c in &self.cols {
            out.push_str(&format!(",{c:.8e}"));
        }
        out.push('\n');
        for (r, y) in self.rows.iter().enumerate() {
            out.push_str(&format!("{y:.8e}"));
            for c in 0..self.cols.len() {
                out.push_str(&format!(",{:.8e}", self.values[(r, c)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Grid index of the smallest entry.
    pub fn argmin(&self) -> (usize, usize) {
        let (mut best, mut at) = (f64::INFINITY, (0, 0));
        for r in 0..self.values.nrows() {
            for c in 0..self.values.ncols() {
                if self.values[(r, c)] < best {
                    best = self.values[(r, c)];
                    at = (r, c);
                }
            }
        }
        at
    }
}

pub fn variance_grid(reference: &RefPolicy, grid: &GridSpec) -> Result<VarianceGrid> {
    grid.validate(reference.state_dim())?;
    let rows = grid.coords(0);
    let cols = grid.coords(1);
    let (nr, nc) = (rows.len(), cols.len());
    let d = grid.fixed.len();
    let mut states = DMatrix::zeros(d, nr * nc);
    for r in 0..nr {
        for c in 0..nc {
            let j = r * nc + c;
            states.column_mut(j).copy_from_slice(&grid.fixed);
            states[(grid.axes[0], j)] = rows[r];
            states[(grid.axes[1], j)] = cols[c];
        }
    }
    let per_state = mean_std_columns(reference, &states)?;
    Ok(VarianceGrid {
        axes: grid.axes,
        values: DMatrix::from_fn(nr, nc, |r, c| per_state[r * nc + c]),
        rows,
        cols,
    })
}

/// Mean over action dims of `√variance` for each column of `states`.
fn mean_std_columns(reference: &RefPolicy, states: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (_, var) = reference.moments_batch(states)?;
    let k = var.nrows() as f64;
    Ok(var.column_iter().map(|v| v.iter().map(|x| x.sqrt()).sum::<f64>() / k).collect())
}

/// Mean predictive std over the rows of `states` (N×d).
pub fn mean_std(reference: &RefPolicy, states: &DMatrix<f64>) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Domain("mean std needs at least one state".into()));
    }
    let v = mean_std_columns(reference, &states.transpose())?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Off-trajectory over on-trajectory mean predictive std.
pub fn calibration_ratio(reference: &RefPolicy, demos: &DemoDataset, probes: &DMatrix<f64>) -> Result<f64> {
    Ok(mean_std(reference, probes)? / mean_std(reference, demos.states())?)
}

/// `n` probe states (rows) drawn uniformly from the environment's state box,
/// rejecting any within `radius` of a demo state.
pub fn sample_probes<R: Rng + ?Sized>(
    env: &EnvSpec,
    demos: &DemoDataset,
    n: usize,
    radius: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if demos.state_dim() != env.state_dim() {
        return Err(Error::dim("probe state", env.state_dim(), demos.state_dim()));
    }
    let budget = 1000 * n.max(1);
    let r2 = radius * radius;
    let d = env.state_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut tries = 0;
    while out.len() < n * d {
        if tries == budget {
            return Err(Error::Generation(format!("only {} of {n} probe states found off the demonstrations", out.len() / d)));
        }
        tries += 1;
        let s = env.sample_state_box(rng);
        let near = demos
            .states()
            .row_iter()
            .any(|row| row.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < r2);
        if !near {
            out.extend_from_slice(&s);
        }
    }
    Ok(DMatrix::from_row_slice(n, d, &out))
}

#[derive(Clone, Debug)]
pub struct CollapseTrace {
    /// Entry `e` is the mean probe std after `e` epochs; entry 0 is the
    /// untrained network.
    pub series: Vec<f64>,
    /// Mean probe std after the last epoch.
    pub final_std: f64,
    pub params: MlpParams,
}

impl CollapseTrace {
    pub fn ratio(&self) -> f64 {
        self.final_std / self.series[0]
    }
}

/// Gaussian likelihood cloning on all demo rows, recording the mean predictive
/// std at `probes` (N×d) every epoch.
pub fn collapse_trace<R: Rng + ?Sized>(
    net: MlpParams,
    demos: &DemoDataset,
    probes: &DMatrix<f64>,
    config: &MleConfig,
    rng: &mut R,
) -> Result<CollapseTrace> {
    if probes.nrows() == 0 {
        return Err(Error::Domain("collapse trace needs probe states".into()));
    }
    let probe_std = |net: &MlpParams| {
        mean_std(
            &RefPolicy::Mle {
                net: net.clone(),
                reg: MleReg::None,
            },
            probes,
        )
    };
    let mut series = Vec::with_capacity(config.epochs);
    series.push(probe_std(&net)?);
    let mut last = series[0];
    let rows: Vec<usize> = (0..demos.len()).collect();
    let fit = fit_head_observed(
        net,
        demos,
        &rows,
        HeadFamily::Gaussian,
        MleReg::None,
        None,
        config,
        rng,
        &mut |epoch, p| {
            last = probe_std(p)?;
            if epoch < config.epochs {
                series.push(last);
            }
            Ok(())
        },
    )?;
    Ok(CollapseTrace {
        series,
        final_std: last,
        params: fit.params,
    })
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub constants: Vec<f64>,
    /// Its moments' means are shared across runs; its variance is replaced.
    pub mean: RefPolicy,
    pub train: TrainConfig,
}

pub const DEFAULT_CONSTANTS: [f64; 3] = [1e-3, 5e-3, 1e-2];

impl AblationSpec {
    pub fn new(mean: RefPolicy, train: TrainConfig) -> Self {
        AblationSpec {
            constants: DEFAULT_CONSTANTS.to_vec(),
            mean,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.constants.is_empty() {
            return Err(Error::Domain("ablation needs at least one constant".into()));
        }
        if let Some(c) = self.constants.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::Domain(format!("ablation constant {c} must be strictly positive")));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub constant: f64,
    /// Complete artifacts, or the partial record of a failed run.
    pub artifacts: Option<RunArtifacts>,
    pub error: Option<String>,
}

impl AblationRun {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Mean over recorded epochs of a metrics column, skipping NaN.
    pub fn time_average(&self, pick: impl Fn(&crate::actorcritic::MetricsRow) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .artifacts
            .iter()
            .flat_map(|a| a.metrics.iter().map(&pick))
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// One training run per constant with identical seeds and mean function.
/// A failing run is recorded and the sweep moves on.
pub fn run_ablation(spec: &AblationSpec, env: &EnvSpec, demos: Option<&DemoDataset>) -> Result<Vec<AblationRun>> {
    spec.validate()?;
    let mut runs = Vec::with_capacity(spec.constants.len());
    for &c in &spec.constants {
        let reference = RefPolicy::constant_variance(spec.mean.clone(), c)?;
        let run = match train(&spec.train, env, &reference, demos) {
            Ok(a) => AblationRun {
                constant: c,
                artifacts: Some(a),
                error: None,
            },
            Err(e) => AblationRun {
                constant: c,
                error: Some(e.to_string()),
                artifacts: e.partial.map(|b| *b),
            },
        };
        runs.push(run);
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub constant: f64,
    pub metrics: PathBuf,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationManifest {
    pub constants: Vec<f64>,
    pub runs: Vec<ManifestEntry>,
}

/// `metrics-c<constant>.csv` per run plus `manifest.json` in `dir`.
/// Paths in the manifest are relative to `dir`.
pub fn write_ablation(runs: &[AblationRun], dir: &Path) -> Result<AblationManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(runs.len());
    for r in runs {
        let name = PathBuf::from(format!("metrics-c{:e}.csv", r.constant));
        let rows = r.artifacts.as_ref().map(|a| a.metrics.as_slice()).unwrap_or(&[]);
        write_metrics_csv(rows, &dir.join(&name))?;
        entries.push(ManifestEntry {
            constant: r.constant,
            metrics: name,
            error: r.error.clone(),
        });
    }
    let manifest = AblationManifest {
        constants: runs.iter().map(|r| r.constant).collect(),
        runs: entries,
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(manifest)
}

/// Mean-abs policy gradient at a frozen online policy and critic for each
/// constant variance, all sharing `mean` and one draw of noise.
pub fn frozen_gradient_magnitudes<Q: QFunction + ?Sized>(
    online: &OnlinePolicy,
    critic: &Q,
    mean: &RefPolicy,
    constants: &[f64],
    states: &DMatrix<f64>,
    alpha: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = DMatrix::from_fn(online.action_dim(), states.ncols(), |_, _| rng.sample(StandardNormal));
    constants
        .iter()
        .map(|&c| {
            let reference = RefPolicy::constant_variance(mean.clone(), c)?;
            let step = policy_loss_and_grad_with_noise(online, &reference, critic, states, &noise, alpha)?;
            Ok(step.grads.mean_abs())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_demos, EnvName};
    use crate::gp::{GpPosterior, KernelKind, KernelSpec};

    fn gp_ref() -> RefPolicy {
        let s = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.5, -0.5, 0.2]);
        let a = DMatrix::from_row_slice(3, 1, &[0.1, -0.2, 0.3]);
        let k = KernelSpec::new(KernelKind::SquaredExponential, vec![0.3, 0.3], 1.0, 1e-4).unwrap();
        RefPolicy::Gp(GpPosterior::condition(vec![k], &s, &a).unwrap())
    }

    #[test]
    fn gp_grid_is_lowest_at_data() {
        let g = variance_grid(&gp_ref(), &GridSpec::square(2, -1.0, 1.0, 5)).unwrap();
        // (0, 0) is a training input and sits on the grid's centre cell.
        assert!(g.values[(2, 2)] < g.values[(0, 0)]);
        assert!(g.values[(2, 2)] < g.values[(4, 0)]);
    }

    #[test]
    fn constant_variance_grid_is_flat() {
        let r = RefPolicy::constant_variance(gp_ref(), 1e-2).unwrap();
        let g = variance_grid(&r, &GridSpec::square(2, -1.0, 1.0, 3)).unwrap();
        assert!(g.values.iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn grid_csv_layout() {
        let r = RefPolicy::constant_variance(gp_ref(), 0.25).unwrap();
        let g = variance_grid(&r, &GridSpec::square(2, 0.0, 1.0, 2)).unwrap();
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "s0\\s1,0.00000000e0,1.00000000e0");
        assert!(lines[1].starts_with("0.00000000e0,5.00000000e-1"));
    }

    #[test]
    fn grid_validation() {
        let mut g = GridSpec::square(2, 0.0, 1.0, 1);
        assert!(variance_grid(&gp_ref(), &g).is_err());
        g.resolution = [2, 2];
        g.axes = [0, 2];
        assert!(variance_grid(&gp_ref(), &g).is_err());
        g.axes = [0, 1];
        g.min = [1.0, 0.0];
        assert!(variance_grid(&gp_ref(), &g).is_err());
    }

    #[test]
    fn probes_avoid_demos() {
        let env = EnvSpec::named(EnvName::Corridor1d);
        let demos = generate_demos(&env, 2, 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_probes(&env, &demos, 50, 0.1, &mut rng).unwrap();
        assert_eq!(p.nrows(), 50);
        for probe in p.row_iter() {
            for s in demos.states().row_iter() {
                assert!((probe - s).norm() >= 0.1);
            }
        }
    }

    #[test]
    fn trace_starts_at_init_and_has_epoch_count_entries() {
        let env = EnvSpec::named(EnvName::Corridor1d);
        let demos = generate_demos(&env, 1, 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probes = sample_probes(&env, &demos, 20, 0.1, &mut rng).unwrap();
        let cfg = MleConfig { hidden: vec![8], epochs: 7, ..Default::default() };
        let net = MlpParams::new(&cfg.widths(2, 1), &mut rng).unwrap();
        let init = mean_std(&RefPolicy::Mle { net: net.clone(), reg: MleReg::None }, &probes).unwrap();
        let t = collapse_trace(net, &demos, &probes, &cfg, &mut rng).unwrap();
        assert_eq!(t.series.len(), 7);
        assert_eq!(t.series[0], init);
    }

    #[test]
    fn ablation_rejects_non_positive_constants() {
        let mut spec = AblationSpec::new(gp_ref(), TrainConfig::default());
        spec.constants = vec![1e-3, 0.0];
        assert!(spec.validate().is_err());
    }
}
