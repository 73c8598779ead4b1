use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{scripted_expert, EnvName, EnvSpec, Episode};
use crate::error::{Error, Result};

/// Expert state-action pairs grouped into trajectories. No rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    states: DMatrix<f64>,
    actions: DMatrix<f64>,
    /// Exclusive end row of each trajectory; the last equals N.
    boundaries: Vec<usize>,
    env: String,
}

impl DemoDataset {
    pub fn new(
        states: DMatrix<f64>,
        actions: DMatrix<f64>,
        boundaries: Vec<usize>,
        env: impl Into<String>,
    ) -> Result<Self> {
        let n = states.nrows();
        if actions.nrows() != n {
            return Err(Error::dim("demo action rows", n, actions.nrows()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.first() == Some(&0) {
            return Err(Error::Domain("demo boundaries must be strictly increasing".into()));
        }
        if boundaries.last().copied().unwrap_or(0) != n {
            return Err(Error::Domain(format!(
                "last demo boundary must equal the row count {n}"
            )));
        }
        if !states.iter().chain(actions.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("demo data must be finite".into()));
        }
        Ok(DemoDataset {
            states,
            actions,
            boundaries,
            env: env.into(),
        })
    }

    /// Checks state/action widths and that every action lies in the box.
    pub fn validate_for(&self, spec: &EnvSpec) -> Result<()> {
        if self.states.ncols() != spec.state_dim() {
            return Err(Error::dim("demo state width", spec.state_dim(), self.states.ncols()));
        }
        if self.actions.ncols() != spec.action_dim() {
            return Err(Error::dim("demo action width", spec.action_dim(), self.actions.ncols()));
        }
        for row in self.actions.row_iter() {
            for (j, a) in row.iter().enumerate() {
                if *a < spec.action_low[j] || *a > spec.action_high[j] {
                    return Err(Error::Domain(format!("demo action {a} outside the action box")));
                }
            }
        }
        Ok(())
    }

    /// N × state-dim.
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    /// N × action-dim.
    pub fn actions(&self) -> &DMatrix<f64> {
        &self.actions
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn env_name(&self) -> &str {
        &self.env
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn num_trajectories(&self) -> usize {
        self.boundaries.len()
    }

    pub fn trajectory(&self, i: usize) -> Range<usize> {
        let start = if i == 0 { 0 } else { self.boundaries[i - 1] };
        start..self.boundaries[i]
    }

    pub fn state(&self, row: usize) -> Vec<f64> {
        self.states.row(row).iter().copied().collect()
    }

    pub fn action(&self, row: usize) -> Vec<f64> {
        self.actions.row(row).iter().copied().collect()
    }

    /// The first `n` trajectories.
    pub fn take_trajectories(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_trajectories() {
            return Err(Error::Domain(format!(
                "cannot take {n} of {} trajectories",
                self.num_trajectories()
            )));
        }
        let rows = self.boundaries[n - 1];
        DemoDataset::new(
            self.states.rows(0, rows).into_owned(),
            self.actions.rows(0, rows).into_owned(),
            self.boundaries[..n].to_vec(),
            self.env.clone(),
        )
    }
}

/// Noisy scripted-expert rollouts; failed rollouts are redrawn from a fresh
/// start up to a retry budget.
pub fn generate_demos(spec: &EnvSpec, n_traj: usize, noise_std: f64, seed: u64) -> Result<DemoDataset> {
    spec.validate()?;
    if n_traj == 0 {
        return Err(Error::Domain("need at least one demonstration trajectory".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Domain("action noise std must be non-negative".into()));
    }
    let budget = 20 * n_traj + 20;
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k) = (spec.state_dim(), spec.action_dim());
    let mut states: Vec<f64> = Vec::new();
    let mut actions: Vec<f64> = Vec::new();
    let mut boundaries = Vec::with_capacity(n_traj);
    let mut attempts = 0;
    while boundaries.len() < n_traj {
        if attempts == budget {
            return Err(Error::Generation(format!(
                "only {} of {n_traj} rollouts succeeded in {budget} attempts",
                boundaries.len()
            )));
        }
        attempts += 1;
        let mut ep = Episode::start(spec, &mut rng);
        let mut s_buf = Vec::new();
        let mut a_buf = Vec::new();
        while !ep.finished() {
            let mut a = scripted_expert(spec, ep.state());
            if noise_std > 0.0 {
                for v in a.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            let (a, _) = spec.clip_action(&a);
            s_buf.extend_from_slice(ep.state());
            a_buf.extend_from_slice(&a);
            ep.step(spec, &a)?;
        }
        if ep.success() {
            states.extend(s_buf);
            actions.extend(a_buf);
            boundaries.push(states.len() / d);
        }
    }
    let n = states.len() / d;
    DemoDataset::new(
        DMatrix::from_row_slice(n, d, &states),
        DMatrix::from_row_slice(n, k, &actions),
        boundaries,
        spec.name.as_str(),
    )
}

const ENV_PREFIX: &str = "# env=";

/// CSV with a `# env=<name>` comment line, then `traj,t,s0..,a0..`.
pub fn demos_write(demos: &DemoDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write;
    writeln!(w, "{ENV_PREFIX}{}", demos.env)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend((0..demos.state_dim()).map(|i| format!("s{i}")));
    header.extend((0..demos.action_dim()).map(|i| format!("a{i}")));
    csv.write_record(&header).map_err(csv_io)?;
    for traj in 0..demos.num_trajectories() {
        let range = demos.trajectory(traj);
        let start = range.start;
        for row in range {
            let mut rec = vec![traj.to_string(), (row - start).to_string()];
            rec.extend(demos.states.row(row).iter().map(|v| format!("{v:?}")));
            rec.extend(demos.actions.row(row).iter().map(|v| format!("{v:?}")));
            csv.write_record(&rec).map_err(csv_io)?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn demos_read(path: &Path) -> Result<DemoDataset> {
    let text = std::fs::read_to_string(path)?;
    let (env, body, offset) = match text.strip_prefix(ENV_PREFIX) {
        Some(rest) => {
            let end = rest.find('\n').unwrap_or(rest.len());
            (rest[..end].trim().to_string(), &rest[(end + 1).min(rest.len())..], 1)
        }
        None => (String::new(), text.as_str(), 0),
    };
    let parse_err = |line: u64, message: String| Error::Parse {
        line: line + offset,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(body.as_bytes());
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "traj" || cols[1] != "t" {
        return Err(parse_err(1, "header must start with traj,t".into()));
    }
    let d = cols.iter().filter(|c| c.starts_with('s')).count();
    let k = cols.iter().filter(|c| c.starts_with('a')).count();
    let expected: Vec<String> = ["traj".to_string(), "t".to_string()]
        .into_iter()
        .chain((0..d).map(|i| format!("s{i}")))
        .chain((0..k).map(|i| format!("a{i}")))
        .collect();
    if d == 0 || k == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(parse_err(1, format!("malformed header {:?}", cols.join(","))));
    }

    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut boundaries = Vec::new();
    let mut current: Option<(u64, u64)> = None;
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 + d + k {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", 2 + d + k, rec.len()),
            ));
        }
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .trim()
                .parse::<u64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", cols[i])))
        };
        let (traj, t) = (int(0)?, int(1)?);
        match current {
            Some((ct, ctime)) if ct == traj => {
                if t != ctime + 1 {
                    return Err(parse_err(line, format!("time index {t} does not follow {ctime}")));
                }
            }
            Some((ct, _)) => {
                if traj != ct + 1 || t != 0 {
                    return Err(parse_err(line, "trajectories must be consecutive and start at t=0".into()));
                }
                boundaries.push(n);
            }
            None => {
                if traj != 0 || t != 0 {
                    return Err(parse_err(line, "first row must be traj 0, t 0".into()));
                }
            }
        }
        current = Some((traj, t));
        for i in 2..2 + d + k {
            let v = rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", cols[i])))?;
            if i < 2 + d {
                states.push(v);
            } else {
                actions.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    boundaries.push(n);
    let demos = DemoDataset::new(
        DMatrix::from_row_slice(n, d, &states),
        DMatrix::from_row_slice(n, k, &actions),
        boundaries,
        env.clone(),
    )?;
    if let Ok(name) = env.parse::<EnvName>() {
        demos.validate_for(&EnvSpec::named(name))?;
    }
    Ok(demos)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
