use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True termination; time-limit truncation keeps this false.
    pub terminal: bool,
}

/// Columns-as-samples view of sampled transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub rewards: Vec<f64>,
    pub next_states: DMatrix<f64>,
    pub terminals: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// FIFO ring of transitions. Storage grows on demand up to `capacity`.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Domain("replay capacity must be at least 1".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let (d, k) = (self.state_dim, self.action_dim);
        if t.state.len() != d || t.next_state.len() != d {
            return Err(Error::dim("transition state", d, t.state.len().max(t.next_state.len())));
        }
        if t.action.len() != k {
            return Err(Error::dim("transition action", k, t.action.len()));
        }
        if !t.reward.is_finite() {
            return Err(Error::Domain("transition reward must be finite".into()));
        }
        if self.len() < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.next_states.extend_from_slice(&t.next_state);
            self.rewards.push(t.reward);
            self.terminals.push(t.terminal);
        } else {
            let i = self.cursor;
            self.states[i * d..(i + 1) * d].copy_from_slice(&t.state);
            self.actions[i * k..(i + 1) * k].copy_from_slice(&t.action);
            self.next_states[i * d..(i + 1) * d].copy_from_slice(&t.next_state);
            self.rewards[i] = t.reward;
            self.terminals[i] = t.terminal;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.len() {
            return None;
        }
        let (d, k) = (self.state_dim, self.action_dim);
        Some(Transition {
            state: self.states[i * d..(i + 1) * d].to_vec(),
            action: self.actions[i * k..(i + 1) * k].to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states[i * d..(i + 1) * d].to_vec(),
            terminal: self.terminals[i],
        })
    }

    /// Slots in insertion order, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = Transition> + '_ {
        let n = self.len();
        let start = if n < self.capacity { 0 } else { self.cursor };
        (0..n).map(move |j| self.get((start + j) % n).expect("index within fill"))
    }

    /// `n` uniform draws with replacement over filled slots.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<TransitionBatch> {
        if self.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        let len = self.len();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> TransitionBatch {
        let (d, k) = (self.state_dim, self.action_dim);
        let n = idx.len();
        TransitionBatch {
            states: DMatrix::from_fn(d, n, |r, c| self.states[idx[c] * d + r]),
            actions: DMatrix::from_fn(k, n, |r, c| self.actions[idx[c] * k + r]),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: DMatrix::from_fn(d, n, |r, c| self.next_states[idx[c] * d + r]),
            terminals: idx.iter().map(|&i| self.terminals[i]).collect(),
        }
    }
}
