use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
}

impl ReplayEntry {
    /// Checks finiteness and that `terminal` agrees with the time-to-horizon
    /// coordinate (the last entry) of `next_obs`.
    pub fn validate(&self) -> Result<()> {
        if !self.reward.is_finite() {
            return Err(Error::NonFinite(format!("replay reward {}", self.reward)));
        }
        let t_h = *self
            .next_obs
            .last()
            .ok_or_else(|| Error::Shape("empty observation".into()))?;
        if self.terminal != (t_h == 0.0) {
            return Err(Error::Contract(format!(
                "terminal flag {} with next t_H = {t_h}",
                self.terminal
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.obs) || !finite(&self.next_obs) || !finite(&self.action) {
            return Err(Error::NonFinite("replay entry contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
    next: usize,
}

/// Column-stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn from_entries(entries: &[&ReplayEntry]) -> Self {
        Self {
            obs: entries.iter().map(|e| e.obs.clone()).collect(),
            action: entries.iter().map(|e| e.action.clone()).collect(),
            reward: entries.iter().map(|e| e.reward).collect(),
            next_obs: entries.iter().map(|e| e.next_obs.clone()).collect(),
            terminal: entries.iter().map(|e| e.terminal).collect(),
        }
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: ReplayEntry) -> Result<()> {
        entry.validate()?;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.next] = entry;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let picked: Vec<&ReplayEntry> = (0..n)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect();
        Batch::from_entries(&picked)
    }
}
