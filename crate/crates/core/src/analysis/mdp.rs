//! Enumerable tabular MDPs and exact trajectory-distribution quantities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of state sequences the enumerators will visit.
pub const MAX_SEQUENCES: usize = 1_000_000;

/// `transition[s][a][s']`, initial distribution over states and horizon `T`
/// (sequences are `s_0 ... s_T`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMdp {
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: Vec<f64>,
    pub horizon: usize,
}

/// Stationary tabular policy `table[s][a]`.
pub type PolicyTable = Vec<Vec<f64>>;

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    let total: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("{what} is not a distribution: {row:?}")));
    }
    Ok(())
}

/// `−p ln p` with the `0 ln 0 = 0` convention.
fn ent(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

impl DiscreteMdp {
    pub fn new(transition: Vec<Vec<Vec<f64>>>, initial: Vec<f64>, horizon: usize) -> Result<Self> {
        let mdp = Self {
            transition,
            initial,
            horizon,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn actions(&self) -> usize {
        self.transition.first().map_or(0, |a| a.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states();
        if n == 0 || self.transition.len() != n {
            return Err(Error::Shape("transition tensor must have one block per state".into()));
        }
        check_simplex(&self.initial, "initial distribution")?;
        let m = self.actions();
        for (s, block) in self.transition.iter().enumerate() {
            if block.len() != m || m == 0 {
                return Err(Error::Shape(format!(
                    "state {s} has {} actions, expected {m}",
                    block.len()
                )));
            }
            for (a, row) in block.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::Shape(format!("row ({s}, {a}) has length {}", row.len())));
                }
                check_simplex(row, &format!("transition row ({s}, {a})"))?;
            }
        }
        Ok(())
    }

    pub fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.len() != self.states() || policy.iter().any(|r| r.len() != self.actions()) {
            return Err(Error::Shape("policy table does not match the MDP".into()));
        }
        for row in policy {
            check_simplex(row, "policy row")?;
        }
        Ok(())
    }

    /// Action-marginal state transition `p_π(s' | s) = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_transition(&self, policy: &PolicyTable) -> Vec<Vec<f64>> {
        let n = self.states();
        (0..n)
            .map(|s| {
                (0..n)
                    .map(|s2| {
                        policy[s]
                            .iter()
                            .zip(&self.transition[s])
                            .map(|(pa, row)| pa * row[s2])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// State marginals `d_0 ... d_T` under the policy.
    pub fn marginals(&self, policy: &PolicyTable) -> Vec<Vec<f64>> {
        let p = self.state_transition(policy);
        let n = self.states();
        let mut out = vec![self.initial.clone()];
        for _ in 0..self.horizon {
            let prev = out.last().unwrap();
            let next = (0..n).map(|s2| (0..n).map(|s| prev[s] * p[s][s2]).sum()).collect();
            out.push(next);
        }
        out
    }

    fn sequence_count(&self) -> Result<usize> {
        let n = self.states();
        let mut count: usize = 1;
        for _ in 0..=self.horizon {
            count = count.checked_mul(n).filter(|&c| c <= MAX_SEQUENCES).ok_or_else(|| {
                Error::Contract(format!(
                    "{n}^{} state sequences exceed the enumeration limit of {MAX_SEQUENCES}",
                    self.horizon + 1
                ))
            })?;
        }
        Ok(count)
    }

    /// Calls `f(sequence, p_a(sequence), p_b(sequence))` for every state
    /// sequence of positive probability under either chain.
    fn enumerate(&self, a: &[Vec<f64>], b: &[Vec<f64>], mut f: impl FnMut(&[usize], f64, f64)) -> Result<()> {
        let total = self.sequence_count()?;
        let n = self.states();
        let mut seq = vec![0usize; self.horizon + 1];
        for code in 0..total {
            let mut c = code;
            for slot in seq.iter_mut().rev() {
                *slot = c % n;
                c /= n;
            }
            let mut pa = self.initial[seq[0]];
            let mut pb = pa;
            for w in seq.windows(2) {
                pa *= a[w[0]][w[1]];
                pb *= b[w[0]][w[1]];
            }
            if pa > 0.0 || pb > 0.0 {
                f(&seq, pa, pb);
            }
        }
        Ok(())
    }
}

/// Reverse KL between state-sequence distributions, with the cross and
/// entropy terms computed separately through per-step marginals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RklReport {
    /// `KL(p_π ‖ p_E)` by full enumeration.
    pub rkl: f64,
    /// `−E_π Σ_t log p_E(s_{t+1} | s_t)`.
    pub cross_term: f64,
    /// `E_π Σ_t H(p_π(· | s_t))`.
    pub entropy_term: f64,
    /// Set when `p_π` puts mass where `p_E` has none.
    pub infinite: bool,
}

impl RklReport {
    pub fn recombined(&self) -> f64 {
        self.cross_term - self.entropy_term
    }
}

pub fn exact_rkl(mdp: &DiscreteMdp, policy: &PolicyTable, expert: &PolicyTable) -> Result<RklReport> {
    mdp.check_policy(policy)?;
    mdp.check_policy(expert)?;
    let pp = mdp.state_transition(policy);
    let pe = mdp.state_transition(expert);

    let mut rkl = 0.0;
    let mut infinite = false;
    mdp.enumerate(&pp, &pe, |_, a, b| {
        if a > 0.0 {
            if b > 0.0 {
                rkl += a * (a.ln() - b.ln());
            } else {
                infinite = true;
            }
        }
    })?;

    let d = mdp.marginals(policy);
    let n = mdp.states();
    let mut cross = 0.0;
    let mut entropy = 0.0;
    for dt in &d[..mdp.horizon] {
        for s in 0..n {
            if dt[s] == 0.0 {
                continue;
            }
            for s2 in 0..n {
                let p = pp[s][s2];
                if p > 0.0 {
                    entropy += dt[s] * ent(p);
                    if pe[s][s2] > 0.0 {
                        cross -= dt[s] * p * pe[s][s2].ln();
                    } else {
                        infinite = true;
                    }
                }
            }
        }
    }
    if infinite {
        return Ok(RklReport {
            rkl: f64::INFINITY,
            cross_term: f64::INFINITY,
            entropy_term: entropy,
            infinite,
        });
    }
    Ok(RklReport {
        rkl,
        cross_term: cross,
        entropy_term: entropy,
        infinite,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyDecomposition {
    /// Entropy of `s_1 ... s_T` given `s_0`, by enumeration.
    pub lhs: f64,
    /// `E Σ_t H(p_π(· | s_t))` through the marginals.
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Sequence entropy against the sum of per-step conditional transition
/// entropies. The initial state is conditioned on, so both sides vanish for
/// deterministic chains regardless of the initial distribution.
pub fn verify_entropy_decomposition(mdp: &DiscreteMdp, policy: &PolicyTable) -> Result<EntropyDecomposition> {
    mdp.check_policy(policy)?;
    let p = mdp.state_transition(policy);
    let mut joint = 0.0;
    mdp.enumerate(&p, &p, |_, a, _| joint += ent(a))?;
    let initial: f64 = mdp.initial.iter().map(|&q| ent(q)).sum();
    let lhs = joint - initial;

    let d = mdp.marginals(policy);
    let rhs: f64 = d[..mdp.horizon]
        .iter()
        .map(|dt| {
            (0..mdp.states())
                .map(|s| dt[s] * p[s].iter().map(|&q| ent(q)).sum::<f64>())
                .sum::<f64>()
        })
        .sum();
    Ok(EntropyDecomposition {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

fn random_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R, sparsity: f64) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..k)
            .map(|_| {
                if rng.gen::<f64>() < sparsity {
                    0.0
                } else {
                    -rng.gen::<f64>().max(1e-300).ln()
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Random instance with `states` states and `actions` actions. A fraction
/// `sparsity` of entries is zeroed so that absorbing and unreachable
/// structure shows up.
pub fn random_mdp<R: Rng + ?Sized>(
    states: usize,
    actions: usize,
    horizon: usize,
    sparsity: f64,
    rng: &mut R,
) -> DiscreteMdp {
    let transition = (0..states)
        .map(|_| (0..actions).map(|_| random_simplex(states, rng, sparsity)).collect())
        .collect();
    DiscreteMdp {
        transition,
        initial: random_simplex(states, rng, sparsity),
        horizon,
    }
}

pub fn random_policy<R: Rng + ?Sized>(states: usize, actions: usize, sparsity: f64, rng: &mut R) -> PolicyTable {
    (0..states).map(|_| random_simplex(actions, rng, sparsity)).collect()
}
