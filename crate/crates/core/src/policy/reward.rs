use crate::counter::Counter;
use crate::flow::ConditionalFlowModel;

/// Frozen log-density reward `r = log p̃(s' | s, h)` on standardized
/// states, floored at `floor`.
#[derive(Debug)]
pub struct RewardModel<'a> {
    pub flow: &'a ConditionalFlowModel,
    pub floor: f64,
    floor_hits: Counter,
}

impl<'a> RewardModel<'a> {
    pub fn new(flow: &'a ConditionalFlowModel, floor: f64) -> Self {
        Self {
            flow,
            floor,
            floor_hits: Counter::default(),
        }
    }

    pub fn reward(&self, s: &[f64], s_next: &[f64], h: f64) -> f64 {
        match self.flow.log_prob_standardized(s_next, s, h) {
            Ok(v) if v.is_finite() && v >= self.floor => v,
            _ => {
                self.floor_hits.bump();
                self.floor
            }
        }
    }

    pub fn rewards(&self, s: &[Vec<f64>], s_next: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
        match self.flow.log_prob_standardized_batch(s, s_next, h) {
            Ok(v) => v
                .into_iter()
                .map(|r| {
                    if r.is_finite() && r >= self.floor {
                        r
                    } else {
                        self.floor_hits.bump();
                        self.floor
                    }
                })
                .collect(),
            Err(_) => s
                .iter()
                .zip(s_next)
                .zip(h)
                .map(|((a, b), &h)| self.reward(a, b, h))
                .collect(),
        }
    }

    /// How many rewards were replaced by the floor.
    pub fn floor_count(&self) -> u64 {
        self.floor_hits.get()
    }
}

/// One-off reward evaluation with floor `floor`.
pub fn compute_reward(flow: &ConditionalFlowModel, s: &[f64], s_next: &[f64], h: f64, floor: f64) -> f64 {
    RewardModel::new(flow, floor).reward(s, s_next, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, NoiseConfig};

    #[test]
    fn identity_flow_reward_at_mode() {
        let f = ConditionalFlowModel::identity(1, FlowConfig::default(), NoiseConfig::default()).unwrap();
        let r = compute_reward(&f, &[0.7], &[0.0], 0.0, -100.0);
        assert!((r + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn far_transitions_hit_the_floor() {
        let f = ConditionalFlowModel::identity(1, FlowConfig::default(), NoiseConfig::default()).unwrap();
        let m = RewardModel::new(&f, -100.0);
        assert_eq!(m.reward(&[0.0], &[50.0], 0.0), -100.0);
        assert_eq!(m.floor_count(), 1);
        assert_eq!(m.reward(&[0.0], &[f64::NAN], 0.0), -100.0);
        assert_eq!(m.floor_count(), 2);
    }
}
