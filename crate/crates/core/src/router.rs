//! Confidence-threshold routing after local inference.

use serde::{Deserialize, Serialize};

use crate::types::CalibratedDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "option")]
pub enum RoutingDecision {
    /// Keep the local answer (option index).
    AcceptLocal(usize),
    Escalate,
}

impl RoutingDecision {
    pub fn escalates(&self) -> bool {
        matches!(self, Self::Escalate)
    }
}

/// Accepts when κ ≥ τ; escalates only when κ falls strictly below.
pub fn route(dist: &CalibratedDistribution, tau_route: f64) -> RoutingDecision {
    if dist.confidence >= tau_route {
        RoutingDecision::AcceptLocal(dist.argmax())
    } else {
        RoutingDecision::Escalate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(probs: Vec<f64>) -> CalibratedDistribution {
        let confidence = probs.iter().copied().fold(0.0, f64::max);
        CalibratedDistribution {
            probs,
            confidence,
            margin: 0.0,
            entropy_norm: 0.0,
            temperature: 1.0,
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(
            route(&dist(vec![0.95, 0.05]), 0.6),
            RoutingDecision::AcceptLocal(0)
        );
        assert_eq!(
            route(&dist(vec![0.41, 0.59]), 0.6),
            RoutingDecision::Escalate
        );
        assert_eq!(
            route(&dist(vec![0.4, 0.6]), 0.6),
            RoutingDecision::AcceptLocal(1)
        );
        assert_eq!(route(&dist(vec![0.25; 4]), 0.6), RoutingDecision::Escalate);
    }

    #[test]
    fn serializes_with_tag() {
        let j = serde_json::to_string(&RoutingDecision::AcceptLocal(2)).unwrap();
        assert_eq!(j, r#"{"decision":"AcceptLocal","option":2}"#);
        let j = serde_json::to_string(&RoutingDecision::Escalate).unwrap();
        assert_eq!(j, r#"{"decision":"Escalate"}"#);
    }

    proptest! {
        #[test]
        fn monotone_in_threshold(k in 0.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let d = dist(vec![k, 1.0 - k]);
            prop_assert_eq!(route(&d, lo), route(&d, lo));
            if route(&d, lo).escalates() {
                prop_assert!(route(&d, hi).escalates());
            }
        }
    }
}
