//! Actions and action spaces shared by environments, agents and the generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single action: an index into a finite set or a real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Action::Discrete(_) => None,
            Action::Continuous(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }

    /// Width of the action encoding fed to networks.
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(k) => *k,
            ActionSpace::Continuous { low, .. } => low.len(),
        }
    }

    pub fn contains(&self, a: &Action) -> bool {
        match (self, a) {
            (ActionSpace::Discrete(k), Action::Discrete(i)) => i < k,
            (ActionSpace::Continuous { low, high }, Action::Continuous(v)) => {
                v.len() == low.len() && v.iter().zip(low.iter().zip(high)).all(|(x, (l, h))| x >= l && x <= h)
            }
            _ => false,
        }
    }

    pub fn check(&self, a: &Action) -> Result<()> {
        if self.contains(a) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("action {a:?} not in {self:?}")))
        }
    }

    /// Network encoding: one-hot for discrete spaces, affine map of the
    /// bounds onto `[-1, 1]` for continuous ones.
    pub fn encode(&self, a: &Action) -> Result<Vec<f64>> {
        match (self, a) {
            (ActionSpace::Discrete(k), Action::Discrete(i)) if i < k => {
                let mut v = vec![0.0; *k];
                v[*i] = 1.0;
                Ok(v)
            }
            (ActionSpace::Continuous { low, high }, Action::Continuous(v)) if v.len() == low.len() => Ok(v
                .iter()
                .zip(low.iter().zip(high))
                .map(|(x, (l, h))| 2.0 * (x - l) / (h - l) - 1.0)
                .collect()),
            _ => Err(Error::InvalidArgument(format!("cannot encode {a:?} for {self:?}"))),
        }
    }

    /// Clips a continuous action into the bounds; discrete actions pass through.
    pub fn clip(&self, a: Action) -> Action {
        match (self, a) {
            (ActionSpace::Continuous { low, high }, Action::Continuous(v)) => Action::Continuous(
                v.into_iter().zip(low.iter().zip(high)).map(|(x, (l, h))| x.clamp(*l, *h)).collect(),
            ),
            (_, a) => a,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodings() {
        let d = ActionSpace::Discrete(3);
        assert_eq!(d.encode(&Action::Discrete(1)).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(d.encode(&Action::Discrete(3)).is_err());
        let c = ActionSpace::Continuous { low: vec![-2.0], high: vec![2.0] };
        assert_eq!(c.encode(&Action::Continuous(vec![2.0])).unwrap(), vec![1.0]);
        assert_eq!(c.encode(&Action::Continuous(vec![0.0])).unwrap(), vec![0.0]);
        assert_eq!(c.clip(Action::Continuous(vec![3.0])), Action::Continuous(vec![2.0]));
    }
}
