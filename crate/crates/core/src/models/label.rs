//! Safe / unsafe / boundary tags for training samples.

use serde::{Deserialize, Serialize};

use crate::comms::RobotId;
use crate::dynamics::StateDiff;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Safe,
    Unsafe,
    /// Minimum distance in `[d_coll, d_safe)`.
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyLabeler<F> {
    pub d_coll: F,
    pub d_safe: F,
}

impl<F: Scalar> SafetyLabeler<F> {
    pub fn new(d_coll: F, d_safe: F) -> Result<Self> {
        if !(d_coll > F::zero() && d_safe > d_coll) {
            return Err(Error::Config("need 0 < d_coll < d_safe".into()));
        }
        Ok(SafetyLabeler { d_coll, d_safe })
    }

    pub fn label_distance(&self, d: F) -> Label {
        if d < self.d_coll {
            Label::Unsafe
        } else if d >= self.d_safe {
            Label::Safe
        } else {
            Label::Boundary
        }
    }

    /// Empty neighborhoods are safe.
    pub fn label(&self, w: &[(RobotId, StateDiff<F>)]) -> Label {
        w.iter()
            .map(|(_, d)| d.distance())
            .fold(None, |m: Option<F>, d| Some(m.map_or(d, |m| m.min(d))))
            .map_or(Label::Safe, |d| self.label_distance(d))
    }
}

impl Default for SafetyLabeler<f64> {
    fn default() -> Self {
        SafetyLabeler { d_coll: 0.1, d_safe: 0.2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ws(ds: &[f64]) -> Vec<(RobotId, StateDiff<f64>)> {
        ds.iter()
            .enumerate()
            .map(|(j, &d)| (j, StateDiff::SingleIntegrator { dp: [0.0, d] }))
            .collect()
    }

    #[test]
    fn examples() {
        let l = SafetyLabeler::default();
        assert_eq!(l.label(&ws(&[0.5, 0.09])), Label::Unsafe);
        assert_eq!(l.label(&ws(&[0.25, 0.9])), Label::Safe);
        assert_eq!(l.label(&ws(&[0.15])), Label::Boundary);
        assert_eq!(l.label(&ws(&[0.1])), Label::Boundary);
        assert_eq!(l.label(&ws(&[0.2])), Label::Safe);
        assert_eq!(l.label(&[]), Label::Safe);
        assert!(SafetyLabeler::new(0.2, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn depends_on_distances_only(ds in prop::collection::vec(0.01f64..1.0, 1..6), rot in 0usize..6, far in 0.0f64..2.0) {
            let l = SafetyLabeler::default();
            let base = l.label(&ws(&ds));
            let mut r = ds.clone();
            r.rotate_left(rot % ds.len());
            let relabeled: Vec<_> = ws(&r).into_iter().map(|(j, d)| (j + 7, d)).collect();
            prop_assert_eq!(l.label(&relabeled), base);
            // A neighbor no closer than the current minimum leaves the label alone.
            let min = ds.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut more = ds.clone();
            more.push(min.max(0.1) + far);
            prop_assert_eq!(l.label(&ws(&more)), base);
        }
    }
}
