use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Limb class used to weight joints in the weighted position error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointGroup {
    Torso,
    Head,
    MiddleLimb,
    TerminalLimb,
}

/// Joint names, tree structure and weight groups of a skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub joints: Vec<String>,
    /// Parent index per joint, `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub groups: Vec<JointGroup>,
    pub root: usize,
}

const H36M17: [(&str, i32, JointGroup); 17] = [
    ("pelvis", -1, JointGroup::Torso),
    ("right_hip", 0, JointGroup::Torso),
    ("right_knee", 1, JointGroup::MiddleLimb),
    ("right_ankle", 2, JointGroup::TerminalLimb),
    ("left_hip", 0, JointGroup::Torso),
    ("left_knee", 4, JointGroup::MiddleLimb),
    ("left_ankle", 5, JointGroup::TerminalLimb),
    ("spine", 0, JointGroup::Torso),
    ("thorax", 7, JointGroup::Torso),
    ("neck", 8, JointGroup::Head),
    ("head", 9, JointGroup::Head),
    ("left_shoulder", 8, JointGroup::Torso),
    ("left_elbow", 11, JointGroup::MiddleLimb),
    ("left_wrist", 12, JointGroup::TerminalLimb),
    ("right_shoulder", 8, JointGroup::Torso),
    ("right_elbow", 14, JointGroup::MiddleLimb),
    ("right_wrist", 15, JointGroup::TerminalLimb),
];

impl SkeletonSpec {
    /// The 17-joint Human3.6M convention, pelvis first.
    pub fn h36m17() -> Self {
        SkeletonSpec {
            name: "h36m17".into(),
            joints: H36M17.iter().map(|j| j.0.to_string()).collect(),
            parents: H36M17.iter().map(|j| usize::try_from(j.1).ok()).collect(),
            groups: H36M17.iter().map(|j| j.2).collect(),
            root: 0,
        }
    }

    /// A kinematic chain of `n` joints, all in the torso group. Used for
    /// skeleton-agnostic tests.
    pub fn chain(n: usize) -> Self {
        SkeletonSpec {
            name: format!("chain{n}"),
            joints: (0..n).map(|i| format!("j{i}")).collect(),
            parents: (0..n).map(|i| i.checked_sub(1)).collect(),
            groups: vec![JointGroup::Torso; n],
            root: 0,
        }
    }

    /// Looks a skeleton up by name: `h36m17` or `chain<N>`.
    pub fn by_name(name: &str) -> Result<Self> {
        if name == "h36m17" {
            return Ok(Self::h36m17());
        }
        if let Some(n) = name.strip_prefix("chain").and_then(|n| n.parse().ok()) {
            return Ok(Self::chain(n));
        }
        Err(Error::Schema(format!("unknown skeleton {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Checks the tree structure: one root, every other joint has a parent
    /// and parents precede children.
    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if self.parents.len() != n || self.groups.len() != n {
            return Err(Error::Schema(format!(
                "skeleton {}: {} joints, {} parents, {} groups",
                self.name,
                n,
                self.parents.len(),
                self.groups.len()
            )));
        }
        if self.root >= n || self.parents[self.root].is_some() {
            return Err(Error::Schema(format!("skeleton {}: bad root {}", self.name, self.root)));
        }
        for (i, p) in self.parents.iter().enumerate() {
            match p {
                None if i != self.root => {
                    return Err(Error::Schema(format!("skeleton {}: joint {i} has no parent", self.name)))
                }
                Some(p) if *p >= i => {
                    return Err(Error::Schema(format!(
                        "skeleton {}: parent {p} of joint {i} must precede it",
                        self.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-group weights of the weighted position error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub torso: f64,
    pub head: f64,
    pub middle_limb: f64,
    pub terminal_limb: f64,
}

impl Default for GroupWeights {
    fn default() -> Self {
        GroupWeights {
            torso: 1.0,
            head: 1.5,
            middle_limb: 2.5,
            terminal_limb: 4.0,
        }
    }
}

impl GroupWeights {
    pub fn uniform(w: f64) -> Self {
        GroupWeights {
            torso: w,
            head: w,
            middle_limb: w,
            terminal_limb: w,
        }
    }

    pub fn weight(&self, g: JointGroup) -> f64 {
        match g {
            JointGroup::Torso => self.torso,
            JointGroup::Head => self.head,
            JointGroup::MiddleLimb => self.middle_limb,
            JointGroup::TerminalLimb => self.terminal_limb,
        }
    }
}

/// Group weights plus the coefficients of the two temporal loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub groups: GroupWeights,
    /// Coefficient of the prediction-smoothness term.
    pub lambda_t: f64,
    /// Coefficient of the velocity-error term.
    pub lambda_m: f64,
    /// Use squared distances in the weighted position error.
    pub squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            groups: GroupWeights::default(),
            lambda_t: 0.5,
            lambda_m: 1.0,
            squared: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if [g.torso, g.head, g.middle_limb, g.terminal_limb]
            .iter()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::Config("group weights must be positive".into()));
        }
        if !(self.lambda_t >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        Ok(())
    }

    /// Weight of every joint of `skeleton`, in joint order.
    pub fn joint_weights(&self, skeleton: &SkeletonSpec) -> Vec<f64> {
        skeleton.groups.iter().map(|&g| self.groups.weight(g)).collect()
    }
}
