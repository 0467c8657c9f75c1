use serde::{Deserialize, Serialize};

use super::{count_macs, ArchError, ArchSpec, Op, Result, Topology};

/// Design constraints a candidate architecture must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSet {
    pub min_parallel_columns: usize,
    pub forbid_pointwise_strided: bool,
    /// An AADS block must appear at or before this depth fraction.
    pub aads_required_before_depth: f64,
    /// Target MAC count and relative tolerance around it.
    pub flops_center: f64,
    pub flops_tolerance: f64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            min_parallel_columns: 2,
            forbid_pointwise_strided: true,
            aads_required_before_depth: 0.35,
            flops_center: 100e6,
            flops_tolerance: 0.20,
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.flops_tolerance > 0.0 && self.flops_tolerance < 1.0) {
            return Err(format!("flops_tolerance must be in (0, 1), got {}", self.flops_tolerance));
        }
        if !(self.flops_center > 0.0 && self.flops_center.is_finite()) {
            return Err(format!("flops_center must be positive, got {}", self.flops_center));
        }
        if !(0.0..=1.0).contains(&self.aads_required_before_depth) {
            return Err(format!(
                "aads_required_before_depth must be in [0, 1], got {}",
                self.aads_required_before_depth
            ));
        }
        Ok(())
    }

    /// Inclusive MAC window.
    pub fn flops_window(&self) -> (f64, f64) {
        (
            self.flops_center * (1.0 - self.flops_tolerance),
            self.flops_center * (1.0 + self.flops_tolerance),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorResult {
    pub pass: bool,
    pub violations: Vec<Violation>,
    pub macs: u64,
    pub parallel_width: usize,
}

/// Largest number of edges crossing any cut between consecutive depth
/// levels, i.e. the most branches alive side by side at one depth.
pub fn parallel_width(topo: &Topology) -> usize {
    let max_depth = topo.depth[topo.output];
    let mut crossing = vec![0usize; max_depth.max(1)];
    for (v, ins) in topo.inputs.iter().enumerate() {
        for &u in ins {
            for level in crossing.iter_mut().take(topo.depth[v]).skip(topo.depth[u]) {
                *level += 1;
            }
        }
    }
    crossing.into_iter().max().unwrap_or(0)
}

/// Evaluates every constraint; violations are reported, never raised.
/// Errors only for specs that fail validation.
pub fn indicator(spec: &ArchSpec, constraints: &ConstraintSet) -> Result<IndicatorResult> {
    constraints.validate().map_err(ArchError::Schema)?;
    let topo = spec.topology()?;
    let macs = count_macs(spec)?;
    let mut violations = Vec::new();

    let width = parallel_width(&topo);
    if width < constraints.min_parallel_columns {
        violations.push(Violation {
            id: "parallel-columns".into(),
            detail: format!(
                "at most {width} parallel branch(es) at any depth, need {}",
                constraints.min_parallel_columns
            ),
        });
    }

    if constraints.forbid_pointwise_strided {
        for n in &spec.nodes {
            let strided = match n.op {
                Op::PointwiseConv { stride, .. } => stride > 1,
                Op::Conv { kernel: 1, stride, .. } => stride > 1,
                _ => false,
            };
            if strided {
                violations.push(Violation {
                    id: "pointwise-strided".into(),
                    detail: format!("node `{}` is a 1x1 convolution with stride {}", n.id, n.op.stride().unwrap_or(0)),
                });
            }
        }
    }

    let fractions = topo.depth_fraction();
    let earliest = spec
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::Aads { .. }))
        .map(|(i, _)| fractions[i])
        .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.min(f))));
    match earliest {
        Some(f) if f <= constraints.aads_required_before_depth => {}
        Some(f) => violations.push(Violation {
            id: "aads-early".into(),
            detail: format!(
                "first AADS block at depth fraction {f:.3}, required <= {}",
                constraints.aads_required_before_depth
            ),
        }),
        None => violations.push(Violation {
            id: "aads-early".into(),
            detail: "no AADS block in the network".into(),
        }),
    }

    let (lo, hi) = constraints.flops_window();
    if (macs as f64) < lo || (macs as f64) > hi {
        violations.push(Violation {
            id: "flops-budget".into(),
            detail: format!("{:.2}M MACs outside [{:.2}M, {:.2}M]", macs as f64 / 1e6, lo / 1e6, hi / 1e6),
        });
    }

    Ok(IndicatorResult {
        pass: violations.is_empty(),
        violations,
        macs,
        parallel_width: width,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{reference_spec, ArchBuilder};
    use super::*;

    fn ids(r: &IndicatorResult) -> Vec<&str> {
        r.violations.iter().map(|v| v.id.as_str()).collect()
    }

    #[test]
    fn reference_is_compliant() {
        let r = indicator(&reference_spec(), &ConstraintSet::default()).unwrap();
        assert!(r.pass, "{:?}", r.violations);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn strided_pointwise_is_flagged() {
        let mut spec = reference_spec();
        let node = spec
            .nodes
            .iter_mut()
            .rev()
            .find(|n| matches!(n.op, Op::PointwiseConv { .. }))
            .unwrap();
        if let Op::PointwiseConv { stride, .. } = &mut node.op {
            *stride = 2;
        }
        let r = indicator(&spec, &ConstraintSet::default()).unwrap();
        assert!(!r.pass);
        assert!(ids(&r).contains(&"pointwise-strided"));
    }

    #[test]
    fn chain_without_aads_fails_every_check() {
        let mut b = ArchBuilder::new("chain", [1, 1, 32, 32]);
        let x = b.input();
        let c = b.conv(&x, 8, 3, 1, 1);
        let p = b.pointwise_strided(&c, 8, 2);
        let g = b.gap(&p);
        let f = b.fc(&g, 2);
        b.output(&f);
        let r = indicator(&b.build().unwrap(), &ConstraintSet::default()).unwrap();
        assert_eq!(ids(&r), vec!["parallel-columns", "pointwise-strided", "aads-early", "flops-budget"]);
        assert_eq!(r.parallel_width, 1);
    }

    #[test]
    fn budget_window_edges() {
        let c = ConstraintSet::default();
        let (lo, hi) = c.flops_window();
        assert!((lo - 80e6).abs() < 1e-3 && (hi - 120e6).abs() < 1e-3);
        assert!(ConstraintSet {
            flops_tolerance: 1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(ConstraintSet { flops_center: 0.0, ..c }.validate().is_err());
    }
}
