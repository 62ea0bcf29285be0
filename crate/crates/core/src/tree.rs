//! Explicit policy trees: forward retrace of an optimized backward pass,
//! exact error-probability evaluation by full outcome enumeration (the
//! grid-free oracle), Monte Carlo simulation, and a text round-trip format.
//!
//! A policy tree for cardinality M is a perfect binary tree of depth M. The
//! node at level k (0-based) reached by outcomes z₁..z_k holds the
//! measurement applied to slot k+1 and the planning state (leader joint
//! probability, tail joint probability, leader identity) before that
//! measurement. Each of the 2^M leaves holds the final symbol decision.

use crate::dp::{DpResult, HatLabel, SystemState};
use crate::error::{Error, Result};
use crate::model::{Association, LocalMeasurement, ModulationConfig};
use rayon::prelude::*;
use std::fmt::Write as _;

/// Exact enumeration is quadratic in 2^M; beyond this cardinality the joint
/// table stops being practical.
pub const EXACT_ENUM_LIMIT: u32 = 20;

/// One internal node: the control applied to the next slot and the planning
/// state before applying it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeNode {
    pub control: LocalMeasurement,
    pub state: SystemState,
}

/// Perfect binary policy tree of depth `m`: 2^k nodes at level k stored in
/// heap order (index 2^k − 1 + path, children at 2·index + 1 + z), and 2^m
/// leaf decisions indexed by the full outcome path (first outcome is the
/// most significant bit).
#[derive(Clone, Debug)]
pub struct PolicyTree {
    pub m: u32,
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<u32>,
    /// Retrace table lookups that fell outside the grid (zero for any table
    /// set covering the reachable states).
    pub clamped: u64,
}

#[inline]
fn node_index(level: u32, path: usize) -> usize {
    (1usize << level) - 1 + path
}

impl PolicyTree {
    pub fn node(&self, level: u32, path: usize) -> &TreeNode {
        &self.nodes[node_index(level, path)]
    }

    pub fn leaf(&self, path: usize) -> u32 {
        self.leaves[path]
    }

    pub fn n_leaves(&self) -> usize {
        1usize << self.m
    }

    fn validate_shape(&self) -> Result<()> {
        let m = self.m;
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "tree depth {m} below the minimum cardinality 2"
            )));
        }
        if self.nodes.len() != (1usize << m) - 1 || self.leaves.len() != 1usize << m {
            return Err(Error::InvalidArgument(
                "tree node or leaf count does not match its depth".into(),
            ));
        }
        for (i, &y) in self.leaves.iter().enumerate() {
            if y < 1 || y > m {
                return Err(Error::InvalidArgument(format!(
                    "leaf {i} decides {y}, outside 1..={m}"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the node levels of a tree by propagating states forward from the
/// equiprobable start, asking `control_of` for each node's measurement.
/// The per-outcome update keeps the incumbent leader when its surviving mass
/// at least ties the just-measured slot's, and the tail always scales by the
/// vacuum column.
fn build_levels<F>(cfg: &ModulationConfig, mut control_of: F) -> Result<(Vec<TreeNode>, Vec<u32>)>
where
    F: FnMut(u32, usize, &SystemState) -> Result<LocalMeasurement>,
{
    let m = cfg.m();
    let mf = m as f64;
    let mut nodes: Vec<TreeNode> = Vec::with_capacity((1usize << m) - 1);
    let root_state = SystemState {
        p_hat: 1.0 / mf,
        p_tail: 1.0 / mf,
        hat_label: HatLabel::Unset,
    };
    nodes.push(TreeNode {
        control: control_of(0, 0, &root_state)?,
        state: root_state,
    });
    for level in 1..m {
        for path in 0..(1usize << level) {
            let parent = nodes[node_index(level - 1, path >> 1)];
            let z = (path & 1) as u8;
            let p = parent.control.kernel(cfg)?;
            let pz0 = p.prob(z, 0);
            let pz1 = p.prob(z, 1);
            let state = match parent.state.hat_label {
                HatLabel::Unset => SystemState {
                    // First measurement: the measured slot is the only
                    // labeled hypothesis.
                    p_hat: pz1 * parent.state.p_tail,
                    p_tail: pz0 * parent.state.p_tail,
                    hat_label: HatLabel::Symbol(1),
                },
                HatLabel::Symbol(x) => {
                    let keep = pz0 * parent.state.p_hat;
                    let switch = pz1 * parent.state.p_tail;
                    SystemState {
                        p_hat: keep.max(switch),
                        p_tail: pz0 * parent.state.p_tail,
                        hat_label: if keep >= switch {
                            HatLabel::Symbol(x)
                        } else {
                            HatLabel::Symbol(level)
                        },
                    }
                }
                HatLabel::Previous => {
                    return Err(Error::InvalidArgument(
                        "unresolved leader placeholder during tree construction".into(),
                    ))
                }
            };
            nodes.push(TreeNode {
                control: control_of(level, path, &state)?,
                state,
            });
        }
    }
    // Leaf decisions: compare the leader's surviving mass against the final
    // slot's under the last outcome; ties keep the (lower-index) leader.
    let mut leaves = Vec::with_capacity(1usize << m);
    for path in 0..(1usize << m) {
        let parent = nodes[node_index(m - 1, path >> 1)];
        let z = (path & 1) as u8;
        let p = parent.control.kernel(cfg)?;
        let keep = p.prob(z, 0) * parent.state.p_hat;
        let switch = p.prob(z, 1) * parent.state.p_tail;
        let leader = match parent.state.hat_label {
            HatLabel::Symbol(x) => x,
            // Unreachable for m >= 2; keep a defined decision anyway.
            _ => 1,
        };
        leaves.push(if keep >= switch { leader } else { m });
    }
    Ok((nodes, leaves))
}

/// Builds a tree from an explicit control assignment (levels and outcome
/// paths as in [`PolicyTree`]); leaf decisions follow the same maximum-mass
/// rule as the retrace.
pub fn tree_from_controls<F>(cfg: &ModulationConfig, mut control_of: F) -> Result<PolicyTree>
where
    F: FnMut(u32, usize, &SystemState) -> LocalMeasurement,
{
    let (nodes, leaves) = build_levels(cfg, |level, path, state| Ok(control_of(level, path, state)))?;
    Ok(PolicyTree {
        m: cfg.m(),
        nodes,
        leaves,
        clamped: 0,
    })
}

/// Forward retrace of a backward pass: the root takes the optimized first
/// control; every deeper node re-looks-up its control from that stage's
/// table at the node's exact propagated state (interpolated, clamped and
/// flagged if outside the grid).
pub fn retrace_forward(result: &DpResult) -> Result<PolicyTree> {
    let cfg = result.cfg;
    let mut clamped = 0u64;
    let (nodes, leaves) = build_levels(&cfg, |level, _path, state| {
        if level == 0 {
            Ok(result.first_control)
        } else {
            let table = result.stage_table(level)?;
            let (control, was_clamped) = table.control_probe(state.p_hat, state.p_tail);
            if was_clamped {
                clamped += 1;
            }
            Ok(control)
        }
    })?;
    Ok(PolicyTree {
        m: cfg.m(),
        nodes,
        leaves,
        clamped,
    })
}

/// Direct-detection receiver as a policy tree: every slot is measured in the
/// slot basis; a click pins the symbol, no clicks fall back to the lowest
/// index.
pub fn dd_tree(cfg: &ModulationConfig) -> PolicyTree {
    tree_from_controls(cfg, |_, _, _| LocalMeasurement::Projective { phi: cfg.theta() })
        .expect("projective controls cannot fail")
}

/// Conditional-nulling receiver as a policy tree: slot k is nulled while the
/// candidate is still unconfirmed (a no-click confirms it), and plain direct
/// detection runs afterwards (a click there re-pins the symbol). Decisions
/// are the replayed candidates, not the maximum-mass rule, so the tree is
/// exactly the receiver it names even on zero-probability paths.
pub fn cn_tree(cfg: &ModulationConfig) -> PolicyTree {
    let m = cfg.m();
    let theta = cfg.theta();
    // Candidate and mode after `level` outcomes of `path`.
    let replay = |level: u32, path: usize| -> (u32, bool) {
        let mut h = 1u32;
        let mut confirmed = false;
        for k in 0..level {
            let z = (path >> (level - 1 - k)) & 1;
            if !confirmed {
                if z == 0 {
                    confirmed = true;
                } else {
                    h = (k + 2).min(m);
                }
            } else if z == 1 {
                h = k + 1;
            }
        }
        (h, confirmed)
    };
    let mut tree = tree_from_controls(cfg, |level, path, _| {
        let (_, confirmed) = replay(level, path);
        LocalMeasurement::Projective {
            phi: if confirmed { theta } else { -theta },
        }
    })
    .expect("projective controls cannot fail");
    for path in 0..tree.n_leaves() {
        let (h, _) = replay(m, path);
        tree.leaves[path] = h;
    }
    tree
}

/// Exact joint distribution of (symbol, outcome path) under a tree, and the
/// correct-decision probability of the tree's leaf decisions.
#[derive(Clone, Debug)]
pub struct ExactEvaluation {
    /// Probability of a correct decision under the tree's leaf rule.
    pub pc: f64,
    /// Joint probabilities, symbol-major: `joint[(x−1)·2^M + path]`.
    pub joint: Vec<f64>,
    /// Correct-decision probability conditioned on each sent symbol.
    pub per_symbol_pc: Vec<f64>,
}

impl ExactEvaluation {
    /// Best possible correct-decision probability over relabelings of the
    /// leaf decisions: sum over paths of the largest joint entry.
    pub fn map_pc(&self) -> f64 {
        let paths = self.joint.len() / self.per_symbol_pc.len();
        (0..paths)
            .map(|p| {
                (0..self.per_symbol_pc.len())
                    .map(|x| self.joint[x * paths + p])
                    .fold(0.0f64, f64::max)
            })
            .sum()
    }
}

/// Enumerates all M·2^M (symbol, path) joint probabilities exactly: each is
/// (1/M) times the product of per-slot kernel entries along the path, with
/// the pulse column used at the sent symbol's slot.
pub fn exact_pc(tree: &PolicyTree, cfg: &ModulationConfig) -> Result<ExactEvaluation> {
    let m = tree.m;
    if m != cfg.m() {
        return Err(Error::InvalidArgument(format!(
            "tree depth {m} does not match configuration cardinality {}",
            cfg.m()
        )));
    }
    if m > EXACT_ENUM_LIMIT {
        return Err(Error::TooLarge(m));
    }
    tree.validate_shape()?;
    let kernels: Vec<[[f64; 2]; 2]> = tree
        .nodes
        .iter()
        .map(|n| n.control.kernel(cfg).map(|k| k.entries()))
        .collect::<Result<_>>()?;
    let paths = 1usize << m;
    let prior = 1.0 / m as f64;
    let mut joint = vec![0.0; m as usize * paths];
    joint
        .par_chunks_mut(paths)
        .enumerate()
        .for_each(|(xi, row)| {
            for (path, slot) in row.iter_mut().enumerate() {
                let mut p = prior;
                for level in 0..m {
                    let prefix = path >> (m - level);
                    let z = (path >> (m - 1 - level)) & 1;
                    let qubit = usize::from(xi as u32 == level);
                    p *= kernels[node_index(level, prefix)][z][qubit];
                }
                *slot = p;
            }
        });
    let mut per_symbol_pc = vec![0.0; m as usize];
    for (xi, pc_x) in per_symbol_pc.iter_mut().enumerate() {
        let row = &joint[xi * paths..(xi + 1) * paths];
        *pc_x = (0..paths)
            .filter(|&p| tree.leaves[p] as usize == xi + 1)
            .map(|p| row[p])
            .sum::<f64>()
            * m as f64;
    }
    let pc = per_symbol_pc.iter().sum::<f64>() * prior;
    Ok(ExactEvaluation {
        pc,
        joint,
        per_symbol_pc,
    })
}

/// Monte Carlo walk of the tree: draws the symbol uniformly, samples each
/// slot's outcome from the node kernel, and scores the leaf decision.
/// Returns the empirical correct rate and its binomial standard error;
/// deterministic for a given seed.
pub fn simulate(
    tree: &PolicyTree,
    cfg: &ModulationConfig,
    trials: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if tree.m != cfg.m() {
        return Err(Error::InvalidArgument(format!(
            "tree depth {} does not match configuration cardinality {}",
            tree.m,
            cfg.m()
        )));
    }
    tree.validate_shape()?;
    let kernels: Vec<[[f64; 2]; 2]> = tree
        .nodes
        .iter()
        .map(|n| n.control.kernel(cfg).map(|k| k.entries()))
        .collect::<Result<_>>()?;
    let m = tree.m;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut correct = 0u64;
    for _ in 0..trials {
        let x = rng.random_range(1..=m);
        let mut path = 0usize;
        for level in 0..m {
            let qubit = usize::from(level + 1 == x);
            let p_click = kernels[node_index(level, path)][1][qubit];
            let z = usize::from(rng.random::<f64>() < p_click);
            path = (path << 1) | z;
        }
        if tree.leaves[path] == x {
            correct += 1;
        }
    }
    let pc_hat = correct as f64 / trials as f64;
    let stderr = (pc_hat * (1.0 - pc_hat) / trials as f64).sqrt();
    Ok((pc_hat, stderr))
}

// ---------------------------------------------------------------------------
// Text round-trip
// ---------------------------------------------------------------------------

const TREE_HEADER: &str = "# qppm-tree v1";

fn fmt_tree_control(c: &LocalMeasurement) -> String {
    match c {
        LocalMeasurement::Projective { phi } => format!("phi:{phi}"),
        LocalMeasurement::GeneralizedKennedy { beta, association } => {
            format!("gk:{beta}:{}", association.name())
        }
        LocalMeasurement::Povm { a, b } => format!("povm:{a}:{b}"),
    }
}

fn parse_tree_control(s: &str, line: usize) -> Result<LocalMeasurement> {
    let bad = |msg: String| Error::Parse { line, message: msg };
    let mut parts = s.split(':');
    match parts.next() {
        Some("phi") => {
            let phi: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad projector control {s:?}")))?;
            Ok(LocalMeasurement::Projective { phi })
        }
        Some("gk") => {
            let beta: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad displacement control {s:?}")))?;
            let assoc = parts
                .next()
                .ok_or_else(|| bad(format!("missing association in {s:?}")))
                .and_then(|v| Association::parse(v).map_err(|e| bad(e.to_string())))?;
            Ok(LocalMeasurement::GeneralizedKennedy {
                beta,
                association: assoc,
            })
        }
        Some("povm") => {
            let a: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad povm control {s:?}")))?;
            let b: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad povm control {s:?}")))?;
            Ok(LocalMeasurement::Povm { a, b })
        }
        _ => Err(bad(format!("unknown control encoding {s:?}"))),
    }
}

fn path_bits(level: u32, path: usize) -> String {
    if level == 0 {
        return "-".into();
    }
    (0..level)
        .map(|k| {
            if (path >> (level - 1 - k)) & 1 == 1 {
                '1'
            } else {
                '0'
            }
        })
        .collect()
}

fn parse_path_bits(s: &str, level: u32, line: usize) -> Result<usize> {
    if level == 0 {
        return if s == "-" {
            Ok(0)
        } else {
            Err(Error::Parse {
                line,
                message: format!("root path must be \"-\", found {s:?}"),
            })
        };
    }
    if s.len() != level as usize {
        return Err(Error::Parse {
            line,
            message: format!("path {s:?} does not have {level} bits"),
        });
    }
    let mut path = 0usize;
    for c in s.chars() {
        path = (path << 1)
            | match c {
                '0' => 0,
                '1' => 1,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("path {s:?} contains a non-bit character"),
                    })
                }
            };
    }
    Ok(path)
}

/// Serializes a tree: versioned header, depth, one line per internal node
/// (level, outcome bits, control, leader mass, tail mass, leader label) and
/// one per leaf (level, bits, decision).
pub fn export_tree(tree: &PolicyTree) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TREE_HEADER}");
    let _ = writeln!(out, "# m={}", tree.m);
    for level in 0..tree.m {
        for path in 0..(1usize << level) {
            let n = tree.node(level, path);
            let label = match n.state.hat_label {
                HatLabel::Unset => "unset".to_string(),
                HatLabel::Symbol(x) => x.to_string(),
                HatLabel::Previous => "previous".to_string(),
            };
            let _ = writeln!(
                out,
                "n,{},{},{},{},{},{}",
                level,
                path_bits(level, path),
                fmt_tree_control(&n.control),
                n.state.p_hat,
                n.state.p_tail,
                label
            );
        }
    }
    for path in 0..tree.n_leaves() {
        let _ = writeln!(
            out,
            "l,{},{},{}",
            tree.m,
            path_bits(tree.m, path),
            tree.leaves[path]
        );
    }
    out
}

/// Parses the [`export_tree`] format back into a tree; any malformed line is
/// reported with its 1-based line number.
pub fn import_tree(text: &str) -> Result<PolicyTree> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty tree document".into(),
    })?;
    if first.trim() != TREE_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unrecognized header {first:?}"),
        });
    }
    let (_, meta) = lines.next().ok_or(Error::Parse {
        line: 2,
        message: "missing depth line".into(),
    })?;
    let m: u32 = meta
        .trim()
        .strip_prefix("# m=")
        .and_then(|v| v.parse().ok())
        .ok_or(Error::Parse {
            line: 2,
            message: format!("expected \"# m=<depth>\", found {meta:?}"),
        })?;
    if !(2..=EXACT_ENUM_LIMIT).contains(&m) {
        return Err(Error::Parse {
            line: 2,
            message: format!("depth {m} outside the supported range 2..={EXACT_ENUM_LIMIT}"),
        });
    }
    let n_nodes = (1usize << m) - 1;
    let mut nodes: Vec<Option<TreeNode>> = vec![None; n_nodes];
    let mut leaves: Vec<Option<u32>> = vec![None; 1usize << m];
    for (i, raw) in lines {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = l.split(',').collect();
        match cols[0] {
            "n" => {
                if cols.len() != 7 {
                    return Err(Error::Parse {
                        line,
                        message: format!("node line needs 7 fields, found {}", cols.len()),
                    });
                }
                let level: u32 = cols[1].parse().map_err(|_| Error::Parse {
                    line,
                    message: "bad node level".into(),
                })?;
                if level >= m {
                    return Err(Error::Parse {
                        line,
                        message: format!("node level {level} outside 0..{m}"),
                    });
                }
                let path = parse_path_bits(cols[2], level, line)?;
                let control = parse_tree_control(cols[3], line)?;
                let p_hat: f64 = cols[4].parse().map_err(|_| Error::Parse {
                    line,
                    message: "bad leader mass".into(),
                })?;
                let p_tail: f64 = cols[5].parse().map_err(|_| Error::Parse {
                    line,
                    message: "bad tail mass".into(),
                })?;
                let hat_label = match cols[6] {
                    "unset" => HatLabel::Unset,
                    other => HatLabel::Symbol(other.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad leader label {other:?}"),
                    })?),
                };
                let idx = node_index(level, path);
                if nodes[idx].is_some() {
                    return Err(Error::Parse {
                        line,
                        message: format!("duplicate node at level {level}, path {:?}", cols[2]),
                    });
                }
                nodes[idx] = Some(TreeNode {
                    control,
                    state: SystemState {
                        p_hat,
                        p_tail,
                        hat_label,
                    },
                });
            }
            "l" => {
                if cols.len() != 4 {
                    return Err(Error::Parse {
                        line,
                        message: format!("leaf line needs 4 fields, found {}", cols.len()),
                    });
                }
                let level: u32 = cols[1].parse().map_err(|_| Error::Parse {
                    line,
                    message: "bad leaf level".into(),
                })?;
                if level != m {
                    return Err(Error::Parse {
                        line,
                        message: format!("leaf level {level} must equal the depth {m}"),
                    });
                }
                let path = parse_path_bits(cols[2], m, line)?;
                let decision: u32 = cols[3].parse().map_err(|_| Error::Parse {
                    line,
                    message: "bad leaf decision".into(),
                })?;
                if leaves[path].is_some() {
                    return Err(Error::Parse {
                        line,
                        message: format!("duplicate leaf for path {:?}", cols[2]),
                    });
                }
                leaves[path] = Some(decision);
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown record kind {other:?}"),
                })
            }
        }
    }
    let nodes: Vec<TreeNode> = nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            n.ok_or(Error::Parse {
                line: 0,
                message: format!("missing node record for heap index {i}"),
            })
        })
        .collect::<Result<_>>()?;
    let leaves: Vec<u32> = leaves
        .into_iter()
        .enumerate()
        .map(|(p, l)| {
            l.ok_or(Error::Parse {
                line: 0,
                message: format!("missing leaf record for path index {p}"),
            })
        })
        .collect::<Result<_>>()?;
    let tree = PolicyTree {
        m,
        nodes,
        leaves,
        clamped: 0,
    };
    tree.validate_shape()?;
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{pe_conditional_nulling, pe_direct_detection, pe_helstrom};
    use crate::dp::run_backward;
    use crate::gk::gk_run_backward;
    use crate::grid::{GridSpec, Interpolation};
    use crate::model::config_from_mean_photons;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid(m: u32, n: usize) -> GridSpec {
        GridSpec::square_for(m, n, Interpolation::Bilinear).unwrap()
    }

    fn random_tree(cfg: &ModulationConfig, rng: &mut StdRng) -> PolicyTree {
        // Per-node family choice: the tracked-state invariants must hold for
        // any assignment of binary measurements.
        let alpha = cfg.alpha();
        tree_from_controls(cfg, |_, _, _| match rng.random_range(0..3u8) {
            0 => LocalMeasurement::Projective {
                phi: rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
            },
            1 => LocalMeasurement::GeneralizedKennedy {
                beta: rng.random_range(-alpha..2.0 * alpha + 1e-9),
                association: if rng.random::<bool>() {
                    Association::Direct
                } else {
                    Association::Inverted
                },
            },
            _ => loop {
                let a = rng.random_range(-1.0..1.0);
                let b = rng.random_range(-1.0..1.0);
                if a * a + b * b <= 1.0 {
                    break LocalMeasurement::Povm { a, b };
                }
            },
        })
        .unwrap()
    }

    /// Joint probabilities of every symbol after each prefix of `path`,
    /// multiplied factor-by-factor in path order (matches the tracked-state
    /// arithmetic bit for bit).
    fn prefix_joints(
        tree: &PolicyTree,
        cfg: &ModulationConfig,
        path: usize,
    ) -> Vec<Vec<f64>> {
        let m = tree.m;
        let mut joints = vec![vec![1.0 / m as f64; m as usize]];
        let mut prefix = 0usize;
        for level in 0..m {
            let z = ((path >> (m - 1 - level)) & 1) as u8;
            let k = tree.node(level, prefix).control.kernel(cfg).unwrap();
            let last = joints.last().unwrap().clone();
            let next: Vec<f64> = last
                .iter()
                .enumerate()
                .map(|(xi, &p)| p * k.prob(z, u8::from(xi as u32 == level)))
                .collect();
            joints.push(next);
            prefix = (prefix << 1) | z as usize;
        }
        joints
    }

    #[test]
    fn binary_tree_structure() {
        let cfg = config_from_mean_photons(2, 1.0).unwrap();
        let r = run_backward(&cfg, &grid(2, 101)).unwrap();
        let t = retrace_forward(&r).unwrap();
        assert_eq!(t.nodes.len(), 3);
        assert_eq!(t.leaves.len(), 4);
        assert_eq!(t.node(0, 0).state.hat_label, HatLabel::Unset);
        assert_eq!(t.node(0, 0).control, r.first_control);
        for path in 0..2 {
            assert_eq!(t.node(1, path).state.hat_label, HatLabel::Symbol(1));
        }
        assert_eq!(t.clamped, 0);
    }

    #[test]
    fn leaf_rule_on_interior_paths() {
        // Wherever both masses are positive, a final outcome of 1 decides the
        // last slot and 0 keeps the leader (projective optimal controls).
        let cfg = config_from_mean_photons(3, 1.0).unwrap();
        let r = run_backward(&cfg, &grid(3, 151)).unwrap();
        let t = retrace_forward(&r).unwrap();
        let m = t.m;
        for path in 0..t.n_leaves() {
            let parent = t.node(m - 1, path >> 1);
            if parent.state.p_hat > 1e-9 && parent.state.p_tail > 1e-9 {
                let leader = match parent.state.hat_label {
                    HatLabel::Symbol(x) => x,
                    other => panic!("unresolved label {other:?}"),
                };
                if path & 1 == 1 {
                    assert_eq!(t.leaf(path), m, "click leaf should decide the final slot");
                } else {
                    assert_eq!(t.leaf(path), leader, "no-click leaf should keep the leader");
                }
            }
        }
    }

    #[test]
    fn degenerate_tree_keeps_lowest_symbol() {
        // γ = 1: everything ties, so deterministic tie-breaking keeps the
        // first slot everywhere.
        let cfg = config_from_mean_photons(3, 0.0).unwrap();
        let r = run_backward(&cfg, &grid(3, 41)).unwrap();
        let t = retrace_forward(&r).unwrap();
        for path in 0..t.n_leaves() {
            assert_eq!(t.leaf(path), 1);
        }
        let eval = exact_pc(&t, &cfg).unwrap();
        assert_abs_diff_eq!(eval.pc, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn dd_tree_matches_closed_form() {
        for (m, photons) in [(2u32, 1.0), (4, 1.0), (4, 0.25), (8, 0.5)] {
            let cfg = config_from_mean_photons(m, photons).unwrap();
            let t = dd_tree(&cfg);
            let eval = exact_pc(&t, &cfg).unwrap();
            assert_abs_diff_eq!(eval.pc, 1.0 - pe_direct_detection(&cfg), epsilon = 1e-12);
            let total: f64 = eval.joint.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn cn_tree_matches_closed_form() {
        for (m, photons) in [(2u32, 1.0), (3, 0.5), (4, 1.0), (8, 2.0)] {
            let cfg = config_from_mean_photons(m, photons).unwrap();
            let t = cn_tree(&cfg);
            let eval = exact_pc(&t, &cfg).unwrap();
            assert_abs_diff_eq!(
                eval.pc,
                1.0 - pe_conditional_nulling(&cfg),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn retraced_tree_beats_conditional_nulling() {
        for photons in [0.25, 1.0, 2.0] {
            let cfg = config_from_mean_photons(4, photons).unwrap();
            let r = run_backward(&cfg, &grid(4, 201)).unwrap();
            let t = retrace_forward(&r).unwrap();
            let pc = exact_pc(&t, &cfg).unwrap().pc;
            assert!(
                pc >= 1.0 - pe_conditional_nulling(&cfg) - 1e-9,
                "retraced pc {pc} below the nulling receiver"
            );
        }
    }

    #[test]
    fn retraced_pc_consistent_with_backward_pc() {
        let cfg = config_from_mean_photons(4, 1.0).unwrap();
        let r = run_backward(&cfg, &grid(4, 201)).unwrap();
        let t = retrace_forward(&r).unwrap();
        let eval = exact_pc(&t, &cfg).unwrap();
        assert!(
            (eval.pc - r.pc).abs() <= 1e-3,
            "retraced {} vs backward {}",
            eval.pc,
            r.pc
        );
        // The retraced policy is feasible, so its exact value cannot beat the
        // true optimum; the backward value carries upward interpolation bias.
        assert!(eval.pc <= r.pc + 1e-9);
        // MAP over the enumerated joints is exactly the leaf rule here.
        assert_abs_diff_eq!(eval.map_pc(), eval.pc, epsilon = 1e-12);
    }

    #[test]
    fn kennedy_retrace_is_consistent_too() {
        let cfg = config_from_mean_photons(3, 1.0).unwrap();
        let r = gk_run_backward(&cfg, &grid(3, 201)).unwrap();
        let t = retrace_forward(&r).unwrap();
        let eval = exact_pc(&t, &cfg).unwrap();
        assert!(
            (eval.pc - r.pc).abs() <= 1e-3,
            "retraced {} vs backward {}",
            eval.pc,
            r.pc
        );
        assert!(eval.pc <= r.pc + 1e-9);
    }

    #[test]
    fn binary_retrace_approaches_joint_bound() {
        let cfg = config_from_mean_photons(2, 1.0).unwrap();
        let r = run_backward(&cfg, &grid(2, 501)).unwrap();
        let t = retrace_forward(&r).unwrap();
        let eval = exact_pc(&t, &cfg).unwrap();
        assert_abs_diff_eq!(1.0 - eval.pc, pe_helstrom(&cfg), epsilon = 5e-4);
        // Exact evaluation of a feasible policy can never beat the bound.
        assert!(1.0 - eval.pc >= pe_helstrom(&cfg) - 1e-12);
    }

    #[test]
    fn joint_table_properties_over_random_policies() {
        // 2000 random control assignments, both families: tail symbols stay
        // exchangeable, measured-symbol orderings never flip, the tracked
        // pair (leader, tail) agrees with the exact enumeration, per-symbol
        // joints never increase, and the leader label only changes to the
        // just-measured slot.
        let cfg = config_from_mean_photons(4, 1.3).unwrap();
        let mut rng = StdRng::seed_from_u64(2024);
        let m = cfg.m();
        for _ in 0..2000 {
            let t = random_tree(&cfg, &mut rng);
            let path = rng.random_range(0..t.n_leaves());
            let joints = prefix_joints(&t, &cfg, path);
            let mut prefix = 0usize;
            for level in 0..=m {
                let j = &joints[level as usize];
                // Unmeasured symbols carry identical joints.
                for xi in (level as usize + 1)..m as usize {
                    assert!(
                        (j[xi] - j[level as usize]).abs() <= 1e-12 * j[level as usize].max(1e-300),
                        "tail joints diverged at level {level}"
                    );
                }
                // Per-symbol joints are nonincreasing in the prefix length.
                if level > 0 {
                    let prev = &joints[level as usize - 1];
                    for xi in 0..m as usize {
                        assert!(j[xi] <= prev[xi] + 1e-15);
                    }
                }
                // Sign preservation among measured symbols.
                if level > 0 && level < m {
                    let next = &joints[level as usize + 1];
                    for i in 0..level as usize {
                        for k in 0..i {
                            let before = j[i] - j[k];
                            let after = next[i] - next[k];
                            if before > 1e-15 {
                                assert!(after >= -1e-15, "strict order flipped");
                            } else if before < -1e-15 {
                                assert!(after <= 1e-15, "strict order flipped");
                            } else {
                                assert!(after.abs() <= 1e-12, "tie broke apart");
                            }
                        }
                    }
                }
                // Tracked state equals the enumerated joints: the leader's
                // mass is the leader symbol's joint, the tail mass is any
                // unmeasured symbol's joint (symbol M stays unmeasured until
                // the very end).
                if level < m {
                    let node = t.node(level, prefix);
                    if level > 0 {
                        let leader = match node.state.hat_label {
                            HatLabel::Symbol(x) => x,
                            other => panic!("unresolved label {other:?}"),
                        };
                        assert!(
                            leader >= 1 && leader <= level,
                            "leader {leader} not yet measured"
                        );
                        assert!((node.state.p_hat - j[(leader - 1) as usize]).abs() <= 1e-15);
                    }
                    assert!((node.state.p_tail - j[m as usize - 1]).abs() <= 1e-15);
                    prefix = (prefix << 1) | ((path >> (m - 1 - level)) & 1);
                }
            }
            // Leader transitions and monotonicity along the walked path.
            let mut prefix = 0usize;
            for level in 1..m {
                let z = (path >> (m - level)) & 1;
                let parent = t.node(level - 1, prefix);
                prefix = (prefix << 1) | z;
                let node = t.node(level, prefix);
                assert!(node.state.p_tail <= parent.state.p_tail + 1e-15);
                assert!(node.state.p_hat <= 1.0 / m as f64 + 1e-12);
                assert!(node.state.p_tail <= 1.0 / m as f64 + 1e-12);
                match (parent.state.hat_label, node.state.hat_label) {
                    (HatLabel::Symbol(a), HatLabel::Symbol(b)) => {
                        if a != b {
                            assert_eq!(
                                b, level,
                                "leader changed to a slot other than the one just measured"
                            );
                        } else {
                            assert!(node.state.p_hat <= parent.state.p_hat + 1e-15);
                        }
                    }
                    (HatLabel::Unset, HatLabel::Symbol(b)) => assert_eq!(b, 1),
                    other => panic!("unexpected label transition {other:?}"),
                }
            }
        }
    }

    #[test]
    fn simulate_is_deterministic_and_accurate() {
        let cfg = config_from_mean_photons(4, 1.0).unwrap();
        let t = dd_tree(&cfg);
        let (pc1, se1) = simulate(&t, &cfg, 200_000, 42).unwrap();
        let (pc2, _) = simulate(&t, &cfg, 200_000, 42).unwrap();
        assert_eq!(pc1, pc2);
        let truth = 1.0 - pe_direct_detection(&cfg);
        assert!(
            (pc1 - truth).abs() <= 3.0 * se1,
            "simulated {pc1} vs exact {truth} (3σ = {})",
            3.0 * se1
        );
        let (pc3, _) = simulate(&t, &cfg, 200_000, 43).unwrap();
        assert_ne!(pc1, pc3, "different seeds should differ");
    }

    #[test]
    fn orthogonal_states_simulate_perfectly() {
        // γ = 0: nulling distinguishes the slots with certainty, so every
        // trial is correct and the binomial error collapses.
        let cfg = crate::model::config_from_gamma(3, 0.0).unwrap();
        let t = cn_tree(&cfg);
        let (pc, se) = simulate(&t, &cfg, 10_000, 7).unwrap();
        assert_eq!(pc, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = config_from_mean_photons(3, 1.0).unwrap();
        let proj = retrace_forward(&run_backward(&cfg, &grid(3, 41)).unwrap()).unwrap();
        let gk = retrace_forward(&gk_run_backward(&cfg, &grid(3, 41)).unwrap()).unwrap();
        for t in [&proj, &gk] {
            let text = export_tree(t);
            let back = import_tree(&text).unwrap();
            assert_eq!(back.m, t.m);
            assert_eq!(back.nodes, t.nodes);
            assert_eq!(back.leaves, t.leaves);
            let a = exact_pc(t, &cfg).unwrap().pc;
            let b = exact_pc(&back, &cfg).unwrap().pc;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn import_rejects_malformed_documents() {
        assert!(matches!(
            import_tree(""),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            import_tree("# qppm-tree v1\n# m=oops\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        let cfg = config_from_mean_photons(2, 1.0).unwrap();
        let t = dd_tree(&cfg);
        let text = export_tree(&t);
        // A leaf decision outside 1..=M is rejected (path 11 carries zero
        // mass under exact direct detection, so its tie keeps the leader).
        assert!(text.contains("l,2,11,1"));
        let bad = text.replace("l,2,11,1", "l,2,11,9");
        assert!(import_tree(&bad).is_err());
        // Truncation (drop the last line) loses a leaf.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        assert!(import_tree(&lines.join("\n")).is_err());
        // A garbled record kind is rejected with its line number.
        let garbled = text.replacen("n,0,-", "x,0,-", 1);
        match import_tree(&garbled) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn hand_written_nulling_fixture_imports_and_evaluates() {
        // Two-slot conditional nulling at γ = e⁻¹, written out by hand: the
        // first slot is nulled; a no-click confirms slot 1 and the second
        // slot is direct-detected; a click moves the candidate to slot 2,
        // which is then nulled. All states follow from the kernel columns.
        let cfg = config_from_mean_photons(2, 1.0).unwrap();
        let theta = cfg.theta();
        let g = cfg.gamma();
        let text = format!(
            "# qppm-tree v1\n\
             # m=2\n\
             n,0,-,phi:{mtheta},0.5,0.5,unset\n\
             n,1,0,phi:{theta},{u0},{v0},1\n\
             n,1,1,phi:{mtheta},{u1},{v1},1\n\
             l,2,00,1\n\
             l,2,01,2\n\
             l,2,10,2\n\
             l,2,11,2\n",
            mtheta = -theta,
            theta = theta,
            u0 = 0.5,
            v0 = 0.5 * g,
            u1 = 0.0,
            v1 = 0.5 * (1.0 - g),
        );
        let t = import_tree(&text).unwrap();
        let eval = exact_pc(&t, &cfg).unwrap();
        assert_abs_diff_eq!(
            eval.pc,
            1.0 - pe_conditional_nulling(&cfg),
            epsilon = 1e-12
        );
        // It matches the programmatic construction.
        let built = cn_tree(&cfg);
        assert_eq!(t.leaves, built.leaves);
        for (a, b) in t.nodes.iter().zip(&built.nodes) {
            assert_eq!(a.control, b.control);
        }
    }

    #[test]
    fn exact_pc_guards_against_huge_trees() {
        let cfg = config_from_mean_photons(2, 1.0).unwrap();
        let mut t = dd_tree(&cfg);
        t.m = 21;
        // Depth/configuration mismatch is caught first...
        assert!(matches!(exact_pc(&t, &cfg), Err(Error::InvalidArgument(_))));
        // ...and a matching oversized configuration trips the size guard
        // before any allocation.
        let big = config_from_mean_photons(21, 1.0).unwrap();
        assert!(matches!(exact_pc(&t, &big), Err(Error::TooLarge(21))));
    }
}
