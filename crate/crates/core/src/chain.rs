//! The continuous-time chain on the tree: simulation and certified probabilities.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::bracket::Bracket;
use crate::error::{domain, Result};
use crate::matrix::RootMode;
use crate::tree::{path_string, Shape};
use crate::walk::Walk;
use crate::weights::WeightSequence;

const MODULE: &str = "chain_sim";

/// Truncation depths tried by the bracketing solvers.
pub fn default_schedule() -> Vec<usize> {
    (1..=8).map(|k| 8 * k).collect()
}

pub const DEFAULT_TOL: f64 = 1e-8;

/// RNG for one path: the seed picks the generator, the path index its stream.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbBracket {
    pub lower: f64,
    pub upper: f64,
    /// Truncation depth of the last solve.
    pub depth: usize,
    /// `upper - lower <= tol` was reached.
    pub converged: bool,
}

impl ProbBracket {
    pub fn bracket(&self) -> Bracket {
        Bracket::new(self.lower, self.upper)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Tree, weights and root behaviour: everything the chain needs.
#[derive(Debug, Clone)]
pub struct ChainModel {
    pub shape: Arc<Shape>,
    pub w: WeightSequence,
    pub mode: RootMode,
}

impl ChainModel {
    pub fn new(shape: Arc<Shape>, w: WeightSequence, mode: RootMode) -> Self {
        ChainModel { shape, w, mode }
    }

    pub fn with_mode(&self, mode: RootMode) -> Self {
        ChainModel {
            mode,
            ..self.clone()
        }
    }

    pub fn walk(&self, depth: usize) -> Result<Walk> {
        Walk::new(self.shape.clone(), &self.w, self.mode, depth)
    }

    /// Evaluate `f` at each depth of the schedule until the bracket is `tol` wide.
    pub fn bracket_until<F>(&self, schedule: &[usize], tol: f64, f: F) -> Result<ProbBracket>
    where
        F: Fn(&Walk) -> Result<Bracket>,
    {
        if schedule.is_empty() {
            return Err(domain(MODULE, "empty depth schedule"));
        }
        let mut last = None;
        for &m in schedule {
            let walk = self.walk(m)?;
            let b = f(&walk)?.clamp01();
            let pb = ProbBracket {
                lower: b.lo,
                upper: b.hi,
                depth: m,
                converged: b.width() <= tol,
            };
            if pb.converged {
                return Ok(pb);
            }
            last = Some(pb);
        }
        Ok(last.unwrap())
    }
}

/// `ḡ(i) = P_i{T_{∂_r} < ∞}` in absorbed mode.
pub fn absorption_probability(model: &ChainModel, i: &[u32], schedule: &[usize], tol: f64) -> Result<ProbBracket> {
    let m = model.with_mode(RootMode::Absorbed);
    m.bracket_until(schedule, tol, |walk| walk.absorb(i))
}

/// `P_i{T_j < ∞}` in the model's root mode.
pub fn hitting_probability(model: &ChainModel, i: &[u32], j: &[u32], schedule: &[usize], tol: f64) -> Result<ProbBracket> {
    if i == j {
        return Ok(ProbBracket {
            lower: 1.0,
            upper: 1.0,
            depth: 0,
            converged: true,
        });
    }
    model.bracket_until(schedule, tol, |walk| walk.hit(i, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Transience {
    Transient,
    Recurrent,
    Undetermined,
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub verdict: Transience,
    /// `ḡ(r)` bracket at the last depth tried, absent for the bounded-weight shortcut.
    pub absorb_root: Option<ProbBracket>,
    pub reason: String,
}

pub fn classify_transience(model: &ChainModel, schedule: &[usize], tol: f64) -> Result<Classification> {
    if model.w.is_bounded() && !model.shape.is_finite() {
        return Ok(Classification {
            verdict: Transience::Transient,
            absorb_root: None,
            reason: "bounded weights: U is bounded".into(),
        });
    }
    let m = model.with_mode(RootMode::Absorbed);
    let mut all_near_one = true;
    let mut last = None;
    for &d in schedule {
        let walk = m.walk(d)?;
        let b = walk.absorb_root();
        let pb = ProbBracket {
            lower: b.lo,
            upper: b.hi,
            depth: d,
            converged: b.width() <= tol,
        };
        if b.hi < 1.0 - tol {
            return Ok(Classification {
                verdict: Transience::Transient,
                absorb_root: Some(pb),
                reason: format!("upper bound on absorption {:.3e} < 1 at depth {d}", b.hi),
            });
        }
        all_near_one &= b.lo >= 1.0 - tol;
        last = Some(pb);
    }
    let last = last.ok_or_else(|| domain(MODULE, "empty depth schedule"))?;
    let verdict = if all_near_one && last.converged {
        Transience::Recurrent
    } else {
        Transience::Undetermined
    };
    Ok(Classification {
        verdict,
        absorb_root: Some(last),
        reason: match verdict {
            Transience::Recurrent => "absorption bracket pinned at 1 at every depth".into(),
            _ => "bracket did not separate from 1".into(),
        },
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Caps {
    pub max_level: Option<usize>,
    pub max_time: Option<f64>,
    /// Keep the full list of visited nodes.
    pub record: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Status {
    Absorbed,
    /// Reached `max_level`; the current node is the ray prefix.
    Escaped { ray: Vec<u32> },
    CapHit,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    /// `(node path, holding time)`; empty unless recorded.
    pub steps: Vec<(Vec<u32>, f64)>,
    pub first_jump: Option<Vec<u32>>,
    pub first_hold: f64,
    pub time: f64,
    pub jumps: usize,
    pub status: Status,
    pub seed: u64,
    pub index: u64,
}

/// One trajectory; `(seed, index)` determines it completely.
pub fn simulate_chain(model: &ChainModel, start: &[u32], seed: u64, index: u64, caps: Caps) -> Result<Trajectory> {
    if caps.max_level.is_none() && caps.max_time.is_none() && !model.shape.is_finite() {
        return Err(domain(MODULE, "caps both unset on an infinite tree"));
    }
    let shapes = model.shape.shapes_along(start)?;
    let mut s = *shapes.last().unwrap();
    let mut path = start.to_vec();
    // shapes along the current path, to step back up without recomputation
    let mut stack = shapes;
    let mut rng = path_rng(seed, index);
    let mut t = 0.0;
    let mut steps = Vec::new();
    let mut first_jump = None;
    let mut first_hold = 0.0;
    let mut jumps = 0usize;
    let status = loop {
        let l = path.len();
        if let Some(ml) = caps.max_level {
            if l >= ml {
                break Status::Escaped { ray: path.clone() };
            }
        }
        let up = match (l, model.mode) {
            (0, RootMode::Reflected) => 0.0,
            _ => 1.0 / model.w.delta(l),
        };
        let k = model.shape.child_count(s, l);
        let down = if k == 0 { 0.0 } else { k as f64 / model.w.delta(l + 1) };
        let rate = up + down;
        let e: f64 = Exp1.sample(&mut rng);
        let hold = e / rate;
        if caps.record {
            steps.push((path.clone(), hold));
        }
        if jumps == 0 {
            first_hold = hold;
        }
        if let Some(mt) = caps.max_time {
            if t + hold >= mt {
                t = mt;
                break Status::CapHit;
            }
        }
        t += hold;
        jumps += 1;
        let u: f64 = rng.random::<f64>() * rate;
        if u < up {
            if l == 0 {
                if jumps == 1 {
                    first_jump = Some(vec![]);
                }
                break Status::Absorbed;
            }
            path.pop();
            stack.pop();
            s = *stack.last().unwrap();
        } else {
            let c = (((u - up) / down) * k as f64).floor().min(k as f64 - 1.0) as usize;
            s = model.shape.child(s, l, c);
            path.push(c as u32);
            stack.push(s);
        }
        if jumps == 1 && first_jump.is_none() {
            first_jump = Some(path.clone());
        }
    };
    Ok(Trajectory {
        steps,
        first_jump,
        first_hold,
        time: t,
        jumps,
        status,
        seed,
        index,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainSummary {
    pub paths: usize,
    pub absorbed: usize,
    pub escaped: usize,
    pub cap_hit: usize,
    /// Escape counts per cylinder at the requested resolution, keyed by node path.
    pub exit_counts: Vec<(String, usize)>,
}

/// Many independent paths in parallel; aggregation only counts.
pub fn simulate_many(model: &ChainModel, start: &[u32], seed: u64, paths: usize, caps: Caps, resolution: usize) -> Result<ChainSummary> {
    let caps = Caps { record: false, ..caps };
    let outs: Vec<Status> = (0..paths as u64)
        .into_par_iter()
        .map(|k| simulate_chain(model, start, seed, k, caps).map(|t| t.status))
        .collect::<Result<_>>()?;
    let mut absorbed = 0;
    let mut escaped = 0;
    let mut cap_hit = 0;
    let mut counts: std::collections::BTreeMap<Vec<u32>, usize> = Default::default();
    for st in &outs {
        match st {
            Status::Absorbed => absorbed += 1,
            Status::CapHit => cap_hit += 1,
            Status::Escaped { ray } => {
                escaped += 1;
                let key = ray[..resolution.min(ray.len())].to_vec();
                *counts.entry(key).or_default() += 1;
            }
        }
    }
    Ok(ChainSummary {
        paths,
        absorbed,
        escaped,
        cap_hit,
        exit_counts: counts.into_iter().map(|(k, v)| (path_string(&k), v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{Counts, Rule, TreeSpec};
    use crate::weights::Tail;
    use proptest::prelude::*;

    fn homog(p: usize, mode: RootMode) -> ChainModel {
        let (shape, _) = TreeSpec::homogeneous(p).shape().unwrap();
        ChainModel::new(Arc::new(shape), WeightSequence::linear(), mode)
    }

    fn single_ray(w: WeightSequence) -> ChainModel {
        let shape = Shape::from_rule(&Rule::Uniform(Counts::constant(1)));
        ChainModel::new(Arc::new(shape), w, RootMode::Absorbed)
    }

    #[test]
    fn absorption_examples() {
        let m = homog(2, RootMode::Absorbed);
        let s = default_schedule();
        let g = absorption_probability(&m, &[], &s, 1e-6).unwrap();
        assert!(g.converged && (g.mid() - 0.4).abs() < 1e-6);
        let g1 = absorption_probability(&m, &[2], &s, 1e-6).unwrap();
        assert!((g1.mid() - 0.2).abs() < 1e-6);
        let ray = single_ray(WeightSequence::linear());
        let g = absorption_probability(&ray, &[], &s, 1e-6).unwrap();
        assert!(g.converged && g.lower == 1.0);
    }

    #[test]
    fn classification_examples() {
        let s = default_schedule();
        let c = classify_transience(&homog(2, RootMode::Absorbed), &s, DEFAULT_TOL).unwrap();
        assert_eq!(c.verdict, Transience::Transient);
        let c = classify_transience(&single_ray(WeightSequence::linear()), &s, DEFAULT_TOL).unwrap();
        assert_eq!(c.verdict, Transience::Recurrent);
        let b = WeightSequence::new(vec![1.0], Some(Tail::Bounded { limit: 2.0, c: 1.0, rho: 0.5 })).unwrap();
        let c = classify_transience(&single_ray(b), &s, DEFAULT_TOL).unwrap();
        assert_eq!(c.verdict, Transience::Transient);
        assert!(c.absorb_root.is_none());
    }

    #[test]
    fn hitting_examples() {
        let s = default_schedule();
        let r = homog(2, RootMode::Reflected);
        let h = hitting_probability(&r, &[0, 1], &[1, 0, 0], &s, 1e-8).unwrap();
        assert!((h.mid() - 1.0 / 32.0).abs() < 1e-8);
        let a = homog(2, RootMode::Absorbed);
        let h = hitting_probability(&a, &[], &[1], &s, 1e-8).unwrap();
        assert!((h.mid() - 1.0 / 3.0).abs() < 1e-8);
        let h = hitting_probability(&a, &[1, 1], &[1, 1], &s, 1e-8).unwrap();
        assert_eq!((h.lower, h.upper), (1.0, 1.0));
    }

    #[test]
    fn f1_first_step() {
        let spec = TreeSpec::from_json(r#"{"kind":"finite","children":{"":2,"0":2}}"#).unwrap();
        let (shape, _) = spec.shape().unwrap();
        let m = ChainModel::new(Arc::new(shape), WeightSequence::explicit(&[1.0, 2.0, 4.0]).unwrap(), RootMode::Absorbed);
        let n = 20_000;
        let mut mean = 0.0;
        for k in 0..n {
            let t = simulate_chain(&m, &[0, 0], 3, k, Caps { max_time: Some(1e9), ..Default::default() }).unwrap();
            assert_eq!(t.first_jump.as_deref(), Some(&[0u32][..]));
            mean += t.first_hold / n as f64;
        }
        // Exp(1/2) holding time, sd of the mean = 2/sqrt(n)
        assert!((mean - 2.0).abs() < 4.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn root_first_jump_distribution() {
        let m = homog(2, RootMode::Absorbed);
        let n = 40_000u64;
        let mut cnt = [0usize; 4];
        for k in 0..n {
            let t = simulate_chain(&m, &[], 11, k, Caps { max_level: Some(3), ..Default::default() }).unwrap();
            match t.first_jump.unwrap().as_slice() {
                [] => cnt[0] += 1,
                [c] => cnt[1 + *c as usize] += 1,
                _ => unreachable!(),
            }
        }
        let sd = (0.25 * 0.75 / n as f64).sqrt();
        for c in cnt {
            assert!((c as f64 / n as f64 - 0.25).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn reflected_never_absorbed_and_replay() {
        let m = homog(2, RootMode::Reflected);
        for k in 0..200 {
            let t = simulate_chain(&m, &[], 5, k, Caps { max_level: Some(12), record: true, ..Default::default() }).unwrap();
            assert!(matches!(t.status, Status::Escaped { .. }));
            let again = simulate_chain(&m, &[], 5, k, Caps { max_level: Some(12), record: true, ..Default::default() }).unwrap();
            assert_eq!(t.steps, again.steps);
            for w in t.steps.windows(2) {
                let (a, b) = (&w[0].0, &w[1].0);
                assert!(a.len().abs_diff(b.len()) == 1);
                assert!(w[0].1 > 0.0);
            }
        }
        assert!(simulate_chain(&m, &[], 5, 0, Caps::default()).is_err());
    }

    #[test]
    fn empirical_absorption_matches_bracket() {
        let m = homog(2, RootMode::Absorbed);
        let n = 100_000;
        let s = simulate_many(&m, &[], 2024, n, Caps { max_level: Some(40), ..Default::default() }, 1).unwrap();
        let p = 0.4;
        let f = s.absorbed as f64 / n as f64;
        assert!((f - p).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f}");
        assert_eq!(s.cap_hit, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn strong_markov_and_mode_order(
            i in proptest::collection::vec(0u32..3, 0..4),
            k in proptest::collection::vec(0u32..3, 0..4),
            cut in 0usize..8,
        ) {
            // asymmetric: child 0 binary, children 1 and 2 ternary
            let rule = Rule::Split(vec![
                Rule::Uniform(Counts::constant(2)),
                Rule::Uniform(Counts::constant(3)),
                Rule::Uniform(Counts::constant(3)),
            ]);
            let shape = Arc::new(Shape::from_rule(&rule));
            let a = ChainModel::new(shape.clone(), WeightSequence::linear(), RootMode::Absorbed).walk(16).unwrap();
            let r = ChainModel::new(shape, WeightSequence::linear(), RootMode::Reflected).walk(16).unwrap();
            let clip = |p: &Vec<u32>| p.iter().map(|&c| c.min(1)).collect::<Vec<u32>>();
            let (i, k) = (clip(&i), clip(&k));
            let g = crate::tree::meet_level(&i, &k);
            // j on the geodesic: walk up from i to the meet, then down towards k
            let up_len = i.len() - g;
            let pos = cut % (up_len + k.len() - g + 1);
            let j: Vec<u32> = if pos <= up_len { i[..i.len() - pos].to_vec() } else { k[..g + pos - up_len].to_vec() };
            for w in [&a, &r] {
                let ik = w.hit(&i, &k).unwrap();
                let prod = w.hit(&i, &j).unwrap().mul(w.hit(&j, &k).unwrap());
                prop_assert!((ik.mid() - prod.mid()).abs() <= ik.width() + prod.width() + 1e-12);
            }
            prop_assert!(r.hit(&i, &k).unwrap().hi >= a.hit(&i, &k).unwrap().lo - 1e-12);
        }
    }
}
