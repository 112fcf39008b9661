//! The ten acceptance checks, shared by the `acceptance` test target and `report all`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chain::{default_schedule, ChainModel, DEFAULT_TOL};
use crate::error::Result;
use crate::fixtures::{fixture_dir, load_family, load_matrix, Model};
use crate::martin::{KernelMode, MartinContext};
use crate::matrix::{
    build_generator, finite_potential, harmonic_decomposition, hitting_matrices, inverse_residual, q_block, u_block,
    RootMode,
};
use crate::measure::{exit_measure, ray_regularity, Regularity, SimpleFn};
use crate::process::{occupation, BoundaryKernel, Cascade, PathStatus, Start};
use crate::stats::{binomial_z, ks_critical, ks_statistic};
use crate::tree::{build_tree, meet_level, BoundaryRay, NodeId, RootedTree, TreeSpec};
use crate::ultra::{
    minimal_tree_extension, random_dendrogram, u_boundary, ultrametric_generator, verify_ultrametric, H4Status,
};
use crate::walk::Walk;
use crate::weights::WeightSequence;

/// Seed for every random draw below.
pub const SEED: u64 = 20_240_611;

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const NAMES: [&str; 10] = [
    "inverse identity",
    "finite potential",
    "harmonic decomposition",
    "homogeneous closed forms",
    "martin kernel, two routes",
    "boundary kernel",
    "monte carlo vs kernel",
    "quasi-stationarity",
    "ultrametric pipeline",
    "qualitative fixtures",
];

/// Run one check; errors count as failures and are reported in `detail`.
pub fn run(id: usize) -> Outcome {
    let t0 = Instant::now();
    let r = match id {
        1 => inverse_identity(),
        2 => potential(),
        3 => decomposition(),
        4 => homogeneous(),
        5 => martin_routes(),
        6 => kernel(),
        7 => monte_carlo(),
        8 => quasi_stationary(),
        9 => ultrametric(),
        10 => qualitative(),
        _ => Ok((false, format!("no criterion {id}"))),
    };
    let seconds = t0.elapsed().as_secs_f64();
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    Outcome {
        id,
        name: NAMES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown"),
        pass,
        detail,
        seconds,
    }
}

pub fn run_all() -> Vec<Outcome> {
    (1..=10).map(run).collect()
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} [{}] {} ({:.2}s)",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Random finite tree with at most `max_nodes` nodes and random increasing weights.
pub fn random_finite_case<R: Rng>(rng: &mut R, max_nodes: usize) -> Result<(RootedTree, WeightSequence)> {
    let n = rng.random_range(2..=max_nodes);
    let mut counts = vec![0usize; n];
    let mut paths: Vec<Vec<u32>> = vec![vec![]];
    for _ in 1..n {
        let p = rng.random_range(0..paths.len());
        let mut c = paths[p].clone();
        c.push(counts[p] as u32);
        counts[p] += 1;
        paths.push(c);
    }
    let list: Vec<(&[u32], usize)> = paths
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(p, &c)| (p.as_slice(), c))
        .collect();
    let t = build_tree(&TreeSpec::finite(&list), 0)?;
    let mut ws = vec![rng.random_range(0.2..2.0)];
    for _ in 0..t.depth() {
        let last = *ws.last().unwrap();
        ws.push(last + rng.random_range(0.05..2.0));
    }
    Ok((t, WeightSequence::explicit(&ws)?))
}

fn random_trees() -> Result<Vec<(RootedTree, WeightSequence)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    (0..50).map(|_| random_finite_case(&mut rng, 200)).collect()
}

type Check = Result<(bool, String)>;

fn inverse_identity() -> Check {
    let trees = random_trees()?;
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for (t, w) in &trees {
        let all: Vec<NodeId> = t.ids().collect();
        worst = worst.max(inverse_residual(t, w, RootMode::Absorbed, &all)?);
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((worst <= 1e-10 && secs < 5.0, format!("max |(-Q)U - I| = {worst:.3e} over 50 trees in {secs:.2}s")))
}

fn potential() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    let (mut to_u, mut to_dense) = (0.0f64, 0.0f64);
    for (t, w) in random_trees()? {
        let full = finite_potential(&t, &w, t.depth())?;
        to_u = to_u.max((&full.v - u_block(&t, &w, &full.nodes, &full.nodes)).amax());
        let n = rng.random_range(0..=t.depth());
        let v = finite_potential(&t, &w, n)?;
        let q = build_generator(&t, &w, RootMode::Absorbed)?;
        let dense = (-q_block(&t, &q, &v.nodes))
            .try_inverse()
            .ok_or_else(|| crate::error::Error::new(crate::error::ErrorKind::Numeric, "cli", "singular -Q block"))?;
        to_dense = to_dense.max((&dense - &v.v).amax());
    }
    let f1 = Model::fixture("f1.json")?;
    let tree = build_tree(&f1.spec, 0)?;
    let v1 = finite_potential(&tree, &f1.weights, 1)?;
    let want = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 5.0]) / 3.0;
    let f1_err = (&v1.v - &want).amax();
    let pass = to_u <= 1e-10 && to_dense <= 1e-10 && f1_err <= 1e-15;
    Ok((pass, format!("|V - U| = {to_u:.3e}, |V - dense| = {to_dense:.3e}, F1 V(1) error {f1_err:.1e}")))
}

fn decomposition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 3);
    let mut rank_bad = 0;
    let (mut harm, mut via_d) = (0.0f64, 0.0f64);
    for (t, w) in random_trees()? {
        let n = rng.random_range(0..t.depth());
        let d = harmonic_decomposition(&t, &w, n, 1e-8)?;
        if d.rank != d.boundary.len() {
            rank_bad += 1;
        }
        let q = build_generator(&t, &w, RootMode::Absorbed)?;
        let qh = q_block(&t, &q, &d.potential.nodes) * &d.h;
        for (a, x) in d.potential.nodes.iter().enumerate() {
            if !d.boundary.contains(x) {
                harm = harm.max(qh.row(a).amax());
            }
        }
        let hm = hitting_matrices(&t, &w, n)?;
        via_d = via_d.max((&hm.d * u_block(&t, &w, &hm.mid, &hm.rows) - &d.h).amax());
    }
    let pass = rank_bad == 0 && harm <= 1e-10 && via_d <= 1e-10;
    Ok((pass, format!("rank mismatches {rank_bad}, max |QH| off B = {harm:.3e}, |H - DU| = {via_d:.3e}")))
}

fn homogeneous() -> Check {
    let t0 = Instant::now();
    let mut worst = [0.0f64; 5];
    for p in [2usize, 3] {
        let pf = p as f64;
        let m = Model::fixture(&format!("homog{p}.json"))?;
        let walk = Walk::new(m.shape.clone(), &m.weights, RootMode::Reflected, 64)?;
        let v = walk.green_diag(&[])?;
        let want = pf / ((pf + 1.0) * (pf - 1.0));
        worst[0] = worst[0].max(v.width()).max((v.mid() - want).abs());

        let model = ChainModel::new(m.shape.clone(), m.weights.clone(), RootMode::Reflected);
        let ctx = MartinContext::new(&model, 5, &default_schedule(), DEFAULT_TOL)?;
        let ray = BoundaryRay::new(vec![0, 0, 0, 0]);
        for mm in 0..=3usize {
            for n in 0..=mm {
                let mut i = vec![0u32; mm];
                if n < mm {
                    i[n] = 1;
                }
                let want = pf.powi(2 * n as i32 - mm as i32);
                let a = ctx.kernel(&i, &ray, KernelMode::Reflected)?.value;
                let b = ctx.kernel_series(&i, &ray)?;
                worst[1] = worst[1].max((a - want).abs()).max((b - want).abs());
            }
        }

        let nodes: Vec<Vec<u32>> = vec![vec![], vec![0], vec![2], vec![0, 1], vec![1, 0, 1], vec![2, 1, 1], vec![0, 0, 0]];
        for i in &nodes {
            for j in &nodes {
                let geod = i.len() + j.len() - 2 * meet_level(i, j);
                let h = walk.hit(i, j)?;
                let want = pf.powi(-(geod as i32));
                worst[2] = worst[2].max(h.width()).max((h.mid() - want).abs());
            }
        }

        let mu = ctx.measure().expect("transient");
        for ray in [[0u32, 0, 0, 0], [2, 1, 0, 1]] {
            for k in 1..=4usize {
                let want = 1.0 / ((pf + 1.0) * pf.powi(k as i32 - 1));
                worst[3] = worst[3].max((mu.mass_mid(&ray[..k])? - want).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    worst[4] = secs;
    let pass = worst[..4].iter().all(|&e| e <= 1e-6) && secs < 30.0;
    Ok((
        pass,
        format!(
            "V_rr {:.1e}, kernel {:.1e}, hitting {:.1e}, mass {:.1e}, {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

fn martin_routes() -> Check {
    let mut worst = 0.0f64;
    let mut count = 0;
    for name in ["homog2.json", "homog3.json", "asym.json"] {
        let m = Model::fixture(name)?;
        for mode in [RootMode::Absorbed, RootMode::Reflected] {
            let model = ChainModel::new(m.shape.clone(), m.weights.clone(), mode);
            let ctx = MartinContext::new(&model, 5, &default_schedule(), DEFAULT_TOL)?;
            let km = if mode == RootMode::Absorbed { KernelMode::Absorbed } else { KernelMode::Reflected };
            for ray in [vec![0, 1, 0, 1], vec![1, 2, 0, 1], vec![1, 0, 1, 0]] {
                let ray = BoundaryRay::new(ray);
                for i in [vec![], vec![0], vec![1, 2], vec![0, 0, 1], vec![1, 2, 0, 1], vec![0, 1, 0], vec![1, 0, 1, 1]] {
                    if m.shape.shape_at(&i).is_err() || m.shape.shape_at(ray.prefix()).is_err() {
                        continue;
                    }
                    let a = ctx.kernel(&i, &ray, km)?.value;
                    let b = ctx.kernel_series(&i, &ray)?;
                    worst = worst.max((a - b).abs());
                    count += 1;
                }
            }
        }
    }
    Ok((worst <= 1e-6 && count > 0, format!("max |ratio - series| = {worst:.3e} over {count} pairs")))
}

fn kernel_for(name: &str, mode: RootMode, res: usize) -> Result<BoundaryKernel> {
    let m = Model::fixture(name)?;
    let model = ChainModel::new(m.shape, m.weights, mode);
    Ok(BoundaryKernel::new(Arc::new(exit_measure(&model, res, &default_schedule(), DEFAULT_TOL)?)))
}

fn charged_atoms(k: &BoundaryKernel, level: usize) -> Result<Vec<Vec<u32>>> {
    let mu = k.measure();
    let mut out = Vec::new();
    for a in mu.atoms(level)? {
        if mu.mass(&a)?.lo > 0.0 {
            out.push(a);
        }
    }
    Ok(out)
}

fn kernel() -> Check {
    let mut green = 0.0f64;
    let mut quad = 0.0f64;
    let mut pairs = 0;
    for name in ["homog2.json", "asym.json"] {
        let k = kernel_for(name, RootMode::Absorbed, 5)?;
        let atoms = charged_atoms(&k, 3)?;
        for x in &atoms {
            for y in &atoms {
                if x != y {
                    green = green.max(k.green_residual(x, y)?);
                    pairs += 1;
                }
            }
        }
        // the quadrature route on a few pairs
        for (x, y) in atoms.iter().zip(atoms.iter().rev()).take(3) {
            if x != y {
                quad = quad.max((k.green_quadrature(x, y)? - k.green(x, y)?).abs());
            }
        }
    }

    let mut mass = 0.0f64;
    for mode in [RootMode::Absorbed, RootMode::Reflected] {
        let k = kernel_for("asym.json", mode, 4)?;
        let one = SimpleFn::constant(1.0).refine(k.measure(), 3)?;
        for t in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let want = k.total_mass(t)?;
            let g0 = k.g(&[], 0)?;
            let closed = if g0.is_infinite() { 1.0 } else { (-t / g0).exp() };
            mass = mass.max((want - closed).abs());
            for (_, v) in k.semigroup(t, &one)?.values {
                mass = mass.max((v - want).abs());
            }
            for (_, v) in k.semigroup_by_kernel(t, &one)?.values {
                mass = mass.max((v - want).abs());
            }
        }
    }

    let k = kernel_for("homog2.json", RootMode::Absorbed, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 6);
    let mut bad = 0;
    let mut tested = 0;
    let ray = |rng: &mut ChaCha8Rng| {
        let mut r = vec![rng.random_range(0..3u32)];
        r.extend((0..5).map(|_| rng.random_range(0..2u32)));
        r
    };
    while tested < 10_000 {
        let (x, y, z) = (ray(&mut rng), ray(&mut rng), ray(&mut rng));
        if x == y || y == z || x == z {
            continue;
        }
        let t = rng.random_range(0.01..10.0);
        let pxy = k.p(t, &x, &y)?;
        if pxy < k.p(t, &x, &z)?.min(k.p(t, &z, &y)?) * (1.0 - 1e-12) {
            bad += 1;
        }
        tested += 1;
    }
    let pass = green <= 1e-10 && mass <= 1e-12 && bad == 0 && quad <= 1e-6;
    Ok((
        pass,
        format!(
            "green residual {green:.2e} on {pairs} pairs (quadrature {quad:.1e}), total mass {mass:.2e}, ultrametric violations {bad}/{tested}"
        ),
    ))
}

fn monte_carlo() -> Check {
    let t0 = Instant::now();
    let k = kernel_for("homog2.json", RootMode::Absorbed, 4)?;
    let c = Cascade::new(k.clone(), 4)?;
    let xi = vec![0u32, 1, 0, 1];
    let n = 100_000;
    let paths = c.simulate_many(&Start::Ray(xi.clone()), f64::INFINITY, 7, n)?;
    let crit = ks_critical(n, 0.01);

    let g0 = k.g(&xi, 0)?;
    let life: Vec<f64> = paths.iter().map(|p| p.end).collect();
    let d_life = ks_statistic(&life, |x| 1.0 - (-x / g0).exp());
    let rate = k.exit_rate(1, &xi)?;
    let exits: Vec<f64> = paths.iter().filter_map(|p| p.exit_time(1)).collect();
    let d_exit = ks_statistic(&exits, |x| 1.0 - (-rate * x).exp());

    let mut zmax = 0.0f64;
    for t in [0.25, 0.5, 1.0] {
        let occ = occupation(&paths, t, 1);
        for a in 0..3u32 {
            let p = k.cylinder_prob(t, &xi, &[a])?;
            let hits = occ.get(&vec![a]).copied().unwrap_or(0);
            zmax = zmax.max(binomial_z(hits, n, p).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = (g0 - 5.0 / 3.0).abs() < 1e-12
        && (rate - 1.2).abs() < 1e-12
        && exits.len() == n
        && d_life < crit
        && d_exit < crit
        && zmax < 4.0
        && secs < 60.0;
    Ok((
        pass,
        format!(
            "KS lifetime {d_life:.4} exit {d_exit:.4} (1% critical {crit:.4}), max |z| occupancy {zmax:.2}, {secs:.1}s"
        ),
    ))
}

fn quasi_stationary() -> Check {
    let k = kernel_for("homog2.json", RootMode::Absorbed, 4)?;
    let c = Cascade::new(k.clone(), 4)?;
    let n = 100_000;
    let paths = c.simulate_many(&Start::Mu, 2.0, 8, n)?;
    let alive: Vec<&[u32]> = paths.iter().filter_map(|p| p.at(1.0)).collect();
    let occ = {
        let mut m = std::collections::BTreeMap::<Vec<u32>, usize>::new();
        for r in &alive {
            *m.entry(r[..2].to_vec()).or_default() += 1;
        }
        m
    };
    let mut zmax = 0.0f64;
    for a in k.measure().atoms(2)? {
        let p = k.measure().mass_mid(&a)?;
        let hits = occ.get(&a).copied().unwrap_or(0);
        zmax = zmax.max(binomial_z(hits, alive.len(), p).abs());
    }
    // survivors should number about n e^{-1/G_0}
    let zs = binomial_z(alive.len(), n, k.total_mass(1.0)?).abs();
    let pass = zmax < 4.0 && zs < 4.0 && paths.iter().all(|p| p.status == PathStatus::Killed || p.end == 2.0);
    Ok((pass, format!("{} survivors, max |z| per cylinder {zmax:.2}, survival |z| {zs:.2}", alive.len())))
}

fn ultrametric() -> Check {
    let m = load_matrix(&fixture_dir().join("f4.csv"))?;
    let ext = minimal_tree_extension(&m)?;
    let g = ultrametric_generator(&m, &ext)?;
    let inv = m.u.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(3, 3, f64::NAN));
    let f4_err = (g.dense() + inv).amax();
    let f4_sym = g.certificate.asymmetry;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 9);
    let (mut round, mut resid, mut support, mut tilde) = (0, 0.0f64, 0, 0);
    for _ in 0..50 {
        let m = random_dendrogram(&mut rng, 100);
        let ext = minimal_tree_extension(&m)?;
        if ext.restriction() != m.u {
            round += 1;
        }
        let g = ultrametric_generator(&m, &ext)?;
        resid = resid.max(g.certificate.inverse_residual);
        // Q-support must match 𝒱*(i)
        for i in 0..m.len() {
            let mut want = ext.u_neighbors(i);
            want.push(i);
            want.sort_unstable();
            let got: Vec<usize> = g.rows[i].iter().filter(|e| e.1 != 0.0).map(|e| e.0).collect();
            if got != want {
                support += 1;
            }
        }
        if verify_ultrametric(&ext.u_tilde_matrix())?.is_some() {
            tilde += 1;
        }
    }
    let pass = f4_err <= 1e-10 && f4_sym == 0.0 && round == 0 && resid <= 1e-10 && support == 0 && tilde == 0;
    Ok((
        pass,
        format!(
            "F4 |Q + U^-1| = {f4_err:.1e} asymmetry {f4_sym}, 50 dendrograms: round-trip failures {round}, residual {resid:.2e}, support mismatches {support}, non-ultrametric extensions {tilde}"
        ),
    ))
}

fn qualitative() -> Check {
    let fig = Model::fixture("figure2.json")?;
    let model = ChainModel::new(fig.shape.clone(), fig.weights.clone(), RootMode::Absorbed);
    let rep = ray_regularity(&model, &BoundaryRay::new(vec![]), 24, DEFAULT_TOL)?;
    let spine_ok = rep.verdict == Regularity::Irregular && rep.accessible;

    let one = u_boundary(&load_family(&fixture_dir().join("word1.json"))?, 2, 40, 1e-6)?;
    let one_ok = !one.empty && one.h4 == H4Status::Certified && one.lemma_consistent && one.u_mass > 1.0 - 1e-6;
    let two = u_boundary(&load_family(&fixture_dir().join("word2.json"))?, 2, 30, 1e-6)?;
    // the flag is raised, and the cross-report names the disagreement with H4
    let two_ok = two.empty && two.u_mass == 0.0 && !two.note.is_empty();
    Ok((
        spine_ok && one_ok && two_ok,
        format!(
            "spine {:?} accessible {}; word family 1 nonempty {} (U-mass {:.6}); word family 2 empty {} (H4 {:?}, consistent {})",
            rep.verdict, rep.accessible, !one.empty, one.u_mass, two.empty, two.h4, two.lemma_consistent
        ),
    ))
}
