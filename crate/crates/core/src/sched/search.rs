//! Plan search: differential evolution over split-point genomes and an
//! exhaustive enumerator for small instances.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{better, DeConfig, Problem, SchedulePlan};
use crate::error::{Error, Result};

/// Largest genome space `solve_exhaustive` will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

struct Memo<'p, 'a> {
    problem: &'p Problem<'a>,
    cache: HashMap<Vec<usize>, f64>,
    best: Option<SchedulePlan>,
}

impl<'p, 'a> Memo<'p, 'a> {
    fn new(problem: &'p Problem<'a>) -> Self {
        Memo {
            problem,
            cache: HashMap::new(),
            best: None,
        }
    }

    fn eval(&mut self, genome: Vec<usize>) -> Result<f64> {
        if let Some(&f) = self.cache.get(&genome) {
            return Ok(f);
        }
        let plan = self.problem.plan(&genome)?;
        let f = plan.objective;
        if self.best.as_ref().is_none_or(|b| better(&plan, b)) {
            self.best = Some(plan);
        }
        self.cache.insert(genome, f);
        Ok(f)
    }

    fn finish(self) -> SchedulePlan {
        let mut plan = self.best.expect("at least one evaluation");
        plan.flags.forced_local = forced_local(self.problem);
        plan
    }
}

/// The robot computes every operator under every genome when even the
/// all-server genome leaves it with everything.
fn forced_local(problem: &Problem) -> bool {
    let (x, _) = problem.decode(&problem.all_server());
    x.iter()
        .zip(problem.graph.layers())
        .all(|(x, l)| x.len() == l.operator_count)
}

const SPLIT_STEPS: usize = 16;

/// Hybrid starting points: the robot takes the same leading fraction of every
/// layer before a cut and the server the rest of the model.
fn split_seeds(problem: &Problem) -> Vec<Vec<usize>> {
    let bounds = problem.gene_bounds();
    let mut out = Vec::new();
    for step in 1..SPLIT_STEPS {
        let frac = step as f64 / SPLIT_STEPS as f64;
        for cut in 1..=bounds.len() {
            let g: Vec<usize> = bounds
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| {
                    if i < cut {
                        round_gene(frac * hi as f64, (lo, hi))
                    } else {
                        lo
                    }
                })
                .collect();
            out.push(g);
        }
    }
    out
}

const POLISH_STEPS: f64 = 32.0;
const POLISH_PASSES: usize = 50;

/// Local search from the best genome found. A move shifts the split fraction
/// of a contiguous run of layers together, which keeps halos between
/// neighbouring layers consistent where single-gene moves cannot.
fn polish(memo: &mut Memo, bounds: &[(usize, usize)]) -> Result<()> {
    let dims = bounds.len();
    for _ in 0..POLISH_PASSES {
        let start = memo.best.as_ref().expect("evaluated").genome.clone();
        let mut best = memo.eval(start.clone())?;
        let mut next = None;
        for i in 0..dims {
            for j in i..dims {
                for step in [-2.0, -1.0, 1.0, 2.0] {
                    let mut g = start.clone();
                    for k in i..=j {
                        let (lo, hi) = bounds[k];
                        g[k] = round_gene(g[k] as f64 + step * hi as f64 / POLISH_STEPS, (lo, hi));
                    }
                    if g == start {
                        continue;
                    }
                    let f = memo.eval(g.clone())?;
                    if f < best {
                        best = f;
                        next = Some(g);
                    }
                }
            }
        }
        if next.is_none() {
            break;
        }
    }
    Ok(())
}

fn round_gene(v: f64, (lo, hi): (usize, usize)) -> usize {
    (v.round().max(lo as f64).min(hi as f64)) as usize
}

/// Differential evolution (rand/1/bin) over real-valued genes rounded to split
/// points. The population starts with all-local, all-server and every
/// pipeline cut, so the result is never worse than any of them, and is filled
/// up with the best proportional splits before random members.
pub fn solve_de(problem: &Problem, config: &DeConfig) -> Result<SchedulePlan> {
    config.validate()?;
    let bounds = problem.gene_bounds();
    let dims = bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut memo = Memo::new(problem);

    let mut seeds: Vec<Vec<usize>> = vec![problem.all_local(), problem.all_server()];
    for k in 1..dims {
        seeds.push(problem.pp_cut(k));
    }
    seeds.dedup();
    for g in &seeds {
        memo.eval(g.clone())?;
    }
    let size = config.population.max(seeds.len());
    let mut ranked = Vec::new();
    for g in split_seeds(problem) {
        let f = memo.eval(g.clone())?;
        ranked.push((f, g));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
    for (_, g) in ranked {
        if seeds.len() >= size {
            break;
        }
        if !seeds.contains(&g) {
            seeds.push(g);
        }
    }
    let mut pop: Vec<Vec<f64>> = seeds
        .iter()
        .map(|g| g.iter().map(|&v| v as f64).collect())
        .collect();
    while pop.len() < size {
        pop.push(
            bounds
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo as f64 - 0.5..=hi as f64 + 0.5))
                .collect(),
        );
    }
    let decode = |v: &[f64]| -> Vec<usize> {
        v.iter()
            .zip(&bounds)
            .map(|(&x, &b)| round_gene(x, b))
            .collect()
    };
    let mut fitness = Vec::with_capacity(size);
    for v in &pop {
        fitness.push(memo.eval(decode(v))?);
    }
    if dims == 0 || bounds.iter().all(|(lo, hi)| lo == hi) {
        return Ok(memo.finish());
    }

    for _ in 0..config.generations {
        for j in 0..size {
            let picks = sample(&mut rng, size - 1, 3);
            let idx: Vec<usize> = picks
                .iter()
                .map(|p| if p >= j { p + 1 } else { p })
                .collect();
            let (a, b, c) = (&pop[idx[0]], &pop[idx[1]], &pop[idx[2]]);
            let forced = rng.gen_range(0..dims);
            let trial: Vec<f64> = (0..dims)
                .map(|d| {
                    let (lo, hi) = bounds[d];
                    if d == forced || rng.gen::<f64>() < config.crossover {
                        let v = a[d] + config.weight * (b[d] - c[d]);
                        v.clamp(lo as f64 - 0.5, hi as f64 + 0.5)
                    } else {
                        pop[j][d]
                    }
                })
                .collect();
            let f = memo.eval(decode(&trial))?;
            if f <= fitness[j] {
                pop[j] = trial;
                fitness[j] = f;
            }
        }
    }
    polish(&mut memo, &bounds)?;
    Ok(memo.finish())
}

/// Every genome, best by objective with the same tie-break as the solver.
pub fn solve_exhaustive(problem: &Problem) -> Result<SchedulePlan> {
    let bounds = problem.gene_bounds();
    let space: u128 = bounds
        .iter()
        .map(|&(lo, hi)| (hi - lo + 1) as u128)
        .product();
    if space > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchSpace(space));
    }
    let mut memo = Memo::new(problem);
    let mut g: Vec<usize> = bounds.iter().map(|b| b.0).collect();
    loop {
        memo.eval(g.clone())?;
        let mut d = 0;
        loop {
            if d == g.len() {
                let mut plan = memo.finish();
                plan.flags.exhaustive = true;
                return Ok(plan);
            }
            if g[d] < bounds[d].1 {
                g[d] += 1;
                break;
            }
            g[d] = bounds[d].0;
            d += 1;
        }
    }
}
