use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AllocError, AllocationPlan, Chromosome, FitnessWeights, GaParams, Genes, LeaseRequest, PoolNode, Problem};

/// Draws one gene vector with every gene uniform over "unassigned" plus each
/// request. `evolve` builds its initial population with exactly
/// `population` calls to this on a fresh `ChaCha8Rng::seed_from_u64(seed)`.
pub fn random_chromosome<R: Rng>(rng: &mut R, pool_len: usize, requests: &[LeaseRequest]) -> Chromosome {
    let mut ids: Vec<_> = requests.iter().map(|r| r.request_id).collect();
    ids.sort();
    Chromosome {
        genes: (0..pool_len)
            .map(|_| {
                let g = rng.gen_range(0..=ids.len());
                (g > 0).then(|| ids[g - 1])
            })
            .collect(),
    }
}

struct Individual {
    genes: Genes,
    fitness: i64,
}

fn random_genes<R: Rng>(rng: &mut R, len: usize, requests: usize) -> Genes {
    (0..len).map(|_| rng.gen_range(0..=requests)).collect()
}

fn tournament<'p, R: Rng>(rng: &mut R, pop: &'p [Individual], size: usize) -> &'p Individual {
    let mut best = &pop[rng.gen_range(0..pop.len())];
    for _ in 1..size {
        let challenger = &pop[rng.gen_range(0..pop.len())];
        if challenger.fitness > best.fitness {
            best = challenger;
        }
    }
    best
}

/// Genetic search: tournament selection, uniform crossover, per-gene
/// mutation, elitism and repair of every offspring. Deterministic in
/// `(pool, requests, params, weights)`; the PRNG is ChaCha8 seeded from
/// `params.seed`.
pub fn evolve(
    pool: &[PoolNode],
    requests: &[LeaseRequest],
    params: &GaParams,
    weights: &FitnessWeights,
) -> Result<AllocationPlan, AllocError> {
    params.validate()?;
    let problem = Problem::new(pool, requests, weights)?;
    if problem.request_count() == 0 || problem.pool_len() == 0 {
        return Ok(AllocationPlan::default());
    }
    let m = problem.request_count();
    let n = problem.pool_len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let evaluated = |mut genes: Genes| {
        problem.repair(&mut genes);
        let fitness = problem.score(&genes);
        Individual { genes, fitness }
    };

    let mut population: Vec<Individual> = (0..params.population)
        .map(|_| evaluated(random_genes(&mut rng, n, m)))
        .collect();

    // The empty assignment is always a candidate, so the result never scores
    // below zero.
    let mut best = evaluated(vec![0; n]);
    for ind in &population {
        if ind.fitness > best.fitness {
            best = Individual {
                genes: ind.genes.clone(),
                fitness: ind.fitness,
            };
        }
    }

    let mut generations_run = 0;
    let mut stall = 0;
    while generations_run < params.generations {
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| population[b].fitness.cmp(&population[a].fitness));

        let mut next: Vec<Individual> = order[..params.elitism]
            .iter()
            .map(|&i| Individual {
                genes: population[i].genes.clone(),
                fitness: population[i].fitness,
            })
            .collect();

        while next.len() < params.population {
            let a = tournament(&mut rng, &population, params.tournament_size);
            let b = tournament(&mut rng, &population, params.tournament_size);
            let (mut c1, mut c2) = (a.genes.clone(), b.genes.clone());
            if rng.gen_bool(params.crossover_rate) {
                for i in 0..n {
                    if rng.gen_bool(params.gene_swap_prob) {
                        std::mem::swap(&mut c1[i], &mut c2[i]);
                    }
                }
            }
            for child in [&mut c1, &mut c2] {
                for gene in child.iter_mut() {
                    if rng.gen_bool(params.mutation_rate_per_gene) {
                        *gene = rng.gen_range(0..=m);
                    }
                }
            }
            next.push(evaluated(c1));
            if next.len() < params.population {
                next.push(evaluated(c2));
            }
        }

        population = next;
        generations_run += 1;

        let mut improved = false;
        for ind in &population {
            if ind.fitness > best.fitness {
                best = Individual {
                    genes: ind.genes.clone(),
                    fitness: ind.fitness,
                };
                improved = true;
            }
        }
        if improved {
            stall = 0;
        } else {
            stall += 1;
            if params.stall_limit > 0 && stall >= params.stall_limit {
                break;
            }
        }
    }

    Ok(problem.plan(&best.genes, generations_run))
}
