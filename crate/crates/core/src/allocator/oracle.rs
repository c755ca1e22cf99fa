use super::{AllocError, AllocationPlan, FitnessWeights, LeaseRequest, PoolNode, Problem};

/// Largest search space the oracle will enumerate.
pub const ORACLE_LIMIT: u128 = 10_000_000;

/// Exhaustive search over every gene vector, in lexicographic order. Each
/// vector is repaired before scoring; the first maximum wins, which is the
/// lexicographically smallest optimal vector.
pub fn oracle_optimal(
    pool: &[PoolNode],
    requests: &[LeaseRequest],
    weights: &FitnessWeights,
) -> Result<AllocationPlan, AllocError> {
    let problem = Problem::new(pool, requests, weights)?;
    let n = problem.pool_len();
    let base = problem.request_count() + 1;
    let space = (base as u128)
        .checked_pow(n as u32)
        .unwrap_or(u128::MAX);
    if space > ORACLE_LIMIT {
        return Err(AllocError::InstanceTooLarge(space));
    }

    let mut genes = vec![0usize; n];
    let mut scratch = vec![0usize; n];
    let mut best_genes = genes.clone();
    let mut best = i64::MIN;
    loop {
        scratch.copy_from_slice(&genes);
        problem.repair(&mut scratch);
        let score = problem.score(&scratch);
        if score > best {
            best = score;
            best_genes.copy_from_slice(&scratch);
        }
        // odometer, last position fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(problem.plan(&best_genes, 0));
            }
            pos -= 1;
            genes[pos] += 1;
            if genes[pos] < base {
                break;
            }
            genes[pos] = 0;
        }
    }
}
