//! Node-to-request allocation: a genetic search with a repair operator, and
//! an exhaustive oracle for small instances.
//!
//! A chromosome has one gene per pool node (ascending node id). Each gene
//! names the request the node serves, or nothing. Disjointness of the
//! resulting node sets therefore holds by construction; repair only fixes
//! counts and class eligibility.

mod ga;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{NodeClass, NodeId, RequestId};

pub use ga::{evolve, random_chromosome};
pub use oracle::{oracle_optimal, ORACLE_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseRequest {
    pub request_id: RequestId,
    pub user_token: String,
    pub node_count: u32,
    pub min_class: NodeClass,
    pub priority: u8,
    pub duration_hours: u32,
}

impl LeaseRequest {
    pub fn new(id: u64, node_count: u32, min_level: u8, priority: u8) -> Self {
        Self {
            request_id: RequestId(id),
            user_token: String::new(),
            node_count,
            min_class: NodeClass::level(min_level),
            priority,
            duration_hours: 1,
        }
    }
}

/// A node offered to the allocator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolNode {
    pub node_id: NodeId,
    pub class: NodeClass,
    /// Currently powered off; assigning it costs a boot.
    pub powered_off: bool,
}

impl PoolNode {
    pub fn new(id: u64, level: u8, powered_off: bool) -> Self {
        Self {
            node_id: NodeId(id),
            class: NodeClass::level(level),
            powered_off,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Chromosome {
    pub genes: Vec<Option<RequestId>>,
}

impl Chromosome {
    pub fn empty(len: usize) -> Self {
        Self {
            genes: vec![None; len],
        }
    }

    pub fn from_ids(ids: &[u64]) -> Self {
        Self {
            genes: ids
                .iter()
                .map(|&g| (g != 0).then_some(RequestId(g)))
                .collect(),
        }
    }
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaParams {
    pub population: usize,
    pub generations: u32,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub gene_swap_prob: f64,
    pub mutation_rate_per_gene: f64,
    pub elitism: usize,
    /// Stop after this many generations without improving the best fitness.
    /// Zero disables early stopping.
    pub stall_limit: u32,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 64,
            generations: 200,
            tournament_size: 3,
            crossover_rate: 0.9,
            gene_swap_prob: 0.5,
            mutation_rate_per_gene: 0.02,
            elitism: 2,
            stall_limit: 50,
            seed: default_seed(),
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), AllocError> {
        let bad = |m: &str| Err(AllocError::InvalidParams(m.to_string()));
        if self.population < 2 {
            return bad("population must be >= 2");
        }
        if self.elitism >= self.population {
            return bad("elitism must be < population");
        }
        if self.tournament_size < 1 {
            return bad("tournament_size must be >= 1");
        }
        for (name, rate) in [
            ("crossover_rate", self.crossover_rate),
            ("gene_swap_prob", self.gene_swap_prob),
            ("mutation_rate_per_gene", self.mutation_rate_per_gene),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessWeights {
    /// Per satisfied request, multiplied by its priority.
    pub w_sat: i64,
    /// Per class level of surplus on a satisfied request.
    pub w_over: i64,
    /// Per assigned node that is currently off.
    pub w_power: i64,
    /// Per node assigned to a request that stays unsatisfied.
    pub w_dangle: i64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        Self {
            w_sat: 100,
            w_over: 1,
            w_power: 2,
            w_dangle: 1,
        }
    }
}

impl FitnessWeights {
    pub fn validate(&self) -> Result<(), AllocError> {
        if self.w_sat < 0 || self.w_over < 0 || self.w_power < 0 || self.w_dangle < 0 {
            return Err(AllocError::InvalidParams("weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub assignments: BTreeMap<RequestId, BTreeSet<NodeId>>,
    pub fitness: i64,
    pub satisfied: BTreeSet<RequestId>,
    pub generations_run: u32,
}

impl AllocationPlan {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.assignments.values().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("chromosome has {got} genes, pool has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("gene names unknown request {0}")]
    UnknownRequestId(RequestId),
    #[error("invalid request {0}: {1}")]
    InvalidRequest(RequestId, String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("instance too large for exhaustive search: {0} gene vectors")]
    InstanceTooLarge(u128),
}

impl AllocError {
    pub fn code(&self) -> &'static str {
        match self {
            AllocError::LengthMismatch { .. } => "LengthMismatch",
            AllocError::UnknownRequestId(_) => "UnknownRequestId",
            AllocError::InvalidRequest(..) => "InvalidRequest",
            AllocError::InvalidParams(_) => "InvalidParams",
            AllocError::InstanceTooLarge(_) => "InstanceTooLarge",
        }
    }
}

/// Pool and requests in canonical order with genes encoded as indices:
/// 0 = unassigned, j + 1 = `requests[j]`. Requests are sorted by id, so index
/// order agrees with id order.
pub(crate) struct Problem<'a> {
    pool: Vec<&'a PoolNode>,
    requests: Vec<&'a LeaseRequest>,
    weights: &'a FitnessWeights,
}

pub(crate) type Genes = Vec<usize>;

impl<'a> Problem<'a> {
    pub(crate) fn new(
        pool: &'a [PoolNode],
        requests: &'a [LeaseRequest],
        weights: &'a FitnessWeights,
    ) -> Result<Self, AllocError> {
        weights.validate()?;
        let mut pool: Vec<_> = pool.iter().collect();
        pool.sort_by_key(|n| n.node_id);
        if pool.windows(2).any(|w| w[0].node_id == w[1].node_id) {
            return Err(AllocError::InvalidParams("duplicate node in pool".into()));
        }
        let mut requests: Vec<_> = requests.iter().collect();
        requests.sort_by_key(|r| r.request_id);
        for w in requests.windows(2) {
            if w[0].request_id == w[1].request_id {
                return Err(AllocError::InvalidRequest(
                    w[0].request_id,
                    "duplicate request id".into(),
                ));
            }
        }
        for r in &requests {
            if r.node_count < 1 {
                return Err(AllocError::InvalidRequest(
                    r.request_id,
                    "node_count must be >= 1".into(),
                ));
            }
        }
        Ok(Self {
            pool,
            requests,
            weights,
        })
    }

    pub(crate) fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub(crate) fn request_count(&self) -> usize {
        self.requests.len()
    }

    pub(crate) fn encode(&self, chromosome: &Chromosome) -> Result<Genes, AllocError> {
        if chromosome.genes.len() != self.pool.len() {
            return Err(AllocError::LengthMismatch {
                expected: self.pool.len(),
                got: chromosome.genes.len(),
            });
        }
        chromosome
            .genes
            .iter()
            .map(|g| match g {
                None => Ok(0),
                Some(id) => self
                    .requests
                    .binary_search_by_key(id, |r| r.request_id)
                    .map(|j| j + 1)
                    .map_err(|_| AllocError::UnknownRequestId(*id)),
            })
            .collect()
    }

    pub(crate) fn decode(&self, genes: &[usize]) -> Chromosome {
        Chromosome {
            genes: genes
                .iter()
                .map(|&g| (g > 0).then(|| self.requests[g - 1].request_id))
                .collect(),
        }
    }

    fn surplus(&self, node: usize, gene: usize) -> i64 {
        i64::from(self.pool[node].class.level) - i64::from(self.requests[gene - 1].min_class.level)
    }

    /// Clears ineligible genes, then trims over-filled requests dropping the
    /// largest surplus first (ties: largest node id first).
    pub(crate) fn repair(&self, genes: &mut [usize]) {
        for (i, g) in genes.iter_mut().enumerate() {
            if *g > 0 && self.pool[i].class < self.requests[*g - 1].min_class {
                *g = 0;
            }
        }
        for j in 1..=self.requests.len() {
            let k = self.requests[j - 1].node_count as usize;
            let mut members: Vec<usize> = (0..genes.len()).filter(|&i| genes[i] == j).collect();
            if members.len() <= k {
                continue;
            }
            members.sort_by(|&a, &b| {
                self.surplus(b, j)
                    .cmp(&self.surplus(a, j))
                    .then(self.pool[b].node_id.cmp(&self.pool[a].node_id))
            });
            let excess = members.len() - k;
            for &i in &members[..excess] {
                genes[i] = 0;
            }
        }
    }

    fn counts(&self, genes: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.requests.len() + 1];
        for &g in genes {
            counts[g] += 1;
        }
        counts
    }

    fn is_satisfied(&self, counts: &[usize], gene: usize) -> bool {
        counts[gene] == self.requests[gene - 1].node_count as usize
    }

    /// Score of an already-repaired gene vector.
    pub(crate) fn score(&self, genes: &[usize]) -> i64 {
        let w = self.weights;
        let counts = self.counts(genes);
        let mut score = 0i64;
        for j in 1..=self.requests.len() {
            if self.is_satisfied(&counts, j) {
                score += w.w_sat * i64::from(self.requests[j - 1].priority);
            }
        }
        for (i, &g) in genes.iter().enumerate() {
            if g == 0 {
                continue;
            }
            if self.pool[i].powered_off {
                score -= w.w_power;
            }
            if self.is_satisfied(&counts, g) {
                score -= w.w_over * self.surplus(i, g);
            } else {
                score -= w.w_dangle;
            }
        }
        score
    }

    pub(crate) fn evaluate(&self, genes: &[usize]) -> i64 {
        let mut repaired = genes.to_vec();
        self.repair(&mut repaired);
        self.score(&repaired)
    }

    /// Builds a plan from a repaired gene vector, dropping partial
    /// assignments of unsatisfied requests.
    pub(crate) fn plan(&self, genes: &[usize], generations_run: u32) -> AllocationPlan {
        let counts = self.counts(genes);
        let cleaned: Genes = genes
            .iter()
            .map(|&g| if g > 0 && self.is_satisfied(&counts, g) { g } else { 0 })
            .collect();
        let mut plan = AllocationPlan {
            fitness: self.score(&cleaned),
            generations_run,
            ..AllocationPlan::default()
        };
        for (i, &g) in cleaned.iter().enumerate() {
            if g > 0 {
                let id = self.requests[g - 1].request_id;
                plan.assignments
                    .entry(id)
                    .or_default()
                    .insert(self.pool[i].node_id);
                plan.satisfied.insert(id);
            }
        }
        plan
    }
}

/// Fitness of a chromosome, judged on its repaired form.
pub fn fitness(
    chromosome: &Chromosome,
    pool: &[PoolNode],
    requests: &[LeaseRequest],
    weights: &FitnessWeights,
) -> Result<i64, AllocError> {
    let problem = Problem::new(pool, requests, weights)?;
    let genes = problem.encode(chromosome)?;
    Ok(problem.evaluate(&genes))
}

pub fn repair(
    chromosome: &Chromosome,
    pool: &[PoolNode],
    requests: &[LeaseRequest],
) -> Result<Chromosome, AllocError> {
    let weights = FitnessWeights::default();
    let problem = Problem::new(pool, requests, &weights)?;
    let mut genes = problem.encode(chromosome)?;
    problem.repair(&mut genes);
    Ok(problem.decode(&genes))
}


#[cfg(test)]
mod tests {
    use super::fixtures::worked_instance;
    use super::*;

    /// Straight transcription of the scoring formula over a raw, already
    /// feasible chromosome; kept independent of `Problem`.
    fn hand_score(genes: &[u64], pool: &[PoolNode], reqs: &[LeaseRequest], w: &FitnessWeights) -> i64 {
        let mut score = 0;
        for r in reqs {
            let members: Vec<_> = pool
                .iter()
                .zip(genes)
                .filter(|(_, &g)| g == r.request_id.0)
                .map(|(n, _)| n)
                .collect();
            let sat = members.len() == r.node_count as usize
                && members.iter().all(|n| n.class >= r.min_class);
            for n in &members {
                if n.powered_off {
                    score -= w.w_power;
                }
                if sat {
                    score -= w.w_over * (n.class.level as i64 - r.min_class.level as i64);
                } else {
                    score -= w.w_dangle;
                }
            }
            if sat {
                score += w.w_sat * r.priority as i64;
            }
        }
        score
    }

    #[test]
    fn worked_instance_scores_298() {
        let (pool, reqs) = worked_instance();
        let w = FitnessWeights::default();
        let genes = [2, 1, 1];
        let c = Chromosome::from_ids(&genes);
        assert_eq!(hand_score(&genes, &pool, &reqs, &w), 298);
        assert_eq!(fitness(&c, &pool, &reqs, &w).unwrap(), 298);
    }

    #[test]
    fn empty_assignment_scores_zero() {
        let (pool, reqs) = worked_instance();
        let c = Chromosome::empty(3);
        assert_eq!(fitness(&c, &pool, &reqs, &FitnessWeights::default()).unwrap(), 0);
    }

    #[test]
    fn single_dangling_node() {
        let (pool, reqs) = worked_instance();
        let genes = [0, 1, 0];
        let c = Chromosome::from_ids(&genes);
        let w = FitnessWeights::default();
        assert_eq!(hand_score(&genes, &pool, &reqs, &w), -1);
        assert_eq!(fitness(&c, &pool, &reqs, &w).unwrap(), -1);
    }

    #[test]
    fn fitness_errors() {
        let (pool, reqs) = worked_instance();
        let w = FitnessWeights::default();
        assert_eq!(
            fitness(&Chromosome::empty(2), &pool, &reqs, &w),
            Err(AllocError::LengthMismatch {
                expected: 3,
                got: 2
            })
        );
        assert_eq!(
            fitness(&Chromosome::from_ids(&[0, 9, 0]), &pool, &reqs, &w),
            Err(AllocError::UnknownRequestId(RequestId(9)))
        );
    }

    #[test]
    fn repair_drops_largest_surplus_first() {
        let pool = vec![
            PoolNode::new(1, 2, false),
            PoolNode::new(4, 3, false),
            PoolNode::new(5, 3, false),
        ];
        let reqs = vec![LeaseRequest::new(2, 1, 2, 1)];
        let out = repair(&Chromosome::from_ids(&[2, 2, 2]), &pool, &reqs).unwrap();
        assert_eq!(out, Chromosome::from_ids(&[2, 0, 0]));
    }

    #[test]
    fn repair_tie_breaks_on_highest_node_id() {
        let pool = vec![
            PoolNode::new(1, 3, false),
            PoolNode::new(2, 3, false),
            PoolNode::new(3, 3, false),
        ];
        let reqs = vec![LeaseRequest::new(1, 2, 0, 1)];
        let out = repair(&Chromosome::from_ids(&[1, 1, 1]), &pool, &reqs).unwrap();
        assert_eq!(out, Chromosome::from_ids(&[1, 1, 0]));
    }

    #[test]
    fn repair_clears_ineligible_class() {
        let pool = vec![PoolNode::new(1, 1, false)];
        let reqs = vec![LeaseRequest::new(1, 1, 2, 1)];
        let out = repair(&Chromosome::from_ids(&[1]), &pool, &reqs).unwrap();
        assert_eq!(out, Chromosome::empty(1));
    }

    #[test]
    fn repair_leaves_feasible_alone() {
        let (pool, reqs) = worked_instance();
        let c = Chromosome::from_ids(&[2, 1, 1]);
        assert_eq!(repair(&c, &pool, &reqs).unwrap(), c);
        let under = Chromosome::from_ids(&[0, 1, 0]);
        assert_eq!(repair(&under, &pool, &reqs).unwrap(), under);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<PoolNode>, Vec<LeaseRequest>, Vec<u64>)> {
            (1usize..=7, 1usize..=4).prop_flat_map(|(n, m)| {
                let pool = prop::collection::vec((0u8..=4, any::<bool>()), n);
                let reqs = prop::collection::vec((1u32..=3, 0u8..=4, 1u8..=3), m);
                let genes = prop::collection::vec(0u64..=m as u64, n);
                (pool, reqs, genes).prop_map(|(pool, reqs, genes)| {
                    let pool = pool
                        .into_iter()
                        .enumerate()
                        .map(|(i, (c, off))| PoolNode::new(i as u64 + 1, c, off))
                        .collect();
                    let reqs = reqs
                        .into_iter()
                        .enumerate()
                        .map(|(j, (k, min, p))| LeaseRequest::new(j as u64 + 1, k, min, p))
                        .collect();
                    (pool, reqs, genes)
                })
            })
        }

        proptest! {
            #[test]
            fn repair_is_idempotent((pool, reqs, genes) in instance()) {
                let once = repair(&Chromosome::from_ids(&genes), &pool, &reqs).unwrap();
                let twice = repair(&once, &pool, &reqs).unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn repaired_never_overfills_or_misclasses((pool, reqs, genes) in instance()) {
                let fixed = repair(&Chromosome::from_ids(&genes), &pool, &reqs).unwrap();
                for r in &reqs {
                    let members: Vec<_> = pool.iter().zip(&fixed.genes)
                        .filter(|(_, g)| **g == Some(r.request_id)).map(|(n, _)| n).collect();
                    prop_assert!(members.len() <= r.node_count as usize);
                    prop_assert!(members.iter().all(|n| n.class >= r.min_class));
                }
            }

            #[test]
            fn fitness_matches_hand_formula_after_repair((pool, reqs, genes) in instance()) {
                let w = FitnessWeights::default();
                let fixed = repair(&Chromosome::from_ids(&genes), &pool, &reqs).unwrap();
                let ids: Vec<u64> = fixed.genes.iter().map(|g| g.map_or(0, |r| r.0)).collect();
                prop_assert_eq!(
                    fitness(&Chromosome::from_ids(&genes), &pool, &reqs, &w).unwrap(),
                    hand_score(&ids, &pool, &reqs, &w)
                );
            }
        }
    }
}
