//! Node/slot inventory detection and resource-set scheduling.
//!
//! The detected inventory is partitioned into equal-size, node-contained
//! *resource sets*: the indivisible unit a worker can hold. The manager owns
//! the assignment table; workers receive immutable snapshots of their own
//! assignment inside work messages. A slot models one schedulable device
//! (CPU core or GPU) uniformly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("malformed node list: {0}")]
    MalformedNodeList(String),
    #[error("cannot split {slots} slots into {nsets} equal node-contained sets")]
    IndivisibleResources { slots: usize, nsets: usize },
    #[error("insufficient free resource sets: requested {requested}, free {free}")]
    InsufficientResources { requested: usize, free: usize },
    #[error("worker {0} already holds resource sets")]
    AlreadyAssigned(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InventorySource {
    Explicit,
    EnvVar,
    NodeFile,
    ProbeDefault,
}

/// The machines and slot counts available to this run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInventory {
    pub nodes: Vec<(String, usize)>,
    pub source: InventorySource,
}

pub const NODELIST_ENV: &str = "ENS_NODELIST";
pub const NODELIST_FILE: &str = "node_list";

fn validate_nodes(nodes: &[(String, usize)], origin: &str) -> Result<(), ResourceError> {
    if nodes.is_empty() {
        return Err(ResourceError::MalformedNodeList(format!("{origin}: no nodes")));
    }
    let mut seen = Vec::new();
    for (name, slots) in nodes {
        if name.is_empty() {
            return Err(ResourceError::MalformedNodeList(format!("{origin}: empty node name")));
        }
        if *slots == 0 {
            return Err(ResourceError::MalformedNodeList(format!(
                "{origin}: node '{name}' has zero slots"
            )));
        }
        if seen.contains(&name) {
            return Err(ResourceError::MalformedNodeList(format!(
                "{origin}: duplicate node '{name}'"
            )));
        }
        seen.push(name);
    }
    Ok(())
}

fn parse_env_nodelist(value: &str) -> Result<Vec<(String, usize)>, ResourceError> {
    value
        .split(',')
        .map(|entry| {
            let (name, slots) = entry.split_once(':').ok_or_else(|| {
                ResourceError::MalformedNodeList(format!("{NODELIST_ENV}: entry '{entry}'"))
            })?;
            let slots = slots.trim().parse::<usize>().map_err(|_| {
                ResourceError::MalformedNodeList(format!("{NODELIST_ENV}: entry '{entry}'"))
            })?;
            Ok((name.trim().to_string(), slots))
        })
        .collect()
}

fn parse_node_file(text: &str) -> Result<Vec<(String, usize)>, ResourceError> {
    let mut nodes = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap().to_string();
        let slots = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                ResourceError::MalformedNodeList(format!("{NODELIST_FILE}: line '{line}'"))
            })?;
        nodes.push((name, slots));
    }
    Ok(nodes)
}

/// Detect the node inventory. Precedence: explicit configuration, then the
/// `ENS_NODELIST` environment variable (`name:slots,name:slots`), then a
/// `node_list` file in the run directory (`name slots` per line), then a
/// single-node default of the local logical CPU count.
pub fn detect_inventory(
    explicit: Option<&[(String, usize)]>,
    run_dir: &Path,
) -> Result<NodeInventory, ResourceError> {
    if let Some(nodes) = explicit {
        validate_nodes(nodes, "explicit inventory")?;
        return Ok(NodeInventory { nodes: nodes.to_vec(), source: InventorySource::Explicit });
    }
    if let Ok(value) = std::env::var(NODELIST_ENV) {
        let nodes = parse_env_nodelist(&value)?;
        validate_nodes(&nodes, NODELIST_ENV)?;
        return Ok(NodeInventory { nodes, source: InventorySource::EnvVar });
    }
    let file = run_dir.join(NODELIST_FILE);
    if file.is_file() {
        let text = std::fs::read_to_string(&file)
            .map_err(|e| ResourceError::MalformedNodeList(format!("{NODELIST_FILE}: {e}")))?;
        let nodes = parse_node_file(&text)?;
        validate_nodes(&nodes, NODELIST_FILE)?;
        return Ok(NodeInventory { nodes, source: InventorySource::NodeFile });
    }
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(NodeInventory {
        nodes: vec![("localhost".to_string(), cpus)],
        source: InventorySource::ProbeDefault,
    })
}

/// One schedulable unit: a run of slots on a single node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSet {
    pub id: usize,
    pub node: String,
    pub slots: Vec<usize>,
}

/// Split the inventory into `nsets` equal-size, node-contained sets of
/// contiguous slots. Fails unless the split is exact on every node.
pub fn build_resource_sets(
    inv: &NodeInventory,
    nsets: usize,
) -> Result<Vec<ResourceSet>, ResourceError> {
    let total: usize = inv.nodes.iter().map(|(_, s)| s).sum();
    if nsets == 0 || total % nsets != 0 {
        return Err(ResourceError::IndivisibleResources { slots: total, nsets });
    }
    let set_size = total / nsets;
    let mut sets = Vec::with_capacity(nsets);
    for (name, slots) in &inv.nodes {
        if slots % set_size != 0 {
            return Err(ResourceError::IndivisibleResources { slots: total, nsets });
        }
        for start in (0..*slots).step_by(set_size) {
            sets.push(ResourceSet {
                id: sets.len(),
                node: name.clone(),
                slots: (start..start + set_size).collect(),
            });
        }
    }
    Ok(sets)
}

/// A worker's view of its current assignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerResources {
    pub worker_id: u32,
    pub set_ids: Vec<usize>,
    /// Distinct node names touched, sorted.
    pub nodes: Vec<String>,
    /// Slot indices held on the first node, sorted. What a simulator exports
    /// to its application (the visible-devices list).
    pub slots_on_node: Vec<usize>,
}

impl WorkerResources {
    pub fn empty(worker_id: u32) -> WorkerResources {
        WorkerResources { worker_id, ..Default::default() }
    }

    pub fn local_node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn slot_count(&self) -> usize {
        self.slots_on_node.len()
    }
}

/// Manager-side assignment table over the built sets. A set belongs to at
/// most one worker at any instant; zero-resource workers never appear.
#[derive(Debug, Clone)]
pub struct ResourceTable {
    sets: Vec<ResourceSet>,
    owner: Vec<Option<u32>>,
}

impl ResourceTable {
    pub fn new(sets: Vec<ResourceSet>) -> ResourceTable {
        let owner = vec![None; sets.len()];
        ResourceTable { sets, owner }
    }

    pub fn sets(&self) -> &[ResourceSet] {
        &self.sets
    }

    pub fn total_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn free_count(&self) -> usize {
        self.owner.iter().filter(|o| o.is_none()).count()
    }

    pub fn owner_of(&self, set_id: usize) -> Option<u32> {
        self.owner.get(set_id).copied().flatten()
    }

    pub fn holdings(&self, worker: u32) -> Vec<usize> {
        self.owner
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Some(worker))
            .map(|(i, _)| i)
            .collect()
    }

    fn free_ids_by_node(&self) -> Vec<(String, Vec<usize>)> {
        let mut nodes: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, set) in self.sets.iter().enumerate() {
            if self.owner[i].is_some() {
                continue;
            }
            match nodes.iter_mut().find(|(n, _)| *n == set.node) {
                Some((_, ids)) => ids.push(i),
                None => nodes.push((set.node.clone(), vec![i])),
            }
        }
        nodes.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, ids) in &mut nodes {
            ids.sort_unstable();
        }
        nodes
    }

    /// Pick `count` free sets for a worker under the smallest-partition
    /// policy: minimize node span first, then leftover free slots on the
    /// touched nodes; break ties by lowest node name, then lowest set ids.
    /// A request of zero always succeeds with an empty assignment.
    pub fn assign(&mut self, worker: u32, count: usize) -> Result<WorkerResources, ResourceError> {
        if self.owner.iter().any(|o| *o == Some(worker)) {
            return Err(ResourceError::AlreadyAssigned(worker));
        }
        if count == 0 {
            return Ok(WorkerResources::empty(worker));
        }
        let by_node = self.free_ids_by_node();
        let free_total: usize = by_node.iter().map(|(_, ids)| ids.len()).sum();
        if count > free_total {
            return Err(ResourceError::InsufficientResources { requested: count, free: free_total });
        }

        let chosen = self
            .choose_sets(&by_node, count)
            .ok_or(ResourceError::InsufficientResources { requested: count, free: free_total })?;
        self.assign_specific(worker, &chosen)?;
        Ok(self.snapshot(worker))
    }

    fn choose_sets(&self, by_node: &[(String, Vec<usize>)], count: usize) -> Option<Vec<usize>> {
        // Span 1: best-fit single node, smallest leftover then lowest name.
        let mut single: Option<(usize, &str, &[usize])> = None;
        for (name, ids) in by_node {
            if ids.len() >= count {
                let leftover = ids.len() - count;
                let better = match single {
                    None => true,
                    Some((cur_left, cur_name, _)) => {
                        leftover < cur_left || (leftover == cur_left && name.as_str() < cur_name)
                    }
                };
                if better {
                    single = Some((leftover, name, ids));
                }
            }
        }
        if let Some((_, _, ids)) = single {
            return Some(ids[..count].to_vec());
        }

        // Multi-node: smallest number of nodes covering the request,
        // minimizing total free slots on the touched nodes, then names.
        for span in 2..=by_node.len() {
            if count < span {
                break;
            }
            let mut best: Option<(usize, Vec<usize>)> = None; // (total free, node indices)
            let mut combo = Vec::new();
            subsets(by_node.len(), span, 0, &mut combo, &mut |sel| {
                let total: usize = sel.iter().map(|&i| by_node[i].1.len()).sum();
                if total < count {
                    return;
                }
                let better = match &best {
                    None => true,
                    // Node lists compare lexicographically via their sorted
                    // indices since by_node itself is name-sorted.
                    Some((cur_total, cur_sel)) => {
                        total < *cur_total || (total == *cur_total && sel < cur_sel.as_slice())
                    }
                };
                if better {
                    best = Some((total, sel.to_vec()));
                }
            });
            if let Some((_, node_sel)) = best {
                return Some(pick_lex_smallest(by_node, &node_sel, count));
            }
        }
        None
    }

    /// Assign explicit set ids (used when replaying an allocation decision
    /// computed on a scratch copy of the table).
    pub fn assign_specific(&mut self, worker: u32, ids: &[usize]) -> Result<(), ResourceError> {
        for &id in ids {
            if id >= self.owner.len() || self.owner[id].is_some() {
                return Err(ResourceError::InsufficientResources {
                    requested: ids.len(),
                    free: self.free_count(),
                });
            }
        }
        for &id in ids {
            self.owner[id] = Some(worker);
        }
        Ok(())
    }

    /// Free everything the worker holds. Releasing twice is a no-op.
    pub fn release(&mut self, worker: u32) {
        for o in &mut self.owner {
            if *o == Some(worker) {
                *o = None;
            }
        }
    }

    pub fn snapshot(&self, worker: u32) -> WorkerResources {
        let set_ids = self.holdings(worker);
        let mut nodes: Vec<String> = Vec::new();
        for &id in &set_ids {
            if !nodes.contains(&self.sets[id].node) {
                nodes.push(self.sets[id].node.clone());
            }
        }
        nodes.sort();
        let mut slots_on_node: Vec<usize> = set_ids
            .iter()
            .filter(|&&id| Some(&self.sets[id].node) == nodes.first())
            .flat_map(|&id| self.sets[id].slots.iter().copied())
            .collect();
        slots_on_node.sort_unstable();
        WorkerResources { worker_id: worker, set_ids, nodes, slots_on_node }
    }
}

/// Take the lexicographically smallest `count` free set ids across the
/// selected nodes such that every selected node contributes at least one.
fn pick_lex_smallest(
    by_node: &[(String, Vec<usize>)],
    node_sel: &[usize],
    count: usize,
) -> Vec<usize> {
    let mut candidates: Vec<(usize, usize)> = Vec::new(); // (set id, node index)
    for &ni in node_sel {
        for &id in &by_node[ni].1 {
            candidates.push((id, ni));
        }
    }
    candidates.sort_unstable();

    let mut chosen = Vec::with_capacity(count);
    let mut covered: Vec<usize> = Vec::new();
    for (pos, &(id, ni)) in candidates.iter().enumerate() {
        if chosen.len() == count {
            break;
        }
        // Taking `id` is safe only if the remaining candidates can still
        // cover every untouched node with the picks left after it.
        let mut covered_after = covered.clone();
        if !covered_after.contains(&ni) {
            covered_after.push(ni);
        }
        let uncovered: Vec<usize> = node_sel
            .iter()
            .copied()
            .filter(|n| !covered_after.contains(n))
            .collect();
        let need = count - chosen.len() - 1;
        let rest = &candidates[pos + 1..];
        let coverable =
            uncovered.iter().all(|n| rest.iter().any(|(_, rn)| rn == n)) && need >= uncovered.len();
        if rest.len() >= need && coverable {
            chosen.push(id);
            covered = covered_after;
        }
    }
    chosen
}

fn subsets(n: usize, k: usize, start: usize, current: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if current.len() == k {
        f(current);
        return;
    }
    for i in start..n {
        current.push(i);
        subsets(n, k, i + 1, current, f);
        current.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    // Environment mutation must not race across tests.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    fn inv(nodes: &[(&str, usize)]) -> NodeInventory {
        NodeInventory {
            nodes: nodes.iter().map(|(n, s)| (n.to_string(), *s)).collect(),
            source: InventorySource::Explicit,
        }
    }

    #[test]
    fn detect_precedence() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(NODELIST_FILE), "nid001 8\nnid002 8\n").unwrap();

        let from_file = detect_inventory(None, dir.path()).unwrap();
        assert_eq!(from_file.source, InventorySource::NodeFile);
        assert_eq!(from_file.nodes, vec![("nid001".into(), 8), ("nid002".into(), 8)]);

        std::env::set_var(NODELIST_ENV, "a:2,b:4");
        let from_env = detect_inventory(None, dir.path()).unwrap();
        assert_eq!(from_env.source, InventorySource::EnvVar);
        assert_eq!(from_env.nodes, vec![("a".into(), 2), ("b".into(), 4)]);

        let explicit = [("x".to_string(), 1)];
        let from_cfg = detect_inventory(Some(&explicit), dir.path()).unwrap();
        assert_eq!(from_cfg.source, InventorySource::Explicit);
        std::env::remove_var(NODELIST_ENV);

        let probed = detect_inventory(None, tempfile::tempdir().unwrap().path()).unwrap();
        assert_eq!(probed.source, InventorySource::ProbeDefault);
        assert_eq!(probed.nodes.len(), 1);
        assert!(probed.nodes[0].1 >= 1);
    }

    #[test]
    fn zero_slot_node_is_malformed() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(NODELIST_FILE), "nid001 0\n").unwrap();
        assert!(matches!(
            detect_inventory(None, dir.path()),
            Err(ResourceError::MalformedNodeList(_))
        ));
    }

    #[test]
    fn build_sets_even_split() {
        let sets = build_resource_sets(&inv(&[("n1", 8), ("n2", 8)]), 8).unwrap();
        assert_eq!(sets.len(), 8);
        assert!(sets.iter().all(|s| s.slots.len() == 2));
        assert_eq!(sets.iter().filter(|s| s.node == "n1").count(), 4);
        assert_eq!(sets[0].slots, vec![0, 1]);
        assert_eq!(sets[1].slots, vec![2, 3]);

        let singles = build_resource_sets(&inv(&[("n1", 4)]), 4).unwrap();
        assert!(singles.iter().all(|s| s.slots.len() == 1));

        assert!(matches!(
            build_resource_sets(&inv(&[("n1", 4)]), 3),
            Err(ResourceError::IndivisibleResources { .. })
        ));
    }

    #[test]
    fn smallest_partition_prefers_tighter_node() {
        // Node a: 1 free; node b: 4 free. A request of 1 lands on a.
        let sets = build_resource_sets(&inv(&[("a", 1), ("b", 4)]), 5).unwrap();
        let mut table = ResourceTable::new(sets);
        let got = table.assign(7, 1).unwrap();
        assert_eq!(got.nodes, vec!["a".to_string()]);
        assert_eq!(got.set_ids, vec![0]);
    }

    #[test]
    fn spans_nodes_only_when_forced() {
        let sets = build_resource_sets(&inv(&[("a", 2), ("b", 2)]), 4).unwrap();
        let mut table = ResourceTable::new(sets);
        let got = table.assign(1, 3).unwrap();
        assert_eq!(got.local_node_count(), 2);
        assert_eq!(got.set_ids.len(), 3);
    }

    #[test]
    fn zero_request_always_succeeds() {
        let sets = build_resource_sets(&inv(&[("a", 1)]), 1).unwrap();
        let mut table = ResourceTable::new(sets);
        table.assign(1, 1).unwrap();
        let zero = table.assign(2, 0).unwrap();
        assert!(zero.set_ids.is_empty());
        assert!(matches!(
            table.assign(3, 1),
            Err(ResourceError::InsufficientResources { .. })
        ));
    }

    #[test]
    fn release_is_inverse_and_idempotent() {
        let sets = build_resource_sets(&inv(&[("a", 4)]), 4).unwrap();
        let mut table = ResourceTable::new(sets);
        table.assign(1, 2).unwrap();
        assert_eq!(table.free_count(), 2);
        table.release(1);
        assert_eq!(table.free_count(), 4);
        table.release(1);
        assert_eq!(table.free_count(), 4);
    }

    // Brute-force oracle: enumerate every k-subset of free sets and minimize
    // (node span, leftover free slots on touched nodes, touched node names,
    // set ids). Independent of the scheduler's search strategy.
    fn oracle_assign(table: &ResourceTable, count: usize) -> Option<Vec<usize>> {
        let free: Vec<usize> = (0..table.total_sets())
            .filter(|&i| table.owner_of(i).is_none())
            .collect();
        if count == 0 {
            return Some(Vec::new());
        }
        if free.len() < count {
            return None;
        }
        let mut best: Option<(usize, usize, Vec<String>, Vec<usize>)> = None;
        let mut combo = Vec::new();
        subsets(free.len(), count, 0, &mut combo, &mut |sel| {
            let ids: Vec<usize> = sel.iter().map(|&i| free[i]).collect();
            let mut names: Vec<String> = ids
                .iter()
                .map(|&id| table.sets()[id].node.clone())
                .collect();
            names.sort();
            names.dedup();
            let span = names.len();
            let free_on_touched = free
                .iter()
                .filter(|&&id| names.contains(&table.sets()[id].node))
                .count();
            let leftover = free_on_touched - count;
            let key = (span, leftover, names, ids);
            let better = match &best {
                None => true,
                Some(cur) => key < *cur,
            };
            if better {
                best = Some(key);
            }
        });
        best.map(|(_, _, _, ids)| ids)
    }

    #[test]
    fn scheduler_matches_oracle_exhaustively() {
        // All inventories with <=3 nodes and <=4 sets per node, all request
        // sizes, under a few random pre-assignment patterns.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let mut cases = 0usize;
        for n_nodes in 1..=3usize {
            let mut shapes = vec![Vec::new()];
            for _ in 0..n_nodes {
                let mut next = Vec::new();
                for shape in &shapes {
                    for sets in 1..=4usize {
                        let mut s: Vec<usize> = shape.clone();
                        s.push(sets);
                        next.push(s);
                    }
                }
                shapes = next;
            }
            for shape in shapes {
                let nodes: Vec<(String, usize)> = shape
                    .iter()
                    .enumerate()
                    .map(|(i, &sets)| (format!("n{i}"), sets))
                    .collect();
                let total: usize = shape.iter().sum();
                let inv = NodeInventory { nodes, source: InventorySource::Explicit };
                let sets = build_resource_sets(&inv, total).unwrap();
                for pattern in 0..3 {
                    let mut table = ResourceTable::new(sets.clone());
                    if pattern > 0 {
                        for id in 0..total {
                            if rng.gen_bool(0.3) {
                                table.assign_specific(99, &[id]).unwrap();
                            }
                        }
                    }
                    for request in 0..=total + 1 {
                        let expected = oracle_assign(&table, request);
                        let mut scratch = table.clone();
                        let got = scratch.assign(1, request).ok().map(|w| w.set_ids);
                        assert_eq!(
                            got, expected,
                            "shape {shape:?} pattern {pattern} request {request}"
                        );
                        cases += 1;
                    }
                }
            }
        }
        assert!(cases > 1000, "exhaustive sweep too small: {cases}");
    }

    #[test]
    fn assign_release_fuzz_preserves_partition() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let sets = build_resource_sets(&inv(&[("a", 4), ("b", 4), ("c", 4)]), 12).unwrap();
        let mut table = ResourceTable::new(sets);
        let workers: Vec<u32> = (1..=6).collect();
        for _ in 0..10_000 {
            let w = workers[rng.gen_range(0..workers.len())];
            if rng.gen_bool(0.5) {
                let count = rng.gen_range(0..=4);
                let _ = table.assign(w, count);
            } else {
                table.release(w);
            }
            // Sets assigned across workers stay disjoint and within bounds.
            let held: usize = workers.iter().map(|w| table.holdings(*w).len()).sum();
            assert_eq!(table.free_count() + held, table.total_sets());
            for w in &workers {
                for id in table.holdings(*w) {
                    assert_eq!(table.owner_of(id), Some(*w));
                }
            }
        }
    }
}
