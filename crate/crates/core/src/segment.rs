//! Topological separation: connected components of the deformation graph
//! (under symmetrized kNN edges) split the scene into per-object models.

use std::collections::{BTreeMap, HashMap};

use crate::model::{DeformationGraph, NodeId, Surfel};

/// One detected object: a node subset and the surfels it supports. Object
/// ids persist across frames by maximal node overlap.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub id: u32,
    /// Sorted node ids of this component.
    pub nodes: Vec<NodeId>,
    /// Indices into the frame's surfel buffer.
    pub surfels: Vec<usize>,
}

/// Connected components of the symmetrized kNN relation (an undirected edge
/// exists iff either endpoint lists the other). Components are ordered by
/// their smallest node id; node lists are sorted.
pub fn connected_components(graph: &DeformationGraph) -> Vec<Vec<NodeId>> {
    let n = graph.len();
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for node in graph.nodes() {
        let a = graph.slot_of(node.id).unwrap();
        for nb in graph.neighbors(node.id) {
            let b = graph.slot_of(*nb).expect("knn entry references a live node");
            adjacency[a].push(b as u32);
            adjacency[b].push(a as u32);
        }
    }
    let mut component = vec![u32::MAX; n];
    let mut components: Vec<Vec<NodeId>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if component[start] != u32::MAX {
            continue;
        }
        let cid = components.len() as u32;
        component[start] = cid;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(cur) = stack.pop() {
            members.push(graph.nodes()[cur].id);
            for &nb in &adjacency[cur] {
                if component[nb as usize] == u32::MAX {
                    component[nb as usize] = cid;
                    stack.push(nb as usize);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components.sort_by_key(|c| c[0]);
    components
}

/// Assign persistent object ids to components by maximal node overlap with
/// the previous frame's objects; unmatched components get fresh ids.
#[derive(Debug, Clone, Default)]
pub struct ObjectIdTracker {
    previous: Vec<(u32, Vec<NodeId>)>,
    next_id: u32,
}

impl ObjectIdTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, components: &[Vec<NodeId>]) -> Vec<u32> {
        // Overlap counts for every (previous object, component) pair.
        let mut prev_of_node: HashMap<NodeId, u32> = HashMap::new();
        for (pid, nodes) in &self.previous {
            for n in nodes {
                prev_of_node.insert(*n, *pid);
            }
        }
        let mut overlap: BTreeMap<(u32, usize), usize> = BTreeMap::new();
        for (ci, comp) in components.iter().enumerate() {
            for n in comp {
                if let Some(&pid) = prev_of_node.get(n) {
                    *overlap.entry((pid, ci)).or_insert(0) += 1;
                }
            }
        }
        // Greedy by descending overlap; ties by previous id then component.
        let mut ranked: Vec<((u32, usize), usize)> = overlap.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut assigned: Vec<Option<u32>> = vec![None; components.len()];
        let mut used_prev: Vec<u32> = Vec::new();
        for ((pid, ci), _) in ranked {
            if assigned[ci].is_some() || used_prev.contains(&pid) {
                continue;
            }
            assigned[ci] = Some(pid);
            used_prev.push(pid);
        }
        let ids: Vec<u32> = assigned
            .into_iter()
            .map(|slot| {
                slot.unwrap_or_else(|| {
                    let id = self.next_id;
                    self.next_id += 1;
                    id
                })
            })
            .collect();
        self.next_id = self.next_id.max(ids.iter().copied().max().map_or(0, |m| m + 1));
        self.previous = ids
            .iter()
            .zip(components)
            .map(|(&id, c)| (id, c.clone()))
            .collect();
        ids
    }
}

/// Route every surfel to the component holding its support node.
pub fn split_objects(
    surfels: &[Surfel],
    components: &[Vec<NodeId>],
    ids: &[u32],
) -> Vec<ObjectModel> {
    let mut comp_of_node: HashMap<NodeId, usize> = HashMap::new();
    for (ci, comp) in components.iter().enumerate() {
        for n in comp {
            comp_of_node.insert(*n, ci);
        }
    }
    let mut objects: Vec<ObjectModel> = components
        .iter()
        .zip(ids)
        .map(|(comp, &id)| ObjectModel { id, nodes: comp.clone(), surfels: Vec::new() })
        .collect();
    for (i, s) in surfels.iter().enumerate() {
        let ci = comp_of_node
            .get(&s.support)
            .expect("surfel support node must belong to a component");
        objects[*ci].surfels.push(i);
    }
    objects
}
