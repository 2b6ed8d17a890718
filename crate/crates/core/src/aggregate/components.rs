use std::collections::BTreeMap;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::diffrtt::LinkKey;

/// A connected group of alarmed links, treated as undirected edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub nodes: Vec<IpAddr>,
    pub edges: Vec<LinkKey>,
}

/// Splits alarmed links into connected components. Components are ordered
/// by their smallest address; nodes and edges are sorted.
pub fn connected_alarms(links: &[LinkKey]) -> Vec<Component> {
    let mut index: BTreeMap<IpAddr, usize> = BTreeMap::new();
    for l in links {
        for a in [l.near, l.far] {
            let next = index.len();
            index.entry(a).or_insert(next);
        }
    }
    let mut parent: Vec<usize> = (0..index.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for l in links {
        let (a, b) = (find(&mut parent, index[&l.near]), find(&mut parent, index[&l.far]));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Component> = BTreeMap::new();
    for (addr, &i) in &index {
        let root = find(&mut parent, i);
        groups
            .entry(root)
            .or_insert_with(|| Component {
                nodes: Vec::new(),
                edges: Vec::new(),
            })
            .nodes
            .push(*addr);
    }
    for l in links {
        let root = find(&mut parent, index[&l.near]);
        groups.get_mut(&root).expect("root exists").edges.push(*l);
    }
    let mut out: Vec<Component> = groups.into_values().collect();
    for c in &mut out {
        c.edges.sort_unstable();
        c.edges.dedup();
    }
    out.sort_by_key(|c| c.nodes[0]);
    out
}
