//! Dinic max-flow on real-valued capacities.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
struct Edge {
    to: usize,
    cap: f64,
}

/// Directed flow network. Capacities may be `f64::INFINITY`.
#[derive(Debug, Clone)]
pub struct FlowGraph {
    adj: Vec<Vec<usize>>,
    edges: Vec<Edge>,
    tolerance: f64,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            edges: Vec::new(),
            tolerance: 0.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds `u -> v` with capacity `cap` and a residual twin of capacity
    /// `reverse_cap`.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, reverse_cap: f64) {
        self.adj[u].push(self.edges.len());
        self.edges.push(Edge { to: v, cap });
        self.adj[v].push(self.edges.len());
        self.edges.push(Edge { to: u, cap: reverse_cap });
    }

    fn levels(&self, s: usize) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let Edge { to, cap } = self.edges[e];
                if cap > self.tolerance && level[to] == usize::MAX {
                    level[to] = level[u] + 1;
                    queue.push_back(to);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, t: usize, pushed: f64, level: &[usize], next: &mut [usize]) -> f64 {
        if u == t {
            return pushed;
        }
        while next[u] < self.adj[u].len() {
            let e = self.adj[u][next[u]];
            let Edge { to, cap } = self.edges[e];
            if cap > self.tolerance && level[to] == level[u] + 1 {
                let got = self.augment(to, t, pushed.min(cap), level, next);
                if got > 0.0 {
                    self.edges[e].cap -= got;
                    self.edges[e ^ 1].cap += got;
                    return got;
                }
            }
            next[u] += 1;
        }
        0.0
    }

    /// Maximum `s`–`t` flow. Residual capacities at or below a tolerance
    /// relative to the largest finite capacity count as saturated. Returns
    /// `f64::INFINITY` when an all-infinite path exists.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let largest = self
            .edges
            .iter()
            .map(|e| e.cap)
            .filter(|c| c.is_finite())
            .fold(0.0, f64::max);
        self.tolerance = largest * 1e-12;
        let mut flow = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] == usize::MAX {
                return flow;
            }
            let mut next = vec![0; self.adj.len()];
            loop {
                let f = self.augment(s, t, f64::INFINITY, &level, &mut next);
                if f <= 0.0 {
                    break;
                }
                if f.is_infinite() {
                    return f;
                }
                flow += f;
            }
        }
    }

    /// Nodes reachable from `s` in the residual graph: the source side of a
    /// minimum cut after [`FlowGraph::max_flow`].
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        self.levels(s).into_iter().map(|l| l != usize::MAX).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_network() {
        // CLRS example network, max flow 23
        let mut g = FlowGraph::new(6);
        for (u, v, c) in [
            (0, 1, 16.0),
            (0, 2, 13.0),
            (2, 1, 4.0),
            (1, 3, 12.0),
            (3, 2, 9.0),
            (2, 4, 14.0),
            (4, 3, 7.0),
            (3, 5, 20.0),
            (4, 5, 4.0),
        ] {
            g.add_edge(u, v, c, 0.0);
        }
        assert_eq!(g.max_flow(0, 5), 23.0);
        let side = g.source_side(0);
        assert_eq!(side, vec![true, true, true, false, true, false]);
    }

    #[test]
    fn infinite_edges() {
        let mut g = FlowGraph::new(3);
        g.add_edge(0, 1, f64::INFINITY, 0.0);
        g.add_edge(1, 2, 2.5, f64::INFINITY);
        assert_eq!(g.max_flow(0, 2), 2.5);
        let mut g = FlowGraph::new(2);
        g.add_edge(0, 1, f64::INFINITY, 0.0);
        assert!(g.max_flow(0, 1).is_infinite());
    }
}
