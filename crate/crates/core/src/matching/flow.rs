//! Successive-shortest-path min-cost flow on integer costs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: i64,
    cost: i64,
}

#[derive(Debug, Clone)]
pub(crate) struct Network {
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FlowOutcome {
    pub flow: i64,
    pub cost: i64,
}

impl Network {
    pub fn new(n: usize) -> Self {
        Network { arcs: Vec::new(), adj: vec![Vec::new(); n] }
    }

    /// Adds a forward arc and its residual twin; returns the forward id.
    pub fn add_arc(&mut self, from: usize, to: usize, cap: i64, cost: i64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to, cap, cost });
        self.arcs.push(Arc { to: from, cap: 0, cost: -cost });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    pub fn flow_on(&self, arc: usize) -> i64 {
        self.arcs[arc ^ 1].cap
    }

    /// Initial potentials by Bellman–Ford. Nodes are expected to be
    /// numbered in topological order so one sweep usually settles them.
    fn initial_potentials(&self, source: usize) -> Vec<i64> {
        let n = self.adj.len();
        let mut d = vec![i64::MAX; n];
        d[source] = 0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if d[u] == i64::MAX {
                    continue;
                }
                for &a in &self.adj[u] {
                    let arc = &self.arcs[a];
                    if arc.cap > 0 && d[u] + arc.cost < d[arc.to] {
                        d[arc.to] = d[u] + arc.cost;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        d
    }

    /// Pushes up to `required` units from `source` to `sink` at minimum
    /// cost. Initial residual graph must contain no negative cycles.
    pub fn min_cost_flow(&mut self, source: usize, sink: usize, required: i64) -> FlowOutcome {
        let n = self.adj.len();
        let mut pot = self.initial_potentials(source);
        let unreachable = pot.iter().copied().filter(|&p| p != i64::MAX).max().unwrap_or(0);
        for p in &mut pot {
            if *p == i64::MAX {
                *p = unreachable;
            }
        }
        let mut dist = vec![i64::MAX; n];
        let mut done = vec![false; n];
        let mut prev = vec![usize::MAX; n];
        let mut touched = Vec::with_capacity(n);
        let mut heap = BinaryHeap::new();
        let mut flow = 0;
        let mut cost = 0;

        while flow < required {
            for &v in &touched {
                dist[v] = i64::MAX;
                done[v] = false;
                prev[v] = usize::MAX;
            }
            touched.clear();
            dist[source] = 0;
            touched.push(source);
            heap.clear();
            heap.push(Reverse((0i64, source)));
            while let Some(Reverse((d, u))) = heap.pop() {
                if done[u] || d > dist[u] {
                    continue;
                }
                done[u] = true;
                if u == sink {
                    break;
                }
                for &a in &self.adj[u] {
                    let arc = &self.arcs[a];
                    if arc.cap <= 0 || done[arc.to] {
                        continue;
                    }
                    let nd = d + arc.cost + pot[u] - pot[arc.to];
                    if nd < dist[arc.to] {
                        if dist[arc.to] == i64::MAX {
                            touched.push(arc.to);
                        }
                        dist[arc.to] = nd;
                        prev[arc.to] = a;
                        heap.push(Reverse((nd, arc.to)));
                    }
                }
            }
            if !done[sink] {
                break;
            }
            // Nodes not settled before the sink keep reduced costs
            // nonnegative when shifted by the sink distance.
            let ds = dist[sink];
            for v in 0..n {
                pot[v] += if done[v] { dist[v] } else { ds };
            }
            let mut push = required - flow;
            let mut v = sink;
            while v != source {
                let a = prev[v];
                push = push.min(self.arcs[a].cap);
                v = self.arcs[a ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let a = prev[v];
                self.arcs[a].cap -= push;
                self.arcs[a ^ 1].cap += push;
                cost += push * self.arcs[a].cost;
                v = self.arcs[a ^ 1].to;
            }
            flow += push;
        }
        FlowOutcome { flow, cost }
    }
}
