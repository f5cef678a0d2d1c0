//! ERGM summary statistics: edge count, geometrically weighted edgewise and
//! non-edgewise shared partners (GWESP, GWNSP).
//!
//! With p_s (np_s) the number of connected (non-connected) dyads sharing
//! exactly s neighbours,
//!
//!   GWESP(y) = e^tau * sum_{s>=1} (1 - (1 - e^{-tau})^s) * p_s
//!
//! and GWNSP analogously over np_s.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::graph::Graph;

/// Default decay parameter for the geometric weights.
pub const DEFAULT_TAU: f64 = 0.75;

/// Shared-partner histograms over all dyads. `p[s]` is the number of
/// connected dyads with exactly `s` common neighbours, `np[s]` the same for
/// non-connected dyads; `s` ranges over `0 ..= n-2`. Index 0 never enters the
/// statistics (its geometric weight is zero) but is kept for completeness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedPartnerCounts {
    pub p: Vec<usize>,
    pub np: Vec<usize>,
}

/// The summary vector h(y) = (edges, GWESP, GWNSP) with its decay parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub edges: usize,
    pub gwesp: f64,
    pub gwnsp: f64,
    pub tau: f64,
}

impl SummaryStats {
    /// The statistics as a real 3-vector (edges, gwesp, gwnsp).
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.edges as f64, self.gwesp, self.gwnsp])
    }

    /// Selected subset of the statistics, in the order given.
    pub fn select(&self, terms: &[Term]) -> DVector<f64> {
        DVector::from_iterator(
            terms.len(),
            terms.iter().map(|t| match t {
                Term::Edges => self.edges as f64,
                Term::Gwesp => self.gwesp,
                Term::Gwnsp => self.gwnsp,
            }),
        )
    }
}

/// One term of the summary vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Edges,
    Gwesp,
    Gwnsp,
}

pub const ALL_TERMS: [Term; 3] = [Term::Edges, Term::Gwesp, Term::Gwnsp];

impl Term {
    /// Position of this term in the full (edges, gwesp, gwnsp) vector.
    pub fn index(self) -> usize {
        match self {
            Term::Edges => 0,
            Term::Gwesp => 1,
            Term::Gwnsp => 2,
        }
    }

    /// Lowercase column name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            Term::Edges => "edges",
            Term::Gwesp => "gwesp",
            Term::Gwnsp => "gwnsp",
        }
    }
}

/// Geometric weight of one dyad with `s` shared partners:
/// e^tau * (1 - (1 - e^{-tau})^s), zero at s = 0.
#[inline]
pub(crate) fn gw_weight(tau: f64, s: usize) -> f64 {
    if s == 0 {
        0.0
    } else {
        tau.exp() * (1.0 - (1.0 - (-tau).exp()).powi(s as i32))
    }
}

/// Shared-partner histograms of `g` (cached on the graph).
pub fn count_shared_partners(g: &Graph) -> SharedPartnerCounts {
    g.sp_histograms().clone()
}

/// Summary vector h(y) at decay `tau`.
pub fn summary_stats(g: &Graph, tau: f64) -> SummaryStats {
    assert!(tau > 0.0, "decay parameter must be positive");
    let h = g.sp_histograms();
    let mut gwesp = 0.0;
    let mut gwnsp = 0.0;
    for s in 1..h.p.len() {
        let w = gw_weight(tau, s);
        gwesp += w * h.p[s] as f64;
        gwnsp += w * h.np[s] as f64;
    }
    SummaryStats {
        edges: g.n_edges(),
        gwesp,
        gwnsp,
        tau,
    }
}

/// Change statistics for dyad (i, j):
/// h(g with (i,j) on) - h(g with (i,j) off), as (edges, gwesp, gwnsp).
///
/// Only dyads incident to a neighbour of i or j can change their
/// shared-partner count, so the cost is O(deg(i) + deg(j)) popcounts
/// instead of a full recount.
pub fn change_stats(g: &Graph, i: usize, j: usize, tau: f64) -> [f64; 3] {
    assert!(i != j, "change statistics need a dyad, got ({i}, {i})");
    let cur = g.has_edge(i, j);
    // Common neighbours of i and j; identical in the on and off states
    // because no node is its own neighbour.
    let sp0 = g.shared_partners(i, j);
    let mut d_esp = gw_weight(tau, sp0);
    let mut d_nsp = -gw_weight(tau, sp0);

    // Dyads (i, k) with k adjacent to j gain j as a shared partner when the
    // edge is on. shared_partners is evaluated in the current state; when the
    // edge is currently on, j itself is counted and must be removed to get
    // the off-state value.
    let cur_adj = usize::from(cur);
    for k in g.neighbours(j) {
        if k == i {
            continue;
        }
        let sp_off = g.shared_partners(i, k) - cur_adj;
        let dw = gw_weight(tau, sp_off + 1) - gw_weight(tau, sp_off);
        if g.has_edge(i, k) {
            d_esp += dw;
        } else {
            d_nsp += dw;
        }
    }
    for k in g.neighbours(i) {
        if k == j {
            continue;
        }
        let sp_off = g.shared_partners(j, k) - cur_adj;
        let dw = gw_weight(tau, sp_off + 1) - gw_weight(tau, sp_off);
        if g.has_edge(j, k) {
            d_esp += dw;
        } else {
            d_nsp += dw;
        }
    }
    [1.0, d_esp, d_nsp]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_has_zero_stats() {
        let g = Graph::empty(5);
        let h = count_shared_partners(&g);
        assert!(h.p.iter().all(|&c| c == 0));
        // Every dyad is non-connected with zero shared partners.
        assert_eq!(h.np[0], 10);
        assert!(h.np[1..].iter().all(|&c| c == 0));
        let s = summary_stats(&g, DEFAULT_TAU);
        assert_eq!((s.edges, s.gwesp, s.gwnsp), (0, 0.0, 0.0));
    }

    #[test]
    fn triangle_counts_and_stats() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let h = count_shared_partners(&g);
        assert_eq!(h.p[1], 3);
        assert_eq!(h.p[0], 0);
        assert!(h.np.iter().all(|&c| c == 0));
        // e^tau * (1 - (1 - e^{-tau})) = 1 per edge, three edges.
        let s = summary_stats(&g, 0.75);
        assert_eq!(s.edges, 3);
        assert!((s.gwesp - 3.0).abs() < 1e-12);
        assert_eq!(s.gwnsp, 0.0);
    }

    #[test]
    fn lone_edge_change_stats() {
        let g = Graph::empty(4);
        let d = change_stats(&g, 0, 1, DEFAULT_TAU);
        assert_eq!(d, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn closing_a_triangle_from_a_path() {
        // Path 0-1-2; toggling (0,2) creates three one-shared-partner edges
        // and removes the single non-edge with a shared partner.
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let d = change_stats(&g, 0, 2, 0.75);
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!((d[1] - 3.0).abs() < 1e-12);
        assert!((d[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn change_stats_direction_is_state_independent() {
        // Delta is defined as on-minus-off regardless of the current state.
        let mut g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let before = change_stats(&g, 0, 2, 0.75);
        g.set_edge(0, 2, true);
        let after = change_stats(&g, 0, 2, 0.75);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_invariant_upper_bounds() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)]).unwrap();
        let s = summary_stats(&g, DEFAULT_TAU);
        let conn = g.n_edges() as f64;
        let non_conn = (g.n_dyads() - g.n_edges()) as f64;
        assert!(s.gwesp <= DEFAULT_TAU.exp() * conn + 1e-12);
        assert!(s.gwnsp <= DEFAULT_TAU.exp() * non_conn + 1e-12);
    }

    #[test]
    fn select_orders_terms() {
        let s = SummaryStats {
            edges: 4,
            gwesp: 2.5,
            gwnsp: 1.5,
            tau: 0.75,
        };
        let v = s.select(&[Term::Gwnsp, Term::Edges]);
        assert_eq!(v.as_slice(), &[1.5, 4.0]);
        assert_eq!(s.to_vector().as_slice(), &[4.0, 2.5, 1.5]);
    }
}
