//! Composite Gauss-Legendre quadrature on intervals and rectangles.

use std::sync::OnceLock;

use gauss_quad::GaussLegendre;

pub const NODES_PER_PANEL: usize = 16;

fn rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        GaussLegendre::new(NODES_PER_PANEL)
            .expect("degree >= 2")
            .into_node_weight_pairs()
    })
}

/// Nodes and weights of the composite rule with `panels` equal panels on [a, b].
pub fn composite(a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * NODES_PER_PANEL);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for &(x, w) in rule() {
            out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * w));
        }
    }
    out
}

pub fn integrate<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    composite(a, b, panels).into_iter().map(|(x, w)| w * f(x)).sum()
}
