use std::fmt;

use crate::optim::{LayerState, OptimizerConfig, OptimizerKind};

/// Stored scalars for one layer, itemized by buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    /// `(d_o, d_i)`.
    pub shape: (usize, usize),
    pub items: Vec<(&'static str, usize)>,
}

impl LayerMemory {
    pub fn total(&self) -> usize {
        self.items.iter().map(|(_, n)| n).sum()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.items.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub optimizer: OptimizerKind,
    pub layers: Vec<LayerMemory>,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerMemory::total).sum()
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "optimizer {}", self.optimizer)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (d_o, d_i) = layer.shape;
            write!(f, "layer {l} ({d_o}x{d_i}):")?;
            for (name, n) in &layer.items {
                write!(f, " {name}={n}")?;
            }
            writeln!(f, " total={}", layer.total())?;
        }
        write!(f, "total {}", self.total())
    }
}

/// Optimizer-state scalar counts for layers of shape `(d_o, d_i)`.
pub fn memory_report(shapes: &[(usize, usize)], cfg: &OptimizerConfig) -> MemoryReport {
    let layers = shapes
        .iter()
        .map(|&(d_o, d_i)| {
            let weights = d_o * d_i;
            let items = match cfg.kind {
                OptimizerKind::Kfac => vec![
                    ("S_K", d_i * d_i),
                    ("S_C", d_o * d_o),
                    ("S_K_inverse_cache", d_i * d_i),
                    ("S_C_inverse_cache", d_o * d_o),
                    ("momentum", weights),
                ],
                OptimizerKind::Ikfac | OptimizerKind::Singd => {
                    let k = cfg.structure_k.fit(d_i).storage_count();
                    let c = cfg.structure_c.fit(d_o).storage_count();
                    vec![
                        ("K", k),
                        ("C", c),
                        ("m_K", k),
                        ("m_C", c),
                        ("momentum", weights),
                    ]
                }
                OptimizerKind::AdamW => vec![("second_moment", weights), ("momentum", weights)],
                OptimizerKind::Sgd => vec![("momentum", weights)],
            };
            LayerMemory {
                shape: (d_o, d_i),
                items,
            }
        })
        .collect();
    MemoryReport {
        optimizer: cfg.kind,
        layers,
    }
}

/// Scalars actually held by a live optimizer state.
pub fn state_scalars(state: &LayerState) -> usize {
    match state {
        LayerState::Kfac(s) => [&s.s_k, &s.s_c, &s.s_k_inv, &s.s_c_inv, &s.momentum]
            .iter()
            .map(|m| m.data().len())
            .sum(),
        LayerState::Ikfac(s) | LayerState::Singd(s) => {
            [&s.k, &s.c, &s.m_k, &s.m_c]
                .iter()
                .map(|f| f.coeffs().len())
                .sum::<usize>()
                + s.momentum.data().len()
        }
        LayerState::AdamW(s) => s.second_moment.data().len() + s.momentum.data().len(),
        LayerState::Sgd(s) => s.momentum.data().len(),
    }
}
