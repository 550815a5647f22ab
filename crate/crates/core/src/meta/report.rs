use std::fmt::Write;

use super::{MetaState, Mode};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSparsity {
    pub layer: usize,
    pub active: usize,
    pub total: usize,
}

impl LayerSparsity {
    pub fn active_fraction(&self) -> f64 {
        self.active as f64 / self.total.max(1) as f64
    }
}

/// Active evaluation gates per layer. Dense states report every adapted
/// entry as active.
pub fn sparsity_pattern_report<T: Real>(state: &MetaState<T>, budget: Option<usize>) -> Vec<LayerSparsity> {
    let slots = state.slots();
    let gates = state.eval_gates(budget);
    let views = state.split_gated(&gates);
    let layers = match state.mode {
        Mode::StructuredModulations => state.config().modulated_layers(),
        _ => state.config().depth,
    };
    let mut rows: Vec<LayerSparsity> = (0..layers)
        .map(|layer| LayerSparsity {
            layer,
            active: 0,
            total: 0,
        })
        .collect();
    for (slot, view) in slots.iter().zip(views) {
        let row = &mut rows[slot.layer];
        match view {
            Some(z) => {
                row.active += z.iter().filter(|v| **v != T::zero()).count();
                row.total += z.len();
            }
            None if state.mode == Mode::DenseMaml => {
                row.active += slot.len;
                row.total += slot.len;
            }
            None => {}
        }
    }
    rows
}

/// CSV with columns `layer,active,total,active_fraction`.
pub fn report_csv(rows: &[LayerSparsity]) -> String {
    let mut out = String::from("layer,active,total,active_fraction\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.layer, r.active, r.total, r.active_fraction()).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::SirenConfig;
    use crate::meta::MetaConfig;

    #[test]
    fn all_open_gates_report_one() {
        let cfg = MetaConfig {
            log_alpha_init: 5.0,
            ..Default::default()
        };
        for mode in [Mode::DenseMaml, Mode::UnstructuredGradients, Mode::StructuredModulations] {
            let s = MetaState::<f64>::init(SirenConfig::new(2, 1, 4, 8), mode, &cfg, 0).unwrap();
            let rows = sparsity_pattern_report(&s, None);
            assert!(rows.iter().all(|r| r.active_fraction() == 1.0), "{mode}");
        }
    }

    #[test]
    fn budget_accounting() {
        let cfg = MetaConfig::default();
        let mut s = MetaState::<f64>::init(SirenConfig::new(2, 1, 15, 16), Mode::StructuredModulations, &cfg, 0).unwrap();
        for (i, la) in s.gates0.log_alpha.iter_mut().enumerate() {
            *la = ((i * 7919) % 101) as f64 / 50.0 - 1.0;
        }
        let rows = sparsity_pattern_report(&s, Some(64));
        assert_eq!(rows.len(), 14);
        let total: f64 = rows.iter().map(|r| r.active_fraction() * 16.0).sum();
        assert!((total - 64.0).abs() < 1e-9);
        let csv = report_csv(&rows);
        assert_eq!(csv.lines().count(), 15);
    }
}
