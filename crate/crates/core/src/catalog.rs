//! The nine shipped test instances and their experiment defaults.

use thiserror::Error;

use crate::network::{MatchingNetwork, ModelError, NetworkConfig};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("catalog entry `{name}` is malformed: {source}")]
    Parse { name: String, source: serde_json::Error },
    #[error("catalog entry `{name}` is invalid: {source}")]
    Invalid { name: String, source: ModelError },
}

pub const NAMES: [&str; 9] = [
    "x-high", "x-medium", "x-low", "zigzag-a", "zigzag-b", "zigzag-c", "dim24-i", "dim24-ii",
    "dim120",
];

fn raw(name: &str) -> Option<&'static str> {
    Some(match name {
        "x-high" => include_str!("../catalog/x-high.json"),
        "x-medium" => include_str!("../catalog/x-medium.json"),
        "x-low" => include_str!("../catalog/x-low.json"),
        "zigzag-a" => include_str!("../catalog/zigzag-a.json"),
        "zigzag-b" => include_str!("../catalog/zigzag-b.json"),
        "zigzag-c" => include_str!("../catalog/zigzag-c.json"),
        "dim24-i" => include_str!("../catalog/dim24-i.json"),
        "dim24-ii" => include_str!("../catalog/dim24-ii.json"),
        "dim120" => include_str!("../catalog/dim120.json"),
        _ => return None,
    })
}

/// The raw config for a catalog instance.
pub fn config(name: &str) -> Result<NetworkConfig, CatalogError> {
    let text = raw(name).ok_or_else(|| CatalogError::UnknownInstance(name.to_string()))?;
    serde_json::from_str(text).map_err(|source| CatalogError::Parse { name: name.into(), source })
}

/// Loads a catalog instance and its published `x*`.
pub fn catalog(name: &str) -> Result<(MatchingNetwork, Option<Vec<f64>>), CatalogError> {
    let cfg = config(name)?;
    let net = cfg.build().map_err(|source| CatalogError::Invalid { name: name.into(), source })?;
    Ok((net, cfg.x_star))
}

/// Per-instance hyperparameters for training, the proposed policy and the
/// benchmark comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDefaults {
    pub eta: f64,
    pub epsilon: f64,
    pub reference_basic: f64,
    pub reference_nonbasic: f64,
    pub review_period: f64,
    pub replications: usize,
    /// Reporting unit for the centered discounted value (100 or 1000).
    pub unit: f64,
}

pub fn defaults(name: &str) -> Result<InstanceDefaults, CatalogError> {
    let (eta, epsilon, reference_basic, reference_nonbasic, review_period, replications, unit) =
        match name {
            "x-high" | "x-medium" => (0.5, 0.03, 0.1, -0.01, 0.001, 100, 100.0),
            "x-low" => (1.0, 0.15, 0.1, -0.01, 0.001, 100, 100.0),
            "zigzag-a" => (1.0, 0.05, 3.0, -0.1, 0.0001, 100, 1000.0),
            // no nonbasic activities
            "zigzag-b" => (0.5, 0.07, 3.0, 0.0, 0.0001, 100, 1000.0),
            "zigzag-c" => (1.0, 0.05, 2.0, -0.01, 0.01, 100, 1000.0),
            "dim24-i" => (0.5, 0.03, 0.1, -0.1, 0.0001, 30, 1000.0),
            "dim24-ii" => (1.0, 0.0, 0.1, -0.01, 0.005, 30, 1000.0),
            "dim120" => (0.0, 0.0, 0.1, -0.01, 0.01, 30, 1000.0),
            _ => return Err(CatalogError::UnknownInstance(name.to_string())),
        };
    Ok(InstanceDefaults {
        eta,
        epsilon,
        reference_basic,
        reference_nonbasic,
        review_period,
        replications,
        unit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_high_parameters() {
        let (net, x) = catalog("x-high").unwrap();
        assert_eq!(net.arrival_rates(), &[0.5, 1.0, 1.0, 0.5]);
        assert_eq!(net.abandonment_rates(), &[0.1; 4]);
        assert_eq!(x.unwrap(), vec![1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn zigzag_b_values() {
        let (net, x) = catalog("zigzag-b").unwrap();
        assert_eq!(net.values(), &[2.0, 4.0, 8.0, 9.0, 8.0, 4.0, 2.0]);
        assert_eq!(x.unwrap().iter().filter(|&&v| v > 0.0).count(), 7);
    }

    #[test]
    fn dim120_shape() {
        let (net, x) = catalog("dim120").unwrap();
        assert_eq!(net.num_classes(), 120);
        assert_eq!(net.num_activities(), 244);
        assert_eq!(x.unwrap().iter().filter(|&&v| v > 0.0).count(), 109);
    }

    #[test]
    fn unknown_instance() {
        assert!(matches!(catalog("x-extreme"), Err(CatalogError::UnknownInstance(_))));
        assert!(defaults("nope").is_err());
    }

    #[test]
    fn every_instance_loads() {
        for name in NAMES {
            let (net, x) = catalog(name).unwrap();
            assert_eq!(x.unwrap().len(), net.num_activities(), "{name}");
            defaults(name).unwrap();
        }
    }
}
