//! Discrete cell descriptions produced by the search.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::ops::{parse_kind, OperatorRegistry};
use crate::{Error, Result};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;
/// Intermediate nodes per cell.
pub const INTERMEDIATE_NODES: usize = 4;
/// Kept incoming edges per intermediate node.
pub const EDGES_PER_NODE: usize = 2;

/// Eight `(operation, predecessor)` pairs: entries `2k` and `2k + 1` feed
/// intermediate node `k`, whose state index is `k + 2`. Predecessors 0 and 1
/// are the two cell inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellGenotype {
    pub edges: Vec<(String, usize)>,
}

impl CellGenotype {
    pub fn node_inputs(&self, node: usize) -> &[(String, usize)] {
        &self.edges[node * EDGES_PER_NODE..(node + 1) * EDGES_PER_NODE]
    }

    pub fn validate(&self, registry: &[String]) -> Result<()> {
        if self.edges.len() != INTERMEDIATE_NODES * EDGES_PER_NODE {
            return Err(Error::Genotype(format!(
                "expected {} edges, found {}",
                INTERMEDIATE_NODES * EDGES_PER_NODE,
                self.edges.len()
            )));
        }
        for node in 0..INTERMEDIATE_NODES {
            let inputs = self.node_inputs(node);
            for (op, pred) in inputs {
                if *pred >= node + 2 {
                    return Err(Error::Genotype(format!("node {} has predecessor {pred}", node + 2)));
                }
                parse_kind(op)?;
                if !registry.iter().any(|r| r == op) {
                    return Err(Error::Genotype(format!("operation `{op}` is not in the registry")));
                }
            }
            if inputs[0].1 == inputs[1].1 {
                return Err(Error::Genotype(format!("node {} repeats predecessor {}", node + 2, inputs[0].1)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeMeta {
    /// `in_dataset`, `cross_dataset` or `random`.
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub schema_version: u32,
    pub registry: Vec<String>,
    pub normal: CellGenotype,
    pub reduction: CellGenotype,
    pub meta: GenotypeMeta,
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::Genotype(format!("unsupported schema version {}", self.schema_version)));
        }
        OperatorRegistry::from_names(&self.registry)?;
        self.normal.validate(&self.registry)?;
        self.reduction.validate(&self.registry)
    }

    /// Validate and check the registry matches `registry` exactly.
    pub fn validate_against(&self, registry: &OperatorRegistry) -> Result<()> {
        self.validate()?;
        if self.registry != registry.names() {
            return Err(Error::Genotype("genotype was searched over a different registry".into()));
        }
        Ok(())
    }

    /// Uniformly random genotype over the registry (baseline architectures).
    pub fn random(registry: &OperatorRegistry, rng: &mut crate::rng::Rng, seed: u64) -> Genotype {
        let names = registry.names();
        let mut cell = || {
            let mut edges = Vec::new();
            for node in 0..INTERMEDIATE_NODES {
                let preds = crate::rng::sample_indices(rng, node + 2, 2);
                for p in preds {
                    let op = names[crate::rng::below(rng, names.len())].clone();
                    edges.push((op, p));
                }
            }
            CellGenotype { edges }
        };
        let normal = cell();
        let reduction = cell();
        Genotype {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            registry: names,
            normal,
            reduction,
            meta: GenotypeMeta { method: "random".into(), seed, epochs: 0 },
        }
    }
}
