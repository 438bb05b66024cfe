//! Per-exit cost accounting and budget-driven exit selection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::elastic::ExitHead;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitCost {
    /// 1-based position among the network's exits.
    pub exit: usize,
    /// Convolution layers on the path to the exit's anchor.
    pub conv_depth: usize,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<ExitCost>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Flops,
    Params,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Flops => "flops",
            Metric::Params => "params",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub limit: f64,
    pub metric: Metric,
}

impl Budget {
    pub fn new(limit: f64, metric: Metric) -> Result<Self> {
        if !(limit >= 0.0) {
            return Err(Error::contract(format!("budget limit must be nonnegative, got {limit}")));
        }
        Ok(Self { limit, metric })
    }
}

impl ExitCost {
    pub fn cost(&self, metric: Metric) -> u64 {
        match metric {
            Metric::Flops => self.flops,
            Metric::Params => self.params,
        }
    }
}

/// Costs of running the network up to each exit: every backbone node that
/// feeds the exit's anchor, plus that exit's own head. Nothing past the
/// anchor and no other head is counted.
pub fn cost_audit(graph: &NetworkGraph, exits: &[ExitHead], classes: usize) -> Result<CostTable> {
    if exits.is_empty() {
        return Err(Error::graph("network has no exits to audit"));
    }
    let mut rows = Vec::with_capacity(exits.len());
    for (i, e) in exits.iter().enumerate() {
        let node = graph
            .nodes()
            .get(e.node.0)
            .ok_or_else(|| Error::graph(format!("exit {} reads a missing node", i + 1)))?;
        if node.shape.c != e.features {
            return Err(Error::graph(format!(
                "exit {} expects {} features, node {} has {}",
                i + 1,
                e.features,
                node.name,
                node.shape.c
            )));
        }
        let mask = graph.ancestors(&[e.node]);
        rows.push(ExitCost {
            exit: i + 1,
            conv_depth: graph.conv_depth(e.node),
            params: graph.formula_params(Some(&mask)) + e.params(classes),
            flops: graph.flops(Some(&mask)) + e.flops(node.shape.numel(), classes),
        });
    }
    Ok(CostTable { rows })
}

/// Cost table of a bare backbone with one hypothetical head per anchor.
pub fn backbone_cost_audit(graph: &NetworkGraph, classes: usize) -> Result<CostTable> {
    let exits: Vec<ExitHead> = graph
        .anchors()
        .iter()
        .map(|a| ExitHead {
            anchor: a.ordinal,
            node: a.node,
            features: a.channels,
            dropout: 0.0,
            loss_weight: 1.0,
        })
        .collect();
    cost_audit(graph, &exits, classes)
}

/// Deepest exit (1-based) whose cumulative cost is at most the limit.
pub fn select_exit(table: &CostTable, budget: Budget) -> Result<usize> {
    if table.rows.is_empty() {
        return Err(Error::contract("empty cost table"));
    }
    let mut chosen = None;
    for row in &table.rows {
        if row.cost(budget.metric) as f64 <= budget.limit {
            chosen = Some(row.exit);
        }
    }
    chosen.ok_or_else(|| Error::BudgetInfeasible {
        limit: budget.limit,
        metric: budget.metric.name(),
        cheapest: table.rows.iter().map(|r| r.cost(budget.metric)).min().unwrap_or(0) as f64,
    })
}

impl CostTable {
    pub fn is_strictly_increasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[0].params < w[1].params && w[0].flops < w[1].flops)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("exit,conv_depth,params,flops\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.exit, r.conv_depth, r.params, r.flops));
        }
        s
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>4}  {:>10}  {:>12}  {:>14}", "exit", "conv_depth", "params", "flops")?;
        for r in &self.rows {
            writeln!(f, "{:>4}  {:>10}  {:>12}  {:>14}", r.exit, r.conv_depth, r.params, r.flops)?;
        }
        Ok(())
    }
}
