//! Closed-form compute (FLOPs) and communication (bits) accounting for the
//! federated reasoning protocol and three baselines.
//!
//! Communication for the text protocols counts query-set tokens sent to
//! every client plus every client's submission tokens, per round. The
//! per-submission uncertainty score (one 64-bit real) is reported as its
//! own line and kept out of the token total. Parameter-exchange baselines
//! send the full (or adapter) payload both ways every round.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits charged per transmitted uncertainty score.
pub const SCORE_BITS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMethod {
    Fera,
    LlmDebate,
    Fedavg,
    Flora,
}

impl CostMethod {
    /// Table order.
    pub const ALL: [CostMethod; 4] = [
        CostMethod::Fedavg,
        CostMethod::Flora,
        CostMethod::LlmDebate,
        CostMethod::Fera,
    ];
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fera" => Ok(CostMethod::Fera),
            "llm_debate" | "debate" => Ok(CostMethod::LlmDebate),
            "fedavg" => Ok(CostMethod::Fedavg),
            "flora" => Ok(CostMethod::Flora),
            other => Err(Error::invalid(format!("unknown cost method `{other}`"))),
        }
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMethod::Fera => "fera",
            CostMethod::LlmDebate => "llm_debate",
            CostMethod::Fedavg => "fedavg",
            CostMethod::Flora => "flora",
        })
    }
}

/// Every symbol any formula needs. Fields a method does not use may stay
/// unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub clients: Option<u64>,
    pub queries: Option<u64>,
    pub client_samples: Option<u64>,
    pub tokens_per_sample: Option<u64>,
    pub rounds: Option<u64>,
    pub fed_rounds: Option<u64>,
    pub local_epochs: Option<u64>,
    pub batch_size: Option<u64>,
    pub client_params: Option<u64>,
    pub server_params: Option<u64>,
    pub lora_rank: Option<u64>,
    pub hidden_dim: Option<u64>,
    pub lora_matrices: Option<u64>,
    pub response_cap: Option<u64>,
    /// Defaults to 16.
    pub token_bits: Option<u64>,
    /// Defaults to 16.
    pub param_bits: Option<u64>,
    /// Externally reported totals per method, carried for display.
    #[serde(default)]
    pub reference: BTreeMap<CostMethod, f64>,
}

impl CostParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cost parameters: {e}")))
    }

    /// `2 * lora_matrices * rank * hidden_dim`.
    pub fn lora_params(&self) -> Result<f64> {
        Ok(2.0
            * get(self.lora_matrices, "lora_matrices")?
            * get(self.lora_rank, "lora_rank")?
            * get(self.hidden_dim, "hidden_dim")?)
    }
}

fn get(value: Option<u64>, name: &'static str) -> Result<f64> {
    match value {
        None => Err(Error::MissingParameter(name)),
        Some(0) => Err(Error::invalid(format!("cost parameter `{name}` must be positive"))),
        Some(v) => Ok(v as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: CostMethod,
    pub flops: f64,
    pub comm_bits: f64,
    /// Labeled FLOP terms; they sum to `flops`.
    pub breakdown: BTreeMap<String, f64>,
    /// Labeled communication terms. Only `comm_bits` counts toward the
    /// total; score bits are listed alongside.
    pub comm_breakdown: BTreeMap<String, f64>,
}

/// Evaluates the FLOP formula for `method` and its communication volume.
pub fn flops(method: CostMethod, p: &CostParams) -> Result<CostReport> {
    let mut breakdown = BTreeMap::new();
    let total = match method {
        CostMethod::Fera | CostMethod::LlmDebate => {
            let k = get(p.rounds, "rounds")?;
            let l = get(p.clients, "clients")?;
            let m = get(p.queries, "queries")?;
            let ns = get(p.tokens_per_sample, "tokens_per_sample")?;
            let theta = get(p.client_params, "client_params")?;
            let server = get(p.server_params, "server_params")?;
            let client_passes = if method == CostMethod::Fera {
                l * (get(p.client_samples, "client_samples")? + m)
            } else {
                2.0 * l * m
            };
            let client = k * client_passes * 2.0 * ns * theta;
            let aggregation = k * m * 2.0 * ns * server;
            breakdown.insert("client_inference".to_string(), client);
            breakdown.insert("server_aggregation".to_string(), aggregation);
            k * (client_passes * 2.0 * ns * theta + m * 2.0 * ns * server)
        }
        CostMethod::Fedavg | CostMethod::Flora => {
            let k = get(p.fed_rounds, "fed_rounds")?;
            let l = get(p.clients, "clients")?;
            let e = get(p.local_epochs, "local_epochs")?;
            let n = get(p.client_samples, "client_samples")?;
            let b = get(p.batch_size, "batch_size")?;
            let ns = get(p.tokens_per_sample, "tokens_per_sample")?;
            let theta = get(p.client_params, "client_params")?;
            let steps = k * l * (e * n / b).ceil();
            if method == CostMethod::Fedavg {
                let t = steps * 6.0 * b * ns * theta;
                breakdown.insert("training".to_string(), t);
                t
            } else {
                let lora = p.lora_params()?;
                let frozen = 2.0 * b * ns * theta;
                let adapter = 4.0 * b * ns * lora;
                breakdown.insert("training".to_string(), steps * frozen);
                breakdown.insert("adapter_training".to_string(), steps * adapter);
                steps * (frozen + adapter)
            }
        }
    };
    let (comm_bits, comm_breakdown) = comm(method, p)?;
    Ok(CostReport {
        method,
        flops: total,
        comm_bits,
        breakdown,
        comm_breakdown,
    })
}

/// Communication volume in bits.
pub fn comm_bits(method: CostMethod, p: &CostParams) -> Result<f64> {
    Ok(comm(method, p)?.0)
}

fn comm(method: CostMethod, p: &CostParams) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut parts = BTreeMap::new();
    let total = match method {
        CostMethod::Fera | CostMethod::LlmDebate => {
            let k = get(p.rounds, "rounds")?;
            let l = get(p.clients, "clients")?;
            let m = get(p.queries, "queries")?;
            let c = get(p.response_cap, "response_cap")?;
            let bits = get(Some(p.token_bits.unwrap_or(16)), "token_bits")?;
            let down = k * m * c * l * bits;
            let up = k * l * m * c * bits;
            parts.insert("query_set".to_string(), down);
            parts.insert("submissions".to_string(), up);
            parts.insert("uncertainty_scores".to_string(), k * l * m * SCORE_BITS);
            down + up
        }
        CostMethod::Fedavg | CostMethod::Flora => {
            let k = get(p.fed_rounds, "fed_rounds")?;
            let l = get(p.clients, "clients")?;
            let bits = get(Some(p.param_bits.unwrap_or(16)), "param_bits")?;
            let payload = if method == CostMethod::Fedavg {
                get(p.client_params, "client_params")?
            } else {
                p.lora_params()?
            };
            let t = payload * bits * 2.0 * l * k;
            parts.insert("parameters".to_string(), t);
            t
        }
    };
    Ok((total, parts))
}

/// Reports for all four methods in table order.
pub fn cost_table(p: &CostParams) -> Result<Vec<CostReport>> {
    CostMethod::ALL.iter().map(|&m| flops(m, p)).collect()
}

/// Aligned text table, with a reference column when totals are known.
pub fn render_table(reports: &[CostReport], reference: &BTreeMap<CostMethod, f64>) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>12} {:>12} {:>12}",
        "method", "flops", "comm_bits", "reference"
    )
    .unwrap();
    for r in reports {
        let reference = reference.get(&r.method).map_or("-".to_string(), |v| format!("{v:.2e}"));
        writeln!(
            out,
            "{:<12} {:>12.2e} {:>12.2e} {:>12}",
            r.method.to_string(),
            r.flops,
            r.comm_bits,
            reference
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ones() -> CostParams {
        CostParams {
            clients: Some(1),
            queries: Some(1),
            client_samples: Some(1),
            tokens_per_sample: Some(1),
            rounds: Some(1),
            fed_rounds: Some(1),
            local_epochs: Some(1),
            batch_size: Some(1),
            client_params: Some(1),
            server_params: Some(1),
            lora_rank: Some(1),
            hidden_dim: Some(1),
            lora_matrices: Some(1),
            response_cap: Some(1),
            token_bits: Some(16),
            param_bits: Some(16),
            reference: BTreeMap::new(),
        }
    }

    #[test]
    fn unit_parameters() {
        assert_eq!(flops(CostMethod::Fera, &ones()).unwrap().flops, 6.0);
        assert_eq!(comm_bits(CostMethod::Fera, &ones()).unwrap(), 32.0);
    }

    #[test]
    fn small_fedavg() {
        let p = CostParams {
            fed_rounds: Some(1),
            clients: Some(1),
            local_epochs: Some(1),
            client_samples: Some(2),
            batch_size: Some(2),
            tokens_per_sample: Some(3),
            client_params: Some(5),
            ..Default::default()
        };
        assert_eq!(flops(CostMethod::Fedavg, &p).unwrap().flops, 180.0);
    }

    #[test]
    fn fedavg_parameter_traffic() {
        let p = CostParams {
            client_params: Some(1_000_000),
            param_bits: Some(16),
            clients: Some(3),
            fed_rounds: Some(50),
            ..Default::default()
        };
        assert_eq!(comm_bits(CostMethod::Fedavg, &p).unwrap(), 4.8e9);
    }

    #[test]
    fn scores_are_listed_not_counted() {
        let r = flops(CostMethod::Fera, &ones()).unwrap();
        assert_eq!(r.comm_breakdown["uncertainty_scores"], 64.0);
        assert_eq!(r.comm_bits, 32.0);
    }

    #[test]
    fn missing_parameter_is_named() {
        let mut p = ones();
        p.server_params = None;
        match flops(CostMethod::Fera, &p) {
            Err(Error::MissingParameter(name)) => assert_eq!(name, "server_params"),
            other => panic!("{other:?}"),
        }
        p.lora_rank = None;
        assert!(matches!(
            flops(CostMethod::Flora, &p),
            Err(Error::MissingParameter("lora_rank"))
        ));
        // unused fields may be absent
        assert!(flops(CostMethod::Fedavg, &p).is_ok());
    }

    #[test]
    fn ceil_on_partial_batches() {
        let mut p = ones();
        p.client_samples = Some(5);
        p.batch_size = Some(2);
        assert_eq!(flops(CostMethod::Fedavg, &p).unwrap().flops, 3.0 * 6.0 * 2.0);
    }

    #[test]
    fn bundled_params_reproduce_table() {
        let p = CostParams::from_toml(include_str!("../../../params/reference-params.toml")).unwrap();
        let reports = cost_table(&p).unwrap();
        let fera = reports.iter().find(|r| r.method == CostMethod::Fera).unwrap();
        assert!((fera.flops / 8.9e16 - 1.0).abs() < 0.05, "{}", fera.flops);
        let values: Vec<f64> = reports.iter().map(|r| r.flops).collect();
        // fedavg > flora > fera > debate
        assert!(values[0] > values[1] && values[1] > values[3] && values[3] > values[2]);
        for r in &reports {
            let want = p.reference[&r.method];
            assert!(
                (r.flops / want).log10().abs() < 1.0,
                "{} {} vs {want}",
                r.method,
                r.flops
            );
        }
        let text = render_table(&reports, &p.reference);
        assert_eq!(text.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn breakdown_sums_to_total(l in 1u64..10, m in 1u64..200, n in 1u64..5000, k in 1u64..10, b in 1u64..64) {
            let p = CostParams {
                clients: Some(l), queries: Some(m), client_samples: Some(n), rounds: Some(k),
                fed_rounds: Some(k), batch_size: Some(b), client_params: Some(8_030_000_000),
                server_params: Some(8_000_000_000), ..ones()
            };
            for method in CostMethod::ALL {
                let r = flops(method, &p).unwrap();
                let sum: f64 = r.breakdown.values().sum();
                prop_assert!((sum - r.flops).abs() <= 4.0 * f64::EPSILON * r.flops);
            }
        }

        #[test]
        fn homogeneous_in_client_params(theta in 1u64..1_000_000_000) {
            let mut p = ones();
            p.server_params = Some(1);
            p.client_params = Some(theta);
            let one = flops(CostMethod::Fedavg, &p).unwrap().flops;
            p.client_params = Some(2 * theta);
            prop_assert_eq!(flops(CostMethod::Fedavg, &p).unwrap().flops, 2.0 * one);
            // with the server term at zero weight the text protocols scale too
            let mut q = ones();
            for method in [CostMethod::Fera, CostMethod::LlmDebate] {
                q.client_params = Some(theta);
                let r1 = flops(method, &q).unwrap().breakdown["client_inference"];
                q.client_params = Some(2 * theta);
                prop_assert_eq!(flops(method, &q).unwrap().breakdown["client_inference"], 2.0 * r1);
            }
        }

        #[test]
        fn flora_cheaper_with_small_adapters(
            theta in 1_000_000u64..10_000_000_000, r in 1u64..64, d in 64u64..8192, mats in 1u64..128,
            n in 1u64..5000, b in 1u64..64,
        ) {
            let mut p = ones();
            p.client_params = Some(theta);
            p.lora_rank = Some(r);
            p.hidden_dim = Some(d);
            p.lora_matrices = Some(mats);
            p.client_samples = Some(n);
            p.batch_size = Some(b);
            prop_assume!(p.lora_params().unwrap() < theta as f64);
            prop_assert!(flops(CostMethod::Flora, &p).unwrap().flops < flops(CostMethod::Fedavg, &p).unwrap().flops);
        }
    }
}
