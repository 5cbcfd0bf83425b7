//! Post-training evaluation and report tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{KnowledgeProbe, PreferenceExample, ProbeCategory};
use crate::error::{Error, Result};
use crate::loss::Method;
use crate::model::SeqModel;
use crate::provenance;

/// Fraction of examples whose chosen response is strictly more likely than
/// the rejected one. Ties count as incorrect.
pub fn reward_accuracy(policy: &SeqModel, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("reward_accuracy on an empty set".into()));
    }
    let net = policy.net();
    let mut correct = 0usize;
    for ex in examples {
        let w = net.sequence_log_prob(&ex.prompt, &ex.chosen)?.total;
        let l = net.sequence_log_prob(&ex.prompt, &ex.rejected)?.total;
        if w > l {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Fraction of probes whose first greedily decoded token is the gold token.
pub fn probe_accuracy(policy: &SeqModel, probes: &[KnowledgeProbe]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidInput("probe_accuracy on an empty set".into()));
    }
    let net = policy.net();
    let mut correct = 0usize;
    for p in probes {
        if net.decode_greedy(&p.prompt, 1)?.first() == Some(&p.gold) {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Probe accuracy restricted to one category.
pub fn category_accuracy(policy: &SeqModel, probes: &[KnowledgeProbe], category: ProbeCategory) -> Result<f64> {
    let subset: Vec<KnowledgeProbe> = probes.iter().filter(|p| p.category == category).cloned().collect();
    probe_accuracy(policy, &subset)
}

/// JSON has no NaN; store it as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub type_id: String,
    pub lambda: f64,
    pub rank: usize,
    pub reward_accuracy: f64,
    pub fact_accuracy: f64,
    pub safety_accuracy: f64,
    pub delta_w_final: f64,
    pub delta_l_final: f64,
    /// NaN when the run had no base responses to measure against.
    #[serde(with = "nan_as_null")]
    pub delta_b_final: f64,
    pub config_hash: String,
    /// Run directory relative to the experiment root.
    pub run_dir: String,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ({:.4})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub lambda: f64,
    pub rank: usize,
    pub n_types: usize,
    pub reward_accuracy: MeanStd,
    pub fact_accuracy: MeanStd,
    pub safety_accuracy: MeanStd,
    pub delta_b_final: MeanStd,
}

/// Groups reports by (method, λ, rank) and summarizes across preference
/// types.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, u64, usize), Vec<&EvalReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        let key = (r.method.to_string(), r.lambda.to_bits(), r.rank);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                method: g[0].method,
                lambda: g[0].lambda,
                rank: g[0].rank,
                n_types: g.len(),
                reward_accuracy: col(|r| r.reward_accuracy),
                fact_accuracy: col(|r| r.fact_accuracy),
                safety_accuracy: col(|r| r.safety_accuracy),
                delta_b_final: col(|r| r.delta_b_final),
            }
        })
        .collect()
}

pub const REPORT_HEADER: &str = "method\ttype\tlambda\trank\trwd_acc\tfact_acc\tsafety_acc\td_w\td_l\td_b\tconfig_hash\trun_dir";
pub const AGGREGATE_HEADER: &str = "method\tlambda\trank\tn_types\trwd_acc\tfact_acc\tsafety_acc\td_b";

impl EvalReport {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{:e}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}\t{}",
            self.method,
            self.type_id,
            self.lambda,
            self.rank,
            self.reward_accuracy,
            self.fact_accuracy,
            self.safety_accuracy,
            self.delta_w_final,
            self.delta_l_final,
            self.delta_b_final,
            self.config_hash,
            self.run_dir
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 12 {
            return Err(Error::InvalidInput(format!("report row needs 12 columns: {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
        };
        Ok(Self {
            method: f[0].parse()?,
            type_id: f[1].to_string(),
            lambda: num(f[2])?,
            rank: f[3]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad rank {:?}: {e}", f[3])))?,
            reward_accuracy: num(f[4])?,
            fact_accuracy: num(f[5])?,
            safety_accuracy: num(f[6])?,
            delta_w_final: num(f[7])?,
            delta_l_final: num(f[8])?,
            delta_b_final: num(f[9])?,
            config_hash: f[10].to_string(),
            run_dir: f[11].to_string(),
        })
    }
}

impl AggregateRow {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.method,
            self.lambda,
            self.rank,
            self.n_types,
            self.reward_accuracy,
            self.fact_accuracy,
            self.safety_accuracy,
            self.delta_b_final
        )
    }
}

/// Per-run rows followed by a blank line and the aggregate table.
pub fn render_reports(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out.push('\n');
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for row in aggregate(reports) {
        out.push_str(&row.to_row());
        out.push('\n');
    }
    out
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<String> {
    let text = render_reports(reports);
    provenance::write_atomic(path, text.as_bytes())?;
    Ok(provenance::sha256_hex(text.as_bytes()))
}

/// Reads the per-run section of a report file.
pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::parse(path, "unexpected report header"));
    }
    lines
        .take_while(|l| !l.is_empty())
        .map(|l| EvalReport::parse_row(l).map_err(|e| Error::parse(path, e)))
        .collect()
}
