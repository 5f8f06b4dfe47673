//! Persisted artifacts. JSON files carry a `meta` block; CSV files start with
//! `#`-prefixed metadata lines followed by a header row.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::margins::TradeoffPoint;
use crate::uq::{FutureRecord, GroupSummary, NamedHistogram};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

impl RunMeta {
    pub fn new(cfg: &RunConfig) -> Self {
        RunMeta { config_sha256: cfg.hash(), seed: cfg.seed, version: VERSION.to_string() }
    }

    fn write_comments<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# config_sha256={}", self.config_sha256)?;
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# version={}", self.version)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    meta: RunMeta,
    data: T,
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, meta: &RunMeta, data: &T) -> Result<()> {
    let env = Envelope { kind: kind.to_string(), meta: meta.clone(), data };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(RunMeta, T)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let env: Envelope<T> = serde_json::from_str(&text)?;
    if env.kind != kind {
        return Err(Error::Config(format!("{} holds '{}', expected '{kind}'", path.display(), env.kind)));
    }
    Ok((env.meta, env.data))
}

fn csv_writer<W: Write>(mut w: W, meta: &RunMeta) -> Result<csv::Writer<W>> {
    meta.write_comments(&mut w)?;
    Ok(csv::Writer::from_writer(w))
}

fn num(v: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{v:?}")
}

/// One row per future.
pub fn write_futures_csv<W: Write>(w: W, meta: &RunMeta, records: &[FutureRecord]) -> Result<()> {
    let mut out = csv_writer(w, meta)?;
    let d = records.first().map_or(0, |r| r.outcome.x_ini.len());
    let mut header: Vec<String> = ["seed", "z_ini", "q", "kind", "degenerate"].iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|i| format!("x_ini_{i}")));
    header.extend((0..d).map(|i| format!("x_final_{i}")));
    header.extend(
        ["f_ini", "f_final", "test_value", "margin_final", "pf_ini", "beta_ini", "pf_final", "beta_final", "pf_method"]
            .iter()
            .map(|s| s.to_string()),
    );
    out.write_record(&header)?;
    for r in records {
        let o = &r.outcome;
        let mut row = vec![
            o.seed.to_string(),
            num(o.z_ini),
            (o.q as u8).to_string(),
            o.redesign_kind.as_str().to_string(),
            (o.degenerate as u8).to_string(),
        ];
        row.extend(o.x_ini.iter().map(|v| num(*v)));
        row.extend(o.x_final.iter().map(|v| num(*v)));
        let method = match r.final_realization().method {
            crate::uq::PfMethod::Form => "form",
            crate::uq::PfMethod::McsFallback => "mcs",
        };
        row.extend([
            num(o.f_ini),
            num(o.f_final),
            num(o.test_value),
            num(o.margin_final),
            num(r.initial.pf),
            num(r.initial.beta),
            num(r.pf_final),
            num(r.beta_final),
            method.to_string(),
        ]);
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Tradeoff curve, one row per cap; failed caps keep their row with the
/// error text.
pub fn write_tradeoff_csv<W: Write>(w: W, meta: &RunMeta, entries: &[(f64, std::result::Result<TradeoffPoint, String>)]) -> Result<()> {
    let mut out = csv_writer(w, meta)?;
    out.write_record([
        "cap", "k_ini", "k_lb", "k_ub", "k_re", "expected_f", "std_err", "cov", "p_re", "exceedance", "penalty_weight", "status",
    ])?;
    for (cap, entry) in entries {
        match entry {
            Ok(t) => {
                let k = t.k.as_array();
                out.write_record([
                    num(*cap),
                    num(k[0]),
                    num(k[1]),
                    num(k[2]),
                    num(k[3]),
                    num(t.expected_f),
                    num(t.expected_f_std_err),
                    num(t.cov_expected_f),
                    num(t.p_re),
                    num(t.neg_margin_prob),
                    num(t.penalty_weight),
                    "ok".to_string(),
                ])?;
            }
            Err(e) => {
                let mut row = vec![num(*cap)];
                row.extend(std::iter::repeat_n(String::new(), 10));
                row.push(format!("failed: {e}"));
                out.write_record(&row)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Binned counts, long format: quantity, bin, lower edge, upper edge, count.
pub fn write_histograms_csv<W: Write>(w: W, meta: &RunMeta, hists: &[NamedHistogram]) -> Result<()> {
    let mut out = csv_writer(w, meta)?;
    out.write_record(["quantity", "bin", "lower", "upper", "count"])?;
    for h in hists {
        let edges = h.histogram.edges();
        for (i, c) in h.histogram.counts.iter().enumerate() {
            out.write_record([h.quantity.clone(), i.to_string(), num(edges[i]), num(edges[i + 1]), c.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-group statistics of the final objective, its relative change, the
/// final margin and the final reliability index.
pub fn write_summary_csv<W: Write>(w: W, meta: &RunMeta, groups: &[GroupSummary]) -> Result<()> {
    let mut out = csv_writer(w, meta)?;
    out.write_record(["group", "quantity", "count", "mean", "q05", "q50", "q95"])?;
    for g in groups {
        for (name, s) in [("objective", &g.objective), ("objective_change", &g.objective_change), ("margin", &g.margin), ("beta", &g.beta)] {
            match s {
                Some(s) => out.write_record([g.group.clone(), name.to_string(), s.count.to_string(), num(s.mean), num(s.q05), num(s.q50), num(s.q95)])?,
                None => out.write_record([g.group.clone(), name.to_string(), "0".into(), String::new(), String::new(), String::new(), String::new()])?,
            }
        }
    }
    out.flush()?;
    Ok(())
}
