//! Closed-form trainable-parameter accounting.
//!
//! Rows mirror the tensors the model constructs, in the same order and with
//! the same names, but are derived from shape algebra alone. Decode head
//! parameters are never counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{FineTuneMode, ModelConfig, ReinConfig, ViTConfig};
use crate::error::{Error, Result};
use crate::params::Component;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: u64,
    pub component: Component,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub mode: FineTuneMode,
    /// Adapter variant label, or the mode name when no adapter trains.
    pub label: String,
    pub c_prime: usize,
    pub rows: Vec<ParamRow>,
    pub backbone: u64,
    pub adapter: u64,
    pub total: u64,
}

struct Rows(Vec<ParamRow>);

impl Rows {
    fn push(&mut self, name: String, shape: &[usize], component: Component) {
        let count = shape.iter().map(|&d| d as u64).product();
        self.0.push(ParamRow {
            name,
            shape: shape.to_vec(),
            count,
            component,
        });
    }
}

fn backbone_rows(vit: &ViTConfig, rows: &mut Rows) {
    let (c, h) = (vit.dim, vit.hidden());
    let b = Component::Backbone;
    rows.push("backbone.patch_embed.weight".into(), &[vit.patch_features(), c], b);
    rows.push("backbone.patch_embed.bias".into(), &[c], b);
    rows.push("backbone.pos_embed".into(), &[vit.tokens(), c], b);
    for i in 1..=vit.depth {
        let p = format!("backbone.layer{i:02}");
        for (name, shape) in [
            ("norm1.weight", vec![c]),
            ("norm1.bias", vec![c]),
            ("attn.qkv.weight", vec![c, 3 * c]),
            ("attn.qkv.bias", vec![3 * c]),
            ("attn.proj.weight", vec![c, c]),
            ("attn.proj.bias", vec![c]),
            ("norm2.weight", vec![c]),
            ("norm2.bias", vec![c]),
            ("mlp.fc1.weight", vec![c, h]),
            ("mlp.fc1.bias", vec![h]),
            ("mlp.fc2.weight", vec![h, c]),
            ("mlp.fc2.bias", vec![c]),
        ] {
            rows.push(format!("{p}.{name}"), &shape, b);
        }
    }
}

fn adapter_rows(rein: &ReinConfig, rows: &mut Rows) {
    let (m, r, c, cp, n) = (rein.m, rein.r, rein.c, rein.c_prime, rein.depth);
    let v = rein.variant;
    let a = Component::Adapter;
    for i in 1..=n {
        let p = format!("adapter.layer{i:02}");
        if v.use_lora {
            rows.push(format!("{p}.A"), &[m, r], a);
            rows.push(format!("{p}.B"), &[r, c], a);
        } else {
            rows.push(format!("{p}.T"), &[m, c], a);
        }
    }
    let groups: Vec<String> = if v.use_share {
        vec!["adapter.shared".into()]
    } else {
        (1..=n).map(|i| format!("adapter.layer{i:02}")).collect()
    };
    for p in groups {
        rows.push(format!("{p}.W_T"), &[c, c], a);
        rows.push(format!("{p}.b_T"), &[c], a);
        rows.push(format!("{p}.W_f"), &[c, c], a);
        rows.push(format!("{p}.b_f"), &[c], a);
        if v.use_link {
            rows.push(format!("{p}.W_Q"), &[c, cp], a);
            rows.push(format!("{p}.b_Q"), &[cp], a);
        }
    }
    if v.use_link {
        rows.push("adapter.W_Q_cat".into(), &[3 * cp, cp], a);
        rows.push("adapter.b_Q_cat".into(), &[cp], a);
    }
}

/// Trainable backbone and adapter scalars for `mode`. `rein.c` and
/// `rein.depth` of 0 are taken from `vit`.
pub fn count_trainable(vit: &ViTConfig, rein: &ReinConfig, mode: FineTuneMode) -> Result<ParamReport> {
    let mut rein = rein.clone();
    if rein.c == 0 {
        rein.c = vit.dim;
    }
    if rein.depth == 0 {
        rein.depth = vit.depth;
    }
    if rein.c != vit.dim || rein.depth != vit.depth {
        return Err(Error::Config(format!(
            "adapter c={}, N={} does not fit backbone c={}, N={}",
            rein.c, rein.depth, vit.dim, vit.depth
        )));
    }
    let mut rows = Rows(Vec::new());
    let label = match mode {
        FineTuneMode::Freeze => "freeze".to_string(),
        FineTuneMode::Full => {
            vit.validate()?;
            backbone_rows(vit, &mut rows);
            "full".to_string()
        }
        FineTuneMode::Rein => {
            rein.validate()?;
            adapter_rows(&rein, &mut rows);
            rein.variant.label()
        }
    };
    let sum = |comp| rows.0.iter().filter(|r| r.component == comp).map(|r| r.count).sum::<u64>();
    let (backbone, adapter) = (sum(Component::Backbone), sum(Component::Adapter));
    Ok(ParamReport {
        mode,
        label,
        c_prime: rein.c_prime,
        backbone,
        adapter,
        total: backbone + adapter,
        rows: rows.0,
    })
}

pub fn count_model(cfg: &ModelConfig) -> Result<ParamReport> {
    count_trainable(&cfg.vit, &cfg.rein, cfg.mode)
}

/// `1234567` → `"1,234,567"`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl ParamReport {
    fn footer(&self) -> String {
        format!(
            "c_prime={} (query width): W_Q, b_Q and the query merge scale with it; 256 is the shipped default",
            self.c_prime
        )
    }

    pub fn to_text(&self) -> String {
        let shape = |s: &[usize]| format!("{s:?}");
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        let shape_w = self.rows.iter().map(|r| shape(&r.shape).len()).max().unwrap_or(0).max(5);
        let count_w = group_thousands(self.total).len().max(5);
        let mut out = String::new();
        writeln!(out, "mode: {}  variant: {}", self.mode, self.label).unwrap();
        writeln!(out, "{:<name_w$}  {:<shape_w$}  {:>count_w$}  component", "name", "shape", "count").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<name_w$}  {:<shape_w$}  {:>count_w$}  {}",
                r.name,
                shape(&r.shape),
                group_thousands(r.count),
                r.component
            )
            .unwrap();
        }
        writeln!(out, "backbone: {}", group_thousands(self.backbone)).unwrap();
        writeln!(out, "adapter:  {}", group_thousands(self.adapter)).unwrap();
        writeln!(
            out,
            "total:    {} ({:.2}M)",
            group_thousands(self.total),
            self.total as f64 / 1e6
        )
        .unwrap();
        writeln!(out, "# {}", self.footer()).unwrap();
        out
    }

    /// One row per tensor plus `total` rows per component and overall.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,shape,count,component\n");
        for r in &self.rows {
            let shape: Vec<String> = r.shape.iter().map(usize::to_string).collect();
            writeln!(out, "{},{},{},{}", r.name, shape.join("x"), r.count, r.component).unwrap();
        }
        writeln!(out, "total,,{},backbone", self.backbone).unwrap();
        writeln!(out, "total,,{},adapter", self.adapter).unwrap();
        writeln!(out, "total,,{},all", self.total).unwrap();
        writeln!(out, "# {}", self.footer()).unwrap();
        out
    }
}
