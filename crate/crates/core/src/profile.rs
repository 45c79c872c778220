//! Symbolic parameter and MAC accounting, layer by layer.
//!
//! Counts come from shape arithmetic alone; nothing is executed. Convolution
//! and linear layers contribute multiply-accumulates; BN, activations, pools,
//! and adds are tallied in a separate elementwise column and excluded from
//! the MAC total. Reports carry both MACs and 2*MACs so either FLOP
//! convention can be read off.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{BnLayer, ConvLayer, Model, TensorRole};
use crate::tensor::Element;

#[derive(Clone, Debug)]
pub struct ProfileRow {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
    pub elementwise: u64,
}

/// Counting conventions recorded with every report.
#[derive(Clone, Copy, Debug)]
pub struct Conventions {
    /// When true, the headline "GFLOPs" figure equals the MAC count (the
    /// dominant convention in the efficiency literature); the doubled count
    /// is always emitted alongside.
    pub macs_as_flops: bool,
    /// When true, BN running statistics count as parameters.
    pub count_bn_stats: bool,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            macs_as_flops: true,
            count_bn_stats: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub total_params: usize,
    pub total_macs: u64,
    /// `2 * total_macs`: the multiply-and-add-counted-separately convention.
    pub total_flops_2x: u64,
    pub total_elementwise: u64,
    pub conventions: Conventions,
}

/// Trainable parameter count; the convention flag can pull in BN running
/// statistics as well.
pub fn count_params(model: &Model, conventions: &Conventions) -> usize {
    let mut n = 0;
    model.visit_tensors(&mut |_, t, role| {
        let counted = match role {
            TensorRole::Param => true,
            TensorRole::RunningStat => conventions.count_bn_stats,
        };
        if counted {
            n += t.numel();
        }
    });
    n
}

/// Total multiply-accumulates for one forward pass at `input_shape`
/// (`[N, C, T, F]`).
pub fn count_macs(model: &Model, input_shape: &[usize]) -> Result<u64> {
    Ok(profile(model, input_shape)?.total_macs)
}

fn conv_row<E: Element>(
    name: String,
    layer: &ConvLayer<E>,
    in_shape: &[usize],
) -> Result<(ProfileRow, Vec<usize>)> {
    let (n, _cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = layer
        .spec
        .out_hw(h, w)
        .map_err(|e| Error::invalid(format!("{name}: {e}")))?;
    let ws = layer.weight.shape();
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let macs = (n * cout * cin_g * kh * kw * oh * ow) as u64;
    let params = layer.weight.numel() + layer.bias.as_ref().map_or(0, |b| b.numel());
    let out_shape = vec![n, cout, oh, ow];
    Ok((
        ProfileRow {
            name,
            kind: "conv",
            out_shape: out_shape.clone(),
            params,
            macs,
            elementwise: 0,
        },
        out_shape,
    ))
}

fn bn_row<E: Element>(
    name: String,
    layer: &BnLayer<E>,
    shape: &[usize],
    conventions: &Conventions,
) -> ProfileRow {
    let mut params = layer.gamma.numel() + layer.beta.numel();
    if conventions.count_bn_stats {
        params += layer.running_mean.numel() + layer.running_var.numel();
    }
    ProfileRow {
        name,
        kind: "bn",
        out_shape: shape.to_vec(),
        params,
        macs: 0,
        elementwise: numel(shape),
    }
}

fn pointwise_row(name: String, kind: &'static str, shape: &[usize]) -> ProfileRow {
    ProfileRow {
        name,
        kind,
        out_shape: shape.to_vec(),
        params: 0,
        macs: 0,
        elementwise: numel(shape),
    }
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// Walks the architecture mirroring the forward pass and accounts for every
/// op at the given input shape.
pub fn profile(model: &Model, input_shape: &[usize]) -> Result<ProfileReport> {
    profile_with(model, input_shape, Conventions::default())
}

pub fn profile_with(
    model: &Model,
    input_shape: &[usize],
    conventions: Conventions,
) -> Result<ProfileReport> {
    if input_shape.len() != 4 || input_shape[1] != model.config.in_channels {
        return Err(Error::invalid(format!(
            "profile input must be [N,{},T,F], got {input_shape:?}",
            model.config.in_channels
        )));
    }
    let mut rows: Vec<ProfileRow> = Vec::new();
    let mut shape = input_shape.to_vec();

    let (row, out) = conv_row("stem.conv".into(), &model.stem_conv, &shape)?;
    rows.push(row);
    shape = out;
    rows.push(bn_row("stem.bn".into(), &model.stem_bn, &shape, &conventions));
    rows.push(pointwise_row("stem.relu".into(), "relu", &shape));
    // 3x3 stride-2 max pool, padding 1
    let pool_h = (shape[2] + 2 - 3) / 2 + 1;
    let pool_w = (shape[3] + 2 - 3) / 2 + 1;
    shape = vec![shape[0], shape[1], pool_h, pool_w];
    rows.push(pointwise_row("stem.pool".into(), "maxpool", &shape));

    for (i, stage) in model.stages.iter().enumerate() {
        let sp = format!("stage{}", i + 1);
        if let Some(ds) = &stage.downsample {
            let (row, out) = conv_row(format!("{sp}.downsample.conv"), &ds.conv, &shape)?;
            rows.push(row);
            shape = out;
            rows.push(bn_row(format!("{sp}.downsample.bn"), &ds.bn, &shape, &conventions));
        }
        for (j, block) in stage.blocks.iter().enumerate() {
            let bp = format!("{sp}.block{}", j + 1);
            for br in &block.branches {
                let kp = format!("{bp}.branch{}", br.kernel);
                let (row, mid) = conv_row(format!("{kp}.dw_1xk"), &br.dw_row, &shape)?;
                rows.push(row);
                rows.push(bn_row(format!("{kp}.bn_1xk"), &br.bn_row, &mid, &conventions));
                rows.push(pointwise_row(format!("{kp}.relu_1xk"), "relu", &mid));
                let (row, out) = conv_row(format!("{kp}.dw_kx1"), &br.dw_col, &mid)?;
                rows.push(row);
                rows.push(bn_row(format!("{kp}.bn_kx1"), &br.bn_col, &out, &conventions));
                rows.push(pointwise_row(format!("{kp}.relu_kx1"), "relu", &out));
                debug_assert_eq!(out, shape, "branches are stride-1 same-padded");
            }
            let mut sum_row = pointwise_row(format!("{bp}.branch_sum"), "add", &shape);
            sum_row.elementwise = numel(&shape) * (block.branches.len() as u64 - 1);
            rows.push(sum_row);
            let (row, hidden) = conv_row(format!("{bp}.expand"), &block.expand, &shape)?;
            rows.push(row);
            rows.push(pointwise_row(format!("{bp}.relu"), "relu", &hidden));
            let (row, back) = conv_row(format!("{bp}.squeeze"), &block.squeeze, &hidden)?;
            rows.push(row);
            rows.push(bn_row(format!("{bp}.bn_out"), &block.bn_out, &back, &conventions));
            rows.push(pointwise_row(format!("{bp}.residual_add"), "add", &shape));
        }
    }

    shape = vec![shape[0], shape[1]];
    rows.push(pointwise_row("gap".into(), "gap", &shape));
    let n = shape[0];
    let (dout, din) = (model.head.weight.shape()[0], model.head.weight.shape()[1]);
    rows.push(ProfileRow {
        name: "head".into(),
        kind: "linear",
        out_shape: vec![n, dout],
        params: model.head.weight.numel() + model.head.bias.numel(),
        macs: (n * dout * din) as u64,
        elementwise: 0,
    });

    let total_params: usize = rows.iter().map(|r| r.params).sum();
    let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
    let total_elementwise: u64 = rows.iter().map(|r| r.elementwise).sum();
    debug_assert_eq!(total_params, count_params(model, &conventions));
    Ok(ProfileReport {
        rows,
        total_params,
        total_macs,
        total_flops_2x: 2 * total_macs,
        total_elementwise,
        conventions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            other => Err(Error::invalid(format!("unknown table format '{other}'"))),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn shape_str(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    parts.join("x")
}

/// Renders the table with a stable column order, the totals row last, and
/// the counting conventions spelled out.
pub fn emit_table(report: &ProfileReport, format: TableFormat) -> String {
    let conv = format!(
        "macs_as_flops={} count_bn_stats={}",
        report.conventions.macs_as_flops, report.conventions.count_bn_stats
    );
    match format {
        TableFormat::Csv => {
            let mut out = String::new();
            out.push_str("name,type,out_shape,params,macs,flops_2x,elementwise\n");
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    csv_field(&r.name),
                    r.kind,
                    shape_str(&r.out_shape),
                    r.params,
                    r.macs,
                    2 * r.macs,
                    r.elementwise
                );
            }
            let _ = writeln!(
                out,
                "TOTAL,,,{},{},{},{}",
                report.total_params, report.total_macs, report.total_flops_2x, report.total_elementwise
            );
            let _ = writeln!(out, "_conventions,{},,,,,", csv_field(&conv));
            out
        }
        TableFormat::Text => {
            let mut out = String::new();
            let name_w = report
                .rows
                .iter()
                .map(|r| r.name.len())
                .max()
                .unwrap_or(4)
                .max(5);
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<7}  {:>16}  {:>12}  {:>14}  {:>14}  {:>12}",
                "name", "type", "out_shape", "params", "macs", "flops(2x)", "elementwise"
            );
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<name_w$}  {:<7}  {:>16}  {:>12}  {:>14}  {:>14}  {:>12}",
                    r.name,
                    r.kind,
                    shape_str(&r.out_shape),
                    r.params,
                    r.macs,
                    2 * r.macs,
                    r.elementwise
                );
            }
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<7}  {:>16}  {:>12}  {:>14}  {:>14}  {:>12}",
                "TOTAL",
                "",
                "",
                report.total_params,
                report.total_macs,
                report.total_flops_2x,
                report.total_elementwise
            );
            let _ = writeln!(out, "conventions: {conv}");
            let _ = writeln!(
                out,
                "params {:.2}M  macs {:.2}G  flops(2x) {:.2}G",
                report.total_params as f64 / 1e6,
                report.total_macs as f64 / 1e9,
                report.total_flops_2x as f64 / 1e9
            );
            out
        }
    }
}
