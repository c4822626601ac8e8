//! Static parameter and FLOP accounting.
//!
//! Parameter counts come straight from the layer shapes: a conv weighs
//! `(Cin/groups)*Cout*kh*kw` plus `Cout` for its bias, batch norm weighs
//! `2C` (running statistics are state, not parameters), a linear layer
//! `in*out + out`.
//!
//! FLOPs use the convention 1 MAC = 2 FLOPs for convolutions and linear
//! layers (bias adds not counted), and 1 FLOP per processed element for
//! batch norm, activations, channel gating and pooling. Channel
//! concatenation moves memory without arithmetic and costs 0. The
//! elementwise stages contribute well under 1% of any total here; they
//! are included for completeness.

use serde::Serialize;

use crate::arch::Model;
use crate::blocks::{BlockSpec, PS_DILATIONS};
use crate::error::Result;
use crate::ops::{separable_parts, ConvSpec};
use crate::tensor::{dims, Dims};

#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub input_dims: [usize; 4],
    pub convention: String,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with aligned columns.
    pub fn render_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["stage".len(), "total".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let dims = self.input_dims;
        out.push_str(&format!(
            "input {}x{}x{}x{}  (flops = {})\n",
            dims[0], dims[1], dims[2], dims[3], self.convention
        ));
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>16}\n",
            "stage", "params", "flops"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>16}\n",
                r.name, r.params, r.flops
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>16}\n",
            "total", self.totals.params, self.totals.flops
        ));
        out
    }
}

struct Cost {
    params: u64,
    flops: u64,
}

impl Cost {
    fn zero() -> Cost {
        Cost { params: 0, flops: 0 }
    }

    fn add(&mut self, other: Cost) {
        self.params += other.params;
        self.flops += other.flops;
    }
}

fn conv_cost(spec: &ConvSpec, input: Dims) -> Result<(Cost, Dims)> {
    let out = spec.output_dims(input)?;
    let mut params = spec.weight_dims().count() as u64;
    if spec.bias {
        params += spec.out_channels as u64;
    }
    Ok((
        Cost {
            params,
            flops: 2 * spec.macs(input)?,
        },
        out,
    ))
}

fn bn_cost(channels: usize, d: Dims) -> Cost {
    Cost {
        params: 2 * channels as u64,
        flops: d.count() as u64,
    }
}

fn elementwise(d: Dims) -> Cost {
    Cost {
        params: 0,
        flops: d.count() as u64,
    }
}

fn linear_cost(in_features: usize, out_features: usize, n: usize) -> Cost {
    Cost {
        params: (in_features * out_features + out_features) as u64,
        flops: 2 * (in_features * out_features * n) as u64,
    }
}

fn conv_bn_relu_cost(spec: &ConvSpec, input: Dims) -> Result<(Cost, Dims)> {
    let (mut c, out) = conv_cost(spec, input)?;
    c.add(bn_cost(spec.out_channels, out));
    c.add(elementwise(out));
    Ok((c, out))
}

fn ds_conv_bn_relu_cost(spec: &ConvSpec, input: Dims) -> Result<(Cost, Dims)> {
    let (depth_spec, point_spec) = separable_parts(spec, true, true);
    let (mut c, mid) = conv_cost(&depth_spec, input)?;
    let (pc, out) = conv_cost(&point_spec, mid)?;
    c.add(pc);
    c.add(bn_cost(spec.out_channels, out));
    c.add(elementwise(out));
    Ok((c, out))
}

fn se_cost(channels: usize, reduction: usize, input: Dims) -> Cost {
    let squeezed = channels / reduction;
    let n = input.n;
    let mut c = elementwise(input);
    c.add(linear_cost(channels, squeezed, n));
    c.add(elementwise(dims(n, squeezed, 1, 1)));
    c.add(linear_cost(squeezed, channels, n));
    c.add(elementwise(dims(n, channels, 1, 1)));
    c.add(elementwise(input));
    c
}

fn lg_cost(in_ch: usize, out_ch: usize, input: Dims) -> Result<(Cost, Dims)> {
    let (mut c, out) = conv_bn_relu_cost(&ConvSpec::k3(in_ch, out_ch, 1), input)?;
    let (c3, _) = conv_bn_relu_cost(&ConvSpec::k3(in_ch, out_ch, 3), input)?;
    c.add(c3);
    let (cf, out) = conv_bn_relu_cost(&ConvSpec::k1(2 * out_ch, out_ch), dims(out.n, 2 * out_ch, out.h, out.w))?;
    c.add(cf);
    Ok((c, out))
}

fn block_cost(spec: &BlockSpec, input: Dims) -> Result<(Cost, Dims)> {
    match *spec {
        BlockSpec::ConvBlock { in_ch, out_ch } => {
            let (mut c, mid) = conv_bn_relu_cost(&ConvSpec::k3(in_ch, out_ch, 1), input)?;
            let (c2, out) = conv_bn_relu_cost(&ConvSpec::k3(out_ch, out_ch, 1), mid)?;
            c.add(c2);
            Ok((c, out))
        }
        BlockSpec::Se {
            channels,
            reduction,
        } => {
            let mut c = Cost::zero();
            let squeezed = channels / reduction;
            c.params = (channels * squeezed + squeezed + squeezed * channels + channels) as u64;
            c.flops = se_cost(channels, reduction, input).flops;
            Ok((c, input))
        }
        BlockSpec::Lg { in_ch, out_ch } => lg_cost(in_ch, out_ch, input),
        BlockSpec::Ls {
            in_ch,
            out_ch,
            se_reduction,
        } => {
            let (mut c, out) = lg_cost(in_ch, out_ch, input)?;
            let se = BlockSpec::Se {
                channels: out_ch,
                reduction: se_reduction,
            };
            let (sc, out) = block_cost(&se, out)?;
            c.add(sc);
            Ok((c, out))
        }
        BlockSpec::Ps {
            in_ch,
            out_ch,
            se_reduction,
        } => {
            let mut c = Cost::zero();
            let mut out = input;
            for d in PS_DILATIONS {
                let (bc, bout) = ds_conv_bn_relu_cost(&ConvSpec::k3(in_ch, out_ch, d), input)?;
                c.add(bc);
                out = bout;
            }
            let (cf, out) =
                conv_bn_relu_cost(&ConvSpec::k1(4 * out_ch, out_ch), dims(out.n, 4 * out_ch, out.h, out.w))?;
            c.add(cf);
            let se = BlockSpec::Se {
                channels: out_ch,
                reduction: se_reduction,
            };
            let (sc, out) = block_cost(&se, out)?;
            c.add(sc);
            Ok((c, out))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub params: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamsReport {
    pub rows: Vec<ParamRow>,
    pub total: u64,
}

/// Learnable parameters per stage. Independent of input size.
pub fn count_params(model: &Model) -> Result<ParamsReport> {
    // Any legal input works for the block walk; params ignore it.
    let depth = model.config().depth;
    let side = 1usize << depth;
    let report = count_flops(model, dims(1, model.config().in_channels, side, side))?;
    let rows = report
        .rows
        .into_iter()
        .filter(|r| r.params > 0)
        .map(|r| ParamRow {
            name: r.name,
            params: r.params,
        })
        .collect();
    Ok(ParamsReport {
        rows,
        total: report.totals.params,
    })
}

/// Per-stage parameter and FLOP table for a concrete input size.
pub fn count_flops(model: &Model, input: Dims) -> Result<CostReport> {
    model.validate_input(input)?;
    let blocks = model.block_specs();
    let ups = model.up_stages();
    let depth = model.config().depth;
    let mut rows: Vec<CostRow> = Vec::new();
    let mut push = |name: String, c: Cost| {
        rows.push(CostRow {
            name,
            params: c.params,
            flops: c.flops,
        });
    };

    let mut cur = input;
    let mut skip_dims = Vec::with_capacity(depth);
    for (path, spec) in &blocks[..depth] {
        let (c, out) = block_cost(spec, cur)?;
        push(path.clone(), c);
        skip_dims.push(out);
        push(format!("pool{}", skip_dims.len()), elementwise(out));
        cur = dims(out.n, out.c, out.h / 2, out.w / 2);
    }

    let (bpath, bspec) = &blocks[depth];
    let (c, out) = block_cost(bspec, cur)?;
    push(bpath.clone(), c);
    cur = out;

    for (i, (up_path, in_ch, out_ch)) in ups.iter().enumerate() {
        let up_macs = 4 * (cur.count() / cur.c * in_ch * out_ch) as u64;
        push(
            up_path.clone(),
            Cost {
                params: (in_ch * out_ch * 4) as u64,
                flops: 2 * up_macs,
            },
        );
        let skip = skip_dims[depth - 1 - i];
        cur = dims(skip.n, skip.c + out_ch, skip.h, skip.w);
        let (path, spec) = &blocks[depth + 1 + i];
        let (c, out) = block_cost(spec, cur)?;
        push(path.clone(), c);
        cur = out;
    }

    let (c, _) = conv_cost(&model.head_spec(), cur)?;
    push("head".to_string(), c);

    let totals = CostTotals {
        params: rows.iter().map(|r| r.params).sum(),
        flops: rows.iter().map(|r| r.flops).sum(),
    };
    Ok(CostReport {
        input_dims: [input.n, input.c, input.h, input.w],
        convention: "2*MACs".to_string(),
        rows,
        totals,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PsAsppComparison {
    pub aspp_params: u64,
    pub ps_params: u64,
    /// Whole-module parameter ratio, squeeze-excitation excluded from
    /// both sides.
    pub module_ratio: f64,
    /// Weights-only ratio of one ordinary branch to one separable branch:
    /// `9*in*out / (9*in + in*out)`.
    pub branch_ratio: f64,
}

/// Parameter comparison between the separable pyramid and the same
/// topology built from ordinary 3x3 convolutions.
pub fn compare_ps_vs_aspp(in_ch: usize, out_ch: usize) -> Result<PsAsppComparison> {
    let ps = BlockSpec::Ps {
        in_ch,
        out_ch,
        se_reduction: 1,
    };
    let ps_params: u64 = ps
        .param_decls("ps")?
        .iter()
        .filter(|d| d.learnable && !d.name.starts_with("ps.se."))
        .map(|d| d.dims.count() as u64)
        .sum();

    let mut aspp_params = 0u64;
    for _ in PS_DILATIONS {
        let branch = ConvSpec::k3(in_ch, out_ch, 1);
        aspp_params += branch.weight_dims().count() as u64 + out_ch as u64;
        aspp_params += 2 * out_ch as u64;
    }
    let fuse = ConvSpec::k1(4 * out_ch, out_ch);
    aspp_params += fuse.weight_dims().count() as u64 + out_ch as u64 + 2 * out_ch as u64;

    let ordinary_branch = (9 * in_ch * out_ch) as f64;
    let separable_branch = (9 * in_ch + in_ch * out_ch) as f64;
    Ok(PsAsppComparison {
        aspp_params,
        ps_params,
        module_ratio: aspp_params as f64 / ps_params as f64,
        branch_ratio: ordinary_branch / separable_branch,
    })
}
