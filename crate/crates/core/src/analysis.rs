//! Depth-wise merge-coefficient summaries and activation dumps.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::save_tensors;
use crate::error::{Error, Result};
use crate::merge::MergeWeights;
use crate::nn::{Mode, Network};
use crate::params::ParamTree;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::ModelSpec;

pub const HEATMAP_HEADER: &str = "layer_name,depth_index,kernel_count,mean_w,std_w,min_w,max_w";

/// Statistics of `w = σ(α)`, the coefficient toward source b, over the
/// kernels of one conv layer. `std_w` is the population deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub layer_name: String,
    pub depth_index: usize,
    pub kernel_count: usize,
    pub mean_w: f64,
    pub std_w: f64,
    pub min_w: f64,
    pub max_w: f64,
}

pub fn heatmap_rows(weights: &MergeWeights, spec: &ModelSpec) -> Result<Vec<HeatmapRow>> {
    weights.check_matches(spec)?;
    Ok((0..weights.layer_count())
        .map(|layer| {
            let w = weights.layer_weights(layer);
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            HeatmapRow {
                layer_name: ModelSpec::conv_layer_name(layer),
                depth_index: layer,
                kernel_count: w.len(),
                mean_w: mean,
                std_w: var.sqrt(),
                min_w: w.iter().copied().fold(f64::INFINITY, f64::min),
                max_w: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut s = format!("{HEATMAP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:?},{:?},{:?},{:?}",
            r.layer_name, r.depth_index, r.kernel_count, r.mean_w, r.std_w, r.min_w, r.max_w
        )
        .expect("write to string");
    }
    s
}

pub fn export_heatmap(weights: &MergeWeights, spec: &ModelSpec, path: &Path) -> Result<Vec<HeatmapRow>> {
    let rows = heatmap_rows(weights, spec)?;
    std::fs::write(path, heatmap_csv(&rows)).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Mean coefficient over every kernel of the backbone.
pub fn aggregate_mean_w(weights: &MergeWeights) -> f64 {
    let (sum, n) = weights.iter().fold((0.0, 0usize), |(s, n), (addr, _)| {
        (s + weights.weight(addr).expect("own address"), n + 1)
    });
    sum / n as f64
}

/// Names accepted by [`collect_activations`] for a spec.
pub fn activation_names(spec: &ModelSpec) -> Vec<String> {
    let mut names = Vec::new();
    for (i, b) in spec.blocks.iter().enumerate() {
        names.push(format!("block{i}.conv"));
        if b.use_bn {
            names.push(format!("block{i}.bn"));
        }
        names.push(format!("block{i}.out"));
    }
    names.push("logits".to_string());
    names
}

/// Eval-mode activations of the requested layers.
pub fn collect_activations<T: Scalar>(net: &mut Network<T>, input: &Tensor<T>, layers: &[String]) -> Result<ParamTree> {
    let valid = activation_names(&net.spec);
    if let Some(bad) = layers.iter().find(|l| !valid.contains(l)) {
        return Err(Error::UnknownLayer {
            name: bad.clone(),
            valid,
        });
    }
    let mut out = ParamTree::new();
    for (name, t) in net.forward_with_taps(input, Mode::Eval)? {
        if layers.contains(&name) {
            out.insert(name, t);
        }
    }
    Ok(out)
}

/// Writes the requested activations in the checkpoint container format.
pub fn dump_activations<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    layers: &[String],
    path: &Path,
) -> Result<ParamTree> {
    let tree = collect_activations(net, input, layers)?;
    let meta = serde_json::json!({
        "kind": "activations",
        "model": net.spec.name,
        "input_shape": input.shape(),
    });
    save_tensors(&tree, &meta, path)?;
    Ok(tree)
}
