use std::path::PathBuf;

use clap::Args;
use sparseattn::metrics::flops_report;
use sparseattn::schedule::{build_schedule, named_configs, CONFIG_NAMES};

use crate::artifacts;
use crate::Failure;

#[derive(Args)]
pub struct FlopsArgs {
    /// Sequence length.
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Model width.
    #[arg(long, default_value_t = 768, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    /// Feed-forward width for the extra column; defaults to 4·d.
    #[arg(long)]
    d_ff: Option<usize>,
    /// Directory for flops.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

pub fn run(args: FlopsArgs) -> Result<(), Failure> {
    let (n, d) = (args.n as usize, args.d as usize);
    let d_ff = args.d_ff.unwrap_or(4 * d);
    let configs = named_configs(6);
    let rows = CONFIG_NAMES
        .iter()
        .map(|name| Ok((name.to_string(), build_schedule(&configs[name])?.mean())))
        .collect::<Result<Vec<_>, sparseattn::Error>>()?;
    let report = flops_report(n, d, d_ff, &rows)?;

    println!("attention sublayer FLOPs, n={n}, d={d} (feed-forward column uses d_ff={d_ff})");
    println!(
        "{:<18} {:>8} {:>16} {:>16} {:>12} {:>10} {:>10}",
        "config", "sparsity", "attn FLOPs", "sparse FLOPs", "attn red %", "layer %", "+ffn %"
    );
    for r in &report.rows {
        println!(
            "{:<18} {:>8.2} {:>16.4e} {:>16.4e} {:>12.2} {:>10.2} {:>10.2}",
            r.config,
            r.attention_sparsity,
            r.dense_attention_flops,
            r.sparse_attention_flops,
            r.attention_reduction_pct,
            r.layer_reduction_pct,
            r.with_ffn_reduction_pct
        );
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    artifacts::write_json(&args.out.join("flops.json"), &report)
}
