//! Generate community-structured synthetic traffic and write it in the CSV
//! formats the loaders read.
//!
//! ```text
//! cargo run --release --example synthetic_data -- out_dir
//! ```

use std::path::PathBuf;

use lightst::data::{synth_generate, write_traffic_csv, SynthConfig};

fn main() -> lightst::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "synthetic".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| lightst::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let cfg = SynthConfig::default();
    let (traffic, graph) = synth_generate(&cfg)?;
    write_traffic_csv(&traffic, &out.join("traffic.csv"))?;
    graph.write_csv(&out.join("adjacency.csv"))?;

    println!(
        "{} nodes x {} steps, {} edges",
        traffic.num_nodes(),
        traffic.num_steps(),
        graph.num_edges()
    );
    for c in 0..cfg.communities {
        let members: Vec<usize> = (0..cfg.nodes)
            .filter(|&n| cfg.community_of(n) == c)
            .collect();
        let mean = members
            .iter()
            .map(|&n| traffic.series(n).iter().sum::<f64>() / traffic.num_steps() as f64)
            .sum::<f64>()
            / members.len() as f64;
        println!(
            "community {c}: {} nodes, mean volume {mean:.1}",
            members.len()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
