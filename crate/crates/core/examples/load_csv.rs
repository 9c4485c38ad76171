//! Load a PeMS-format traffic CSV and adjacency list, window it, and score
//! the historical-average baseline.
//!
//! ```text
//! cargo run --release --example load_csv -- traffic.csv adjacency.csv
//! ```
//! Without arguments a small synthetic pair is written to a temp dir first.

use std::path::PathBuf;

use lightst::data::{
    load_traffic_csv, make_windows, synth_generate, write_traffic_csv, Split, SynthConfig,
    WindowConfig,
};
use lightst::eval::HistoricalAverage;
use lightst::graph::{load_adjacency_csv, GraphOptions};

fn main() -> lightst::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let (traffic_path, adjacency_path) = if args.len() == 2 {
        (args[0].clone(), args[1].clone())
    } else {
        let dir = std::env::temp_dir().join("lightst-load-csv");
        std::fs::create_dir_all(&dir).map_err(|e| lightst::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let (t, g) = synth_generate(&SynthConfig {
            nodes: 20,
            ..SynthConfig::default()
        })?;
        write_traffic_csv(&t, &dir.join("traffic.csv"))?;
        g.write_csv(&dir.join("adjacency.csv"))?;
        (dir.join("traffic.csv"), dir.join("adjacency.csv"))
    };
    let traffic = load_traffic_csv(&traffic_path, 5)?;
    let graph = load_adjacency_csv(
        &adjacency_path,
        traffic.num_nodes(),
        GraphOptions::default(),
    )?;
    let data = make_windows(&traffic, &WindowConfig::default())?;
    println!(
        "{} sensors, {} steps, {} edges; windows train/val/test = {}/{}/{}",
        traffic.num_nodes(),
        traffic.num_steps(),
        graph.num_edges(),
        data.starts(Split::Train).len(),
        data.starts(Split::Val).len(),
        data.starts(Split::Test).len()
    );
    let ha = HistoricalAverage::fit(&data, Some(288))?.evaluate(&data, Split::Test, 1.0)?;
    println!(
        "historical average: MAE {:.3}  RMSE {:.3}  MAPE {:?}",
        ha.mae, ha.rmse, ha.mape
    );
    Ok(())
}
