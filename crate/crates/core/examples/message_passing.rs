//! Normalized adjacency, one round of message passing, and the walk-sum view
//! of repeated propagation.

use lightst::graph::{path_expansion_oracle, SpatialGraph, DEFAULT_WALK_CAP};
use lightst::Tensor;

fn main() -> lightst::Result<()> {
    // A triangle with a pendant node.
    let g = SpatialGraph::from_pairs(4, &[(0, 1), (1, 2), (0, 2), (2, 3)])?;
    println!("degrees {:?}", g.degrees());
    let a = g.normalized_adjacency();
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:.4}", a.get(&[i, j]))).collect();
        println!("A[{i}] = [{}]", row.join(", "));
    }

    let e0 = Tensor::identity(4);
    let mut power = e0.clone();
    for depth in 1..=3 {
        power = g.propagate(&power)?;
        let walks = path_expansion_oracle(&g, depth, &e0, DEFAULT_WALK_CAP)?;
        println!(
            "depth {depth}: max |A^L E0 - walk sum| = {:.2e}",
            power.max_abs_diff(&walks)
        );
    }
    Ok(())
}
