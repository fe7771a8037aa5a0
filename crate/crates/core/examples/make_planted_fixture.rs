//! Regenerates testdata/planted from the hierarchical planted generator.
//!
//! cargo run -p mrlrac --example make_planted_fixture

use std::path::Path;

use mrlrac::io::{self, ClusterOrder};
use mrlrac::rac::ClusterTree;
use mrlrac::synth::{planted_hierarchy, HierarchyShape};

fn main() -> mrlrac::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/planted");
    let planted = planted_hierarchy(2024, HierarchyShape::default())?;
    let m = &planted.matrix;
    io::write_embeddings(&dir.join("embeddings.bin"), m)?;
    io::write_ids(&dir.join("ids.txt"), m.ids())?;
    let l = planted.lambdas;
    let config = format!("# thresholds for theme, topic, story\nlambdas = [{}, {}, {}]\ntau = 0.05\ntop_k = 5\n", l[0], l[1], l[2]);
    io::write_atomic(&dir.join("config.toml"), config.as_bytes())?;
    let gold = ClusterTree::from_partitions(m.n(), planted.layers.clone())?;
    let json = io::tree_to_json(&gold, m.ids(), ClusterOrder::ById)?;
    io::write_atomic(&dir.join("gold_tree.json"), json.as_bytes())?;
    println!("wrote {} rows of dimension {} to {}", m.n(), m.d(), dir.display());
    Ok(())
}
