//! Generate a toy corpus the shipped `toy:<seed>` adapter retrieves almost
//! perfectly, so the full attack-image / attack-text / evaluate pipeline
//! can be exercised without any real model or dataset.
//!
//! ```text
//! cargo run -p uapforge --example make_toy_data -- --out toy-data --adapter-seed 3
//! ```

use clap::Parser;
use uapforge::adapter::ToyDualEncoder;
use uapforge::dataset::{write_manifest, Geometry};

#[derive(Parser)]
struct Opts {
    /// Output directory for the manifest and image files.
    #[arg(long, default_value = "toy-data")]
    out: std::path::PathBuf,
    /// Seed of the toy encoder the corpus is aligned to; pass the same
    /// value to the CLI as `--adapter toy:<seed>`.
    #[arg(long, default_value_t = 3)]
    adapter_seed: u64,
    /// Corpus seed.
    #[arg(long, default_value_t = 200)]
    data_seed: u64,
    /// Number of image-text pairs (two captions each).
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
}

fn main() {
    let opts = Opts::parse();
    let geometry = Geometry::new(opts.height, opts.width, 3);
    let encoder = ToyDualEncoder::new(opts.adapter_seed, geometry, 32);
    let dataset = encoder
        .aligned_dataset(opts.data_seed, opts.pairs, 96, 5)
        .expect("toy corpus generation");
    let manifest = write_manifest(&dataset, &opts.out).expect("write manifest");
    println!("wrote {} pairs to {}", dataset.n(), manifest.display());
    println!("next:");
    println!(
        "  uapforge attack-image --manifest {} --adapter toy:{} --out uap.bin",
        manifest.display(),
        opts.adapter_seed
    );
    println!(
        "  uapforge attack-text  --manifest {} --adapter toy:{} --out triggers.json",
        manifest.display(),
        opts.adapter_seed
    );
    println!(
        "  uapforge evaluate     --manifest {} --adapter toy:{} --uap uap.bin --triggers triggers.json --k 1,5,10",
        manifest.display(),
        opts.adapter_seed
    );
}
