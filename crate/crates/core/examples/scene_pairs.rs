// Renders one synthetic object from two cameras, labels the keypoints and
// stores the pair on disk.

use lfm3d::scenegen::io::{read_dataset, write_dataset};
use lfm3d::scenegen::{generate_pair, PairConfig, ScenePair, EVAL_BASELINE};

pub fn run_example() -> Result<ScenePair, Box<dyn std::error::Error>> {
    let cfg = PairConfig { baseline_deg: EVAL_BASELINE, ..PairConfig::default() };
    let pair = generate_pair(&cfg, 11)?;
    println!(
        "{} pair at {:.1} deg: {} + {} keypoints, {} matches, {} + {} unmatched",
        pair.class.name(),
        pair.baseline_deg,
        pair.view_a.features.len(),
        pair.view_b.features.len(),
        pair.labels.matches.len(),
        pair.labels.unmatched_a.len(),
        pair.labels.unmatched_b.len(),
    );
    println!("estimated NOCS map covers {} pixels of view A", pair.view_a.nocs.num_valid());

    let dir = tempfile::tempdir()?;
    let records = write_dataset(dir.path(), std::slice::from_ref(&pair))?;
    println!("wrote {}", records[0].file);
    let back = read_dataset(dir.path())?;
    assert_eq!(back[0], pair);
    Ok(pair)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
