// The command-line pipeline run in-process: generate splits, pretrain,
// finetune, evaluate, then replay the evaluation from its manifest.

use lfm3d::cli::run;

fn lfm3d(args: &str) -> i32 {
    let argv: Vec<&str> = std::iter::once("lfm3d").chain(args.split_whitespace()).collect();
    run(argv)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let d = dir.path().display();
    let steps = [
        format!("gen --pairs 8 --baseline 15:75 --signal nocs --seed 1 --out {d}/train"),
        format!("gen --pairs 4 --baseline 90:120 --signal nocs --seed 2 --out {d}/eval"),
        format!("train --stage pretrain2d --data {d}/train --iters 10 --batch 1 --sinkhorn-iters 20 --lr 1e-3 --out {d}/2d.ckpt"),
        format!("train --stage finetune3d --init {d}/2d.ckpt --data {d}/train --signal nocs --pe on --iters 10 --batch 1 --lr 1e-3 --out {d}/3d.ckpt"),
        format!("eval --mode pr --method lfm3d --ckpt {d}/3d.ckpt --data {d}/eval --out {d}/pr"),
        format!("eval --mode pose --method pnp-dense --data {d}/eval --out {d}/pose"),
        format!("replay {d}/pose/run_manifest.json --out {d}/pose-again"),
    ];
    for step in &steps {
        let code = lfm3d(step);
        println!("lfm3d {} -> exit {code}", step.split_whitespace().take(3).collect::<Vec<_>>().join(" "));
        if code != 0 {
            return Err(format!("step failed: {step}").into());
        }
    }
    let report = std::fs::read_to_string(dir.path().join("pose/pose_report.csv"))?;
    print!("{report}");
    assert_eq!(report, std::fs::read_to_string(dir.path().join("pose-again/pose_report.csv"))?);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
