// Precision/recall curves and pose accuracy for a few methods, written as
// CSV reports.

use lfm3d::baselines::PnpMode;
use lfm3d::evaluation::{
    area_under_pr, emit_report, max_recall_point, pose_eval, pr_curve, uniform_thresholds, EvalResults, Method,
};
use lfm3d::scenegen::{generate_dataset, PairConfig, EVAL_BASELINE};

pub fn run_example() -> Result<EvalResults, Box<dyn std::error::Error>> {
    let cfg = PairConfig { baseline_deg: EVAL_BASELINE, ..PairConfig::default() };
    let data = generate_dataset(&cfg, 12, 2)?;
    let thresholds = uniform_thresholds(21);

    let mut results = EvalResults::default();
    for method in [Method::Mnn, Method::Ratio(0.8), Method::Oracle] {
        let curve = pr_curve(&method, &data, &thresholds)?;
        let top = max_recall_point(&curve).expect("non-empty curve");
        println!("{}: AUC {:.3}, max recall {:.3} at precision {:.3}", method.name(), area_under_pr(&curve), top.recall, top.precision);
        results.curves.push((method.name(), curve));
    }
    for method in [Method::Mnn, Method::Oracle, Method::Pnp(PnpMode::Dense)] {
        let r = pose_eval(&method, &data, 0)?;
        println!("{}: acc@5 {:.2}, acc@10 {:.2}, acc@15 {:.2}", r.method, r.acc5, r.acc10, r.acc15);
        results.poses.push(r);
    }

    let dir = tempfile::tempdir()?;
    for path in emit_report(&results, dir.path())? {
        println!("wrote {}", path.file_name().unwrap_or_default().to_string_lossy());
    }
    Ok(results)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
