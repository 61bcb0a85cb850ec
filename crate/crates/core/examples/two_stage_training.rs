// Pretrains a 2D matcher, finetunes it with NOCS positional encoding and
// matches a held-out pair with both models.

use lfm3d::evaluation::{score_matches, signal_mode_of};
use lfm3d::matcher::{
    batch_loss, extract_matches, train, MatcherConfig, SignalMode, Stage, TrainConfig, TrainSample,
};
use lfm3d::scenegen::{encoder_input, generate_dataset, generate_pair, PairConfig};

pub fn run_example() -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let cfg = PairConfig::default();
    let samples: Vec<TrainSample> =
        generate_dataset(&cfg, 24, 5)?.iter().map(|p| p.train_sample(SignalMode::Nocs)).collect();
    let base = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        iterations: 40,
        matcher: MatcherConfig { sinkhorn_iterations: 30, ..MatcherConfig::default() },
        ..TrainConfig::default()
    };

    let stage1 = train(&samples, &base, None)?;
    let finetune = TrainConfig { stage: Stage::Finetune3d, signal: SignalMode::Nocs, ..base };
    let stage2 = train(&samples, &finetune, Some(stage1.weights.clone()))?;
    let mean = |log: &[lfm3d::matcher::TrainLogEntry]| log.iter().map(|e| e.loss).sum::<f64>() / log.len() as f64;
    println!("pretrain mean loss {:.3}, finetune mean loss {:.3}", mean(&stage1.log), mean(&stage2.log));

    let held_out = generate_pair(&cfg, 999)?;
    let mut losses = (0.0, 0.0);
    for (name, weights, loss) in [("2d", &stage1.weights, &mut losses.0), ("3d", &stage2.weights, &mut losses.1)] {
        let mode = signal_mode_of(weights);
        let (a, b) = (encoder_input(&held_out.view_a, mode), encoder_input(&held_out.view_b, mode));
        let matches = extract_matches(&weights.match_pair(&a, &b)?.probabilities(), 0.0);
        let counts = score_matches(&matches, &held_out.labels.matches, a.len(), b.len())?;
        *loss = batch_loss(weights, &[&held_out.train_sample(mode)])?;
        println!("{name}: loss {:.3}, {} of {} matches correct", *loss, counts.num_correct, counts.num_predicted);
    }
    Ok(losses)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}
