use easel::config::{Ablation, RunConfig};
use easel::eval::evaluate;
use easel::train::Trainer;
use std::ops::ControlFlow;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mode: String = args.get(3).cloned().unwrap_or_else(|| "complement".into());
    let mut cfg = RunConfig::toy_discs();
    match mode.as_str() {
        "l2" => Ablation::L2Loss.apply(&mut cfg),
        "condgan" => Ablation::ConditionalGan.apply(&mut cfg),
        _ => {}
    }
    cfg.run.out_dir = std::env::temp_dir().join(format!("easel_learn_{seed}_{mode}"));
    let _ = std::fs::remove_dir_all(&cfg.run.out_dir);
    cfg.run.seed = seed;
    cfg.run.total_learner_steps = steps;
    cfg.run.checkpoint_every = 0;
    cfg.run.sample_every = 1000;
    let mut t = Trainer::new(cfg).unwrap();
    let start = std::time::Instant::now();
    t.run(&mut |tr, m| {
        if m.step % 200 == 0 {
            let report = evaluate(tr, tr.best_member(), 32, 999_000 + m.step).unwrap();
            println!(
                "step {:>5} [{:>6.1?}] reward {:+.3} l2 {:.5} blank {:.5} ratio {:.2} hue {:.2} disc {:.2}/{:.2} ent {:.2} lr {:.1e}",
                m.step,
                start.elapsed(),
                m.members[0].mean_final_score,
                report.mean_final_l2(),
                report.mean_blank_l2(),
                report.mean_final_l2() / report.mean_blank_l2(),
                report.hue_match_rate(),
                m.disc.as_ref().map(|d| d.real_acc).unwrap_or(0.0),
                m.disc.as_ref().map(|d| d.fake_acc).unwrap_or(0.0),
                m.members[0].learner.entropy,
                m.members[0].learning_rate,
            );
        }
        ControlFlow::Continue(())
    })
    .unwrap();
}
