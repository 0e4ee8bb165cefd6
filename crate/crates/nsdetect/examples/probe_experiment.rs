// full-scale single-seed probe of the directional experiment
use nsdetect::phantom::{ExamCountDist, PhantomSpec};
use nsdetect::pipeline::{run_experiment, CorpusSource, ExperimentConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let labeled: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let unlabeled: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(160);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = std::path::PathBuf::from(format!("/tmp/nsdetect_full_{seed}"));
    let _ = std::fs::remove_dir_all(&out);
    let mut cfg = ExperimentConfig::default();
    cfg.corpus = CorpusSource::Phantom {
        spec: PhantomSpec::default(),
        labeled_patients: labeled,
        unlabeled_patients: unlabeled,
        exams_per_patient: ExamCountDist::fixed(1),
    };
    cfg.train.iterations = iters;
    cfg.train.seed = seed;
    let t0 = std::time::Instant::now();
    let manifest = run_experiment(&cfg, &out).unwrap();
    println!("experiment took {:.1}s", t0.elapsed().as_secs_f64());
    println!("failures: {:?}", manifest.failures);
    for row in &manifest.summary {
        println!(
            "{} {} @{:.2}: {}",
            row.sweep_label,
            row.stage,
            row.sensitivity,
            row.afp.map(|v| format!("{v:.2}")).unwrap_or("unattainable".into())
        );
    }
}
