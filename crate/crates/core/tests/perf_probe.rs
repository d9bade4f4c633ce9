use cascade_volcomp::phantom::{generate_cohort, ContrastLaw, GrowthLaw, PhantomConfig};
use cascade_volcomp::pipeline::{train_stage, TrainConfig};

#[test]
#[ignore]
fn probe_step_time() {
    let cfg = PhantomConfig {
        dims: (40, 48, 40),
        spacing: (0.4, 0.4, 0.4),
        n_subjects: 4,
        age_grid: vec![3.0, 6.0, 9.0, 12.0, 18.0, 24.0],
        contrast: ContrastLaw::default(),
        seed: 7,
    };
    let t0 = std::time::Instant::now();
    let (cohort, _) = generate_cohort(&cfg, &GrowthLaw::default()).unwrap();
    eprintln!("phantom gen: {:?}", t0.elapsed());

    let mut tc = TrainConfig::generate_defaults();
    tc.base_channels = 8;
    tc.batch_size = 2;
    tc.max_steps = 6;
    let dir = tempfile::tempdir().unwrap();
    let t1 = std::time::Instant::now();
    let out = train_stage(&cohort, &tc, dir.path()).unwrap();
    eprintln!(
        "generate: {} steps in {:?} -> {:?}/step, last loss {}",
        tc.max_steps,
        t1.elapsed(),
        t1.elapsed() / tc.max_steps as u32,
        out.loss_log.last().unwrap().loss
    );

    let mut sc = TrainConfig::sr_defaults();
    sc.base_channels = 8;
    sc.batch_size = 1;
    sc.max_steps = 3;
    let t2 = std::time::Instant::now();
    let out2 = train_stage(&cohort, &sc, dir.path()).unwrap();
    eprintln!(
        "sr: {} steps in {:?} -> {:?}/step, last loss {}",
        sc.max_steps,
        t2.elapsed(),
        t2.elapsed() / sc.max_steps as u32,
        out2.loss_log.last().unwrap().loss
    );
}
