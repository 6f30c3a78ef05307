use grounder::toybench::{eval_corpus, evaluate, train, EvalMode, LossSet, ToyConfig};

#[test]
fn probe() {
    for (name, seed, epochs, lr) in [
        ("e700-lr03-s1", 1u64, 700usize, 0.03),
        ("e700-lr03-s2", 2, 700, 0.03),
        ("e700-lr03-s3", 3, 700, 0.03),
        ("e800-lr03-s1", 1, 800, 0.03),
        ("e800-lr025-s2", 2, 800, 0.025),
    ] {
        let mut cfg = ToyConfig::default();
        cfg.seed = seed;
        cfg.capacity = 24;
        cfg.train_scenes = 500;
        cfg.eval_scenes = 200;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.multiple_prob = 0.6;
        cfg.loss.w_attribute = 1.0;
        cfg.loss.w_main = 2.0;
        cfg.losses_enabled = LossSet { position: true, semantic: true };
        let t0 = std::time::Instant::now();
        let (model, _) = train(&cfg).unwrap();
        let eval = eval_corpus(&cfg).unwrap();
        let acc = evaluate(&model, &eval, EvalMode::Regular, &cfg).unwrap();
        let masked = evaluate(&model, &eval, EvalMode::Masked, &cfg).unwrap();
        println!("RES {name}: regular={acc:.3} masked={masked:.3} secs={}", t0.elapsed().as_secs());
    }
}
