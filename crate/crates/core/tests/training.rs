use wavcube::audio::{synth_corpus, Corpus, CorpusSpec, Split};
use wavcube::cli::RunConfig;
use wavcube::data::CropSampler;
use wavcube::features::build_toy_encoder;
use wavcube::train::{
    train_stage, Checkpoint, RunSink, StepMetrics, TrainState, GROUP_COMPRESSOR, GROUP_DECODER, GROUP_RESTORER,
    REFERENCE, TRAIN_DTYPE,
};

fn corpus() -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        n_utts: 16,
        dur_range: (1.0, 1.2),
        ..CorpusSpec::default()
    };
    synth_corpus(&spec, dir.path()).unwrap();
    let c = Corpus::load(dir.path().join("manifest.jsonl")).unwrap();
    (dir, c)
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::tiny();
    for s in [&mut c.stage1, &mut c.stage2] {
        s.batch = 2;
        s.crop_frames = 10;
        s.total_steps = 20;
        s.warmup_steps = 4;
        s.log_every = 1;
        s.checkpoint_every = 1000;
    }
    c
}

fn stage1_state(cfg: &RunConfig) -> TrainState {
    let enc = build_toy_encoder(&cfg.encoder, 11, TRAIN_DTYPE).unwrap();
    TrainState::stage1(cfg.model(), cfg.stage1.clone(), &enc).unwrap()
}

#[test]
fn stage1_acoustic_gradients_stop_at_the_latent() {
    let (_d, corpus) = corpus();
    for adversarial_start in [0, 5000] {
        let mut cfg = small_config();
        cfg.stage1.adversarial_start = adversarial_start;
        let state = stage1_state(&cfg);
        let sampler = CropSampler::new(&corpus, Split::Train, 2, 10, 3).unwrap();
        let batch = sampler.batch_at(&corpus, 0, TRAIN_DTYPE).unwrap();
        let r = state.gradient_report(&batch).unwrap();
        for g in [GROUP_COMPRESSOR, GROUP_RESTORER, REFERENCE] {
            assert_eq!(r.acoustic[g], 0.0, "acoustic gradient leaked into {g}");
        }
        assert!(r.acoustic[GROUP_DECODER] > 0.0);
        assert!(r.semantic[GROUP_COMPRESSOR] > 0.0);
        assert_eq!(r.semantic[GROUP_DECODER], 0.0);
        assert_eq!(r.semantic[REFERENCE], 0.0);
    }
}

#[test]
fn stage1_without_semantic_weight_leaves_bottleneck_bytes() {
    let (_d, corpus) = corpus();
    let mut cfg = small_config();
    cfg.stage1.lambda_sem = 0.0;
    cfg.stage1.adversarial_start = 0;
    let mut state = stage1_state(&cfg);
    let before = (
        state.adapter.compressor_store.digest().unwrap(),
        state.adapter.restorer_store.digest().unwrap(),
        state.decoder.store.digest().unwrap(),
    );
    train_stage(&mut state, &corpus, &RunSink::default(), Some(3)).unwrap();
    assert_eq!(state.adapter.compressor_store.digest().unwrap(), before.0);
    assert_eq!(state.adapter.restorer_store.digest().unwrap(), before.1);
    assert_ne!(state.decoder.store.digest().unwrap(), before.2);
}

fn run(cfg: &RunConfig, corpus: &Corpus, interrupt_at: Option<u64>) -> (Vec<StepMetrics>, Vec<u8>) {
    let mut state = stage1_state(cfg);
    let mut log = Vec::new();
    if let Some(k) = interrupt_at {
        log.extend(train_stage(&mut state, corpus, &RunSink::default(), Some(k)).unwrap());
        let bytes = state.to_checkpoint().unwrap().to_bytes().unwrap();
        drop(state);
        state = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    }
    log.extend(train_stage(&mut state, corpus, &RunSink::default(), None).unwrap());
    (log, state.to_checkpoint().unwrap().to_bytes().unwrap())
}

#[test]
fn resumed_stage1_matches_uninterrupted_run_bit_for_bit() {
    let (_d, corpus) = corpus();
    let mut cfg = small_config();
    // Cross the adversarial onset after the resume point.
    cfg.stage1.adversarial_start = 14;
    let (full, full_ck) = run(&cfg, &corpus, None);
    let (resumed, resumed_ck) = run(&cfg, &corpus, Some(8));
    assert_eq!(full.len(), 20);
    assert_eq!(full, resumed);
    assert_eq!(full_ck, resumed_ck);
    let again = run(&cfg, &corpus, None);
    assert_eq!(again.0, full);
}

#[test]
fn resumed_stage2_matches_uninterrupted_run_bit_for_bit() {
    let (_d, corpus) = corpus();
    let cfg = small_config();
    let mut s1 = stage1_state(&cfg);
    train_stage(&mut s1, &corpus, &RunSink::default(), Some(4)).unwrap();
    let init = s1.to_checkpoint().unwrap();
    let go = |interrupt: Option<u64>| {
        let mut s = TrainState::stage2(&init, cfg.stage2.clone()).unwrap();
        let mut log = Vec::new();
        if let Some(k) = interrupt {
            log.extend(train_stage(&mut s, &corpus, &RunSink::default(), Some(k)).unwrap());
            s = TrainState::from_checkpoint(&s.to_checkpoint().unwrap()).unwrap();
        }
        log.extend(train_stage(&mut s, &corpus, &RunSink::default(), None).unwrap());
        log
    };
    let full = go(None);
    assert_eq!(full.len(), 20);
    assert_eq!(full, go(Some(10)));
}
