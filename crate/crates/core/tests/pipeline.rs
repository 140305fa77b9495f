use medvqa_core::data::synth::{pattern_tensor_image, toy_questions, write_caption_corpus, write_vqa_corpus};
use medvqa_core::finetune::{
    load_checkpoint, load_stage_examples, run_stage, PromptSource, ScheduleSpec, StageConfig, TrainExample,
};
use medvqa_core::prompt::{assemble_caption_prompt, splice_embeddings, InstructionPool};
use medvqa_core::{Model, ModelConfig, Tape, Tensor};

fn logits(model: &Model, ex: &TrainExample) -> Tensor {
    let prompt = match &ex.prompt {
        PromptSource::Fixed(p) => p.clone(),
        PromptSource::CaptionPool(pool) => assemble_caption_prompt(pool, 0).unwrap(),
    };
    let mut tape = Tape::new();
    let f = tape.constant(ex.features.clone());
    let visual = model.project_to_lm(&mut tape, f).unwrap();
    let embeds = splice_embeddings(&mut tape, model, &prompt, Some(visual)).unwrap();
    let out = model.lm_forward(&mut tape, embeds).unwrap();
    tape.value(out).clone()
}

fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn toy_examples(model: &Model, n: usize, seed: u64) -> Vec<TrainExample> {
    toy_questions(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (q, a, _))| {
            let img = pattern_tensor_image(seed + i as u64, model.config.image_size);
            TrainExample::vqa(model, &img, &q, &a).unwrap()
        })
        .collect()
}

fn quick_stage(stage: u8, steps: u64, lr: f64) -> StageConfig {
    let mut cfg = StageConfig::new(stage, "");
    cfg.batch_size = 4;
    cfg.max_steps = Some(steps);
    cfg.schedule = ScheduleSpec {
        max_lr: lr,
        warmup_lr: lr / 10.0,
        min_lr: 0.0,
        warmup_steps: Some(5),
    };
    cfg
}

#[test]
fn zero_init_adapters_are_transparent() {
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let ex = &toy_examples(&model, 2, 11)[1];
    let with = logits(&model, ex);
    model.set_lora_enabled(false);
    let without = logits(&model, ex);
    assert_eq!(with.data(), without.data());
}

#[test]
fn merged_matches_unmerged_after_training() {
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let examples = toy_examples(&model, 4, 5);
    let report = run_stage(&quick_stage(2, 100, 5e-3), &mut model, &examples, None).unwrap();
    assert_eq!(report.steps, 100);
    assert!(report.changed_params.iter().any(|n| n.ends_with("lora_B")));

    let unmerged: Vec<Tensor> = examples.iter().map(|e| logits(&model, e)).collect();
    let mut merged_model = model.clone();
    merged_model.merge_adapters().unwrap();
    for (e, u) in examples.iter().zip(&unmerged) {
        let err = max_rel_diff(u, &logits(&merged_model, e));
        assert!(err <= 1e-10, "merged vs unmerged relative error {err:e}");
    }
    merged_model.unmerge_adapters().unwrap();
    assert_eq!(merged_model, model);
}

#[test]
fn stage_one_checkpoint_feeds_stage_two() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    std::fs::create_dir(&run_dir).unwrap();
    let captions = write_caption_corpus(&dir.path().join("captions"), 6, 1).unwrap();
    let vqa = write_vqa_corpus(&dir.path().join("vqa"), 6, 2, 2).unwrap();

    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let mut s1 = quick_stage(1, 10, 1e-3);
    s1.dataset_path = captions;
    let ex1 = load_stage_examples(&s1, &model).unwrap();
    assert_eq!(ex1.len(), 6);
    let r1 = run_stage(&s1, &mut model, &ex1, Some(&run_dir)).unwrap();
    let ckpt = r1.checkpoint_path.clone().unwrap();
    assert!(run_dir.join("stage1_report.json").exists());

    let mut resumed = load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.params, model.params);

    let mut s2 = quick_stage(2, 10, 1e-3);
    s2.dataset_path = vqa;
    let ex2 = load_stage_examples(&s2, &resumed).unwrap();
    assert_eq!(ex2.len(), 6);
    let r2 = run_stage(&s2, &mut resumed, &ex2, Some(&run_dir)).unwrap();
    assert_eq!(r2.frozen_checksum_before, r1.frozen_checksum_after);
    assert_eq!(r2.frozen_checksum_after, r1.frozen_checksum_before);
    for name in &r2.changed_params {
        assert!(name.starts_with("projector.") || name.contains(".lora_"), "{name} changed");
    }
    assert!(run_dir.join("stage2.ckpt").exists());
    assert!(r2.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn caption_pool_examples_train() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let img = pattern_tensor_image(3, model.config.image_size);
    let ex = TrainExample::caption(&model, &img, "a bright square", &InstructionPool::default()).unwrap();
    let mut m = model.clone();
    let r = run_stage(&quick_stage(1, 6, 1e-3), &mut m, &[ex], None).unwrap();
    assert_eq!(r.losses.len(), 6);
}
