//! Assembled prompts must byte-match the checked-in files under `golden/`.

use medvqa_core::prompt::{
    assemble_caption_prompt, assemble_vqa_prompt, InstructionPool, CAPTION_SKELETON, VQA_SKELETON,
};

fn golden(name: &str) -> Vec<u8> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("golden").join(name);
    let bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(!bytes.ends_with(b"\n"), "{name} has a trailing newline");
    bytes
}

#[test]
fn skeletons() {
    assert_eq!(CAPTION_SKELETON.as_bytes(), golden("stage1_skeleton.txt"));
    assert_eq!(VQA_SKELETON.as_bytes(), golden("stage2_skeleton.txt"));
}

#[test]
fn stage1_first_instruction() {
    let p = assemble_caption_prompt(&InstructionPool::default(), 0).unwrap();
    assert_eq!(p.full_text().as_bytes(), golden("stage1_briefly_describe.txt"));
}

#[test]
fn stage2_question_substitution() {
    let p = assemble_vqa_prompt("Is the spleen present?").unwrap();
    assert_eq!(p.full_text().as_bytes(), golden("stage2_spleen_present.txt"));
}

#[test]
fn stage2_open_and_closed_share_template() {
    let open = assemble_vqa_prompt("What kind of image is this?").unwrap().full_text();
    let closed = assemble_vqa_prompt("Is the spleen present?").unwrap().full_text();
    let strip = |s: &str, q: &str| s.replacen(q, "{question}", 1);
    assert_eq!(strip(&open, "What kind of image is this?"), strip(&closed, "Is the spleen present?"));
    assert_eq!(strip(&open, "What kind of image is this?").as_bytes(), golden("stage2_skeleton.txt"));
}
