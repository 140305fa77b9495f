"""Smoke test for the `medvqa` extension module.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
Then run:                 python python/smoke_test.py   (or pytest python/)
"""

import json

import medvqa


def test_scoring():
    assert medvqa.normalize("  The Chest X-ray. ") == "chest x-ray"
    assert medvqa.exact_match("Yes.", "yes")
    assert medvqa.classify("What kind of image is this?", "x-ray", "chest x-ray") == ("RULE_CORRECT", "containment")
    assert medvqa.classify("Is the spleen present?", "on patient's left", "yes", "closed")[0] == "UNRESOLVED"
    assert medvqa.tenths_half_up(1, 8) == 125
    assert medvqa.tenths_half_up(0, 0) is None


def test_aggregate():
    rows = [
        {"id": "a", "answer_type": "open", "auto": "EXACT", "final": "CORRECT"},
        {"id": "b", "answer_type": "open", "auto": "RULE_CORRECT", "reason": "synonym", "final": "CORRECT"},
        {"id": "c", "answer_type": "closed", "auto": "UNRESOLVED", "final": "INCORRECT"},
    ]
    text = "".join(json.dumps(r) + "\n" for r in rows)
    assert medvqa.aggregate(text, "exact")["acc_overall"] == 33.3
    assert medvqa.aggregate(text)["acc_overall"] == 66.7


def test_prompts_and_counts():
    assert medvqa.vqa_prompt("Is the spleen present?").endswith("short answer: Is the spleen present? [/INST]")
    assert medvqa.caption_prompt(0) == "<Img><ImageHere></Img> [caption] Briefly describe this image"
    lora, projector, total = medvqa.count_trainable("full")
    assert lora == 33_554_432 and lora + projector == total
    assert (179, 272) in {(s[0], s[1]) for s in medvqa.find_counts(451, 212, 482, 375)}


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
