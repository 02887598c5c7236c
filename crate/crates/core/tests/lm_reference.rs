//! Compares the encoder and tokenizers against outputs of the reference
//! implementation on tiny random checkpoints (see `fixtures/make_lm_fixtures.py`).

use std::path::PathBuf;

use okgit::lm::{Direction, MaskedLanguageModel, Prompt};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(model_dir: &str, reference: &str) {
    let model = MaskedLanguageModel::load(&fixture(model_dir), model_dir).unwrap();
    let refs: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(fixture(reference)).unwrap()).unwrap();
    for r in refs {
        let direction = match r["direction"].as_str().unwrap() {
            "tail" => Direction::Tail,
            _ => Direction::Head,
        };
        let prompt = Prompt::new(direction, r["np"].as_str().unwrap(), r["rp"].as_str().unwrap());
        let (ids, pos) = model.prompt_ids(&prompt);
        let want: Vec<u32> = r["ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u32).collect();
        assert_eq!(ids, want, "token ids for {prompt:?}");
        assert_eq!(pos as u64, r["mask_pos"].as_u64().unwrap());

        let hidden = model.mask_vector(&prompt).unwrap();
        for (a, b) in hidden.iter().zip(r["hidden"].as_array().unwrap()) {
            let b = b.as_f64().unwrap() as f32;
            assert!((a - b).abs() < 1e-4, "hidden {a} vs {b} for {prompt:?}");
        }

        let top = model.predict_mask(&prompt, 5).unwrap();
        let want_ids: Vec<u32> = r["top_ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u32).collect();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), want_ids);
        for (t, s) in top.iter().zip(r["top_scores"].as_array().unwrap()) {
            assert!((t.2 - s.as_f64().unwrap() as f32).abs() < 1e-3);
        }
    }
}

#[test]
fn wordpiece_encoder_matches_reference() {
    check("tiny-bert", "tiny-bert.reference.json");
}

#[test]
fn byte_bpe_encoder_matches_reference() {
    check("tiny-roberta", "tiny-roberta.reference.json");
}

#[test]
fn tail_np_never_enters_the_prompt() {
    let model = MaskedLanguageModel::load(&fixture("tiny-bert"), "tiny").unwrap();
    let a = model.mask_vector(&Prompt::new(Direction::Tail, "bach", "moved to")).unwrap();
    let b = model.mask_vector(&Prompt::new(Direction::Tail, "bach", "moved to")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
}
