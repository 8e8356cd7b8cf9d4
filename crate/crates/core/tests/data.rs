use std::fs;

use vtqa_core::data::{load_dataset, write_dataset_with_sidecar, Splits};
use vtqa_core::model::Vocabs;
use vtqa_core::synth::{clue_sentence_index, generate_synthetic, SynthConfig};

fn small(seed: u64, clue_rate: f64) -> Splits {
    generate_synthetic(&SynthConfig {
        n_samples: 100,
        clue_rate,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn synthetic_splits_survive_the_file_round_trip() {
    let splits = small(11, 0.9);
    let dir = tempfile::tempdir().unwrap();
    splits.write_dir(dir.path()).unwrap();
    assert_eq!(Splits::read_dir(dir.path()).unwrap(), splits);
}

#[test]
fn sidecar_files_are_picked_up_next_to_splits() {
    let splits = small(12, 0.9);
    let dir = tempfile::tempdir().unwrap();
    for (name, part) in Splits::FILES.iter().zip(splits.parts()) {
        let path = dir.path().join(name);
        write_dataset_with_sidecar(&path, &Splits::sidecar_path(&path), part).unwrap();
    }
    let train_text = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert!(!train_text.contains("\"visual\""));
    // Synthetic features are generated at f32 precision, so narrowing is lossless.
    assert_eq!(Splits::read_dir(dir.path()).unwrap(), splits);

    let path = dir.path().join("val.jsonl");
    assert!(load_dataset(&path, None).is_err());
}

#[test]
fn validation_and_test_splits_are_optional() {
    let splits = small(13, 0.9);
    let dir = tempfile::tempdir().unwrap();
    splits.write_dir(dir.path()).unwrap();
    fs::remove_file(dir.path().join("val.jsonl")).unwrap();
    fs::remove_file(dir.path().join("test.jsonl")).unwrap();
    let read = Splits::read_dir(dir.path()).unwrap();
    assert_eq!(read.train, splits.train);
    assert!(read.val.is_empty() && read.test.is_empty());

    fs::remove_file(dir.path().join("train.jsonl")).unwrap();
    assert!(Splits::read_dir(dir.path()).is_err());
}

#[test]
fn every_synthetic_sample_prepares_against_train_vocabularies() {
    let splits = small(14, 1.0);
    let vocabs = Vocabs::build(&splits.train, 1).unwrap();
    for record in splits.parts().into_iter().flatten() {
        let s = vocabs.prepare(record).unwrap();
        assert_eq!(s.visual.rows(), s.properties.len());
        assert_eq!(s.paragraph.len(), record.paragraph.len());
        assert!(clue_sentence_index(record).is_some(), "{record:?}");
    }
    // Training answers are always in vocabulary.
    let train = vocabs.prepare_all(&splits.train).unwrap();
    assert!(train.iter().all(|s| s.target.is_some()));
}

#[test]
fn without_clues_no_sentence_contains_the_answer() {
    let splits = small(15, 0.0);
    for record in splits.parts().into_iter().flatten() {
        assert_eq!(clue_sentence_index(record), None, "{record:?}");
    }
}
