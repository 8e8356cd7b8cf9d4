//! Seeded synthetic scenes with planted textual clues.
//!
//! Each scene holds 2–5 objects. An object's visual feature is a fixed
//! per-name prototype plus Gaussian noise, so vision can tell *what* an
//! object is but nothing about its color, how many there are or what it is
//! doing. Each object carries a color, a size and what it is doing as
//! attributes, which reach the model through the property sentences
//! (`"cow is brown large grazing"`). The paragraph names every object with
//! its size and, with probability `clue_rate`, adds one clue sentence that
//! states the answer verbatim.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_answer, SampleRecord, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::normalize_words;

/// Word pools the generator draws from. Names must pluralise with `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub names: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub actions: Vec<String>,
    /// Count words for 1, 2, 3, …
    pub counts: Vec<String>,
}

fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            names: words(&[
                "cow", "dog", "cat", "horse", "bird", "car", "boat", "kite", "truck", "elephant",
                "zebra", "giraffe",
            ]),
            colors: words(&[
                "red", "blue", "green", "yellow", "white", "black", "brown", "gray", "orange",
                "pink",
            ]),
            sizes: words(&["small", "large", "tall"]),
            actions: words(&[
                "grazing", "running", "sitting", "sleeping", "standing", "eating", "walking",
                "resting",
            ]),
            counts: words(&["one", "two", "three", "four"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub lexicon: Lexicon,
    /// Standard deviation of the visual noise.
    pub noise: f64,
    /// Probability that a scene's paragraph carries the answer verbatim.
    pub clue_rate: f64,
    pub seed: u64,
    pub feature_dim: usize,
    /// Train / val / test percentages; must sum to 100.
    pub split_percent: [usize; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            lexicon: Lexicon::default(),
            noise: 0.5,
            clue_rate: 0.9,
            seed: 0,
            feature_dim: 64,
            split_percent: [80, 10, 10],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.clue_rate) {
            return Err(Error::Config(format!(
                "clue rate must lie in [0, 1], got {}",
                self.clue_rate
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise must be a finite value ≥ 0, got {}",
                self.noise
            )));
        }
        if self.split_percent.iter().sum::<usize>() != 100 {
            return Err(Error::Config("split percentages must sum to 100".into()));
        }
        let lx = &self.lexicon;
        if lx.names.len() < 2
            || [&lx.colors, &lx.sizes, &lx.actions, &lx.counts]
                .iter()
                .any(|pool| pool.is_empty())
        {
            return Err(Error::Config(
                "lexicon needs ≥ 2 names and non-empty color/size/action/count pools".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    /// Exact `(train, val, test)` sizes; val and test round down.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let val = self.n_samples * self.split_percent[1] / 100;
        let test = self.n_samples * self.split_percent[2] / 100;
        (self.n_samples - val - test, val, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum QuestionKind {
    Color,
    Count,
    Action,
}

const MAX_OBJECTS: usize = 5;

/// Generates the three splits. Fully determined by the config.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Splits> {
    config.validate()?;
    let lx = &config.lexicon;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes: Vec<Vec<f64>> = lx
        .names
        .iter()
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut samples: Vec<SampleRecord> = (0..config.n_samples)
        .map(|i| {
            let id = format!("syn-{}-{i:06}", config.seed);
            scene(&mut rng, config, &prototypes, &noise, id)
        })
        .collect();

    let (n_train, n_val, _) = config.split_sizes();
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(Splits {
        train: samples,
        val,
        test,
    })
}

fn scene(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    prototypes: &[Vec<f64>],
    noise: &Normal<f64>,
    id: String,
) -> SampleRecord {
    let lx = &config.lexicon;
    let kind = *[QuestionKind::Color, QuestionKind::Count, QuestionKind::Action]
        .choose(rng)
        .expect("non-empty");
    let target = rng.random_range(0..lx.names.len());
    let n_objects = rng.random_range(2..=MAX_OBJECTS);
    let target_copies = match kind {
        QuestionKind::Count => rng.random_range(1..=n_objects.min(lx.counts.len())),
        _ => 1,
    };

    let mut objects: Vec<usize> = vec![target; target_copies];
    while objects.len() < n_objects {
        let other = rng.random_range(0..lx.names.len() - 1);
        objects.push(if other >= target { other + 1 } else { other });
    }
    objects.shuffle(rng);

    let colors: Vec<&String> = objects.iter().map(|_| lx.colors.choose(rng).expect("non-empty")).collect();
    let sizes: Vec<&String> = objects.iter().map(|_| lx.sizes.choose(rng).expect("non-empty")).collect();
    // Copies of the target share one action so a count clue can name it.
    let action = lx.actions.choose(rng).expect("non-empty");
    let actions: Vec<&String> = objects
        .iter()
        .map(|&o| if o == target { action } else { lx.actions.choose(rng).expect("non-empty") })
        .collect();

    let name = &lx.names[target];
    let (question, answer) = match kind {
        QuestionKind::Color => {
            let slot = objects.iter().position(|&o| o == target).expect("target present");
            (format!("what color is the {name}"), colors[slot].clone())
        }
        QuestionKind::Count => (
            format!("how many {name}s are there"),
            lx.counts[target_copies - 1].clone(),
        ),
        QuestionKind::Action => (format!("what is the {name} doing"), action.clone()),
    };

    let mut paragraph: Vec<String> = objects
        .iter()
        .zip(&sizes)
        .map(|(&o, size)| format!("the {size} {} is in the picture", lx.names[o]))
        .collect();
    if rng.random_bool(config.clue_rate) {
        paragraph.push(match kind {
            QuestionKind::Color => format!("the {name} is {answer} in color"),
            QuestionKind::Count if target_copies == 1 => {
                format!("{answer} {name} is {action} in the field")
            }
            QuestionKind::Count => format!("{answer} {name}s are {action} in the field"),
            QuestionKind::Action => format!("the {name} is {answer}"),
        });
    }
    paragraph.shuffle(rng);

    let visual: Vec<f64> = objects
        .iter()
        .flat_map(|&o| {
            prototypes[o]
                .iter()
                .map(|&p| (p + noise.sample(rng)) as f32 as f64)
                .collect::<Vec<_>>()
        })
        .collect();

    SampleRecord {
        id,
        visual: Tensor::matrix(n_objects, config.feature_dim, visual).expect("positive shape"),
        object_names: objects.iter().map(|&o| lx.names[o].clone()).collect(),
        object_attributes: (0..n_objects)
            .map(|i| vec![colors[i].clone(), sizes[i].clone(), actions[i].clone()])
            .collect(),
        paragraph,
        question,
        answer,
    }
}

/// Index of the only paragraph sentence containing the answer as a word
/// sequence, if exactly one does.
pub fn clue_sentence_index(record: &SampleRecord) -> Option<usize> {
    let answer = normalize_words(&normalize_answer(&record.answer));
    if answer.is_empty() {
        return None;
    }
    let mut hits = record.paragraph.iter().enumerate().filter(|(_, s)| {
        normalize_words(s)
            .windows(answer.len())
            .any(|w| w == answer.as_slice())
    });
    let first = hits.next()?.0;
    hits.next().is_none().then_some(first)
}
