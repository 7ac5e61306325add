//! Deterministic persona-dialogue generator.
//!
//! Every role draws one value per attribute slot. A dialogue ends with a
//! partner asking about one slot; the response is the slot's answer template
//! filled with the responder's value, so it is fully determined by
//! `(question slot, value)`. Earlier turns mention some of the responder's
//! values in different wording, which is what a model has to pick up to
//! answer without seeing the persona.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DialogueSample, Turn};
use crate::error::{MorpheusError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Vec<String>,
    /// Persona sentence; `{}` is replaced by the value.
    pub persona_template: String,
    pub question_templates: Vec<String>,
    pub answer_template: String,
    /// Indirect mention used inside dialogue histories.
    pub mention_template: String,
}

impl SlotSpec {
    fn fill(template: &str, value: &str) -> String {
        template.replace("{}", value)
    }

    pub fn persona_sentence(&self, value: &str) -> String {
        Self::fill(&self.persona_template, value)
    }

    pub fn answer(&self, value: &str) -> String {
        Self::fill(&self.answer_template, value)
    }

    pub fn mention(&self, value: &str) -> String {
        Self::fill(&self.mention_template, value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub slots: Vec<SlotSpec>,
    pub greetings: Vec<String>,
    pub roles_count: usize,
    /// Number of history turns; odd so that the partner speaks last.
    pub turns_per_dialogue: usize,
    pub dialogues_per_role: usize,
    /// Roles held out for validation; defaults to `max(1, roles_count / 10)`.
    pub valid_roles: Option<usize>,
    /// Roles held out for testing; defaults to `max(1, roles_count / 5)`.
    pub test_roles: Option<usize>,
    pub seed: u64,
}

fn slot(
    name: &str,
    values: &[&str],
    persona: &str,
    questions: &[&str],
    answer: &str,
    mention: &str,
) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        values: values.iter().map(|s| s.to_string()).collect(),
        persona_template: persona.into(),
        question_templates: questions.iter().map(|s| s.to_string()).collect(),
        answer_template: answer.into(),
        mention_template: mention.into(),
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            slots: vec![
                slot(
                    "hobby",
                    &["hiking", "fishing", "painting", "cooking", "dancing", "gardening"],
                    "i like {}.",
                    &["what do you do for fun ?", "do you have a hobby ?"],
                    "my hobby is {} .",
                    "i spent the whole day {} .",
                ),
                slot(
                    "job",
                    &["teacher", "nurse", "farmer", "pilot", "chef", "lawyer"],
                    "i work as a {}.",
                    &["what do you do for a living ?", "what is your job ?"],
                    "i am a {} .",
                    "being a {} was busy today .",
                ),
                slot(
                    "pet",
                    &["dog", "cat", "parrot", "rabbit", "hamster", "turtle"],
                    "i have a pet {}.",
                    &["do you have any pets ?", "what pet do you have ?"],
                    "i have a {} at home .",
                    "my {} is sleeping next to me .",
                ),
                slot(
                    "food",
                    &["pizza", "sushi", "tacos", "pasta", "salad", "curry"],
                    "my favorite food is {}.",
                    &["what is your favorite food ?", "what do you like to eat ?"],
                    "i love eating {} .",
                    "i just had some {} for dinner .",
                ),
            ],
            greetings: vec![
                "hi , how are you ?".into(),
                "hello there !".into(),
                "hey , how is your day ?".into(),
            ],
            roles_count: 30,
            turns_per_dialogue: 5,
            dialogues_per_role: 8,
            valid_roles: None,
            test_roles: None,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MorpheusError::InvalidArgument(msg));
        if self.roles_count < 3 {
            return bad(format!(
                "roles_count must be at least 3 to form disjoint splits, got {}",
                self.roles_count
            ));
        }
        if self.slots.is_empty() {
            return bad("at least one attribute slot is required".into());
        }
        for s in &self.slots {
            if s.values.is_empty() || s.question_templates.is_empty() {
                return bad(format!("slot `{}` needs values and question templates", s.name));
            }
            if !s.answer_template.contains("{}") {
                return bad(format!("answer template of slot `{}` must contain {{}}", s.name));
            }
        }
        if self.turns_per_dialogue == 0 || self.turns_per_dialogue.is_multiple_of(2) {
            return bad("turns_per_dialogue must be odd".into());
        }
        if self.turns_per_dialogue >= 3 && self.greetings.is_empty() {
            return bad("greetings are required when dialogues have 3 or more turns".into());
        }
        if self.dialogues_per_role == 0 {
            return bad("dialogues_per_role must be positive".into());
        }
        let (valid, test) = self.held_out_counts();
        if valid == 0 || test == 0 || valid + test >= self.roles_count {
            return bad(format!(
                "split sizes valid={valid} test={test} leave no training roles out of {}",
                self.roles_count
            ));
        }
        Ok(())
    }

    fn held_out_counts(&self) -> (usize, usize) {
        let valid = self.valid_roles.unwrap_or((self.roles_count / 10).max(1));
        let test = self.test_roles.unwrap_or((self.roles_count / 5).max(1));
        (valid, test)
    }
}

/// Generated splits plus the ground truth needed by oracle tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<DialogueSample>,
    pub valid: Vec<DialogueSample>,
    pub test: Vec<DialogueSample>,
    pub train_roles: Vec<String>,
    pub valid_roles: Vec<String>,
    pub test_roles: Vec<String>,
    /// Role id → value per slot (in slot order).
    pub role_attributes: BTreeMap<String, Vec<String>>,
    /// Slot index asked by the final question, parallel to each split.
    pub asked_slots: [Vec<usize>; 3],
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_slots = spec.slots.len();

    let role_names: Vec<String> = (0..spec.roles_count).map(|i| format!("role_{i:03}")).collect();
    let mut role_attributes = BTreeMap::new();
    let mut role_values: Vec<Vec<usize>> = Vec::with_capacity(spec.roles_count);
    for name in &role_names {
        let values: Vec<usize> = spec
            .slots
            .iter()
            .map(|s| rng.gen_range(0..s.values.len()))
            .collect();
        role_attributes.insert(
            name.clone(),
            values
                .iter()
                .zip(&spec.slots)
                .map(|(&v, s)| s.values[v].clone())
                .collect(),
        );
        role_values.push(values);
    }

    let mut order: Vec<usize> = (0..spec.roles_count).collect();
    order.shuffle(&mut rng);
    let (n_valid, n_test) = spec.held_out_counts();
    let mut test_idx = order[..n_test].to_vec();
    let mut valid_idx = order[n_test..n_test + n_valid].to_vec();
    let mut train_idx = order[n_test + n_valid..].to_vec();
    for v in [&mut test_idx, &mut valid_idx, &mut train_idx] {
        v.sort_unstable();
    }

    let mut make_split = |roles: &[usize]| {
        let mut samples = Vec::new();
        let mut asked = Vec::new();
        for &r in roles {
            for j in 0..spec.dialogues_per_role {
                let q = j % n_slots;
                let partner = if roles.len() > 1 {
                    let mut p = roles[rng.gen_range(0..roles.len())];
                    while p == r {
                        p = roles[rng.gen_range(0..roles.len())];
                    }
                    role_names[p].clone()
                } else {
                    "partner".to_string()
                };
                let history = dialogue_history(
                    spec,
                    &mut rng,
                    &role_names[r],
                    &partner,
                    &role_values[r],
                    q,
                );
                let slot = &spec.slots[q];
                samples.push(DialogueSample {
                    persona_sentences: spec
                        .slots
                        .iter()
                        .zip(&role_values[r])
                        .map(|(s, &v)| s.persona_sentence(&s.values[v]))
                        .collect(),
                    history,
                    response: slot.answer(&slot.values[role_values[r][q]]),
                    responder_id: role_names[r].clone(),
                });
                asked.push(q);
            }
        }
        (samples, asked)
    };

    let (train, asked_train) = make_split(&train_idx);
    let (valid, asked_valid) = make_split(&valid_idx);
    let (test, asked_test) = make_split(&test_idx);
    let names = |idx: &[usize]| idx.iter().map(|&i| role_names[i].clone()).collect();

    Ok(SyntheticCorpus {
        train,
        valid,
        test,
        train_roles: names(&train_idx),
        valid_roles: names(&valid_idx),
        test_roles: names(&test_idx),
        role_attributes,
        asked_slots: [asked_train, asked_valid, asked_test],
    })
}

fn dialogue_history(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    responder: &str,
    partner: &str,
    values: &[usize],
    asked: usize,
) -> Vec<Turn> {
    let n_slots = spec.slots.len();
    let other_slot = |rng: &mut ChaCha8Rng| {
        if n_slots == 1 {
            asked
        } else {
            let mut s = rng.gen_range(0..n_slots);
            while s == asked {
                s = rng.gen_range(0..n_slots);
            }
            s
        }
    };
    let value = |s: usize| spec.slots[s].values[values[s]].as_str();
    let question = |rng: &mut ChaCha8Rng, s: usize| {
        let qs = &spec.slots[s].question_templates;
        qs[rng.gen_range(0..qs.len())].clone()
    };

    let mut turns = Vec::with_capacity(spec.turns_per_dialogue);
    if spec.turns_per_dialogue >= 3 {
        let greeting = spec.greetings[rng.gen_range(0..spec.greetings.len())].clone();
        turns.push(Turn::new(partner, greeting));

        let companion = other_slot(rng);
        let mut mentioned = vec![spec.slots[asked].mention(value(asked))];
        if companion != asked {
            mentioned.push(spec.slots[companion].mention(value(companion)));
        }
        mentioned.shuffle(rng);
        turns.push(Turn::new(responder, mentioned.join(" ")));

        while turns.len() + 1 < spec.turns_per_dialogue {
            let s = other_slot(rng);
            turns.push(Turn::new(partner, question(rng, s)));
            turns.push(Turn::new(responder, spec.slots[s].answer(value(s))));
        }
    }
    turns.push(Turn::new(partner, question(rng, asked)));
    turns
}
