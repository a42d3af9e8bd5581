//! Fine-tuning dataset export for the vanilla and typed-fact schemes.
//!
//! Each training fact yields exactly one record, paired with one seeded
//! random image. Every record carries `mask_image_attention: true`: the
//! trainer must zero the attention mask over image placeholder tokens so
//! the model learns from the facts alone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaseFact, Split};
use crate::digest::{round_half_up, seeded_key, sha256_hex};
use crate::error::{Error, Result};
use crate::offense_tagger::TypedFact;
use crate::pairing::{sample_training_pair, ImageRecord};
use crate::prompting::Templates;

pub const RECORD_SCHEMA: &str = "bailaudit.sft-record/v1";
pub const MANIFEST_SCHEMA: &str = "bailaudit.sft-manifest/v1";
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const LEARNING_RATE: f64 = 1e-5;
pub const EFFECTIVE_BATCH_SIZE: u32 = 8;
pub const OPTIMIZER: &str = "adamw_torch";
pub const DEFAULT_FREEZE_SCOPE: &str = "vision_encoder_only";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Vanilla,
    Typed,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Scheme::Vanilla),
            "typed" => Ok(Scheme::Typed),
            other => Err(Error::Config(format!("unknown fine-tuning scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftSplit {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Image { image: String },
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub schema: String,
    pub case_id: String,
    pub image_id: String,
    pub image_uri: String,
    pub scheme: Scheme,
    pub split: SftSplit,
    pub system_text: String,
    /// The fact text (vanilla) or typed-fact rendering (typed).
    pub user_text: String,
    pub target: Target,
    pub mask_image_attention: bool,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub effective_batch_size: u32,
    pub optimizer: String,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            learning_rate: LEARNING_RATE,
            effective_batch_size: EFFECTIVE_BATCH_SIZE,
            optimizer: OPTIMIZER.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftManifest {
    pub schema: String,
    pub record_schema: String,
    pub scheme: Scheme,
    pub train_count: usize,
    pub validation_count: usize,
    pub seed: u64,
    pub hyperparameters: Hyperparameters,
    /// Which parameters stay frozen. Whether the vision-language projector
    /// belongs to the frozen set is left to the trainer's reading of this
    /// value; the default freezes only the vision encoder.
    pub freeze_scope: String,
    pub template_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_sha256: Option<String>,
    pub records_sha256: String,
}

#[derive(Debug, Clone)]
pub struct SftExport {
    pub records: Vec<SftRecord>,
    pub manifest: SftManifest,
}

impl SftExport {
    pub fn records_jsonl(&self) -> String {
        crate::jsonl::to_string(&self.records)
    }
}

pub struct ExportInputs<'a> {
    pub facts: &'a [CaseFact],
    /// Required for the typed scheme, keyed by case id.
    pub typed: Option<&'a HashMap<String, TypedFact>>,
    pub roster: &'a [ImageRecord],
    pub templates: &'a Templates,
    pub lexicon_sha256: Option<String>,
}

pub fn export_sft(inputs: &ExportInputs<'_>, scheme: Scheme, seed: u64) -> Result<SftExport> {
    if inputs.facts.is_empty() {
        return Err(Error::Export("no training facts to export".into()));
    }
    if inputs.roster.is_empty() {
        return Err(Error::Export("roster is empty".into()));
    }
    if let Some(f) = inputs.facts.iter().find(|f| f.split != Some(Split::Train)) {
        return Err(Error::Export(format!(
            "fact `{}` is not in the training split",
            f.case_id
        )));
    }
    if scheme == Scheme::Typed && inputs.typed.is_none() {
        return Err(Error::Export("the typed scheme needs typed facts".into()));
    }

    let n = inputs.facts.len();
    let n_validation = round_half_up(VALIDATION_FRACTION * n as f64).min(n);
    let mut order: Vec<(u64, &str)> = inputs
        .facts
        .iter()
        .map(|f| (seeded_key(seed, &format!("validation|{}", f.case_id)), f.case_id.as_str()))
        .collect();
    order.sort_unstable();
    let validation: std::collections::HashSet<&str> =
        order.iter().take(n_validation).map(|(_, id)| *id).collect();

    let images: HashMap<&str, &ImageRecord> = inputs
        .roster
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let system_text = inputs.templates.system.clone();
    let question = inputs.templates.question_text(false);

    let mut records = Vec::with_capacity(n);
    for fact in inputs.facts {
        let pair = sample_training_pair(fact, inputs.roster, seed)?;
        let image = images[pair.image_id.as_str()];
        let user_text = match scheme {
            Scheme::Vanilla => fact.text.clone(),
            Scheme::Typed => inputs
                .typed
                .and_then(|t| t.get(&fact.case_id))
                .ok_or_else(|| Error::Export(format!("no typed fact for `{}`", fact.case_id)))?
                .rendered_text
                .clone(),
        };
        let target = if fact.bail_granted {
            Target::Yes
        } else {
            Target::No
        };
        let prompt = crate::prompting::render(
            &inputs.templates.user,
            &[("CASE_FACT", &user_text), ("QUESTION", &question)],
        );
        let messages = vec![
            Message {
                role: "system".into(),
                content: vec![ContentPart::Text {
                    text: system_text.clone(),
                }],
            },
            Message {
                role: "user".into(),
                content: vec![
                    ContentPart::Image {
                        image: image.uri.clone(),
                    },
                    ContentPart::Text { text: prompt },
                ],
            },
            Message {
                role: "assistant".into(),
                content: vec![ContentPart::Text {
                    text: match target {
                        Target::Yes => "yes".into(),
                        Target::No => "no".into(),
                    },
                }],
            },
        ];
        records.push(SftRecord {
            schema: RECORD_SCHEMA.to_string(),
            case_id: fact.case_id.clone(),
            image_id: image.image_id.clone(),
            image_uri: image.uri.clone(),
            scheme,
            split: if validation.contains(fact.case_id.as_str()) {
                SftSplit::Validation
            } else {
                SftSplit::Train
            },
            system_text: system_text.clone(),
            user_text,
            target,
            mask_image_attention: true,
            messages,
        });
    }

    let records_sha256 = sha256_hex(crate::jsonl::to_string(&records));
    let manifest = SftManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        record_schema: RECORD_SCHEMA.to_string(),
        scheme,
        train_count: n - n_validation,
        validation_count: n_validation,
        seed,
        hyperparameters: Hyperparameters::default(),
        freeze_scope: DEFAULT_FREEZE_SCOPE.to_string(),
        template_sha256: inputs.templates.sha256(),
        lexicon_sha256: match scheme {
            Scheme::Typed => inputs.lexicon_sha256.clone(),
            Scheme::Vanilla => None,
        },
        records_sha256,
    };
    Ok(SftExport { records, manifest })
}
