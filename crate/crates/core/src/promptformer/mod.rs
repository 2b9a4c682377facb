//! The trainable prompt generator and its low-rank adapters.

mod forward;
mod params;

pub use forward::{generate_prompts, project_attributes, PromptFormerGraph};
pub use params::{
    param_count, LoraBank, PayloadKind, PromptFormerConfig, PromptFormerParams, StageParams, INIT_STD, LORA_TARGETS,
    STAGES,
};
