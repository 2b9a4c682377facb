//! Synthetic benchmark data: blob images with attribute structure, non-IID
//! client partitions, few-shot shards and domain schedules.

mod attributes;
mod split;
mod synthetic;

pub use attributes::{
    composite_prompts, format_attributes, load_attribute_file, parse_attributes, write_attribute_file, AttributeMap,
};
pub use split::{build_shards, dg_schedule, few_shot_subsample, plan_splits, ClientShard, DgMode, DgSchedule, SplitPlan};
pub use synthetic::{
    correlation, make_synthetic_dataset, prototype, random_attribute_map, Dataset, DatasetSpec, DomainTransform, Sample,
    Split,
};
