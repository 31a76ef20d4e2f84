use super::{ToyModelConfig, TrainConfig};
use crate::lora::TargetStrategy;
use crate::ssm::BufferMode;

/// `(model size, learning rate, adapter rank)` used per model size in the
/// reference fine-tuning recipe.
pub const TABLE3: [(&str, f64, usize); 5] = [
    ("130m", 1.0e-5, 8),
    ("370m", 5.0e-5, 16),
    ("790m", 1.0e-6, 32),
    ("1.4b", 5.0e-6, 64),
    ("2.8b", 5.0e-7, 128),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub config: TrainConfig,
}

pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = TABLE3.iter().map(|(s, _, _)| format!("table3-{s}")).collect();
    names.extend(["table3-small", "table3-large", "toy", "toy-lora", "toy-compare"].map(String::from));
    names
}

/// Resolve a named configuration.
///
/// `table3-<size>` carries the recipe's learning rate and rank with three
/// epochs, no warmup and 512-token windows; `table3-small` and
/// `table3-large` alias the smallest and largest sizes. The `toy*` presets
/// drive the selective-copy experiments.
pub fn preset(name: &str) -> Option<Preset> {
    let base = TrainConfig::default();
    let config = match name {
        "table3-small" => return preset("table3-130m").map(|p| Preset { name: name.into(), ..p }),
        "table3-large" => return preset("table3-2.8b").map(|p| Preset { name: name.into(), ..p }),
        "toy" => TrainConfig {
            learning_rate: 1e-3,
            total_steps: 2000,
            batch_size: 8,
            max_seq_len: 64,
            ..base
        },
        "toy-lora" => TrainConfig {
            learning_rate: 3e-3,
            lora_rank: Some(16),
            total_steps: 2000,
            batch_size: 8,
            max_seq_len: 64,
            ..base
        },
        "toy-compare" => TrainConfig {
            learning_rate: 1e-3,
            lora_rank: Some(8),
            total_steps: 12,
            batch_size: 8,
            max_seq_len: 64,
            ..base
        },
        other => {
            let size = other.strip_prefix("table3-")?;
            let &(_, lr, r) = TABLE3.iter().find(|(s, _, _)| *s == size)?;
            TrainConfig {
                learning_rate: lr,
                lora_rank: Some(r),
                lora_targets: TargetStrategy::Sll,
                warmup_steps: 0,
                epochs: 3,
                max_seq_len: 512,
                clip_norm: 1.0,
                ..base
            }
        }
    };
    Some(Preset {
        name: name.to_string(),
        config,
    })
}

/// Model shape for a preset: `toy-compare` is wide enough for the matrix
/// work to dominate per-element costs; everything else uses `d = 64`.
pub fn preset_model(name: &str) -> ToyModelConfig {
    let d = if name == "toy-compare" { 256 } else { 64 };
    ToyModelConfig {
        vocab: 16,
        d,
        t_max: 64,
        mode: BufferMode::InputProjected,
        gate: true,
    }
}
