use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub group_mean: f64,
    pub group_std: f64,
}

/// Group-relative advantages `(r_i - mean) / (std + std_epsilon)` using the
/// population standard deviation. A group whose rewards are all equal gets
/// all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], std_epsilon: f64) -> AdvantageGroup {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = if std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + std_epsilon)).collect()
    };
    AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        group_mean: mean,
        group_std: std,
    }
}
