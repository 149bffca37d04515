//! The decision policy: the rule-based teacher, the masked joint action
//! space and two-stage PPO training.

mod gae;
mod mask;
mod policy;
mod ppo;
mod reward;
mod rollout;
mod teacher;

pub use gae::compute_gae;
pub use mask::ActionMask;
pub use policy::{features, policy_forward, MaskedCategorical, ObservationSet, PolicyNet, TAG_POLICY, TAG_VALUE};
pub use ppo::{
    ppo_loss, train_scheduler, training_seed, write_train_log, Checkpoint, LossParts, PpoBatch, PpoConfig,
    TrainLogRow, CHECKPOINT_FORMAT_VERSION,
};
pub use reward::{reuse_horizon, stage1_reward, stage2_reward, RewardConfig, StepTransition};
pub use rollout::{
    run_episode, Decider, Decision, EpisodeRecord, FixedDecider, PolicyDecider, RandomDecider, Restriction,
    StepLog, ThresholdDecider,
};
pub use teacher::{teacher_action, TeacherConfig, ThresholdScheduler};
