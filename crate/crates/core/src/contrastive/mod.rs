//! Two-view contrastive training of one tower with transform-typed negatives.

mod bank;
mod loss;
mod train;
mod views;

pub use bank::{build_representation_bank, eval_views, tower_outputs, RepresentationBank, TowerOutputs};
pub use loss::{anchor_plan, loss_cls, loss_con, loss_con_normalizing, total_loss_clan, NegativeMode};
pub use train::{init_tower_state, tower_head, train_tower, BestVal, EpochLog, TowerState, TrainConfig};
pub use views::{build_views, view_row, PositiveOrder, ViewBatch};
