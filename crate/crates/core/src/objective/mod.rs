//! Self-distillation objective: projection head, teacher sharpening and
//! centering, the class-token and query-token losses, and the EMA teacher.

mod distill;
mod head;
mod loss;

pub use distill::{center_update, ema_update, DistillPair};
pub use head::{HeadConfig, Network, ProjectionHead};
pub use loss::{
    adclr_loss, h_cross_entropy, teacher_distribution, LossConfig, LossParts, StudentView, TeacherView,
};
