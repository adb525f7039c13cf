//! Network building blocks over the tensor engine.

pub mod cab;
pub mod cru;
pub mod ctx;
pub mod downsample;
pub mod fe;
pub mod flam;
pub mod gate;
pub mod layers;
pub mod lfib;
pub mod params;
pub mod seghead;
pub mod transformer;

pub use cab::Cab;
pub use cru::Cru;
pub use ctx::{Ctx, Mode, StatUpdate};
pub use downsample::Downsample;
pub use fe::Fe;
pub use flam::Flam;
pub use gate::ChannelGate;
pub use layers::{apply_stat_updates, Act, BatchNorm, Conv2d, ConvNorm, LayerNorm, Linear};
pub use lfib::{Lfib, LfibOptions, LfibTrace};
pub use params::{Buffer, BufferId, ParamId, ParamKind, ParamStore, Parameter};
pub use seghead::SegHead;
pub use transformer::{CcMode, TransformerBlock, TransformerOptions, TransformerTrace};
