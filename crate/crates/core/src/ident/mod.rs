//! Parameter identification.

mod de;
mod pipeline;

pub use de::{de_minimize, DeConfig, DeError, DeResult, FnObjective, Objective};
pub use pipeline::{
    perturb_parameters, recording_internal_error, recording_loss, run_pipeline, DatasetBundle, DatasetSpec, FilterSpec,
    IdentConfig, IdentError, IdentReport, IdentResult, ParamBounds, ProtocolLoss, Recording, Stage, StageOutput,
};
