mod conv;
mod elementwise;
mod linalg;
mod mask;
mod reduce;
mod resample;
pub(crate) mod shape;
