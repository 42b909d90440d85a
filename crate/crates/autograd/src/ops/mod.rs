pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod norm;
pub(crate) mod pool;
mod shape;
