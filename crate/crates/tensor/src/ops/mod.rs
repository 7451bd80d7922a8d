mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod shape;
mod softmax;
