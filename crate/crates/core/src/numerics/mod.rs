//! Dense tensors and a reverse-mode tape covering the operations needed by
//! the micro vision transformer and the transport objective.

mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{log_sum_exp, mean_entropy, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
