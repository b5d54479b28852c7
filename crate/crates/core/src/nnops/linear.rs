use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `y = W·x + b` per batch row.
///
/// `x` is flattened per sample (so `(N, C, 1, 1)` and `(N, C·H·W)` layouts
/// both work); `weight` is `(C_out, C_in, 1, 1)` and `bias` has `C_out`
/// elements. The output is `(N, C_out, 1, 1)`.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c_in, c_out) = fc_dims(x, weight, bias)?;
    let mut out = Tensor::zeros([n, c_out, 1, 1]);
    for row in out.data_mut().chunks_mut(c_out.max(1)) {
        row.copy_from_slice(bias.data());
    }
    // out (n × c_out) += x (n × c_in) · Wᵀ (c_in × c_out)
    T::gemm(
        n,
        c_in,
        c_out,
        x.data(),
        (c_in as isize, 1),
        weight.data(),
        (1, c_in as isize),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

fn fc_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let [c_out, c_in, kh, kw] = weight.shape();
    if kh != 1 || kw != 1 {
        return Err(Error::shape(format!(
            "fully connected weight {:?}",
            weight.shape()
        )));
    }
    let n = x.batch();
    let per_sample = x.channels() * x.spatial();
    if per_sample != c_in {
        return Err(Error::shape(format!(
            "fully connected input has {per_sample} features, weight expects {c_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::shape(format!(
            "bias of length {} for {c_out} outputs",
            bias.len()
        )));
    }
    Ok((n, c_in, c_out))
}

/// Returns `(dx, dweight, dbias)`; `dx` takes the shape of `x`.
pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c_in, c_out) = fc_dims(x, weight, bias)?;
    if grad_out.len() != n * c_out {
        return Err(Error::shape("fully connected gradient shape"));
    }
    let g = grad_out.data();
    let mut dx = Tensor::zeros(x.shape());
    // dx (n × c_in) = g (n × c_out) · W (c_out × c_in)
    T::gemm(
        n,
        c_out,
        c_in,
        g,
        (c_out as isize, 1),
        weight.data(),
        (c_in as isize, 1),
        T::zero(),
        dx.data_mut(),
    );
    let mut dw = Tensor::zeros(weight.shape());
    // dW (c_out × c_in) = gᵀ (c_out × n) · x (n × c_in)
    T::gemm(
        c_out,
        n,
        c_in,
        g,
        (1, c_out as isize),
        x.data(),
        (c_in as isize, 1),
        T::zero(),
        dw.data_mut(),
    );
    let mut db = Tensor::zeros(bias.shape());
    for row in g.chunks(c_out.max(1)) {
        for (d, &v) in db.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok((dx, dw, db))
}
