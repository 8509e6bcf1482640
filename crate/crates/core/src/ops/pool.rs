use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over spatial positions: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::dim("global_avg_pool: empty spatial extent"));
    }
    let plane = h * w;
    let y = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::from_vec(&[n, c], y)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape else {
        return Err(Error::dim("global_avg_pool backward: input shape"));
    };
    if dy.shape() != [*n, *c] {
        return Err(Error::dim("global_avg_pool backward: upstream gradient shape"));
    }
    let plane = h * w;
    let scale = 1.0 / plane as f64;
    let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g * scale, plane)).collect();
    Tensor::from_vec(input_shape, dx)
}

/// `y[n,c,h,w] = x[n,c,h,w] * s[n,c]`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if s.shape() != [n, c] {
        return Err(Error::dim(format!("channel_scale: scale shape {:?} does not match [{n}, {c}]", s.shape())));
    }
    let plane = h * w;
    let y = x.data().chunks(plane.max(1)).zip(s.data()).flat_map(|(p, &k)| p.iter().map(move |v| v * k)).collect();
    Tensor::from_vec(x.shape(), y)
}

pub fn channel_scale_backward(x: &Tensor, s: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let dx = channel_scale(dy, s)?;
    let ds = (0..n * c)
        .map(|i| {
            x.data()[i * plane..(i + 1) * plane]
                .iter()
                .zip(&dy.data()[i * plane..(i + 1) * plane])
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok((dx, Tensor::from_vec(&[n, c], ds)?))
}
