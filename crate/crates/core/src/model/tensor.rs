//! Flat channel-major tensors for the network: `[c][z][y][x]` with the last
//! axis contiguous, matching `Volume3D`'s row-major layout so channel slices
//! convert by straight copy.

use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Tensor {
        Tensor {
            channels,
            shape,
            data: vec![0.0; channels * shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let sl = self.spatial_len();
        &self.data[c * sl..(c + 1) * sl]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let sl = self.spatial_len();
        &mut self.data[c * sl..(c + 1) * sl]
    }

    /// Stack volumes as channels (shapes must agree).
    pub fn from_volumes(volumes: &[&Volume3D]) -> Tensor {
        let shape = volumes[0].shape();
        let mut t = Tensor::zeros(volumes.len(), shape);
        for (c, v) in volumes.iter().enumerate() {
            debug_assert_eq!(v.shape(), shape);
            for (dst, &src) in t.channel_mut(c).iter_mut().zip(v.data.iter()) {
                *dst = src as f64;
            }
        }
        t
    }

    /// Concatenate along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.shape, b.shape);
        let mut out = Tensor::zeros(a.channels + b.channels, a.shape);
        out.data[..a.data.len()].copy_from_slice(&a.data);
        out.data[a.data.len()..].copy_from_slice(&b.data);
        out
    }

    /// Split a channel-concatenated tensor back into two parts.
    pub fn split(&self, first_channels: usize) -> (Tensor, Tensor) {
        let sl = self.spatial_len();
        let cut = first_channels * sl;
        (
            Tensor {
                channels: first_channels,
                shape: self.shape,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                channels: self.channels - first_channels,
                shape: self.shape,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_roundtrip() {
        let mut a = Tensor::zeros(2, [2, 2, 2]);
        let mut b = Tensor::zeros(3, [2, 2, 2]);
        a.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        b.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 100.0 + i as f64);
        let c = Tensor::concat(&a, &b);
        assert_eq!(c.channels, 5);
        let (a2, b2) = c.split(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
