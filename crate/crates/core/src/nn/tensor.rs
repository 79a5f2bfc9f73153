use crate::dataio::RgbImage;

/// A dense channels-first activation tensor for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Intensities mapped to [-1, 1], planar RGB.
    pub fn from_image(image: &RgbImage) -> Self {
        let (h, w) = (image.height(), image.width());
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in image.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Self::from_vec(3, h, w, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.shape(), other.shape(), "feature map shapes differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks `self` on top of `other` along the channel axis.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!((self.height, self.width), (other.height, other.width), "concat spatial sizes differ");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        FeatureMap::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`concat`](Self::concat): splits off the first `channels` channels.
    pub fn split_channels(mut self, channels: usize) -> (FeatureMap, FeatureMap) {
        let cut = channels * self.plane();
        let tail = self.data.split_off(cut);
        let rest = self.channels - channels;
        (
            FeatureMap::from_vec(channels, self.height, self.width, self.data),
            FeatureMap::from_vec(rest, self.height, self.width, tail),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major `C = op(A) * op(B) + beta * C` with `op(A)` m x k and `op(B)` k x n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let at = |i: usize, l: usize| if ta { a[l * m + i] } else { a[i * k + l] };
        let bt = |l: usize, j: usize| if tb { b[j * k + l] } else { b[l * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| at(i, l) * bt(l, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.91).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, 0.0);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = FeatureMap::from_vec(2, 2, 2, (0..8).map(f64::from).collect());
        let b = FeatureMap::from_vec(1, 2, 2, vec![9.0; 4]);
        let (x, y) = a.concat(&b).split_channels(2);
        assert_eq!((x, y), (a, b));
    }
}
