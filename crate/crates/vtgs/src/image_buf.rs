//! Simple row-major image buffers shared across the renderer, losses and IO.

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type GrayImage = ImageBuf<f64>;
pub type RgbImage = ImageBuf<[f64; 3]>;
pub type MaskImage = ImageBuf<bool>;

impl<T: Clone> ImageBuf<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &ImageBuf<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Row-major pixel iteration as (u, v, value).
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, t)| (i % w, i / w, t))
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> ImageBuf<U> {
        ImageBuf {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl MaskImage {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

impl RgbImage {
    /// Per-pixel channel mean, used as luminance for SSIM.
    pub fn luminance(&self) -> GrayImage {
        self.map(|c| (c[0] + c[1] + c[2]) / 3.0)
    }
}
