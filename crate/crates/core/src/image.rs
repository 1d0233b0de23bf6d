//! Grayscale rasters with a validity mask.

/// Row-major grayscale image, intensities in `[0, 1]`. Pixel `(x, y)` has its
/// center at continuous coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl GrayImage {
    /// An image with every pixel masked out.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    /// A fully valid image.
    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size mismatch");
        Self {
            width,
            height,
            mask: vec![true; data.len()],
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_data(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.mask[i].then(|| self.data[i])
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = y * self.width + x;
        self.data[i] = value;
        self.mask[i] = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.mask[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Raw stored value regardless of the mask, with coordinates clamped to the image.
    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Catmull-Rom bicubic interpolation at continuous coordinates, returning
    /// the value and its partial derivatives along x and y. The interpolant is
    /// C1, which keeps finite differences of downstream costs well behaved.
    pub fn sample_bicubic(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let x0 = u.floor();
        let y0 = v.floor();
        let (fx, fy) = (u - x0, v - y0);
        let (wx, dwx) = catmull_rom_weights(fx);
        let (wy, dwy) = catmull_rom_weights(fy);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let mut val = 0.0;
        let mut du = 0.0;
        let mut dv = 0.0;
        for (j, (&wyj, &dwyj)) in wy.iter().zip(dwy.iter()).enumerate() {
            let mut row = 0.0;
            let mut drow = 0.0;
            for (i, (&wxi, &dwxi)) in wx.iter().zip(dwx.iter()).enumerate() {
                let p = self.clamped(xi + i as isize - 1, yi + j as isize - 1);
                row += wxi * p;
                drow += dwxi * p;
            }
            val += wyj * row;
            du += wyj * drow;
            dv += dwyj * row;
        }
        (val, du, dv)
    }

    /// Separable Gaussian blur of the stored values; the mask is kept.
    pub fn blurred(&self, sigma: f64) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * self.clamped(x + k as isize - radius, y);
                }
                tmp[(y * w + x) as usize] = acc / norm;
            }
        }
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                out.data[(y * w + x) as usize] = acc / norm;
            }
        }
        out
    }
}

/// Keys cubic convolution weights (a = -0.5) for the four taps at offsets
/// -1, 0, 1, 2 and their derivatives with respect to the fractional offset.
#[inline]
fn catmull_rom_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let d = [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ];
    (w, d)
}
