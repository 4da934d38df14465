//! Raster images to fixed-length feature vectors, plus the plain-text
//! feature file format used to bring in externally computed features.
//!
//! The default extractor converts to luma, average-pools to a 16×16 grid and
//! flattens row-major (256 values in `[0, 1]`). Pooling is area weighted, so
//! the mean of the output equals the mean luma of the source image.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

pub const POOL_SIDE: usize = 16;
pub const HIST_BINS: usize = 32;

/// An 8-bit RGB raster. `pixels` is row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        let img = Self {
            id: id.into(),
            width,
            height,
            pixels,
        };
        img.validate()?;
        Ok(img)
    }

    /// Uniform colour image.
    pub fn filled(id: impl Into<String>, width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            id: id.into(),
            width,
            height,
            pixels,
        }
    }

    /// Greyscale image from a row-major buffer of intensities.
    pub fn from_gray(id: impl Into<String>, width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: gray.len(),
            });
        }
        let pixels = gray.iter().flat_map(|&g| [g, g, g]).collect();
        Self::new(id, width, height, pixels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "image `{}` has zero area ({}x{})",
                self.id, self.width, self.height
            )));
        }
        if self.pixels.len() != self.width * self.height * 3 {
            return Err(Error::invalid(format!(
                "image `{}`: expected {} bytes of RGB data, got {}",
                self.id,
                self.width * self.height * 3,
                self.pixels.len()
            )));
        }
        Ok(())
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Overwrites an axis-aligned rectangle with a constant colour.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                let o = (y * self.width + x) * 3;
                self.pixels[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }

    /// Luma in `[0, 1]`, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }
}

/// Fixed-length real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Selects a built-in extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ExtractorSpec {
    /// 16×16 average-pooled luma, D = 256.
    #[default]
    #[serde(rename = "gray16")]
    GrayPool16,
    /// Three 32-bin channel histograms followed by the pooled luma, D = 352.
    #[serde(rename = "rgbhist32+gray16")]
    RgbHistGray,
}

impl ExtractorSpec {
    pub fn dim(self) -> usize {
        match self {
            ExtractorSpec::GrayPool16 => POOL_SIDE * POOL_SIDE,
            ExtractorSpec::RgbHistGray => 3 * HIST_BINS + POOL_SIDE * POOL_SIDE,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            ExtractorSpec::GrayPool16 => "gray16",
            ExtractorSpec::RgbHistGray => "rgbhist32+gray16",
        }
    }
}

impl std::fmt::Display for ExtractorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExtractorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray16" => Ok(ExtractorSpec::GrayPool16),
            "rgbhist32+gray16" | "rgbhist" => Ok(ExtractorSpec::RgbHistGray),
            other => Err(Error::invalid(format!("unknown extractor `{other}`"))),
        }
    }
}

pub fn extract_features(image: &ImageRecord, extractor: ExtractorSpec) -> Result<FeatureVector> {
    image.validate()?;
    let pooled = pooled_luma(image);
    let values = match extractor {
        ExtractorSpec::GrayPool16 => pooled,
        ExtractorSpec::RgbHistGray => {
            let mut v = rgb_histograms(image);
            v.extend(pooled);
            v
        }
    };
    Ok(FeatureVector(values))
}

/// Extracts every image, in input order.
pub fn extract_batch(images: &[ImageRecord], extractor: ExtractorSpec, exec: Exec) -> Result<Vec<FeatureVector>> {
    exec.map_slice(images, |img| extract_features(img, extractor))
        .into_iter()
        .collect()
}

/// Nearest-neighbour upsampling of any side shorter than the pooling grid.
fn upsample_small(luma: Vec<f64>, w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    if w >= POOL_SIDE && h >= POOL_SIDE {
        return (luma, w, h);
    }
    let nw = w.max(POOL_SIDE);
    let nh = h.max(POOL_SIDE);
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = y * h / nh;
        for x in 0..nw {
            let sx = x * w / nw;
            out.push(luma[sy * w + sx]);
        }
    }
    (out, nw, nh)
}

/// Overlap of source cell `[i, i+1)` with output cell `[o·n/side, (o+1)·n/side)`,
/// in units of source pixels.
fn overlap(i: usize, o: usize, n: usize, side: usize) -> f64 {
    let lo = (o * n) as f64 / side as f64;
    let hi = ((o + 1) * n) as f64 / side as f64;
    let a = (i as f64).max(lo);
    let b = ((i + 1) as f64).min(hi);
    (b - a).max(0.0)
}

/// Area-weighted average pooling to a `side × side` grid.
pub(crate) fn area_pool(values: &[f64], w: usize, h: usize, side: usize) -> Vec<f64> {
    let cell_area = (w as f64 / side as f64) * (h as f64 / side as f64);
    let mut out = vec![0.0; side * side];
    for oy in 0..side {
        let y0 = oy * h / side;
        let y1 = ((oy + 1) * h).div_ceil(side).min(h);
        for ox in 0..side {
            let x0 = ox * w / side;
            let x1 = ((ox + 1) * w).div_ceil(side).min(w);
            let mut acc = 0.0;
            for y in y0..y1 {
                let wy = overlap(y, oy, h, side);
                if wy == 0.0 {
                    continue;
                }
                let mut row = 0.0;
                for x in x0..x1 {
                    row += overlap(x, ox, w, side) * values[y * w + x];
                }
                acc += wy * row;
            }
            out[oy * side + ox] = acc / cell_area;
        }
    }
    out
}

fn pooled_luma(image: &ImageRecord) -> Vec<f64> {
    let (luma, w, h) = upsample_small(image.luma(), image.width, image.height);
    area_pool(&luma, w, h, POOL_SIDE)
}

fn rgb_histograms(image: &ImageRecord) -> Vec<f64> {
    let mut hist = vec![0.0; 3 * HIST_BINS];
    let bin_width = 256 / HIST_BINS;
    for px in image.pixels.chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            hist[c * HIST_BINS + v as usize / bin_width] += 1.0;
        }
    }
    let n = (image.width * image.height) as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    hist
}

/// Per-dimension statistics returned by [`standardize_collection`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Divisor per dimension; `1.0` where the spread is degenerate.
    pub std: Vec<f64>,
}

const DEGENERATE_STD: f64 = 1e-12;

impl Standardization {
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_len(self.mean.len(), f.len())?;
        Ok(f.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len(self.mean.len(), z.len())?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect())
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Z-scores every dimension using the population standard deviation.
pub fn standardize_collection(features: &[FeatureVector]) -> Result<(Vec<Vec<f64>>, Standardization)> {
    if features.len() < 2 {
        return Err(Error::invalid("standardization needs at least two vectors"));
    }
    let d = features[0].len();
    for f in features {
        check_len(d, f.len())?;
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in features {
        for ((v, x), m) in var.iter_mut().zip(f.as_slice()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s < DEGENERATE_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    let stats = Standardization { mean, std };
    let z = features
        .iter()
        .map(|f| stats.apply(f.as_slice()))
        .collect::<Result<_>>()?;
    Ok((z, stats))
}

/// Parses the feature file format: `#dim=<D>` on line 1, then
/// `<id>,<v1>,...,<vD>` rows; other `#` lines are comments.
pub fn parse_feature_file(text: &str) -> Result<BTreeMap<String, FeatureVector>> {
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, l)) => l
            .trim()
            .strip_prefix("#dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected header `#dim=<D>`".into(),
            })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let mut out = BTreeMap::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim();
        if id.is_empty() {
            return Err(perr("empty id".into()));
        }
        let values = fields
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| perr(format!("`{}` is not a number", f.trim())))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(perr(format!("non-finite value `{}`", f.trim())))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(perr(format!("expected {dim} values, found {}", values.len())));
        }
        if out.insert(id.to_string(), FeatureVector(values)).is_some() {
            return Err(perr(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

pub fn load_precomputed_features(path: impl AsRef<Path>) -> Result<BTreeMap<String, FeatureVector>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_file(&text)
}

/// Renders features in the text format. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn format_feature_file<'a, I>(dim: usize, rows: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    let mut s = format!("#dim={dim}\n");
    let mut seen = HashSet::new();
    for (id, f) in rows {
        if id.is_empty() || id.contains([',', '\n', '\r']) || id.starts_with('#') {
            return Err(Error::invalid(format!("id `{id}` cannot be written to a feature file")));
        }
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate id `{id}`")));
        }
        check_len(dim, f.len())?;
        s.push_str(id);
        for v in f.as_slice() {
            write!(s, ",{v:?}").expect("write to String");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_feature_file<'a, I>(path: impl AsRef<Path>, dim: usize, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    let path = path.as_ref();
    let text = format_feature_file(dim, rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(side: usize, block: usize) -> ImageRecord {
        let gray: Vec<u8> = (0..side * side)
            .map(|i| {
                let (x, y) = (i % side, i / side);
                if (x / block + y / block).is_multiple_of(2) {
                    0
                } else {
                    255
                }
            })
            .collect();
        ImageRecord::from_gray("cb", side, side, &gray).unwrap()
    }

    /// Independent reference: integer block averaging, valid when the side
    /// is a multiple of the grid.
    fn block_average(values: &[f64], side: usize, grid: usize) -> Vec<f64> {
        let k = side / grid;
        let mut out = Vec::new();
        for gy in 0..grid {
            for gx in 0..grid {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += values[(gy * k + dy) * side + gx * k + dx];
                    }
                }
                out.push(s / (k * k) as f64);
            }
        }
        out
    }

    #[test]
    fn black_image_gives_zero_vector() {
        let img = ImageRecord::filled("b", 64, 64, [0, 0, 0]);
        let f = extract_features(&img, ExtractorSpec::GrayPool16).unwrap();
        assert_eq!(f.len(), 256);
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_image_gives_ones() {
        let img = ImageRecord::filled("w", 64, 64, [255, 255, 255]);
        let f = extract_features(&img, ExtractorSpec::GrayPool16).unwrap();
        assert_eq!(f.len(), 256);
        assert!(f.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_matches_block_average_oracle() {
        let img = checkerboard(32, 16);
        let f = extract_features(&img, ExtractorSpec::GrayPool16).unwrap();
        let oracle = block_average(&img.luma(), 32, 16);
        assert_eq!(f.len(), oracle.len());
        for (a, b) in f.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // 16x16 blocks in a 32x32 image pool to 8x8 quadrants
        assert_eq!(f.as_slice()[0], 0.0);
        assert!((f.as_slice()[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_area_is_rejected() {
        let img = ImageRecord {
            id: "z".into(),
            width: 0,
            height: 10,
            pixels: vec![],
        };
        assert!(matches!(
            extract_features(&img, ExtractorSpec::GrayPool16),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn tiny_images_are_upsampled() {
        let img = ImageRecord::from_gray("t", 2, 1, &[0, 255]).unwrap();
        let f = extract_features(&img, ExtractorSpec::GrayPool16).unwrap();
        assert_eq!(f.len(), 256);
        assert_eq!(f.as_slice()[0], 0.0);
        assert!((f.as_slice()[15] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_extractor_has_352_dims() {
        let img = ImageRecord::filled("r", 20, 30, [255, 0, 10]);
        let f = extract_features(&img, ExtractorSpec::RgbHistGray).unwrap();
        assert_eq!(f.len(), 352);
        assert_eq!(f.as_slice()[HIST_BINS - 1], 1.0);
        assert_eq!(f.as_slice()[HIST_BINS], 1.0);
        assert_eq!(f.as_slice()[2 * HIST_BINS + 1], 1.0);
        let hist_mass: f64 = f.as_slice()[..3 * HIST_BINS].iter().sum();
        assert!((hist_mass - 3.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_two_points() {
        let (z, st) = standardize_collection(&[FeatureVector(vec![0.0]), FeatureVector(vec![2.0])]).unwrap();
        assert_eq!(z, vec![vec![-1.0], vec![1.0]]);
        assert_eq!(st.mean, vec![1.0]);
        assert_eq!(st.std, vec![1.0]);
    }

    #[test]
    fn standardize_constant_dimension_is_centered_only() {
        let fs = vec![FeatureVector(vec![5.0]); 3];
        let (z, st) = standardize_collection(&fs).unwrap();
        assert_eq!(z, vec![vec![0.0]; 3]);
        assert_eq!(st.std, vec![1.0]);
    }

    #[test]
    fn standardize_rejects_mismatched_lengths() {
        let fs = vec![FeatureVector(vec![1.0, 2.0]), FeatureVector(vec![1.0])];
        assert!(matches!(standardize_collection(&fs), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_std() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let fs: Vec<_> = (0..10)
            .map(|_| FeatureVector((0..4).map(|_| rng.random_range(-5.0..5.0)).collect()))
            .collect();
        let (z, _) = standardize_collection(&fs).unwrap();
        for c in 0..4 {
            let m: f64 = z.iter().map(|r| r[c]).sum::<f64>() / 10.0;
            let s = (z.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / 10.0).sqrt();
            assert!(m.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_file_single_row() {
        let m = parse_feature_file("#dim=3\nimg1,0.1,0.2,0.3\n").unwrap();
        assert_eq!(m["img1"].as_slice(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn feature_file_short_row_names_line() {
        match parse_feature_file("#dim=3\nimg1,0.1,0.2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feature_file_errors() {
        assert!(matches!(
            parse_feature_file("#dim=1\n# c\na,1\na,2\n"),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(matches!(parse_feature_file("#dim=1\na,NaN\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_feature_file("#dim=1\na,inf\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_feature_file("a,1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_feature_file("#dim=1\na,x\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn thousand_rows_round_trip_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<(String, FeatureVector)> = (0..1000)
            .map(|i| {
                let v = (0..5)
                    .map(|_| rng.random::<f64>() * 10f64.powi(rng.random_range(-30..30)))
                    .collect();
                (format!("img{i:04}"), FeatureVector(v))
            })
            .collect();
        let text = format_feature_file(5, rows.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        let back = parse_feature_file(&text).unwrap();
        assert_eq!(back.len(), 1000);
        for (id, f) in &rows {
            let g = &back[id];
            assert!(f.as_slice().iter().zip(g.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
