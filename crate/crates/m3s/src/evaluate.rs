//! Style-consistency and text-alignment metrics.
//!
//! Real deployments would score outputs with pretrained vision towers; here
//! a small seeded convolutional extractor stands in so the metric plumbing
//! (Gram statistics, embedding cosines, report rows) is exercised end to
//! end and every number is reproducible. The extractor is a measurement
//! instrument, not a quality judge: tests pin its determinism and the
//! metric algebra, never its taste.

use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use crate::error::{M3sError, Result};
use crate::util::{fnv1a64, normal_array2, seeded_rng};

/// Default weight seed of the built-in extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x6d33_6576;
/// Default channel width of the built-in extractor.
pub const DEFAULT_EXTRACTOR_CHANNELS: usize = 6;

/// Anything that can turn images and prompts into comparable features.
pub trait FeatureExtractor {
    /// Per-layer feature maps of an image, shallow to deep.
    fn features(&self, image: &Array3<f64>) -> Result<Vec<Array3<f64>>>;

    /// A single embedding vector for an image.
    fn embed(&self, image: &Array3<f64>) -> Result<Array1<f64>>;

    /// A prompt embedding living in the same space as [`embed`].
    ///
    /// [`embed`]: FeatureExtractor::embed
    fn embed_text(&self, prompt: &str) -> Result<Array1<f64>>;
}

/// Two seeded 3x3 conv + tanh layers over a single-channel image. Weights
/// are drawn once from the seed, so two instances with the same seed are
/// the same instrument.
pub struct SeededConvExtractor {
    seed: u64,
    channels: usize,
    /// `layer1[out]`: 3x3 kernel reading the single input channel.
    layer1: Vec<Array2<f64>>,
    /// `layer2[out][in]`: 3x3 kernels between the hidden channels.
    layer2: Vec<Vec<Array2<f64>>>,
}

impl SeededConvExtractor {
    pub fn new(seed: u64, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(M3sError::InvalidConfig(
                "extractor needs at least one channel".into(),
            ));
        }
        let mut rng = seeded_rng(seed);
        let s1 = 1.0 / 3.0;
        let layer1 = (0..channels)
            .map(|_| normal_array2(&mut rng, 3, 3, s1))
            .collect();
        let s2 = 1.0 / (9.0 * channels as f64).sqrt();
        let layer2 = (0..channels)
            .map(|_| {
                (0..channels)
                    .map(|_| normal_array2(&mut rng, 3, 3, s2))
                    .collect()
            })
            .collect();
        Ok(Self {
            seed,
            channels,
            layer1,
            layer2,
        })
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 1 || h == 0 || w == 0 {
            return Err(M3sError::ShapeMismatch {
                context: "extractor image",
                expected: "(1, h, w) with nonzero extents".into(),
                actual: format!("{:?}", image.dim()),
            });
        }
        Ok(())
    }
}

impl Default for SeededConvExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED, DEFAULT_EXTRACTOR_CHANNELS)
            .expect("default construction uses valid constants")
    }
}

/// Zero-padded 3x3 multi-channel correlation followed by tanh.
fn conv_tanh(input: &Array3<f64>, kernels: &[&Array2<f64>], out_channels: usize) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let mut out = Array3::zeros((out_channels, h, w));
    for co in 0..out_channels {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for ci in 0..cin {
                    let kernel = kernels[co * cin + ci];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i + di, j + dj);
                            if ii >= 1 && jj >= 1 && ii - 1 < h && jj - 1 < w {
                                acc += kernel[[di, dj]] * input[[ci, ii - 1, jj - 1]];
                            }
                        }
                    }
                }
                out[[co, i, j]] = acc.tanh();
            }
        }
    }
    out
}

impl FeatureExtractor for SeededConvExtractor {
    fn features(&self, image: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        self.check_image(image)?;
        let k1: Vec<&Array2<f64>> = self.layer1.iter().collect();
        let first = conv_tanh(image, &k1, self.channels);
        let k2: Vec<&Array2<f64>> = self.layer2.iter().flatten().collect();
        let second = conv_tanh(&first, &k2, self.channels);
        Ok(vec![first, second])
    }

    fn embed(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        let maps = self.features(image)?;
        let deep = maps.last().expect("extractor always yields two maps");
        let (c, h, w) = deep.dim();
        let mut out = Array1::zeros(c);
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += deep[[ch, i, j]];
                }
            }
            out[ch] = acc / (h * w) as f64;
        }
        Ok(out)
    }

    fn embed_text(&self, prompt: &str) -> Result<Array1<f64>> {
        let mut rng = seeded_rng(self.seed ^ fnv1a64(prompt.as_bytes()));
        let mut v = crate::util::normal_array1(&mut rng, self.channels, 1.0);
        let norm = v.dot(&v).sqrt();
        if norm <= 1e-12 {
            return Err(M3sError::InvalidInput(format!(
                "prompt {prompt:?} hashed to a degenerate embedding"
            )));
        }
        v.mapv_inplace(|x| x / norm);
        Ok(v)
    }
}

/// Channel co-activation statistics: `G[i][j] = sum_hw F_i F_j / (c h w)`.
pub fn gram_matrix(features: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = features.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(M3sError::InvalidInput(format!(
            "gram matrix needs nonzero feature dims, got {:?}",
            features.dim()
        )));
    }
    let norm = (c * h * w) as f64;
    let mut g = Array2::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            let mut acc = 0.0;
            for r in 0..h {
                for s in 0..w {
                    acc += features[[i, r, s]] * features[[j, r, s]];
                }
            }
            let v = acc / norm;
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    Ok(g)
}

/// Mean over extractor layers of the mean squared difference between the
/// two images' Gram matrices. Zero iff the Gram statistics agree.
pub fn gram_distance(
    a: &Array3<f64>,
    b: &Array3<f64>,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(M3sError::InvalidInput(format!(
            "extractor produced {} and {} feature maps; need matching non-empty lists",
            fa.len(),
            fb.len()
        )));
    }
    let mut total = 0.0;
    for (ma, mb) in fa.iter().zip(&fb) {
        let ga = gram_matrix(ma)?;
        let gb = gram_matrix(mb)?;
        if ga.dim() != gb.dim() {
            return Err(M3sError::ShapeMismatch {
                context: "gram matrices",
                expected: format!("{:?}", ga.dim()),
                actual: format!("{:?}", gb.dim()),
            });
        }
        let n = (ga.nrows() * ga.ncols()) as f64;
        let mse: f64 = ga
            .iter()
            .zip(gb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        total += mse;
    }
    Ok(total / fa.len() as f64)
}

/// Cosine of the angle between two vectors; zero-norm inputs are an error.
pub fn cosine_similarity(x: &Array1<f64>, y: &Array1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(M3sError::ShapeMismatch {
            context: "cosine_similarity",
            expected: format!("{}", x.len()),
            actual: format!("{}", y.len()),
        });
    }
    let nx = x.dot(x).sqrt();
    let ny = y.dot(y).sqrt();
    if nx <= 0.0 || ny <= 0.0 {
        return Err(M3sError::InvalidInput(
            "cosine similarity is undefined for zero-norm vectors".into(),
        ));
    }
    Ok(x.dot(y) / (nx * ny))
}

/// Cosine similarity of the two images' embeddings.
pub fn embedding_similarity(
    a: &Array3<f64>,
    b: &Array3<f64>,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    cosine_similarity(&extractor.embed(a)?, &extractor.embed(b)?)
}

/// Cosine similarity between an image embedding and a prompt embedding.
pub fn text_alignment(
    image: &Array3<f64>,
    prompt: &str,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    cosine_similarity(&extractor.embed(image)?, &extractor.embed_text(prompt)?)
}

/// One metric observation for the CSV report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render rows as `run_id,metric,value` CSV with a header line.
pub fn render_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("run_id,metric,value\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&row.run_id),
            csv_field(&row.metric),
            row.value
        ));
    }
    out
}
