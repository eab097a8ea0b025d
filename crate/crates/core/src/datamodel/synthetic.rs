//! Deterministic class-anchor token generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{Dataset, LabelSet, Sample, Split, TokenSequence};

/// Parameters of the synthetic intent task.
///
/// Each class gets a random unit anchor. A sample of class `c` holds
/// `tokens_per_sample` tokens; a `distractor_fraction` of them are centred on
/// other classes' anchors, the rest on anchor `c`, all with isotropic
/// Gaussian noise. The label embeddings are the anchors themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d: usize,
    pub tokens_per_sample: usize,
    pub noise_std: f64,
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_classes: 4,
            samples_per_class: 50,
            d: 16,
            tokens_per_sample: 12,
            noise_std: 0.1,
            distractor_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticParams {
    pub fn new(n_classes: usize, samples_per_class: usize, d: usize, tokens_per_sample: usize, noise_std: f64, seed: u64) -> Self {
        SyntheticParams {
            n_classes,
            samples_per_class,
            d,
            tokens_per_sample,
            noise_std,
            seed,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.d < 4 {
            return Err(Error::invalid(format!("d must be >= 4, got {}", self.d)));
        }
        if self.tokens_per_sample == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("tokens_per_sample and samples_per_class must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return Err(Error::invalid(format!(
                "distractor_fraction must lie in [0, 1), got {}",
                self.distractor_fraction
            )));
        }
        Ok(())
    }

    /// Unit anchors, one per class; shared by every split of the same seed.
    pub fn anchors(&self) -> Result<Tensor> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rows = Vec::with_capacity(self.n_classes);
        for _ in 0..self.n_classes {
            let mut v: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::numerics::functional::norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        Tensor::from_rows(&rows)
    }
}

/// Train split of the synthetic task.
pub fn generate_synthetic(n_classes: usize, samples_per_class: usize, d: usize, tokens_per_sample: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    let params = SyntheticParams::new(n_classes, samples_per_class, d, tokens_per_sample, noise_std, seed);
    generate_split(&params, Split::Train)
}

/// One split; different splits draw independent samples around the same anchors.
pub fn generate_split(params: &SyntheticParams, split: Split) -> Result<Dataset> {
    let anchors = params.anchors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(split.stream());
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::invalid(e.to_string()))?;

    let n = params.tokens_per_sample;
    let n_distract = ((n as f64) * params.distractor_fraction).round() as usize;
    let n_distract = n_distract.min(n.saturating_sub(1));
    let n_text = n.div_ceil(2);

    let mut samples = Vec::with_capacity(params.n_classes * params.samples_per_class);
    for class in 0..params.n_classes {
        for idx in 0..params.samples_per_class {
            let mut sources: Vec<usize> = vec![class; n - n_distract];
            for _ in 0..n_distract {
                let mut other = rng.random_range(0..params.n_classes - 1);
                if other >= class {
                    other += 1;
                }
                sources.push(other);
            }
            sources.shuffle(&mut rng);
            let mut data = Vec::with_capacity(n * params.d);
            for &src in &sources {
                for &a in anchors.row_slice(src) {
                    let eps = if params.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(a + eps);
                }
            }
            let tokens = Tensor::new(n, params.d, data)?;
            samples.push(Sample {
                id: format!("{split}-{class}-{idx}"),
                sequence: TokenSequence::new(tokens, n_text, n - n_text)?,
                label: class,
            });
        }
    }
    let names = (0..params.n_classes).map(|c| format!("intent_{c}")).collect();
    Dataset::new(samples, LabelSet::new(names, anchors)?, split)
}
