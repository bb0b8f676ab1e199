use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, DatasetManifest, Recording};
use crate::derive_seed;
use crate::error::{Error, Result};

/// Parameters of the synthetic bearing-like generator.
///
/// Class `c` is a tone at `base_frequency · class_ratio^c` plus a train of
/// decaying resonance bursts repeating at `impulse_rate · (1 + c)` (class 0
/// carries no bursts). Condition `j` scales every frequency by
/// `1 + frequency_shift · j`, the amplitude by `1 + amplitude_shift · j` and
/// adds white noise at `snr_db − snr_drop_db · j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub conditions: usize,
    pub windows_per_class: usize,
    pub window_length: usize,
    pub window_step: usize,
    pub sampling_rate: f64,
    pub seed: u64,
    pub base_frequency: f64,
    pub class_ratio: f64,
    pub impulse_rate: f64,
    pub resonance: f64,
    pub frequency_shift: f64,
    pub amplitude_shift: f64,
    pub snr_db: f64,
    pub snr_drop_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            conditions: 2,
            windows_per_class: 250,
            window_length: 256,
            window_step: 256,
            sampling_rate: 12_000.0,
            seed: 0,
            base_frequency: 300.0,
            class_ratio: 1.5,
            impulse_rate: 90.0,
            resonance: 3_000.0,
            frequency_shift: 0.08,
            amplitude_shift: 0.5,
            snr_db: 10.0,
            snr_drop_db: 6.0,
        }
    }
}

impl SynthConfig {
    fn condition_name(j: usize) -> String {
        if j < 26 {
            ((b'A' + j as u8) as char).to_string()
        } else {
            format!("C{j}")
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synth_generate", msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.conditions < 2 {
            return bad(format!("need at least 2 conditions, got {}", self.conditions));
        }
        if self.windows_per_class == 0 || self.window_length == 0 || self.window_step == 0 {
            return bad("window count, length and step must be at least 1".into());
        }
        if !(self.sampling_rate > 0.0 && self.base_frequency > 0.0 && self.class_ratio > 0.0) {
            return bad("sampling rate, base frequency and class ratio must be positive".into());
        }
        let lowest = (0..self.classes)
            .flat_map(|c| (0..self.conditions).map(move |j| (c, j)))
            .map(|(c, j)| self.tone(c, j))
            .fold(f64::INFINITY, f64::min);
        if !(lowest > 0.0) {
            return bad("condition frequency scale must stay positive".into());
        }
        let period = self.sampling_rate / lowest;
        if (self.window_length as f64) < period {
            return bad(format!(
                "window of {} points is shorter than one period ({period:.1} points) of the lowest class frequency {lowest:.1} Hz",
                self.window_length
            ));
        }
        Ok(())
    }

    fn scale(&self, condition: usize) -> f64 {
        1.0 + self.frequency_shift * condition as f64
    }

    fn tone(&self, class: usize, condition: usize) -> f64 {
        self.base_frequency * self.class_ratio.powi(class as i32) * self.scale(condition)
    }

    pub fn recording_length(&self) -> usize {
        self.window_length + (self.windows_per_class - 1) * self.window_step
    }
}

fn render(cfg: &SynthConfig, class: usize, condition: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let len = cfg.recording_length();
    let fs = cfg.sampling_rate;
    let scale = cfg.scale(condition);
    let tone = cfg.tone(class, condition);
    let amp = 1.0 + cfg.amplitude_shift * condition as f64;
    let phase = rng.random::<f64>() * 2.0 * PI;

    let mut clean: Vec<f64> = (0..len)
        .map(|i| amp * (2.0 * PI * tone * i as f64 / fs + phase).sin())
        .collect();

    if class > 0 {
        let rate = cfg.impulse_rate * (1 + class) as f64 * scale;
        let period = fs / rate;
        let res = cfg.resonance * scale;
        let decay = fs / 800.0;
        let span = (6.0 * decay) as usize;
        let mut t = rng.random::<f64>() * period;
        while (t as usize) < len {
            let start = t as usize;
            let jitter = 0.8 + 0.4 * rng.random::<f64>();
            for k in 0..span.min(len - start) {
                let tt = k as f64;
                clean[start + k] += 1.5 * amp * jitter * (-tt / decay).exp() * (2.0 * PI * res * tt / fs).sin();
            }
            t += period;
        }
    }

    let power = clean.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let snr = cfg.snr_db - cfg.snr_drop_db * condition as f64;
    let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    clean.iter().map(|&v| (v + noise.sample(rng)) as f32).collect()
}

/// Builds a manifest plus one recording per (condition, class); recordings
/// are parallel to `manifest.recordings` and named `<condition>_<class>.f32`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(DatasetManifest, Vec<Vec<f32>>)> {
    cfg.validate()?;
    let classes: Vec<ClassLabel> = (0..cfg.classes)
        .map(|c| ClassLabel {
            id: c as u32,
            name: if c == 0 { "normal".into() } else { format!("fault{c}") },
        })
        .collect();
    let conditions: Vec<String> = (0..cfg.conditions).map(SynthConfig::condition_name).collect();
    let mut recordings = Vec::new();
    let mut signals = Vec::new();
    for (j, cond) in conditions.iter().enumerate() {
        for c in 0..cfg.classes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("synth/{cond}/{c}")));
            let sig = render(cfg, c, j, &mut rng);
            recordings.push(Recording {
                condition: cond.clone(),
                class: c as u32,
                path: format!("{cond}_{c}.f32").into(),
                samples: sig.len(),
            });
            signals.push(sig);
        }
    }
    let manifest = DatasetManifest {
        dataset: "synthetic".into(),
        sampling_rate: cfg.sampling_rate,
        conditions,
        classes,
        recordings,
        window_length: cfg.window_length,
        window_step: cfg.window_step,
    };
    Ok((manifest, signals))
}
