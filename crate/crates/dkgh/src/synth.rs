//! Synthetic gaze-conditioned classification data.
//!
//! Each image holds a Gaussian blob whose size and brightness identify the
//! class. The paired variant adds a distractor blob of another class, so the
//! image alone cannot tell which blob carries the label; only the heatmap
//! marks the target. Heatmaps are Gaussians centred on the target (with
//! probability `gaze_fidelity`) or on a uniformly random spot, with a spread
//! proportional to the size of the blob being looked at.
//!
//! Optional gaze-pattern groups change the heatmap shape (one fixation, two
//! fixations, horizontal or vertical sweep) independently of the label; the
//! group of every sample goes to `gaze_groups.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dkgh_core::rng::{self, SeedRng};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, IoContext, Result};
use crate::manifest::{write_manifest, SampleManifest};
use crate::pgm::{self, Greymap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One blob per image; its class is the label.
    Single,
    /// Target blob plus a distractor of a different class.
    Paired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Blob standard deviation (pixels) per class.
    pub blob_sigma: Vec<f64>,
    /// Blob peak added to the background, per class.
    pub blob_intensity: Vec<f64>,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Probability that the heatmap is centred on the target blob.
    pub gaze_fidelity: f64,
    /// Heatmap spread as a multiple of the attended blob's sigma.
    pub gaze_spread: f64,
    pub variant: Variant,
    /// Number of gaze-pattern groups (0 disables them, at most 4).
    pub gaze_groups: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_subjects: 20,
            samples_per_subject: 20,
            image_size: 64,
            num_classes: 3,
            blob_sigma: vec![2.0, 3.5, 5.5],
            blob_intensity: vec![0.8, 0.6, 0.4],
            noise: 0.03,
            gaze_fidelity: 1.0,
            gaze_spread: 1.5,
            variant: Variant::Single,
            gaze_groups: 0,
            seed: 0,
        }
    }
}

/// Ground truth geometry of one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub sample_id: String,
    pub label: usize,
    pub target: (f64, f64),
    pub target_sigma: f64,
    pub distractor: Option<(f64, f64)>,
    /// Main fixation of the heatmap.
    pub gaze: (f64, f64),
    pub gaze_on_target: bool,
    pub group: Option<usize>,
}

impl SyntheticSpec {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = SyntheticSpec::default();
        let variant = match kv.get_or("variant", "single".to_string())?.as_str() {
            "single" => Variant::Single,
            "paired" => Variant::Paired,
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        };
        let spec = SyntheticSpec {
            num_subjects: kv.get_or("num_subjects", d.num_subjects)?,
            samples_per_subject: kv.get_or("samples_per_subject", d.samples_per_subject)?,
            image_size: kv.get_or("image_size", d.image_size)?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            blob_sigma: kv.list("blob_sigma")?.unwrap_or(d.blob_sigma),
            blob_intensity: kv.list("blob_intensity")?.unwrap_or(d.blob_intensity),
            noise: kv.get_or("noise", d.noise)?,
            gaze_fidelity: kv.get_or("gaze_fidelity", d.gaze_fidelity)?,
            gaze_spread: kv.get_or("gaze_spread", d.gaze_spread)?,
            variant,
            gaze_groups: kv.get_or("gaze_groups", d.gaze_groups)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let spec = Self::from_kv(&kv)?;
        kv.reject_unknown()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_subjects == 0 || self.samples_per_subject == 0 {
            return fail("need at least one subject and one sample per subject");
        }
        if self.num_classes < 2 {
            return fail("need at least two classes");
        }
        if self.blob_sigma.len() != self.num_classes || self.blob_intensity.len() != self.num_classes {
            return fail("blob_sigma and blob_intensity need one entry per class");
        }
        if self.blob_sigma.iter().any(|&s| !(s > 0.0)) {
            return fail("blob sigmas must be positive");
        }
        let widest = self.blob_sigma.iter().cloned().fold(0.0, f64::max);
        let needed = if self.variant == Variant::Paired { 10.0 } else { 6.0 } * widest;
        if (self.image_size as f64) < needed {
            return fail("image too small for the blobs");
        }
        if !(0.0..=1.0).contains(&self.gaze_fidelity) {
            return fail("gaze_fidelity must lie in [0, 1]");
        }
        if !(self.gaze_spread > 0.0) || !(self.noise >= 0.0) {
            return fail("gaze_spread must be positive and noise non-negative");
        }
        if self.gaze_groups > 4 {
            return fail("at most 4 gaze-pattern groups are defined");
        }
        Ok(())
    }

    fn total(&self) -> usize {
        self.num_subjects * self.samples_per_subject
    }
}

/// Adds `amp·exp(−(dx²/2sx² + dy²/2sy²))` to a square raster.
fn splat(buf: &mut [f64], size: usize, c: (f64, f64), sigma: (f64, f64), amp: f64) {
    for y in 0..size {
        let dy = y as f64 - c.1;
        for x in 0..size {
            let dx = x as f64 - c.0;
            buf[y * size + x] += amp * (-(dx * dx) / (2.0 * sigma.0 * sigma.0) - dy * dy / (2.0 * sigma.1 * sigma.1)).exp();
        }
    }
}

fn place(rng: &mut SeedRng, size: usize, margin: f64) -> (f64, f64) {
    let hi = size as f64 - 1.0 - margin;
    (rng.random_range(margin..=hi), rng.random_range(margin..=hi))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// One sample: image raster, heatmap raster and its ground truth.
fn render(spec: &SyntheticSpec, subject: usize, index: usize) -> (Vec<f64>, Vec<f64>, SampleTruth) {
    let n = spec.image_size;
    let mut rng = rng::stream(spec.seed, 1 + (subject * spec.samples_per_subject + index) as u64);
    let mut subject_rng = rng::stream(spec.seed, (1u64 << 40) + subject as u64);
    let background = subject_rng.random_range(0.05..0.2);

    let label = rng.random_range(0..spec.num_classes);
    let sigma = spec.blob_sigma[label];
    let target = place(&mut rng, n, 3.0 * sigma);
    let mut image = vec![background; n * n];
    splat(&mut image, n, target, (sigma, sigma), spec.blob_intensity[label]);

    let distractor = match spec.variant {
        Variant::Single => None,
        Variant::Paired => {
            let other = (label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
            let s2 = spec.blob_sigma[other];
            let gap = 3.0 * (sigma + s2);
            let mut at = place(&mut rng, n, 3.0 * s2);
            let mut tries = 0;
            while dist(at, target) < gap && tries < 1000 {
                at = place(&mut rng, n, 3.0 * s2);
                tries += 1;
            }
            splat(&mut image, n, at, (s2, s2), spec.blob_intensity[other]);
            Some(at)
        }
    };
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated");
        for v in &mut image {
            *v += normal.sample(&mut rng);
        }
    }

    let on_target = rng.random_bool(spec.gaze_fidelity);
    let (gaze, looked_sigma) = if on_target {
        (target, sigma)
    } else {
        let c = rng.random_range(0..spec.num_classes);
        (place(&mut rng, n, 0.0), spec.blob_sigma[c])
    };
    let group = (spec.gaze_groups > 0).then(|| rng.random_range(0..spec.gaze_groups));
    let s = spec.gaze_spread * looked_sigma;
    let mut heat = vec![0.0; n * n];
    match group.unwrap_or(0) {
        0 => splat(&mut heat, n, gaze, (s, s), 1.0),
        1 => {
            // second, weaker fixation a few spreads away
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = 3.0 * s;
            let second = (gaze.0 + r * angle.cos(), gaze.1 + r * angle.sin());
            splat(&mut heat, n, gaze, (s, s), 1.0);
            splat(&mut heat, n, second, (s, s), 0.6);
        }
        2 => splat(&mut heat, n, gaze, (2.5 * s, 0.6 * s), 1.0),
        _ => splat(&mut heat, n, gaze, (0.6 * s, 2.5 * s), 1.0),
    }
    let peak = heat.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        heat.iter_mut().for_each(|v| *v /= peak);
    }

    let truth = SampleTruth {
        sample_id: format!("s{subject:03}_n{index:03}"),
        label,
        target,
        target_sigma: sigma,
        distractor,
        gaze,
        gaze_on_target: on_target,
        group,
    };
    (image, heat, truth)
}

/// Writes `images/<id>.pgm`, `heatmaps/<id>.pgm`, `manifest.csv`,
/// `truth.csv` and, with groups enabled, `gaze_groups.csv` under `out_dir`.
/// Returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let n = spec.image_size;
    for sub in ["images", "heatmaps"] {
        fs::create_dir_all(out_dir.join(sub)).at(out_dir.join(sub))?;
    }
    let mut rows = Vec::with_capacity(spec.total());
    let mut truth_csv = String::from("sample_id,label,target_x,target_y,target_sigma,gaze_x,gaze_y,gaze_on_target\n");
    let mut groups_csv = String::from("sample_id,group\n");
    for subject in 0..spec.num_subjects {
        for index in 0..spec.samples_per_subject {
            let (image, heat, t) = render(spec, subject, index);
            let img_rel = PathBuf::from("images").join(format!("{}.pgm", t.sample_id));
            let hm_rel = PathBuf::from("heatmaps").join(format!("{}.pgm", t.sample_id));
            pgm::write(&out_dir.join(&img_rel), &Greymap::from_unit(n, n, &image))?;
            pgm::write(&out_dir.join(&hm_rel), &Greymap::from_unit(n, n, &heat))?;
            writeln!(
                truth_csv,
                "{},{},{:.4},{:.4},{},{:.4},{:.4},{}",
                t.sample_id,
                t.label,
                t.target.0,
                t.target.1,
                t.target_sigma,
                t.gaze.0,
                t.gaze.1,
                u8::from(t.gaze_on_target)
            )
            .unwrap();
            if let Some(g) = t.group {
                writeln!(groups_csv, "{},{g}", t.sample_id).unwrap();
            }
            rows.push(SampleManifest {
                sample_id: t.sample_id,
                image_path: img_rel,
                heatmap_path: hm_rel,
                label: t.label,
                subject_id: format!("s{subject:03}"),
            });
        }
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    let truth = out_dir.join("truth.csv");
    fs::write(&truth, truth_csv).at(&truth)?;
    if spec.gaze_groups > 0 {
        let g = out_dir.join("gaze_groups.csv");
        fs::write(&g, groups_csv).at(&g)?;
    }
    Ok(manifest)
}

/// Ground truth for every sample without touching the filesystem.
pub fn synthetic_truth(spec: &SyntheticSpec) -> Vec<SampleTruth> {
    (0..spec.num_subjects)
        .flat_map(|s| (0..spec.samples_per_subject).map(move |i| (s, i)))
        .map(|(s, i)| render(spec, s, i).2)
        .collect()
}

/// Reads a `sample_id,group` sidecar.
pub fn load_groups(path: &Path) -> Result<std::collections::HashMap<String, usize>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut out = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, g) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, Some(i + 1), "expected `sample_id,group`"))?;
        let g = g
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, Some(i + 1), format!("bad group `{g}`")))?;
        out.insert(id.trim().to_string(), g);
    }
    Ok(out)
}
