//! Paired datasets on disk, patch extraction, and the synthetic toy noise
//! family used for verification.
//!
//! On-disk layout: `<root>/clean/<name>.png` and `<root>/noisy/<name>.png`
//! with identical file names, plus an optional `<root>/manifest.csv`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GuidancePair, ImagePatch};
use crate::rng::SeededRng;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub name: String,
    pub clean: PathBuf,
    pub noisy: PathBuf,
}

/// An ordered list of clean/noisy file pairs, loaded on demand.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<PairEntry>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads pair `i`, checking that both images agree in size.
    pub fn load(&self, i: usize) -> Result<GuidancePair> {
        let e = &self.entries[i];
        let clean = ImagePatch::read_png(&e.clean)?;
        let noisy = ImagePatch::read_png(&e.noisy)?;
        if clean.shape() != noisy.shape() {
            return Err(Error::Dataset {
                path: e.noisy.clone(),
                msg: format!("size {:?} differs from clean {:?}", noisy.shape(), clean.shape()),
            });
        }
        GuidancePair::new(noisy, clean)
    }

    pub fn load_all(&self) -> Result<Vec<GuidancePair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// The first `n` pairs.
    pub fn take(&self, n: usize) -> Self {
        Self {
            entries: self.entries.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    if !dir.exists() {
        return Ok(names);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Reads the `clean/` + `noisy/` layout under `root`, in lexicographic order.
pub fn load_dataset(root: &Path) -> Result<PairDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "dataset root is not a directory".into(),
        });
    }
    let (clean_dir, noisy_dir) = (root.join("clean"), root.join("noisy"));
    let clean = png_names(&clean_dir)?;
    let noisy = png_names(&noisy_dir)?;
    for (names, other_dir, other) in [(&noisy, &clean_dir, &clean), (&clean, &noisy_dir, &noisy)] {
        if let Some(orphan) = names.iter().find(|n| other.binary_search(n).is_err()) {
            return Err(Error::Dataset {
                path: other_dir.join(orphan),
                msg: "missing counterpart file".into(),
            });
        }
    }
    if clean.is_empty() {
        log::warn!("dataset {} is empty", root.display());
    }
    let split = match root.file_name().and_then(|s| s.to_str()) {
        Some(s @ ("train" | "val" | "test")) => s.to_string(),
        _ => "train".to_string(),
    };
    let entries = clean
        .into_iter()
        .map(|name| PairEntry {
            clean: clean_dir.join(&name),
            noisy: noisy_dir.join(&name),
            name,
        })
        .collect();
    Ok(PairDataset {
        root: root.to_path_buf(),
        split,
        entries,
    })
}

/// Row-major sliding windows; trailing partial windows are dropped.
pub fn extract_patches(img: &ImagePatch, size: usize, stride: usize) -> Result<Vec<ImagePatch>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidConfig("patch size and stride must be positive".into()));
    }
    if size > img.height() || size > img.width() {
        return Err(Error::InvalidConfig(format!(
            "patch size {size} exceeds image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut out = Vec::new();
    for top in (0..=img.height() - size).step_by(stride) {
        for left in (0..=img.width() - size).step_by(stride) {
            out.push(img.crop(top, left, size, size)?);
        }
    }
    Ok(out)
}

/// Known noise processes. Standard deviations are in 1/255 units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyNoiseSpec {
    Awgn { sigma: f64 },
    /// Per-pixel variance `a·c + b` on the [0, 1] scale.
    PoissonGaussian { a: f64, b: f64 },
    /// Box-blurred Gaussian noise rescaled to std `sigma`.
    Correlated { sigma: f64, radius: usize },
}

impl ToyNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ToyNoiseSpec::Awgn { sigma } => sigma >= 0.0,
            ToyNoiseSpec::PoissonGaussian { a, b } => a >= 0.0 && b >= 0.0,
            ToyNoiseSpec::Correlated { sigma, .. } => sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid toy noise parameters: {self}")))
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ToyNoiseSpec::Awgn { .. } => "awgn",
            ToyNoiseSpec::PoissonGaussian { .. } => "poisson_gaussian",
            ToyNoiseSpec::Correlated { .. } => "correlated",
        }
    }

    /// `key=value` pairs joined by `;`, as stored in the manifest.
    pub fn params(&self) -> String {
        match *self {
            ToyNoiseSpec::Awgn { sigma } => format!("sigma={sigma}"),
            ToyNoiseSpec::PoissonGaussian { a, b } => format!("a={a};b={b}"),
            ToyNoiseSpec::Correlated { sigma, radius } => format!("sigma={sigma};radius={radius}"),
        }
    }

    pub fn parse(kind: &str, params: &str) -> std::result::Result<Self, String> {
        let mut kv = std::collections::BTreeMap::new();
        for part in params.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            if kv.insert(k.trim(), v.trim()).is_some() {
                return Err(format!("duplicate parameter {k:?}"));
            }
        }
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| format!("{kind}: missing parameter {k:?}"));
        let num = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("bad number {v:?}"));
        let spec = match kind {
            "awgn" => ToyNoiseSpec::Awgn { sigma: num(take("sigma")?)? },
            "poisson_gaussian" => ToyNoiseSpec::PoissonGaussian {
                a: num(take("a")?)?,
                b: num(take("b")?)?,
            },
            "correlated" => ToyNoiseSpec::Correlated {
                sigma: num(take("sigma")?)?,
                radius: take("radius")?.parse().map_err(|_| "bad radius".to_string())?,
            },
            other => return Err(format!("unknown noise kind {other:?}")),
        };
        if let Some(k) = kv.keys().next() {
            return Err(format!("{kind}: unknown parameter {k:?}"));
        }
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl fmt::Display for ToyNoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind(), self.params())
    }
}

impl FromStr for ToyNoiseSpec {
    type Err = String;

    /// `kind:params`, for example `awgn:sigma=25`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        Self::parse(kind.trim(), params)
    }
}

fn box_blur(plane: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    // Separable box filter with reflected borders.
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let r = r as isize;
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| plane[y * w + reflect(x as isize + d, w)]).sum::<f32>() * norm;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| tmp[reflect(y as isize + d, h) * w + x]).sum::<f32>() * norm;
        }
    }
    out
}

/// Adds noise from `spec` to `clean` and clips to [0, 1].
pub fn apply_toy_noise(clean: &ImagePatch, spec: &ToyNoiseSpec, rng: &mut SeededRng) -> Result<ImagePatch> {
    spec.validate()?;
    let (h, w, c) = clean.shape();
    let noise: Vec<f32> = match *spec {
        ToyNoiseSpec::Awgn { sigma } => {
            let s = (sigma / 255.0) as f32;
            rng.gaussian_vec(clean.len()).into_iter().map(|z| s * z).collect()
        }
        ToyNoiseSpec::PoissonGaussian { a, b } => clean
            .data()
            .iter()
            .map(|&v| (a as f32 * v + b as f32).max(0.0).sqrt() * rng.gaussian())
            .collect(),
        ToyNoiseSpec::Correlated { sigma, radius } => {
            let s = (sigma / 255.0) as f32;
            // Blur each channel plane, then restore unit variance: a box of
            // side 2r+1 in 2-D scales the variance by 1/(2r+1)^2.
            let gain = (2 * radius + 1) as f32;
            let mut hwc = vec![0f32; clean.len()];
            for ch in 0..c {
                let plane = rng.gaussian_vec(h * w);
                for (i, v) in box_blur(&plane, h, w, radius).into_iter().enumerate() {
                    hwc[i * c + ch] = v * gain * s;
                }
            }
            hwc
        }
    };
    let data = clean.data().iter().zip(&noise).map(|(c, n)| (c + n).clamp(0.0, 1.0)).collect();
    ImagePatch::new(h, w, c, data)
}

/// A seeded smooth texture: a color gradient plus a handful of soft blobs.
pub fn procedural_clean(height: usize, width: usize, seed: u64) -> ImagePatch {
    let mut rng = SeededRng::derived(seed, &[0x636c65616e]);
    let base: Vec<[f32; 3]> = (0..3).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            (
                rng.uniform() * height as f32,
                rng.uniform() * width as f32,
                (0.08 + 0.25 * rng.uniform()) * height.max(width) as f32,
                [rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5],
            )
        })
        .collect();
    ImagePatch::from_fn(height, width, 3, |y, x, c| {
        let (fy, fx) = (y as f32 / height.max(2) as f32, x as f32 / width.max(2) as f32);
        let mut v = base[0][c] * (1.0 - fx) * (1.0 - fy) + base[1][c] * fx + base[2][c] * fy * (1.0 - fx);
        for &(by, bx, r, col) in &blobs {
            let d2 = ((y as f32 - by).powi(2) + (x as f32 - bx).powi(2)) / (r * r);
            v += 0.6 * col[c] * (-d2).exp();
        }
        // Keep headroom so that clipping rarely bites.
        0.15 + 0.7 * v.clamp(0.0, 1.0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clean_path: String,
    pub noisy_path: String,
    pub spec_kind: String,
    pub spec_params: String,
    pub seed: u64,
}

impl ManifestRow {
    pub fn spec(&self) -> std::result::Result<ToyNoiseSpec, String> {
        ToyNoiseSpec::parse(&self.spec_kind, &self.spec_params)
    }
}

/// Parses manifest CSV text. Every row must carry a valid noise spec.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestRow>, String> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["clean_path", "noisy_path", "spec_kind", "spec_params", "seed"] {
        return Err(format!("unexpected manifest header {:?}", headers.iter().collect::<Vec<_>>()));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = rec.map_err(|e| format!("row {}: {e}", i + 2))?;
        row.spec().map_err(|e| format!("row {}: {e}", i + 2))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text).map_err(|msg| Error::Dataset { path, msg })
}

#[derive(Clone, Debug)]
pub struct ToyDatasetSpec {
    pub specs: Vec<ToyNoiseSpec>,
    pub patches_per_spec: usize,
    pub patch_size: usize,
    pub seed: u64,
}

/// Writes a toy dataset under `root` and returns it loaded.
///
/// Clean patches are quantized to 8 bits before noise is added, so the
/// stored residual is exactly the generated noise up to output quantization.
pub fn make_toy_dataset(root: &Path, sources: &[ImagePatch], cfg: &ToyDatasetSpec) -> Result<PairDataset> {
    if sources.is_empty() {
        return Err(Error::Empty("clean sources"));
    }
    for s in &cfg.specs {
        s.validate()?;
    }
    let p = cfg.patch_size;
    if let Some(small) = sources.iter().find(|s| s.height() < p || s.width() < p) {
        return Err(Error::InvalidConfig(format!(
            "clean source {}x{} smaller than patch size {p}",
            small.height(),
            small.width()
        )));
    }
    std::fs::create_dir_all(root.join("clean")).map_err(|e| Error::io(root.join("clean"), e))?;
    std::fs::create_dir_all(root.join("noisy")).map_err(|e| Error::io(root.join("noisy"), e))?;
    let manifest_path = root.join(MANIFEST);
    let mut manifest = csv::Writer::from_path(&manifest_path)?;
    for (si, spec) in cfg.specs.iter().enumerate() {
        for i in 0..cfg.patches_per_spec {
            let seed = crate::rng::mix_seed(cfg.seed, &[si as u64, i as u64]);
            let mut rng = SeededRng::new(seed);
            let src = &sources[rng.below(sources.len())];
            let top = rng.below(src.height() - p + 1);
            let left = rng.below(src.width() - p + 1);
            let clean = src.crop(top, left, p, p)?.quantize_u8();
            let noisy = apply_toy_noise(&clean, spec, &mut rng)?;
            let name = format!("s{si:02}_{}_{i:05}.png", spec.kind());
            let (cp, np) = (format!("clean/{name}"), format!("noisy/{name}"));
            clean.write_png(&root.join(&cp))?;
            noisy.write_png(&root.join(&np))?;
            manifest.serialize(ManifestRow {
                clean_path: cp,
                noisy_path: np,
                spec_kind: spec.kind().into(),
                spec_params: spec.params(),
                seed,
            })?;
        }
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    load_dataset(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts_and_top_left() {
        let img = ImagePatch::from_fn(64, 64, 3, |y, x, c| (y * 64 + x + c) as f32 / 5000.0);
        assert_eq!(extract_patches(&img, 32, 32).unwrap().len(), 4);
        let p = extract_patches(&img, 32, 16).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p[0], img.crop(0, 0, 32, 32).unwrap());
        assert_eq!(p[1], img.crop(0, 16, 32, 32).unwrap());
        assert!(extract_patches(&img, 65, 1).is_err());
        assert_eq!(extract_patches(&img, 40, 32).unwrap().len(), 1);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let c = procedural_clean(16, 16, 1);
        let mut rng = SeededRng::new(0);
        assert_eq!(apply_toy_noise(&c, &ToyNoiseSpec::Awgn { sigma: 0.0 }, &mut rng).unwrap(), c);
        assert!(apply_toy_noise(&c, &ToyNoiseSpec::Awgn { sigma: -1.0 }, &mut rng).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        for s in [
            ToyNoiseSpec::Awgn { sigma: 25.0 },
            ToyNoiseSpec::PoissonGaussian { a: 0.01, b: 1e-4 },
            ToyNoiseSpec::Correlated { sigma: 10.5, radius: 2 },
        ] {
            assert_eq!(s.to_string().parse::<ToyNoiseSpec>().unwrap(), s);
            assert_eq!(ToyNoiseSpec::parse(s.kind(), &s.params()).unwrap(), s);
        }
        assert!("awgn:sigma=1;sigma=2".parse::<ToyNoiseSpec>().is_err());
        assert!("awgn:sigma=1;extra=2".parse::<ToyNoiseSpec>().is_err());
        assert!("awgn:".parse::<ToyNoiseSpec>().is_err());
        assert!("laplace:sigma=1".parse::<ToyNoiseSpec>().is_err());
    }

    #[test]
    fn procedural_sources_are_seeded() {
        assert_eq!(procedural_clean(20, 24, 3), procedural_clean(20, 24, 3));
        assert_ne!(procedural_clean(20, 24, 3), procedural_clean(20, 24, 4));
        assert!(procedural_clean(20, 24, 3).data().iter().all(|v| (0.15..=0.85).contains(v)));
    }
}
