//! Sand-dust degradation by the atmospheric scattering model
//! `I = J·t + A·(1 − t)` with `t = exp(−β·d)` and a sand-tinted airlight
//! `A = (A_R, k₁A_R + b₁, k₂A_R + b₂)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Plane};
use crate::rng;

/// Degradation severity; each has its own sampling ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Severity {
    Dust,
    Sand,
    Sandstorm,
}

text_enum!(Severity { Dust => "dust", Sand => "sand", Sandstorm => "sandstorm" });

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Dust, Severity::Sand, Severity::Sandstorm];

    fn index(self) -> usize {
        self as usize
    }
}

/// Closed sampling interval; `lo == hi` pins the value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f32,
    pub hi: f32,
}

impl Interval {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Interval { lo, hi }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lo, self.hi)
    }
}

impl FromStr for Interval {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad interval `{s}` (expected lo,hi)"));
        let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
        let lo: f32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f32 = hi.trim().parse().map_err(|_| bad())?;
        if !(lo <= hi) {
            return Err(bad());
        }
        Ok(Interval { lo, hi })
    }
}

/// Sampling ranges of one severity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub a_r: Interval,
    pub beta: Interval,
    pub k1: Interval,
    pub k2: Interval,
    pub b1: Interval,
    pub b2: Interval,
}

impl Preset {
    pub fn default_for(severity: Severity) -> Preset {
        let (beta, k1, k2) = match severity {
            Severity::Dust => ((0.4, 0.8), (0.85, 0.95), (0.65, 0.85)),
            Severity::Sand => ((0.8, 1.5), (0.75, 0.9), (0.5, 0.75)),
            Severity::Sandstorm => ((1.5, 3.0), (0.65, 0.85), (0.35, 0.6)),
        };
        Preset {
            a_r: Interval::new(0.7, 0.95),
            beta: Interval::new(beta.0, beta.1),
            k1: Interval::new(k1.0, k1.1),
            k2: Interval::new(k2.0, k2.1),
            b1: Interval::new(-0.02, 0.02),
            b2: Interval::new(-0.02, 0.02),
        }
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut Interval> {
        Some(match name {
            "a_r" => &mut self.a_r,
            "beta" => &mut self.beta,
            "k1" => &mut self.k1,
            "k2" => &mut self.k2,
            "b1" => &mut self.b1,
            "b2" => &mut self.b2,
            _ => return None,
        })
    }
}

/// Airlight color model coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AirlightParams {
    pub a_r: f32,
    pub k1: f32,
    pub k2: f32,
    pub b1: f32,
    pub b2: f32,
}

impl AirlightParams {
    pub fn rgb(&self) -> [f32; 3] {
        [self.a_r, self.k1 * self.a_r + self.b1, self.k2 * self.a_r + self.b2]
    }

    /// Channels in `[0,1]` with the sand ordering `R ≥ G ≥ B`.
    pub fn is_valid(&self) -> bool {
        let [r, g, b] = self.rgb();
        [r, g, b].iter().all(|v| (0.0..=1.0).contains(v)) && r >= g && g >= b
    }
}

const MAX_AIRLIGHT_DRAWS: usize = 1000;

/// Draws airlight coefficients, rejecting draws that break the channel
/// ordering or bounds.
pub fn sample_airlight(rng: &mut impl Rng, preset: &Preset) -> Result<(AirlightParams, [f32; 3])> {
    for _ in 0..MAX_AIRLIGHT_DRAWS {
        let p = AirlightParams {
            a_r: preset.a_r.sample(rng),
            k1: preset.k1.sample(rng),
            k2: preset.k2.sample(rng),
            b1: preset.b1.sample(rng),
            b2: preset.b2.sample(rng),
        };
        if p.is_valid() {
            return Ok((p, p.rgb()));
        }
    }
    Err(Error::Config(format!(
        "airlight preset {preset:?} produced no valid draw in {MAX_AIRLIGHT_DRAWS} attempts"
    )))
}

/// Where the per-pixel scene depth comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DepthMode {
    Constant(f32),
    /// Linear in the row index: `far` on the top row, `near` on the bottom.
    VerticalRamp {
        near: f32,
        far: f32,
    },
    /// Grayscale file, `near + g·(far − near)`.
    File {
        path: PathBuf,
        near: f32,
        far: f32,
    },
}

impl Default for DepthMode {
    fn default() -> Self {
        DepthMode::VerticalRamp { near: 0.5, far: 3.0 }
    }
}

impl fmt::Display for DepthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthMode::Constant(d) => write!(f, "constant:{d}"),
            DepthMode::VerticalRamp { near, far } => write!(f, "ramp:{near}:{far}"),
            DepthMode::File { path, near, far } => write!(f, "file:{near}:{far}:{}", path.display()),
        }
    }
}

impl FromStr for DepthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad depth mode `{s}` (expected constant:D, ramp:NEAR:FAR or file:NEAR:FAR:PATH)"
            ))
        };
        let num = |v: &str| v.trim().parse::<f32>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().splitn(4, ':').collect();
        let mode = match parts.as_slice() {
            ["constant", d] => DepthMode::Constant(num(d)?),
            ["ramp", near, far] => DepthMode::VerticalRamp {
                near: num(near)?,
                far: num(far)?,
            },
            ["file", near, far, path] if !path.is_empty() => DepthMode::File {
                path: PathBuf::from(path),
                near: num(near)?,
                far: num(far)?,
            },
            _ => return Err(bad()),
        };
        let ok = match &mode {
            DepthMode::Constant(d) => *d >= 0.0,
            DepthMode::VerticalRamp { near, far } | DepthMode::File { near, far, .. } => *near >= 0.0 && near <= far,
        };
        if !ok {
            return Err(Error::Config(format!(
                "depth mode `{s}`: depths must satisfy 0 <= near <= far"
            )));
        }
        Ok(mode)
    }
}

pub fn depth_map(mode: &DepthMode, height: usize, width: usize) -> Result<Plane> {
    match mode {
        DepthMode::Constant(d) => Ok(Plane::filled(height, width, *d)),
        DepthMode::VerticalRamp { near, far } => {
            let span = (far - near) as f64;
            let denom = height.saturating_sub(1).max(1) as f64;
            Ok(Plane::from_fn(height, width, |y, _| {
                (*far as f64 - span * y as f64 / denom) as f32
            }))
        }
        DepthMode::File { path, near, far } => {
            let g = Plane::load_gray(path)?;
            if g.height() != height || g.width() != width {
                return Err(Error::Data(format!(
                    "depth file {} is {}x{}, image is {height}x{width}",
                    path.display(),
                    g.height(),
                    g.width()
                )));
            }
            Ok(g.map(|v| near + v * (far - near)))
        }
    }
}

/// `t = exp(−β·d)` per pixel.
pub fn transmission_map(depth: &Plane, beta: f32) -> Result<Plane> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    if let Some(d) = depth.data().iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::invalid(format!("depth must be >= 0, found {d}")));
    }
    Ok(depth.map(|d| (-(beta as f64) * d as f64).exp() as f32))
}

/// `I = J·t + A·(1 − t)` per channel, evaluated in 64-bit and clamped to `[0,1]`.
pub fn degrade(clean: &ImageBuffer, airlight: [f32; 3], t: &Plane) -> Result<ImageBuffer> {
    if clean.height() != t.height() || clean.width() != t.width() {
        return Err(Error::invalid(format!(
            "image {}x{} and transmission {}x{} differ",
            clean.height(),
            clean.width(),
            t.height(),
            t.width()
        )));
    }
    Ok(ImageBuffer::from_fn(clean.height(), clean.width(), |y, x, c| {
        let tv = t.get(y, x) as f64;
        let v = clean.get(y, x, c) as f64 * tv + airlight[c] as f64 * (1.0 - tv);
        (v as f32).clamp(0.0, 1.0)
    }))
}

/// One synthesized pair with everything needed to reproduce it.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub clean: ImageBuffer,
    pub degraded: ImageBuffer,
    pub transmission: Plane,
    pub airlight: [f32; 3],
    pub params: AirlightParams,
    pub beta: f32,
    pub severity: Severity,
    pub seed: u64,
}

/// Degrades `clean` with parameters drawn from a generator seeded by `seed`.
pub fn synthesize_sample(
    clean: &ImageBuffer,
    severity: Severity,
    preset: &Preset,
    depth: &DepthMode,
    seed: u64,
) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, airlight) = sample_airlight(&mut rng, preset)?;
    let beta = preset.beta.sample(&mut rng);
    let t = transmission_map(&depth_map(depth, clean.height(), clean.width())?, beta)?;
    let degraded = degrade(clean, airlight, &t)?;
    Ok(SynthSample {
        clean: clean.clone(),
        degraded,
        transmission: t,
        airlight,
        params,
        beta,
        severity,
        seed,
    })
}

/// Dataset synthesis settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub presets: Vec<Severity>,
    pub per_image: usize,
    pub depth: DepthMode,
    pub seed: u64,
    ranges: [Preset; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            presets: Severity::ALL.to_vec(),
            per_image: 1,
            depth: DepthMode::default(),
            seed: 0,
            ranges: Severity::ALL.map(Preset::default_for),
        }
    }
}

impl SynthConfig {
    pub fn preset(&self, s: Severity) -> &Preset {
        &self.ranges[s.index()]
    }

    pub fn preset_mut(&mut self, s: Severity) -> &mut Preset {
        &mut self.ranges[s.index()]
    }

    /// Applies one `key=value` entry. Besides `presets`, `per_image`, `depth`
    /// and `seed`, every sampling range is addressable as `SEVERITY.FIELD`
    /// (`sand.beta=0.8,1.5`), or as bare `FIELD` to set it for all severities.
    /// Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        match key {
            "presets" => {
                self.presets = value.split(',').map(str::parse).collect::<Result<Vec<Severity>>>()?;
                if self.presets.is_empty() {
                    return Err(bad(&"at least one preset required"));
                }
            }
            "per_image" => self.per_image = value.trim().parse().map_err(|e| bad(&e))?,
            "depth" => self.depth = value.parse()?,
            "seed" => self.seed = value.trim().parse().map_err(|e| bad(&e))?,
            _ => {
                let (targets, field) = match key.split_once('.') {
                    Some((sev, field)) => match sev.parse::<Severity>() {
                        Ok(s) => (vec![s], field),
                        Err(_) => return Ok(false),
                    },
                    None => (Severity::ALL.to_vec(), key),
                };
                if Preset::default_for(Severity::Dust).field_mut(field).is_none() {
                    return Ok(false);
                }
                let interval: Interval = value.parse()?;
                for s in targets {
                    match self.preset_mut(s).field_mut(field) {
                        Some(slot) => *slot = interval,
                        None => return Ok(false),
                    }
                }
            }
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            (
                "presets".to_string(),
                self.presets.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("per_image".to_string(), self.per_image.to_string()),
            ("depth".to_string(), self.depth.to_string()),
        ];
        for s in Severity::ALL {
            let p = self.preset(s);
            for (name, iv) in [
                ("a_r", p.a_r),
                ("beta", p.beta),
                ("k1", p.k1),
                ("k2", p.k2),
                ("b1", p.b1),
                ("b2", p.b2),
            ] {
                out.push((format!("{s}.{name}"), iv.to_string()));
            }
        }
        out
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub severity: Severity,
    pub airlight: [f32; 3],
    pub beta: f32,
    pub depth_mode: String,
    pub degraded: String,
    pub clean: String,
    pub transmission: String,
}

/// Tab-separated index of a synthesized dataset. File names are relative to
/// the directory holding the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Source images that could not be read.
    pub skipped: usize,
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tseed\tseverity\ta_r\ta_g\ta_b\tbeta\tdepth_mode\tdegraded\tclean\ttransmission";

impl Manifest {
    pub fn render(&self) -> String {
        let mut body = format!("{MANIFEST_HEADER}\n");
        for r in &self.rows {
            body.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.seed,
                r.severity,
                r.airlight[0],
                r.airlight[1],
                r.airlight[2],
                r.beta,
                r.depth_mode,
                r.degraded,
                r.clean,
                r.transmission
            ));
        }
        let crc = crc32fast::hash(body.as_bytes());
        body.push_str(&format!(
            "#footer\trows={}\tskipped={}\tcrc32={crc:08x}\n",
            self.rows.len(),
            self.skipped
        ));
        body
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Manifest> {
        let footer_at = text
            .rfind("#footer\t")
            .ok_or_else(|| Error::Format("manifest has no footer line".into()))?;
        let (body, footer) = text.split_at(footer_at);
        let mut rows_declared = None;
        let mut skipped = None;
        let mut crc = None;
        for field in footer.trim_end().split('\t').skip(1) {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest footer field `{field}`")))?;
            match k {
                "rows" => rows_declared = v.parse::<usize>().ok(),
                "skipped" => skipped = v.parse::<usize>().ok(),
                "crc32" => crc = u32::from_str_radix(v, 16).ok(),
                _ => {}
            }
        }
        let (rows_declared, skipped, crc) = match (rows_declared, skipped, crc) {
            (Some(r), Some(s), Some(c)) => (r, s, c),
            _ => return Err(Error::Format("manifest footer lacks rows/skipped/crc32".into())),
        };
        let computed = crc32fast::hash(body.as_bytes());
        if computed != crc {
            return Err(Error::Checksum { stored: crc, computed });
        }
        let mut lines = body.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format("manifest header does not match".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("manifest row {}: `{line}`", n + 1));
            if f.len() != 11 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| bad());
            rows.push(ManifestRow {
                id: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                severity: f[2].parse()?,
                airlight: [num(f[3])?, num(f[4])?, num(f[5])?],
                beta: num(f[6])?,
                depth_mode: f[7].to_string(),
                degraded: f[8].to_string(),
                clean: f[9].to_string(),
                transmission: f[10].to_string(),
            });
        }
        if rows.len() != rows_declared {
            return Err(Error::Format(format!(
                "manifest footer declares {rows_declared} rows, found {}",
                rows.len()
            )));
        }
        Ok(Manifest {
            rows,
            skipped,
            root: root.into(),
        })
    }

    /// Reads `path`, or `path/manifest.tsv` when `path` is a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn path_of(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

/// Lists PNG/PPM files of `dir` sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Degrades every image of `clean_dir` under every configured preset,
/// `per_image` times each, and writes the pairs, transmission maps and
/// `manifest.tsv` to `out_dir`.
pub fn synthesize_dataset(clean_dir: &Path, out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    let files = list_images(clean_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG or PPM images in {}", clean_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest {
        rows: Vec::new(),
        skipped: 0,
        root: out_dir.to_path_buf(),
    };
    let mut seen = std::collections::HashSet::new();
    for file in files {
        let clean = match ImageBuffer::load(&file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                manifest.skipped += 1;
                continue;
            }
        };
        let stem: String = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        if !seen.insert(stem.clone()) {
            return Err(Error::Data(format!(
                "two inputs map to the sample prefix `{stem}`; rename one of them"
            )));
        }
        for &severity in &cfg.presets {
            for k in 0..cfg.per_image {
                let id = format!("{stem}_{severity}_{k}");
                let seed = rng::derive_seed(cfg.seed, "synth", &[id.as_bytes()]);
                let s = synthesize_sample(&clean, severity, cfg.preset(severity), &cfg.depth, seed)?;
                let row = ManifestRow {
                    degraded: format!("{id}_degraded.png"),
                    clean: format!("{id}_clean.png"),
                    transmission: format!("{id}_t.pgm"),
                    id,
                    seed,
                    severity,
                    airlight: s.airlight,
                    beta: s.beta,
                    depth_mode: cfg.depth.to_string(),
                };
                s.degraded.save_png(out_dir.join(&row.degraded))?;
                s.clean.save_png(out_dir.join(&row.clean))?;
                s.transmission.save_pgm16(out_dir.join(&row.transmission))?;
                manifest.rows.push(row);
            }
        }
    }
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Deterministic synthetic "scene": sky gradient, textured ground and a few
/// saturated blobs (so the dark channel has near-zero regions). Values are
/// multiples of 1/255, so a PNG round trip is exact.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(0.25..0.45) * height as f32;
    let sky = [
        rng.gen_range(0.45..0.7),
        rng.gen_range(0.6..0.8),
        rng.gen_range(0.8..0.95),
    ];
    let ground = [
        rng.gen_range(0.3..0.55),
        rng.gen_range(0.25..0.45),
        rng.gen_range(0.1..0.3),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..5)
        .map(|_| {
            let mut color = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            color[rng.gen_range(0..3)] = rng.gen_range(0.0..0.04);
            (
                rng.gen_range(horizon..height as f32),
                rng.gen_range(0.0..width as f32),
                rng.gen_range(0.08..0.2) * width.min(height) as f32,
                color,
            )
        })
        .collect();
    ImageBuffer::from_fn(height, width, |y, x, c| {
        let (yf, xf) = (y as f32, x as f32);
        let v = if yf < horizon {
            sky[c] + 0.15 * (yf / horizon.max(1.0))
        } else {
            let mut v = ground[c];
            for &(fy, fx, ph, amp) in &waves {
                v += amp * (fy * yf + fx * xf + ph + c as f32).sin();
            }
            for &(by, bx, r, col) in &blobs {
                let d2 = (yf - by).powi(2) + (xf - bx).powi(2);
                if d2 < r * r {
                    v = col[c];
                }
            }
            v
        };
        (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}
