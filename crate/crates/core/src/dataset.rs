//! Synthetic two-domain detection data: discs and squares on flat
//! backgrounds, with a fog-like shift (gain, noise, haze) on the target
//! domain. Stored as P6 PPM images plus `annotations.jsonl` and
//! `domain.json`.

use std::fs;
use std::path::{Path, PathBuf};

use attn_align_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{iou, BoundingBox};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["disc", "square"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Discriminator label: 0 for source, 1 for target.
    pub fn tag(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub gain: f64,
    pub noise_sigma: f64,
    pub haze_alpha: f64,
    pub haze_level: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift {
        gain: 1.0,
        noise_sigma: 0.0,
        haze_alpha: 0.0,
        haze_level: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(Error::config(format!("shift gain must be positive, got {}", self.gain)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("shift noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.haze_alpha) || !(0.0..=1.0).contains(&self.haze_level) {
            return Err(Error::config("haze_alpha and haze_level must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn apply<R: Rng>(&self, pixels: &mut [f64], rng: &mut R) {
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        for p in pixels {
            let hazed = (1.0 - self.haze_alpha) * self.gain * *p + self.haze_alpha * self.haze_level;
            let n = if self.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *p = (hazed + n).clamp(0.0, 1.0);
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            gain: 0.8,
            noise_sigma: 0.25,
            haze_alpha: 0.3,
            haze_level: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub domain: Domain,
    pub seed: u64,
    pub shift: DomainShift,
}

impl SceneSpec {
    pub fn new(domain: Domain, seed: u64) -> Self {
        SceneSpec {
            image_side: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 10,
            max_size: 30,
            domain,
            seed,
            shift: DomainShift::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::config("image_side must be at least 8"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object count range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.image_side {
            return Err(Error::config(format!(
                "object size range {}..={} is invalid for side {}",
                self.min_size, self.max_size, self.image_side
            )));
        }
        self.shift.validate()
    }

    /// The transform actually applied to this domain.
    pub fn applied_shift(&self) -> DomainShift {
        match self.domain {
            Domain::Source => DomainShift::IDENTITY,
            Domain::Target => self.shift,
        }
    }
}

/// Largest IoU allowed between two objects of one scene.
pub const MAX_PAIR_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 200;
const MIN_CONTRAST: f64 = 0.3;

/// One rendered scene: interleaved RGB bytes and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub rgb: Vec<u8>,
    pub boxes: Vec<BoundingBox>,
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn luma(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Renders scene `index`; a pure function of `(spec, index)`.
pub fn render(spec: &SceneSpec, index: usize) -> RenderedScene {
    let mut rng = scene_rng(spec.seed, index);
    let side = spec.image_side;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.55));
    let count = rng.random_range(spec.min_objects..=spec.max_objects);

    let mut pixels = Vec::with_capacity(side * side * 3);
    for _ in 0..side * side {
        pixels.extend_from_slice(&bg);
    }
    let mut boxes: Vec<BoundingBox> = Vec::new();
    let scale = side as f64;
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let x0 = rng.random_range(0..=side - size);
            let y0 = rng.random_range(0..=side - size);
            let class_id = rng.random_range(0..NUM_CLASSES);
            let b = BoundingBox::from_corners(
                x0 as f64 / scale,
                y0 as f64 / scale,
                (x0 + size) as f64 / scale,
                (y0 + size) as f64 / scale,
                class_id,
            );
            if boxes.iter().any(|o| iou(o, &b) > MAX_PAIR_IOU) {
                continue;
            }
            let color = loop {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                if (luma(&c) - luma(&bg)).abs() >= MIN_CONTRAST {
                    break c;
                }
            };
            let r = size as f64 / 2.0;
            let (cx, cy) = (x0 as f64 + r, y0 as f64 + r);
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let inside = class_id == 1 || {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        dx * dx + dy * dy <= r * r
                    };
                    if inside {
                        let o = (y * side + x) * 3;
                        pixels[o..o + 3].copy_from_slice(&color);
                    }
                }
            }
            boxes.push(b);
            break;
        }
    }
    spec.applied_shift().apply(&mut pixels, &mut rng);
    let rgb = pixels.iter().map(|&p| quantize(p)).collect();
    RenderedScene { rgb, boxes }
}

pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved RGB bytes to a channel-first `[3, side, side]` tensor in [0, 1].
pub fn rgb_to_tensor(rgb: &[u8], side: usize) -> Result<Tensor<f32>> {
    if rgb.len() != side * side * 3 {
        return Err(Error::config(format!(
            "expected {} RGB bytes for side {side}, got {}",
            side * side * 3,
            rgb.len()
        )));
    }
    let plane = side * side;
    Ok(Tensor::from_fn(&[3, side, side], |i| {
        let (c, p) = (i / plane, i % plane);
        rgb[p * 3 + c] as f32 / 255.0
    }))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parses a binary (P6, maxval 255) PPM into `(width, height, rgb)`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected an unsigned integer in the header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, "header integer out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after the header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(err(3, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(err(pos - 1, "only maxval 255 is supported"));
    }
    let need = w * h * 3;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(err(
            bytes.len(),
            &format!("truncated pixel data: {} of {need} bytes", data.len()),
        ));
    }
    if data.len() > need {
        return Err(err(pos + need, "trailing bytes after pixel data"));
    }
    Ok((w, h, data.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub domain: Domain,
    pub seed: u64,
    pub count: usize,
    pub image_side: usize,
    pub shift: DomainShift,
}

#[derive(Clone, Debug)]
pub struct DetectionSample {
    pub image_id: String,
    pub image: Tensor<f32>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: DomainInfo,
    pub samples: Vec<DetectionSample>,
}

impl Dataset {
    pub fn domain(&self) -> Domain {
        self.info.domain
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

/// Renders `count` scenes in memory, exactly as `generate` would store them.
pub fn synthesize(spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    let samples = (0..count)
        .map(|i| {
            let scene = render(spec, i);
            Ok(DetectionSample {
                image_id: image_id(i),
                image: rgb_to_tensor(&scene.rgb, spec.image_side)?,
                boxes: scene.boxes,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        info: domain_info(spec, count),
        samples,
    })
}

fn domain_info(spec: &SceneSpec, count: usize) -> DomainInfo {
    DomainInfo {
        domain: spec.domain,
        seed: spec.seed,
        count,
        image_side: spec.image_side,
        shift: spec.applied_shift(),
    }
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `count` scenes to `dir` (`images/`, `annotations.jsonl`, `domain.json`).
pub fn generate(spec: &SceneSpec, count: usize, dir: &Path) -> Result<()> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut jsonl = String::new();
    for i in 0..count {
        let scene = render(spec, i);
        let id = image_id(i);
        write(
            images.join(format!("{id}.ppm")),
            &encode_ppm(spec.image_side, spec.image_side, &scene.rgb),
        )?;
        let ann = Annotation {
            image_id: id,
            boxes: scene.boxes,
        };
        jsonl.push_str(&serde_json::to_string(&ann).expect("annotation serializes"));
        jsonl.push('\n');
    }
    write(dir.join("annotations.jsonl"), jsonl.as_bytes())?;
    let info = serde_json::to_string_pretty(&domain_info(spec, count)).expect("domain info serializes");
    write(dir.join("domain.json"), info.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Byte offset of a serde_json error position within `text`.
fn json_offset(text: &str, e: &serde_json::Error) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + e.column().saturating_sub(1)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let info_path = dir.join("domain.json");
    let info_bytes = read(&info_path)?;
    let info_text = String::from_utf8_lossy(&info_bytes);
    let info: DomainInfo = serde_json::from_str(&info_text).map_err(|e| Error::Parse {
        offset: json_offset(&info_text, &e),
        path: info_path.clone(),
        msg: e.to_string(),
    })?;

    let ann_path = dir.join("annotations.jsonl");
    let ann_bytes = read(&ann_path)?;
    let ann_text = std::str::from_utf8(&ann_bytes).map_err(|e| Error::Parse {
        path: ann_path.clone(),
        offset: e.valid_up_to(),
        msg: "annotations are not valid UTF-8".into(),
    })?;
    let mut samples = Vec::new();
    let mut offset = 0;
    for line in ann_text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: ann_path.clone(),
            offset: start + json_offset(line, &e),
            msg: e.to_string(),
        })?;
        let img_path = dir.join("images").join(format!("{}.ppm", ann.image_id));
        let (w, h, rgb) = decode_ppm(&read(&img_path)?, &img_path)?;
        if w != info.image_side || h != info.image_side {
            return Err(Error::Parse {
                path: img_path,
                offset: 3,
                msg: format!("image is {w}x{h}, dataset side is {}", info.image_side),
            });
        }
        samples.push(DetectionSample {
            image_id: ann.image_id,
            image: rgb_to_tensor(&rgb, w)?,
            boxes: ann.boxes,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            path: ann_path,
            offset: 0,
            msg: "no annotations".into(),
        });
    }
    Ok(Dataset { info, samples })
}

/// Sizes and shared settings of the four standard splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub image_side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub shift: DomainShift,
    pub source_train: usize,
    pub target_train: usize,
    pub source_eval: usize,
    pub target_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::new(Domain::Source, 0);
        DataConfig {
            seed: 0,
            image_side: s.image_side,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_size: s.min_size,
            max_size: s.max_size,
            shift: s.shift,
            source_train: 2000,
            target_train: 2000,
            source_eval: 500,
            target_eval: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    TargetTrain,
    SourceEval,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::TargetTrain,
        Split::SourceEval,
        Split::TargetEval,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::SourceEval => "source_eval",
            Split::TargetEval => "target_eval",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceEval => Domain::Source,
            Split::TargetTrain | Split::TargetEval => Domain::Target,
        }
    }
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::SourceEval => self.source_eval,
            Split::TargetEval => self.target_eval,
        }
    }

    /// Scene spec of a split; every split draws from its own seed.
    pub fn scene_spec(&self, split: Split) -> SceneSpec {
        let k = Split::ALL.iter().position(|&s| s == split).expect("listed split") as u64;
        SceneSpec {
            image_side: self.image_side,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            domain: split.domain(),
            seed: self.seed.wrapping_mul(4).wrapping_add(k),
            shift: self.shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            if self.count(split) == 0 {
                return Err(Error::config(format!("{} count must be at least 1", split.dir_name())));
            }
        }
        self.scene_spec(Split::SourceTrain).validate()
    }

    pub fn generate_all(&self, out: &Path) -> Result<()> {
        self.validate()?;
        for split in Split::ALL {
            generate(&self.scene_spec(split), self.count(split), &out.join(split.dir_name()))?;
        }
        Ok(())
    }

    pub fn synthesize(&self, split: Split) -> Result<Dataset> {
        synthesize(&self.scene_spec(split), self.count(split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_in_bounds() {
        let spec = SceneSpec::new(Domain::Target, 9);
        assert_eq!(render(&spec, 3), render(&spec, 3));
        assert_ne!(render(&spec, 3), render(&spec, 4));
        for i in 0..50 {
            let s = render(&spec, i);
            assert!((1..=4).contains(&s.boxes.len()));
            for (j, b) in s.boxes.iter().enumerate() {
                let [x1, y1, x2, y2] = b.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
                for o in &s.boxes[j + 1..] {
                    assert!(iou(b, o) <= MAX_PAIR_IOU);
                }
            }
        }
    }

    #[test]
    fn domains_differ_in_mean_intensity() {
        let mean = |d| {
            let spec = SceneSpec::new(d, 1);
            let total: f64 = (0..100)
                .flat_map(|i| render(&spec, i).rgb)
                .map(|b| b as f64 / 255.0)
                .sum();
            total / (100.0 * 64.0 * 64.0 * 3.0)
        };
        assert!((mean(Domain::Target) - mean(Domain::Source)).abs() >= 0.05);
    }

    #[test]
    fn ppm_errors() {
        let p = Path::new("x.ppm");
        let good = encode_ppm(2, 1, &[1, 2, 3, 4, 5, 6]);
        assert_eq!(decode_ppm(&good, p).unwrap(), (2, 1, vec![1, 2, 3, 4, 5, 6]));
        let cut = &good[..good.len() - 2];
        match decode_ppm(cut, p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
        assert!(decode_ppm(b"P5\n1 1\n255\n\0", p).is_err());
        assert!(decode_ppm(b"P6\n1 x\n255\n", p).is_err());
        assert!(decode_ppm(b"P6 # c\n1 1\n255\n\x01\x02\x03", p).is_ok());
    }

    #[test]
    fn split_specs_use_distinct_seeds() {
        let cfg = DataConfig::default();
        let seeds: std::collections::HashSet<u64> = Split::ALL.iter().map(|&s| cfg.scene_spec(s).seed).collect();
        assert_eq!(seeds.len(), 4);
        assert_eq!(cfg.scene_spec(Split::TargetEval).domain, Domain::Target);
    }
}
