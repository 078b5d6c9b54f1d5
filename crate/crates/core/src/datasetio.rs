//! On-disk dataset layout, sample construction with augmentation, and the
//! synthetic scene generator.
//!
//! A dataset root holds:
//!
//! ```text
//! manifest.jsonl           one frame record per line
//! markers.csv              chart markers
//! calibration.txt          camera calibration
//! images/<frame>.png
//! labels/<frame>.txt       `class cx cy w h` per object, normalized
//! labels/<frame>.json      label line index -> marker id or null
//! detections/<frame>.txt   optional `class cx cy w h score dist`
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_point, BoundingBox, Calibration, CameraIntrinsics, pixel_to_ray};
use crate::chartdb::{select_markers, ChartMarker, MarkerCategory, MarkerStore, SelectionParams};
use crate::error::{Error, Result};
use crate::fusion::train::SampleSource;
use crate::fusion::{GroundTruthRow, QueryRow, Sample, Tensor};
use crate::geo::{body_to_geodetic, geodetic_to_body, BodyFramePoint, CameraPose, GeodeticPosition};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";
pub const MARKERS: &str = "markers.csv";
pub const CALIBRATION: &str = "calibration.txt";

const QUANTUM: f64 = 4294967296.0; // 2^32

/// Rounds a normalized coordinate to a multiple of 2^-32 so that `1 - x`
/// is exact and mirroring twice restores the value bit for bit.
pub fn quantize(x: f64) -> f64 {
    (x * QUANTUM).round() / QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class: u32,
    /// Normalized (cx, cy, w, h).
    pub bbox: [f64; 4],
    /// `None` marks a buoy that is not on the chart.
    pub marker_id: Option<String>,
}

/// Output of an external detector for the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: u32,
    pub bbox: [f64; 4],
    pub score: f64,
    /// Estimated distance in meters.
    pub dist: f64,
}

impl Detection {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let [cx, cy, w, h] = self.bbox;
        Ok(BoundingBox::normalized(cx, cy, w, h)?.with_score(self.score))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PoseRecord {
    lat: f64,
    lon: f64,
    heading: f64,
    roll: f64,
    pitch: f64,
    height: f64,
    timestamp: f64,
}

impl PoseRecord {
    fn from_pose(p: &CameraPose) -> Self {
        Self {
            lat: p.position.lat(),
            lon: p.position.lon(),
            heading: p.heading(),
            roll: p.roll,
            pitch: p.pitch,
            height: p.height(),
            timestamp: p.timestamp,
        }
    }

    fn to_pose(self) -> Result<CameraPose> {
        CameraPose::new(
            GeodeticPosition::new(self.lat, self.lon)?,
            self.heading,
            self.roll,
            self.pitch,
            self.height,
            self.timestamp,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    /// Relative to the dataset root.
    pub image: Option<PathBuf>,
    pub scene_seed: Option<u64>,
    pub pose: CameraPose,
    pub labels: Vec<Label>,
    pub detections: Option<Vec<Detection>>,
    pub split: Split,
    /// Edit counter of the association file.
    pub version: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    format_version: u32,
    frame_id: String,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    scene_seed: Option<u64>,
    pose: PoseRecord,
    labels: String,
    associations: String,
    #[serde(default)]
    detections: Option<String>,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationFile {
    pub format_version: u32,
    #[serde(default)]
    pub version: u64,
    pub associations: BTreeMap<usize, Option<String>>,
}

pub fn labels_rel(frame_id: &str) -> String {
    format!("labels/{frame_id}.txt")
}

pub fn associations_rel(frame_id: &str) -> String {
    format!("labels/{frame_id}.json")
}

pub fn detections_rel(frame_id: &str) -> String {
    format!("detections/{frame_id}.txt")
}

fn check_unit_box(b: &[f64; 4]) -> std::result::Result<(), String> {
    if b.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(format!("box {b:?} has components outside [0, 1]"));
    }
    if b[2] <= 0.0 || b[3] <= 0.0 {
        return Err(format!("box {b:?} has non-positive size"));
    }
    Ok(())
}

fn parse_numbers(line: &str, path: &Path, lineno: usize, n: usize) -> Result<Vec<f64>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != n {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::parse(path, lineno, format!("invalid number `{f}`")))
        })
        .collect()
}

fn parse_class(v: f64, path: &Path, lineno: usize) -> Result<u32> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::parse(path, lineno, format!("class `{v}` is not a non-negative integer")));
    }
    Ok(v as u32)
}

/// Parses a label file into (class, box) rows.
pub fn parse_label_file(text: &str, path: &Path) -> Result<Vec<(u32, [f64; 4])>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_numbers(line, path, i + 1, 5)?;
        let class = parse_class(v[0], path, i + 1)?;
        let b = [quantize(v[1]), quantize(v[2]), quantize(v[3]), quantize(v[4])];
        check_unit_box(&b).map_err(|m| Error::parse(path, i + 1, m))?;
        out.push((class, b));
    }
    Ok(out)
}

pub fn parse_detection_file(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_numbers(line, path, i + 1, 7)?;
        let class = parse_class(v[0], path, i + 1)?;
        let bbox = [quantize(v[1]), quantize(v[2]), quantize(v[3]), quantize(v[4])];
        check_unit_box(&bbox).map_err(|m| Error::parse(path, i + 1, m))?;
        if !(0.0..=1.0).contains(&v[5]) || !(v[6] >= 0.0 && v[6].is_finite()) {
            return Err(Error::parse(path, i + 1, "score must be in [0, 1] and dist >= 0"));
        }
        out.push(Detection {
            class,
            bbox,
            score: v[5],
            dist: v[6],
        });
    }
    Ok(out)
}

pub fn label_file_text(labels: &[Label]) -> String {
    let mut s = String::new();
    for l in labels {
        let [cx, cy, w, h] = l.bbox;
        s.push_str(&format!("{} {cx} {cy} {w} {h}\n", l.class));
    }
    s
}

pub fn detection_file_text(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let [cx, cy, w, h] = d.bbox;
        s.push_str(&format!("{} {cx} {cy} {w} {h} {} {}\n", d.class, d.score, d.dist));
    }
    s
}

pub fn association_file(record: &FrameRecord) -> AssociationFile {
    AssociationFile {
        format_version: FORMAT_VERSION,
        version: record.version,
        associations: record
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i, l.marker_id.clone()))
            .collect(),
    }
}

/// Validates an association file against a frame's labels and the chart.
pub fn apply_associations(
    boxes: &[(u32, [f64; 4])],
    assoc: &AssociationFile,
    store: &MarkerStore,
    path: &Path,
) -> Result<Vec<Label>> {
    if assoc.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            path,
            0,
            format!("unsupported format_version {}", assoc.format_version),
        ));
    }
    let mut labels: Vec<Label> = boxes
        .iter()
        .map(|(class, bbox)| Label {
            class: *class,
            bbox: *bbox,
            marker_id: None,
        })
        .collect();
    let mut used = HashSet::new();
    for (&idx, id) in &assoc.associations {
        let label = labels.get_mut(idx).ok_or_else(|| {
            Error::parse(path, 0, format!("label index {idx} out of range ({} labels)", boxes.len()))
        })?;
        if let Some(id) = id {
            if !store.contains(id) {
                return Err(Error::parse(path, 0, format!("label {idx}: unknown marker id `{id}`")));
            }
            if !used.insert(id.clone()) {
                return Err(Error::parse(path, 0, format!("marker `{id}` associated twice")));
            }
        }
        label.marker_id = id.clone();
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<FrameRecord>,
    pub markers: MarkerStore,
    pub calibration: Calibration,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_frame_id(id: &str, path: &Path, line: usize) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::parse(path, line, format!("invalid frame id `{id}`")))
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let markers = MarkerStore::parse_csv(&read(&root.join(MARKERS))?, &root.join(MARKERS))?;
    let calibration = Calibration::load(&root.join(CALIBRATION))?;
    let manifest_path = root.join(MANIFEST);
    let text = read(&manifest_path)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let m: ManifestLine = serde_json::from_str(line)
            .map_err(|e| Error::parse(&manifest_path, lineno, e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                &manifest_path,
                lineno,
                format!("unsupported format_version {}", m.format_version),
            ));
        }
        check_frame_id(&m.frame_id, &manifest_path, lineno)?;
        if !seen.insert(m.frame_id.clone()) {
            return Err(Error::parse(
                &manifest_path,
                lineno,
                format!("duplicate frame id `{}`", m.frame_id),
            ));
        }
        let pose = m
            .pose
            .to_pose()
            .map_err(|e| Error::parse(&manifest_path, lineno, e.to_string()))?;
        // the service rewrites association files in place, so the layout is fixed
        let expected = [
            (&m.labels, labels_rel(&m.frame_id)),
            (&m.associations, associations_rel(&m.frame_id)),
        ];
        for (got, want) in expected {
            if *got != want {
                return Err(Error::parse(&manifest_path, lineno, format!("expected path `{want}`, found `{got}`")));
            }
        }
        let label_path = root.join(&m.labels);
        let boxes = parse_label_file(&read(&label_path)?, &label_path)?;
        let assoc_path = root.join(&m.associations);
        let assoc: AssociationFile = serde_json::from_str(&read(&assoc_path)?)
            .map_err(|e| Error::parse(&assoc_path, e.line(), e.to_string()))?;
        let labels = apply_associations(&boxes, &assoc, &markers, &assoc_path)?;
        let detections = match &m.detections {
            Some(rel) => {
                let p = root.join(rel);
                Some(parse_detection_file(&read(&p)?, &p)?)
            }
            None => None,
        };
        records.push(FrameRecord {
            frame_id: m.frame_id,
            image: m.image.map(PathBuf::from),
            scene_seed: m.scene_seed,
            pose,
            labels,
            detections,
            split: m.split,
            version: assoc.version,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
        markers,
        calibration,
    })
}

impl Dataset {
    pub fn record(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.records.iter().find(|r| r.frame_id == frame_id)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn image_path(&self, record: &FrameRecord) -> Result<PathBuf> {
        record
            .image
            .as_ref()
            .map(|p| self.root.join(p))
            .ok_or_else(|| Error::InvalidInput(format!("frame {} has no image", record.frame_id)))
    }

    pub fn load_image(&self, record: &FrameRecord) -> Result<Tensor> {
        let path = self.image_path(record)?;
        let img = image::open(&path)?.to_rgb8();
        Ok(image_to_tensor(&img))
    }

    /// Writes the dataset under `root`, copying images from the current
    /// root when the two differ.
    pub fn save(&self, root: &Path) -> Result<()> {
        for dir in ["labels", "images", "detections"] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        self.markers.save(&root.join(MARKERS))?;
        self.calibration.save(&root.join(CALIBRATION))?;
        let mut manifest = String::new();
        for r in &self.records {
            if let Some(img) = &r.image {
                let (src, dst) = (self.root.join(img), root.join(img));
                if src != dst {
                    if let Some(parent) = dst.parent() {
                        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
                }
            }
            let det_rel = r.detections.as_ref().map(|_| detections_rel(&r.frame_id));
            let line = ManifestLine {
                format_version: FORMAT_VERSION,
                frame_id: r.frame_id.clone(),
                image: r.image.as_ref().map(|p| p.to_string_lossy().into_owned()),
                scene_seed: r.scene_seed,
                pose: PoseRecord::from_pose(&r.pose),
                labels: labels_rel(&r.frame_id),
                associations: associations_rel(&r.frame_id),
                detections: det_rel.clone(),
                split: r.split,
            };
            manifest.push_str(&serde_json::to_string(&line)?);
            manifest.push('\n');
            let lp = root.join(labels_rel(&r.frame_id));
            fs::write(&lp, label_file_text(&r.labels)).map_err(|e| Error::io(&lp, e))?;
            let ap = root.join(associations_rel(&r.frame_id));
            let json = serde_json::to_string_pretty(&association_file(r))?;
            fs::write(&ap, json + "\n").map_err(|e| Error::io(&ap, e))?;
            if let (Some(rel), Some(d)) = (det_rel, &r.detections) {
                let dp = root.join(rel);
                fs::write(&dp, detection_file_text(d)).map_err(|e| Error::io(&dp, e))?;
            }
        }
        let mp = root.join(MANIFEST);
        fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))
    }
}

/// RGB image as a [3, H, W] tensor scaled to [0, 1].
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape")
}

// ---------------------------------------------------------------------------
// Samples

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryNoise {
    /// Half width of the uniform distance perturbation, meters.
    pub dist_m: f64,
    /// Half width of the uniform bearing perturbation, radians.
    pub bearing_rad: f64,
}

impl QueryNoise {
    /// ±5% of `d_max` and ±2°.
    pub fn for_range(d_max: f64) -> Self {
        Self {
            dist_m: 0.05 * d_max,
            bearing_rad: 2f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub noise: Option<QueryNoise>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub selection: SelectionParams,
    /// Distance normalizer for query features.
    pub d_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleDiagnostics {
    /// Labeled markers that the chart selection did not return.
    pub selection_misses: Vec<String>,
}

/// Mirrors a sample left to right: image columns, bearings and box centers.
pub fn hflip(s: &Sample) -> Sample {
    let shape = s.image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = s.image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let raw: Vec<[f64; 2]> = s.queries.raw.iter().map(|[d, b]| [*d, -b]).collect();
    let features = s.queries.features.iter().map(|[d, b]| [*d, -b]).collect();
    Sample {
        image: Tensor::new(shape, data).expect("same shape"),
        queries: QueryRow {
            marker_ids: s.queries.marker_ids.clone(),
            features,
            raw,
        },
        gt: GroundTruthRow {
            visible: s.gt.visible.clone(),
            boxes: s
                .gt
                .boxes
                .iter()
                .map(|b| b.map(|[cx, cy, w, h]| [1.0 - cx, cy, w, h]))
                .collect(),
        },
    }
}

/// Mirrors image rows and box centers; queries are unchanged.
pub fn vflip(s: &Sample) -> Sample {
    let shape = s.image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = s.image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let (dst, from) = ((ch * h + y) * w, (ch * h + (h - 1 - y)) * w);
            data[dst..dst + w].copy_from_slice(&src[from..from + w]);
        }
    }
    Sample {
        image: Tensor::new(shape, data).expect("same shape"),
        queries: s.queries.clone(),
        gt: GroundTruthRow {
            visible: s.gt.visible.clone(),
            boxes: s
                .gt
                .boxes
                .iter()
                .map(|b| b.map(|[cx, cy, w, h]| [cx, 1.0 - cy, w, h]))
                .collect(),
        },
    }
}

/// Builds the model inputs and targets for one frame. Queries come from
/// the chart selection at the recorded pose; a query is visible iff a label
/// carries its marker id.
pub fn make_sample(
    record: &FrameRecord,
    image: &Tensor,
    store: &MarkerStore,
    opts: &SampleOptions,
    augment: &Augment,
    rng: &mut impl Rng,
) -> Result<(Sample, SampleDiagnostics)> {
    let selected = select_markers(store, &record.pose, &opts.selection);
    let mut ids = Vec::with_capacity(selected.len());
    let mut raw = Vec::with_capacity(selected.len());
    for q in &selected {
        let (mut d, mut b) = (q.polar.dist(), q.polar.bearing());
        if let Some(n) = augment.noise {
            if n.dist_m > 0.0 {
                d = (d + rng.random_range(-n.dist_m..=n.dist_m)).max(0.0);
            }
            if n.bearing_rad > 0.0 {
                b = crate::geo::wrap_angle(b + rng.random_range(-n.bearing_rad..=n.bearing_rad))?;
            }
        }
        ids.push(q.marker_id.clone());
        raw.push([d, b]);
    }
    let labelled: BTreeMap<&str, &Label> = record
        .labels
        .iter()
        .filter_map(|l| l.marker_id.as_deref().map(|id| (id, l)))
        .collect();
    let selected_ids: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let diagnostics = SampleDiagnostics {
        selection_misses: labelled
            .keys()
            .filter(|id| !selected_ids.contains(*id))
            .map(|id| id.to_string())
            .collect(),
    };
    let visible: Vec<bool> = ids.iter().map(|id| labelled.contains_key(id.as_str())).collect();
    let boxes = ids
        .iter()
        .map(|id| labelled.get(id.as_str()).map(|l| l.bbox))
        .collect();
    let mut sample = Sample {
        image: image.clone(),
        queries: QueryRow::new(ids, raw, opts.d_max)?,
        gt: GroundTruthRow { visible, boxes },
    };
    if augment.hflip {
        sample = hflip(&sample);
    }
    if augment.vflip {
        sample = vflip(&sample);
    }
    Ok((sample, diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub noise: Option<QueryNoise>,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            noise: None,
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Augment {
        Augment {
            hflip: self.hflip_prob > 0.0 && rng.random_bool(self.hflip_prob),
            vflip: self.vflip_prob > 0.0 && rng.random_bool(self.vflip_prob),
            noise: self.noise,
        }
    }
}

/// Training view over a subset of a dataset, images cached in memory.
pub struct DatasetSource<'a> {
    dataset: &'a Dataset,
    indices: Vec<usize>,
    images: Vec<Tensor>,
    opts: SampleOptions,
    policy: AugmentPolicy,
}

impl<'a> DatasetSource<'a> {
    pub fn new(dataset: &'a Dataset, indices: Vec<usize>, opts: SampleOptions, policy: AugmentPolicy) -> Result<Self> {
        let images = indices
            .iter()
            .map(|&i| dataset.load_image(&dataset.records[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            indices,
            images,
            opts,
            policy,
        })
    }

    pub fn record(&self, index: usize) -> &FrameRecord {
        &self.dataset.records[self.indices[index]]
    }

    pub fn with_policy(mut self, policy: AugmentPolicy) -> Self {
        self.policy = policy;
        self
    }
}

impl SampleSource for DatasetSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let augment = self.policy.draw(rng);
        let record = &self.dataset.records[self.indices[index]];
        let (s, _) = make_sample(
            record,
            &self.images[index],
            &self.dataset.markers,
            &self.opts,
            &augment,
            rng,
        )?;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub sky_top: [u8; 3],
    pub sky_horizon: [u8; 3],
    pub sea_horizon: [u8; 3],
    pub sea_bottom: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            sky_top: [110, 160, 225],
            sky_horizon: [205, 220, 235],
            sea_horizon: [70, 105, 135],
            sea_bottom: [20, 45, 80],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    pub miss_prob: f64,
    /// Standard deviation of the box center, pixels.
    pub center_px: f64,
    /// Relative standard deviation of box size.
    pub size_frac: f64,
    /// Relative standard deviation of the distance estimate.
    pub dist_frac: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            miss_prob: 0.02,
            center_px: 0.3,
            size_frac: 0.05,
            dist_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub image_w: u32,
    pub image_h: u32,
    pub focal_px: f64,
    pub mount_height: f64,
    pub palette: Palette,
    /// Rendered buoys per frame, inclusive range.
    pub buoys_per_frame: (usize, usize),
    /// Probability that a rendered buoy is missing from the chart.
    pub unmapped_prob: f64,
    /// Charted markers in view that are not rendered, inclusive range.
    pub decoys_per_frame: (usize, usize),
    /// Probability that a decoy lies within `dist_range` (an occluded
    /// marker); otherwise it lies beyond visual range.
    pub decoy_near_prob: f64,
    pub dist_range: (f64, f64),
    /// Disc radius in pixels is `size_k / dist`.
    pub size_k: f64,
    /// Standard deviation of the recorded-minus-true heading, pitch and
    /// roll, degrees.
    pub pose_jitter_deg: [f64; 3],
    /// Amplitude of the true roll and pitch, degrees.
    pub attitude_deg: f64,
    pub mismap_prob: f64,
    pub mismap_offset_m: f64,
    /// Amplitude of uniform per-pixel noise in [0, 1] units.
    pub pixel_noise: f64,
    pub detector: DetectorNoise,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_w: 96,
            image_h: 54,
            focal_px: 83.0,
            mount_height: 4.0,
            palette: Palette::default(),
            buoys_per_frame: (1, 4),
            unmapped_prob: 0.0,
            decoys_per_frame: (0, 2),
            decoy_near_prob: 0.2,
            dist_range: (60.0, 260.0),
            size_k: 600.0,
            pose_jitter_deg: [0.0; 3],
            attitude_deg: 1.0,
            mismap_prob: 0.0,
            mismap_offset_m: 0.0,
            pixel_noise: 0.02,
            detector: DetectorNoise::default(),
            val_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.image_w >= 8
            && self.image_h >= 8
            && self.focal_px > 0.0
            && self.mount_height > 0.0
            && self.buoys_per_frame.0 <= self.buoys_per_frame.1
            && self.decoys_per_frame.0 <= self.decoys_per_frame.1
            && self.dist_range.0 > 0.0
            && self.dist_range.0 < self.dist_range.1
            && self.size_k > 0.0
            && self.pose_jitter_deg.iter().all(|v| *v >= 0.0)
            && self.attitude_deg >= 0.0
            && self.mismap_offset_m >= 0.0
            && self.pixel_noise >= 0.0
            && [
                self.unmapped_prob,
                self.decoy_near_prob,
                self.mismap_prob,
                self.detector.miss_prob,
                self.val_fraction,
                self.test_fraction,
            ]
            .into_iter()
            .all(prob)
            && self.val_fraction + self.test_fraction <= 1.0
            && self.detector.center_px >= 0.0
            && self.detector.size_frac >= 0.0
            && self.detector.dist_frac >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid synthetic scene spec {self:?}")))
        }
    }

    pub fn calibration(&self) -> Result<Calibration> {
        let fl = 4.0;
        Ok(Calibration {
            intrinsics: CameraIntrinsics::new(
                self.image_w as f64 / 2.0,
                self.image_h as f64 / 2.0,
                self.focal_px / fl,
                fl,
                self.image_w,
                self.image_h,
            )?,
            mount: [0.0, 0.0, self.mount_height],
        })
    }

    pub fn selection(&self) -> Result<SelectionParams> {
        let hfov = self.calibration()?.intrinsics.horizontal_fov();
        let p = SelectionParams::for_camera(hfov);
        p.validate()?;
        Ok(p)
    }
}

/// Ground truth of one rendered buoy.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedBuoy {
    pub marker_id: Option<String>,
    pub category: MarkerCategory,
    pub dist: f64,
    pub bearing: f64,
    /// Pixel box (cx, cy, w, h) before clamping.
    pub pixel_box: [f64; 4],
}

/// A generated frame before it is written out.
pub struct SyntheticFrame {
    pub record: FrameRecord,
    pub image: RgbImage,
    pub markers: Vec<ChartMarker>,
    pub buoys: Vec<RenderedBuoy>,
    pub true_pose: CameraPose,
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn category_color(c: MarkerCategory) -> [f64; 3] {
    match c {
        MarkerCategory::LateralRed => [0.82, 0.16, 0.14],
        MarkerCategory::LateralGreen => [0.12, 0.68, 0.26],
        MarkerCategory::SafeWater => [0.95, 0.95, 0.95],
        MarkerCategory::Special => [0.95, 0.82, 0.12],
        MarkerCategory::Mooring => [0.92, 0.5, 0.1],
        MarkerCategory::Other => [0.1, 0.1, 0.1],
    }
}

const CATEGORIES: [MarkerCategory; 4] = [
    MarkerCategory::LateralRed,
    MarkerCategory::LateralGreen,
    MarkerCategory::SafeWater,
    MarkerCategory::Special,
];

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}

fn frame_origin(index: usize) -> Result<GeodeticPosition> {
    let row = index / 25;
    let col = index % 25;
    GeodeticPosition::new(40.0 + row as f64 * 0.03, -73.0 + col as f64 * 0.04)
}

/// Generates frame `index` of the dataset described by `spec`.
pub fn synthesize_frame(spec: &SyntheticSceneSpec, index: usize, split: Split) -> Result<SyntheticFrame> {
    spec.validate()?;
    let scene_seed = frame_seed(spec.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let calib = spec.calibration()?;
    let intr = calib.intrinsics;
    let (w, h) = (spec.image_w as f64, spec.image_h as f64);
    let frame_id = format!("f{index:05}");

    let att = spec.attitude_deg;
    let uniform = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let heading = rng.random_range(0.0..360.0);
    let roll = uniform(&mut rng, att);
    let pitch = uniform(&mut rng, att);
    let position = frame_origin(index)?;
    let true_pose = CameraPose::new(position, heading, roll, pitch, spec.mount_height, index as f64)?;
    let gauss = |rng: &mut ChaCha8Rng, s: f64| {
        if s > 0.0 {
            Normal::new(0.0, s).expect("positive std").sample(rng)
        } else {
            0.0
        }
    };
    let [jh, jp, jr] = spec.pose_jitter_deg;
    let recorded_pose = CameraPose::new(
        position,
        heading + gauss(&mut rng, jh),
        roll + gauss(&mut rng, jr),
        pitch + gauss(&mut rng, jp),
        spec.mount_height,
        index as f64,
    )?;
    let extr = calib.extrinsics(roll, pitch);

    let half_fov = intr.horizontal_fov() / 2.0;
    let n_buoys = rng.random_range(spec.buoys_per_frame.0..=spec.buoys_per_frame.1);
    let mut buoys: Vec<RenderedBuoy> = Vec::new();
    let mut markers: Vec<ChartMarker> = Vec::new();
    let mut charted_points: Vec<BodyFramePoint> = Vec::new();
    let mut k = 0;
    let next_id = |k: &mut usize| {
        let id = format!("M{index:05}_{:02}", *k);
        *k += 1;
        id
    };

    for _ in 0..n_buoys {
        let mut placed = None;
        for _ in 0..60 {
            let dist = rng.random_range(spec.dist_range.0..spec.dist_range.1);
            let bearing = rng.random_range(-0.85 * half_fov..0.85 * half_fov);
            let (s, c) = bearing.sin_cos();
            let water = nalgebra::Vector3::new(dist * c, dist * s, 0.0);
            let Some((u, v)) = project_point(&water, &intr, &extr) else {
                continue;
            };
            let r = spec.size_k / dist;
            let pb = [u, v - r, 2.0 * r, 2.0 * r];
            let inside = pb[0] - r >= 0.5 && pb[0] + r <= w - 0.5 && pb[1] - r >= 0.5 && v <= h - 0.5;
            let clear = buoys.iter().all(|o| {
                let dx = (o.pixel_box[0] - pb[0]).abs();
                let dy = (o.pixel_box[1] - pb[1]).abs();
                dx > (o.pixel_box[2] + pb[2]) / 2.0 + 1.0 || dy > (o.pixel_box[3] + pb[3]) / 2.0 + 1.0
            });
            let p = BodyFramePoint::new(water.x, water.y, 0.0);
            let spaced = charted_points.iter().all(|q| q.distance_2d(&p) > 15.0);
            if inside && clear && spaced {
                placed = Some((dist, bearing, pb, p));
                break;
            }
        }
        let Some((dist, bearing, pixel_box, point)) = placed else {
            continue;
        };
        let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
        let mapped = !rng.random_bool(spec.unmapped_prob);
        let marker_id = if mapped {
            let id = next_id(&mut k);
            let mut chart_point = point;
            if spec.mismap_prob > 0.0 && rng.random_bool(spec.mismap_prob) {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                chart_point.x += spec.mismap_offset_m * a.cos();
                chart_point.y += spec.mismap_offset_m * a.sin();
            }
            markers.push(ChartMarker {
                id: id.clone(),
                position: body_to_geodetic(&chart_point, &true_pose)?,
                category,
                description: "synthetic".into(),
            });
            Some(id)
        } else {
            None
        };
        charted_points.push(point);
        buoys.push(RenderedBuoy {
            marker_id,
            category,
            dist,
            bearing,
            pixel_box,
        });
    }

    // markers in the selection wedge without a visible buoy
    let n_decoys = rng.random_range(spec.decoys_per_frame.0..=spec.decoys_per_frame.1);
    for _ in 0..n_decoys {
        for _ in 0..60 {
            let (lo, hi) = spec.dist_range;
            let dist = if rng.random_bool(spec.decoy_near_prob) {
                rng.random_range(lo..hi)
            } else {
                rng.random_range(1.3 * hi..(4.0 * hi).max(1.3 * hi + 1.0))
            };
            let bearing = rng.random_range(-half_fov..half_fov);
            let p = BodyFramePoint::new(dist * bearing.cos(), dist * bearing.sin(), 0.0);
            if charted_points.iter().all(|q| q.distance_2d(&p) > 15.0) {
                charted_points.push(p);
                markers.push(ChartMarker {
                    id: next_id(&mut k),
                    position: body_to_geodetic(&p, &true_pose)?,
                    category: CATEGORIES[rng.random_range(0..CATEGORIES.len())],
                    description: "synthetic, not visible".into(),
                });
                break;
            }
        }
    }
    // one marker astern, outside any forward selection
    let astern = rng.random_range(200.0..800.0);
    markers.push(ChartMarker {
        id: next_id(&mut k),
        position: body_to_geodetic(&BodyFramePoint::new(-astern, rng.random_range(-50.0..50.0), 0.0), &true_pose)?,
        category: MarkerCategory::Other,
        description: "synthetic, astern".into(),
    });

    let image = render(spec, &intr, &extr, &buoys, &mut rng);

    let mut labels = Vec::new();
    let mut detections = Vec::new();
    for b in &buoys {
        let [cx, cy, bw, bh] = b.pixel_box;
        let Some(clamped) = BoundingBox::pixels(cx, cy, bw, bh)?.clamp_to_image(spec.image_w, spec.image_h) else {
            continue;
        };
        let n = clamped.to_normalized(spec.image_w, spec.image_h);
        labels.push(Label {
            class: 0,
            bbox: [quantize(n.cx), quantize(n.cy), quantize(n.w), quantize(n.h)],
            marker_id: b.marker_id.clone(),
        });
        if rng.random_bool(spec.detector.miss_prob) {
            continue;
        }
        let d = &spec.detector;
        let dcx = cx + gauss(&mut rng, d.center_px);
        let dcy = cy + gauss(&mut rng, d.center_px);
        let dw = bw * (1.0 + gauss(&mut rng, d.size_frac)).max(0.2);
        let dh = bh * (1.0 + gauss(&mut rng, d.size_frac)).max(0.2);
        let score = rng.random_range(0.3..1.0);
        let dist = (b.dist * (1.0 + gauss(&mut rng, d.dist_frac))).max(0.0);
        if let Some(db) = BoundingBox::pixels(dcx, dcy, dw, dh)?.clamp_to_image(spec.image_w, spec.image_h) {
            let n = db.to_normalized(spec.image_w, spec.image_h);
            detections.push(Detection {
                class: 0,
                bbox: [quantize(n.cx), quantize(n.cy), quantize(n.w), quantize(n.h)],
                score,
                dist,
            });
        }
    }

    Ok(SyntheticFrame {
        record: FrameRecord {
            image: Some(PathBuf::from(format!("images/{frame_id}.png"))),
            frame_id,
            scene_seed: Some(scene_seed),
            pose: recorded_pose,
            labels,
            detections: Some(detections),
            split,
            version: 0,
        },
        image,
        markers,
        buoys,
        true_pose,
    })
}

fn render(
    spec: &SyntheticSceneSpec,
    intr: &CameraIntrinsics,
    extr: &crate::camera::CameraExtrinsics,
    buoys: &[RenderedBuoy],
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let (w, h) = (spec.image_w, spec.image_h);
    let pal = &spec.palette;
    let mut px = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let ray = pixel_to_ray(x as f64 + 0.5, y as f64 + 0.5, intr, extr);
            let d = ray.direction;
            let elev = d.z.atan2(d.x.hypot(d.y));
            let sky = lerp3(rgb(pal.sky_horizon), rgb(pal.sky_top), (elev / 0.35).clamp(0.0, 1.0));
            let sea = lerp3(rgb(pal.sea_horizon), rgb(pal.sea_bottom), (-elev / 0.2).clamp(0.0, 1.0));
            // soften the horizon over about a pixel
            let t = (0.5 + elev * intr.focal_px()).clamp(0.0, 1.0);
            px[(y * w + x) as usize] = lerp3(sea, sky, t);
        }
    }
    let mut order: Vec<&RenderedBuoy> = buoys.iter().collect();
    order.sort_by(|a, b| b.dist.total_cmp(&a.dist));
    const SS: usize = 4;
    for b in order {
        let [cx, cy, bw, _] = b.pixel_box;
        let r = bw / 2.0;
        let color = category_color(b.category);
        let x0 = (cx - r).floor().max(0.0) as u32;
        let x1 = ((cx + r).ceil() as u32).min(w);
        let y0 = (cy - r).floor().max(0.0) as u32;
        let y1 = ((cy + r).ceil() as u32).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut inside = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let fx = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let fy = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        if (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r {
                            inside += 1;
                        }
                    }
                }
                if inside > 0 {
                    let cov = inside as f64 / (SS * SS) as f64;
                    let p = &mut px[(y * w + x) as usize];
                    *p = lerp3(*p, color, cov);
                }
            }
        }
    }
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = px[(y * w + x) as usize];
            let mut out = [0u8; 3];
            for c in 0..3 {
                let n = if spec.pixel_noise > 0.0 {
                    rng.random_range(-spec.pixel_noise..=spec.pixel_noise)
                } else {
                    0.0
                };
                out[c] = ((p[c] + n).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, Rgb(out));
        }
    }
    img
}

/// Split assignment: frames in order, train first, then val, then test.
pub fn split_for(index: usize, n_frames: usize, spec: &SyntheticSceneSpec) -> Split {
    let n_test = (spec.test_fraction * n_frames as f64).round() as usize;
    let n_val = (spec.val_fraction * n_frames as f64).round() as usize;
    let n_train = n_frames.saturating_sub(n_test + n_val);
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Renders `n_frames` scenes and writes a complete dataset under `root`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n_frames: usize, root: &Path) -> Result<Dataset> {
    spec.validate()?;
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::with_capacity(n_frames);
    let mut markers = Vec::new();
    for i in 0..n_frames {
        let f = synthesize_frame(spec, i, split_for(i, n_frames, spec))?;
        let path = root.join(f.record.image.as_ref().expect("synthetic frames have images"));
        f.image.save_with_format(&path, image::ImageFormat::Png)?;
        markers.extend(f.markers);
        records.push(f.record);
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        records,
        markers: MarkerStore::from_markers(markers)?,
        calibration: spec.calibration()?,
    };
    ds.save(root)?;
    Ok(ds)
}

/// Projects a chart marker into the image with a pose and calibration;
/// returns the water-plane pixel.
pub fn project_marker(marker: &ChartMarker, pose: &CameraPose, calib: &Calibration) -> Result<Option<(f64, f64)>> {
    let b = geodetic_to_body(marker.position, pose)?;
    let extr = calib.extrinsics(pose.roll, pose.pitch);
    Ok(project_point(&nalgebra::Vector3::new(b.x, b.y, 0.0), &calib.intrinsics, &extr))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> MarkerStore {
        MarkerStore::from_markers(vec![ChartMarker {
            id: "A".into(),
            position: GeodeticPosition::new(40.0, -73.0).unwrap(),
            category: MarkerCategory::LateralRed,
            description: String::new(),
        }])
        .unwrap()
    }

    #[test]
    fn label_rows_parse_and_reject_bad_boxes() {
        let p = Path::new("l.txt");
        let rows = parse_label_file("0 0.5 0.5 0.1 0.2\n\n1 0.25 0.75 0.05 0.05\n", p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].0, 1);
        let err = parse_label_file("0 0.5 0.5 0 0.2\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(parse_label_file("0 1.5 0.5 0.1 0.2\n", p).is_err());
        assert!(parse_label_file("0 0.5 0.5 0.1\n", p).is_err());
    }

    #[test]
    fn associations_are_checked_against_chart() {
        let p = Path::new("a.json");
        let boxes = vec![(0, [0.5, 0.5, 0.1, 0.1]), (0, [0.2, 0.5, 0.1, 0.1])];
        let mut assoc = AssociationFile {
            format_version: 1,
            version: 0,
            associations: BTreeMap::from([(0, Some("A".to_string())), (1, None)]),
        };
        let labels = apply_associations(&boxes, &assoc, &toy_store(), p).unwrap();
        assert_eq!(labels[0].marker_id.as_deref(), Some("A"));
        assert_eq!(labels[1].marker_id, None);
        assoc.associations.insert(1, Some("B".into()));
        assert!(apply_associations(&boxes, &assoc, &toy_store(), p).is_err());
        assoc.associations.insert(1, None);
        assoc.associations.insert(5, None);
        assert!(apply_associations(&boxes, &assoc, &toy_store(), p).is_err());
    }

    #[test]
    fn flip_arithmetic() {
        let s = Sample {
            image: Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            queries: QueryRow::new(vec!["A".into()], vec![[100.0, 10f64.to_radians()]], 1000.0).unwrap(),
            gt: GroundTruthRow {
                visible: vec![true],
                boxes: vec![Some([0.25, 0.625, 0.125, 0.125])],
            },
        };
        let f = hflip(&s);
        assert_eq!(f.queries.raw[0][1], -(10f64.to_radians()));
        assert_eq!(f.gt.boxes[0].unwrap()[0], 0.75);
        assert_eq!(f.image.data(), &[2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);
        assert_eq!(hflip(&f), s);
        let v = vflip(&s);
        assert_eq!(v.queries, s.queries);
        assert_eq!(v.gt.boxes[0].unwrap()[1], 0.375);
    }

    #[test]
    fn quantized_values_mirror_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = quantize(rng.random::<f64>());
            assert_eq!(1.0 - (1.0 - x), x);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSceneSpec::default();
        s.validate().unwrap();
        s.unmapped_prob = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn splits_are_ordered() {
        let spec = SyntheticSceneSpec {
            test_fraction: 0.2,
            ..Default::default()
        };
        let splits: Vec<Split> = (0..250).map(|i| split_for(i, 250, &spec)).collect();
        assert_eq!(splits.iter().filter(|s| **s == Split::Train).count(), 200);
        assert_eq!(splits.iter().filter(|s| **s == Split::Test).count(), 50);
    }
}
