//! Dataset export to binary PPM images plus a label table, and the matching loader.

use std::fs;
use std::io::Write;
use std::path::Path;

use pdaanet_core::config::RunConfig;
use pdaanet_core::synth::{
    generate_split_scene, BBox, Dataset, DatasetSpec, Domain, Scene, Split, TargetSplit, UnlabeledImage, IMAGE_SIZE,
};
use pdaanet_core::Tensor;

use crate::config::{parse_config_str, render_config};
use crate::HarnessError;

pub const LABELS_FILE: &str = "labels.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
const LABEL_HEADER: [&str; 8] = ["image_id", "split", "domain", "class_id", "x_min", "y_min", "x_max", "y_max"];
const SPEC_KEYS: [&str; 9] = [
    "dataset.seed",
    "dataset.n_source",
    "dataset.n_target",
    "dataset.n_eval",
    "style.palette_shift",
    "style.grating_amp",
    "style.grating_period",
    "style.blur_radius",
    "style.noise_sigma",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub images: usize,
    pub label_rows: usize,
}

impl Manifest {
    /// The dataset settings in configuration syntax, followed by the counts as comments.
    pub fn render(&self) -> String {
        let cfg = RunConfig {
            dataset: self.spec,
            ..RunConfig::default()
        };
        let mut out: String = render_config(&cfg)
            .lines()
            .filter(|l| SPEC_KEYS.iter().any(|k| l.starts_with(&format!("{k} "))))
            .map(|l| format!("{l}\n"))
            .collect();
        out.push_str(&format!("# images {}\n# label_rows {}\n", self.images, self.label_rows));
        out
    }
}

pub fn image_file_name(id: u32) -> String {
    format!("scene_{id:05}.ppm")
}

/// 8-bit binary PPM of a `3 x 64 x 64` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..n {
        for c in 0..3 {
            out.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, String> {
    let header = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n");
    let body = bytes
        .strip_prefix(header.as_bytes())
        .ok_or("expected a 64x64 8-bit P6 header")?;
    let n = IMAGE_SIZE * IMAGE_SIZE;
    if body.len() != 3 * n {
        return Err(format!("expected {} pixel bytes, found {}", 3 * n, body.len()));
    }
    let mut data = vec![0.0; 3 * n];
    for (i, px) in body.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data).map_err(|e| e.to_string())
}

/// The image exactly as it reads back from its PPM file.
pub fn quantize(image: &Tensor) -> Tensor {
    decode_ppm(&encode_ppm(image)).expect("encoder output decodes")
}

fn splits(spec: &DatasetSpec) -> [(Split, usize); 3] {
    [
        (Split::SourceTrain, spec.n_source),
        (Split::TargetTrain, spec.n_target),
        (Split::TargetEval, spec.n_eval),
    ]
}

/// Writes one PPM per scene, the label table (source and eval scenes only)
/// and a manifest.
pub fn export_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let labels_path = dir.join(LABELS_FILE);
    let mut labels = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&labels_path)
        .map_err(|e| HarnessError::csv(&labels_path, e))?;
    labels.write_record(LABEL_HEADER).map_err(|e| HarnessError::csv(&labels_path, e))?;
    let mut manifest = Manifest {
        spec: *spec,
        images: 0,
        label_rows: 0,
    };
    for (split, count) in splits(spec) {
        for index in 0..count {
            let scene = generate_split_scene(spec, split, index);
            let path = dir.join(image_file_name(scene.id));
            fs::write(&path, encode_ppm(&scene.image)).map_err(|e| HarnessError::io(&path, e))?;
            manifest.images += 1;
            if split == Split::TargetTrain {
                continue;
            }
            for (b, class) in scene.boxes.iter().zip(&scene.classes) {
                labels
                    .write_record([
                        scene.id.to_string(),
                        split.name().to_string(),
                        scene.domain.name().to_string(),
                        class.to_string(),
                        b.x_min.to_string(),
                        b.y_min.to_string(),
                        b.x_max.to_string(),
                        b.y_max.to_string(),
                    ])
                    .map_err(|e| HarnessError::csv(&labels_path, e))?;
                manifest.label_rows += 1;
            }
        }
    }
    labels.flush().map_err(|e| HarnessError::io(&labels_path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    f.write_all(manifest.render().as_bytes()).map_err(|e| HarnessError::io(&path, e))?;
    Ok(manifest)
}

fn bad(path: &Path, msg: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn read_image(dir: &Path, id: u32) -> Result<Tensor, HarnessError> {
    let path = dir.join(image_file_name(id));
    let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    decode_ppm(&bytes).map_err(|m| bad(&path, m))
}

/// Reads an exported dataset back. Images carry their 8-bit quantisation.
pub fn load_dataset(dir: &Path) -> Result<Dataset, HarnessError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| HarnessError::io(&manifest_path, e))?;
    let spec = parse_config_str(&text)?.dataset;

    let offsets = [0, spec.n_source, spec.n_source + spec.n_target];
    let mut scenes: Vec<Vec<Scene>> = Vec::new();
    for (k, (split, count)) in splits(&spec).into_iter().enumerate() {
        let mut v = Vec::with_capacity(count);
        for index in 0..count {
            let id = (offsets[k] + index) as u32;
            v.push(Scene {
                id,
                domain: split.domain(),
                image: read_image(dir, id)?,
                boxes: Vec::new(),
                classes: Vec::new(),
            });
        }
        scenes.push(v);
    }

    let labels_path = dir.join(LABELS_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&labels_path)
        .map_err(|e| HarnessError::csv(&labels_path, e))?;
    if reader.headers().map_err(|e| HarnessError::csv(&labels_path, e))? != LABEL_HEADER.as_slice() {
        return Err(bad(&labels_path, "unexpected header"));
    }
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::csv(&labels_path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64, HarnessError> {
            field(i).parse().map_err(|_| bad(&labels_path, format!("row {}: bad {}", row + 1, LABEL_HEADER[i])))
        };
        let id: usize = field(0).parse().map_err(|_| bad(&labels_path, format!("row {}: bad image_id", row + 1)))?;
        let k = match field(1) {
            "source_train" => 0,
            "target_eval" => 2,
            other => return Err(bad(&labels_path, format!("row {}: split `{other}` carries no labels", row + 1))),
        };
        let scene = id
            .checked_sub(offsets[k])
            .and_then(|i| scenes[k].get_mut(i))
            .ok_or_else(|| bad(&labels_path, format!("row {}: image {id} is not in split {}", row + 1, field(1))))?;
        let domain = if k == 0 { Domain::Source } else { Domain::Target };
        if field(2) != domain.name() {
            return Err(bad(&labels_path, format!("row {}: domain does not match split", row + 1)));
        }
        let class: usize = field(3).parse().map_err(|_| bad(&labels_path, format!("row {}: bad class_id", row + 1)))?;
        scene.classes.push(class);
        scene.boxes.push(BBox::new(num(4)?, num(5)?, num(6)?, num(7)?));
    }

    let mut it = scenes.into_iter();
    let (source, target, eval) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let target = target
        .into_iter()
        .map(|s| UnlabeledImage { id: s.id, image: s.image })
        .collect();
    Ok(Dataset {
        spec,
        source,
        target: TargetSplit::new(target),
        eval,
    })
}
