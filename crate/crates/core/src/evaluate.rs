//! Evaluation over a dataset index: per-category and pooled metric reports,
//! anomaly-map export and prototype diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use safetensors::tensor::{Dtype, TensorView};

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::dataset::{Category, DatasetIndex};
use crate::encoder::FeatureExtractor;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{save_gray16, Mask};
use crate::inp::assign_tokens;
use crate::metrics::{format_report, MetricReport};
use crate::model::{Encoded, Model};
use crate::scoring::AnomalyMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    /// Reconstruction error, averaged with the head prediction when
    /// `use_head` is set.
    Detector { use_head: bool },
    /// Prototype distance map of the extractor alone.
    ZeroShot,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Writes 16-bit map PNGs and raw safetensors arrays here.
    pub export: Option<PathBuf>,
    /// Also writes assignment grids and attention maps under `export`.
    pub diagnostics: bool,
}

#[derive(Clone, Debug)]
pub struct ImageResult {
    pub id: String,
    pub anomalous: bool,
    pub score: f64,
    pub map: AnomalyMap,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct CategoryEval {
    pub name: String,
    /// Error text when a metric is undefined for this category.
    pub report: std::result::Result<MetricReport, String>,
    pub images: Vec<ImageResult>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub categories: Vec<CategoryEval>,
    /// Mean over the categories whose report is defined.
    pub pooled: Option<MetricReport>,
}

impl Evaluation {
    /// Flat `key = value` text; undefined categories appear as comments.
    pub fn to_text(&self) -> String {
        let mut named = Vec::new();
        let mut out = String::new();
        for c in &self.categories {
            match &c.report {
                Ok(r) => named.push((c.name.clone(), r.clone())),
                Err(e) => {
                    let _ = writeln!(out, "# {}: {e}", c.name);
                }
            }
        }
        if let Some(p) = &self.pooled {
            named.push(("pooled".into(), p.clone()));
        }
        out.push_str(&format_report(&named));
        out
    }

    pub fn flat(&self) -> BTreeMap<String, f64> {
        crate::metrics::parse_report(&self.to_text()).expect("own report parses")
    }
}

/// Test categories for a checkpoint's config: the trained categories, the
/// targets for zero-shot runs, minus the anomaly pool for semi-supervised
/// runs.
pub fn evaluation_index(cfg: &RunConfig, trained: &[String], index: &DatasetIndex) -> Result<DatasetIndex> {
    match cfg.mode {
        Mode::ZeroShotEval => index.select(&cfg.target_categories),
        Mode::SemiSupervised => index.select(trained)?.with_anomaly_pool(cfg.semi_supervised.anomalies, cfg.seed),
        _ => index.select(trained),
    }
}

pub fn default_source(cfg: &RunConfig) -> MapSource {
    if cfg.mode == Mode::ZeroShotEval {
        MapSource::ZeroShot
    } else {
        MapSource::Detector { use_head: cfg.residual.enabled }
    }
}

struct Context<'a> {
    model: &'a Model,
    extractor: &'a dyn FeatureExtractor,
    cfg: &'a RunConfig,
    source: MapSource,
    opts: &'a EvalOptions,
}

fn safe_name(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

fn evaluate_category(ctx: &Context, cat: &Category) -> Result<CategoryEval> {
    let (resize, crop) = (ctx.cfg.resize, ctx.cfg.crop);
    let mut images = Vec::with_capacity(cat.test.len());
    for s in &cat.test {
        let img = s.load_image(resize, crop)?;
        let mask = s.load_mask(resize, crop)?;
        let enc = Encoded::from_stack(&ctx.extractor.extract(&img)?, &ctx.cfg.groups)?;
        let (map, score) = match ctx.source {
            MapSource::ZeroShot => ctx.model.zero_shot(&enc, (crop, crop), ctx.model.coherence)?,
            MapSource::Detector { use_head } => {
                let inf = ctx.model.infer(&enc, (crop, crop), use_head)?;
                if ctx.opts.diagnostics {
                    if let Some(dir) = &ctx.opts.export {
                        write_diagnostics(&dir.join("diagnostics"), &s.id, &enc, &inf.prototypes, &inf.attention)?;
                    }
                }
                (inf.map, inf.score)
            }
        };
        images.push(ImageResult { id: s.id.clone(), anomalous: s.is_anomalous(), score, map, mask });
    }
    let scores: Vec<f64> = images.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = images.iter().map(|r| r.anomalous).collect();
    let maps: Vec<AnomalyMap> = images.iter().map(|r| r.map.clone()).collect();
    let masks: Vec<Mask> = images.iter().map(|r| r.mask.clone()).collect();
    let report = MetricReport::compute(&scores, &labels, &maps, &masks, &ctx.cfg.metrics).map_err(|e| e.to_string());
    Ok(CategoryEval { name: cat.name.clone(), report, images })
}

/// Scores every test image of `index`. Categories with undefined metrics
/// keep their error and do not stop the run.
pub fn evaluate(
    model: &Model,
    extractor: &dyn FeatureExtractor,
    cfg: &RunConfig,
    index: &DatasetIndex,
    source: MapSource,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let ctx = Context { model, extractor, cfg, source, opts };
    let mut categories = Vec::with_capacity(index.categories.len());
    for cat in &index.categories {
        let ce = evaluate_category(&ctx, cat)?;
        if let Some(dir) = &opts.export {
            export_maps(dir, &ce)?;
        }
        categories.push(ce);
    }
    let defined: Vec<MetricReport> = categories.iter().filter_map(|c| c.report.clone().ok()).collect();
    let pooled = (!defined.is_empty()).then(|| MetricReport::average(&defined));
    Ok(Evaluation { categories, pooled })
}

/// Evaluates a checkpoint on its own test split with its default maps.
pub fn evaluate_checkpoint(ck: &Checkpoint, index: &DatasetIndex, opts: &EvalOptions) -> Result<Evaluation> {
    let model = ck.model()?;
    let extractor = ck.extractor()?;
    let idx = evaluation_index(&ck.config, &ck.categories, index)?;
    evaluate(&model, extractor.as_ref(), &ck.config, &idx, default_source(&ck.config), opts)
}

/// `maps/<id>.png` scaled to the category maximum, plus every map as an f64
/// array in `maps/<category>.safetensors`.
pub fn export_maps(dir: &Path, ce: &CategoryEval) -> Result<()> {
    let maps_dir = dir.join("maps");
    fs::create_dir_all(&maps_dir).at(&maps_dir)?;
    let top = ce.images.iter().map(|r| r.map.max()).fold(0.0, f64::max);
    let mut bufs = Vec::with_capacity(ce.images.len());
    for r in &ce.images {
        let p = maps_dir.join(format!("{}.png", safe_name(&r.id)));
        save_gray16(&p, r.map.height(), r.map.width(), r.map.values(), top)?;
        let bytes: Vec<u8> = r.map.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        bufs.push((r.id.clone(), bytes, vec![r.map.height(), r.map.width()]));
    }
    let views = bufs
        .iter()
        .map(|(n, b, s)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Features(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, None).map_err(|e| Error::Features(e.to_string()))?;
    let p = maps_dir.join(format!("{}.safetensors", safe_name(&ce.name)));
    fs::write(&p, bytes).at(&p)
}

/// Reads maps written by [`export_maps`], keyed by image id.
pub fn read_exported_maps(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let bytes = fs::read(path).at(path)?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Features(e.to_string()))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Features(format!("`{name}` is {:?}, expected F64", view.dtype())));
            }
            let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok((name, (view.shape().to_vec(), data)))
        })
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Upscale factor so token grids are visible.
const CELL: u32 = 8;

/// `<id>_assign.png`, one color per nearest prototype, and
/// `<id>_attn<m>.png`, prototype `m`'s attention over the token grid.
pub fn write_diagnostics(
    dir: &Path,
    id: &str,
    enc: &Encoded,
    prototypes: &crate::tensor::Tensor,
    attention: &crate::tensor::Tensor,
) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let (h, w) = enc.grid;
    let stem = safe_name(id);
    let assign = assign_tokens(&enc.fused_grid(), prototypes)?;
    let img = ImageBuffer::from_fn(w as u32 * CELL, h as u32 * CELL, |x, y| {
        let k = assign[(y / CELL) as usize * w + (x / CELL) as usize];
        Rgb(PALETTE[k % PALETTE.len()])
    });
    let p = dir.join(format!("{stem}_assign.png"));
    img.save(&p)?;
    for m in 0..attention.rows() {
        let row = attention.row(m);
        let top = row.iter().cloned().fold(0.0, f64::max);
        let img: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_fn(w as u32 * CELL, h as u32 * CELL, |x, y| {
            let v = row[(y / CELL) as usize * w + (x / CELL) as usize];
            Luma([if top > 0.0 { (255.0 * v / top).round() as u8 } else { 0 }])
        });
        let p = dir.join(format!("{stem}_attn{m}.png"));
        img.save(&p)?;
    }
    Ok(())
}
