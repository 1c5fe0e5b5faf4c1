//! Frozen feature extraction, layer-group aggregation, and the bottleneck
//! that fuses the aggregated groups into the decoder input.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, IoContext, Result};
use crate::imaging::ImageTensor;
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// `h x w` grid of `C`-dimensional tokens stored as an `N x C` matrix in
/// row-major grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Tensor,
    /// 1-based source layer, `None` for aggregates.
    pub layer: Option<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != h * w {
            return Err(Error::Shape(format!(
                "token matrix {:?} does not fit a {h}x{w} grid",
                tokens.shape()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::InvalidArgument("non-finite token value".into()));
        }
        Ok(Self { h, w, tokens, layer: None })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.h == other.h && self.w == other.w && self.dim() == other.dim()
    }
}

/// Per-layer token grids of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack {
    pub layers: Vec<TokenGrid>,
    pub tag: String,
    pub patch: usize,
}

impl FeatureStack {
    pub fn grid(&self) -> (usize, usize) {
        (self.layers[0].h, self.layers[0].w)
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }
}

/// Layer groups compared group-to-group. Indices are 1-based layer numbers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub encoder: Vec<Vec<usize>>,
    pub decoder: Vec<Vec<usize>>,
}

impl GroupSpec {
    pub fn len(&self) -> usize {
        self.encoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty()
    }

    pub fn validate(&self, encoder_layers: usize, decoder_layers: usize) -> Result<()> {
        if self.encoder.len() != self.decoder.len() {
            return Err(Error::InvalidGroups(format!(
                "{} encoder groups vs {} decoder groups",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.encoder.is_empty() {
            return Err(Error::InvalidGroups("no groups".into()));
        }
        check_side(&self.encoder, encoder_layers, "encoder")?;
        check_side(&self.decoder, decoder_layers, "decoder")
    }

    /// Every encoder layer that belongs to some group.
    pub fn encoder_layers(&self) -> Vec<usize> {
        self.encoder.iter().flatten().copied().collect()
    }
}

fn check_side(groups: &[Vec<usize>], layers: usize, side: &str) -> Result<()> {
    let mut seen = vec![false; layers + 1];
    for g in groups {
        if g.is_empty() {
            return Err(Error::EmptyGroup);
        }
        for &i in g {
            if i == 0 || i > layers {
                return Err(Error::LayerOutOfRange { index: i, layers });
            }
            if seen[i] {
                return Err(Error::InvalidGroups(format!(
                    "{side} layer {i} appears in two groups"
                )));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// Element-wise sum of the selected layers (1-based indices).
pub fn aggregate_group(stack: &FeatureStack, indices: &[usize]) -> Result<TokenGrid> {
    let first = *indices.first().ok_or(Error::EmptyGroup)?;
    let layers = stack.layers.len();
    let pick = |i: usize| -> Result<&TokenGrid> {
        if i == 0 || i > layers {
            return Err(Error::LayerOutOfRange { index: i, layers });
        }
        Ok(&stack.layers[i - 1])
    };
    let base = pick(first)?;
    let mut acc = base.tokens.clone();
    for &i in &indices[1..] {
        let l = pick(i)?;
        if !l.same_shape(base) {
            return Err(Error::Shape(format!("layer {i} differs in shape from layer {first}")));
        }
        acc.add_assign(&l.tokens);
    }
    Ok(TokenGrid { h: base.h, w: base.w, tokens: acc, layer: None })
}

pub fn aggregate_groups(stack: &FeatureStack, groups: &[Vec<usize>]) -> Result<Vec<TokenGrid>> {
    groups.iter().map(|g| aggregate_group(stack, g)).collect()
}

/// Frozen multi-layer feature extractor.
pub trait FeatureExtractor: Send + Sync {
    fn tag(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn dim(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn extract(&self, image: &ImageTensor) -> Result<FeatureStack>;
    /// Digest of the extractor weights; constant for the lifetime of the value.
    fn fingerprint(&self) -> String;
    /// Whether features can be computed for arbitrary (e.g. synthesized) images.
    fn supports_synthetic(&self) -> bool {
        true
    }
}

fn check_alignment(image: &ImageTensor, patch: usize) -> Result<()> {
    if image.height() % patch != 0 || image.width() % patch != 0 || image.height() == 0 {
        return Err(Error::NotPatchAligned {
            height: image.height(),
            width: image.width(),
            patch,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorConfig {
    /// Seeded random transformer; never trained.
    ToyVit(ToyVitConfig),
    /// Per-image feature files produced elsewhere.
    Precomputed { root: PathBuf, tag: String },
    /// Named pretrained backbone. No weights are bundled, so this always
    /// fails to build; supply precomputed features instead.
    Pretrained { name: String },
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        match self {
            Self::ToyVit(cfg) => Ok(Box::new(ToyVit::new(cfg.clone()))),
            Self::Precomputed { root, tag } => {
                Ok(Box::new(PrecomputedFeatures::open(root.clone(), tag.clone())?))
            }
            Self::Pretrained { name } => Err(Error::ExtractorUnavailable(name.clone())),
        }
    }

    pub fn patch_size(&self) -> Option<usize> {
        match self {
            Self::ToyVit(c) => Some(c.patch),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVitConfig {
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub seed: u64,
    /// Per-channel normalization applied before patch embedding.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ToyVitConfig {
    fn default() -> Self {
        Self {
            patch: 14,
            dim: 16,
            layers: 8,
            seed: 0,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

struct ToyBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
}

/// Patch embedding followed by pre-norm self-attention blocks with seeded
/// random weights. Each block's normalized output is one feature layer.
pub struct ToyVit {
    cfg: ToyVitConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    blocks: Vec<ToyBlock>,
    tag: String,
    fingerprint: String,
}

impl ToyVit {
    pub fn new(cfg: ToyVitConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.dim;
        let pin = 3 * cfg.patch * cfg.patch;
        let patch_w = normal_tensor(&mut rng, &[pin, c], (3.0 / pin as f64).sqrt());
        let patch_b = normal_tensor(&mut rng, &[c], 0.5);
        let s = (1.0 / c as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| ToyBlock {
                wq: normal_tensor(&mut rng, &[c, c], s),
                wk: normal_tensor(&mut rng, &[c, c], s),
                wv: normal_tensor(&mut rng, &[c, c], s),
                wo: normal_tensor(&mut rng, &[c, c], 0.5 * s),
                w1: normal_tensor(&mut rng, &[c, 2 * c], s),
                w2: normal_tensor(&mut rng, &[2 * c, c], 0.5 * (0.5 / c as f64).sqrt()),
            })
            .collect::<Vec<_>>();
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| t.data().iter().for_each(|v| h.update(v.to_bits().to_le_bytes()));
        feed(&patch_w);
        feed(&patch_b);
        for b in &blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                feed(t);
            }
        }
        let fingerprint = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let tag = format!("toy-vit-k{}-c{}-l{}-s{}", cfg.patch, cfg.dim, cfg.layers, cfg.seed);
        Self { cfg, patch_w, patch_b, blocks, tag, fingerprint }
    }

    fn patchify(&self, image: &ImageTensor) -> Tensor {
        let k = self.cfg.patch;
        let (h, w) = (image.height() / k, image.width() / k);
        let mut out = Vec::with_capacity(h * w * 3 * k * k);
        for gy in 0..h {
            for gx in 0..w {
                for c in 0..3 {
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = image.get(gy * k + dy, gx * k + dx)[c];
                            out.push((v - self.cfg.mean[c]) / self.cfg.std[c]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![h * w, 3 * k * k], out)
    }
}

/// 2-D sinusoidal position code, amplitude 0.5.
fn position_code(h: usize, w: usize, dim: usize) -> Tensor {
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for j in 0..dim {
                let pos = if j % 2 == 0 { y } else { x } as f64;
                let freq = 1.0 / 10f64.powf((j / 2) as f64 / (dim / 2).max(1) as f64);
                let v = if (j / 2) % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                out.push(0.5 * v);
            }
        }
    }
    Tensor::new(vec![h * w, dim], out)
}

impl FeatureExtractor for ToyVit {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn patch_size(&self) -> usize {
        self.cfg.patch
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    fn extract(&self, image: &ImageTensor) -> Result<FeatureStack> {
        check_alignment(image, self.cfg.patch)?;
        let k = self.cfg.patch;
        let (h, w) = (image.height() / k, image.width() / k);
        let c = self.cfg.dim;
        let scale = 1.0 / (c as f64).sqrt();
        let mut x = tensor::add_row_bias(&tensor::matmul(&self.patchify(image), &self.patch_w), &self.patch_b);
        x.add_assign(&position_code(h, w, c));
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let n = tensor::layer_norm_rows(&x, 1e-6);
            let q = tensor::matmul(&n, &b.wq);
            let kk = tensor::matmul(&n, &b.wk);
            let v = tensor::matmul(&n, &b.wv);
            let a = tensor::softmax_rows(&tensor::matmul_bt(&q, &kk).scale(scale));
            x.add_assign(&tensor::matmul(&tensor::matmul(&a, &v), &b.wo));
            let n = tensor::layer_norm_rows(&x, 1e-6);
            let hdn = tensor::matmul(&n, &b.w1).map(tensor::gelu);
            x.add_assign(&tensor::matmul(&hdn, &b.w2));
            let out = tensor::layer_norm_rows(&x, 1e-6);
            layers.push(TokenGrid { h, w, tokens: out, layer: Some(l + 1) });
        }
        Ok(FeatureStack { layers, tag: self.tag.clone(), patch: k })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Reads `<root>/<image id>.safetensors` for every requested image.
///
/// File layout: tensors `layer_00 .. layer_{L-1}` (f32 or f64, shape
/// `N x C`) and string metadata `patch`, `h`, `w`, `dim`, `tag`.
pub struct PrecomputedFeatures {
    root: PathBuf,
    tag: String,
    patch: usize,
    dim: usize,
    layers: usize,
}

impl PrecomputedFeatures {
    /// Opens a feature directory, probing its first file for dimensions.
    pub fn open(root: PathBuf, tag: String) -> Result<Self> {
        let probe = find_feature_file(&root)?
            .ok_or_else(|| Error::ExtractorUnavailable(format!("no feature files under {}", root.display())))?;
        let stack = read_feature_file(&probe)?;
        Ok(Self {
            root,
            tag,
            patch: stack.patch,
            dim: stack.dim(),
            layers: stack.layers.len(),
        })
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.safetensors"))
    }
}

fn find_feature_file(dir: &Path) -> Result<Option<PathBuf>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in &entries {
        if p.extension().is_some_and(|e| e == "safetensors") {
            return Ok(Some(p.clone()));
        }
    }
    for p in entries.iter().filter(|p| p.is_dir()) {
        if let Some(f) = find_feature_file(p)? {
            return Ok(Some(f));
        }
    }
    Ok(None)
}

impl FeatureExtractor for PrecomputedFeatures {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_layers(&self) -> usize {
        self.layers
    }

    fn extract(&self, image: &ImageTensor) -> Result<FeatureStack> {
        check_alignment(image, self.patch)?;
        let id = image
            .id
            .as_deref()
            .ok_or_else(|| Error::Features("image has no id to look up precomputed features".into()))?;
        let stack = read_feature_file(&self.path_for(id))?;
        let (h, w) = stack.grid();
        if h * self.patch != image.height() || w * self.patch != image.width() {
            return Err(Error::Shape(format!(
                "feature grid {h}x{w} does not match image {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(stack)
    }

    fn fingerprint(&self) -> String {
        format!("precomputed:{}", self.tag)
    }

    fn supports_synthetic(&self) -> bool {
        false
    }
}

pub fn write_feature_file(path: &Path, stack: &FeatureStack) -> Result<()> {
    let (h, w) = stack.grid();
    let bufs: Vec<(String, Vec<u8>, Vec<usize>)> = stack
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let bytes = l.tokens.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            (format!("layer_{i:02}"), bytes, l.tokens.shape().to_vec())
        })
        .collect();
    let views = bufs
        .iter()
        .map(|(n, b, s)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Features(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = [
        ("patch", stack.patch.to_string()),
        ("h", h.to_string()),
        ("w", w.to_string()),
        ("dim", stack.dim().to_string()),
        ("tag", stack.tag.clone()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Features(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    std::fs::write(path, bytes).at(path)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureStack> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Features(e.to_string()))?;
    let info = meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::Features(format!("{} has no metadata", path.display())))?;
    let field = |k: &str| -> Result<usize> {
        info.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Features(format!("metadata field `{k}` missing or invalid")))
    };
    let (patch, h, w, dim) = (field("patch")?, field("h")?, field("w")?, field("dim")?);
    let tag = info.get("tag").cloned().unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Features(e.to_string()))?;
    let mut names: Vec<String> = st.names().into_iter().filter(|n| n.starts_with("layer_")).map(str::to_string).collect();
    names.sort();
    let mut layers = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let view = st.tensor(name).map_err(|e| Error::Features(e.to_string()))?;
        if view.shape() != [h * w, dim] {
            return Err(Error::Features(format!("{name} has shape {:?}, expected [{}, {dim}]", view.shape(), h * w)));
        }
        let data: Vec<f64> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(Error::Features(format!("unsupported dtype {other:?}"))),
        };
        let mut grid = TokenGrid::new(h, w, Tensor::new(vec![h * w, dim], data))?;
        grid.layer = Some(i + 1);
        layers.push(grid);
    }
    if layers.is_empty() {
        return Err(Error::Features(format!("{} holds no layers", path.display())));
    }
    Ok(FeatureStack { layers, tag, patch })
}

/// Residual perceptron `x + gelu(x W1 + b1) W2 + b2` applied to the sum of
/// the encoder group aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Bottleneck {
    pub fn register(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = (1.0 / dim as f64).sqrt();
        Self {
            w1: store.add("bottleneck.w1", normal_tensor(rng, &[dim, dim], s)),
            b1: store.add("bottleneck.b1", Tensor::zeros(&[dim])),
            w2: store.add("bottleneck.w2", normal_tensor(rng, &[dim, dim], 0.1 * s)),
            b2: store.add("bottleneck.b2", Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_bias(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        let h = g.add_bias(h, b2);
        g.add(x, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Sum of all group aggregates, the bottleneck input.
pub fn fusion_input(groups: &[TokenGrid]) -> Tensor {
    let mut acc = groups[0].tokens.clone();
    for g in &groups[1..] {
        acc.add_assign(&g.tokens);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(layers: usize, seed: u64) -> ToyVit {
        ToyVit::new(ToyVitConfig { patch: 14, dim: 8, layers, seed, ..Default::default() })
    }

    fn seeded_stack(layers: usize, seed: u64) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureStack {
            layers: (0..layers)
                .map(|i| TokenGrid {
                    h: 2,
                    w: 3,
                    tokens: normal_tensor(&mut rng, &[6, 4], 1.0),
                    layer: Some(i + 1),
                })
                .collect(),
            tag: "test".into(),
            patch: 7,
        }
    }

    #[test]
    fn full_input_size_gives_28x28_grid() {
        let img = ImageTensor::filled(392, 392, [0.5, 0.4, 0.3]);
        let stack = ToyVit::new(ToyVitConfig { layers: 1, ..Default::default() }).extract(&img).unwrap();
        assert_eq!(stack.grid(), (28, 28));
        assert_eq!(stack.layers[0].n(), 784);
    }

    #[test]
    fn toy_image_gives_2x2_grids() {
        let img = ImageTensor::filled(28, 28, [0.1, 0.2, 0.3]);
        let stack = toy(2, 1).extract(&img).unwrap();
        assert_eq!(stack.layers.len(), 2);
        assert!(stack.layers.iter().all(|l| l.h == 2 && l.w == 2 && l.n() == 4));
    }

    #[test]
    fn extraction_is_bit_identical() {
        let img = ImageTensor::new(28, 28, (0..28 * 28 * 3).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap();
        let a = toy(3, 5).extract(&img).unwrap();
        let b = toy(3, 5).extract(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn misaligned_image_is_rejected() {
        let img = ImageTensor::filled(30, 28, [0.0; 3]);
        assert!(matches!(toy(1, 0).extract(&img), Err(Error::NotPatchAligned { .. })));
    }

    #[test]
    fn named_pretrained_is_unavailable() {
        let cfg = ExtractorConfig::Pretrained { name: "dinov2-r-vitb14".into() };
        assert!(matches!(cfg.build(), Err(Error::ExtractorUnavailable(_))));
    }

    #[test]
    fn aggregate_of_ones_and_identity() {
        let ones = TokenGrid { h: 2, w: 2, tokens: Tensor::full(&[4, 3], 1.0), layer: Some(1) };
        let stack = FeatureStack { layers: vec![ones.clone(), ones.clone()], tag: String::new(), patch: 1 };
        let sum = aggregate_group(&stack, &[1, 2]).unwrap();
        assert!(sum.tokens.data().iter().all(|&v| v == 2.0));
        assert_eq!(aggregate_group(&stack, &[2]).unwrap().tokens, ones.tokens);
        assert!(matches!(aggregate_group(&stack, &[]), Err(Error::EmptyGroup)));
        assert!(matches!(aggregate_group(&stack, &[3]), Err(Error::LayerOutOfRange { .. })));
    }

    #[test]
    fn aggregate_matches_elementwise_oracle() {
        let stack = seeded_stack(8, 42);
        let got = aggregate_group(&stack, &[3, 4, 5, 6]).unwrap();
        for cell in 0..24 {
            let want: f64 = (2..6).map(|l| stack.layers[l].tokens.data()[cell]).sum();
            assert!((got.tokens.data()[cell] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregate_order_irrelevant() {
        let stack = seeded_stack(8, 7);
        let a = aggregate_group(&stack, &[3, 4, 5, 6]).unwrap();
        let b = aggregate_group(&stack, &[6, 4, 3, 5]).unwrap();
        let rel = a.tokens.max_abs_diff(&b.tokens) / a.tokens.data().iter().fold(1.0, |m: f64, v| m.max(v.abs()));
        assert!(rel < 1e-6);
    }

    #[test]
    fn group_spec_validation() {
        let ok = GroupSpec { encoder: vec![vec![3, 4, 5, 6], vec![7, 8, 9, 10]], decoder: vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]] };
        ok.validate(12, 8).unwrap();
        let overlap = GroupSpec { encoder: vec![vec![1, 2], vec![2, 3]], decoder: vec![vec![1], vec![2]] };
        assert!(overlap.validate(12, 8).is_err());
        let uneven = GroupSpec { encoder: vec![vec![1]], decoder: vec![vec![1], vec![2]] };
        assert!(uneven.validate(12, 8).is_err());
    }

    fn bottleneck_store(dim: usize, seed: u64) -> (ParamStore, Bottleneck) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Bottleneck::register(&mut store, dim, &mut rng);
        (store, b)
    }

    #[test]
    fn identity_bottleneck_passes_through() {
        let (mut store, b) = bottleneck_store(4, 1);
        store.set(b.w2, Tensor::zeros(&[4, 4]));
        let stack = seeded_stack(2, 3);
        let x0 = aggregate_group(&stack, &[1, 2]).unwrap().tokens;
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = b.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn zero_input_zero_output() {
        let (store, b) = bottleneck_store(4, 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[6, 4]));
        let y = b.forward(&mut g, &store, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_matches_dense_oracle() {
        let (mut store, b) = bottleneck_store(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        store.set(b.b1, normal_tensor(&mut rng, &[4], 0.5));
        store.set(b.b2, normal_tensor(&mut rng, &[4], 0.5));
        let x0 = normal_tensor(&mut rng, &[5, 4], 1.0);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = b.forward(&mut g, &store, x);
        // explicit loops
        let (w1, b1, w2, b2) = (store.get(b.w1), store.get(b.b1), store.get(b.w2), store.get(b.b2));
        for i in 0..5 {
            let hidden: Vec<f64> = (0..4)
                .map(|j| tensor::gelu((0..4).map(|k| x0.at(i, k) * w1.at(k, j)).sum::<f64>() + b1.data()[j]))
                .collect();
            for j in 0..4 {
                let o = x0.at(i, j) + (0..4).map(|k| hidden[k] * w2.at(k, j)).sum::<f64>() + b2.data()[j];
                assert!((g.value(y).at(i, j) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut stack = seeded_stack(3, 4);
        // f32 storage: quantize first so the round trip is exact
        for l in &mut stack.layers {
            l.tokens = l.tokens.map(|v| v as f32 as f64);
        }
        let path = dir.path().join("cat/test/good/000.safetensors");
        write_feature_file(&path, &stack).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.layers.iter().map(|l| &l.tokens).collect::<Vec<_>>(), stack.layers.iter().map(|l| &l.tokens).collect::<Vec<_>>());
        assert_eq!(back.patch, 7);

        let ext = PrecomputedFeatures::open(dir.path().to_path_buf(), "pre".into()).unwrap();
        assert_eq!(ext.num_layers(), 3);
        let img = ImageTensor::filled(14, 21, [0.0; 3]).with_id("cat/test/good/000");
        assert_eq!(ext.extract(&img).unwrap().layers.len(), 3);
        let missing = ImageTensor::filled(14, 21, [0.0; 3]).with_id("cat/test/good/001");
        assert!(ext.extract(&missing).is_err());
    }
}
