//! The full detector: prototype extractor, bottleneck, prototype-guided
//! decoder and segmentation head over a frozen encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::decoder::{decode, DecoderLayerParams};
use crate::encoder::{aggregate_groups, fusion_input, Bottleneck, FeatureStack, GroupSpec, TokenGrid};
use crate::error::{Error, Result};
use crate::inp::{coherence_hard_graph, coherence_soft_graph, inp_distance_map, CoherenceMode, CoherenceVars, InpExtractor};
use crate::params::{ParamId, ParamStore};
use crate::residual::{feature_residual_graph, SegHead};
use crate::scoring::{fuse_anomaly_map, image_score, recon_error_map, AnomalyMap, Resolution};
use crate::tensor::Tensor;

/// Frozen-encoder view of one image: per-group aggregates and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub grid: (usize, usize),
    pub groups: Vec<Tensor>,
    pub fused: Tensor,
}

impl Encoded {
    pub fn from_stack(stack: &FeatureStack, groups: &GroupSpec) -> Result<Self> {
        let agg = aggregate_groups(stack, &groups.encoder)?;
        let fused = fusion_input(&agg);
        Ok(Self { grid: stack.grid(), fused, groups: agg.into_iter().map(|g| g.tokens).collect() })
    }

    pub fn fused_grid(&self) -> TokenGrid {
        TokenGrid::new(self.grid.0, self.grid.1, self.fused.clone()).expect("consistent grid")
    }
}

/// Graph nodes of one image's forward pass.
pub struct ForwardVars {
    pub prototypes: Var,
    pub attention: Var,
    pub coherence: CoherenceVars,
    pub decoded: Vec<Var>,
}

/// Per-image inference output.
#[derive(Clone, Debug)]
pub struct Inference {
    pub recon: AnomalyMap,
    pub predicted: Option<AnomalyMap>,
    pub map: AnomalyMap,
    pub score: f64,
    pub prototypes: Tensor,
    /// `M x N` extractor attention.
    pub attention: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub extractor: InpExtractor,
    pub bottleneck: Bottleneck,
    pub decoder: Vec<DecoderLayerParams>,
    pub head: SegHead,
    pub groups: GroupSpec,
    pub coherence: CoherenceMode,
    pub dim: usize,
}

impl Model {
    /// Registers every parameter, seeded from `cfg.seed`. The head is
    /// registered last so the other parameters do not depend on it.
    pub fn init(cfg: &RunConfig, dim: usize, encoder_layers: usize) -> Result<Self> {
        cfg.groups.validate(encoder_layers, cfg.decoder_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let extractor = InpExtractor::register(&mut store, cfg.prototypes, dim, &mut rng);
        let bottleneck = Bottleneck::register(&mut store, dim, &mut rng);
        let decoder = (1..=cfg.decoder_layers)
            .map(|i| DecoderLayerParams::register(&mut store, i, dim, cfg.prototypes, &mut rng))
            .collect();
        let head = SegHead::register(&mut store, dim, &mut rng)?;
        Ok(Self { store, extractor, bottleneck, decoder, head, groups: cfg.groups.clone(), coherence: cfg.coherence, dim })
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.ids()
    }

    /// Everything except the head.
    pub fn normal_ids(&self) -> Vec<ParamId> {
        let mut v = self.extractor.ids();
        v.extend(self.bottleneck.ids());
        for l in &self.decoder {
            v.extend(l.ids());
        }
        v
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn forward(&self, g: &mut Graph, enc: &Encoded) -> Result<ForwardVars> {
        let f = g.constant(enc.fused.clone());
        let ex = self.extractor.forward(g, &self.store, f)?;
        let coherence = match self.coherence {
            CoherenceMode::Hard => coherence_hard_graph(g, f, ex.prototypes),
            CoherenceMode::Soft => coherence_soft_graph(g, f, ex.prototypes),
        };
        let fb = self.bottleneck.forward(g, &self.store, f);
        let decoded = decode(g, &self.store, &self.decoder, fb, ex.prototypes, &self.groups.decoder)?;
        Ok(ForwardVars { prototypes: ex.prototypes, attention: ex.attention, coherence, decoded })
    }

    /// Head prediction `[1, H, W]` from the residual of a forward pass.
    pub fn segment(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        decoded: &[Var],
        stop_gradient: bool,
        out: (usize, usize),
    ) -> Result<Var> {
        let res = feature_residual_graph(g, &enc.groups, decoded, stop_gradient)?;
        self.head.forward(g, &self.store, res, enc.grid, out)
    }

    /// Anomaly map at `out` resolution, fused with the head output when
    /// `use_head` is set.
    pub fn infer(&self, enc: &Encoded, out: (usize, usize), use_head: bool) -> Result<Inference> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, enc)?;
        let (h, w) = enc.grid;
        let grids = |ts: Vec<Tensor>| -> Result<Vec<TokenGrid>> { ts.into_iter().map(|t| TokenGrid::new(h, w, t)).collect() };
        let dec_vals = fw.decoded.iter().map(|&v| g.value(v).clone()).collect();
        let recon = recon_error_map(&grids(enc.groups.clone())?, &grids(dec_vals)?)?;
        let predicted = if use_head {
            let p = self.segment(&mut g, enc, &fw.decoded, true, out)?;
            Some(AnomalyMap::new(out.0, out.1, g.value(p).data().to_vec(), Resolution::Image))
        } else {
            None
        };
        let map = fuse_anomaly_map(&recon, predicted.as_ref(), out.0, out.1);
        let score = image_score(&map);
        Ok(Inference {
            recon,
            predicted,
            score,
            map,
            prototypes: g.value(fw.prototypes).clone(),
            attention: g.value(fw.attention).clone(),
        })
    }

    /// Prototype distance map upsampled to `out`, for categories never seen
    /// in training.
    pub fn zero_shot(&self, enc: &Encoded, out: (usize, usize), mode: CoherenceMode) -> Result<(AnomalyMap, f64)> {
        let mut g = Graph::new();
        let f = g.constant(enc.fused.clone());
        let ex = self.extractor.forward(&mut g, &self.store, f)?;
        let grid = enc.fused_grid();
        let map = inp_distance_map(&grid, g.value(ex.prototypes), mode)?.upsample(out.0, out.1);
        let score = image_score(&map);
        Ok((map, score))
    }

    /// Replaces parameter values by name, checking shapes.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} parameter arrays, model has {}",
                named.len(),
                self.store.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown parameter `{name}`")))?;
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set(id, t.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ImageTensor, Mask};
    use crate::residual::dice_loss_graph;
    use rand::Rng;

    fn setup() -> (RunConfig, Model, Vec<Encoded>) {
        let mut cfg = RunConfig::desk();
        cfg.resize = 28;
        cfg.crop = 28;
        let ex = cfg.extractor.build().unwrap();
        let model = Model::init(&cfg, ex.dim(), ex.num_layers()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let encs = (0..2)
            .map(|_| {
                let px = (0..28 * 28 * 3).map(|_| rng.random::<f64>()).collect();
                let img = ImageTensor::new(28, 28, px).unwrap();
                Encoded::from_stack(&ex.extract(&img).unwrap(), &cfg.groups).unwrap()
            })
            .collect();
        (cfg, model, encs)
    }

    fn dice_gradients(model: &Model, encs: &[Encoded], stop_gradient: bool) -> crate::params::Gradients {
        let mut g = Graph::new();
        let mut preds = Vec::new();
        let mut masks = Vec::new();
        for (i, enc) in encs.iter().enumerate() {
            let fw = model.forward(&mut g, enc).unwrap();
            preds.push(model.segment(&mut g, enc, &fw.decoded, stop_gradient, (28, 28)).unwrap());
            let mut m = Mask::empty(28, 28);
            for y in 4..12 + 4 * i {
                for x in 6..18 {
                    m.set(y, x, true);
                }
            }
            masks.push(m);
        }
        let loss = dice_loss_graph(&mut g, &preds, &masks).unwrap();
        g.backward(loss).params(model.store.len())
    }

    #[test]
    fn stop_gradient_confines_dice_to_the_head() {
        let (_, model, encs) = setup();
        let grads = dice_gradients(&model, &encs, true);
        for id in model.normal_ids() {
            assert!(grads.is_zero(id), "`{}` received a gradient", model.store.name(id));
        }
        assert!(model.head_ids().iter().any(|&id| !grads.is_zero(id)));
    }

    #[test]
    fn without_stop_gradient_dice_reaches_the_decoder() {
        let (_, model, encs) = setup();
        let grads = dice_gradients(&model, &encs, false);
        let decoder: Vec<_> = model.decoder.iter().flat_map(|l| l.ids()).collect();
        assert!(decoder.iter().any(|&id| !grads.is_zero(id)));
    }

    #[test]
    fn load_params_round_trip_and_errors() {
        let (cfg, model, encs) = setup();
        let named: Vec<_> = model.store.ids().map(|id| (model.store.name(id).to_string(), model.store.get(id).clone())).collect();
        let mut other = Model::init(&RunConfig { seed: 99, ..cfg.clone() }, model.dim, 8).unwrap();
        assert_ne!(other.store.checksum(), model.store.checksum());
        other.load_params(&named).unwrap();
        assert_eq!(other.store.checksum(), model.store.checksum());
        let a = model.infer(&encs[0], (28, 28), true).unwrap();
        let b = other.infer(&encs[0], (28, 28), true).unwrap();
        assert_eq!(a.map.values(), b.map.values());

        let mut renamed = named.clone();
        renamed[0].0 = "nope".into();
        assert!(matches!(other.load_params(&renamed), Err(Error::CorruptCheckpoint(_))));
        let mut reshaped = named.clone();
        reshaped[0].1 = Tensor::zeros(&[1]);
        assert!(matches!(other.load_params(&reshaped), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(other.load_params(&named[1..]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn inference_shapes_and_determinism() {
        let (cfg, model, encs) = setup();
        let a = model.infer(&encs[0], (28, 28), true).unwrap();
        assert_eq!((a.map.height(), a.map.width()), (28, 28));
        assert_eq!((a.recon.height(), a.recon.width()), encs[0].grid);
        let p = a.predicted.as_ref().unwrap();
        assert!(p.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.attention.shape(), &[cfg.prototypes, encs[0].grid.0 * encs[0].grid.1]);
        let b = model.infer(&encs[0], (28, 28), true).unwrap();
        assert_eq!(a.map.values(), b.map.values());
        assert!(model.infer(&encs[0], (28, 28), false).unwrap().predicted.is_none());

        let (z1, s1) = model.zero_shot(&encs[1], (28, 28), cfg.coherence).unwrap();
        let (z2, s2) = model.zero_shot(&encs[1], (28, 28), cfg.coherence).unwrap();
        assert_eq!((z1.height(), z1.width()), (28, 28));
        assert_eq!(z1.values(), z2.values());
        assert_eq!(s1, s2);
    }
}
