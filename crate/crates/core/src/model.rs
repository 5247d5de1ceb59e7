//! The assembled two-stream model: training loss on three-frame clips and
//! sequential inference over a video.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::config::{InstanceMode, ModelConfig};
use crate::division_fusion::{self, DecoderParams, RoutingParams};
use crate::encoders::{self, EncoderParams, KeyFeatures, STRIDE};
use crate::error::{Error, Result};
use crate::instance_stream::{self, HeadInput, PredictorParams, SegHead};
use crate::memory_bank::{ObjectEntry, VideoState};
use crate::params::{Bound, Init, LinearLayer, ParamId, ParamSet, ResBlock};
use crate::pixel_stream;
use crate::scalar::Scalar;
use crate::synth::TrainingClip;
use crate::tensor::Tensor;

/// Parameter handles of every sub-network.
#[derive(Debug, Clone)]
pub struct Layout {
    pub enc: EncoderParams,
    pub pixel_block: ResBlock,
    pub predictor: PredictorParams,
    pub reduce: LinearLayer,
    pub instance_block: ResBlock,
    pub route: RoutingParams,
    pub dec: DecoderParams,
}

/// Prefix shared by every instance-stream parameter.
pub const INSTANCE_PREFIX: &str = "inst.";

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

fn build_layout<T: Scalar>(cfg: &ModelConfig, ps: &mut ParamSet<T>) -> Layout {
    let mut init = Init::new(cfg.seed);
    let c = cfg.value_dim;
    let enc = EncoderParams::build(ps, &mut init, cfg);
    let pixel_block = ResBlock::build(ps, &mut init, "pix.block", 2 * c, c);
    let predictor = PredictorParams::build(ps, &mut init, cfg);
    let reduce = LinearLayer::build(ps, &mut init, "inst.reduce", c, instance_stream::HEAD_IN_FEAT, false);
    let instance_block = ResBlock::build(ps, &mut init, "inst.block", c + 1, c);
    let route = RoutingParams::build(ps, cfg);
    let dec = DecoderParams::build(ps, &mut init, cfg);
    Layout {
        enc,
        pixel_block,
        predictor,
        reduce,
        instance_block,
        route,
        dec,
    }
}

/// Graph-side view of one reference frame for one object.
#[derive(Debug, Clone, Copy)]
pub struct RefTokens {
    pub values: Var,
    /// θ and source centroid when the object is present.
    pub head: Option<(Var, (f64, f64))>,
}

/// Outputs of segmenting one object in one query frame.
#[derive(Debug, Clone, Copy)]
pub struct Segmentation {
    /// `H_im·W_im × 1`.
    pub logits: Var,
    pub prob: Var,
    /// `HW × 1` routing map.
    pub routing: Var,
}

/// Average of each `s × s` block of an `H × W` map.
pub fn grid_pool<T: Scalar>(mask: &[T], h: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = (h / STRIDE, w / STRIDE);
    let mut out = vec![0.0; gh * gw];
    for y in 0..gh * STRIDE {
        for x in 0..gw * STRIDE {
            out[(y / STRIDE) * gw + x / STRIDE] += mask[y * w + x].as_f64();
        }
    }
    let inv = 1.0 / (STRIDE * STRIDE) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Soft aggregation of per-object probabilities into a label map. The
/// background score is `Π(1 − p_i)`; every pixel takes the id with the
/// highest score among background (0) and the objects, ties going to the
/// lowest id.
pub fn aggregate_objects<T: Scalar>(probs: &[Vec<T>], ids: &[usize]) -> Result<Vec<u8>> {
    if probs.is_empty() || probs.len() != ids.len() {
        return Err(Error::Input(alloc::format!("{} probability maps for {} objects", probs.len(), ids.len())));
    }
    let n = probs[0].len();
    if probs.iter().any(|p| p.len() != n) {
        return Err(Error::dim("aggregate_objects", alloc::string::String::from("probability maps differ in size")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    let labels = (0..n)
        .map(|px| {
            let bg: f64 = probs.iter().map(|p| 1.0 - p[px].as_f64()).product();
            let (mut best, mut label) = (bg, 0u8);
            for &i in &order {
                let v = probs[i][px].as_f64();
                if v > best {
                    best = v;
                    label = ids[i] as u8;
                }
            }
            label
        })
        .collect();
    Ok(labels)
}

/// Options of a sequential inference run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    /// Top-k affinity, or `None` for the dense affinity.
    pub topk: Option<usize>,
    /// Keep only the annotated first frame in memory.
    pub first_frame_only: bool,
}

/// Per-frame results of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoOutput<T> {
    pub objects: Vec<usize>,
    pub labels: Vec<Vec<u8>>,
    /// `[frame][object]` routing maps (`HW × 1`); empty for frame 0.
    pub routing: Vec<Vec<Tensor<T>>>,
    pub grid: (usize, usize),
}

/// One query frame's per-object outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult<T> {
    /// `H·W` probabilities per object.
    pub probs: Vec<Vec<T>>,
    pub routing: Vec<Tensor<T>>,
    /// Query keys, reusable when the frame becomes a reference.
    pub keys: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let layout = build_layout(&cfg, &mut params);
        Ok(Model { cfg, params, layout })
    }

    /// A model whose parameters come from `params`; names and shapes must
    /// match those of a freshly built model for `cfg`.
    pub fn with_params(cfg: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        if params.len() != model.params.len() {
            return Err(Error::Input(alloc::format!(
                "checkpoint has {} tensors, model needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for ((_, want, wt), (_, got, gt)) in model.params.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::Input(alloc::format!(
                    "checkpoint tensor {got} {:?} does not match {want} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Parameters that only the instance stream uses.
    pub fn instance_params(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, n, _)| n.starts_with(INSTANCE_PREFIX)).map(|(id, _, _)| id).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Value tokens of a reference frame and, when the mask has any pixel
    /// above 0.5, the head generated from them.
    pub fn encode_reference(&self, g: &mut Graph<T>, p: &Bound, frame: Var, mask: Var) -> Result<RefTokens> {
        let values = encoders::value_encode(g, p, &self.layout.enc, frame, mask)?;
        let m = g.value(mask);
        let (h, w) = (m.shape()[0], m.shape()[1]);
        // Head placement follows the thresholded mask: piecewise constant in
        // the mask values, so treating it as a constant is exact.
        let half = T::from_f64(0.5);
        let hard: Vec<T> = m.data().iter().map(|&v| if v > half { T::one() } else { T::zero() }).collect();
        let present = hard.iter().any(|&v| v > half);
        let pooled = grid_pool(&hard, h, w);
        let head = match (present, instance_stream::centroid(&pooled, h / STRIDE, w / STRIDE)) {
            (true, Some((c, _))) => {
                let theta = match self.cfg.instance {
                    InstanceMode::GapPredictor => instance_stream::predict_theta_gap(g, p, &self.layout.predictor, values)?,
                    _ => instance_stream::predict_theta(g, p, &self.layout.predictor, values)?,
                };
                Some((theta, c))
            }
            _ => None,
        };
        Ok(RefTokens { values, head })
    }

    /// Heads for a query given the object's reference tokens, oldest first.
    pub fn heads(&self, g: &mut Graph<T>, p: &Bound, refs: &[RefTokens], grid: (usize, usize)) -> Result<Vec<HeadInput<T>>> {
        let (h, w) = grid;
        let pos = |c| instance_stream::position_map(self.cfg.position, c, h, w);
        if self.cfg.instance == InstanceMode::SinglePooledHead {
            let present: Vec<&RefTokens> = refs.iter().filter(|r| r.head.is_some()).collect();
            let Some(last) = present.last() else { return Ok(Vec::new()) };
            let centroid = last.head.expect("present").1;
            let tokens: Vec<Var> = present.iter().map(|r| r.values).collect();
            let stacked = g.vstack(&tokens)?;
            let theta = instance_stream::predict_theta(g, p, &self.layout.predictor, stacked)?;
            return Ok(vec![HeadInput {
                theta,
                position: pos(centroid),
            }]);
        }
        Ok(refs
            .iter()
            .filter_map(|r| r.head)
            .map(|(theta, c)| HeadInput { theta, position: pos(c) })
            .collect())
    }

    /// Segments one object in a query frame against its memory.
    #[allow(clippy::too_many_arguments)]
    pub fn segment(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        q: &KeyFeatures,
        mem_keys: Var,
        mem_values: Var,
        heads: &[HeadInput<T>],
        topk: Option<usize>,
    ) -> Result<Segmentation> {
        let l = &self.layout;
        let a = pixel_stream::affinity_var(g, q.key, mem_keys, topk)?;
        let r_v = g.matmul(a, mem_values)?;
        let r_k = division_fusion::aggregate_key(g, a, mem_keys)?;
        let f_pix = pixel_stream::pixel_embed(g, p, &l.pixel_block, r_v, q.feat)?;
        let o_inst = if heads.is_empty() {
            let rows = g.shape(q.feat)[0];
            g.constant(Tensor::zeros(&[rows, 1]))
        } else {
            instance_stream::apply_instance_memory(g, p, &l.reduce, q.feat, heads)?
        };
        let f_inst = instance_stream::instance_embed(g, p, &l.instance_block, o_inst, q.feat)?;
        let w = division_fusion::routing(g, p, &l.route, self.cfg.routing_form, self.cfg.fusion, r_k, q.key)?;
        let fused = division_fusion::fuse(g, w, f_inst, f_pix)?;
        let logits = division_fusion::decode(g, p, &l.dec, fused, q.grid, &q.skips)?;
        let prob = g.sigmoid(logits);
        Ok(Segmentation { logits, prob, routing: w })
    }

    /// Training loss of one clip: frame 1 with its ground truth is memory,
    /// frame 2 is segmented and its soft prediction written to memory, then
    /// frame 3 is segmented against both. The loss is the mean over the two
    /// segmented frames of bootstrapped cross-entropy plus mask IoU loss.
    pub fn clip_loss(&self, g: &mut Graph<T>, p: &Bound, clip: &TrainingClip<T>, bootstrap: f64) -> Result<Var> {
        let enc = &self.layout.enc;
        let frames: Vec<Var> = clip.frames.iter().map(|f| g.constant(f.clone())).collect();
        let m0 = g.constant(clip.masks[0].clone());
        let q0 = encoders::key_encode(g, p, enc, frames[0])?;
        let mut refs = vec![self.encode_reference(g, p, frames[0], m0)?];
        let mut keys = vec![q0.key];
        let mut total: Option<Var> = None;
        for i in 1..3 {
            let q = encoders::key_encode(g, p, enc, frames[i])?;
            let mk = g.vstack(&keys)?;
            let tokens: Vec<Var> = refs.iter().map(|r| r.values).collect();
            let mv = g.vstack(&tokens)?;
            let heads = self.heads(g, p, &refs, q.grid)?;
            let seg = self.segment(g, p, &q, mk, mv, &heads, None)?;
            let target = &clip.masks[i];
            let flat = target.reshape(&[target.len(), 1])?;
            let bce = g.bce_bootstrap(seg.logits, &flat, bootstrap)?;
            let iou = g.miou_loss(seg.prob, &flat)?;
            let term = g.add(bce, iou)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
            if i == 1 {
                let soft = g.reshape(seg.prob, target.shape())?;
                refs.push(self.encode_reference(g, p, frames[1], soft)?);
                keys.push(q.key);
            }
        }
        Ok(g.scale(total.expect("two frames"), T::from_f64(0.5)))
    }

    /// Loss and per-parameter gradients of one clip.
    pub fn clip_grads(&self, clip: &TrainingClip<T>, bootstrap: f64) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let loss = self.clip_loss(&mut g, &p, clip, bootstrap)?;
        let grads = g.backward(loss)?;
        let out = p
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        Ok((g.value(loss).data()[0].as_f64(), out))
    }

    fn query_graph(&self, g: &mut Graph<T>, p: &Bound, state: &VideoState<T>, frame: &Tensor<T>, topk: Option<usize>) -> Result<(KeyFeatures, Vec<Segmentation>)> {
        if !state.is_initialized() {
            return Err(Error::Sequencing("query before the first annotated frame was written"));
        }
        let f = g.constant(frame.clone());
        let q = encoders::key_encode(g, p, &self.layout.enc, f)?;
        let mk = g.constant(state.keys()?);
        let mut segs = Vec::with_capacity(state.objects().len());
        for obj in 0..state.objects().len() {
            let entries = state.entries(obj);
            let refs: Vec<RefTokens> = entries
                .iter()
                .map(|e| RefTokens {
                    values: g.constant(e.values.clone()),
                    head: e.head.as_ref().map(|h| (g.constant(h.theta.clone()), h.centroid)),
                })
                .collect();
            let tokens: Vec<Var> = refs.iter().map(|r| r.values).collect();
            let mv = g.vstack(&tokens)?;
            let heads = self.heads(g, p, &refs, q.grid)?;
            segs.push(self.segment(g, p, &q, mk, mv, &heads, topk)?);
        }
        Ok((q, segs))
    }

    /// Per-object probabilities and routing maps for a query frame.
    pub fn forward_query(&self, state: &VideoState<T>, frame: &Tensor<T>, topk: Option<usize>) -> Result<QueryResult<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (q, segs) = self.query_graph(&mut g, &p, state, frame, topk)?;
        Ok(QueryResult {
            probs: segs.iter().map(|s| g.value(s.prob).data().to_vec()).collect(),
            routing: segs.iter().map(|s| g.value(s.routing).clone()).collect(),
            keys: g.value(q.key).clone(),
        })
    }

    /// Writes frame `t` with label map `labels` into memory. `keys` may
    /// carry the frame's already computed query keys.
    pub fn write_reference(
        &self,
        state: &mut VideoState<T>,
        t: usize,
        frame: &Tensor<T>,
        labels: &[u8],
        keys: Option<Tensor<T>>,
    ) -> Result<()> {
        let (h, w, _) = frame.dims3("write_reference")?;
        if labels.len() != h * w {
            return Err(Error::Input(alloc::format!("label map of {} pixels for a {h}×{w} frame", labels.len())));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let f = g.constant(frame.clone());
        let keys = match keys {
            Some(k) => k,
            None => {
                let q = encoders::key_encode(&mut g, &p, &self.layout.enc, f)?;
                g.value(q.key).clone()
            }
        };
        let mut entries = Vec::with_capacity(state.objects().len());
        for &id in state.objects() {
            let mask = Tensor::new(&[h, w, 1], labels.iter().map(|&l| if l as usize == id { T::one() } else { T::zero() }).collect())?;
            let m = g.constant(mask);
            let r = self.encode_reference(&mut g, &p, f, m)?;
            entries.push(ObjectEntry {
                values: g.value(r.values).clone(),
                head: r.head.map(|(theta, centroid)| SegHead {
                    theta: g.value(theta).clone(),
                    centroid,
                    source_frame: t,
                }),
            });
        }
        state.write_reference(t, keys, entries)
    }

    /// A fresh state for the objects annotated in `labels`, with the first
    /// frame written.
    pub fn start_video(&self, frame: &Tensor<T>, labels: &[u8]) -> Result<VideoState<T>> {
        let mut ids: Vec<usize> = labels.iter().filter(|&&l| l != 0).map(|&l| l as usize).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Input("first-frame annotation has no object".into()));
        }
        let mut state = VideoState::new(ids, self.cfg.n_max)?;
        self.write_reference(&mut state, 0, frame, labels, None)?;
        Ok(state)
    }

    /// The configured inference top-k (`None` when dense).
    pub fn inference_topk(&self) -> Option<usize> {
        (!self.cfg.dense_inference).then_some(self.cfg.topk)
    }

    /// Segments a whole video from its first-frame annotation. Every
    /// `mem_every`-th frame's prediction is written back to memory.
    pub fn infer_video(&self, frames: &[Tensor<T>], first_labels: &[u8], opts: InferOptions) -> Result<VideoOutput<T>> {
        let Some(first) = frames.first() else {
            return Err(Error::Input("video has no frames".into()));
        };
        let (h, w, _) = first.dims3("infer_video")?;
        let mut state = self.start_video(first, first_labels)?;
        let ids = state.objects().to_vec();
        let mut out = VideoOutput {
            objects: ids.clone(),
            labels: vec![first_labels.to_vec()],
            routing: vec![Vec::new()],
            grid: (h / STRIDE, w / STRIDE),
        };
        for (t, frame) in frames.iter().enumerate().skip(1) {
            let res = self.forward_query(&state, frame, opts.topk)?;
            for p in &res.probs {
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(alloc::format!("non-finite probability in frame {t}")));
                }
            }
            let labels = aggregate_objects(&res.probs, &ids)?;
            state.frame_index = t;
            if !opts.first_frame_only && t % self.cfg.mem_every == 0 {
                self.write_reference(&mut state, t, frame, &labels, Some(res.keys))?;
            }
            out.labels.push(labels);
            out.routing.push(res.routing);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FusionMode, PositionMode};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate_objects(&[vec![0.2, 0.5, 0.51, 0.9]], &[1]).unwrap();
        assert_eq!(one, [0, 0, 1, 1]);
        let zero = aggregate_objects(&[vec![0.0f64; 3], vec![0.0; 3]], &[1, 2]).unwrap();
        assert_eq!(zero, [0, 0, 0]);
        let two = aggregate_objects(&[vec![0.9f64], vec![0.2]], &[1, 2]).unwrap();
        assert_eq!(two, [1]);
        let tie = aggregate_objects(&[vec![0.8f64], vec![0.8]], &[2, 1]).unwrap();
        assert_eq!(tie, [1]);
        assert!(aggregate_objects::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn grid_pool_averages_blocks() {
        let mut m = vec![0.0f64; 64];
        for y in 0..4 {
            for x in 0..4 {
                m[y * 8 + x] = 1.0;
            }
        }
        m[7] = 1.0;
        assert_eq!(grid_pool(&m, 8, 8), [1.0, 1.0 / 16.0, 0.0, 0.0]);
    }

    #[test]
    fn with_params_checks_layout() {
        let a = Model::<f64>::new(tiny_cfg()).unwrap();
        let b = Model::<f64>::with_params(tiny_cfg(), a.params().clone()).unwrap();
        assert_eq!(a.params(), b.params());
        let other = ModelConfig {
            value_dim: 16,
            ..tiny_cfg()
        };
        assert!(Model::<f64>::with_params(other, a.params().clone()).is_err());
    }

    #[test]
    fn query_before_start_is_a_sequencing_error() {
        let m = Model::<f64>::new(tiny_cfg()).unwrap();
        let state = VideoState::new(vec![1], 8).unwrap();
        let frame = Tensor::zeros(&[16, 16, 3]);
        assert!(matches!(m.forward_query(&state, &frame, None), Err(Error::Sequencing(_))));
    }

    #[test]
    fn instance_parameters_are_prefixed() {
        let m = Model::<f64>::new(ModelConfig {
            position: PositionMode::Sine,
            fusion: FusionMode::Routing,
            ..tiny_cfg()
        })
        .unwrap();
        let ids = m.instance_params();
        assert!(ids.iter().any(|&id| m.params().name(id) == "inst.pred.e_init"));
        assert!(ids.iter().all(|&id| m.params().name(id).starts_with(INSTANCE_PREFIX)));
    }
}
