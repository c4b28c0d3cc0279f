//! The trainable grounding model: retrieval, partition, encoder, decoder and
//! heads wired together, plus losses, optimization and checkpoints.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{detection_loss, giou_graph, l1_distance, match_cost, match_predictions, total_loss, DetectionLoss};
pub use train::{train, train_step, Optimizer, StepStats};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::config::{HeroConfig, ModelConfig, TrainConfig};
use crate::encoder::{
    box_heads, decoder_forward, embed_inputs, encoder_forward, predict_boxes, EncoderParams, FramePredictions,
    HeadOutput, QuerySplit, VideoFeatures,
};
use crate::eval::{iou, EpisodeRecord, EvalReport};
use crate::retrieval::{
    coarse_encode, generate_proposals, loss_clip, loss_fine, loss_global, proposal_similarities, retrieval_loss,
    retrieve, similarity, FramePartition, FrameSelection, Proposal, RetrievalOutput, RetrievalParams,
};
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};
use crate::world::{generate_set, Episode, WorldConfig};

/// Prefix of every retrieval-branch parameter name.
pub const RETRIEVAL_PREFIX: &str = "retr";

/// Sizes the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub feature_dim: usize,
    pub frames: usize,
    pub grid: (usize, usize),
}

impl From<&WorldConfig> for InputShape {
    fn from(w: &WorldConfig) -> Self {
        Self {
            feature_dim: w.feature_dim,
            frames: w.frames,
            grid: w.grid,
        }
    }
}

/// Parameter layout and hyperparameters, without the parameter values.
#[derive(Clone, Debug)]
pub struct HeroNet {
    pub config: ModelConfig,
    pub input: InputShape,
    pub encoder: EncoderParams,
    pub retrieval: RetrievalParams,
    pub proposals: Vec<Proposal>,
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct HeroModel<R: Real> {
    pub net: HeroNet,
    pub store: ParamStore<R>,
}

impl<R: Real> HeroModel<R> {
    pub fn new(config: &ModelConfig, input: InputShape, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        config.retrieval.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &mut rng, &config.encoder, input.feature_dim, input.frames, input.grid)?;
        let retrieval = RetrievalParams::new(&mut store, &mut rng, RETRIEVAL_PREFIX, config.encoder.model_dim)?;
        let proposals = generate_proposals(input.frames, &config.proposal_scales)?;
        Ok(Self {
            net: HeroNet {
                config: config.clone(),
                input,
                encoder,
                retrieval,
                proposals,
            },
            store,
        })
    }

    /// Parameters that only the retrieval branch reads.
    pub fn retrieval_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name().starts_with(RETRIEVAL_PREFIX))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn infer(&self, video: &VideoFeatures<R>, query: &QuerySplit<R>) -> Result<Inference> {
        self.net.infer(&self.store, video, query)
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub heads: HeadOutput,
    pub retrieval: Option<RetrievalOutput>,
    pub partition: FramePartition,
    /// Embedded frame tokens `[I, d]` seen by the retrieval branch.
    pub frame_tokens: Var,
    /// Mean embedded action token `[1, d]`.
    pub s_act: Var,
}

/// Retrieval objective terms.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalLosses {
    pub global: Var,
    pub clip: Var,
    pub fine: Var,
    pub total: Var,
}

/// Loss of one training example.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub det: Var,
    pub retr: Var,
    pub matches: Vec<usize>,
    pub pass: ForwardPass,
}

/// Inference result for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Chosen `[cx, cy, w, h]` per frame.
    pub boxes: Vec<[f64; 4]>,
    pub predictions: FramePredictions,
    pub partition: FramePartition,
    pub clip: Option<Proposal>,
    pub selection: Option<FrameSelection>,
}

impl HeroNet {
    fn check_input<R: Real>(&self, video: &VideoFeatures<R>) -> Result<()> {
        let i = &self.input;
        if video.frames() != i.frames || video.grid != i.grid || video.dim() != i.feature_dim {
            return Err(TensorError::invalid(
                "HeroNet",
                format!(
                    "model expects {} frames on a {:?} grid with {} features, got {} frames on {:?} with {}",
                    i.frames,
                    i.grid,
                    i.feature_dim,
                    video.frames(),
                    video.grid,
                    video.dim()
                ),
            ));
        }
        Ok(())
    }

    /// Embedded frame tokens `[I, d]` and mean action token `[1, d]`.
    fn retrieval_inputs<R: Real>(&self, g: &mut Graph<R>, video: Var, text: Var, query: &QuerySplit<R>) -> Result<(Var, Var)> {
        let s = g.shape(video).to_vec();
        let ft = g.narrow(video, 1, 0, 1)?;
        let ft = g.reshape(ft, [s[0], s[2]])?;
        let act = g.gather(text, &query.act_idx)?;
        let s_act = g.mean_axis0(act)?;
        Ok((ft, s_act))
    }

    /// Retrieval, partition, encoder, decoder and heads, in that order.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamStore<R>,
        video: &VideoFeatures<R>,
        query: &QuerySplit<R>,
    ) -> Result<ForwardPass> {
        self.check_input(video)?;
        let cfg = &self.config.encoder;
        let (v, t) = embed_inputs(g, ps, &self.encoder, video, query)?;
        let (frame_tokens, s_act) = self.retrieval_inputs(g, v, t, query)?;
        let (retrieval, partition) = if cfg.components.retrieval {
            let r = retrieve(
                g,
                ps,
                &self.retrieval,
                &self.proposals,
                frame_tokens,
                s_act,
                &cfg.heads()?,
                self.config.retrieval.delta,
            )?;
            let p = r.partition.clone();
            (Some(r), p)
        } else {
            (None, FramePartition::all_consistent(video.frames()))
        };
        let (v, t) = encoder_forward(g, ps, &self.encoder, v, t, query, &partition, video.grid, cfg)?;
        let (decoded, _) = decoder_forward(g, ps, &self.encoder, v, t, cfg)?;
        let heads = box_heads(g, ps, &self.encoder, decoded)?;
        Ok(ForwardPass {
            heads,
            retrieval,
            partition,
            frame_tokens,
            s_act,
        })
    }

    /// Contrastive retrieval losses against one negative episode.
    pub fn retrieval_losses<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamStore<R>,
        pass: &ForwardPass,
        negative: (&VideoFeatures<R>, &QuerySplit<R>),
    ) -> Result<RetrievalLosses> {
        let Some(r) = &pass.retrieval else {
            let z = g.constant(Tensor::scalar(R::zero()));
            return Ok(RetrievalLosses {
                global: z,
                clip: z,
                fine: z,
                total: z,
            });
        };
        let (neg_video, neg_query) = negative;
        self.check_input(neg_video)?;
        let m = &self.config.retrieval;
        let heads = self.config.encoder.heads()?;
        let (nv, nt) = embed_inputs(g, ps, &self.encoder, neg_video, neg_query)?;
        let (neg_frames, neg_s_act) = self.retrieval_inputs(g, nv, nt, neg_query)?;
        let neg_features = coarse_encode(g, ps, &self.retrieval, &self.proposals, neg_frames, &heads)?;
        let neg_text = proposal_similarities(g, ps, &self.retrieval, &r.features, neg_s_act)?;
        let neg_vid = proposal_similarities(g, ps, &self.retrieval, &neg_features, pass.s_act)?;
        let pos = &r.theta_vars;

        let global = loss_global(g, pos[0], neg_text[0], neg_vid[0], m.margin_global)?;
        let clip = loss_clip(g, &pos[1..], &neg_text[1..], &neg_vid[1..], m.margin_clip)?;
        let refined = similarity(g, ps, &self.retrieval, r.fine.refined, pass.s_act)?;
        let mut input = similarity(g, ps, &self.retrieval, r.features[r.clip_index], pass.s_act)?;
        if m.detach_fine_negative {
            input = g.detach(input);
        }
        let fine = loss_fine(g, refined, input, m.margin_fine)?;
        let total = retrieval_loss(g, global, clip, fine)?;
        Ok(RetrievalLosses {
            global,
            clip,
            fine,
            total,
        })
    }

    /// Full training objective of `episode` with `negative` as the contrastive partner.
    pub fn loss<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamStore<R>,
        episode: &Episode<R>,
        negative: &Episode<R>,
        train: &TrainConfig,
    ) -> Result<LossParts> {
        let pass = self.forward(g, ps, &episode.video, &episode.query)?;
        let preds = predict_boxes(g.value(pass.heads.boxes), g.value(pass.heads.conf_logits))?;
        let matches = match_predictions(&preds, &episode.gt.boxes, &self.config.matching)?;
        let det = detection_loss(g, &pass.heads, &matches, &episode.gt.boxes)?.total;
        let retr = self.retrieval_losses(g, ps, &pass, (&negative.video, &negative.query))?.total;
        let total = total_loss(g, det, retr, train.det_weight, train.retr_weight)?;
        Ok(LossParts {
            total,
            det,
            retr,
            matches,
            pass,
        })
    }

    /// Per-frame boxes for a video and query.
    pub fn infer<R: Real>(&self, ps: &ParamStore<R>, video: &VideoFeatures<R>, query: &QuerySplit<R>) -> Result<Inference> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, ps, video, query)?;
        let predictions = predict_boxes(g.value(pass.heads.boxes), g.value(pass.heads.conf_logits))?;
        Ok(Inference {
            boxes: predictions.chosen_boxes(),
            predictions,
            partition: pass.partition,
            clip: pass.retrieval.as_ref().map(|r| r.proposals[r.clip_index]),
            selection: pass.retrieval.map(|r| r.selection),
        })
    }
}

/// What the model is told about each episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    Full,
    /// Every query token replaced by zeros.
    Zeroed,
}

fn evaluate_one<R: Real>(model: &HeroModel<R>, index: usize, ep: &Episode<R>, mode: QueryMode) -> Result<(EpisodeRecord, Inference)> {
    let inf = match mode {
        QueryMode::Full => model.infer(&ep.video, &ep.query)?,
        QueryMode::Zeroed => model.infer(&ep.video, &ep.query.zeroed())?,
    };
    let frame_ious: Vec<f64> = inf
        .boxes
        .iter()
        .zip(&ep.gt.boxes)
        .map(|(b, t)| iou(&loss::raw_box(b), t))
        .collect();
    let record = EpisodeRecord {
        index,
        mean_iou: frame_ious.iter().sum::<f64>() / frame_ious.len() as f64,
        frame_ious,
        boxes: inf.boxes.clone(),
    };
    Ok((record, inf))
}

/// Runs inference on every episode and aggregates the accuracy report.
pub fn evaluate<R: Real>(model: &HeroModel<R>, episodes: &[Episode<R>], mode: QueryMode, config_hash: &str) -> Result<EvalReport> {
    let records = episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| evaluate_one(model, i, ep, mode).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records, config_hash)
}

/// Frame-level agreement of the retrieval partition with the true action spans.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RetrievalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of episodes whose chosen clip overlaps the action span.
    pub clip_overlap: f64,
    pub episodes: usize,
}

/// Micro-averaged frame precision, recall and F1 of the consistent set, and
/// the clip overlap rate.
pub fn retrieval_report<R: Real>(model: &HeroModel<R>, episodes: &[Episode<R>]) -> Result<RetrievalReport> {
    if episodes.is_empty() {
        return Err(TensorError::invalid("retrieval_report", "no episodes"));
    }
    let (mut tp, mut fp, mut fneg, mut overlap) = (0usize, 0usize, 0usize, 0usize);
    for ep in episodes {
        let inf = model.infer(&ep.video, &ep.query)?;
        let (s, e) = ep.gt.consistent_span;
        for f in 0..ep.video.frames() {
            match (inf.partition.is_consistent(f), (s..=e).contains(&f)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if inf.clip.is_some_and(|c| c.overlaps(s, e)) {
            overlap += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(RetrievalReport {
        precision,
        recall,
        f1,
        clip_overlap: overlap as f64 / episodes.len() as f64,
        episodes: episodes.len(),
    })
}

/// Training pool drawn from the world seed.
pub fn training_pool(cfg: &HeroConfig) -> Result<Vec<Episode<f64>>> {
    generate_set(&cfg.world, cfg.train.train_episodes, cfg.world.seed)
}

/// Held-out episodes drawn from the evaluation seed.
pub fn held_out(cfg: &HeroConfig) -> Result<Vec<Episode<f64>>> {
    generate_set(&cfg.world, cfg.eval.episodes, cfg.eval.seed)
}

/// Builds a model from `cfg` and trains it on the configured pool.
pub fn fit(cfg: &HeroConfig, on_step: impl FnMut(&StepStats, &HeroModel<f64>) -> Result<()>) -> Result<(HeroModel<f64>, Vec<StepStats>)> {
    cfg.validate()?;
    let pool = training_pool(cfg)?;
    let mut model = HeroModel::new(&cfg.model, InputShape::from(&cfg.world), cfg.train.seed)?;
    let history = train(&mut model, &pool, &cfg.train, on_step)?;
    Ok((model, history))
}

#[cfg(test)]
mod tests;
