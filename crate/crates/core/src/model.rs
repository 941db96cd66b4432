//! The toy-scale network: point embedding, pooled encoder with serialized
//! patch attention, mirrored decoder, keypoint-query decoder and heads.
//!
//! Every forward pass first sorts the input cloud into a canonical curve
//! order and maps point-level outputs back at the end, so results do not
//! depend on the order in which points were supplied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridpool::{self, CPPoolConfig, CppoolHeads, PoolMapping};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::serialize::{canonical_order, invert_permutation, CurveKind};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::types::{GridConfig, Point3, PointCloud, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "cppool")]
    CPPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width followed by one width per encoder stage.
    pub channels: Vec<usize>,
    pub num_stages: usize,
    pub num_keypoints: usize,
    pub num_parts: usize,
    pub projection_dim: usize,
    pub curve: CurveKind,
    pub grid: GridConfig,
    pub pooling: Pooling,
    pub attention_heads: usize,
    pub patch_size: usize,
    pub heatmap_bins: usize,
    pub heatmap_half_extent: f64,
    /// Update keypoint queries after every decoder stage rather than once at
    /// full resolution.
    pub per_stage_keypoint_updates: bool,
    pub use_intensity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![32, 32, 64],
            num_stages: 2,
            num_keypoints: 16,
            num_parts: NUM_CLASSES,
            projection_dim: 64,
            curve: CurveKind::default(),
            grid: GridConfig::default(),
            pooling: Pooling::CPPool,
            attention_heads: 2,
            patch_size: 64,
            heatmap_bins: 64,
            heatmap_half_extent: 1.5,
            per_stage_keypoint_updates: true,
            use_intensity: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::invalid("num_stages must be >= 1"));
        }
        if self.channels.len() != self.num_stages + 1 {
            return Err(Error::invalid(format!(
                "channels needs {} entries (embedding + stages), got {}",
                self.num_stages + 1,
                self.channels.len()
            )));
        }
        if self.grid.num_stages != self.num_stages {
            return Err(Error::invalid("grid.num_stages differs from num_stages"));
        }
        if self.num_parts != NUM_CLASSES {
            return Err(Error::invalid(format!("num_parts must be {NUM_CLASSES}")));
        }
        if self.attention_heads == 0
            || self.channels.iter().any(|&c| c == 0 || c % self.attention_heads != 0)
        {
            return Err(Error::invalid("every channel width must split into attention heads"));
        }
        if self.num_keypoints == 0 || self.projection_dim == 0 || self.patch_size == 0 {
            return Err(Error::invalid("num_keypoints, projection_dim and patch_size must be > 0"));
        }
        if self.heatmap_bins < 2 || !(self.heatmap_half_extent > 0.0) {
            return Err(Error::invalid("heatmap needs >= 2 bins and a positive extent"));
        }
        self.curve.validate()?;
        self.grid.validate()
    }

    fn input_dim(&self) -> usize {
        if self.use_intensity {
            4
        } else {
            3
        }
    }
}

/// Bin layout of the per-axis heatmaps: a cube of half-extent `half_extent`
/// centred on `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapAxis {
    pub center: Point3,
    pub half_extent: f64,
    pub bins: usize,
}

impl HeatmapAxis {
    pub fn bin_width(&self) -> f64 {
        2.0 * self.half_extent / self.bins as f64
    }

    /// Offset of bin `b`'s centre from the cube centre.
    pub fn bin_offset(&self, b: usize) -> f64 {
        -self.half_extent + (b as f64 + 0.5) * self.bin_width()
    }

    /// Continuous bin coordinate of an absolute position on `axis`.
    pub fn bin_coordinate(&self, axis: usize, value: f64) -> f64 {
        (value - self.center[axis] + self.half_extent) / self.bin_width() - 0.5
    }
}

/// Pre-norm transformer block whose attention runs inside contiguous
/// patches of the serialized sequence. A learned map of coordinates is added
/// to the normalized features before attention.
#[derive(Clone, Debug)]
pub struct SerializedBlock {
    pub ln1: LayerNorm,
    pub pos: Mlp,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub patch_size: usize,
}

impl SerializedBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        patch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SerializedBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            pos: Mlp::new(store, &format!("{name}.pos"), 3, width, width, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, width, width, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width, width, rng)?,
            patch_size,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, coords: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.ln1.forward(g, x)?;
        let p = self.pos.forward(g, coords)?;
        let h = g.add(h, p)?;
        let mut patches = Vec::with_capacity(n.div_ceil(self.patch_size));
        for start in (0..n).step_by(self.patch_size) {
            let rows: Vec<usize> = (start..(start + self.patch_size).min(n)).collect();
            let hp = g.gather(h, &rows)?;
            patches.push(self.attn.forward(g, hp, hp)?);
        }
        let a = if patches.len() == 1 {
            patches[0]
        } else {
            g.concat(&patches, 0)?
        };
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Residual pre-norm MLP applied independently to every point.
#[derive(Clone, Debug)]
pub struct PointwiseBlock {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl PointwiseBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(PointwiseBlock {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width, width, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Queries attend to point features (plus a learned map of point
/// coordinates), followed by a residual MLP.
#[derive(Clone, Debug)]
pub struct KeypointDecoder {
    pub ln_q: LayerNorm,
    pub pos: Mlp,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl KeypointDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_width: usize,
        point_width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(KeypointDecoder {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), query_width)?,
            pos: Mlp::new(store, &format!("{name}.pos"), 3, point_width, point_width, rng)?,
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                query_width,
                point_width,
                query_width,
                heads,
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), query_width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), query_width, query_width, query_width, rng)?,
        })
    }

    /// Zeroes the attention output projection and the last MLP layer, which
    /// turns the whole update into the identity.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.attn.out.set_zero(store);
        self.mlp.fc2.set_zero(store);
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, feats: Var, coords: Var) -> Result<Var> {
        if g.shape(feats).first().copied().unwrap_or(0) == 0 {
            return Err(Error::shape("keypoint_decoder", "no points to attend to"));
        }
        let p = self.pos.forward(g, coords)?;
        let kv = g.add(feats, p)?;
        let q = self.ln_q.forward(g, queries)?;
        let a = self.attn.forward(g, q, kv)?;
        let x = g.add(queries, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub enum PoolOp {
    Max {
        proj: Linear,
    },
    CPPool {
        heads: CppoolHeads,
        keypoint_proj: Linear,
        proj: Mlp,
    },
}

/// CPPool's per-point auxiliary predictions at a stage's input resolution
/// (internal canonical order).
#[derive(Clone, Copy, Debug)]
pub struct PoolAux {
    pub part_logits: Var,
    pub contact_logits: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub points: Vec<Point3>,
    pub feats: Var,
    pub mapping: PoolMapping,
    pub aux: Option<PoolAux>,
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub index: usize,
    pub pool: PoolOp,
    pub block: SerializedBlock,
}

impl EncoderStage {
    /// Pools `feats` (at `points`) into the stage's grid, orders the cells
    /// along the curve and runs the attention block on the pooled sequence.
    /// `keypoint_feat` is the `[1, C0]` mean of the keypoint queries.
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        cppool: &CPPoolConfig,
        points: &[Point3],
        feats: Var,
        keypoint_feat: Var,
    ) -> Result<StageOutput> {
        if self.index == 0 || self.index > cfg.num_stages {
            return Err(Error::invalid(format!("encoder stage {} out of range", self.index)));
        }
        let raw = gridpool::assign_cells(points, cfg.grid.grid_size(self.index))?;
        let order = canonical_order(raw.cell_centroids(), cfg.curve)?;
        let mapping = raw.reorder_cells(&order.permutation)?;
        if mapping.num_cells() == 0 {
            return Err(Error::Degenerate("pooling produced no points".into()));
        }
        let (pooled, aux) = match &self.pool {
            PoolOp::Max { proj } => {
                let p = proj.forward(g, feats)?;
                (gridpool::max_pool(g, p, &mapping)?, None)
            }
            PoolOp::CPPool {
                heads,
                keypoint_proj,
                proj,
            } => {
                let c = g.shape(feats)[1];
                let global = g.mean(feats, 0)?;
                let global = g.reshape(global, &[1, c])?;
                let kf = keypoint_proj.forward(g, keypoint_feat)?;
                let logits = gridpool::cppool_logits(g, feats, global, kf, heads, cppool)?;
                let w = gridpool::cppool_weights(g, logits.combined, &mapping)?;
                let h = gridpool::cppool_aggregate(g, feats, w, &mapping, |g, x| proj.forward(g, x))?;
                let aux = PoolAux {
                    part_logits: logits.part_logits,
                    contact_logits: logits.contact_logits,
                    weights: w,
                };
                (h, Some(aux))
            }
        };
        let centroids = mapping.cell_centroids().to_vec();
        let coords = g.constant(points_tensor(&centroids));
        let feats = self.block.forward(g, pooled, coords)?;
        Ok(StageOutput {
            points: centroids,
            feats,
            mapping,
            aux,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub index: usize,
    pub dec_proj: Linear,
    pub enc_proj: Linear,
    pub block: PointwiseBlock,
    pub keypoints: Option<KeypointDecoder>,
}

impl DecoderStage {
    /// Unpools `coarse` through `mapping`, fuses it with the encoder skip
    /// features and applies the pointwise block.
    pub fn forward(&self, g: &mut Graph, coarse: Var, mapping: &PoolMapping, skip: Var) -> Result<Var> {
        if g.shape(coarse).first() != Some(&mapping.num_cells())
            || g.shape(skip).first() != Some(&mapping.num_points())
        {
            return Err(Error::shape(
                "decoder_stage",
                format!(
                    "stage {}: coarse {:?}, skip {:?}, mapping {}->{}",
                    self.index,
                    g.shape(coarse),
                    g.shape(skip),
                    mapping.num_points(),
                    mapping.num_cells()
                ),
            ));
        }
        let up = gridpool::unpool(g, coarse, mapping)?;
        let d = self.dec_proj.forward(g, up)?;
        let e = self.enc_proj.forward(g, skip)?;
        let fused = gridpool::skip_fuse(g, d, e)?;
        self.block.forward(g, fused)
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub seg: Mlp,
    pub contact: Mlp,
    pub projection: Mlp,
    pub keypoint: Mlp,
    pub keypoint_contact: Mlp,
    pub heatmap: Mlp,
}

/// Bookkeeping needed to evaluate per-stage auxiliary losses: the canonical
/// order applied to the input and every stage's pooling mapping.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub order: Vec<usize>,
    pub mappings: Vec<PoolMapping>,
    pub aux: Vec<PoolAux>,
}

/// All predictions for one frame. Point-level rows follow the input order.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub mode: Mode,
    pub seg: Var,
    pub point_contact: Var,
    pub keypoints: Var,
    pub keypoint_contact: Var,
    pub embeddings: Var,
    /// `[N_k * 3, bins]` logits, finetune mode only.
    pub heatmap_logits: Option<Var>,
    /// `[N_k * 3, bins]` probabilities, finetune mode only.
    pub heatmaps: Option<Var>,
    pub heatmap_axis: HeatmapAxis,
    pub trace: ForwardTrace,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub cppool: CPPoolConfig,
    pub embed: Mlp,
    pub input_block: SerializedBlock,
    pub encoders: Vec<EncoderStage>,
    /// `decoders[s]` restores the resolution of encoder stage `s + 1`'s input.
    pub decoders: Vec<DecoderStage>,
    pub final_keypoints: Option<KeypointDecoder>,
    pub queries: ParamId,
    pub heads: Heads,
}

pub const QUERY_PARAM: &str = "queries";

fn points_tensor(points: &[Point3]) -> Tensor {
    Tensor::new(vec![points.len(), 3], points.iter().flatten().copied().collect())
        .expect("n x 3 layout")
}

impl Model {
    pub fn new(
        config: &ModelConfig,
        cppool: &CPPoolConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        cppool.validate()?;
        let ch = &config.channels;
        let c0 = ch[0];
        let heads = config.attention_heads;
        let embed = Mlp::new(store, "embed", config.input_dim(), c0, c0, rng)?;
        let input_block = SerializedBlock::new(store, "input_block", c0, heads, config.patch_size, rng)?;
        let mut encoders = Vec::with_capacity(config.num_stages);
        for s in 1..=config.num_stages {
            let (cin, cout) = (ch[s - 1], ch[s]);
            let name = format!("enc{s}");
            let pool = match config.pooling {
                Pooling::Max => PoolOp::Max {
                    proj: Linear::new(store, &format!("{name}.pool.proj"), cin, cout, rng)?,
                },
                Pooling::CPPool => PoolOp::CPPool {
                    heads: CppoolHeads::new(store, &format!("{name}.pool"), cin, rng)?,
                    keypoint_proj: Linear::new(store, &format!("{name}.pool.keypoint"), c0, cin, rng)?,
                    proj: Mlp::new(store, &format!("{name}.pool.proj"), cin, cin, cout, rng)?,
                },
            };
            let block =
                SerializedBlock::new(store, &format!("{name}.block"), cout, heads, config.patch_size, rng)?;
            encoders.push(EncoderStage {
                index: s,
                pool,
                block,
            });
        }
        let mut decoders = Vec::with_capacity(config.num_stages);
        for s in 0..config.num_stages {
            let name = format!("dec{s}");
            let keypoints = if config.per_stage_keypoint_updates {
                Some(KeypointDecoder::new(store, &format!("{name}.keypoints"), c0, ch[s], heads, rng)?)
            } else {
                None
            };
            decoders.push(DecoderStage {
                index: s,
                dec_proj: Linear::new(store, &format!("{name}.dec_proj"), ch[s + 1], ch[s], rng)?,
                enc_proj: Linear::new(store, &format!("{name}.enc_proj"), ch[s], ch[s], rng)?,
                block: PointwiseBlock::new(store, &format!("{name}.block"), ch[s], rng)?,
                keypoints,
            });
        }
        let final_keypoints = if config.per_stage_keypoint_updates {
            None
        } else {
            Some(KeypointDecoder::new(store, "keypoint_decoder", c0, c0, heads, rng)?)
        };
        let queries = store.add(QUERY_PARAM, Self::init_queries(config.num_keypoints, c0, rng))?;
        let heads = Heads {
            seg: Mlp::new(store, "head.seg", c0, c0, NUM_CLASSES, rng)?,
            contact: Mlp::new(store, "head.contact", c0, c0, 1, rng)?,
            projection: Mlp::new(store, "head.projection", c0, c0, config.projection_dim, rng)?,
            keypoint: Mlp::new(store, "head.keypoint", c0, c0, 3, rng)?,
            keypoint_contact: Mlp::new(store, "head.keypoint_contact", c0, c0, 1, rng)?,
            heatmap: Mlp::new(store, "head.heatmap", c0, c0, 3 * config.heatmap_bins, rng)?,
        };
        Ok(Model {
            config: config.clone(),
            cppool: cppool.clone(),
            embed,
            input_block,
            encoders,
            decoders,
            final_keypoints,
            queries,
            heads,
        })
    }

    fn init_queries(n: usize, width: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(n, width, |_, _| rng.random_range(-1.0..=1.0))
    }

    /// Replaces the keypoint queries with fresh ones for `num_keypoints`
    /// keypoints; needed when the keypoint convention changes.
    pub fn reinit_queries(
        &mut self,
        store: &mut ParamStore,
        num_keypoints: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let t = Self::init_queries(num_keypoints, self.config.channels[0], rng);
        store.get_mut(self.queries).value = t;
        store.get_mut(self.queries).grad = Tensor::zeros(vec![num_keypoints, self.config.channels[0]]);
        self.config.num_keypoints = num_keypoints;
        Ok(())
    }

    pub fn num_keypoints(&self, store: &ParamStore) -> usize {
        store.value(self.queries).rows()
    }

    /// Per-point embedding of coordinates (plus intensity when configured).
    pub fn embed(&self, g: &mut Graph, input: Var) -> Result<Var> {
        self.embed.forward(g, input)
    }

    fn input_tensor(&self, cloud: &PointCloud, order: &[usize], center: Point3) -> Result<Tensor> {
        let dim = self.config.input_dim();
        let intensity = if self.config.use_intensity {
            Some(cloud.intensity().ok_or_else(|| {
                Error::Missing("model expects intensity but the cloud has none".into())
            })?)
        } else {
            None
        };
        let mut data = Vec::with_capacity(order.len() * dim);
        for &i in order {
            let p = cloud.coords()[i];
            data.extend((0..3).map(|k| p[k] - center[k]));
            if let Some(int) = intensity {
                data.push(int[i]);
            }
        }
        Tensor::new(vec![order.len(), dim], data)
    }

    pub fn forward(&self, g: &mut Graph, cloud: &PointCloud, mode: Mode) -> Result<HeadOutputs> {
        if cloud.is_empty() {
            return Err(Error::invalid("cannot run the model on an empty cloud"));
        }
        let cfg = &self.config;
        let order = canonical_order(cloud.coords(), cfg.curve)?.permutation;
        let sorted: Vec<Point3> = order.iter().map(|&i| cloud.coords()[i]).collect();
        let center = crate::types::centroid(&sorted);
        let local: Vec<Point3> = sorted
            .iter()
            .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
            .collect();

        let input = g.constant(self.input_tensor(cloud, &order, center)?);
        let coords0 = g.constant(points_tensor(&local));
        let f = self.embed(g, input)?;
        let f = self.input_block.forward(g, f, coords0)?;

        let queries = g.param(self.queries)?;
        let c0 = cfg.channels[0];
        let qmean = g.mean(queries, 0)?;
        let qmean = g.reshape(qmean, &[1, c0])?;

        let mut skips = vec![(f, coords0, local.clone())];
        let mut mappings = Vec::with_capacity(cfg.num_stages);
        let mut aux = Vec::new();
        let mut cur = f;
        let mut cur_points = local;
        for stage in &self.encoders {
            let out = stage.forward(g, cfg, &self.cppool, &cur_points, cur, qmean)?;
            mappings.push(out.mapping);
            aux.extend(out.aux);
            cur = out.feats;
            cur_points = out.points;
            if stage.index < cfg.num_stages {
                let c = g.constant(points_tensor(&cur_points));
                skips.push((cur, c, cur_points.clone()));
            }
        }

        let mut q = queries;
        let mut d = cur;
        for s in (0..cfg.num_stages).rev() {
            let dec = &self.decoders[s];
            let (skip, coords, _) = skips[s];
            d = dec.forward(g, d, &mappings[s], skip)?;
            if let Some(kd) = &dec.keypoints {
                q = kd.forward(g, q, d, coords)?;
            }
        }
        if let Some(kd) = &self.final_keypoints {
            q = kd.forward(g, q, d, coords0)?;
        }

        let inv = invert_permutation(&order)?;
        let seg = self.heads.seg.forward(g, d)?;
        let seg = g.gather(seg, &inv)?;
        let pc = self.heads.contact.forward(g, d)?;
        let point_contact = g.gather(pc, &inv)?;
        let z = self.heads.projection.forward(g, d)?;
        let z = g.normalize_rows(z)?;
        let embeddings = g.gather(z, &inv)?;
        let keypoint_contact = self.heads.keypoint_contact.forward(g, q)?;

        let axis = HeatmapAxis {
            center,
            half_extent: cfg.heatmap_half_extent,
            bins: cfg.heatmap_bins,
        };
        let nk = g.shape(q)[0];
        let center_v = g.constant(Tensor::vector(center.to_vec()));
        let (keypoints, heatmap_logits, heatmaps) = match mode {
            Mode::Pretrain => {
                let k = self.heads.keypoint.forward(g, q)?;
                (g.add(k, center_v)?, None, None)
            }
            Mode::Finetune => {
                let h = self.heads.heatmap.forward(g, q)?;
                let logits = g.reshape(h, &[nk * 3, axis.bins])?;
                let probs = g.softmax(logits, 1)?;
                let offs = g.constant(Tensor::new(
                    vec![axis.bins, 1],
                    (0..axis.bins).map(|b| axis.bin_offset(b)).collect(),
                )?);
                let e = g.matmul(probs, offs)?;
                let e = g.reshape(e, &[nk, 3])?;
                (g.add(e, center_v)?, Some(logits), Some(probs))
            }
        };

        Ok(HeadOutputs {
            mode,
            seg,
            point_contact,
            keypoints,
            keypoint_contact,
            embeddings,
            heatmap_logits,
            heatmaps,
            heatmap_axis: axis,
            trace: ForwardTrace {
                order,
                mappings,
                aux,
            },
        })
    }

    /// Parameters that the given mode never touches (their gradient is
    /// structurally zero in that mode).
    pub fn unused_in(&self, mode: Mode) -> Vec<ParamId> {
        let mlp = |m: &Mlp| vec![m.fc1.weight, m.fc1.bias, m.fc2.weight, m.fc2.bias];
        match mode {
            Mode::Pretrain => mlp(&self.heads.heatmap),
            Mode::Finetune => mlp(&self.heads.keypoint),
        }
    }
}
