//! The densification network: a serialized-attention U-Net over Gaussian
//! tokens with projection-based cross-attention into an image pyramid, a
//! two-stage residual decoder and an existence-mask head.

mod layers;
mod serialize;

use std::path::Path;
use std::rc::Rc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{project_points, render_op, straight_through, Block, ProjCrossAttn};
pub use serialize::{invert_permutation, morton3, serialize_order, GRID_BITS};

use crate::error::{Error, Result};
use crate::features::{
    sample_projection_features, DensifierInput, ImagePyramid, MvEncoder, PyramidLevel, RayModulation, BG_CHANNELS,
    MV_CHANNELS, PARAM_DIMS, PYRAMID_WIDTHS, RECON_CHANNELS,
};
use crate::nn::{Graph, Linear, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::types::{logistic, logit, quat_normalize, Gaussian3D, GaussianSet, SourceTag};

/// Per-row offsets predicted by the parameter heads: α-logit, log-scale, rotation, color.
const PARAM_OFFSETS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token widths of the 5 encoder blocks.
    pub enc_widths: Vec<usize>,
    /// Token widths of the 4 decoder blocks.
    pub dec_widths: Vec<usize>,
    pub window: usize,
    pub head_dim: usize,
    pub cross_heads: usize,
    /// Width of the source embeddings.
    pub embed_dim: usize,
    /// Densified Gaussians per input Gaussian.
    pub k: usize,
    pub num_views: usize,
    pub use_recon_features: bool,
    pub use_cross_attention: bool,
    pub use_existence_masks: bool,
    /// Initial `m^Y − m^N`.
    pub mask_logit_bias: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_widths: vec![16, 32, 48, 64, 64],
            dec_widths: vec![64, 48, 32, 32],
            window: 16,
            head_dim: 16,
            cross_heads: 8,
            embed_dim: 32,
            k: 1,
            num_views: 2,
            use_recon_features: true,
            use_cross_attention: true,
            use_existence_masks: false,
            mask_logit_bias: 3.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.enc_widths.len() != 5 || self.dec_widths.len() != 4 {
            return bad("the network has 5 encoder and 4 decoder blocks");
        }
        if self.head_dim == 0 || self.enc_widths.iter().chain(&self.dec_widths).any(|w| *w == 0 || w % self.head_dim != 0) {
            return bad("block widths must be positive multiples of head_dim");
        }
        if self.cross_heads == 0 || self.dec_widths[1..].iter().any(|w| w % self.cross_heads != 0) {
            return bad("cross-attention widths must be multiples of cross_heads");
        }
        if self.window == 0 || self.k == 0 || self.num_views == 0 || !(self.temperature > 0.0) {
            return bad("window, k, num_views and temperature must be positive");
        }
        Ok(())
    }

    /// Channels of the per-view image stack.
    pub fn image_channels(&self) -> usize {
        let recon = if self.use_recon_features { 2 * RECON_CHANNELS } else { 0 };
        3 + MV_CHANNELS + recon + BG_CHANNELS
    }

    pub fn gaussian_feature_dims(&self) -> usize {
        3 * PARAM_DIMS + self.num_views * (self.image_channels() + 1) + self.embed_dim
    }

    pub fn latent_width(&self) -> usize {
        self.dec_widths[3]
    }
}

/// Opacity and scale each of `k` children gets so that `k` co-located
/// copies reproduce the parent's accumulated opacity. `k = 1` is the identity.
pub fn default_post_densification(g: &Gaussian3D, k: usize) -> Gaussian3D {
    if k <= 1 {
        return *g;
    }
    let a = g.opacity();
    let child = 1.0 - (1.0 - a).powf(1.0 / k as f64);
    Gaussian3D {
        opacity_logit: logit(child),
        log_scale: g.log_scale.map(|s| s - 0.5 * (k as f64).ln()),
        ..*g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Gumbel-sampled existence masks drawn from the given seed.
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone)]
pub struct DensifierOutput {
    /// `K·N`×14 predicted parameters, row `j·K + k` is child `k` of token `j`.
    pub params: Var,
    /// `K·N`×1 straight-through existence values when masks are enabled.
    pub existence: Option<Var>,
    /// Hard existence decisions, aligned with `params` rows.
    pub keep: Option<Vec<bool>>,
    pub num_roi: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecoderHeads {
    mu: Mlp,
    stage2: ProjCrossAttn,
    roi: Mlp,
    pixel: Mlp,
    mask: Linear,
}

#[derive(Debug, Clone)]
pub struct DensifierModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    mv: MvEncoder,
    modulation: RayModulation,
    pyramid: ImagePyramid,
    embed_roi: ParamId,
    embed_pixel: ParamId,
    input: Linear,
    enc_proj: Vec<Linear>,
    enc: Vec<Block>,
    dec_proj: Vec<Linear>,
    dec: Vec<Block>,
    cross: Vec<ProjCrossAttn>,
    heads: DecoderHeads,
}

/// One level of the token hierarchy.
struct Level {
    centers: Vec<Vector3<f64>>,
    /// Segment starts pooling this level into the next.
    starts: Rc<Vec<usize>>,
    /// Row of the coarser level each row of this level belongs to.
    parent: Rc<Vec<usize>>,
}

fn build_levels(centers: Vec<Vector3<f64>>, depth: usize) -> Vec<Vec<Vector3<f64>>> {
    let mut out = vec![centers];
    for _ in 1..depth {
        let prev = out.last().unwrap();
        let next: Vec<_> = prev.chunks(2).map(|c| c.iter().sum::<Vector3<f64>>() / c.len() as f64).collect();
        out.push(next);
    }
    out
}

impl DensifierModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let c_img = config.image_channels();
        let mv = MvEncoder::new(&mut s, "mv", &mut rng);
        let modulation = RayModulation::new(&mut s, "raymod", c_img, &mut rng);
        let pyramid = ImagePyramid::new(&mut s, "pyramid", c_img, &mut rng);
        let d = config.embed_dim;
        let embed_roi = s.add("embed.roi", Tensor::randn(1, d, 0.5, &mut rng), false);
        let embed_pixel = s.add("embed.pixel", Tensor::randn(1, d, 0.5, &mut rng), false);
        let ew = &config.enc_widths;
        let dw = &config.dec_widths;
        let input = Linear::new(&mut s, "input", config.gaussian_feature_dims(), ew[0], &mut rng);
        let mut enc_proj = Vec::new();
        let mut enc = Vec::new();
        for l in 0..5 {
            if l > 0 {
                enc_proj.push(Linear::new(&mut s, &format!("enc{l}.proj"), ew[l - 1], ew[l], &mut rng));
            }
            enc.push(Block::new(&mut s, &format!("enc{l}"), ew[l], config.head_dim, &mut rng));
        }
        let mut dec_proj = Vec::new();
        let mut dec = Vec::new();
        let mut cross = Vec::new();
        let mut prev = ew[4];
        for (b, &w) in dw.iter().enumerate() {
            let skip = ew[3 - b];
            dec_proj.push(Linear::new(&mut s, &format!("dec{b}.proj"), prev + skip, w, &mut rng));
            dec.push(Block::new(&mut s, &format!("dec{b}"), w, config.head_dim, &mut rng));
            if b >= 1 {
                let feat = PYRAMID_WIDTHS[3 - b];
                cross.push(ProjCrossAttn::new(&mut s, &format!("cross{b}"), w, feat, config.cross_heads, &mut rng));
            }
            prev = w;
        }
        let f = config.latent_width();
        let k = config.k;
        let heads = DecoderHeads {
            mu: Mlp::zero_out(&mut s, "head.mu", f, f, 3 * k, &mut rng),
            stage2: ProjCrossAttn::new(&mut s, "head.cross", f, PYRAMID_WIDTHS[0], config.cross_heads, &mut rng),
            roi: Mlp::zero_out(&mut s, "head.roi", 2 * f + 3, f, PARAM_OFFSETS, &mut rng),
            pixel: Mlp::zero_out(&mut s, "head.pixel", 2 * f + 3, f, PARAM_OFFSETS, &mut rng),
            mask: Linear::zeros(&mut s, "head.mask", f, 2 * k),
        };
        let bias = s.value_mut(heads.mask.b);
        for kk in 0..k {
            bias.data[2 * kk] = 0.5 * config.mask_logit_bias;
            bias.data[2 * kk + 1] = -0.5 * config.mask_logit_bias;
        }
        Ok(DensifierModel {
            config,
            store: s,
            mv,
            modulation,
            pyramid,
            embed_roi,
            embed_pixel,
            input,
            enc_proj,
            enc,
            dec_proj,
            dec,
            cross,
            heads,
        })
    }

    /// Image stack, pyramid and projected features of every context view.
    fn image_features(&self, g: &mut Graph, input: &DensifierInput, centers: &[Vector3<f64>]) -> (Vec<Var>, Vec<[PyramidLevel; 3]>) {
        let st = &self.store;
        let mut proj = Vec::new();
        let mut pyramids = Vec::new();
        for v in &input.views {
            let (h, w) = (v.camera.height, v.camera.width);
            let img = g.constant(v.image.clone());
            let mv = self.mv.forward(g, st, img, h, w);
            let recon_cols = if self.config.use_recon_features {
                v.recon.clone()
            } else {
                let mut t = Tensor::zeros(v.recon.rows, BG_CHANNELS);
                for p in 0..t.rows {
                    t.row_mut(p).copy_from_slice(&v.recon.row(p)[2 * RECON_CHANNELS..]);
                }
                t
            };
            let recon = g.constant(recon_cols);
            let stack = g.concat_cols(&[img, mv, recon]);
            proj.push(sample_projection_features(g, stack, &v.camera, centers));
            let rays = g.constant(v.rays.clone());
            let modulated = self.modulation.forward(g, st, stack, rays);
            pyramids.push(self.pyramid.forward(g, st, modulated, &v.camera));
        }
        (proj, pyramids)
    }

    fn cross_levels(pyramids: &[[PyramidLevel; 3]], idx: usize) -> Vec<PyramidLevel> {
        pyramids.iter().map(|p| p[idx].clone()).collect()
    }

    /// Per-token latents `f_j` in input order.
    pub fn encode(&self, g: &mut Graph, input: &DensifierInput) -> Result<(Var, Vec<[PyramidLevel; 3]>)> {
        let n = input.len();
        if n == 0 {
            return Err(Error::Config("nothing to densify".into()));
        }
        if input.views.len() != self.config.num_views {
            return Err(Error::Config(format!(
                "model expects {} context views, got {}",
                self.config.num_views,
                input.views.len()
            )));
        }
        let st = &self.store;
        let centers = input.centers();
        let (proj, pyramids) = self.image_features(g, input, &centers);
        let emb_r = g.param(st, self.embed_roi);
        let emb_p = g.param(st, self.embed_pixel);
        let table = g.concat_rows(&[emb_r, emb_p]);
        let src: Vec<usize> = (0..n).map(|j| input.is_pixel(j) as usize).collect();
        let emb = g.gather_rows(table, Rc::new(src));
        let fixed = g.constant(input.gaussian_fixed.clone());
        let mut parts = vec![fixed];
        parts.extend(proj);
        parts.push(emb);
        let feats = g.concat_cols(&parts);
        let x = self.input.forward(g, st, feats);

        let perm = serialize_order(&centers);
        let inv = invert_permutation(&perm);
        let sorted: Vec<_> = perm.iter().map(|&i| centers[i]).collect();
        let levels_c = build_levels(sorted, 5);
        let levels: Vec<Level> = levels_c
            .into_iter()
            .map(|c| {
                let m = c.len();
                Level {
                    starts: Rc::new((0..m).step_by(2).collect()),
                    parent: Rc::new((0..m).map(|i| i / 2).collect()),
                    centers: c,
                }
            })
            .collect();

        let mut x = g.gather_rows(x, Rc::new(perm));
        let cfg = &self.config;
        let mut skips = Vec::new();
        for l in 0..5 {
            if l > 0 {
                x = g.segment_mean(x, levels[l - 1].starts.clone());
                x = self.enc_proj[l - 1].forward(g, st, x);
            }
            x = self.enc[l].forward(g, st, x, cfg.window);
            skips.push(x);
        }
        for b in 0..4 {
            let lvl = 3 - b;
            let up = g.gather_rows(x, levels[lvl].parent.clone());
            let cat = g.concat_cols(&[up, skips[lvl]]);
            x = self.dec_proj[b].forward(g, st, cat);
            x = self.dec[b].forward(g, st, x, cfg.window);
            if b >= 1 && cfg.use_cross_attention {
                let pts = g.constant(points_tensor(&levels[lvl].centers));
                x = self.cross[b - 1].forward(g, st, x, pts, &Self::cross_levels(&pyramids, 3 - b));
            }
        }
        Ok((g.gather_rows(x, Rc::new(inv)), pyramids))
    }

    /// Predicts the densified parameters, and existence masks when enabled.
    pub fn forward(&self, g: &mut Graph, input: &DensifierInput, mode: Mode) -> Result<DensifierOutput> {
        let (f, pyramids) = self.encode(g, input)?;
        let st = &self.store;
        let n = input.len();
        let k = self.config.k;
        let rows = n * k;
        let rep: Rc<Vec<usize>> = Rc::new((0..rows).map(|r| r / k).collect());
        let frep = g.gather_rows(f, rep);

        let mut defaults = Tensor::zeros(rows, PARAM_DIMS);
        for (j, gs) in input.tokens.gaussians().iter().enumerate() {
            let d = default_post_densification(gs, k).to_params();
            for kk in 0..k {
                defaults.row_mut(j * k + kk).copy_from_slice(&d);
            }
        }
        let mut base_mu = Tensor::zeros(rows, 3);
        for r in 0..rows {
            base_mu.row_mut(r).copy_from_slice(&defaults.row(r)[..3]);
        }

        let dmu = self.heads.mu.forward(g, st, f);
        let dmu = g.reshape(dmu, rows, 3);
        let attended = if self.config.use_cross_attention {
            let base = g.constant(base_mu);
            let pts = g.add(base, dmu);
            self.heads.stage2.forward(g, st, frep, pts, &Self::cross_levels(&pyramids, 0))
        } else {
            g.constant(Tensor::zeros(rows, self.config.latent_width()))
        };
        let head_in = g.concat_cols(&[frep, dmu, attended]);
        let r_rows = input.num_roi * k;
        let mut parts = Vec::new();
        if r_rows > 0 {
            let x = g.slice_rows(head_in, 0, r_rows);
            parts.push(self.heads.roi.forward(g, st, x));
        }
        if rows > r_rows {
            let x = g.slice_rows(head_in, r_rows, rows - r_rows);
            parts.push(self.heads.pixel.forward(g, st, x));
        }
        let rest = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let offsets = g.concat_cols(&[dmu, rest]);
        let base = g.constant(defaults);
        let params = g.add(base, offsets);

        let (existence, keep) = if self.config.use_existence_masks {
            let logits = self.heads.mask.forward(g, st, f);
            let logits = g.reshape(logits, rows, 2);
            let yes = g.slice_cols(logits, 0, 1);
            let no = g.slice_cols(logits, 1, 1);
            let diff = g.sub(yes, no);
            match mode {
                Mode::Train { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let noise = Tensor::from_vec(rows, 1, (0..rows).map(|_| gumbel_difference(&mut rng)).collect());
                    let noise = g.constant(noise);
                    let z = g.add(diff, noise);
                    let z = g.scale(z, 1.0 / self.config.temperature);
                    let soft = g.sigmoid(z);
                    let hard: Vec<bool> = g.value(z).data.iter().map(|v| *v > 0.0).collect();
                    (Some(straight_through(g, soft, &hard)), Some(hard))
                }
                Mode::Eval => {
                    let hard: Vec<bool> = g.value(diff).data.iter().map(|v| *v > 0.0).collect();
                    let t = Tensor::from_vec(rows, 1, hard.iter().map(|h| *h as u8 as f64).collect());
                    (Some(g.constant(t)), Some(hard))
                }
            }
        } else {
            (None, None)
        };
        Ok(DensifierOutput {
            params,
            existence,
            keep,
            num_roi: input.num_roi,
            k,
        })
    }

    /// Densified Gaussians as a set tagged [`SourceTag::Densified`], with
    /// normalized rotations and dropped Gaussians removed.
    pub fn densified_set(&self, g: &Graph, out: &DensifierOutput) -> Result<GaussianSet> {
        let p = g.value(out.params);
        let mut set = GaussianSet::new();
        for r in 0..p.rows {
            if let Some(keep) = &out.keep {
                if !keep[r] {
                    continue;
                }
            }
            let mut gs = Gaussian3D::from_params(p.row(r));
            gs.rotation = quat_normalize(gs.rotation);
            set.push(gs, SourceTag::Densified);
        }
        set.validate()?;
        Ok(set)
    }

    /// Runs the model in evaluation mode and returns the densified set.
    pub fn densify(&self, input: &DensifierInput) -> Result<GaussianSet> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, Mode::Eval)?;
        self.densified_set(&g, &out)
    }

    /// Writes `model.json` (config) and `model.ckpt` (weights) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&self.config)?)?;
        let tmp = dir.join("model.ckpt.tmp");
        self.store.write(std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
        std::fs::rename(tmp, dir.join("model.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ModelConfig = serde_json::from_slice(&std::fs::read(dir.join("model.json"))?)?;
        let mut m = DensifierModel::new(config)?;
        m.store.read_into(std::io::BufReader::new(std::fs::File::open(dir.join("model.ckpt"))?))?;
        Ok(m)
    }

    /// Loads weights from `dir`, requiring its config to equal `expected`.
    pub fn load_expecting(dir: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let m = DensifierModel::load(dir)?;
        if &m.config != expected {
            return Err(Error::Checkpoint("checkpoint config differs from the requested model config".into()));
        }
        Ok(m)
    }

    pub fn mask_logits_bias(&self) -> f64 {
        let b = self.store.value(self.heads.mask.b);
        b.data[0] - b.data[1]
    }

    #[doc(hidden)]
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// `G^Y − G^N` for two independent standard Gumbel draws.
pub fn gumbel_difference(rng: &mut impl Rng) -> f64 {
    gumbel(rng) - gumbel(rng)
}

pub(crate) fn points_tensor(c: &[Vector3<f64>]) -> Tensor {
    Tensor::from_vec(c.len(), 3, c.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}

/// Probability that Gumbel-softmax sampling keeps a Gaussian with logits `(m^Y, m^N)` at temperature 1.
pub fn keep_probability(yes: f64, no: f64) -> f64 {
    logistic(yes - no)
}
