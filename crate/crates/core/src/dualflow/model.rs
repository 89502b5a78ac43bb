use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorad::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

use super::config::{Ablation, ModelConfig};
use super::layers::{frame_positions, grid_positions, modulated_norm, time_features, Attention, Builder, DitBlock, Linear, Norm, WeightInit};

/// Patch embedding, time and condition embedders, transformer blocks and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub patch: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub cond_table: ParamId,
    /// `(block index, block)`; a distributed copy holds only some indices.
    pub blocks: Vec<(usize, DitBlock)>,
    pub final_modulation: Linear,
    pub head: Linear,
}

/// Per-branch embeddings computed once per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    pub x: Var,
    pub cond: Var,
    pub c: Var,
}

impl Branch {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        cfg: &ModelConfig,
        channels: usize,
        block_indices: &[usize],
    ) -> Result<Self> {
        let d = cfg.width_d;
        let patch = b.linear("patch", channels, d, true, WeightInit::Scaled(1.0))?;
        let time_in = b.linear("time_in", 2 * cfg.time_freqs, d, true, WeightInit::Scaled(1.0))?;
        let time_out = b.linear("time_out", d, d, true, WeightInit::Scaled(1.0))?;
        let table = Tensor::randn(&[cfg.vocab, d], 1.0, b.rng);
        let cond_table = b.tensor("cond_table", table)?;
        let mut blocks = Vec::with_capacity(block_indices.len());
        for &i in block_indices {
            blocks.push((i, DitBlock::build(b, &format!("block{i}"), d, cfg.heads, cfg.ffn_mult)?));
        }
        let final_modulation = b.linear("final_modulation", d, 2 * d, true, WeightInit::Zeros)?;
        let head = b.linear("head", d, channels, true, WeightInit::Zeros)?;
        Ok(Self {
            patch,
            time_in,
            time_out,
            cond_table,
            blocks,
            final_modulation,
            head,
        })
    }

    pub fn block(&self, index: usize) -> Option<&DitBlock> {
        self.blocks.iter().find(|(i, _)| *i == index).map(|(_, b)| b)
    }

    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        cfg: &ModelConfig,
        positions: Var,
        x_t: Var,
        ts: &[f64],
        cond: &[Vec<usize>],
    ) -> Result<Embedded> {
        let x = self.patch.apply(tape, p, x_t)?;
        let x = tape.add(x, positions)?;
        let tf = tape.constant(time_features(ts, cfg.time_freqs));
        let c = self.time_in.apply(tape, p, tf)?;
        let c = tape.silu(c)?;
        let c = self.time_out.apply(tape, p, c)?;
        let c = tape.silu(c)?;
        let nc = cond.first().map_or(0, Vec::len);
        if nc == 0 || cond.iter().any(|c| c.len() != nc) || cond.len() != ts.len() {
            return Err(Error::invalid("every sample needs the same non-zero number of condition tokens"));
        }
        let ids: Vec<usize> = cond.iter().flatten().copied().collect();
        let e = tape.embedding(p[self.cond_table], &ids)?;
        let cond = tape.reshape(e, &[ts.len(), nc, cfg.width_d])?;
        Ok(Embedded { x, cond, c })
    }

    /// Clean-latent offset from the anchor, from the final hidden state.
    pub fn head<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var, c: Var) -> Result<Var> {
        let (bsz, d) = (tape.shape(x)[0], tape.shape(x)[2]);
        let m = self.final_modulation.apply(tape, p, c)?;
        let m = tape.reshape(m, &[bsz, 1, 2 * d])?;
        let shift = tape.slice(m, 2, 0, d)?;
        let scale = tape.slice(m, 2, d, d)?;
        let h = modulated_norm(tape, x, shift, scale)?;
        self.head.apply(tape, p, h)
    }
}

/// One layer of the pose module: self-attention over frames, grouped
/// cross-attention to the fused latent, feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLayer {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross_norm: Norm,
    pub cross_attn: Attention,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Maps the initial pose plus fused latent features to per-frame poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModule {
    pub embed: Linear,
    pub interface: Linear,
    pub interface_norm: Norm,
    pub layers: Vec<PoseLayer>,
    pub out_norm: Norm,
    pub out: Linear,
}

impl PoseModule {
    pub fn build<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> Result<Self> {
        let (cq, d) = (cfg.query_dim, cfg.width_d);
        let embed = b.linear("embed", cfg.pose_dim(), cq, true, WeightInit::Scaled(1.0))?;
        let interface = b.linear("interface", d, cq, true, WeightInit::Scaled(1.0))?;
        let interface_norm = b.layer_norm("interface_norm", cq)?;
        let mut layers = Vec::with_capacity(cfg.query_layers);
        for i in 0..cfg.query_layers {
            let n = format!("layer{i}");
            layers.push(PoseLayer {
                self_norm: b.layer_norm(&format!("{n}.self_norm"), cq)?,
                self_attn: b.attention(&format!("{n}.self_attn"), cq, cq, cfg.query_heads)?,
                cross_norm: b.layer_norm(&format!("{n}.cross_norm"), cq)?,
                cross_attn: b.attention(&format!("{n}.cross_attn"), cq, cq, cfg.query_heads)?,
                ffn_norm: b.layer_norm(&format!("{n}.ffn_norm"), cq)?,
                ffn_in: b.linear(&format!("{n}.ffn_in"), cq, cfg.ffn_mult * cq, true, WeightInit::Scaled(1.0))?,
                ffn_out: b.linear(&format!("{n}.ffn_out"), cfg.ffn_mult * cq, cq, true, WeightInit::Scaled(1.0))?,
            });
        }
        let out_norm = b.layer_norm("out_norm", cq)?;
        let out = b.linear("out", cq, cfg.pose_dim(), true, WeightInit::Zeros)?;
        Ok(Self {
            embed,
            interface,
            interface_norm,
            layers,
            out_norm,
            out,
        })
    }

    /// Initial query: the embedded `m0` repeated for every frame, `[B, F, Cq]`.
    pub fn init_query<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, m0: Var, frames: usize) -> Result<Var> {
        let bsz = tape.shape(m0)[0];
        let e = self.embed.apply(tape, p, m0)?;
        let cq = tape.shape(e)[1];
        let e = tape.reshape(e, &[bsz, 1, cq])?;
        let z = tape.constant(Tensor::zeros(&[bsz, frames, cq]));
        tape.add(e, z)
    }

    /// Pose predictions for frames `1..F`, `[B, F-1, J*3]`.
    /// `fused: [B, N, d]`, `m0: [B, J*3]`, `frame_pos: [F, Cq]` constant.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, cfg: &ModelConfig, fused: Var, m0: Var, frame_pos: Var) -> Result<Var> {
        let (tl, h, w) = cfg.grid();
        let hw = h * w;
        let fs = tape.shape(fused).to_vec();
        if fs.len() != 3 || fs[1] != tl * hw {
            return Err(Error::shape(
                "pose_module",
                format!("fused features {fs:?} do not hold {} temporal slices of {hw} tokens", cfg.groups() + 1),
            ));
        }
        let bsz = fs[0];
        let (f, g, cq) = (cfg.frames, cfg.groups(), cfg.query_dim);
        let q = self.init_query(tape, p, m0, f)?;
        let mut q = tape.add(q, frame_pos)?;

        let kv = self.interface.apply(tape, p, fused)?;
        let kv = self.interface_norm.apply(tape, p, kv)?;
        let kv = tape.reshape(kv, &[bsz, tl, hw, cq])?;
        let first = tape.slice(kv, 1, 0, 1)?;
        let spread = tape.constant(Tensor::zeros(&[bsz, g, hw, cq]));
        let first = tape.add(first, spread)?;
        let aligned = tape.slice(kv, 1, 1, g)?;
        let row_spread = tape.constant(Tensor::zeros(&[bsz, g, 1, cq]));
        let pad = tape.constant(Tensor::zeros(&[bsz, 1, cq]));

        for layer in &self.layers {
            let hn = layer.self_norm.apply(tape, p, q)?;
            let a = layer.self_attn.apply(tape, p, hn, hn)?;
            q = tape.add(q, a)?;

            let hn = layer.cross_norm.apply(tape, p, q)?;
            let rows = tape.slice(hn, 1, 1, f - 1)?;
            let grouped = tape.reshape(rows, &[bsz, g, 4, cq])?;
            let row0 = tape.slice(hn, 1, 0, 1)?;
            let row0 = tape.reshape(row0, &[bsz, 1, 1, cq])?;
            let row0 = tape.add(row0, row_spread)?;
            let ctx = tape.concat(&[row0, first, aligned], 2)?;
            let a = layer.cross_attn.apply(tape, p, grouped, ctx)?;
            let a = tape.reshape(a, &[bsz, f - 1, cq])?;
            let a = tape.concat(&[pad, a], 1)?;
            q = tape.add(q, a)?;

            let hn = layer.ffn_norm.apply(tape, p, q)?;
            let ff = layer.ffn_in.apply(tape, p, hn)?;
            let ff = tape.silu(ff)?;
            let ff = layer.ffn_out.apply(tape, p, ff)?;
            q = tape.add(q, ff)?;
        }
        let rows = tape.slice(q, 1, 1, f - 1)?;
        let rows = self.out_norm.apply(tape, p, rows)?;
        let delta = self.out.apply(tape, p, rows)?;
        let base = tape.reshape(m0, &[bsz, 1, cfg.pose_dim()])?;
        tape.add(delta, base)
    }
}

/// The two zero-initialized linears joining the branches after one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fusion {
    /// Video features into the fused tensor.
    pub into_fused: Linear,
    /// Motion features into the video stream.
    pub into_video: Linear,
}

/// `(fused, video_out) = (motion + into_fused(video), video + into_video(motion))`.
pub fn fuse_features<T: Scalar>(tape: &mut Tape<T>, p: &Bindings, fusion: &Fusion, x_motion: Var, x_video: Var) -> Result<(Var, Var)> {
    let a = fusion.into_fused.apply(tape, p, x_video)?;
    let fused = tape.add(x_motion, a)?;
    let b = fusion.into_video.apply(tape, p, x_motion)?;
    let video = tape.add(x_video, b)?;
    Ok((fused, video))
}

/// A batch of noised inputs in token layout.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a, T> {
    /// `[B, N, C]`.
    pub x_video: &'a Tensor<T>,
    /// `[B, N, C]`, required by every variant with a motion stream.
    pub x_motion: Option<&'a Tensor<T>>,
    pub ts: &'a [f64],
    pub cond: &'a [Vec<usize>],
    /// `[B, J*3]`.
    pub m0: &'a Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub video_v: Var,
    pub motion_v: Option<Var>,
    /// `(block index, [B, F-1, J*3])` in ascending block order; the last is the final prediction.
    pub poses: Vec<(usize, Var)>,
}

/// Both branches, fusion linears, pose module and fixed positional codes.
#[derive(Debug, Clone)]
pub struct DualModel<T> {
    pub config: ModelConfig,
    pub ablation: Ablation,
    /// False for the single-branch video model.
    pub dual: bool,
    pub params: ParamStore<T>,
    pub video: Branch,
    pub motion: Option<Branch>,
    pub fusion: Vec<(usize, Fusion)>,
    pub pose: Option<PoseModule>,
    positions: Tensor<T>,
    frame_pos: Tensor<T>,
}

pub const VIDEO_PREFIX: &str = "video.";
pub const MOTION_PREFIX: &str = "motion.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const POSE_PREFIX: &str = "pose.";

impl<T: Scalar> DualModel<T> {
    /// The standalone video model that is pretrained first.
    pub fn video_only<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let all: Vec<usize> = (0..config.blocks).collect();
        let video = Branch::build(&mut Builder::new(&mut params, rng, VIDEO_PREFIX), &config, config.channels(), &all)?;
        Ok(Self::assemble(config, Ablation::NoMotion, false, params, video, None, Vec::new(), None))
    }

    /// Builds the variant for `ablation` around pretrained video weights.
    /// The motion branch starts as a copy of the matching video parameters.
    pub fn from_video<R: Rng + ?Sized>(config: ModelConfig, ablation: Ablation, video: &ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels();
        let all: Vec<usize> = (0..config.blocks).collect();
        let mut params = ParamStore::new();
        let joint = ablation == Ablation::JointLatent;
        let vb = Branch::build(
            &mut Builder::new(&mut params, rng, VIDEO_PREFIX),
            &config,
            if joint { 2 * c } else { c },
            &all,
        )?;
        for (name, value) in video.iter().map(|(_, n, v)| (n.to_string(), v.clone())) {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("pretrained parameter `{name}` has no counterpart")))?;
            let value = if joint && name == format!("{VIDEO_PREFIX}patch.w") {
                Tensor::cat(&[&value, &Tensor::zeros(value.shape())], 0)?
            } else if joint && (name == format!("{VIDEO_PREFIX}head.w") || name == format!("{VIDEO_PREFIX}head.b")) {
                let axis = value.rank() - 1;
                Tensor::cat(&[&value, &value], axis)?
            } else {
                value
            };
            if params.get(id).shape() != value.shape() {
                return Err(Error::shape(
                    "from_video",
                    format!("`{name}`: pretrained {:?}, expected {:?}", value.shape(), params.get(id).shape()),
                ));
            }
            *params.get_mut(id) = value;
        }

        let motion_blocks: Vec<usize> = match ablation {
            Ablation::DistributedCopy => all.iter().copied().filter(|i| i % 2 == 1).collect(),
            _ => all.clone(),
        };
        let motion = if ablation.has_separate_motion_branch() {
            let mb = Branch::build(&mut Builder::new(&mut params, rng, MOTION_PREFIX), &config, c, &motion_blocks)?;
            let names: Vec<String> = params
                .names()
                .iter()
                .filter(|n| n.starts_with(MOTION_PREFIX))
                .cloned()
                .collect();
            for name in names {
                let src = format!("{VIDEO_PREFIX}{}", &name[MOTION_PREFIX.len()..]);
                let v = params
                    .by_name(&src)
                    .ok_or_else(|| Error::Format(format!("no video parameter `{src}` to copy")))?
                    .clone();
                let id = params.id(&name).expect("listed");
                *params.get_mut(id) = v;
            }
            Some(mb)
        } else {
            None
        };

        let mut fusion = Vec::new();
        if motion.is_some() {
            let d = config.width_d;
            let mut b = Builder::new(&mut params, rng, FUSION_PREFIX);
            for &i in &motion_blocks {
                fusion.push((
                    i,
                    Fusion {
                        into_fused: b.linear(&format!("{i}.into_fused"), d, d, true, WeightInit::Zeros)?,
                        into_video: b.linear(&format!("{i}.into_video"), d, d, true, WeightInit::Zeros)?,
                    },
                ));
            }
        }
        let pose = if ablation.has_motion() {
            Some(PoseModule::build(&mut Builder::new(&mut params, rng, POSE_PREFIX), &config)?)
        } else {
            None
        };
        Ok(Self::assemble(config, ablation, true, params, vb, motion, fusion, pose))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: ModelConfig,
        ablation: Ablation,
        dual: bool,
        params: ParamStore<T>,
        video: Branch,
        motion: Option<Branch>,
        fusion: Vec<(usize, Fusion)>,
        pose: Option<PoseModule>,
    ) -> Self {
        let (t, h, w) = config.grid();
        let positions = grid_positions(t, h, w, config.width_d);
        let frame_pos = frame_positions(config.frames, config.query_dim);
        Self {
            config,
            ablation,
            dual,
            params,
            video,
            motion,
            fusion,
            pose,
            positions,
            frame_pos,
        }
    }

    /// Parameters of the video branch only.
    pub fn video_params(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (_, n, v) in self.params.iter() {
            if n.starts_with(VIDEO_PREFIX) {
                out.add(n, v.clone()).expect("unique names");
            }
        }
        out
    }

    /// Block indices whose fused features may feed the pose module.
    pub fn selectable_layers(&self) -> Vec<usize> {
        match self.ablation {
            Ablation::JointLatent => (0..self.config.blocks).collect(),
            _ => self.fusion.iter().map(|(i, _)| *i).collect(),
        }
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    /// The head predicts a correction to a fixed estimate of the clean latent:
    /// the conditioning slice copied forward in time, pulled toward `x_t` as
    /// the noise fades. This turns it into a velocity.
    fn velocity(&self, tape: &mut Tape<T>, delta: Var, x_t: Var, ts: &[f64]) -> Result<Var> {
        let prior = tape.constant(clean_prior(tape.value(x_t), ts, self.config.tokens_per_slice(), self.config.anchor_var)?);
        let x0_hat = tape.add(delta, prior)?;
        let inv: Vec<T> = ts
            .iter()
            .map(|t| T::lit(1.0 / (1.0 - t).max(self.config.min_one_minus_t)))
            .collect();
        let inv = tape.constant(Tensor::new(vec![ts.len(), 1, 1], inv)?);
        let diff = tape.sub(x0_hat, x_t)?;
        tape.mul(diff, inv)
    }

    fn check_input(&self, x: &Tensor<T>, ts: &[f64], cond: &[Vec<usize>], channels: usize) -> Result<()> {
        let want = [ts.len(), self.config.tokens(), channels];
        if x.shape() != want {
            return Err(Error::shape("forward", format!("input {:?}, expected {want:?}", x.shape())));
        }
        if cond.len() != ts.len() {
            return Err(Error::shape("forward", "one condition list per sample"));
        }
        if let Some(bad) = cond.iter().flatten().find(|&&c| c >= self.config.vocab) {
            return Err(Error::invalid(format!("condition token {bad} outside vocabulary")));
        }
        if ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("flow time outside [0, 1]"));
        }
        Ok(())
    }

    /// One branch on its own: embed, every block it holds, head, velocity.
    pub fn branch_forward(&self, tape: &mut Tape<T>, p: &Bindings, branch: &Branch, x: &Tensor<T>, ts: &[f64], cond: &[Vec<usize>]) -> Result<Var> {
        self.check_input(x, ts, cond, x.shape().get(2).copied().unwrap_or(0))?;
        let pos = tape.constant(self.positions.clone());
        let x_t = tape.constant(x.clone());
        let e = branch.embed(tape, p, &self.config, pos, x_t, ts, cond)?;
        let mut h = e.x;
        for (_, block) in &branch.blocks {
            h = block.apply(tape, p, h, e.cond, e.c)?;
        }
        let x0 = branch.head(tape, p, h, e.c)?;
        self.velocity(tape, x0, x_t, ts)
    }

    /// The video branch alone.
    pub fn video_forward(&self, tape: &mut Tape<T>, p: &Bindings, x: &Tensor<T>, ts: &[f64], cond: &[Vec<usize>]) -> Result<Var> {
        self.branch_forward(tape, p, &self.video, x, ts, cond)
    }

    /// The motion branch alone (no fusion).
    pub fn motion_forward(&self, tape: &mut Tape<T>, p: &Bindings, x: &Tensor<T>, ts: &[f64], cond: &[Vec<usize>]) -> Result<Var> {
        let branch = self
            .motion
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("variant `{}` has no motion branch", self.ablation.name())))?;
        self.branch_forward(tape, p, branch, x, ts, cond)
    }

    /// Full forward pass. `layers` picks the block indices whose fused
    /// features feed the pose module; it must include the last selectable
    /// one, or be empty to skip pose prediction.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bindings, input: ForwardInput<'_, T>, layers: &[usize]) -> Result<ForwardOutput> {
        let c = self.config.channels();
        let ForwardInput { x_video, x_motion, ts, cond, m0 } = input;
        if !self.dual || self.ablation == Ablation::NoMotion {
            let v = self.video_forward(tape, p, x_video, ts, cond)?;
            return Ok(ForwardOutput {
                video_v: v,
                motion_v: None,
                poses: Vec::new(),
            });
        }
        let x_motion = x_motion.ok_or_else(|| Error::invalid("motion input required"))?;
        self.check_input(x_video, ts, cond, c)?;
        self.check_input(x_motion, ts, cond, c)?;
        if m0.shape() != [ts.len(), self.config.pose_dim()] {
            return Err(Error::shape("forward", format!("m0 {:?}", m0.shape())));
        }
        let selectable = self.selectable_layers();
        let last = *selectable.last().expect("dual model has selectable layers");
        if !layers.is_empty() && !layers.contains(&last) || layers.iter().any(|l| !selectable.contains(l)) {
            return Err(Error::invalid(format!(
                "layer selection {layers:?} must be drawn from {selectable:?} and include {last}"
            )));
        }
        let pose = self.pose.as_ref().expect("motion variants have a pose module");
        let frame_pos = tape.constant(self.frame_pos.clone());
        let m0v = tape.constant(m0.clone());
        let pos = tape.constant(self.positions.clone());
        let xv = tape.constant(x_video.clone());
        let xm = tape.constant(x_motion.clone());
        let mut poses = Vec::new();

        if self.ablation == Ablation::JointLatent {
            let x_t = tape.concat(&[xv, xm], 2)?;
            let e = self.video.embed(tape, p, &self.config, pos, x_t, ts, cond)?;
            let mut h = e.x;
            for (i, block) in &self.video.blocks {
                h = block.apply(tape, p, h, e.cond, e.c)?;
                if layers.contains(i) {
                    poses.push((*i, pose.apply(tape, p, &self.config, h, m0v, frame_pos)?));
                }
            }
            let x0 = self.video.head(tape, p, h, e.c)?;
            let v = self.velocity(tape, x0, x_t, ts)?;
            let video_v = tape.slice(v, 2, 0, c)?;
            let motion_v = tape.slice(v, 2, c, c)?;
            return Ok(ForwardOutput {
                video_v,
                motion_v: Some(motion_v),
                poses,
            });
        }

        let motion = self.motion.as_ref().expect("separate motion branch");
        let ev = self.video.embed(tape, p, &self.config, pos, xv, ts, cond)?;
        let em = motion.embed(tape, p, &self.config, pos, xm, ts, cond)?;
        let (mut hv, mut hm) = (ev.x, em.x);
        for (i, block) in &self.video.blocks {
            hv = block.apply(tape, p, hv, ev.cond, ev.c)?;
            let Some(mblock) = motion.block(*i) else { continue };
            hm = mblock.apply(tape, p, hm, em.cond, em.c)?;
            let fusion = &self.fusion.iter().find(|(j, _)| j == i).expect("fusion per motion block").1;
            let (fused, video_out) = fuse_features(tape, p, fusion, hm, hv)?;
            hv = video_out;
            if layers.contains(i) {
                poses.push((*i, pose.apply(tape, p, &self.config, fused, m0v, frame_pos)?));
            }
            if self.ablation == Ablation::PassFused {
                hm = fused;
            }
        }
        let x0v = self.video.head(tape, p, hv, ev.c)?;
        let video_v = self.velocity(tape, x0v, xv, ts)?;
        let x0m = motion.head(tape, p, hm, em.c)?;
        let motion_v = self.velocity(tape, x0m, xm, ts)?;
        Ok(ForwardOutput {
            video_v,
            motion_v: Some(motion_v),
            poses,
        })
    }
}

/// `[B, N, C]` tokens with every temporal slice replaced by slice 0.
pub fn first_slice_anchor<T: Scalar>(x: &Tensor<T>, slice: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || slice == 0 || s[1] % slice != 0 {
        return Err(Error::shape("first_slice_anchor", format!("{s:?} with {slice} tokens per slice")));
    }
    let (n, c) = (s[1], s[2]);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(n * c) {
        let first = &row[..slice * c];
        for _ in 0..n / slice {
            out.extend_from_slice(first);
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Weight of `x_t` in the clean-latent prior: the posterior-mean gain for
/// `x0 = anchor + r` with `r ~ N(0, var)` observed through `x_t`.
pub fn prior_gain(t: f64, var: f64) -> f64 {
    let denom = (1.0 - t).powi(2) + t * t * var;
    if denom == 0.0 {
        return 0.0;
    }
    t * var / denom
}

/// `a + c(t) (x_t - t a)` per sample, where `a` is the first-slice anchor of `x_t`.
pub fn clean_prior<T: Scalar>(x_t: &Tensor<T>, ts: &[f64], slice: usize, var: f64) -> Result<Tensor<T>> {
    let mut prior = first_slice_anchor(x_t, slice)?;
    let row = x_t.len() / ts.len().max(1);
    if ts.len() != x_t.shape()[0] {
        return Err(Error::shape("clean_prior", "one flow time per sample"));
    }
    for ((p, x), &t) in prior.data_mut().chunks_exact_mut(row).zip(x_t.data().chunks_exact(row)).zip(ts) {
        let c = prior_gain(t, var);
        if c == 0.0 {
            continue;
        }
        let (keep, gain) = (T::lit(1.0 - c * t), T::lit(c));
        for (a, &x) in p.iter_mut().zip(x) {
            *a = keep * *a + gain * x;
        }
    }
    Ok(prior)
}

/// `q: [F, C]` to `[G, 4, C]` holding rows `1..F`.
pub fn regroup_queries<T: Scalar>(q: &Tensor<T>) -> Result<Tensor<T>> {
    let s = q.shape();
    if s.len() != 2 || s[0] < 5 || s[0] % 4 != 1 {
        return Err(Error::invalid(format!("query rows {:?} must be 1 mod 4 and at least 5", s)));
    }
    let g = (s[0] - 1) / 4;
    q.narrow(0, 1, s[0] - 1)?.reshape(&[g, 4, s[1]])
}
