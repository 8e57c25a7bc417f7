//! Hierarchical hybrid encoder/decoder for masked volume reconstruction.
//!
//! Encoder: `n - 1` masked convolutional stages, each followed by 2× max
//! pooling, then a pointwise patch embedding at the coarsest grid. Visible
//! coarse voxels are serialized, given a learned position embedding and run
//! through a stack of Mamba blocks.
//!
//! Decoder: masked tokens are filled (TOKI or a learnable token), the full
//! sequence is put back on the coarse grid and projected, then every finer
//! stage concatenates its filled skip feature with the upsampled coarser
//! decoder output. A pointwise head maps to one channel.

mod config;

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{MaskFill, ModelConfig, MIN_DECODER_WIDTH};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mamba::{mamba_block, MambaBlockParams};
use crate::masking::{apply_mask, Grid3, Mask3, MaskPyramid, SequenceLayout, SparseFeature, TokenSequence};
use crate::params::{fan_in_uniform, Bindings, Constraint, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Keeps TOKI's decay parameter strictly negative.
pub const A_PRIME_MARGIN: f64 = 1e-3;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct CnnStage {
    conv1: Conv,
    gamma: ParamId,
    beta: ParamId,
    conv2: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    fill: ParamId,
    proj: Conv,
    up1: Conv,
    up2: Conv,
    skip1: Conv,
    skip2: Conv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum FillParam {
    Toki(ParamId),
    Learnable(ParamId),
}

/// Tape handles produced by [`HybridModel::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[K, model_dim]`, visible tokens in scan order after the Mamba stack.
    pub tokens: Var,
    /// Sparse features `S_1..S_{n-1}`, finest first, `[C_i, z, y, x]`.
    pub skips: Vec<Var>,
    pub layout: SequenceLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    cnn: Vec<CnnStage>,
    patch: (ParamId, ParamId),
    pos_embed: ParamId,
    blocks: Vec<MambaBlockParams>,
    fill: FillParam,
    phi: (ParamId, ParamId),
    decoder: Vec<DecoderStage>,
    head: Conv,
}

fn conv<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize) -> Conv {
    let w = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[cout, cin, k, k, k], cin * k * k * k));
    let b = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
    Conv { w, b }
}

impl<T: Real> HybridModel<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let n = config.n_stages;
        let d = config.model_dim;
        let mut cnn = Vec::with_capacity(n - 1);
        let mut cin = 1;
        for i in 0..n - 1 {
            let c = config.encoder_width(i);
            let p = format!("encoder.stage{}", i + 1);
            let conv1 = conv(&mut s, &mut rng, &format!("{p}.conv1"), c, cin, 3);
            let gamma = s.add(format!("{p}.norm.gamma"), Tensor::full([c], T::one()));
            let beta = s.add(format!("{p}.norm.beta"), Tensor::zeros([c]));
            let conv2 = conv(&mut s, &mut rng, &format!("{p}.conv2"), c, c, 3);
            cnn.push(CnnStage { conv1, gamma, beta, conv2 });
            cin = c;
        }
        let patch = (
            s.add("encoder.patch_embed.weight", fan_in_uniform(&mut rng, &[cin, d], cin)),
            s.add("encoder.patch_embed.bias", Tensor::zeros([d])),
        );
        let coarse = config.coarse_grid().len();
        let pos_embed = s.add("encoder.pos_embed", crate::params::uniform(&mut rng, &[coarse, d], 0.02));
        let blocks = (0..config.depth)
            .map(|j| MambaBlockParams::init(&mut s, &format!("encoder.mamba{}", j + 1), config.mamba(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fill = match config.mask_fill {
            MaskFill::Toki => FillParam::Toki(s.add_constrained(
                "decoder.toki.a_prime",
                Tensor::full([d], T::lit(config.toki_init)),
                Some(Constraint::Negative { margin: A_PRIME_MARGIN }),
            )),
            MaskFill::Learnable => FillParam::Learnable(s.add("decoder.mask_token", crate::params::uniform(&mut rng, &[d], 0.02))),
        };
        let wn = config.decoder_width(n - 1);
        let phi = (
            s.add("decoder.phi.weight", fan_in_uniform(&mut rng, &[d, wn], d)),
            s.add("decoder.phi.bias", Tensor::zeros([wn])),
        );
        let mut decoder = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let (c, w, wc) = (config.encoder_width(i), config.decoder_width(i), config.decoder_width(i + 1));
            let p = format!("decoder.stage{}", i + 1);
            decoder.push(DecoderStage {
                fill: s.add(format!("{p}.fill_token"), crate::params::uniform(&mut rng, &[c], 0.02)),
                proj: conv(&mut s, &mut rng, &format!("{p}.proj"), w, c, 1),
                up1: conv(&mut s, &mut rng, &format!("{p}.up.conv1"), w, wc, 3),
                up2: conv(&mut s, &mut rng, &format!("{p}.up.conv2"), w, w, 3),
                skip1: conv(&mut s, &mut rng, &format!("{p}.skip.conv1"), w, 2 * w, 3),
                skip2: conv(&mut s, &mut rng, &format!("{p}.skip.conv2"), w, w, 3),
            });
        }
        let head = conv(&mut s, &mut rng, "decoder.head", 1, config.decoder_width(0), 1);
        Ok(Self { config, params: s, cnn, patch, pos_embed, blocks, fill, phi, decoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Fresh mask pyramid matching this model's stages.
    pub fn sample_pyramid(&self, ratio: f64, seed: u64) -> Result<MaskPyramid> {
        MaskPyramid::build(self.config.coarse_grid(), self.config.n_stages, ratio, seed)
    }

    fn check_pyramid(&self, pyramid: &MaskPyramid) -> Result<()> {
        pyramid.validate()?;
        if pyramid.n_stages() != self.config.n_stages {
            return Err(Error::invalid(
                "hybrid_model",
                format!("pyramid has {} stages, model has {}", pyramid.n_stages(), self.config.n_stages),
            ));
        }
        if pyramid.finest().grid() != self.config.volume {
            return Err(Error::shape("hybrid_model", &pyramid.finest().grid().as_array(), &self.config.volume.as_array()));
        }
        Ok(())
    }

    fn check_volume(&self, shape: &[usize]) -> Result<()> {
        let expected = self.config.volume.tensor_shape(1);
        if shape != expected {
            return Err(Error::shape("hybrid_model", shape, &expected));
        }
        Ok(())
    }

    /// Runs the encoder. `volume: [1, z, y, x]`. Without a pyramid every
    /// voxel is visible and no mask multiplications are recorded.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bindings, volume: Var, pyramid: Option<&MaskPyramid>) -> Result<Encoded> {
        self.check_volume(tape.shape(volume))?;
        if let Some(pm) = pyramid {
            self.check_pyramid(pm)?;
        }
        let masks: Option<Vec<Var>> = pyramid.map(|pm| pm.stages().iter().map(|m| tape.constant(m.to_tensor())).collect());
        let mask = |tape: &mut Tape<T>, x: Var, i: usize| -> Result<Var> {
            match &masks {
                Some(ms) => apply_mask(tape, x, ms[i]),
                None => Ok(x),
            }
        };
        let eps = T::lit(NORM_EPS);
        let mut x = mask(tape, volume, 0)?;
        let mut skips = Vec::with_capacity(self.cnn.len());
        for (i, st) in self.cnn.iter().enumerate() {
            let h = tape.conv3d(x, p[st.conv1.w], Some(p[st.conv1.b]))?;
            let h = mask(tape, h, i)?;
            let h = tape.channel_norm(h, p[st.gamma], p[st.beta], eps)?;
            let h = mask(tape, h, i)?;
            let h = tape.silu(h);
            let h = tape.conv3d(h, p[st.conv2.w], Some(p[st.conv2.b]))?;
            let h = mask(tape, h, i)?;
            let s = tape.silu(h);
            skips.push(s);
            let pooled = tape.maxpool2(s)?;
            x = mask(tape, pooled, i + 1)?;
        }
        let coarse = self.config.coarse_grid();
        let all_visible;
        let coarse_mask = match pyramid {
            Some(pm) => pm.coarsest(),
            None => {
                all_visible = Mask3::all_visible(coarse);
                &all_visible
            }
        };
        let layout = SequenceLayout::new(coarse_mask, self.config.scan_order, self.config.scan_seed);
        if layout.visible_linear.is_empty() {
            return Err(Error::NothingVisible("encode"));
        }
        let c = tape.shape(x)[0];
        let rows = tape.reshape(x, &[c, coarse.len()])?;
        let rows = tape.permute(rows, &[1, 0])?;
        let vis = tape.gather(rows, &layout.visible_linear)?;
        let tok = tape.linear(vis, p[self.patch.0], Some(p[self.patch.1]))?;
        let pos = tape.gather(p[self.pos_embed], &layout.visible_linear)?;
        let mut tokens = tape.add(tok, pos)?;
        for blk in &self.blocks {
            tokens = mamba_block(tape, p, blk, tokens)?;
        }
        Ok(Encoded { tokens, skips, layout })
    }

    /// Runs the decoder and returns the `[1, z, y, x]` reconstruction.
    pub fn decode(&self, tape: &mut Tape<T>, p: &Bindings, enc: &Encoded, pyramid: Option<&MaskPyramid>) -> Result<Var> {
        if let Some(pm) = pyramid {
            self.check_pyramid(pm)?;
        }
        if enc.skips.len() != self.decoder.len() {
            return Err(Error::invalid("decode", "skip count does not match the model"));
        }
        let n = self.config.n_stages;
        let coarse = self.config.coarse_grid();
        let v = coarse.len();
        let d = self.config.model_dim;
        let layout = &enc.layout;
        let full = match self.fill {
            FillParam::Toki(a) => {
                let seq = tape.toki_fill(enc.tokens, p[a], &layout.visible_seq, v, self.config.toki_variant)?;
                tape.scatter(seq, &layout.order, v)?
            }
            FillParam::Learnable(delta) => {
                let placed = tape.scatter(enc.tokens, &layout.visible_linear, v)?;
                let mut empty = alloc::vec![T::one(); v];
                for &i in &layout.visible_linear {
                    empty[i] = T::zero();
                }
                let empty = tape.constant(Tensor::new([v, 1], empty)?);
                let empty = tape.expand(empty, &[v, d])?;
                let tok = tape.reshape(p[delta], &[1, d])?;
                let tok = tape.expand(tok, &[v, d])?;
                let fill = tape.mul(empty, tok)?;
                tape.add(placed, fill)?
            }
        };
        let dn = tape.linear(full, p[self.phi.0], Some(p[self.phi.1]))?;
        let dn = tape.permute(dn, &[1, 0])?;
        let wn = self.config.decoder_width(n - 1);
        let mut dcur = tape.reshape(dn, &coarse.tensor_shape(wn))?;
        for i in (0..n - 1).rev() {
            let st = &self.decoder[i];
            let s = enc.skips[i];
            let filled = match pyramid {
                Some(pm) => {
                    let c = tape.shape(s)[0];
                    let shape = pm.stage(i).grid().tensor_shape(c);
                    let inv = tape.constant(pm.stage(i).to_inverse_tensor());
                    let inv = tape.expand(inv, &shape)?;
                    let t = tape.reshape(p[st.fill], &[c, 1, 1, 1])?;
                    let t = tape.expand(t, &shape)?;
                    let f = tape.mul(inv, t)?;
                    tape.add(s, f)?
                }
                None => s,
            };
            let proj = tape.conv3d(filled, p[st.proj.w], Some(p[st.proj.b]))?;
            let u = tape.conv3d(dcur, p[st.up1.w], Some(p[st.up1.b]))?;
            let u = tape.silu(u);
            let u = tape.conv3d(u, p[st.up2.w], Some(p[st.up2.b]))?;
            let u = tape.silu(u);
            let u = tape.upsample2(u)?;
            let cat = tape.concat(&[proj, u], 0)?;
            let h = tape.conv3d(cat, p[st.skip1.w], Some(p[st.skip1.b]))?;
            let h = tape.silu(h);
            let h = tape.conv3d(h, p[st.skip2.w], Some(p[st.skip2.b]))?;
            dcur = tape.silu(h);
        }
        tape.conv3d(dcur, p[self.head.w], Some(p[self.head.b]))
    }

    /// Encoder and decoder in one pass.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bindings, volume: Var, pyramid: Option<&MaskPyramid>) -> Result<Var> {
        let enc = self.encode(tape, p, volume, pyramid)?;
        self.decode(tape, p, &enc, pyramid)
    }

    /// Reconstruction of `volume` under `pyramid`.
    pub fn reconstruct(&self, volume: &Tensor<T>, pyramid: &MaskPyramid) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(volume.clone());
        let y = self.forward(&mut tape, &p, x, Some(pyramid))?;
        Ok(tape.value(y).detached())
    }

    /// Encoder outputs as plain values: the token sequence and the sparse
    /// skip features.
    pub fn encode_values(&self, volume: &Tensor<T>, pyramid: Option<&MaskPyramid>) -> Result<(TokenSequence<T>, Vec<SparseFeature<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(volume.clone());
        let enc = self.encode(&mut tape, &p, x, pyramid)?;
        let coarse = self.config.coarse_grid();
        let seq = TokenSequence {
            tokens: tape.value(enc.tokens).detached(),
            positions: enc.layout.visible_linear.iter().map(|&i| coarse.coords(i)).collect(),
            seq_index: enc.layout.visible_seq.clone(),
            order: self.config.scan_order,
            grid: coarse,
            shuffle_seed: self.config.scan_seed,
        };
        let skips = enc
            .skips
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let m = match pyramid {
                    Some(pm) => pm.stage(i).clone(),
                    None => Mask3::all_visible(self.config.stage_grid(i)),
                };
                SparseFeature::new(tape.value(s).detached(), m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((seq, skips))
    }

    /// Masked MSE of one volume and gradients for every parameter, in store
    /// order. Does not touch the store's gradient buffers.
    pub fn loss_and_grads(&self, volume: &Tensor<T>, pyramid: &MaskPyramid) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(volume.clone());
        let y = self.forward(&mut tape, &p, x, Some(pyramid))?;
        let loss = masked_mse_var(&mut tape, x, y, pyramid)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        let grads = self
            .params
            .ids()
            .map(|id| match tape.grad(p[id]) {
                Some(g) => g.to_vec(),
                None => alloc::vec![T::zero(); self.params.get(id).numel()],
            })
            .collect();
        Ok((value, grads))
    }

    /// Masked MSE of one volume without gradients.
    pub fn loss(&self, volume: &Tensor<T>, pyramid: &MaskPyramid) -> Result<T> {
        let pred = self.reconstruct(volume, pyramid)?;
        masked_mse(volume, &pred, pyramid)
    }
}

fn masked_weights<T: Real>(shape: &[usize], pyramid: &MaskPyramid) -> Result<(Tensor<T>, usize)> {
    let m = pyramid.finest();
    let expected = m.grid().tensor_shape(1);
    if shape != expected {
        return Err(Error::shape("masked_mse", shape, &expected));
    }
    let count = m.masked_count();
    if count == 0 {
        return Err(Error::NothingMasked);
    }
    Ok((m.to_inverse_tensor(), count))
}

/// Tape version of [`masked_mse`].
pub fn masked_mse_var<T: Real>(tape: &mut Tape<T>, target: Var, pred: Var, pyramid: &MaskPyramid) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred) {
        return Err(Error::shape("masked_mse", tape.shape(target), tape.shape(pred)));
    }
    let (w, count) = masked_weights::<T>(tape.shape(target), pyramid)?;
    let w = tape.constant(w);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.mul(sq, w)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::one() / T::from_usize(count)))
}

/// Mean squared error over voxels masked at the finest stage.
pub fn masked_mse<T: Real>(target: &Tensor<T>, pred: &Tensor<T>, pyramid: &MaskPyramid) -> Result<T> {
    if target.shape() != pred.shape() {
        return Err(Error::shape("masked_mse", target.shape(), pred.shape()));
    }
    let (w, count) = masked_weights::<T>(target.shape(), pyramid)?;
    let mut acc = T::zero();
    for ((&a, &b), &m) in target.data().iter().zip(pred.data()).zip(w.data()) {
        if m != T::zero() {
            acc += (b - a) * (b - a);
        }
    }
    Ok(acc / T::from_usize(count))
}

/// Grid shape helper for callers holding a volume tensor.
pub fn volume_grid(shape: &[usize]) -> Result<Grid3> {
    match Grid3::from_tensor_shape(shape)? {
        (1, g) => Ok(g),
        _ => Err(Error::invalid("volume", format!("expected one channel, got shape {shape:?}"))),
    }
}
