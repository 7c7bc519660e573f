//! Architecture wiring: the context encoder that maps a clean image to a
//! latent code, and the latent-conditioned U-Net denoiser that predicts
//! the clean image from a noisy one. Forward passes record caches;
//! backward passes accumulate parameter gradients by name.
//!
//! Layout summary (widths double per level, `w_i = base_width << i`):
//!
//! * encoder: four stride-2 conv + groupnorm + SiLU stages, global average
//!   pool, dense projection to the latent dimension;
//! * denoiser: stem conv to `w_0`; per level a residual block
//!   (conv -> +t/z channel bias -> groupnorm -> SiLU -> +input) and a
//!   strided down conv; decoding mirrors with nearest upsample, skip
//!   concatenation and a merge block; a final head conv back to the
//!   image channels with no activation;
//! * the timestep enters as a sinusoidal embedding refined by a two-layer
//!   MLP, injected with the latent at every block and merge.

use ndarray::{Array2, Array4, Ix2, Ix4};

use crate::model::nn::{
    add_channel_bias, channel_bias_grad, concat_channels, conv2d_backward, conv2d_forward,
    dense_backward, dense_forward, gap_backward, gap_forward, groupnorm_backward,
    groupnorm_forward, silu_backward, silu_forward, split_channels, timestep_embedding,
    upsample2_backward, upsample2_forward, ConvCache, DenseCache, GroupNormCache, SiluCache,
};
use crate::model::params::ParamSet;
use crate::model::scalar::Scalar;
use crate::model::ModelConfig;
use crate::rng::Pcg32;

/// Number of stride-2 stages in the context encoder.
pub const ENC_LEVELS: usize = 4;

fn width(cfg: &ModelConfig, level: usize) -> usize {
    cfg.base_width << level
}

// ---------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------

fn uniform_tensor<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut Pcg32,
) -> ndarray::ArrayD<S> {
    let lim = (1.0 / fan_in as f64).sqrt();
    let mut t = ndarray::ArrayD::zeros(ndarray::IxDyn(shape));
    for v in t.iter_mut() {
        *v = S::from_f64_exact(rng.next_range(-lim, lim));
    }
    t
}

fn zeros<S: Scalar>(shape: &[usize]) -> ndarray::ArrayD<S> {
    ndarray::ArrayD::zeros(ndarray::IxDyn(shape))
}

fn ones<S: Scalar>(shape: &[usize]) -> ndarray::ArrayD<S> {
    ndarray::ArrayD::from_elem(ndarray::IxDyn(shape), S::one())
}

fn insert_conv<S: Scalar>(
    p: &mut ParamSet<S>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut Pcg32,
) {
    p.insert(
        &format!("{name}.w"),
        uniform_tensor(&[c_out, c_in, k, k], c_in * k * k, rng),
    );
    p.insert(&format!("{name}.b"), zeros(&[c_out]));
}

fn insert_dense<S: Scalar>(
    p: &mut ParamSet<S>,
    name: &str,
    out: usize,
    input: usize,
    rng: &mut Pcg32,
) {
    p.insert(&format!("{name}.w"), uniform_tensor(&[out, input], input, rng));
    p.insert(&format!("{name}.b"), zeros(&[out]));
}

fn insert_groupnorm<S: Scalar>(p: &mut ParamSet<S>, name: &str, channels: usize) {
    p.insert(&format!("{name}.gamma"), ones(&[channels]));
    p.insert(&format!("{name}.beta"), zeros(&[channels]));
}

/// Build the full parameter set for a model configuration. Weights draw
/// from U(-sqrt(1/fan_in), +sqrt(1/fan_in)) in f64 before casting; biases
/// start at zero and norm scales at one. The draw order is fixed, so a
/// given seed always produces the same parameters.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, rng: &mut Pcg32) -> ParamSet<S> {
    let mut p = ParamSet::new();
    // Context encoder.
    let mut c_in = cfg.channels;
    for i in 0..ENC_LEVELS {
        let c_out = width(cfg, i);
        insert_conv(&mut p, &format!("enc.conv{i}"), c_out, c_in, 3, rng);
        insert_groupnorm(&mut p, &format!("enc.gn{i}"), c_out);
        c_in = c_out;
    }
    insert_dense(&mut p, "enc.fc", cfg.latent_dim, width(cfg, ENC_LEVELS - 1), rng);
    // Timestep embedding MLP.
    insert_dense(&mut p, "den.temb.fc1", cfg.timestep_embed_dim, cfg.timestep_embed_dim, rng);
    insert_dense(&mut p, "den.temb.fc2", cfg.timestep_embed_dim, cfg.timestep_embed_dim, rng);
    // Denoiser trunk.
    insert_conv(&mut p, "den.stem", width(cfg, 0), cfg.channels, 3, rng);
    for i in 0..cfg.depth {
        let w = width(cfg, i);
        insert_conv(&mut p, &format!("den.block{i}.conv"), w, w, 3, rng);
        insert_dense(&mut p, &format!("den.block{i}.tproj"), w, cfg.timestep_embed_dim, rng);
        insert_dense(&mut p, &format!("den.block{i}.zproj"), w, cfg.latent_dim, rng);
        insert_groupnorm(&mut p, &format!("den.block{i}.gn"), w);
    }
    for i in 0..cfg.depth.saturating_sub(1) {
        insert_conv(&mut p, &format!("den.down{i}"), width(cfg, i + 1), width(cfg, i), 3, rng);
    }
    for i in (0..cfg.depth.saturating_sub(1)).rev() {
        let w_lo = width(cfg, i);
        let w_hi = width(cfg, i + 1);
        insert_conv(&mut p, &format!("den.up{i}.conv"), w_lo, w_hi + w_lo, 3, rng);
        insert_dense(&mut p, &format!("den.up{i}.tproj"), w_lo, cfg.timestep_embed_dim, rng);
        insert_dense(&mut p, &format!("den.up{i}.zproj"), w_lo, cfg.latent_dim, rng);
        insert_groupnorm(&mut p, &format!("den.up{i}.gn"), w_lo);
    }
    insert_conv(&mut p, "den.head", cfg.channels, width(cfg, 0), 3, rng);
    p
}

// ---------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------

fn silu4_forward<S: Scalar>(x: Array4<S>) -> (Array4<S>, SiluCache<S>) {
    let (y, cache) = silu_forward(&x.into_dyn());
    (y.into_dimensionality::<Ix4>().unwrap(), cache)
}

fn silu4_backward<S: Scalar>(dy: Array4<S>, cache: &SiluCache<S>) -> Array4<S> {
    silu_backward(&dy.into_dyn(), cache)
        .into_dimensionality::<Ix4>()
        .unwrap()
}

/// Project a per-item vector (t embedding or latent) to per-channel biases
/// and add them onto the feature maps.
fn inject_forward<S: Scalar>(h: &mut Array4<S>, source: &Array2<S>, p: &ParamSet<S>, name: &str) {
    let w = p
        .get(&format!("{name}.w"))
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let b = p.get(&format!("{name}.b"));
    let mut bias = source.dot(&w.t());
    for mut row in bias.rows_mut() {
        for (v, bb) in row.iter_mut().zip(b.iter()) {
            *v += *bb;
        }
    }
    add_channel_bias(h, &bias);
}

/// Gradient of `inject_forward`: accumulates the projection's parameter
/// gradients and returns the gradient w.r.t. the source vector (N, in).
fn inject_backward<S: Scalar>(
    dy: &Array4<S>,
    source: &Array2<S>,
    p: &ParamSet<S>,
    grads: &mut ParamSet<S>,
    name: &str,
) -> Array2<S> {
    let g = channel_bias_grad(dy); // (N, C)
    let w = p
        .get(&format!("{name}.w"))
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    *grads.get_mut(&format!("{name}.w")) += &g.t().dot(source).into_dyn();
    *grads.get_mut(&format!("{name}.b")) += &g.sum_axis(ndarray::Axis(0)).into_dyn();
    g.dot(&w)
}

// ---------------------------------------------------------------------
// Context encoder
// ---------------------------------------------------------------------

pub struct EncoderCache<S: Scalar> {
    stages: Vec<(ConvCache<S>, GroupNormCache<S>, SiluCache<S>)>,
    pooled_hw: (usize, usize),
    fc: DenseCache<S>,
}

/// Map clean images (N, C, H, W) to latent codes (N, latent_dim).
pub fn encoder_forward<S: Scalar>(x: &Array4<S>, p: &ParamSet<S>) -> (Array2<S>, EncoderCache<S>) {
    let mut h = x.clone();
    let mut stages = Vec::with_capacity(ENC_LEVELS);
    for i in 0..ENC_LEVELS {
        let (hc, conv) = conv2d_forward(
            &h,
            p.get(&format!("enc.conv{i}.w")),
            p.get(&format!("enc.conv{i}.b")),
            2,
            1,
        );
        let (hg, gn) = groupnorm_forward(
            &hc,
            p.get(&format!("enc.gn{i}.gamma")),
            p.get(&format!("enc.gn{i}.beta")),
        );
        let (hs, silu) = silu4_forward(hg);
        h = hs;
        stages.push((conv, gn, silu));
    }
    let (_, _, ph, pw) = h.dim();
    let pooled = gap_forward(&h);
    let (z, fc) = dense_forward(&pooled, p.get("enc.fc.w"), p.get("enc.fc.b"));
    (
        z,
        EncoderCache {
            stages,
            pooled_hw: (ph, pw),
            fc,
        },
    )
}

/// Accumulate encoder parameter gradients from a latent gradient.
pub fn encoder_backward<S: Scalar>(
    dz: &Array2<S>,
    p: &ParamSet<S>,
    cache: &EncoderCache<S>,
    grads: &mut ParamSet<S>,
) {
    let (dpooled, dw, db) = dense_backward(dz, p.get("enc.fc.w"), &cache.fc);
    *grads.get_mut("enc.fc.w") += &dw;
    *grads.get_mut("enc.fc.b") += &db;
    let mut dh = gap_backward(&dpooled, cache.pooled_hw.0, cache.pooled_hw.1);
    for i in (0..ENC_LEVELS).rev() {
        let (conv, gn, silu) = &cache.stages[i];
        let dg = silu4_backward(dh, silu);
        let (dc, dgamma, dbeta) = groupnorm_backward(&dg, p.get(&format!("enc.gn{i}.gamma")), gn);
        *grads.get_mut(&format!("enc.gn{i}.gamma")) += &dgamma;
        *grads.get_mut(&format!("enc.gn{i}.beta")) += &dbeta;
        let (dx, dw, db) = conv2d_backward(&dc, p.get(&format!("enc.conv{i}.w")), conv);
        *grads.get_mut(&format!("enc.conv{i}.w")) += &dw;
        *grads.get_mut(&format!("enc.conv{i}.b")) += &db;
        dh = dx;
    }
}

// ---------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------

struct BlockCache<S: Scalar> {
    conv: ConvCache<S>,
    gn: GroupNormCache<S>,
    silu: SiluCache<S>,
}

struct MergeCache<S: Scalar> {
    conv: ConvCache<S>,
    gn: GroupNormCache<S>,
    silu: SiluCache<S>,
    upsampled_channels: usize,
}

pub struct DenoiserCache<S: Scalar> {
    temb_fc1: DenseCache<S>,
    temb_silu: SiluCache<S>,
    temb_fc2: DenseCache<S>,
    temb: Array2<S>,
    z: Array2<S>,
    stem: ConvCache<S>,
    blocks: Vec<BlockCache<S>>,
    downs: Vec<(ConvCache<S>, SiluCache<S>)>,
    merges: Vec<MergeCache<S>>, // indexed by level, entries 0..depth-1
    head: ConvCache<S>,
}

fn block_forward<S: Scalar>(
    x: &Array4<S>,
    temb: &Array2<S>,
    z: &Array2<S>,
    p: &ParamSet<S>,
    name: &str,
) -> (Array4<S>, BlockCache<S>) {
    let (mut h, conv) = conv2d_forward(
        x,
        p.get(&format!("{name}.conv.w")),
        p.get(&format!("{name}.conv.b")),
        1,
        1,
    );
    inject_forward(&mut h, temb, p, &format!("{name}.tproj"));
    inject_forward(&mut h, z, p, &format!("{name}.zproj"));
    let (hg, gn) = groupnorm_forward(
        &h,
        p.get(&format!("{name}.gn.gamma")),
        p.get(&format!("{name}.gn.beta")),
    );
    let (hs, silu) = silu4_forward(hg);
    let y = &hs + x;
    (y, BlockCache { conv, gn, silu })
}

/// Returns the gradient w.r.t. the block input; accumulates parameter
/// gradients and the t/z source gradients.
#[allow(clippy::too_many_arguments)]
fn block_backward<S: Scalar>(
    dy: &Array4<S>,
    temb: &Array2<S>,
    z: &Array2<S>,
    p: &ParamSet<S>,
    cache: &BlockCache<S>,
    grads: &mut ParamSet<S>,
    dtemb: &mut Array2<S>,
    dz: &mut Array2<S>,
    name: &str,
) -> Array4<S> {
    let ds = silu4_backward(dy.clone(), &cache.silu);
    let (db_in, dgamma, dbeta) =
        groupnorm_backward(&ds, p.get(&format!("{name}.gn.gamma")), &cache.gn);
    *grads.get_mut(&format!("{name}.gn.gamma")) += &dgamma;
    *grads.get_mut(&format!("{name}.gn.beta")) += &dbeta;
    *dtemb += &inject_backward(&db_in, temb, p, grads, &format!("{name}.tproj"));
    *dz += &inject_backward(&db_in, z, p, grads, &format!("{name}.zproj"));
    let (dx_conv, dw, db) = conv2d_backward(&db_in, p.get(&format!("{name}.conv.w")), &cache.conv);
    *grads.get_mut(&format!("{name}.conv.w")) += &dw;
    *grads.get_mut(&format!("{name}.conv.b")) += &db;
    // Residual connection: the incoming gradient also reaches the input directly.
    dx_conv + dy
}

/// Predict the clean image from noisy input, per-item timesteps and latents.
pub fn denoiser_forward<S: Scalar>(
    x_t: &Array4<S>,
    ts: &[usize],
    z: &Array2<S>,
    cfg: &ModelConfig,
    p: &ParamSet<S>,
) -> (Array4<S>, DenoiserCache<S>) {
    assert_eq!(x_t.dim().0, ts.len(), "one timestep per batch item");
    assert_eq!(x_t.dim().0, z.dim().0, "one latent per batch item");
    // Timestep embedding MLP.
    let sin: Array2<S> = timestep_embedding(ts, cfg.timestep_embed_dim);
    let (h1, temb_fc1) = dense_forward(&sin, p.get("den.temb.fc1.w"), p.get("den.temb.fc1.b"));
    let (h1s, temb_silu) = silu_forward(&h1.into_dyn());
    let h1s = h1s.into_dimensionality::<Ix2>().unwrap();
    let (temb, temb_fc2) = dense_forward(&h1s, p.get("den.temb.fc2.w"), p.get("den.temb.fc2.b"));

    let (mut h, stem) = conv2d_forward(x_t, p.get("den.stem.w"), p.get("den.stem.b"), 1, 1);
    let mut blocks = Vec::with_capacity(cfg.depth);
    let mut downs = Vec::new();
    let mut skips: Vec<Array4<S>> = Vec::new();
    for i in 0..cfg.depth {
        let (hb, bc) = block_forward(&h, &temb, z, p, &format!("den.block{i}"));
        blocks.push(bc);
        h = hb;
        if i + 1 < cfg.depth {
            skips.push(h.clone());
            let (hd, conv) = conv2d_forward(
                &h,
                p.get(&format!("den.down{i}.w")),
                p.get(&format!("den.down{i}.b")),
                2,
                1,
            );
            let (hs, silu) = silu4_forward(hd);
            downs.push((conv, silu));
            h = hs;
        }
    }
    let mut merges: Vec<Option<MergeCache<S>>> =
        (0..cfg.depth.saturating_sub(1)).map(|_| None).collect();
    for i in (0..cfg.depth.saturating_sub(1)).rev() {
        let up = upsample2_forward(&h);
        let up_channels = up.dim().1;
        let cat = concat_channels(&up, &skips[i]);
        let name = format!("den.up{i}");
        let (mut hm, conv) = conv2d_forward(
            &cat,
            p.get(&format!("{name}.conv.w")),
            p.get(&format!("{name}.conv.b")),
            1,
            1,
        );
        inject_forward(&mut hm, &temb, p, &format!("{name}.tproj"));
        inject_forward(&mut hm, z, p, &format!("{name}.zproj"));
        let (hg, gn) = groupnorm_forward(
            &hm,
            p.get(&format!("{name}.gn.gamma")),
            p.get(&format!("{name}.gn.beta")),
        );
        let (hs, silu) = silu4_forward(hg);
        h = hs;
        merges[i] = Some(MergeCache {
            conv,
            gn,
            silu,
            upsampled_channels: up_channels,
        });
    }
    let (out, head) = conv2d_forward(&h, p.get("den.head.w"), p.get("den.head.b"), 1, 1);
    let cache = DenoiserCache {
        temb_fc1,
        temb_silu,
        temb_fc2,
        temb,
        z: z.clone(),
        stem,
        blocks,
        downs,
        merges: merges.into_iter().map(|m| m.expect("merge cache")).collect(),
        head,
    };
    (out, cache)
}

/// Backpropagate a gradient w.r.t. the denoiser output. Accumulates all
/// `den.*` parameter gradients and returns the gradient w.r.t. the latent.
pub fn denoiser_backward<S: Scalar>(
    dy: &Array4<S>,
    cfg: &ModelConfig,
    p: &ParamSet<S>,
    cache: &DenoiserCache<S>,
    grads: &mut ParamSet<S>,
) -> Array2<S> {
    let temb = &cache.temb;
    let z = &cache.z;
    let mut dtemb = Array2::zeros(temb.raw_dim());
    let mut dz = Array2::zeros(z.raw_dim());

    // Head.
    let (mut dh, dw, db) = conv2d_backward(dy, p.get("den.head.w"), &cache.head);
    *grads.get_mut("den.head.w") += &dw;
    *grads.get_mut("den.head.b") += &db;

    // Decoder merges, unwinding from the full-resolution level back down.
    let mut dskips: Vec<Option<Array4<S>>> =
        (0..cfg.depth.saturating_sub(1)).map(|_| None).collect();
    for i in 0..cfg.depth.saturating_sub(1) {
        let m = &cache.merges[i];
        let name = format!("den.up{i}");
        let ds = silu4_backward(dh, &m.silu);
        let (dm, dgamma, dbeta) =
            groupnorm_backward(&ds, p.get(&format!("{name}.gn.gamma")), &m.gn);
        *grads.get_mut(&format!("{name}.gn.gamma")) += &dgamma;
        *grads.get_mut(&format!("{name}.gn.beta")) += &dbeta;
        dtemb += &inject_backward(&dm, temb, p, grads, &format!("{name}.tproj"));
        dz += &inject_backward(&dm, z, p, grads, &format!("{name}.zproj"));
        let (dcat, dw, db) = conv2d_backward(&dm, p.get(&format!("{name}.conv.w")), &m.conv);
        *grads.get_mut(&format!("{name}.conv.w")) += &dw;
        *grads.get_mut(&format!("{name}.conv.b")) += &db;
        let (dup, dskip) = split_channels(&dcat, m.upsampled_channels);
        dskips[i] = Some(dskip);
        dh = upsample2_backward(&dup);
    }

    // Encoder-side blocks and down convs, deepest level first.
    for i in (0..cfg.depth).rev() {
        let dblock_out = if i + 1 < cfg.depth {
            let (conv, silu) = &cache.downs[i];
            let dd = silu4_backward(dh, silu);
            let (dx, dw, db) = conv2d_backward(&dd, p.get(&format!("den.down{i}.w")), conv);
            *grads.get_mut(&format!("den.down{i}.w")) += &dw;
            *grads.get_mut(&format!("den.down{i}.b")) += &db;
            dx + dskips[i].take().expect("skip gradient")
        } else {
            dh
        };
        dh = block_backward(
            &dblock_out,
            temb,
            z,
            p,
            &cache.blocks[i],
            grads,
            &mut dtemb,
            &mut dz,
            &format!("den.block{i}"),
        );
    }

    // Stem.
    let (_dx, dw, db) = conv2d_backward(&dh, p.get("den.stem.w"), &cache.stem);
    *grads.get_mut("den.stem.w") += &dw;
    *grads.get_mut("den.stem.b") += &db;

    // Timestep MLP.
    let (dh1s, dw2, db2) = dense_backward(&dtemb, p.get("den.temb.fc2.w"), &cache.temb_fc2);
    *grads.get_mut("den.temb.fc2.w") += &dw2;
    *grads.get_mut("den.temb.fc2.b") += &db2;
    let dh1 = silu_backward(&dh1s.into_dyn(), &cache.temb_silu)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let (_dsin, dw1, db1) = dense_backward(&dh1, p.get("den.temb.fc1.w"), &cache.temb_fc1);
    *grads.get_mut("den.temb.fc1.w") += &dw1;
    *grads.get_mut("den.temb.fc1.b") += &db1;

    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            image_size: 4,
            channels: 1,
            latent_dim: 3,
            base_width: 2,
            depth: 2,
            timestep_embed_dim: 4,
            seed: 11,
        }
    }

    fn randn4(shape: (usize, usize, usize, usize), rng: &mut Pcg32) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.next_gaussian() * 0.5)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = toy_config();
        let a: ParamSet<f64> = init_params(&cfg, &mut Pcg32::new(9, 1));
        let b: ParamSet<f64> = init_params(&cfg, &mut Pcg32::new(9, 1));
        assert_eq!(a.flat_len(), b.flat_len());
        for i in 0..a.flat_len() {
            assert_eq!(a.get_flat(i).unwrap(), b.get_flat(i).unwrap());
        }
        assert_eq!(a.get("den.stem.w").shape(), &[2, 1, 3, 3]);
        assert_eq!(a.get("den.up0.conv.w").shape(), &[2, 6, 3, 3]);
        assert_eq!(a.get("enc.fc.w").shape(), &[3, 16]);
        // Biases start at zero, norm scales at one.
        assert!(a.get("den.head.b").iter().all(|&v| v == 0.0));
        assert!(a.get("den.block0.gn.gamma").iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encoder_and_denoiser_shapes() {
        let cfg = toy_config();
        let p: ParamSet<f64> = init_params(&cfg, &mut Pcg32::new(9, 1));
        let mut rng = Pcg32::new(1, 2);
        let x0 = randn4((2, 1, 4, 4), &mut rng);
        let (z, _) = encoder_forward(&x0, &p);
        assert_eq!(z.dim(), (2, 3));
        let xt = randn4((2, 1, 4, 4), &mut rng);
        let (out, _) = denoiser_forward(&xt, &[0, 3], &z, &cfg, &p);
        assert_eq!(out.dim(), (2, 1, 4, 4));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn depth_one_network_has_no_down_or_up_stages() {
        let cfg = ModelConfig {
            depth: 1,
            ..toy_config()
        };
        let p: ParamSet<f64> = init_params(&cfg, &mut Pcg32::new(9, 1));
        assert!(!p.contains("den.down0.w"));
        assert!(!p.contains("den.up0.conv.w"));
        let mut rng = Pcg32::new(1, 2);
        let x = randn4((1, 1, 4, 4), &mut rng);
        let (z, _) = encoder_forward(&x, &p);
        let (out, cache) = denoiser_forward(&x, &[1], &z, &cfg, &p);
        assert_eq!(out.dim(), (1, 1, 4, 4));
        let mut grads = p.zeros_like();
        let dz = denoiser_backward(&out, &cfg, &p, &cache, &mut grads);
        assert_eq!(dz.dim(), (1, 3));
    }

    /// End-to-end finite-difference check through encoder + denoiser on a
    /// probe functional, sampling a handful of coordinates from every
    /// parameter tensor.
    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = toy_config();
        let p: ParamSet<f64> = init_params(&cfg, &mut Pcg32::new(9, 1));
        let mut rng = Pcg32::new(21, 4);
        let x0 = randn4((2, 1, 4, 4), &mut rng);
        let xt = randn4((2, 1, 4, 4), &mut rng);
        let ts = [1usize, 3];
        let probe = randn4((2, 1, 4, 4), &mut rng);

        let loss = |params: &ParamSet<f64>| -> f64 {
            let (z, _) = encoder_forward(&x0, params);
            let (out, _) = denoiser_forward(&xt, &ts, &z, &cfg, params);
            (out * &probe).sum()
        };

        let (z, enc_cache) = encoder_forward(&x0, &p);
        let (_, den_cache) = denoiser_forward(&xt, &ts, &z, &cfg, &p);
        let mut grads = p.zeros_like();
        let dz = denoiser_backward(&probe, &cfg, &p, &den_cache, &mut grads);
        encoder_backward(&dz, &p, &enc_cache, &mut grads);

        let h = 1e-5;
        let mut checked = 0;
        let mut coord_rng = Pcg32::new(77, 8);
        for (name, tensor) in p.iter() {
            let len = tensor.len();
            for _ in 0..3.min(len) {
                let local = coord_rng.next_below(len);
                let flat = flat_offset(&p, name) + local;
                let base = p.get_flat(flat).unwrap();
                let mut plus = p.clone();
                plus.set_flat(flat, base + h).unwrap();
                let mut minus = p.clone();
                minus.set_flat(flat, base - h).unwrap();
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.get_flat(flat).unwrap();
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "{name}[{local}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 60, "checked {checked} coordinates");
    }

    fn flat_offset(p: &ParamSet<f64>, target: &str) -> usize {
        let mut off = 0;
        for (name, t) in p.iter() {
            if name == target {
                return off;
            }
            off += t.len();
        }
        panic!("unknown tensor {target}");
    }
}
