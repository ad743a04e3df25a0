//! Noise-prediction U-Net: residual blocks with a timestep embedding injected
//! into every block, average-pool downsampling, nearest upsampling and
//! channel-concatenated skip connections.

use rand::Rng;

use super::layers::{
    add_channel_bias, avg_pool, avg_pool_backward, channel_sums, concat, kernel3, silu,
    silu_backward, silu_tensor, silu_tensor_backward, split, upsample, upsample_backward, Conv,
    GroupNorm, GroupNormCache, Linear, KERNEL1,
};
use super::{Geometry, ParamBuilder, ParamTable, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetSpec {
    pub rank: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl UNetSpec {
    /// Channel width at resolution level `l` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }
}

/// Sinusoidal embedding of integer steps; first half sines, second half cosines.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct ResTrace<T> {
    x: Tensor<T>,
    gn1: GroupNormCache<T>,
    a1: Tensor<T>,
    s1: Tensor<T>,
    gn2: GroupNormCache<T>,
    a2: Tensor<T>,
    s2: Tensor<T>,
}

impl ResBlock {
    fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, spec: &UNetSpec) -> Self {
        let k = kernel3(spec.rank);
        Self {
            gn1: GroupNorm::new(b, &format!("{name}.gn1"), cin),
            conv1: Conv::new(b, &format!("{name}.conv1"), cin, cout, k, false),
            temb: Linear::new(b, &format!("{name}.temb"), spec.time_embed_dim, cout),
            gn2: GroupNorm::new(b, &format!("{name}.gn2"), cout),
            conv2: Conv::new(b, &format!("{name}.conv2"), cout, cout, k, false),
            skip: (cin != cout).then(|| Conv::new(b, &format!("{name}.skip"), cin, cout, KERNEL1, false)),
        }
    }

    fn forward<T: Scalar>(&self, params: &[T], x: Tensor<T>, emb_act: &[T]) -> (Tensor<T>, ResTrace<T>) {
        let (a1, gn1) = self.gn1.forward(params, &x);
        let s1 = silu_tensor(&a1);
        let mut h = self.conv1.forward(params, &s1);
        add_channel_bias(&mut h, &self.temb.forward(params, emb_act));
        let (a2, gn2) = self.gn2.forward(params, &h);
        let s2 = silu_tensor(&a2);
        let mut out = self.conv2.forward(params, &s2);
        match &self.skip {
            Some(conv) => out.add_assign(&conv.forward(params, &x)),
            None => out.add_assign(&x),
        }
        (
            out,
            ResTrace {
                x,
                gn1,
                a1,
                s1,
                gn2,
                a2,
                s2,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        params: &[T],
        tr: &ResTrace<T>,
        dout: &Tensor<T>,
        emb_act: &[T],
        d_emb_act: &mut [T],
        grads: &mut [T],
    ) -> Tensor<T> {
        let ds2 = self.conv2.backward(params, &tr.s2, dout, grads, true).expect("dx");
        let da2 = silu_tensor_backward(&tr.a2, &ds2);
        let dh = self.gn2.backward(params, &tr.gn2, &da2, grads);
        let de = self.temb.backward(params, emb_act, &channel_sums(&dh), grads);
        for (acc, v) in d_emb_act.iter_mut().zip(de) {
            *acc = *acc + v;
        }
        let ds1 = self.conv1.backward(params, &tr.s1, &dh, grads, true).expect("dx");
        let da1 = silu_tensor_backward(&tr.a1, &ds1);
        let mut dx = self.gn1.backward(params, &tr.gn1, &da1, grads);
        match &self.skip {
            Some(conv) => dx.add_assign(&conv.backward(params, &tr.x, dout, grads, true).expect("dx")),
            None => dx.add_assign(dout),
        }
        dx
    }
}

/// Network structure; parameter values are held by the caller as a flat vector.
#[derive(Debug)]
pub struct UNet {
    spec: UNetSpec,
    builder: ParamBuilder,
    embed1: Linear,
    embed2: Linear,
    conv_in: Conv,
    encoder: Vec<ResBlock>,
    middle: [ResBlock; 2],
    decoder: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

/// Intermediate values kept by a training forward pass.
pub struct Trace<T> {
    steps_embedded: Vec<T>,
    e1: Vec<T>,
    e1_act: Vec<T>,
    emb: Vec<T>,
    emb_act: Vec<T>,
    input: Tensor<T>,
    encoder: Vec<ResTrace<T>>,
    skip_geoms: Vec<Geometry>,
    middle: Vec<ResTrace<T>>,
    decoder: Vec<Option<ResTrace<T>>>,
    out_norm: GroupNormCache<T>,
    out_pre: Tensor<T>,
    out_act: Tensor<T>,
}

impl UNet {
    pub fn new(spec: UNetSpec) -> Self {
        assert!(spec.depth >= 1 && spec.base_channels >= 1 && spec.time_embed_dim >= 2);
        let mut b = ParamBuilder::default();
        let e = spec.time_embed_dim;
        let embed1 = Linear::new(&mut b, "embed.0", e, e);
        let embed2 = Linear::new(&mut b, "embed.1", e, e);
        let k = kernel3(spec.rank);
        let conv_in = Conv::new(&mut b, "conv_in", 1, spec.channels(0), k, false);
        let encoder = (0..spec.depth)
            .map(|l| {
                let cin = spec.channels(l.saturating_sub(1));
                ResBlock::new(&mut b, &format!("enc{l}"), cin, spec.channels(l), &spec)
            })
            .collect();
        let deep = spec.channels(spec.depth);
        let middle = [
            ResBlock::new(&mut b, "mid0", spec.channels(spec.depth - 1), deep, &spec),
            ResBlock::new(&mut b, "mid1", deep, deep, &spec),
        ];
        let decoder = (0..spec.depth)
            .map(|l| {
                let cin = spec.channels(l + 1) + spec.channels(l);
                ResBlock::new(&mut b, &format!("dec{l}"), cin, spec.channels(l), &spec)
            })
            .collect();
        let norm_out = GroupNorm::new(&mut b, "norm_out", spec.channels(0));
        let conv_out = Conv::new(&mut b, "conv_out", spec.channels(0), 1, k, true);
        Self {
            spec,
            builder: b,
            embed1,
            embed2,
            conv_in,
            encoder,
            middle,
            decoder,
            norm_out,
            conv_out,
        }
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn param_table(&self) -> &ParamTable {
        self.builder.table()
    }

    pub fn param_count(&self) -> usize {
        self.builder.table().total()
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        self.builder.materialize(rng)
    }

    /// Inference pass: `x` is `N x 1 x spatial`, `steps` holds one step per sample.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, steps: &[usize]) -> Tensor<T> {
        self.forward_train(params, x.clone(), steps).0
    }

    pub fn forward_train<T: Scalar>(
        &self,
        params: &[T],
        x: Tensor<T>,
        steps: &[usize],
    ) -> (Tensor<T>, Trace<T>) {
        assert_eq!(x.c, 1, "single-channel input");
        assert_eq!(steps.len(), x.n, "one step per sample");
        assert_eq!(params.len(), self.param_count(), "parameter vector length");
        let steps_embedded: Vec<T> = timestep_embedding(steps, self.spec.time_embed_dim)
            .into_iter()
            .map(T::lit)
            .collect();
        let e1 = self.embed1.forward(params, &steps_embedded);
        let e1_act = silu(&e1);
        let emb = self.embed2.forward(params, &e1_act);
        let emb_act = silu(&emb);

        let mut h = self.conv_in.forward(params, &x);
        let mut encoder = Vec::with_capacity(self.spec.depth);
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut skip_geoms = Vec::with_capacity(self.spec.depth);
        for block in &self.encoder {
            let (out, tr) = block.forward(params, h, &emb_act);
            encoder.push(tr);
            h = avg_pool(&out);
            skip_geoms.push(out.geom);
            skips.push(out);
        }
        let mut middle = Vec::with_capacity(2);
        for block in &self.middle {
            let (out, tr) = block.forward(params, h, &emb_act);
            middle.push(tr);
            h = out;
        }
        let mut decoder: Vec<Option<ResTrace<T>>> = (0..self.spec.depth).map(|_| None).collect();
        for l in (0..self.spec.depth).rev() {
            let cat = concat(&upsample(&h), &skips[l]);
            let (out, tr) = self.decoder[l].forward(params, cat, &emb_act);
            decoder[l] = Some(tr);
            h = out;
        }
        let (out_pre, out_norm) = self.norm_out.forward(params, &h);
        let out_act = silu_tensor(&out_pre);
        let y = self.conv_out.forward(params, &out_act);
        (
            y,
            Trace {
                steps_embedded,
                e1,
                e1_act,
                emb,
                emb_act,
                input: x,
                encoder,
                skip_geoms,
                middle,
                decoder,
                out_norm,
                out_pre,
                out_act,
            },
        )
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward<T: Scalar>(&self, params: &[T], trace: &Trace<T>, dout: &Tensor<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), params.len());
        let mut d_emb_act = vec![T::zero(); trace.emb_act.len()];
        let ds = self
            .conv_out
            .backward(params, &trace.out_act, dout, grads, true)
            .expect("dx");
        let dpre = silu_tensor_backward(&trace.out_pre, &ds);
        let mut dh = self.norm_out.backward(params, &trace.out_norm, &dpre, grads);

        let mut dskips = Vec::with_capacity(self.spec.depth);
        for l in 0..self.spec.depth {
            let tr = trace.decoder[l].as_ref().expect("decoder trace");
            let dcat = self.decoder[l].backward(params, tr, &dh, &trace.emb_act, &mut d_emb_act, grads);
            let (dup, dskip) = split(&dcat, self.spec.channels(l + 1));
            dskips.push(dskip);
            dh = upsample_backward(&dup, dup.geom.downsampled());
        }
        for (block, tr) in self.middle.iter().zip(&trace.middle).rev() {
            dh = block.backward(params, tr, &dh, &trace.emb_act, &mut d_emb_act, grads);
        }
        for l in (0..self.spec.depth).rev() {
            let mut fine = avg_pool_backward(&dh, trace.skip_geoms[l]);
            fine.add_assign(&dskips[l]);
            dh = self.encoder[l].backward(params, &trace.encoder[l], &fine, &trace.emb_act, &mut d_emb_act, grads);
        }
        self.conv_in.backward(params, &trace.input, &dh, grads, false);

        let d_emb = silu_backward(&trace.emb, &d_emb_act);
        let d_e1_act = self.embed2.backward(params, &trace.e1_act, &d_emb, grads);
        let d_e1 = silu_backward(&trace.e1, &d_e1_act);
        self.embed1.backward(params, &trace.steps_embedded, &d_e1, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(&[0, 3], 4);
        assert_eq!(e.len(), 8);
        assert_eq!(&e[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e[5] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn output_shape_matches_input_2d_and_3d() {
        for shape in [vec![16, 8], vec![4, 8, 8]] {
            let spec = UNetSpec {
                rank: shape.len(),
                base_channels: 4,
                depth: 2,
                time_embed_dim: 8,
            };
            let net = UNet::new(spec);
            let mut params: Vec<f32> = net.init_params(&mut rng::seeded(1));
            // zero-initialised output conv would hide a broken path
            for v in params.iter_mut().filter(|v| **v == 0.0) {
                *v = 0.01;
            }
            let geom = Geometry::from_shape(&shape);
            let x = Tensor::from_vec(2, 1, geom, (0..2 * geom.volume()).map(|i| (i as f32 * 0.1).sin()).collect());
            let y = net.forward(&params, &x, &[5, 900]);
            assert_eq!((y.n, y.c, y.geom), (2, 1, geom));
            assert!(y.data.iter().all(|v| v.is_finite()));
            assert!(y.data.iter().any(|v| *v != 0.0));
        }
    }
}
