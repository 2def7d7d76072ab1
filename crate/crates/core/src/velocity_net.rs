//! The learnable velocity field: convolutional embedding with learned
//! positions, a pre-norm transformer encoder, a time-conditioned decoder
//! stack (modulated self-attention, cross-attention against the
//! perturbed-path context, and a sparse expert mixture), and a
//! convolutional projector back to feature space. Clean and perturbed
//! inputs share one parameter set unless explicitly untied.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flowmath::VelocityField;
use crate::frm_moe::{self, FrmConfig};
use crate::nn::{self, Binding, ParamSet};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub enc_layers: usize,
    /// 0 removes the decoder stack entirely (the projector then reads
    /// the encoder output directly).
    pub dec_layers: usize,
    pub frm: FrmConfig,
    pub conv_kernel: usize,
    pub time_embed_dim: usize,
    /// Replace the expert mixture in each decoder block with one dense
    /// feedforward of the same width.
    #[serde(default)]
    pub dense_ffn: bool,
    /// Give the perturbed path its own embedding/encoder parameters.
    #[serde(default)]
    pub untied_paths: bool,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.n_heads < 1 || self.head_dim < 1 || self.enc_layers < 1 {
            return Err(Error::config("n_heads, head_dim, enc_layers must be >= 1"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("conv_kernel must be odd"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim must be even and >= 2"));
        }
        if self.frm.d_model != self.d_model {
            return Err(Error::config("frm.d_model must equal d_model"));
        }
        self.frm.validate()
    }
}

/// Intermediate activations of one forward pass.
pub struct ActivationSet<'t> {
    pub h: Var<'t>,
    pub e: Var<'t>,
    pub d: Var<'t>,
}

/// Tape handles for the dual-path outputs of one training sample.
pub struct DualPathVars<'t> {
    pub v: Var<'t>,
    pub v_pert: Var<'t>,
    pub delta: Var<'t>,
    pub v_final: Var<'t>,
    pub gate: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub cfg: NetConfig,
    pub seq_len: usize,
    pub data_dim: usize,
    pub params: ParamSet,
}

const N_MODULATIONS: usize = 7;

impl VelocityNet {
    pub fn new(cfg: NetConfig, seq_len: usize, data_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if seq_len < 1 || data_dim < 1 {
            return Err(Error::config("seq_len and data_dim must be >= 1"));
        }
        let params = Self::init_params(&cfg, seq_len, data_dim, seed);
        Ok(VelocityNet {
            cfg,
            seq_len,
            data_dim,
            params,
        })
    }

    /// Rebuild a net around restored parameters, checking that the key
    /// set and shapes match what the config demands.
    pub fn from_params(
        cfg: NetConfig,
        seq_len: usize,
        data_dim: usize,
        params: ParamSet,
    ) -> Result<Self> {
        let reference = Self::new(cfg, seq_len, data_dim, 0)?;
        let mut expected: Vec<&String> = reference.params.names().collect();
        let mut got: Vec<&String> = params.names().collect();
        expected.sort();
        got.sort();
        if expected != got {
            for name in &expected {
                if !params.contains(name) {
                    return Err(Error::checkpoint(format!("missing tensor {name}")));
                }
            }
            for name in &got {
                if !reference.params.contains(name) {
                    return Err(Error::checkpoint(format!("unexpected tensor {name}")));
                }
            }
        }
        for (name, tensor) in params.iter() {
            let want = reference.params.get(name).dim();
            if tensor.dim() != want {
                return Err(Error::checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.dim(),
                    want
                )));
            }
        }
        Ok(VelocityNet {
            cfg: reference.cfg,
            seq_len,
            data_dim,
            params,
        })
    }

    fn init_params(cfg: &NetConfig, seq_len: usize, data_dim: usize, seed: u64) -> ParamSet {
        let mut set = ParamSet::new();
        let mut rng = rng::derive(seed, Domain::NetInit, 0);
        let d = cfg.d_model;

        nn::init_conv(&mut set, &mut rng, "embed", cfg.conv_kernel, data_dim, d);
        set.insert("pos", nn::uniform(&mut rng, seq_len, d, 0.02));
        for l in 0..cfg.enc_layers {
            Self::init_encoder_layer(&mut set, &mut rng, &format!("enc{l}"), cfg);
        }
        if cfg.untied_paths {
            nn::init_conv(&mut set, &mut rng, "pembed", cfg.conv_kernel, data_dim, d);
            set.insert("ppos", nn::uniform(&mut rng, seq_len, d, 0.02));
            for l in 0..cfg.enc_layers {
                Self::init_encoder_layer(&mut set, &mut rng, &format!("penc{l}"), cfg);
            }
        }
        for l in 0..cfg.dec_layers {
            let name = format!("dec{l}");
            nn::init_linear(&mut set, &mut rng, &format!("{name}.tmlp.in"), d, d);
            nn::init_linear_zero(&mut set, &format!("{name}.tmlp.out"), d, N_MODULATIONS * d);
            nn::init_attention(&mut set, &mut rng, &format!("{name}.self"), d);
            nn::init_attention(&mut set, &mut rng, &format!("{name}.cross"), d);
            if cfg.dense_ffn {
                nn::init_ffn(
                    &mut set,
                    &mut rng,
                    &format!("{name}.dense"),
                    d,
                    cfg.frm.d_hidden,
                );
                nn::init_layer_norm(&mut set, &format!("{name}.denseln"), d);
            } else {
                frm_moe::init_frm(&mut set, &mut rng, &format!("{name}.frm"), &cfg.frm);
            }
        }
        nn::init_conv(&mut set, &mut rng, "project", cfg.conv_kernel, d, data_dim);
        nn::init_linear_zero(&mut set, "gate", data_dim, data_dim);
        set
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn has_frm_params(&self) -> bool {
        self.params.names().any(|n| n.contains(".frm."))
    }

    fn init_encoder_layer(
        set: &mut ParamSet,
        rng: &mut rand_chacha::ChaCha20Rng,
        name: &str,
        cfg: &NetConfig,
    ) {
        let d = cfg.d_model;
        nn::init_layer_norm(set, &format!("{name}.ln1"), d);
        nn::init_attention(set, rng, &format!("{name}.attn"), d);
        nn::init_layer_norm(set, &format!("{name}.ln2"), d);
        nn::init_ffn(set, rng, &format!("{name}.ffn"), d, 4 * d);
    }

    fn check_finite(x: Var<'_>, what: &str) -> Result<()> {
        if x.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{what} produced non-finite activations"
            )));
        }
        Ok(())
    }

    /// Convolutional embedding plus learned positions.
    pub fn embed<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        self.embed_with(p, x, "embed", "pos")
    }

    fn embed_with<'t>(&self, p: &Binding<'t>, x: Var<'t>, conv: &str, pos: &str) -> Var<'t> {
        nn::conv1d_same(x, p, conv, self.cfg.conv_kernel).add(p.var(pos))
    }

    /// Pre-norm transformer encoder (no time conditioning).
    pub fn encode<'t>(&self, p: &Binding<'t>, h: Var<'t>) -> Result<Var<'t>> {
        self.encode_with(p, h, "enc")
    }

    fn encode_with<'t>(&self, p: &Binding<'t>, h: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let mut x = h;
        for l in 0..self.cfg.enc_layers {
            let name = format!("{prefix}{l}");
            let a_in = nn::layer_norm_affine(x, p, &format!("{name}.ln1"));
            x = x.add(nn::attention(
                a_in,
                a_in,
                p,
                &format!("{name}.attn"),
                self.cfg.n_heads,
                self.cfg.head_dim,
            ));
            let f_in = nn::layer_norm_affine(x, p, &format!("{name}.ln2"));
            x = x.add(nn::ffn(f_in, p, &format!("{name}.ffn")));
            Self::check_finite(x, &format!("encoder layer {l}"))?;
        }
        Ok(x)
    }

    /// Time-conditioned decoder: per block, modulated self-attention,
    /// modulated cross-attention against `ctx`, then the gated expert
    /// mixture. All modulation vectors come from a per-block two-layer
    /// map of the sinusoidal time embedding whose final layer starts at
    /// zero, so the whole stack is the identity at initialization.
    pub fn decode<'t>(
        &self,
        tape: &'t Tape,
        p: &Binding<'t>,
        e: Var<'t>,
        t: f64,
        ctx: Var<'t>,
    ) -> Result<Var<'t>> {
        if self.cfg.dec_layers == 0 {
            return Ok(e);
        }
        let temb = tape.input(nn::time_embedding(t, self.cfg.time_embed_dim));
        let d = self.cfg.d_model;
        let mut x = e;
        for l in 0..self.cfg.dec_layers {
            let name = format!("dec{l}");
            let hidden = nn::linear(temb, p, &format!("{name}.tmlp.in")).silu();
            let mods = nn::linear(hidden, p, &format!("{name}.tmlp.out"));
            let m = |k: usize| mods.slice_cols(k * d, d);

            let sa_in = nn::modulate(x.layer_norm_rows(), m(0), m(1));
            let sa = nn::attention(
                sa_in,
                sa_in,
                p,
                &format!("{name}.self"),
                self.cfg.n_heads,
                self.cfg.head_dim,
            );
            x = x.add(sa.mul_row(m(2)));

            let ca_in = nn::modulate(x.layer_norm_rows(), m(3), m(4));
            let ca = nn::attention(
                ca_in,
                ctx,
                p,
                &format!("{name}.cross"),
                self.cfg.n_heads,
                self.cfg.head_dim,
            );
            x = x.add(ca.mul_row(m(5)));

            let block = if self.cfg.dense_ffn {
                let f = nn::ffn(x, p, &format!("{name}.dense"));
                nn::layer_norm_affine(x.add(f), p, &format!("{name}.denseln"))
            } else {
                frm_moe::frm_forward(x, p, &format!("{name}.frm"), &self.cfg.frm)
                    .map_err(|err| Error::numeric(format!("decoder block {l}: {err}")))?
            };
            x = x.add(block.mul_row(m(6)));
            Self::check_finite(x, &format!("decoder block {l}"))?;
        }
        Ok(x)
    }

    /// Convolutional projection from model width back to feature space.
    pub fn project<'t>(&self, p: &Binding<'t>, d: Var<'t>) -> Var<'t> {
        nn::conv1d_same(d, p, "project", self.cfg.conv_kernel)
    }

    /// Correction gate `w(v)`: elementwise sigmoid of a per-feature
    /// affine map of the clean velocity.
    pub fn gate_expr<'t>(&self, p: &Binding<'t>, v: Var<'t>) -> Var<'t> {
        nn::linear(v, p, "gate").sigmoid()
    }

    /// Single-input evaluation `v(x, t)`: the decoder attends to the
    /// input's own encoding.
    pub fn single_path<'t>(
        &self,
        tape: &'t Tape,
        p: &Binding<'t>,
        x: Var<'t>,
        t: f64,
    ) -> Result<Var<'t>> {
        let e = self.encode(p, self.embed(p, x))?;
        let d = self.decode(tape, p, e, t, e)?;
        Ok(self.project(p, d))
    }

    /// Training-time evaluation of both paths: the clean trajectory is
    /// decoded against the perturbed encoding as context, the perturbed
    /// trajectory against itself, and the refined velocity combines them
    /// through the learned gate.
    pub fn dual_path<'t>(
        &self,
        tape: &'t Tape,
        p: &Binding<'t>,
        xt: Var<'t>,
        xt_pert: Var<'t>,
        t: f64,
        alpha: f64,
    ) -> Result<DualPathVars<'t>> {
        let e = self.encode(p, self.embed(p, xt))?;
        let ep = if self.cfg.untied_paths {
            let h = self.embed_with(p, xt_pert, "pembed", "ppos");
            self.encode_with(p, h, "penc")?
        } else {
            self.encode(p, self.embed(p, xt_pert))?
        };
        let d = self.decode(tape, p, e, t, ep)?;
        let dp = self.decode(tape, p, ep, t, ep)?;
        let v = self.project(p, d);
        let v_pert = self.project(p, dp);
        let gate = self.gate_expr(p, v);
        let delta = v_pert.sub(v);
        let v_final = v.add(delta.mul(gate).scale(alpha));
        Ok(DualPathVars {
            v,
            v_pert,
            delta,
            v_final,
            gate,
        })
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.seq_len, self.data_dim) {
            return Err(Error::argument(format!(
                "input shape {:?} does not match network ({}, {})",
                x.dim(),
                self.seq_len,
                self.data_dim
            )));
        }
        Ok(())
    }

    /// Evaluate `v(x, t)` outside any training graph.
    pub fn velocity_value(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let v = self.single_path(&tape, &p, tape.input(x.clone()), t)?;
        Ok(v.value())
    }

    /// Evaluate the correction gate outside any training graph.
    pub fn gate_value(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(v)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        Ok(self.gate_expr(&p, tape.input(v.clone())).value())
    }
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self.velocity_value(x, t)
    }

    fn gate(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        self.gate_value(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            enc_layers: 1,
            dec_layers: 1,
            frm: FrmConfig {
                n_experts: 2,
                top_k: 1,
                d_model: 8,
                d_hidden: 16,
            },
            conv_kernel: 3,
            time_embed_dim: 8,
            dense_ffn: false,
            untied_paths: false,
        }
    }

    fn sines_cfg() -> NetConfig {
        NetConfig {
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            enc_layers: 1,
            dec_layers: 2,
            frm: FrmConfig {
                n_experts: 4,
                top_k: 2,
                d_model: 64,
                d_hidden: 256,
            },
            conv_kernel: 3,
            time_embed_dim: 64,
            dense_ffn: false,
            untied_paths: false,
        }
    }

    fn randn(rows: usize, cols: usize, salt: u64) -> Array2<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::derive(salt, Domain::NetInit, 700);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut r))
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.d_model = 9;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.conv_kernel = 2;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.frm.top_k = 5;
        assert!(c.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn parameter_count_matches_hand_tally() {
        let net = VelocityNet::new(sines_cfg(), 24, 5, 0).unwrap();
        // embed 3*5*64+64, pos 24*64, encoder layer
        // (2*128 + 4*(64*64+64) + 64*256+256+256*64+64), two decoder
        // layers (64*64+64 + 64*448+448 + 2*4*(64*64+64) + router 4*64 +
        // 4 experts (64*256+256+256*64+64) + ln 128), projector
        // 3*64*5+5, gate 5*5+5.
        assert_eq!(net.n_params(), 452_131);
    }

    #[test]
    fn no_td_removes_decoder_params() {
        let mut c = sines_cfg();
        c.dec_layers = 0;
        let net = VelocityNet::new(c, 24, 5, 0).unwrap();
        assert!(net.params.names().all(|n| !n.starts_with("dec")));
        assert!(!net.has_frm_params());
    }

    #[test]
    fn dense_ffn_swaps_expert_params() {
        let mut c = tiny_cfg();
        c.dense_ffn = true;
        let net = VelocityNet::new(c, 6, 2, 0).unwrap();
        assert!(!net.has_frm_params());
        assert!(net.params.contains("dec0.dense.in.w"));
    }

    #[test]
    fn decode_is_identity_at_init() {
        let net = VelocityNet::new(tiny_cfg(), 6, 2, 3).unwrap();
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let e = tape.input(randn(6, 8, 1));
        let ctx = tape.input(randn(6, 8, 2));
        let out = net.decode(&tape, &p, e, 0.37, ctx).unwrap();
        let (a, b) = (out.value(), e.value());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn decode_depends_on_t_once_conditioning_is_active() {
        let mut net = VelocityNet::new(tiny_cfg(), 6, 2, 3).unwrap();
        *net.params.get_mut("dec0.tmlp.out.w") = randn(8, 56, 4) * 0.1;
        let run = |t: f64| {
            let tape = Tape::new();
            let p = net.params.bind(&tape);
            let e = tape.input(randn(6, 8, 5));
            net.decode(&tape, &p, e, t, e).unwrap().value()
        };
        let diff = (&run(0.1) - &run(0.9))
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(diff > 0.0, "decoder ignores t");
    }

    #[test]
    fn encoder_with_zeroed_output_weights_is_identity() {
        let mut net = VelocityNet::new(tiny_cfg(), 6, 2, 5).unwrap();
        net.params.get_mut("enc0.attn.o.w").fill(0.0);
        net.params.get_mut("enc0.ffn.out.w").fill(0.0);
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let h = tape.input(randn(6, 8, 6));
        let out = net.encode(&p, h).unwrap();
        for (x, y) in out.value().iter().zip(h.value().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn dual_path_identical_inputs_refine_to_clean_velocity() {
        let net = VelocityNet::new(tiny_cfg(), 6, 2, 7).unwrap();
        let x = randn(6, 2, 8);
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let xv = tape.input(x.clone());
        let xp = tape.input(x);
        let out = net.dual_path(&tape, &p, xv, xp, 0.4, 1.0).unwrap();
        let v = out.v.value();
        let vf = out.v_final.value();
        assert_eq!(v.mapv(f64::to_bits), vf.mapv(f64::to_bits));
        assert!(out.gate.value().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn velocity_value_shape_and_determinism() {
        let net = VelocityNet::new(tiny_cfg(), 6, 2, 9).unwrap();
        let x = randn(6, 2, 10);
        let a = net.velocity_value(&x, 0.5).unwrap();
        let b = net.velocity_value(&x, 0.5).unwrap();
        assert_eq!(a.dim(), (6, 2));
        assert_eq!(a.mapv(f64::to_bits), b.mapv(f64::to_bits));
        assert!(net.velocity_value(&randn(5, 2, 11), 0.5).is_err());
    }

    #[test]
    fn from_params_round_trip_and_validation() {
        let net = VelocityNet::new(tiny_cfg(), 6, 2, 12).unwrap();
        let rebuilt = VelocityNet::from_params(tiny_cfg(), 6, 2, net.params.clone()).unwrap();
        assert_eq!(rebuilt.params, net.params);

        let mut missing = ParamSet::new();
        for (name, value) in net.params.iter() {
            if name != "gate.w" {
                missing.insert(name.clone(), value.clone());
            }
        }
        let err = VelocityNet::from_params(tiny_cfg(), 6, 2, missing).unwrap_err();
        assert!(err.to_string().contains("gate.w"), "{err}");
    }

    #[test]
    fn untied_paths_add_parallel_encoder() {
        let mut c = tiny_cfg();
        c.untied_paths = true;
        let net = VelocityNet::new(c, 6, 2, 13).unwrap();
        assert!(net.params.contains("penc0.attn.q.w"));
        let x = randn(6, 2, 14);
        let xp = randn(6, 2, 15);
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let out = net
            .dual_path(&tape, &p, tape.input(x), tape.input(xp), 0.2, 1.0)
            .unwrap();
        assert!(out.v_final.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn small_net_gradcheck_spot() {
        let net = VelocityNet::new(tiny_cfg(), 4, 2, 16).unwrap();
        let xt = randn(4, 2, 17);
        let xp = &xt + &(randn(4, 2, 18) * 0.1);
        let target = randn(4, 2, 19);
        let loss_of = |params: &ParamSet| {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let out = net
                .dual_path(
                    &tape,
                    &p,
                    tape.input(xt.clone()),
                    tape.input(xp.clone()),
                    0.3,
                    1.0,
                )
                .unwrap();
            let r = out.v_final.sub(tape.input(target.clone()));
            r.mul(r).mean_all().value()[[0, 0]]
        };
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let out = net
            .dual_path(
                &tape,
                &p,
                tape.input(xt.clone()),
                tape.input(xp.clone()),
                0.3,
                1.0,
            )
            .unwrap();
        let r = out.v_final.sub(tape.input(target.clone()));
        let grads = backward(r.mul(r).mean_all());
        let by_name = p.gradients(&grads);

        let h = 1e-5;
        for name in [
            "embed.w1",
            "enc0.attn.q.w",
            "dec0.tmlp.out.w",
            "gate.w",
            "project.w0",
        ] {
            let tensor = net.params.get(name).clone();
            let mut checked = 0;
            for i in 0..tensor.nrows() {
                for j in 0..tensor.ncols() {
                    if (i * 31 + j * 7) % 17 != 0 {
                        continue; // spot-check a deterministic subset
                    }
                    checked += 1;
                    let eval = |delta: f64| {
                        let mut ps = net.params.clone();
                        ps.get_mut(name)[[i, j]] += delta;
                        loss_of(&ps)
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let analytic = by_name[name][[i, j]];
                    assert!(
                        (analytic - numeric).abs()
                            < 1e-6 + 1e-3 * numeric.abs().max(analytic.abs()),
                        "{name}[{i},{j}]: {analytic} vs {numeric}"
                    );
                }
            }
            assert!(checked > 0, "{name}: no entries sampled");
        }
    }
}
