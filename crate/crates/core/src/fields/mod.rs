//! The learnable scene representation: positional encoding, the canonical
//! density/color field, and per-frame invertible mapping networks built from
//! affine coupling layers conditioned on learned frame latents.

mod checkpoint;

pub use checkpoint::{load_model, save_model, CheckpointError};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

/// Bound on coupling log-scales before exponentiation: s = 3·tanh(raw).
/// Keeps exp(s) within [e^-3, e^3] so the algebraic inverse stays stable.
pub const SCALE_BOUND: f64 = 3.0;

#[derive(Debug, Error)]
pub enum FieldsError {
    #[error("frame index {frame} out of range (clip has {n_frames} frames)")]
    FrameOutOfRange { frame: usize, n_frames: usize },
}

/// Sinusoidal positional encoding on the tape. Output layout is the raw
/// point followed by interleaved sin/cos blocks, one pair per frequency
/// band: [x, sin(2^0 πx), cos(2^0 πx), ..., sin(2^{L-1} πx), cos(2^{L-1} πx)].
/// Feature length is n·(1 + 2L) for an n-dimensional input.
pub fn positional_encode(g: &mut Graph, x: Var, bands: usize) -> Var {
    if bands == 0 {
        return x;
    }
    let mut parts = Vec::with_capacity(1 + 2 * bands);
    parts.push(x);
    for l in 0..bands {
        let freq = std::f64::consts::PI * (1u64 << l) as f64;
        let scaled = g.scale(x, freq);
        parts.push(g.sin(scaled));
        parts.push(g.cos(scaled));
    }
    g.concat(&parts)
}

/// Feature length produced by `positional_encode` for an n-dim input.
pub fn encoded_len(input_dim: usize, bands: usize) -> usize {
    input_dim * (1 + 2 * bands)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum InitKind {
    Xavier,
    Zero,
}

/// A stack of affine layers with tanh between them (linear output).
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Register parameters for an MLP with the given layer widths
    /// (`dims[0]` inputs through `dims.last()` outputs). `zero_last`
    /// zero-initializes the output layer.
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut layers = Vec::new();
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let kind = if zero_last && k == dims.len() - 2 {
                InitKind::Zero
            } else {
                InitKind::Xavier
            };
            let w_data: Vec<f64> = match kind {
                InitKind::Zero => vec![0.0; fan_out * fan_in],
                InitKind::Xavier => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..fan_out * fan_in).map(|_| rng.gen_range(-a..a)).collect()
                }
            };
            let w = store
                .register(&format!("{prefix}.l{k}.w"), Tensor::matrix(fan_out, fan_in, w_data))
                .expect("parameter names are unique by construction");
            let b = store
                .register(&format!("{prefix}.l{k}.b"), Tensor::vector(vec![0.0; fan_out]))
                .expect("parameter names are unique by construction");
            layers.push((w, b));
        }
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let vw = g.param(*w);
            let vb = g.param(*b);
            h = g.affine(vw, vb, h);
            if k < last {
                h = g.tanh(h);
            }
        }
        h
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// Canonical density/color field: encoded point: MLP: (softplus σ, sigmoid c).
#[derive(Clone)]
pub struct CanonicalField {
    enc_bands: usize,
    net: Mlp,
}

impl CanonicalField {
    /// Query density and color at a canonical point on the tape.
    /// σ ≥ 0 (softplus) and each color channel in [0, 1] (sigmoid).
    pub fn query(&self, g: &mut Graph, u: Var) -> (Var, Var) {
        let feat = positional_encode(g, u, self.enc_bands);
        let raw = self.net.forward(g, feat);
        let sigma_raw = g.gather(raw, &[0]);
        let color_raw = g.gather(raw, &[1, 2, 3]);
        (g.softplus(sigma_raw), g.sigmoid(color_raw))
    }
}

/// One affine coupling layer over ℝ³: the `pass` coordinates are unchanged
/// and condition scale/translate sub-MLPs (together with the frame latent)
/// that transform the remaining coordinates. Exactly invertible.
#[derive(Clone)]
struct CouplingLayer {
    pass: Vec<usize>,
    trans: Vec<usize>,
    /// Gather indices that restore (x, y, z) order from [pass, trans].
    restore: Vec<usize>,
    scale_net: Mlp,
    translate_net: Mlp,
}

impl CouplingLayer {
    fn scales(&self, g: &mut Graph, cond: Var) -> (Var, Var) {
        let s_raw = self.scale_net.forward(g, cond);
        let s_bounded = g.tanh(s_raw);
        let s = g.scale(s_bounded, SCALE_BOUND);
        let t = self.translate_net.forward(g, cond);
        (s, t)
    }

    fn forward(&self, g: &mut Graph, x: Var, latent: Var) -> Var {
        let pass_v = g.gather(x, &self.pass);
        let trans_v = g.gather(x, &self.trans);
        let cond = g.concat(&[pass_v, latent]);
        let (s, t) = self.scales(g, cond);
        let es = g.exp(s);
        let scaled = g.mul(trans_v, es);
        let moved = g.add(scaled, t);
        let merged = g.concat(&[pass_v, moved]);
        g.gather(merged, &self.restore)
    }

    fn inverse(&self, g: &mut Graph, y: Var, latent: Var) -> Var {
        let pass_v = g.gather(y, &self.pass);
        let trans_v = g.gather(y, &self.trans);
        let cond = g.concat(&[pass_v, latent]);
        let (s, t) = self.scales(g, cond);
        let neg_s = g.neg(s);
        let es = g.exp(neg_s);
        let shifted = g.sub(trans_v, t);
        let back = g.mul(shifted, es);
        let merged = g.concat(&[pass_v, back]);
        g.gather(merged, &self.restore)
    }
}

/// Per-frame bijection between frame space and the canonical volume:
/// a stack of coupling layers conditioned on a learned latent per frame.
#[derive(Clone)]
pub struct MappingNetwork {
    layers: Vec<CouplingLayer>,
    latents: Vec<ParamId>,
}

impl MappingNetwork {
    fn latent(&self, g: &mut Graph, frame: usize) -> Result<Var, FieldsError> {
        let id = *self
            .latents
            .get(frame)
            .ok_or(FieldsError::FrameOutOfRange {
                frame,
                n_frames: self.latents.len(),
            })?;
        Ok(g.param(id))
    }

    pub fn n_frames(&self) -> usize {
        self.latents.len()
    }

    /// Map a frame-space point into the canonical volume.
    pub fn to_canonical(&self, g: &mut Graph, x: Var, frame: usize) -> Result<Var, FieldsError> {
        let latent = self.latent(g, frame)?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, latent);
        }
        Ok(h)
    }

    /// Exact algebraic inverse of `to_canonical` for the given frame.
    pub fn from_canonical(&self, g: &mut Graph, u: Var, frame: usize) -> Result<Var, FieldsError> {
        let latent = self.latent(g, frame)?;
        let mut h = u;
        for layer in self.layers.iter().rev() {
            h = layer.inverse(g, h, latent);
        }
        Ok(h)
    }
}

/// Architecture hyperparameters. `standard(n_frames)` gives the defaults
/// used by the CLI; tests and desk-scale runs shrink them freely.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_frames: usize,
    /// Hidden layers in the canonical field MLP.
    pub field_layers: usize,
    pub field_width: usize,
    /// Positional-encoding frequency bands L.
    pub enc_bands: usize,
    /// Number of affine coupling layers K.
    pub coupling_layers: usize,
    /// Hidden width of each coupling sub-MLP.
    pub coupling_hidden: usize,
    /// Hidden layers in each coupling sub-MLP.
    pub coupling_depth: usize,
    /// Dimension of the learned per-frame latent codes.
    pub latent_dim: usize,
}

impl ModelConfig {
    pub fn standard(n_frames: usize) -> ModelConfig {
        ModelConfig {
            n_frames,
            field_layers: 6,
            field_width: 128,
            enc_bands: 6,
            coupling_layers: 6,
            coupling_hidden: 64,
            coupling_depth: 2,
            latent_dim: 32,
        }
    }

    /// A reduced configuration for CPU-bound experiments and tests.
    pub fn compact(n_frames: usize) -> ModelConfig {
        ModelConfig {
            n_frames,
            field_layers: 2,
            field_width: 48,
            enc_bands: 4,
            coupling_layers: 4,
            coupling_hidden: 32,
            coupling_depth: 1,
            latent_dim: 8,
        }
    }
}

/// The full scene model: canonical field + mapping networks + frame latents,
/// with every parameter in one store.
pub struct SceneModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub field: CanonicalField,
    pub mapping: MappingNetwork,
}

impl SceneModel {
    /// Deterministic initialization from a seed. Hidden layers are
    /// Xavier-uniform; output layers of the field and of every coupling
    /// sub-MLP are zero, so every mapping starts as the identity and the
    /// field starts at σ = ln 2, c = (0.5, 0.5, 0.5).
    pub fn init(cfg: ModelConfig, seed: u64) -> SceneModel {
        assert!(cfg.n_frames >= 1, "model needs at least one frame");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let feat = encoded_len(3, cfg.enc_bands);
        let mut dims = vec![feat];
        dims.extend(std::iter::repeat(cfg.field_width).take(cfg.field_layers));
        dims.push(4); // σ + rgb
        let field_net = Mlp::register(&mut store, "field", &dims, true, &mut rng);

        let mut layers = Vec::new();
        for k in 0..cfg.coupling_layers {
            // Rotate which coordinate passes through; the other two transform.
            let p = k % 3;
            let pass = vec![p];
            let trans: Vec<usize> = (0..3).filter(|&i| i != p).collect();
            let order: Vec<usize> = pass.iter().chain(trans.iter()).copied().collect();
            let mut restore = vec![0; 3];
            for (slot, &coord) in order.iter().enumerate() {
                restore[coord] = slot;
            }
            let cond_dim = pass.len() + cfg.latent_dim;
            let mut sub_dims = vec![cond_dim];
            sub_dims.extend(std::iter::repeat(cfg.coupling_hidden).take(cfg.coupling_depth));
            sub_dims.push(trans.len());
            let scale_net =
                Mlp::register(&mut store, &format!("map.c{k}.scale"), &sub_dims, true, &mut rng);
            let translate_net =
                Mlp::register(&mut store, &format!("map.c{k}.shift"), &sub_dims, true, &mut rng);
            layers.push(CouplingLayer {
                pass,
                trans,
                restore,
                scale_net,
                translate_net,
            });
        }

        let mut latents = Vec::new();
        for i in 0..cfg.n_frames {
            let data: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let id = store
                .register(&format!("latent.f{i:05}"), Tensor::vector(data))
                .expect("latent names unique");
            latents.push(id);
        }

        SceneModel {
            cfg,
            params: store,
            field: CanonicalField {
                enc_bands: cfg.enc_bands,
                net: field_net,
            },
            mapping: MappingNetwork { layers, latents },
        }
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    pub fn n_frames(&self) -> usize {
        self.cfg.n_frames
    }

    /// Density and color at a canonical point (no gradients kept).
    pub fn query_canonical(&self, u: [f64; 3]) -> (f64, [f64; 3]) {
        let mut g = self.graph();
        let vu = g.vector(u.to_vec());
        let (sigma, color) = self.field.query(&mut g, vu);
        let c = g.value(color);
        (g.scalar_value(sigma), [c[0], c[1], c[2]])
    }

    /// Frame-space point to canonical volume.
    pub fn map_to_canonical(&self, x: [f64; 3], frame: usize) -> Result<[f64; 3], FieldsError> {
        let mut g = self.graph();
        let vx = g.vector(x.to_vec());
        let u = self.mapping.to_canonical(&mut g, vx, frame)?;
        let d = g.value(u);
        Ok([d[0], d[1], d[2]])
    }

    /// Canonical point back to the given frame's space.
    pub fn map_from_canonical(&self, u: [f64; 3], frame: usize) -> Result<[f64; 3], FieldsError> {
        let mut g = self.graph();
        let vu = g.vector(u.to_vec());
        let x = self.mapping.from_canonical(&mut g, vu, frame)?;
        let d = g.value(x);
        Ok([d[0], d[1], d[2]])
    }

    /// Overwrite every parameter with uniform(-a, a) noise. Used by tests
    /// that need a non-identity, non-degenerate model without training.
    pub fn randomize(&mut self, amplitude: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let len = self.params.value(id).len();
            let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
            self.params.set_value(id, data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn encode_zero_point() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.vector(vec![0.0, 0.0, 0.0]);
        let feat = positional_encode(&mut g, x, 2);
        let v = g.value(feat);
        assert_eq!(v.len(), encoded_len(3, 2));
        assert_eq!(&v[0..3], &[0.0, 0.0, 0.0]);
        // band blocks: sin then cos, per band
        assert_eq!(&v[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(&v[6..9], &[1.0, 1.0, 1.0]);
        assert_eq!(&v[9..12], &[0.0, 0.0, 0.0]);
        assert_eq!(&v[12..15], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn encode_zero_bands_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.vector(vec![0.1, -0.2, 0.3]);
        let feat = positional_encode(&mut g, x, 0);
        assert_eq!(g.value(feat), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn encode_half_hits_sin_peak() {
        // sin(π · 0.5) = 1 at band 0, coordinate 0.
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.vector(vec![0.5, 0.0, 0.0]);
        let feat = positional_encode(&mut g, x, 1);
        let v = g.value(feat);
        assert!((v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fresh_field_outputs_ln2_density_and_mid_gray() {
        let model = SceneModel::init(ModelConfig::compact(1), 0);
        for u in [[0.0, 0.0, 0.0], [0.3, -0.7, 0.5], [2.0, 1.0, -3.0]] {
            let (sigma, c) = model.query_canonical(u);
            assert!((sigma - 2.0f64.ln()).abs() < 1e-12);
            for ch in c {
                assert!((ch - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_nonnegative_under_random_params() {
        let mut model = SceneModel::init(ModelConfig::compact(1), 0);
        model.randomize(1.0, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let u = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let (sigma, c) = model.query_canonical(u);
            assert!(sigma >= 0.0);
            for ch in c {
                assert!((0.0..=1.0).contains(&ch));
            }
        }
    }

    #[test]
    fn identity_at_initialization() {
        let model = SceneModel::init(ModelConfig::compact(4), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for frame in 0..4 {
            for _ in 0..50 {
                let x = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let u = model.map_to_canonical(x, frame).unwrap();
                for (a, b) in x.iter().zip(u.iter()) {
                    assert!((a - b).abs() < 1e-15, "identity init violated");
                }
            }
        }
    }

    #[test]
    fn roundtrip_is_exact_inverse() {
        let mut model = SceneModel::init(ModelConfig::compact(3), 7);
        model.randomize(0.8, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let frame = rng.gen_range(0..3);
            let x = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let u = model.map_to_canonical(x, frame).unwrap();
            let back = model.map_from_canonical(u, frame).unwrap();
            let err = (0..3).map(|i| (x[i] - back[i]).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "worst round-trip error {worst}");
    }

    #[test]
    fn distinct_points_stay_distinct() {
        let mut model = SceneModel::init(ModelConfig::compact(2), 3);
        model.randomize(0.8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let a = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let b = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if a == b {
                continue;
            }
            let ua = model.map_to_canonical(a, 1).unwrap();
            let ub = model.map_to_canonical(b, 1).unwrap();
            assert_ne!(ua, ub, "bijection collapsed two points");
        }
    }

    #[test]
    fn frame_out_of_range_errors() {
        let model = SceneModel::init(ModelConfig::compact(2), 0);
        let err = model.map_to_canonical([0.0; 3], 2).unwrap_err();
        assert!(matches!(err, FieldsError::FrameOutOfRange { frame: 2, n_frames: 2 }));
        assert!(model.map_from_canonical([0.0; 3], 5).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn field_gradient_wrt_point_matches_finite_differences() {
        let mut model = SceneModel::init(ModelConfig::compact(1), 11);
        model.randomize(0.5, 12);
        let u0 = [0.21, -0.33, 0.47];
        let eval = |u: [f64; 3]| -> f64 {
            let mut g = model.graph();
            let vu = g.vector(u.to_vec());
            let (sigma, _) = model.field.query(&mut g, vu);
            g.scalar_value(sigma)
        };
        let analytic = {
            let mut g = model.graph();
            let vu = g.vector(u0.to_vec());
            let (sigma, _) = model.field.query(&mut g, vu);
            let (_, wrt) = g.backward_wrt(sigma, &[vu]).unwrap();
            wrt[0].clone()
        };
        let h = 1e-4;
        for dim in 0..3 {
            let mut up = u0;
            up[dim] += h;
            let mut dn = u0;
            dn[dim] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            assert!(
                rel_err(analytic[dim], fd) < 1e-3,
                "dim {dim}: analytic {} vs fd {fd}",
                analytic[dim]
            );
        }
    }

    #[test]
    fn mapping_gradients_match_finite_differences() {
        let mut model = SceneModel::init(ModelConfig::compact(2), 13);
        model.randomize(0.6, 14);
        let x0 = [0.4, -0.1, 0.25];

        let eval = |m: &SceneModel| -> f64 {
            let mut g = m.graph();
            let vx = g.vector(x0.to_vec());
            let u = m.mapping.to_canonical(&mut g, vx, 1).unwrap();
            let back = m.mapping.from_canonical(&mut g, u, 0).unwrap();
            let root = g.sq_norm(back);
            g.scalar_value(root)
        };

        let grads = {
            let mut g = model.graph();
            let vx = g.vector(x0.to_vec());
            let u = model.mapping.to_canonical(&mut g, vx, 1).unwrap();
            let back = model.mapping.from_canonical(&mut g, u, 0).unwrap();
            let root = g.sq_norm(back);
            g.backward(root).unwrap()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut checked = 0;
        let ids: Vec<ParamId> = model.params.ids().collect();
        while checked < 40 {
            let id = ids[rng.gen_range(0..ids.len())];
            let analytic = match grads.get(id) {
                Some(gr) => gr.to_vec(),
                None => continue,
            };
            let idx = rng.gen_range(0..analytic.len());
            if analytic[idx].abs() < 1e-10 {
                continue; // zero-gradient components carry no signal for the ratio test
            }
            let h = 1e-4;
            model.params.perturb(id, idx, h);
            let up = eval(&model);
            model.params.perturb(id, idx, -2.0 * h);
            let dn = eval(&model);
            model.params.perturb(id, idx, h);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                rel_err(analytic[idx], fd) < 1e-3,
                "param {} comp {idx}: analytic {} vs fd {}",
                model.params.name_of(id),
                analytic[idx],
                fd
            );
            checked += 1;
        }
    }
}
