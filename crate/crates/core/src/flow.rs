//! Flow matching on the straight path `x_t = (1 − t)·x₀ + t·ε`, the noise-limit policy for
//! image-to-text samples, and a classifier-free-guidance Euler sampler.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::synth::{unpatchify, ImageLatent, SampleKind, TokenId, N_PATCHES, PATCH, PATCH_DIM};
use crate::tensor::Tensor;

pub const DEFAULT_GUIDANCE: f64 = 5.5;
pub const DEFAULT_STEPS: usize = 50;

/// One noising draw with its regression target `v* = ε − x₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor<f32>,
    pub eps: Tensor<f32>,
    pub t: f64,
    pub xt: Tensor<f32>,
    pub v_target: Tensor<f32>,
}

impl FlowSample {
    pub fn from_parts(x0: Tensor<f32>, eps: Tensor<f32>, t: f64) -> Result<Self> {
        if x0.shape() != eps.shape() {
            return Err(Error::dim("flow_sample", x0.shape(), eps.shape()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract("flow time outside [0, 1]"));
        }
        let tf = t as f32;
        let a = 1.0 - tf;
        let xt: Vec<f32> = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + tf * e).collect();
        let v: Vec<f32> = x0.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
        Ok(Self {
            xt: Tensor::new(x0.shape(), xt)?,
            v_target: Tensor::new(x0.shape(), v)?,
            x0,
            eps,
            t,
        })
    }
}

pub fn make_flow_sample(x0: &Tensor<f32>, t: f64, rng: &mut RngStream) -> Result<FlowSample> {
    let eps = Tensor::new(x0.shape(), rng.normal_vec::<f32>(x0.len(), 1.0))?;
    FlowSample::from_parts(x0.clone(), eps, t)
}

/// Upper limit of the diffusion time applied to images inside image-to-text samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePolicy {
    pub t_max_i2t: f64,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self { t_max_i2t: 0.0 }
    }
}

impl NoisePolicy {
    /// The swept settings: clean, 25%, 50%, 75% and full noise.
    pub const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_max_i2t) {
            return Err(Error::config(alloc::format!(
                "i2t noise limit {} outside [0, 1]",
                self.t_max_i2t
            )));
        }
        Ok(())
    }

    /// Whether an image inside a sample of `kind` at time `t` is a diffusion target.
    pub fn supervises_image(&self, kind: SampleKind, t: f64) -> bool {
        match kind {
            SampleKind::T2I => true,
            SampleKind::I2T => t > 0.0,
            SampleKind::TextOnly => false,
        }
    }
}

/// T2I times are uniform on (0, 1]; I2T times uniform on [0, t_max), exactly 0 when t_max = 0.
pub fn draw_timestep(kind: SampleKind, policy: &NoisePolicy, rng: &mut RngStream) -> f64 {
    match kind {
        SampleKind::T2I => 1.0 - rng.uniform(),
        SampleKind::I2T if policy.t_max_i2t == 0.0 => 0.0,
        SampleKind::I2T => policy.t_max_i2t * rng.uniform(),
        SampleKind::TextOnly => 0.0,
    }
}

/// `v_u + s·(v_c − v_u)`, returning either input unchanged at s = 1 or s = 0.
pub fn cfg_velocity(v_cond: &[f32], v_uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::dim("cfg_velocity", &[v_cond.len()], &[v_uncond.len()]));
    }
    if s == 1.0 {
        return Ok(v_cond.to_vec());
    }
    if s == 0.0 {
        return Ok(v_uncond.to_vec());
    }
    let s = s as f32;
    Ok(v_cond.iter().zip(v_uncond).map(|(&c, &u)| u + s * (c - u)).collect())
}

/// Something that predicts velocities for noised patch sets. `captions[i] = None` asks for
/// the unconditional prediction.
pub trait VelocityField {
    fn velocities(&self, xs: &[Tensor<f32>], t: f64, captions: &[Option<&[TokenId]>]) -> Result<Vec<Tensor<f32>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }
}

/// Euler integration of `dx/dt = v` from t = 1 to 0 for each caption, starting from the
/// noise of `rng.split_indexed("sample", i)`. Outputs are clamped to [−1, 1]; a non-finite
/// value is an error rather than being clamped away.
pub fn sample_images(
    field: &dyn VelocityField,
    captions: &[Vec<TokenId>],
    cfg: &SamplerConfig,
    rng: &RngStream,
) -> Result<Vec<ImageLatent>> {
    if cfg.steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    let n = captions.len();
    let mut xs: Vec<Tensor<f32>> = (0..n)
        .map(|i| {
            let mut r = rng.split_indexed("sample", i as u64);
            Tensor::new(&[N_PATCHES, PATCH_DIM], r.normal_vec::<f32>(N_PATCHES * PATCH_DIM, 1.0))
        })
        .collect::<Result<_>>()?;
    let dt = 1.0 / cfg.steps as f64;
    let guided = cfg.guidance != 1.0;
    let mut conds: Vec<Option<&[TokenId]>> = captions.iter().map(|c| Some(c.as_slice())).collect();
    if guided {
        conds.extend(core::iter::repeat_n(None, n));
    }
    for k in 0..cfg.steps {
        let t = 1.0 - k as f64 * dt;
        let inputs: Vec<Tensor<f32>> = if guided {
            xs.iter().chain(xs.iter()).cloned().collect()
        } else {
            xs.clone()
        };
        let vs = field.velocities(&inputs, t, &conds)?;
        for (i, x) in xs.iter_mut().enumerate() {
            let v = if guided {
                cfg_velocity(vs[i].data(), vs[n + i].data(), cfg.guidance)?
            } else {
                vs[i].data().to_vec()
            };
            let step = dt as f32;
            x.data_mut().iter_mut().zip(&v).for_each(|(a, &b)| *a -= step * b);
        }
    }
    xs.into_iter()
        .map(|x| {
            if !x.all_finite() {
                return Err(Error::NonFinite("sampled image".into()));
            }
            let mut img = unpatchify(&x, PATCH)?;
            img.clamp();
            Ok(img)
        })
        .collect()
}

pub fn sample_image(
    field: &dyn VelocityField,
    caption: &[TokenId],
    cfg: &SamplerConfig,
    rng: &RngStream,
) -> Result<ImageLatent> {
    Ok(sample_images(field, &[caption.to_vec()], cfg, rng)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{patchify, render_scene, SceneSpec};

    /// Exact velocity of the flow whose data distribution is the single point `x0`.
    struct SinglePoint(Tensor<f32>);

    impl VelocityField for SinglePoint {
        fn velocities(&self, xs: &[Tensor<f32>], t: f64, _: &[Option<&[TokenId]>]) -> Result<Vec<Tensor<f32>>> {
            Ok(xs
                .iter()
                .map(|x| {
                    let d = x.data().iter().zip(self.0.data()).map(|(&a, &b)| (a - b) / t as f32).collect();
                    Tensor::new(x.shape(), d).unwrap()
                })
                .collect())
        }
    }

    fn x0() -> Tensor<f32> {
        patchify(&render_scene(&SceneSpec::from_index(20).unwrap()), 2).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let mut rng = RngStream::new(1);
        let a = make_flow_sample(&x0(), 0.0, &mut rng).unwrap();
        assert_eq!(a.xt, a.x0);
        let b = make_flow_sample(&x0(), 1.0, &mut rng).unwrap();
        assert_eq!(b.xt, b.eps);
    }

    #[test]
    fn reconstruction_identity() {
        let mut rng = RngStream::new(2);
        for _ in 0..200 {
            let t = rng.uniform();
            let s = make_flow_sample(&x0(), t, &mut rng).unwrap();
            for ((&xt, &v), &x) in s.xt.data().iter().zip(s.v_target.data()).zip(s.x0.data()) {
                assert!((xt as f64 - t * v as f64 - x as f64).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn velocity_target_ignores_time() {
        let eps = Tensor::full(&[64, 12], 0.3f32);
        let a = FlowSample::from_parts(x0(), eps.clone(), 0.2).unwrap();
        let b = FlowSample::from_parts(x0(), eps, 0.9).unwrap();
        assert_eq!(a.v_target, b.v_target);
    }

    #[test]
    fn timestep_policies() {
        let mut rng = RngStream::new(3);
        let zero = NoisePolicy { t_max_i2t: 0.0 };
        assert!((0..1000).all(|_| draw_timestep(SampleKind::I2T, &zero, &mut rng) == 0.0));
        let half = NoisePolicy { t_max_i2t: 0.5 };
        let draws: Vec<f64> = (0..10_000).map(|_| draw_timestep(SampleKind::I2T, &half, &mut rng)).collect();
        assert!(draws.iter().all(|&t| (0.0..=0.5).contains(&t)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.25).abs() < 0.01, "{mean}");
        assert!((0..10_000).all(|_| draw_timestep(SampleKind::T2I, &half, &mut rng) > 0.0));
        assert!(NoisePolicy { t_max_i2t: 1.5 }.validate().is_err());
    }

    #[test]
    fn guidance_formula() {
        let c = [1.0f32, -2.0, 0.5];
        let u = [0.25f32, 4.0, -1.0];
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u.to_vec());
        let v = cfg_velocity(&c, &u, 5.5).unwrap();
        for i in 0..3 {
            assert!((v[i] - (u[i] + 5.5 * (c[i] - u[i]))).abs() < 1e-6);
        }
        assert_eq!(SamplerConfig::default().guidance, 5.5);
    }

    #[test]
    fn one_exact_step_lands_on_the_point() {
        let field = SinglePoint(x0());
        let cfg = SamplerConfig { steps: 1, guidance: 1.0 };
        let img = sample_image(&field, &[], &cfg, &RngStream::new(4)).unwrap();
        let target = render_scene(&SceneSpec::from_index(20).unwrap());
        assert!(img.mean_abs_error(&target) < 1e-6);
    }

    #[test]
    fn sampling_is_deterministic() {
        let field = SinglePoint(x0());
        let cfg = SamplerConfig { steps: 3, guidance: 2.0 };
        let a = sample_image(&field, &[], &cfg, &RngStream::new(5)).unwrap();
        let b = sample_image(&field, &[], &cfg, &RngStream::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_field_is_an_error() {
        struct Nan;
        impl VelocityField for Nan {
            fn velocities(&self, xs: &[Tensor<f32>], _: f64, _: &[Option<&[TokenId]>]) -> Result<Vec<Tensor<f32>>> {
                Ok(xs.iter().map(|x| Tensor::full(x.shape(), f32::NAN)).collect())
            }
        }
        let r = sample_image(&Nan, &[], &SamplerConfig::default(), &RngStream::new(0));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
