//! Independent oracles, stub predictors and the cached toy checkpoint.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use s2m::cli::{FileConfig, CACHE_ENV};
use s2m::denoiser::{eps_loss_and_grad, load_checkpoint, NoisePredictor};
use s2m::diffusion::NoiseSchedule;
use s2m::nn::{Geometry, Tensor, UNet, UNetSpec};
use s2m::rng;
use s2m::tensor::{ImageTensor, ValueRange};
use s2m::Result;

use rand::Rng;

/// Double-double arithmetic (about 106 bits) for the schedule oracle.
pub mod dd {
    #[derive(Clone, Copy, Debug)]
    pub struct Dd(pub f64, pub f64);

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    impl Dd {
        pub fn from(x: f64) -> Self {
            Dd(x, 0.0)
        }

        pub fn add(self, o: Dd) -> Dd {
            let (s, e) = two_sum(self.0, o.0);
            let (hi, lo) = two_sum(s, e + self.1 + o.1);
            Dd(hi, lo)
        }

        pub fn neg(self) -> Dd {
            Dd(-self.0, -self.1)
        }

        pub fn mul(self, o: Dd) -> Dd {
            let (p, e) = two_prod(self.0, o.0);
            let (hi, lo) = two_sum(p, e + self.0 * o.1 + self.1 * o.0);
            Dd(hi, lo)
        }

        /// Quotient by a small positive integer, refined once.
        pub fn div_int(self, d: u32) -> Dd {
            let q1 = self.0 / f64::from(d);
            let r = self.add(Dd::from(q1).mul(Dd::from(f64::from(d))).neg());
            let q2 = r.0 / f64::from(d);
            let (hi, lo) = two_sum(q1, q2);
            Dd(hi, lo)
        }

        pub fn value(self) -> f64 {
            self.0 + self.1
        }
    }

    /// `n / 10^k` carried in double-double.
    pub fn decimal(n: u32, k: u32) -> Dd {
        let mut v = Dd::from(f64::from(n));
        for _ in 0..k {
            v = v.div_int(10);
        }
        v
    }
}

/// `alpha_bar_t` for a linear schedule from `b0` to `b1` (given as decimals
/// `n / 10^k`), as a double-double running product.
pub fn alpha_bar_oracle(steps: u32, b0: (u32, u32), b1: (u32, u32)) -> Vec<f64> {
    let (lo, hi) = (dd::decimal(b0.0, b0.1), dd::decimal(b1.0, b1.1));
    let span = hi.add(lo.neg());
    let mut acc = dd::Dd::from(1.0);
    let mut out = Vec::with_capacity(steps as usize + 1);
    out.push(1.0);
    for i in 0..steps {
        let beta = lo.add(span.mul(dd::Dd::from(f64::from(i))).div_int(steps - 1));
        acc = acc.mul(dd::Dd::from(1.0).add(beta.neg()));
        out.push(acc.value());
    }
    out
}

/// Pearson correlation straight from the definition.
pub fn zncc_direct(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Mann-Whitney U by pair counting (ties count one half).
pub fn u_by_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided exact p: distribution of U over every way of choosing which
/// pooled values belong to the first sample, enumerated recursively.
pub fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let observed = u_by_pairs(a, b);
    let mut us = Vec::new();
    fn choose(start: usize, left: usize, picked: &mut Vec<usize>, pooled: &[f64], us: &mut Vec<f64>) {
        if left == 0 {
            let first: Vec<f64> = picked.iter().map(|&i| pooled[i]).collect();
            let rest: Vec<f64> = (0..pooled.len())
                .filter(|i| !picked.contains(i))
                .map(|i| pooled[i])
                .collect();
            us.push(u_by_pairs(&first, &rest));
            return;
        }
        for i in start..=pooled.len() - left {
            picked.push(i);
            choose(i + 1, left - 1, picked, pooled, us);
            picked.pop();
        }
    }
    choose(0, a.len(), &mut Vec::new(), &pooled, &mut us);
    let total = us.len() as f64;
    let le = us.iter().filter(|&&u| u <= observed + 1e-9).count() as f64 / total;
    let ge = us.iter().filter(|&&u| u >= observed - 1e-9).count() as f64 / total;
    (2.0 * le.min(ge)).min(1.0)
}

/// Largest per-parameter relative error between analytic and central-difference
/// gradients of the noise loss on a small double-precision U-Net.
pub fn micro_net_gradient_error(seed: u64) -> (f64, usize) {
    let net = UNet::new(UNetSpec {
        rank: 2,
        base_channels: 4,
        depth: 2,
        time_embed_dim: 8,
    });
    let mut r = rng::seeded(seed);
    // Every parameter random so that no gradient path is trivially zero.
    let params: Vec<f64> = (0..net.param_count()).map(|_| r.random_range(-0.5..0.5)).collect();
    let geom = Geometry::from_shape(&[8, 8]);
    let n = 2;
    let x: Vec<f64> = (0..n * 64).map(|_| r.random_range(-1.0..1.0)).collect();
    let eps: Vec<f64> = (0..n * 64).map(|_| r.random_range(-1.0..1.0)).collect();
    let steps = [3, 517];
    let input = || Tensor::from_vec(n, 1, geom, x.clone());
    let (_, grad) = eps_loss_and_grad(&net, &params, input(), &steps, &eps);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.len() {
        p[i] = params[i] + h;
        let (up, _) = eps_loss_and_grad(&net, &p, input(), &steps, &eps);
        p[i] = params[i] - h;
        let (down, _) = eps_loss_and_grad(&net, &p, input(), &steps, &eps);
        p[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs()).max(1e-7);
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    (worst, params.len())
}

/// Predicts zero noise.
pub struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(&self, x_t: &ImageTensor, _t: usize) -> Result<ImageTensor> {
        ImageTensor::zeros(x_t.shape(), ValueRange::Model)
    }
}

/// Knows the clean image and returns the exact noise that separates it from `x_t`.
pub struct OracleNoise<'a> {
    pub x0: ImageTensor,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for OracleNoise<'_> {
    fn predict_noise(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let ab = self.schedule.alpha_bar(t);
        x_t.zip_map(&self.x0, |x, c| (x - ab.sqrt() * c) / (1.0 - ab).sqrt())
    }
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toy_config_path() -> PathBuf {
    repo_root().join("configs/toy.toml")
}

pub fn toy_config() -> FileConfig {
    let text = std::fs::read_to_string(toy_config_path()).expect("configs/toy.toml");
    toml::from_str(&text).expect("toy config parses")
}

pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("s2m-cache"))
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

pub fn s2m() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_s2m"));
    c.env(CACHE_ENV, cache_root());
    c
}

/// Checkpoint of the pinned toy run, trained through the CLI on first use and
/// reused afterwards (keyed by the config file contents). A partial run left
/// by an interrupted session is resumed.
pub fn toy_checkpoint() -> PathBuf {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let text = std::fs::read(toy_config_path()).expect("configs/toy.toml");
        let dir = cache_root().join(format!("toy-model-{:016x}", fnv(&text)));
        let ckpt = dir.join("denoiser.ckpt");
        let total = toy_config().train.steps;
        let done = load_checkpoint(&ckpt).map_or(0, |c| c.state.step);
        if done < total {
            eprintln!("training the toy denoiser ({done}/{total} steps cached) into {}", dir.display());
            let mut cmd = s2m();
            cmd.arg("--config").arg(toy_config_path()).arg("--out").arg(&dir).arg("train");
            if done > 0 {
                cmd.arg("--resume").arg(&ckpt).arg("--steps").arg((total - done).to_string());
            }
            let status = cmd.status().expect("run s2m train");
            assert!(status.success(), "toy training failed: {status}");
        }
        ckpt
    })
    .clone()
}
